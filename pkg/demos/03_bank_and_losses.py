"""Memory bank mechanics and the two loss terms, by hand on tiny vectors."""
import numpy as np

from tadpool.bank import BankEntry, MemoryBank, Origin
from tadpool.losses import ce_consistency, filtered_pseudo_label, info_nce


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# --- FIFO queue with a capacity of 3 -----------------------------------
bank = MemoryBank(capacity=3)
for i in range(5):
    bank.enqueue([BankEntry(sample_id=i, origin=Origin.TARGET,
                            feature=unit([1, i]), logits=np.array([0.1 * i, 1.0]))])
    alive = sorted(e.sample_id for e in bank.entries())
    print(f"after enqueue {i}: size={len(bank)} alive={alive}")
# ids 0 and 1 fell off the front: FIFO

# --- pseudo-labels smooth over snapshots --------------------------------
bank2 = MemoryBank(capacity=16)
noisy = [np.array([2.0, 0.1]), np.array([0.3, 0.5]), np.array([1.5, 0.2])]
for step, lg in enumerate(noisy):
    bank2.enqueue([BankEntry(7, Origin.TARGET, unit([1, step]), lg)])
label, avg = filtered_pseudo_label(bank2, 7, current_logits=np.array([0.0, 2.9]))
print("single-view label would be", int(np.argmax([0.0, 2.9])),
      "| aggregated label:", label, "avg logits:", np.round(avg, 3))

# --- InfoNCE pulls the pair together, pushes negatives away -------------
q, k = unit([1.0, 0.2]), unit([1.0, 0.3])
negs = np.stack([unit([-1, 0.1]), unit([0.2, -1])])
loss, gq, gk, gn = info_nce(q, k, negs, temperature=0.1)
print(f"info_nce loss={loss:.4f}")
print("  moving q along -grad raises q.k:", float((q - 0.01 * gq) @ k) > float(q @ k))

# finite-difference check of the query gradient
eps = 1e-6
num = np.zeros(2)
for j in range(2):
    e = np.zeros(2); e[j] = eps
    # renormalize so the perturbed query stays unit length
    lp = info_nce(unit(q + e), k, negs, 0.1)[0]
    lm = info_nce(unit(q - e), k, negs, 0.1)[0]
    num[j] = (lp - lm) / (2 * eps)
# project analytic grad onto the tangent space of the unit sphere at q
tang = gq - (gq @ q) * q
print("fd-vs-analytic (tangent):", np.round(num, 4), "vs", np.round(tang, 4))

loss_ce, grad_ce = ce_consistency(np.array([2.0, -1.0, 0.5]), label=0)
print(f"ce={loss_ce:.4f} grad={np.round(grad_ce, 3)} (sums to 0: {abs(grad_ce.sum()) < 1e-12})")
