"""Brute-force cosine index: exact top-k, dedup, and leave-one-out voting."""
import numpy as np

from tadpool.adapt import TaskSpec
from tadpool.data import embed_for_retrieval, pool_eval_labels
from tadpool.index import build_index, random_neighbor_table
from tadpool.numerics import Rng

task = TaskSpec(num_classes=5, dim=16, n_source=100, n_target=100, n_pool=2000,
                num_planes=2, pool_target_mix=0.5, num_distractors=3)
_, target, pool = task.realize(seed=3)

emb = embed_for_retrieval(pool.samples)
index, dropped = build_index(emb, pool.ids, tags=pool.tags)
print(f"index holds {len(index.alive_ids())} of {len(pool)} rows "
      f"({len(dropped)} near-duplicates dropped)")

q = embed_for_retrieval(target.samples[:1])[0]
for nid, sim in index.top_k(q, 5):
    print(f"  neighbor {nid}  cos={sim:.4f}")

# leave-one-out majority vote over the pool, scored with generator labels
labels = {int(i): int(l) for i, l in
          zip(pool.ids, pool_eval_labels(pool, task.num_classes))}
alive = set(int(i) for i in index.alive_ids())
rows = [(row, int(pid)) for row, pid in zip(emb, pool.ids) if int(pid) in alive]
for k in (1, 5, 15):
    hits = 0
    for row, pid in rows:
        votes = [n for n, _ in index.top_k(row, k + 1) if n != pid][:k]
        pred = np.bincount([labels[n] for n in votes]).argmax()
        hits += pred == labels[pid]
    print(f"k={k:>2}  leave-one-out accuracy {hits / len(rows):.3f}")

# uniform-random tables have the same shape but no signal
rt = random_neighbor_table(index.alive_ids(), target.ids, per_query=10, rng=Rng(0))
print("random table queries:", len(rt.ids()), "first row:", rt.neighbors(int(target.ids[0]))[:5])
