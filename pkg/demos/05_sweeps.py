"""The ablation drivers, printed as plain tables (same engines as the CLI)."""
from tadpool.adapt import (AdaptationConfig, ModelSpec, TaskSpec, prepare_run,
                           run_fraction_sweep, run_nn_sweep, run_pool_ablations,
                           run_retriever_ablation, run_domain_gap_sweep)
from tadpool.losses import LossConfig

task = TaskSpec(num_classes=4, dim=16, n_source=600, n_target=300, n_pool=4000,
                num_planes=8, rotation=0.45, pool_target_mix=0.3, num_distractors=3)
model = ModelSpec(hidden_dims=(64,), feature_dim=16)
cfg = AdaptationConfig(epochs=10, batch_size=32, base_lr=0.001,
                       bank_capacity=16384, warmup_epochs=2,
                       data_seed=11, init_seed=11, augment_seed=11,
                       loss=LossConfig(num_retrieved=2, candidate_factor=20))
prep = prepare_run(task, model, cfg, source_epochs=10)


def show(title, rows):
    print(f"\n--- {title}")
    for row in rows:
        print("   ", {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})


show("fraction sweep", run_fraction_sweep(prep, cfg, [0.1, 0.5, 1.0]))
show("retrieved-neighbor count", run_nn_sweep(prep, cfg, [0, 2, 8]))
show("retriever ablation", run_retriever_ablation(prep, cfg))
show("pool ablations", run_pool_ablations(prep, cfg, [
    ("target_like_only", {1}),
    ("distractors_only", {2, 3, 4}),
]))

rows, rho = run_domain_gap_sweep(task, model, cfg, [0.0, 0.5, 1.0], source_epochs=10)
show("domain gap sweep", rows)
print(f"    spearman rho = {rho:+.3f}")
