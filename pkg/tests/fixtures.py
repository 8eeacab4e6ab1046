"""Stored run records for the report tests: a no-transfer group and two distillation groups.

Per-seed values are chosen so the group means display as 63.1, 75.6 and 61.7
while the deltas of the unrounded means display as +12.4 and -1.5.
"""
from atl.experiment import RunRecord, RunStore, fingerprint_of

DATASET = {"source": "imagenet-1k"}

GROUPS = {
    "not-vit-b": ([63.05, 63.12, 63.23], {"method": "none"}),
    "distill-deit-s": ([75.42, 75.56, 75.70], {"method": "distill", "loss_kind": "CE", "lambda": 3.0}),
    "distill-dinov2-b": ([61.57, 61.66, 61.75], {"method": "distill", "loss_kind": "CE", "lambda": 3.0}),
}


def fingerprint(name):
    return fingerprint_of({"name": name, "dataset": DATASET})


def table1_store(root) -> RunStore:
    store = RunStore(root)
    base = fingerprint("not-vit-b")
    for name, (values, plan) in GROUPS.items():
        for seed, top1 in enumerate(values):
            store.append(RunRecord(
                config_fingerprint=fingerprint(name), name=name, seed=seed, final_top1=top1,
                per_epoch_top1=[top1], plan=plan, recipe_name="distill-paper", wall_time_s=0.0,
                dataset=DATASET, config={"name": name, "dataset": DATASET},
                baseline_ref=None if name == "not-vit-b" else base,
                started_at="2026-01-01T00:00:00+00:00", finished_at="2026-01-01T00:00:00+00:00"))
    return store
