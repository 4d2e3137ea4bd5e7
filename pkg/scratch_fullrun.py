import time

import numpy as np

from bevinterp.config import default_config
from bevinterp.encoders import pretrain_encoder
from bevinterp.evaluation import evaluate_scenario
from bevinterp.losses import LossWeights
from bevinterp.scene import generate_dataset
from bevinterp.training import (
    CollabModel,
    adapt_phase2,
    interpreter_trainable_fraction,
    run_phase1,
    _derive_seed,
)

t0 = time.time()
cfg = default_config()
ds = generate_dataset(2024, cfg["data"]["n_scenes"], cfg["data"]["n_objects"], cfg["extent"])
print(f"dataset {time.time()-t0:.1f}s train={len(ds.splits['train'])} test={len(ds.splits['test'])}")

model = CollabModel(cfg, seed=42)
for eid in model.specs:
    t = time.time()
    _, _, ap = pretrain_encoder(
        model.encoders[eid], model.heads[eid], ds,
        steps=cfg["training"]["pretrain_steps"], lr=cfg["training"]["lr"],
        seed=_derive_seed(42, "pretrain", eid))
    print(f"pretrain {eid}: {time.time()-t:.1f}s  homogeneous val AP@0.5={ap:.3f}")

w = LossWeights(**cfg["losses"])
t = time.time()
state = run_phase1(model, ds, cfg["phase1_neighbors"], steps=cfg["training"]["phase1_steps"],
                   weights=w, seed=42, log_path="/tmp/p1.csv")
print(f"phase1 {cfg['training']['phase1_steps']} steps: {time.time()-t:.1f}s")
print("  last:", {k: round(v, 3) for k, v in state.metrics["phase1_last"].items()})

t = time.time()
state2 = adapt_phase2(state, "toy-C", ds, steps=cfg["training"]["phase2_steps"],
                      weights=w, seed=43)
print(f"phase2 {cfg['training']['phase2_steps']} steps: {time.time()-t:.1f}s")
print("  last:", {k: round(v, 3) for k, v in state2.metrics["phase2_last"].items()})
print("  dense trainable fraction:", interpreter_trainable_fraction(model, 2))

t = time.time()
for mode in ("collab", "ego_only", "no_interp"):
    r = evaluate_scenario(model, ds, "toy-C", mode)
    print(f"eval {mode}: ap50={r['ap50']:.3f} ap70={r['ap70']:.3f} ({time.time()-t:.1f}s)")
    t = time.time()

# also check phase-1 neighbors still work through the shared net
for nid in cfg["phase1_neighbors"]:
    r = evaluate_scenario(model, ds, nid, "collab")
    print(f"eval collab {nid}: ap50={r['ap50']:.3f} ap70={r['ap70']:.3f}")
print(f"TOTAL {time.time()-t0:.1f}s")
