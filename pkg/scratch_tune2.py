import sys
import time

import numpy as np

from bevinterp.config import default_config
from bevinterp.encoders import pretrain_encoder
from bevinterp.evaluation import evaluate_scenario
from bevinterp.losses import LossWeights
from bevinterp.scene import generate_dataset
from bevinterp.training import CollabModel, _derive_seed, adapt_phase2, run_phase1

n_objects = int(sys.argv[1])
lr1 = float(sys.argv[2])
lr2 = float(sys.argv[3])
seed = int(sys.argv[4])

cfg = default_config()
cfg["data"]["n_objects"] = n_objects
cfg["training"]["lr"] = lr1
ds = generate_dataset(2024, cfg["data"]["n_scenes"], n_objects, cfg["extent"])
model = CollabModel(cfg, seed=seed)
aps = {}
for eid in model.specs:
    _, _, aps[eid] = pretrain_encoder(model.encoders[eid], model.heads[eid], ds,
                                      steps=500, lr=cfg["training"]["pretrain_lr"],
                                      seed=_derive_seed(seed, "pretrain", eid))
w = LossWeights(**cfg["losses"])
t = time.time()
state = run_phase1(model, ds, cfg["phase1_neighbors"], steps=500, weights=w, seed=seed)
cfg2 = model.config
cfg2["training"]["lr"] = lr2
state2 = adapt_phase2(state, "toy-C", ds, steps=200, weights=w, seed=seed + 1)
line = [f"obj={n_objects} lr1={lr1} lr2={lr2} seed={seed}",
        "base=" + "/".join(f"{aps[e]:.2f}" for e in model.specs)]
for nid in ("toy-C", "toy-B", "toy-D"):
    r = evaluate_scenario(model, ds, nid, "collab")
    line.append(f"{nid}={r['ap50']:.3f}")
for mode in ("ego_only", "no_interp"):
    r = evaluate_scenario(model, ds, "toy-C", mode)
    line.append(f"{mode}={r['ap50']:.3f}")
line.append(f"({time.time()-t:.0f}s)")
print(" ".join(line), flush=True)
