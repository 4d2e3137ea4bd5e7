import sys
import time

import numpy as np

from bevinterp.config import default_config
from bevinterp.encoders import pretrain_encoder
from bevinterp.evaluation import evaluate_scenario
from bevinterp.losses import LossWeights
from bevinterp.scene import generate_dataset
from bevinterp.training import CollabModel, _derive_seed, adapt_phase2, run_phase1

gain = float(sys.argv[1])
lr = float(sys.argv[2])

cfg = default_config()
cfg["interpreter"]["ln_gain_init"] = gain
cfg["training"]["lr"] = lr
ds = generate_dataset(2024, cfg["data"]["n_scenes"], cfg["data"]["n_objects"], cfg["extent"])
model = CollabModel(cfg, seed=42)
for eid in model.specs:
    pretrain_encoder(model.encoders[eid], model.heads[eid], ds, steps=500,
                     lr=cfg["training"]["pretrain_lr"],
                     seed=_derive_seed(42, "pretrain", eid))
w = LossWeights(**cfg["losses"])
t = time.time()
state = run_phase1(model, ds, cfg["phase1_neighbors"], steps=500, weights=w, seed=42)
state2 = adapt_phase2(state, "toy-C", ds, steps=200, weights=w, seed=43)
res = {}
for mode in ("collab", "ego_only", "no_interp"):
    res[mode] = evaluate_scenario(model, ds, "toy-C", mode)
print(f"gain={gain} lr={lr}: collab={res['collab']['ap50']:.3f}/{res['collab']['ap70']:.3f}"
      f" ego={res['ego_only']['ap50']:.3f} no_interp={res['no_interp']['ap50']:.3f}"
      f" p1last={state.metrics['phase1_last']['total']:.1f}"
      f" p2last={state2.metrics['phase2_last']['total']:.1f}"
      f" ({time.time()-t:.0f}s)")
