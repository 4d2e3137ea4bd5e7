import time

import numpy as np

from bevinterp.config import default_config
from bevinterp.encoders import pretrain_encoder
from bevinterp.evaluation import evaluate_scenario
from bevinterp.losses import LossWeights
from bevinterp.scene import generate_dataset
from bevinterp.training import (
    CollabModel,
    _derive_seed,
    adapt_phase2,
    run_phase1,
    save_checkpoint,
)

t0 = time.time()
cfg = default_config()
ds = generate_dataset(2024, cfg["data"]["n_scenes"], cfg["data"]["n_objects"], cfg["extent"])
model = CollabModel(cfg, seed=42)
for eid in model.specs:
    _, _, ap = pretrain_encoder(model.encoders[eid], model.heads[eid], ds,
                                steps=500, lr=cfg["training"]["pretrain_lr"],
                                seed=_derive_seed(42, "pretrain", eid))
    print(f"pretrain {eid}: AP@0.5={ap:.3f}")

w = LossWeights(**cfg["losses"])
state = run_phase1(model, ds, cfg["phase1_neighbors"], steps=500, weights=w, seed=42,
                   log_path="/tmp/p1b.csv")
print(f"phase1 done {time.time()-t0:.0f}s last={ {k: round(v,2) for k,v in state.metrics['phase1_last'].items()} }")
save_checkpoint(state, "/tmp/base.ckpt")

state2 = adapt_phase2(state, "toy-C", ds, steps=200, weights=w, seed=43,
                      log_path="/tmp/p2b.csv")
print("phase2 last:", {k: round(v, 2) for k, v in state2.metrics["phase2_last"].items()})

for split in ("train", "test"):
    for mode in ("collab", "ego_only", "no_interp"):
        r = evaluate_scenario(model, ds, "toy-C", mode, split=split)
        print(f"{split:5s} {mode:9s}: ap50={r['ap50']:.3f} ap70={r['ap70']:.3f}")

# detection count diagnostics on a few test scenes
from bevinterp.detection import decode_boxes, head_forward
from bevinterp.encoders import encode
from bevinterp.evaluation import fuse_max, _channel_fit
from bevinterp.interpreter import interpret
from bevinterp.scene import agent_views, rasterize_points

grid = model.ego_feature_grid
ego_enc = model.encoders[model.ego_id]
neb_enc = model.encoders["toy-C"]
head = model.heads[model.ego_id]
for si, scene in enumerate(ds.split_scenes("test")[:3]):
    views = agent_views(scene, 2)
    f_ego = encode(ego_enc, rasterize_points(views[0][0], ego_enc.spec.grid))
    f_neb = encode(neb_enc, rasterize_points(views[1][0], neb_enc.spec.grid))
    out, inter = interpret(f_ego, f_neb, "toy-C", model.net, model.prompts)
    dets_ego = decode_boxes(head_forward(head, f_ego.data), grid)
    dets_col = decode_boxes(head_forward(head, fuse_max(f_ego.data, out)), grid)
    print(f"scene {si}: gt={len(scene.boxes)} ego_dets={len(dets_ego)} collab_dets={len(dets_col)}"
          f" | out range=({out.data.min():.2f},{out.data.max():.2f})"
          f" ego range=({f_ego.data.data.min():.2f},{f_ego.data.data.max():.2f})")
print(f"TOTAL {time.time()-t0:.0f}s")
