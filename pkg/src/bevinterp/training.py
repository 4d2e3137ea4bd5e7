"""Two-phase training orchestration, freeze schedules, and checkpoints.

Phase 1 jointly trains the interpreter, prompts, and discriminator against
frozen encoders and the frozen ego head, alternating interpreter and
discriminator updates. Phase 2 adapts to one new neighbor type by training
only its specific prompt and resizer. Checkpoints capture parameters,
optimizer moments, and RNG state, so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .detection import DetectionHead, detection_loss, head_forward
from .encoders import Encoder, EncoderSpec, encode, _feature_grid
from .interpreter import (
    InterpreterNet,
    PromptSet,
    RegistryError,
    SpecificPrompt,
    init_prompt_lowrank,
    init_prompt_sampling,
    interpret,
)
from .losses import (
    Discriminator,
    LossWeights,
    TrainingError,
    adversarial_losses,
    phase1_loss,
    phase2_loss,
    style_loss,
)
from .scene import Dataset, GridSpec, agent_views, rasterize_points

CHECKPOINT_MAGIC = b"PICK1"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ["step", "l_collab", "l_single", "l_style_s",
               "l_adv_d", "l_adv_gen", "l_style_g", "total"]


class CheckpointError(ValueError):
    pass


class ConfigDriftError(CheckpointError):
    """Checkpoint config hash does not match the expected one."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _derive_seed(seed: int, *tags) -> int:
    h = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little")


class Adam:
    """Adaptive-moment optimizer over an explicit trainable parameter set."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if p.frozen:
                raise TrainingError(f"optimizer given frozen parameter {p.name!r}")
        self.lr, self.betas, self.eps = float(lr), tuple(betas), float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.tensor.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m[:] = b1 * m + (1 - b1) * g
            v[:] = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.tensor.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "t": self.t, "params": [p.name for p in self.params]}

    def load_moments(self, m: dict, v: dict, t: int):
        self.t = int(t)
        for p in self.params:
            self.m[p.name][:] = m[p.name]
            self.v[p.name][:] = v[p.name]


class CollabModel:
    """Every parameter in one place: encoders, heads, interpreter, prompts, D."""

    def __init__(self, config: dict, seed: int):
        self.config = config
        self.seed = int(seed)
        extent = config["extent"]
        self.specs: dict[str, EncoderSpec] = {}
        self.encoders: dict[str, Encoder] = {}
        self.heads: dict[str, DetectionHead] = {}
        for s in config["encoders"]["specs"]:
            grid = grid_for(extent, s["cell_size"])
            spec = EncoderSpec(id=s["id"], out_channels=s["out_channels"],
                               downsample=s["downsample"], mixing_seed=s["mixing_seed"],
                               activation=s["activation"], grid=grid)
            self.specs[spec.id] = spec
            self.encoders[spec.id] = Encoder(spec)
            self.heads[spec.id] = DetectionHead(f"head.{spec.id}", spec.out_channels)
        self.ego_id = config["encoders"]["ego"]
        ego_spec = self.specs[self.ego_id]
        h1, w1 = ego_spec.feature_hw
        icfg = config["interpreter"]
        self.net = InterpreterNet(
            c1=ego_spec.out_channels, h1=h1, w1=w1, d_k=icfg["d_k"],
            window=icfg["window"], channel_adapter=icfg["channel_adapter"],
            normalize_qk=icfg["normalize_qk"], ln_eps=icfg.get("ln_eps", 1e-5),
            ln_gain_init=icfg.get("ln_gain_init", 1.0),
            seed=_derive_seed(seed, "interpreter"),
        )
        self.prompts = PromptSet(np.zeros((ego_spec.out_channels, h1, w1)))
        self.disc = Discriminator(ego_spec.out_channels,
                                  seed=_derive_seed(seed, "discriminator"))
        self.introduced_in: dict[str, int] = {}
        self.meta: dict = {}

    # -- parameter plumbing -------------------------------------------------
    @property
    def ego_spec(self) -> EncoderSpec:
        return self.specs[self.ego_id]

    @property
    def ego_feature_grid(self) -> GridSpec:
        return _feature_grid(self.ego_spec)

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for eid in self.specs:
            for p in self.encoders[eid].parameters() + self.heads[eid].parameters():
                out[p.name] = p
        for p in self.net.parameters() + self.prompts.parameters() + self.disc.parameters():
            out[p.name] = p
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.tensor.zero_grad()

    def interpreter_param_names(self):
        """Interpreter network + all prompts: the namespace fraction claims use."""
        return [n for n in self.parameters()
                if n.startswith("interpreter.") or n.startswith("prompts.")]

    # -- freeze schedule ------------------------------------------------------
    def freeze_ledger(self) -> dict:
        """name -> {phase1, phase2} trainability."""
        ledger = {}
        core = {p.name for p in self.net.core_parameters()}
        core.add(self.prompts.general.name)
        disc = {p.name for p in self.disc.parameters()}
        for name in self.parameters():
            if name.startswith("encoder.") or name.startswith("head."):
                ledger[name] = {"phase1": False, "phase2": False}
            elif name in core or name in disc:
                ledger[name] = {"phase1": True, "phase2": False}
            else:
                ledger[name] = None  # per-neighbor, resolved below
        for eid, phase in self.introduced_in.items():
            names = [p.name for p in self.prompts.get(eid).parameters()]
            if eid in self.net.resizers:
                names.append(self.net.resizers[eid].name)
            for name in names:
                ledger[name] = {"phase1": phase == 1, "phase2": phase == 2}
        missing = [n for n, v in ledger.items() if v is None]
        if missing:
            raise TrainingError(f"parameters without a freeze entry: {missing}")
        return ledger

    def apply_phase(self, phase: int):
        ledger = self.freeze_ledger()
        key = f"phase{phase}"
        for name, p in self.parameters().items():
            p.frozen = not ledger[name][key]

    def trainable_parameters(self, phase: int):
        ledger = self.freeze_ledger()
        key = f"phase{phase}"
        return [p for n, p in self.parameters().items() if ledger[n][key]]


def grid_for(extent, cell_size: float) -> GridSpec:
    x0, x1, y0, y1 = extent
    w = (x1 - x0) / cell_size
    h = (y1 - y0) / cell_size
    if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9:
        raise ValueError(f"cell size {cell_size} does not tile extent {extent}")
    return GridSpec(cell_size, int(round(h)), int(round(w)), (x0, y0))


# -- checkpoint container ------------------------------------------------------

@dataclass
class TrainState:
    model: CollabModel
    rng_state: dict | None = None
    optim: dict = field(default_factory=dict)       # tag -> Adam
    step: int = 0
    phase: int | None = None
    metrics: dict = field(default_factory=dict)


def save_checkpoint(state: TrainState, path):
    model = state.model
    params = model.parameters()
    blob_meta = []
    offset = 0
    chunks = []
    for name, p in params.items():
        blob_meta.append({"name": name, "shape": list(p.shape), "offset": offset,
                          "frozen": p.frozen})
        offset += p.count
        chunks.append(np.ascontiguousarray(p.tensor.data, dtype="<f8").tobytes())
    optim_meta = {}
    for tag in sorted(state.optim):
        opt = state.optim[tag]
        entry = opt.state_dict()
        entry["moments"] = []
        for p in opt.params:
            for kind, buf in (("m", opt.m[p.name]), ("v", opt.v[p.name])):
                blob_meta.append({"name": f"optim.{tag}.{kind}.{p.name}",
                                  "shape": list(buf.shape), "offset": offset,
                                  "frozen": False})
                offset += buf.size
                chunks.append(np.ascontiguousarray(buf, dtype="<f8").tobytes())
            entry["moments"].append(p.name)
        optim_meta[tag] = entry
    registry = []          # ordered: JSON dicts get key-sorted, lists do not
    for eid, sp in model.prompts.specifics.items():
        registry.append({"id": eid, "form": sp.form, "depth_factor": sp.depth_factor,
                         "channels": sp.channels})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config,
        "config_hash": config_hash(model.config),
        "seed": model.seed,
        "blobs": blob_meta,
        "param_names": [name for name in params],
        "prompt_registry": registry,
        "resizer_ids": list(model.net.resizers),
        "introduced_in": [[k, v] for k, v in model.introduced_in.items()],
        "rng_state": state.rng_state,
        "optim": optim_meta,
        "step": state.step,
        "phase": state.phase,
        "metrics": state.metrics,
        "meta": model.meta,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for chunk in chunks:
            f.write(chunk)


def load_checkpoint(path, expect_config_hash: str | None = None) -> TrainState:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        manifest = json.loads(f.readline().decode())
        payload = f.read()
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    if expect_config_hash is not None and manifest["config_hash"] != expect_config_hash:
        raise ConfigDriftError(
            f"checkpoint config hash {manifest['config_hash'][:12]} != expected "
            f"{expect_config_hash[:12]}"
        )
    model = CollabModel(manifest["config"], manifest["seed"])
    h1, w1 = model.ego_spec.feature_hw
    shapes = {b["name"]: b["shape"] for b in manifest["blobs"]}
    for entry in manifest["prompt_registry"]:
        eid = entry["id"]
        c2 = entry["channels"]
        if entry["form"] == "dense":
            sp = SpecificPrompt(eid, dense=np.zeros((c2, h1, w1)))
        else:
            t = entry["depth_factor"]
            cb = c2 // t
            r = shapes[f"prompts.specific.{eid}.u"][2]
            sp = SpecificPrompt(eid, u=np.zeros((cb, h1, r)), v=np.zeros((cb, r, w1)),
                                depth_factor=t)
        model.prompts.register(sp)
    for eid in manifest["resizer_ids"]:
        model.net.add_resizer(eid, model.specs[eid].out_channels)
    model.introduced_in = {k: int(v) for k, v in manifest["introduced_in"]}
    model.meta = manifest.get("meta", {})

    blobs = {b["name"]: b for b in manifest["blobs"]}

    def read_blob(name) -> np.ndarray:
        b = blobs[name]
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        need = (b["offset"] + count) * 8
        if need > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        return np.frombuffer(payload, dtype="<f8", count=count,
                             offset=b["offset"] * 8).reshape(b["shape"]).copy()

    params = model.parameters()
    if manifest["param_names"] != list(params):
        raise CheckpointError("parameter set mismatch between manifest and rebuilt model")
    for name, p in params.items():
        p.tensor.data[:] = read_blob(name)
        p.frozen = blobs[name]["frozen"]

    state = TrainState(model=model, rng_state=manifest["rng_state"],
                       step=int(manifest["step"]),
                       phase=manifest["phase"], metrics=manifest.get("metrics", {}))
    for tag, entry in manifest["optim"].items():
        params_by_name = model.parameters()
        opt = Adam([params_by_name[n] for n in entry["params"]], lr=entry["lr"],
                   betas=tuple(entry["betas"]), eps=entry["eps"])
        m = {n: read_blob(f"optim.{tag}.m.{n}") for n in entry["moments"]}
        v = {n: read_blob(f"optim.{tag}.v.{n}") for n in entry["moments"]}
        opt.load_moments(m, v, entry["t"])
        state.optim[tag] = opt
    return state


# -- shared step machinery ------------------------------------------------------

class FeatureCache:
    """Per-run cache of frozen-encoder outputs keyed by (scene, view, encoder)."""

    def __init__(self, model: CollabModel, data: Dataset, split: str, n_agents: int = 2):
        self.model = model
        self.scenes = data.split_scenes(split)
        self.n_agents = n_agents
        self._store: dict = {}

    def feature(self, scene_idx: int, view: int, encoder_id: str):
        key = (scene_idx, view, encoder_id)
        if key not in self._store:
            enc = self.model.encoders[encoder_id]
            if not enc.frozen:
                raise TrainingError(f"encoder {encoder_id!r} is not pretrained/frozen")
            scene = self.scenes[scene_idx]
            pts, _ = agent_views(scene, self.n_agents)[view]
            raster = rasterize_points(pts, enc.spec.grid)
            self._store[key] = encode(enc, raster).data.data
        from .encoders import BevFeature

        enc = self.model.encoders[encoder_id]
        return BevFeature(data=Tensor(self._store[key]), encoder_id=encoder_id,
                          grid=enc.spec.grid)

    def visible_boxes(self, scene_idx: int, view: int) -> np.ndarray:
        scene = self.scenes[scene_idx]
        return agent_views(scene, self.n_agents)[view][1]


def _scene_losses(model: CollabModel, cache: FeatureCache, scene_idx: int,
                  neighbor_id: str, with_adversarial: bool):
    """Forward pass and all loss terms for one (scene, neighbor) pair."""
    scene = cache.scenes[scene_idx]
    f_ego = cache.feature(scene_idx, 0, model.ego_id)
    f_neb = cache.feature(scene_idx, 1, neighbor_id)
    out, inter = interpret(f_ego, f_neb, neighbor_id, model.net, model.prompts)
    fused = ad.maximum(f_ego.data, out)
    ego_head = model.heads[model.ego_id]
    grid = model.ego_feature_grid
    parts = {
        "collab": detection_loss(head_forward(ego_head, fused), scene.boxes, grid),
        "single": detection_loss(head_forward(ego_head, inter["f_s"]),
                                 cache.visible_boxes(scene_idx, 1), grid),
        "style_s": style_loss(inter["f_s"], f_ego.data),
    }
    loss_d = None
    if with_adversarial:
        loss_d, loss_gen = adversarial_losses(model.disc, inter["f_g"], f_ego.data)
        parts["adv_gen"] = loss_gen
        parts["style_g"] = style_loss(inter["f_g"], f_ego.data)
    return parts, loss_d


class TrainLog:
    def __init__(self, path):
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "a", newline="")
            self._writer = csv.writer(self._fh)
            if self._fh.tell() == 0:
                self._writer.writerow(LOG_COLUMNS)

    def write(self, step: int, breakdown: dict, loss_d: float):
        if self._fh is None:
            return
        self._writer.writerow([
            step,
            f"{breakdown.get('collab', 0.0):.8f}",
            f"{breakdown.get('single', 0.0):.8f}",
            f"{breakdown.get('style_s', 0.0):.8f}",
            f"{loss_d:.8f}",
            f"{breakdown.get('adv_gen', 0.0):.8f}",
            f"{breakdown.get('style_g', 0.0):.8f}",
            f"{breakdown.get('total', 0.0):.8f}",
        ])

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- phase 1 --------------------------------------------------------------------

def setup_phase1(model: CollabModel, data: Dataset, neighbor_ids, seed: int):
    """Sampling-init the general and per-neighbor prompts, register resizers."""
    for eid in [model.ego_id, *neighbor_ids]:
        if not model.encoders[eid].frozen:
            raise TrainingError(f"missing pretrained encoder {eid!r}: pretrain first")
    n = model.config["interpreter"]["sample_count"]
    h1w1 = model.ego_spec.feature_hw
    if not model.meta.get("general_prompt_initialized"):
        g = init_prompt_sampling(model.encoders[model.ego_id], data, n, h1w1,
                                 seed=_derive_seed(seed, "prompt", "general"))
        model.prompts.general.tensor.data[:] = g
        model.meta["general_prompt_initialized"] = True
    for eid in neighbor_ids:
        if eid in model.prompts.specifics:
            continue
        dense = init_prompt_sampling(model.encoders[eid], data, n, h1w1,
                                     seed=_derive_seed(seed, "prompt", eid))
        model.prompts.register(SpecificPrompt(eid, dense=dense))
        model.net.add_resizer(eid, model.specs[eid].out_channels)
        model.introduced_in[eid] = 1


def run_phase1(model: CollabModel, data: Dataset, neighbor_ids, steps: int,
               weights: LossWeights, seed: int, log_path=None,
               resume: TrainState | None = None) -> TrainState:
    """Base training: random (scene, neighbor) per step, alternating D updates."""
    if not neighbor_ids:
        raise TrainingError("phase 1 needs at least one neighbor")
    neighbor_ids = list(neighbor_ids)
    setup_phase1(model, data, neighbor_ids, seed)
    model.apply_phase(1)
    tcfg = model.config["training"]
    if resume is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        opt_interp, opt_disc = resume.optim["interp"], resume.optim["disc"]
        start = resume.step
    else:
        rng = np.random.default_rng(_derive_seed(seed, "phase1"))
        disc_names = {p.name for p in model.disc.parameters()}
        interp_params = [p for p in model.trainable_parameters(1)
                         if p.name not in disc_names]
        opt_interp = Adam(interp_params, lr=tcfg["lr"], betas=tuple(tcfg["betas"]))
        opt_disc = Adam(model.disc.parameters(), lr=tcfg["lr"], betas=tuple(tcfg["betas"]))
        start = 0
    cache = FeatureCache(model, data, "train")
    if not cache.scenes:
        raise TrainingError("phase 1 needs a non-empty train split")
    log = TrainLog(log_path)
    last = {}
    try:
        for step in range(start, steps):
            scene_idx = int(rng.integers(len(cache.scenes)))
            neighbor_id = neighbor_ids[int(rng.integers(len(neighbor_ids)))]
            parts, loss_d = _scene_losses(model, cache, scene_idx, neighbor_id,
                                          with_adversarial=True)
            if not np.isfinite(loss_d.item()):
                raise TrainingError(f"non-finite loss term 'adv_d' at step {step}")
            total, breakdown = phase1_loss(parts, weights)
            model.zero_grad()
            total.backward()
            opt_interp.step()
            model.zero_grad()
            loss_d.backward()
            opt_disc.step()
            log.write(step, breakdown, loss_d.item())
            last = dict(breakdown, adv_d=loss_d.item())
    finally:
        log.close()
    return TrainState(model=model, rng_state=rng.bit_generator.state,
                      optim={"interp": opt_interp, "disc": opt_disc},
                      step=steps, phase=1,
                      metrics={"phase1_last": last, "phase1_steps": steps,
                               "neighbors": neighbor_ids})


# -- phase 2 --------------------------------------------------------------------

def setup_phase2(model: CollabModel, data: Dataset, new_id: str, seed: int,
                 prompt_init: str = "sampling", rank: int = 1, depth_factor: int = 1):
    if new_id in model.prompts.specifics:
        raise RegistryError(f"prompt for {new_id!r} already registered")
    if new_id not in model.encoders:
        raise TrainingError(f"unknown encoder id {new_id!r}")
    if not model.encoders[new_id].frozen:
        raise TrainingError(f"missing pretrained encoder {new_id!r}: pretrain first")
    h1, w1 = model.ego_spec.feature_hw
    c2 = model.specs[new_id].out_channels
    if prompt_init == "sampling":
        dense = init_prompt_sampling(model.encoders[new_id], data,
                                     model.config["interpreter"]["sample_count"],
                                     (h1, w1), seed=_derive_seed(seed, "prompt", new_id))
        sp = SpecificPrompt(new_id, dense=dense)
    elif prompt_init == "lowrank":
        sp = init_prompt_lowrank(c2, h1, w1, rank, depth_factor,
                                 seed=_derive_seed(seed, "prompt", new_id),
                                 encoder_id=new_id)
    else:
        raise ValueError(f"unknown prompt init {prompt_init!r}")
    model.prompts.register(sp)
    if new_id not in model.net.resizers:
        model.net.add_resizer(new_id, c2)
    model.introduced_in[new_id] = 2
    return sp


def adapt_phase2(base: TrainState, new_id: str, data: Dataset, steps: int,
                 weights: LossWeights, seed: int, prompt_init: str = "sampling",
                 rank: int = 1, depth_factor: int = 1, log_path=None,
                 resume: TrainState | None = None) -> TrainState:
    """Train only the new agent's specific prompt and resizer on the base model."""
    model = base.model
    tcfg = model.config["training"]
    if resume is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        opt = resume.optim["phase2"]
        start = resume.step
        model.apply_phase(2)
    else:
        setup_phase2(model, data, new_id, seed, prompt_init, rank, depth_factor)
        model.apply_phase(2)
        trainable = model.trainable_parameters(2)
        expected = {p.name for p in model.prompts.get(new_id).parameters()}
        expected.add(model.net.resizer(new_id).name)
        if {p.name for p in trainable} != expected:
            raise TrainingError(
                f"phase 2 trainable set {sorted(p.name for p in trainable)} "
                f"!= {{S_{new_id}, resizer_{new_id}}}"
            )
        opt = Adam(trainable, lr=tcfg["lr"], betas=tuple(tcfg["betas"]))
        rng = np.random.default_rng(_derive_seed(seed, "phase2", new_id))
        start = 0
    cache = FeatureCache(model, data, "train")
    log = TrainLog(log_path)
    last = {}
    try:
        for step in range(start, steps):
            scene_idx = int(rng.integers(len(cache.scenes)))
            parts, _ = _scene_losses(model, cache, scene_idx, new_id,
                                     with_adversarial=False)
            total, breakdown = phase2_loss(parts, weights)
            model.zero_grad()
            total.backward()
            opt.step()
            log.write(step, breakdown, 0.0)
            last = breakdown
    finally:
        log.close()
    return TrainState(model=model, rng_state=rng.bit_generator.state,
                      optim={"phase2": opt}, step=steps, phase=2,
                      metrics=dict(base.metrics, phase2_last=last,
                                   phase2_steps=steps, phase2_neighbor=new_id,
                                   phase2_prompt_init=prompt_init,
                                   phase2_rank=rank, phase2_depth_factor=depth_factor))


# -- audits and reports --------------------------------------------------------

def frozen_param_sha(model: CollabModel, phase: int) -> str:
    """SHA-256 over the bytes of every parameter frozen in the given phase."""
    ledger = model.freeze_ledger()
    key = f"phase{phase}"
    h = hashlib.sha256()
    params = model.parameters()
    for name in sorted(params):
        if not ledger[name][key]:
            h.update(name.encode())
            h.update(params[name].tensor.data.tobytes())
    return h.hexdigest()


def param_bytes(model: CollabModel) -> dict:
    return {name: p.tensor.data.tobytes() for name, p in model.parameters().items()}


def trainable_param_report(model: CollabModel, phase: int):
    """Rows of (name, count, trainable) plus totals for the given phase."""
    ledger = model.freeze_ledger()
    key = f"phase{phase}"
    rows = []
    totals = {"trainable": 0, "frozen": 0, "total": 0}
    for name, p in model.parameters().items():
        trainable = ledger[name][key]
        rows.append((name, p.count, trainable))
        totals["total"] += p.count
        totals["trainable" if trainable else "frozen"] += p.count
    return rows, totals


def interpreter_trainable_fraction(model: CollabModel, phase: int) -> float:
    """Trainable share of the interpreter namespace (network + every prompt)."""
    ledger = model.freeze_ledger()
    key = f"phase{phase}"
    names = model.interpreter_param_names()
    params = model.parameters()
    total = sum(params[n].count for n in names)
    trainable = sum(params[n].count for n in names if ledger[n][key])
    return trainable / total
