"""Config schema, canonical defaults, YAML loading, and validation.

One structured file drives the whole pipeline. The four shipped encoder
specs give the ego a 32-channel feature and three neighbors that differ in
channel count, resolution, activation, and channel semantics.
"""

from __future__ import annotations

import copy

import yaml


class ConfigError(ValueError):
    """Invalid config; message carries the dotted field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


DEFAULT_CONFIG = {
    "extent": [0.0, 48.0, 0.0, 24.0],
    "data": {
        "n_scenes": 200,
        "n_objects": 5,
        "split_fracs": [0.8, 0.1, 0.1],
    },
    "encoders": {
        "ego": "toy-A",
        "specs": [
            {"id": "toy-A", "out_channels": 32, "downsample": 1,
             "mixing_seed": 101, "activation": "relu", "cell_size": 1.0},
            {"id": "toy-B", "out_channels": 16, "downsample": 1,
             "mixing_seed": 202, "activation": "relu", "cell_size": 0.5},
            {"id": "toy-C", "out_channels": 48, "downsample": 2,
             "mixing_seed": 303, "activation": "relu", "cell_size": 0.5},
            {"id": "toy-D", "out_channels": 24, "downsample": 2,
             "mixing_seed": 404, "activation": "tanh", "cell_size": 0.5},
        ],
    },
    "phase1_neighbors": ["toy-B", "toy-D"],
    "interpreter": {
        "d_k": 256,
        "window": 4,
        "channel_adapter": "conv",
        "normalize_qk": False,
        "ln_eps": 1.0e-5,
        "ln_gain_init": 0.5,
        "sample_count": 16,
    },
    "losses": {"omega": 0.5, "lambda_s": 1.0, "lambda_g": 1.0},
    "training": {
        "lr": 1.0e-3,
        "pretrain_lr": 3.0e-3,
        "betas": [0.9, 0.999],
        "pretrain_steps": 500,
        "phase1_steps": 500,
        "phase2_steps": 200,
    },
    "detection": {"conf_threshold": 0.3, "nms_iou": 0.5},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(here, f"expected mapping, got {type(value).__name__}")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, optionally overlaid with a YAML file, then validated."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as f:
                loaded = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise ConfigError(str(path), "config file not found") from None
        if not isinstance(loaded, dict):
            raise ConfigError(str(path), "top level must be a mapping")
        cfg = _merge(cfg, loaded)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    x0, x1, y0, y1 = cfg["extent"]
    if not (x1 > x0 and y1 > y0):
        raise ConfigError("extent", "must satisfy x_max > x_min and y_max > y_min")
    fr = cfg["data"]["split_fracs"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("data.split_fracs", "three fractions summing to 1")
    if cfg["data"]["n_scenes"] < 1:
        raise ConfigError("data.n_scenes", "must be >= 1")

    specs = cfg["encoders"]["specs"]
    ids = [s["id"] for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("encoders.specs", f"duplicate ids in {ids}")
    ego = cfg["encoders"]["ego"]
    if ego not in ids:
        raise ConfigError("encoders.ego", f"{ego!r} not among spec ids {ids}")

    def feature_hw(s, path):
        for span, name in ((x1 - x0, "width"), ((y1 - y0), "height")):
            cells = span / s["cell_size"]
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError(f"{path}.cell_size",
                                  f"{s['cell_size']} does not tile the extent {name}")
        h = int(round((y1 - y0) / s["cell_size"]))
        w = int(round((x1 - x0) / s["cell_size"]))
        if h % s["downsample"] or w % s["downsample"]:
            raise ConfigError(f"{path}.downsample", "must divide the grid size")
        return h // s["downsample"], w // s["downsample"]

    ego_spec = next(s for s in specs if s["id"] == ego)
    h1, w1 = feature_hw(ego_spec, "encoders.specs[ego]")
    for i, s in enumerate(specs):
        path = f"encoders.specs[{i}]"
        h, w = feature_hw(s, path)
        if h % h1 or w % w1 or (h // h1) != (w // w1):
            raise ConfigError(
                path, f"feature {h}x{w} is not an integer multiple of ego {h1}x{w1}"
            )
    for nid in cfg["phase1_neighbors"]:
        if nid not in ids:
            raise ConfigError("phase1_neighbors", f"unknown encoder id {nid!r}")
        if nid == ego:
            raise ConfigError("phase1_neighbors", "ego cannot be its own neighbor")

    icfg = cfg["interpreter"]
    if icfg["channel_adapter"] not in ("matmul", "conv"):
        raise ConfigError("interpreter.channel_adapter", "must be 'matmul' or 'conv'")
    if icfg["d_k"] < 1:
        raise ConfigError("interpreter.d_k", "must be >= 1")
    if icfg["window"] is not None and icfg["window"] < 1:
        raise ConfigError("interpreter.window", "must be >= 1 or null")
    for key in ("omega", "lambda_s", "lambda_g"):
        if cfg["losses"][key] < 0:
            raise ConfigError(f"losses.{key}", "must be non-negative")
    det = cfg["detection"]
    if not 0.0 < det["conf_threshold"] < 1.0:
        raise ConfigError("detection.conf_threshold", "must lie in (0, 1)")
    if not 0.0 < det["nms_iou"] <= 1.0:
        raise ConfigError("detection.nms_iou", "must lie in (0, 1]")
