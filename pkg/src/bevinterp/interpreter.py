"""The feature interpreter: resizer, channel selection, prompts, spatial attention.

A neighbor BEV feature is spatially pooled to the ego grid, its channels are
reorganized by a row-stochastic cross-feature similarity matrix, refined by a
shared general prompt and a per-neighbor specific prompt, then aligned
spatially by two axial cross-attention passes (windowed along height, global
along width). Output always lives in the ego feature's C1 x H1 x W1 space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, ShapeError
from .encoders import BevFeature, Encoder, encode
from .scene import Dataset, rasterize


class RegistryError(KeyError):
    """Encoder id not registered with a prompt or resizer."""


def _stable_id_hash(name: str) -> int:
    """Process-independent 32-bit hash (python's str hash is salted)."""
    import hashlib

    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def _tensor_of(x) -> Tensor:
    if isinstance(x, BevFeature):
        return x.data
    return ad.as_tensor(x)


@dataclass
class SimilarityMatrix:
    m: Tensor     # [C1, C2], rows sum to 1

    def validate(self, tol: float = 1e-6):
        sums = self.m.data.sum(axis=1)
        if not np.all(np.abs(sums - 1.0) <= tol):
            raise ad.NumericError("similarity matrix rows do not sum to 1")

    @property
    def shape(self):
        return self.m.shape


class SpecificPrompt:
    """Per-neighbor learnable prompt, dense [C2,H1,W1] or low-rank factored.

    Low-rank stores per-channel H1 x R and R x W1 factors for C2/T base
    channels; materialization multiplies the factors and repeats each base
    channel T times consecutively.
    """

    def __init__(self, encoder_id: str, *, dense: np.ndarray | None = None,
                 u: np.ndarray | None = None, v: np.ndarray | None = None,
                 depth_factor: int = 1):
        self.encoder_id = encoder_id
        name = f"prompts.specific.{encoder_id}"
        if dense is not None:
            self.form = "dense"
            self.param = Parameter(name, dense)
            self.channels = dense.shape[0]
            self.depth_factor = 1
        else:
            self.form = "lowrank"
            self.u = Parameter(f"{name}.u", u)
            self.v = Parameter(f"{name}.v", v)
            self.depth_factor = int(depth_factor)
            self.channels = u.shape[0] * self.depth_factor

    def parameters(self):
        return [self.param] if self.form == "dense" else [self.u, self.v]

    def param_count(self) -> int:
        return sum(p.count for p in self.parameters())

    def set_frozen(self, frozen: bool):
        for p in self.parameters():
            p.frozen = frozen

    def materialize(self) -> Tensor:
        """Dense [C2, H1, W1] view, differentiable back to the stored factors."""
        if self.form == "dense":
            return self.param.tensor
        prod = ad.matmul(self.u.tensor, self.v.tensor)       # [C2/T, H1, W1]
        if self.depth_factor == 1:
            return prod
        cb, h, w = prod.shape
        wide = ad.reshape(prod, (cb, 1, h, w)) * Tensor(np.ones((1, self.depth_factor, 1, 1)))
        return ad.reshape(wide, (cb * self.depth_factor, h, w))


class PromptSet:
    """Shared general prompt plus the per-neighbor specific prompt registry."""

    def __init__(self, general: np.ndarray):
        self.general = Parameter("prompts.general", general)
        self.specifics: dict[str, SpecificPrompt] = {}

    def register(self, prompt: SpecificPrompt):
        if prompt.encoder_id in self.specifics:
            raise RegistryError(f"prompt for {prompt.encoder_id!r} already registered")
        self.specifics[prompt.encoder_id] = prompt

    def get(self, encoder_id: str) -> SpecificPrompt:
        try:
            return self.specifics[encoder_id]
        except KeyError:
            raise RegistryError(f"no specific prompt registered for {encoder_id!r}") from None

    def parameters(self):
        out = [self.general]
        for key in self.specifics:
            out.extend(self.specifics[key].parameters())
        return out


class InterpreterNet:
    """Shared interpreter weights: channel selection, axial attention, resizers."""

    def __init__(self, c1: int, h1: int, w1: int, d_k: int = 64, window: int = 4,
                 channel_adapter: str = "matmul", normalize_qk: bool = False,
                 ln_eps: float = 1e-5, ln_gain_init: float = 1.0, seed: int = 0):
        if channel_adapter not in ("matmul", "conv"):
            raise ValueError("channel_adapter must be 'matmul' or 'conv'")
        self.c1, self.h1, self.w1 = c1, h1, w1
        self.d_k = d_k
        self.window = window
        self.channel_adapter = channel_adapter
        self.normalize_qk = normalize_qk
        self.ln_eps = ln_eps
        hw = h1 * w1
        seq = np.random.SeedSequence(entropy=seed)
        r_q, r_k, r_ax = (np.random.default_rng(s) for s in seq.spawn(3))
        std_qk = 1.0 / np.sqrt(hw)
        self.wq = Parameter("interpreter.channel.wq", r_q.normal(0, std_qk, size=(hw, d_k)))
        self.wk = Parameter("interpreter.channel.wk", r_k.normal(0, std_qk, size=(hw, d_k)))
        # gain init sets the starting amplitude of reorganized maps; keeping it
        # near the ego feature scale stops max-fusion from drowning the ego map
        self.ln_f_gain = Parameter("interpreter.channel.ln_f.gain",
                                   np.full(c1, float(ln_gain_init)))
        self.ln_f_bias = Parameter("interpreter.channel.ln_f.bias", np.zeros(c1))
        self.ln_s_gain = Parameter("interpreter.channel.ln_s.gain",
                                   np.full(c1, float(ln_gain_init)))
        self.ln_s_bias = Parameter("interpreter.channel.ln_s.bias", np.zeros(c1))
        self.axial = {}
        for axis in ("h", "w"):
            for role in ("wq", "wk", "wv", "wo"):
                # zero output projection: each pass starts as the identity
                # residual and the attention contribution is learned in
                init = (np.zeros((c1, c1)) if role == "wo"
                        else r_ax.normal(0, 0.02, size=(c1, c1)))
                self.axial[(axis, role)] = Parameter(
                    f"interpreter.axial.{axis}.{role}", init)
        self.resizers: dict[str, Parameter] = {}
        self._resizer_seed = seq.spawn(1)[0]

    def add_resizer(self, encoder_id: str, c2: int) -> Parameter:
        if encoder_id in self.resizers:
            raise RegistryError(f"resizer for {encoder_id!r} already registered")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self._resizer_seed.entropy,
                                   spawn_key=(_stable_id_hash(encoder_id),))
        )
        std = np.sqrt(2.0 / (self.c1 + c2))
        p = Parameter(f"interpreter.resizer.{encoder_id}.w",
                      rng.normal(0, std, size=(self.c1, c2)))
        self.resizers[encoder_id] = p
        return p

    def resizer(self, encoder_id: str) -> Parameter:
        try:
            return self.resizers[encoder_id]
        except KeyError:
            raise RegistryError(f"no resizer registered for {encoder_id!r}") from None

    def core_parameters(self):
        """Everything shared across neighbors (frozen after base training)."""
        out = [self.wq, self.wk, self.ln_f_gain, self.ln_f_bias,
               self.ln_s_gain, self.ln_s_bias]
        for axis in ("h", "w"):
            for role in ("wq", "wk", "wv", "wo"):
                out.append(self.axial[(axis, role)])
        return out

    def parameters(self):
        return self.core_parameters() + [self.resizers[k] for k in self.resizers]


# -- pipeline stages ----------------------------------------------------------

def resize_neighbor(f: BevFeature, ego_hw) -> BevFeature:
    """Max-pool the neighbor feature down to the ego spatial size.

    Channel count is untouched; the per-neighbor 1x1 channel adapter lives on
    the specific-prompt path. Ratio 1 is the identity.
    """
    h1, w1 = ego_hw
    _, h, w = f.data.shape
    if h % h1 or w % w1:
        raise ShapeError(f"neighbor spatial {h}x{w} is not an integer multiple of ego {h1}x{w1}")
    rh, rw = h // h1, w // w1
    if rh != rw:
        raise ShapeError(f"anisotropic resize ratio {rh}x{rw} not supported")
    if rh == 1:
        return f
    pooled = ad.max_pool2d(f.data, rh)
    return BevFeature(data=pooled, encoder_id=f.encoder_id, grid=f.grid)


def channel_similarity(f_ego, f_neb, net: InterpreterNet) -> SimilarityMatrix:
    """Row-stochastic C1 x C2 matching of ego channels to neighbor channels."""
    fe, fn = _tensor_of(f_ego), _tensor_of(f_neb)
    c1 = fe.shape[0]
    c2 = fn.shape[0]
    hw_e = int(np.prod(fe.shape[1:]))
    hw_n = int(np.prod(fn.shape[1:]))
    if hw_e != hw_n:
        raise ShapeError(f"flattened spatial sizes differ: {hw_e} vs {hw_n}")
    q = ad.matmul(ad.reshape(fe, (c1, hw_e)), net.wq)
    k = ad.matmul(ad.reshape(fn, (c2, hw_n)), net.wk)
    if net.normalize_qk:
        q = _l2_normalize_rows(q)
        k = _l2_normalize_rows(k)
    logits = ad.matmul(q, ad.transpose(k, (1, 0)))
    return SimilarityMatrix(m=ad.softmax_rows(logits, float(np.sqrt(net.d_k))))


def _l2_normalize_rows(t: Tensor) -> Tensor:
    norm = ad.tsqrt(ad.tsum(t * t, axis=1, keepdims=True) + Tensor(1e-24))
    return t * ad.pow_const(norm, -1.0)


def reorganize(m: SimilarityMatrix, f_neb, s_dense: Tensor, net: InterpreterNet,
               encoder_id: str | None = None):
    """Channel-mix the neighbor feature and prompt into C1 rows, then layer-norm.

    The feature always mixes through the similarity matrix; the prompt mixes
    through the matrix ('matmul' adapter) or through the per-neighbor 1x1
    resizer conv ('conv' adapter).
    """
    fn = _tensor_of(f_neb)
    c2, h, w = fn.shape
    c1 = m.shape[0]
    f_mix = ad.matmul(m.m, ad.reshape(fn, (c2, h * w)))
    f_r = _affine_ln(f_mix, net.ln_f_gain, net.ln_f_bias, net.ln_eps)
    s_flat = ad.reshape(s_dense, (s_dense.shape[0], h * w))
    if net.channel_adapter == "conv":
        if encoder_id is None:
            raise RegistryError("conv adapter needs the neighbor encoder id")
        s_mix = ad.matmul(net.resizer(encoder_id).tensor, s_flat)
    else:
        s_mix = ad.matmul(m.m, s_flat)
    s_r = _affine_ln(s_mix, net.ln_s_gain, net.ln_s_bias, net.ln_eps)
    return ad.reshape(f_r, (c1, h, w)), ad.reshape(s_r, (c1, h, w))


def _affine_ln(x: Tensor, gain: Parameter, bias: Parameter, eps: float) -> Tensor:
    c = x.shape[0]
    normed = ad.layer_norm_rows(x, eps)
    return normed * ad.reshape(gain.tensor, (c, 1)) + ad.reshape(bias.tensor, (c, 1))


def refine_with_prompts(f_r: Tensor, s_r: Tensor, prompts: PromptSet):
    """f_g = f_r + G and f_s = f_r + S_r, exact elementwise sums."""
    g = prompts.general.tensor
    if f_r.shape != g.shape or s_r.shape != f_r.shape:
        raise ShapeError(
            f"prompt refinement shape mismatch: f_r {f_r.shape}, s_r {s_r.shape}, G {g.shape}"
        )
    return f_r + g, f_r + s_r


def _axis_attention(q_map: Tensor, kv_map: Tensor, net: InterpreterNet, axis: str,
                    window: int | None, collect=None):
    """Single-head scaled dot-product cross-attention along one spatial axis.

    Tokens are the C1-dim channel vectors; queries come from the ego map,
    keys/values from kv_map. A finite window tiles the axis (zero-padded and
    masked when it does not divide); window=None attends over the full axis.
    """
    c, h, w = q_map.shape
    if axis == "h":
        qt, kt = ad.transpose(q_map, (2, 1, 0)), ad.transpose(kv_map, (2, 1, 0))
        batch, length = w, h
    else:
        qt, kt = ad.transpose(q_map, (1, 2, 0)), ad.transpose(kv_map, (1, 2, 0))
        batch, length = h, w
    win = length if window is None else min(window, length)
    pad = (-length) % win
    if pad:
        qt = ad.pad_axis(qt, 1, 0, pad)
        kt = ad.pad_axis(kt, 1, 0, pad)
    total = length + pad
    nw = total // win
    q3 = ad.reshape(qt, (batch * nw, win, c))
    k3 = ad.reshape(kt, (batch * nw, win, c))
    q = ad.matmul(q3, net.axial[(axis, "wq")].tensor)
    k = ad.matmul(k3, net.axial[(axis, "wk")].tensor)
    v = ad.matmul(k3, net.axial[(axis, "wv")].tensor)
    logits = ad.matmul(q, ad.transpose(k, (0, 2, 1)))        # [B*nw, win, win]
    if pad:
        mask = np.zeros((nw, win))
        mask[-1, win - pad:] = -1e30                          # padded keys get zero weight
        full = np.broadcast_to(mask[None, :, None, :], (batch, nw, win, win))
        logits = logits + Tensor(full.reshape(batch * nw, win, win).copy())
    attn = ad.softmax_rows(ad.reshape(logits, (batch * nw * win, win)), float(np.sqrt(c)))
    if collect is not None:
        key_valid = np.ones((nw, win), dtype=bool)
        if pad:
            key_valid[-1, win - pad:] = False
        rows_valid = np.broadcast_to(key_valid[None, :, None, :], (batch, nw, win, win))
        collect[axis] = (attn.data.copy(), rows_valid.reshape(batch * nw * win, win).copy())
    out = ad.matmul(ad.reshape(attn, (batch * nw, win, win)), v)
    out = ad.matmul(out, net.axial[(axis, "wo")].tensor)
    out = ad.reshape(out, (batch, total, c))
    if pad:
        out = ad.slice_axis(out, 1, 0, length)
    return ad.transpose(out, (2, 1, 0) if axis == "h" else (2, 0, 1))


def spatial_attention(f_ego, f_ref: Tensor, net: InterpreterNet, collect=None) -> Tensor:
    """Windowed pass along height then global pass along width, residual each."""
    q = _tensor_of(f_ego)
    if q.shape != f_ref.shape:
        raise ShapeError(f"ego {q.shape} vs refined {f_ref.shape} shape mismatch")
    y1 = _axis_attention(q, f_ref, net, "h", net.window, collect) + f_ref
    y2 = _axis_attention(q, y1, net, "w", None, collect) + y1
    return y2


def interpret(f_ego: BevFeature, f_neb_raw: BevFeature, encoder_id: str,
              net: InterpreterNet, prompts: PromptSet, collect_attn=None):
    """Full pipeline; returns the interpreted map plus loss-wiring intermediates."""
    prompt = prompts.get(encoder_id)
    f_resized = resize_neighbor(f_neb_raw, (net.h1, net.w1))
    m = channel_similarity(f_ego, f_resized, net)
    m.validate()
    f_r, s_r = reorganize(m, f_resized, prompt.materialize(), net, encoder_id)
    f_g, f_s = refine_with_prompts(f_r, s_r, prompts)
    out = spatial_attention(f_ego, f_g + f_s, net, collect_attn)
    return out, {
        "m": m, "f_resized": f_resized.data, "f_r": f_r,
        "s_r": s_r, "f_g": f_g, "f_s": f_s,
    }


# -- prompt initialization ----------------------------------------------------

def init_prompt_sampling(enc: Encoder, data: Dataset, n: int, ego_hw, seed: int = 0) -> np.ndarray:
    """Mean encoded feature over n training scenes, aligned to the ego spatial size.

    Finer-than-ego features are average-pooled; coarser ones are repeated
    (nearest neighbor). Returns a plain array for the caller to wrap.
    """
    train = data.split_scenes("train")
    if not train:
        raise ValueError("cannot sample prompts from an empty train split")
    if n > len(train):
        raise ValueError(f"requested {n} samples from {len(train)} train scenes")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(train), size=n, replace=False)
    feats = [encode(enc, rasterize(train[int(i)], enc.spec.grid)).data.data for i in idx]
    mean = np.mean(feats, axis=0)
    return _align_spatial(mean, ego_hw)


def _align_spatial(feat: np.ndarray, ego_hw) -> np.ndarray:
    c, h, w = feat.shape
    h1, w1 = ego_hw
    if (h, w) == (h1, w1):
        return feat
    if h % h1 == 0 and w % w1 == 0 and h // h1 == w // w1:
        k = h // h1
        return feat.reshape(c, h1, k, w1, k).mean(axis=(2, 4))
    if h1 % h == 0 and w1 % w == 0 and h1 // h == w1 // w:
        k = h1 // h
        return np.repeat(np.repeat(feat, k, axis=1), k, axis=2)
    raise ShapeError(f"cannot align {h}x{w} feature to ego {h1}x{w1}")


def lowrank_param_count(c2: int, r: int, h: int, w: int, t: int = 1) -> int:
    return (c2 // t) * r * (h + w)


def dense_param_count(c2: int, h: int, w: int) -> int:
    return c2 * h * w


def resizer_param_count(c1: int, c2: int) -> int:
    return c1 * c2


def init_prompt_lowrank(c2: int, h: int, w: int, r: int, t: int, seed: int,
                        encoder_id: str = "") -> SpecificPrompt:
    """Random low-rank prompt with exactly (C2/T) * R * (H+W) parameters."""
    if not 1 <= r <= min(h, w):
        raise ValueError(f"rank {r} outside [1, {min(h, w)}]")
    if t < 1 or c2 % t:
        raise ValueError(f"depth factor {t} must be >= 1 and divide {c2}")
    if t > 1 and r != 1:
        raise ValueError("depth scaling (t > 1) is only available at rank 1")
    rng = np.random.default_rng(seed)
    cb = c2 // t
    u = rng.normal(0, 0.02, size=(cb, h, r))
    v = rng.normal(0, 0.02, size=(cb, r, w))
    return SpecificPrompt(encoder_id, u=u, v=v, depth_factor=t)
