"""Single-process temporal layers.

Every layer here is the full-video reference form. The distributed forms in
:mod:`vinf.clip` reuse the ``*_kernel`` helpers on halo-extended clips, so a
one-worker run executes exactly the same arithmetic as the reference.

All arithmetic runs in float64 and is rounded to float32 on output. Group
statistics are rounded to float32 as soon as they are reduced, since they
are what travels between workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .metrics import WorkerStats
from .tensor import DTYPE, check_latent, splitmix_floats


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """``weights[j, out, in]`` multiplies input frame ``f + j - radius``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k, co, ci = self.weights.shape
        if k % 2 == 0 or k < 1:
            raise ConfigError(f"conv taps must be odd and >= 1, got {k}")
        if co != ci or self.bias.shape != (co,):
            raise ShapeError(f"kernel shape {self.weights.shape} / bias {self.bias.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigError("conv weights must be finite")

    @property
    def taps(self) -> int:
        return self.weights.shape[0]

    @property
    def radius(self) -> int:
        return (self.taps - 1) // 2

    @classmethod
    def identity(cls, channels: int) -> "ConvKernel":
        return cls(np.eye(channels, dtype=DTYPE)[None], np.zeros(channels, DTYPE))


@dataclass(frozen=True, eq=False)
class GroupNormParams:
    groups: int
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.groups < 1 or c % self.groups:
            raise ConfigError(f"groups={self.groups} must divide channels={c}")
        if self.eps <= 0:
            raise ConfigError("group norm epsilon must be positive")


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Single-head projections; head dim is the full channel width."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        c = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (c, c):
                raise ShapeError(f"projection must be {c}x{c}, got {w.shape}")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.channels)


@dataclass(frozen=True)
class DualScopeConfig:
    n_local: int = 16
    n_global: int = 16
    bias: float = 10.0
    t_star: float = 800.0

    def __post_init__(self):
        if self.n_local < 2 or self.n_local % 2:
            raise ConfigError(f"n_local must be even and >= 2, got {self.n_local}")
        if self.n_global < 0:
            raise ConfigError("n_global must be >= 0")
        if self.bias < 0:
            raise ConfigError("bias magnitude must be >= 0")

    @property
    def halo(self) -> int:
        return self.n_local // 2

    def logit_bias(self, t: float) -> tuple[float, float]:
        """(local, global) additive logit bias at timestep ``t``."""
        if t > self.t_star:
            return 0.0, float(self.bias)
        return float(self.bias), 0.0


# -- spatial stub ----------------------------------------------------------

def stub_coefficients(seed: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    vals = splitmix_floats(seed, 2 * channels).astype(np.float64)
    return 1.0 + 0.5 * vals[:channels], 0.25 * vals[channels:]


def spatial_stub(v: np.ndarray, seed: int, coeffs: tuple | None = None) -> np.ndarray:
    """Per-frame ``tanh(a * x + c)`` with per-channel ``a, c``.

    ``coeffs`` overrides the seeded ``(a, c)`` pair.
    """
    check_latent(v)
    a, c = coeffs if coeffs is not None else stub_coefficients(seed, v.shape[-1])
    a = np.asarray(a, np.float64)
    c = np.asarray(c, np.float64)
    return np.tanh(v.astype(np.float64) * a + c).astype(DTYPE)


# -- temporal convolution --------------------------------------------------

def conv_kernel(ext: np.ndarray, kern: ConvKernel) -> np.ndarray:
    """Valid convolution over a frame-extended float64 input.

    ``ext`` carries ``radius`` extra frames on each side; returns
    ``len(ext) - 2 * radius`` frames.
    """
    n_out = ext.shape[0] - 2 * kern.radius
    w = kern.weights.astype(np.float64)
    acc = np.broadcast_to(kern.bias.astype(np.float64), (n_out,) + ext.shape[1:]).copy()
    for j in range(kern.taps):
        acc += ext[j:j + n_out] @ w[j].T
    return acc


def zero_pad_frames(x: np.ndarray, before: int, after: int) -> np.ndarray:
    return np.pad(x, ((before, after), (0, 0), (0, 0), (0, 0)))


def temporal_conv(v: np.ndarray, kern: ConvKernel) -> np.ndarray:
    check_latent(v)
    n = kern.radius
    ext = zero_pad_frames(v.astype(np.float64), n, n)
    return conv_kernel(ext, kern).astype(DTYPE)


# -- group normalization ---------------------------------------------------

def _grouped(x: np.ndarray, groups: int) -> np.ndarray:
    f, h, w, c = x.shape
    return x.astype(np.float64).reshape(f * h * w, groups, c // groups)


def group_means(x: np.ndarray, groups: int) -> np.ndarray:
    """Per-group mean over every frame/position/channel of ``x``."""
    return _grouped(x, groups).mean(axis=(0, 2)).astype(DTYPE)


def group_sq_dev(x: np.ndarray, mean: np.ndarray, groups: int) -> np.ndarray:
    """Per-group mean squared deviation from a given (global) mean."""
    d = _grouped(x, groups) - mean.astype(np.float64)[None, :, None]
    return (d * d).mean(axis=(0, 2)).astype(DTYPE)


def normalize_kernel(x: np.ndarray, mean: np.ndarray, var: np.ndarray,
                     p: GroupNormParams) -> np.ndarray:
    c = x.shape[-1]
    per_ch = c // p.groups
    mean_c = np.repeat(mean.astype(np.float64), per_ch)
    inv_c = np.repeat(1.0 / np.sqrt(var.astype(np.float64) + p.eps), per_ch)
    y = (x.astype(np.float64) - mean_c) * inv_c
    return (y * p.gamma.astype(np.float64) + p.beta.astype(np.float64)).astype(DTYPE)


def group_norm(v: np.ndarray, p: GroupNormParams) -> np.ndarray:
    check_latent(v)
    if v.shape[-1] != p.gamma.shape[0]:
        raise ShapeError("group norm channel mismatch")
    mean = group_means(v, p.groups)
    var = group_sq_dev(v, mean, p.groups)
    return normalize_kernel(v, mean, var, p)


# -- attention -------------------------------------------------------------

def _tokens(x: np.ndarray) -> np.ndarray:
    """(F, H, W, C) -> float64 (F, P, C) with P = H*W."""
    f, h, w, c = x.shape
    return x.astype(np.float64).reshape(f, h * w, c)


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def attention_full(v: np.ndarray, p: AttentionParams, return_scores: bool = False):
    """Dense temporal self-attention over all F frames at each position.

    With ``return_scores`` the (P, F, F) softmax matrix is returned as well.
    """
    check_latent(v)
    x = _tokens(v)
    q = (x @ p.wq.T.astype(np.float64)) * p.scale
    k = x @ p.wk.T.astype(np.float64)
    val = x @ p.wv.T.astype(np.float64)
    probs = _softmax(np.einsum("fpc,gpc->pfg", q, k))
    mixed = np.einsum("pfg,gpc->fpc", probs, val)
    out = (mixed @ p.wo.T.astype(np.float64)).astype(DTYPE).reshape(v.shape)
    return (out, probs) if return_scores else out


def build_local_window(a: int, frames: int, n_local: int) -> list[int]:
    h = n_local // 2
    return list(range(max(0, a - h), min(frames, a + h + 1)))


def build_global_index_set(frames: int, n_global: int) -> list[int]:
    if n_global > frames:
        raise ConfigError(f"n_global={n_global} exceeds frame count {frames}")
    return [(j * frames) // n_global for j in range(n_global)]


def dual_scope_kernel(
    x: np.ndarray,
    ext: np.ndarray,
    ext_valid: np.ndarray,
    g: np.ndarray,
    p: AttentionParams,
    halo: int,
    bias: tuple[float, float],
    stats: WorkerStats | None = None,
) -> np.ndarray:
    """Windowed + global attention for a run of consecutive query frames.

    ``x`` holds the Fq query frames, ``ext`` the same frames with ``halo``
    frames on either side (``ext_valid`` false where a side falls outside the
    video), ``g`` the global-set frames. Query ``a``'s keys are its
    ``2*halo+1`` band slots in ``ext`` followed by all of ``g``; duplicates
    between the two are kept. Returns float32 frames shaped like ``x``.
    """
    fq = x.shape[0]
    band = 2 * halo + 1
    wq, wk, wv, wo = (w.T.astype(np.float64) for w in (p.wq, p.wk, p.wv, p.wo))
    q = (_tokens(x) @ wq) * p.scale
    te = _tokens(ext)
    k_ext, v_ext = te @ wk, te @ wv
    tg = _tokens(g)
    k_g, v_g = tg @ wk, tg @ wv

    # (Fq, P, C, band) views; slot s of query a is ext frame a + s
    k_win = sliding_window_view(k_ext, band, axis=0)
    v_win = sliding_window_view(v_ext, band, axis=0)
    valid = sliding_window_view(ext_valid, band)  # (Fq, band)

    local_bias, global_bias = bias
    local = np.einsum("fpc,fpcs->fps", q, k_win) + local_bias
    local = np.where(valid[:, None, :], local, -np.inf)
    logits = np.concatenate([local, np.einsum("fpc,gpc->fpg", q, k_g) + global_bias], axis=-1)
    probs = _softmax(logits)
    mixed = np.einsum("fps,fpcs->fpc", probs[..., :band], v_win)
    mixed += np.einsum("fpg,gpc->fpc", probs[..., band:], v_g)
    out = (mixed @ wo).astype(DTYPE).reshape(x.shape)

    if stats is not None:
        counts = valid.sum(axis=1) + tg.shape[0]
        stats.kv_tokens_last = [int(n) for n in counts]
        stats.kv_tokens_max = max(stats.kv_tokens_max, int(counts.max()))
        stats.score_entries = max(stats.score_entries, fq * (band + tg.shape[0]))
        if bias[1] > bias[0]:
            stats.bias_global_calls += 1
        elif bias[0] > bias[1]:
            stats.bias_local_calls += 1
        stats.observe_live(x.size, ext.size, q.size, k_ext.size, v_ext.size,
                           3 * g.size, 2 * logits.size, mixed.size, out.size)
    return out


def dual_scope_reference(v: np.ndarray, t: float, p: AttentionParams,
                         cfg: DualScopeConfig) -> np.ndarray:
    check_latent(v)
    f = v.shape[0]
    h = cfg.halo
    ext = zero_pad_frames(v, h, h)
    ext_valid = np.zeros(f + 2 * h, dtype=bool)
    ext_valid[h:h + f] = True
    g = v[build_global_index_set(f, cfg.n_global)]
    return dual_scope_kernel(v, ext, ext_valid, g, p, h, cfg.logit_bias(t))
