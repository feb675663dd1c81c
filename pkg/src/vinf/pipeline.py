"""Toy temporal diffusion model and its denoising loop.

Each block runs ``stub -> conv residual -> group norm -> dual-scope attention
residual``. The same blocks run either on the whole latent (sequential) or on
per-worker clips that stay resident for the whole loop (distributed).
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .clip import (
    ClipPlan,
    LayerHaloSpec,
    attention_parallel,
    conv_parallel,
    group_norm_parallel,
    partition,
    sync_contexts,
)
from .errors import ConfigError, TransportError
from .metrics import MetricsReport, WorkerStats
from .tensor import DTYPE, check_latent, concat_frames, derive_seed, splitmix_floats
from .temporal import (
    AttentionParams,
    ConvKernel,
    DualScopeConfig,
    GroupNormParams,
    dual_scope_reference,
    group_norm,
    spatial_stub,
    stub_coefficients,
    temporal_conv,
)
from .transport.base import Endpoint
from .transport.inproc import InProcFabric
from .transport.schedule import validate_schedule

LAYER_KINDS = ("conv", "groupnorm", "attention")


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 2
    channels: int = 8
    taps: int = 3
    groups: int = 2
    dual_scope: DualScopeConfig = field(default_factory=DualScopeConfig)
    weight_seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("model needs at least one block")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.taps < 1 or self.taps % 2 == 0:
            raise ConfigError(f"conv taps must be odd and >= 1, got {self.taps}")
        if self.groups < 1 or self.channels % self.groups:
            raise ConfigError(f"groups={self.groups} must divide channels={self.channels}")

    def check_plan(self, plan: ClipPlan) -> None:
        """Halo constraints for a planned run; raised before any traffic."""
        LayerHaloSpec("conv", (self.taps - 1) // 2).check(plan)
        LayerHaloSpec.for_attention(self.dual_scope).check(plan)


@dataclass(frozen=True)
class DenoiseConfig:
    steps: int = 30

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"denoising steps must be >= 1, got {self.steps}")

    @property
    def step_size(self) -> float:
        return 1.0 / self.steps

    @property
    def timesteps(self) -> list[float]:
        return [1000.0 * j / self.steps for j in range(self.steps, 0, -1)]


@dataclass(frozen=True, eq=False)
class Block:
    stub: tuple[np.ndarray, np.ndarray]
    conv: ConvKernel
    norm: GroupNormParams
    attn: AttentionParams

    def n_params(self) -> int:
        arrays = [*self.stub, self.conv.weights, self.conv.bias, self.norm.gamma,
                  self.norm.beta, self.attn.wq, self.attn.wk, self.attn.wv, self.attn.wo]
        return sum(a.size for a in arrays)


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    blocks: list[Block]

    @property
    def n_params(self) -> int:
        return sum(b.n_params() for b in self.blocks)


def build_model(cfg: ModelConfig) -> Model:
    c, k = cfg.channels, cfg.taps
    scale = 1.0 / math.sqrt(c)

    def draw(block: int, slot: str, *shape: int, scaled: bool = True) -> np.ndarray:
        vals = splitmix_floats(derive_seed(cfg.weight_seed, block, slot), int(np.prod(shape)))
        vals = vals.reshape(shape)
        return (vals * scale).astype(DTYPE) if scaled else vals

    blocks = []
    for b in range(cfg.blocks):
        a, shift = stub_coefficients(derive_seed(cfg.weight_seed, b, "stub"), c)
        blocks.append(Block(
            stub=(a.astype(DTYPE), shift.astype(DTYPE)),
            conv=ConvKernel(draw(b, "conv", k, c, c), draw(b, "conv_bias", c)),
            norm=GroupNormParams(
                cfg.groups,
                (1.0 + 0.1 * draw(b, "gamma", c, scaled=False)).astype(DTYPE),
                (0.1 * draw(b, "beta", c, scaled=False)).astype(DTYPE),
            ),
            attn=AttentionParams(*(draw(b, name, c, c) for name in ("wq", "wk", "wv", "wo"))),
        ))
    return Model(cfg, blocks)


# -- sequential ------------------------------------------------------------

def eps_theta(x: np.ndarray, t: float, model: Model) -> np.ndarray:
    """Noise prediction on the full latent using the reference layers."""
    check_latent(x)
    ds = model.config.dual_scope
    for blk in model.blocks:
        u = spatial_stub(x, 0, blk.stub)
        u = u + temporal_conv(u, blk.conv)
        u = group_norm(u, blk.norm)
        x = u + dual_scope_reference(u, t, blk.attn, ds)
    return x


def denoise_step(x: np.ndarray, eps: np.ndarray, dcfg: DenoiseConfig) -> np.ndarray:
    return (x.astype(np.float64) - dcfg.step_size * eps.astype(np.float64)).astype(DTYPE)


def denoise_sequential(x_T: np.ndarray, model: Model, dcfg: DenoiseConfig) -> np.ndarray:
    x = x_T
    for t in dcfg.timesteps:
        x = denoise_step(x, eps_theta(x, t, model), dcfg)
    return x


# -- distributed -----------------------------------------------------------

@dataclass(frozen=True)
class Distributed:
    """Run mode: ``workers`` SPMD threads over the in-process transport.

    ``ablate`` names layer kinds whose context sync is replaced by
    zero-filled contexts.
    """

    workers: int
    validating: bool = False
    ablate: frozenset = frozenset()
    timeout: float = 120.0


def worker_eps(x_i: np.ndarray, t: float, model: Model, ep: Endpoint, plan: ClipPlan,
               ablate: frozenset = frozenset()) -> np.ndarray:
    """One worker's share of ``eps_theta``; collective across all workers."""
    i = ep.rank
    stats = ep.stats
    ds = model.config.dual_scope
    attn_spec = LayerHaloSpec.for_attention(ds)
    for blk in model.blocks:
        u = spatial_stub(x_i, 0, blk.stub)
        stats.resident = x_i.size + u.size
        ctx = sync_contexts(i, LayerHaloSpec.for_conv(blk.conv), u, ep, plan,
                            ablate="conv" in ablate)
        u = u + conv_parallel(i, u, ctx, blk.conv, stats)
        u = group_norm_parallel(i, u, blk.norm, ep, ablate="groupnorm" in ablate)
        ctx = sync_contexts(i, attn_spec, u, ep, plan, ablate="attention" in ablate)
        x_i = u + attention_parallel(i, u, ctx, t, blk.attn, ds, stats)
    return x_i


def worker_denoise(x_i: np.ndarray, model: Model, dcfg: DenoiseConfig, ep: Endpoint,
                   plan: ClipPlan, ablate: frozenset = frozenset()) -> np.ndarray:
    for t in dcfg.timesteps:
        x_i = denoise_step(x_i, worker_eps(x_i, t, model, ep, plan, ablate), dcfg)
    return x_i


def run_inproc(x: np.ndarray, model: Model, mode: Distributed, body) -> tuple[np.ndarray, MetricsReport, InProcFabric]:
    """Partition ``x``, run ``body(clip, endpoint, plan)`` on one thread per worker, merge."""
    clips, plan = partition(x, mode.workers)
    model.config.check_plan(plan)
    fabric = InProcFabric(mode.workers, timeout=mode.timeout, validating=mode.validating)
    outputs: list[np.ndarray | None] = [None] * mode.workers
    errors: list[BaseException] = []

    def target(rank: int) -> None:
        try:
            outputs[rank] = body(clips[rank], fabric.endpoints[rank], plan)
        except BaseException as exc:  # surfaced to the caller after join
            errors.append(exc)
            fabric.abort()

    t0 = time.perf_counter()
    threads = [threading.Thread(target=target, args=(r,), name=f"vinf-worker-{r}")
               for r in range(mode.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    wall = time.perf_counter() - t0
    if errors:
        # the first non-abort error is the root cause
        primary = [e for e in errors if "aborted" not in str(e)] or errors
        raise primary[0]
    report = MetricsReport([ep.stats for ep in fabric.endpoints], wall)
    return concat_frames(outputs), report, fabric


def eps_theta_distributed(x: np.ndarray, t: float, model: Model, mode: Distributed):
    """One distributed noise prediction; returns ``(eps, report)``."""
    out, report, _ = run_inproc(
        x, model, mode, lambda clip, ep, plan: worker_eps(clip, t, model, ep, plan, mode.ablate))
    return out, report


def denoise(x_T: np.ndarray, model: Model, dcfg: DenoiseConfig,
            mode: Distributed | None = None):
    """Run the loop sequentially (``mode=None``) or distributed.

    Returns ``x_0``; distributed mode returns ``(x_0, report)``.
    """
    if mode is None:
        return denoise_sequential(x_T, model, dcfg)
    out, report, fabric = run_inproc(
        x_T, model, mode,
        lambda clip, ep, plan: worker_denoise(clip, model, dcfg, ep, plan, mode.ablate))
    if fabric.constraint is not None and fabric.constraint.violations:
        raise TransportError("exclusivity violations: " + "; ".join(fabric.constraint.violations))
    if mode.validating:
        # replay the recorded per-worker op traces through the rendezvous simulator
        verdict = validate_schedule(mode.workers, [ep.trace for ep in fabric.endpoints])
        if not verdict.ok:
            raise TransportError(f"recorded schedule failed validation: {verdict}")
    return out, report
