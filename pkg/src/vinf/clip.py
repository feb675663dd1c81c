"""Frame-axis partitioning and the distributed temporal layers.

Each worker owns ``F_clip = F / N`` consecutive frames. Before a temporal
layer it synchronizes a :class:`TemporalContext`: the trailing frames of its
predecessor's input (``c_pre``), the leading frames of its successor's
(``c_post``) and a payload gathered from every worker (``c_global``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigError, PartitionError, ProtocolError
from .metrics import WorkerStats
from .tensor import DTYPE, FrameRange, check_latent, empty_frames, fnv1a64, slice_frames
from .temporal import (
    AttentionParams,
    ConvKernel,
    DualScopeConfig,
    GroupNormParams,
    build_global_index_set,
    conv_kernel,
    dual_scope_kernel,
    group_means,
    group_sq_dev,
    normalize_kernel,
)
from .transport.base import Endpoint
from .transport.schedule import pair_exchange_program

LayerKind = Literal["conv", "groupnorm", "attention"]


@dataclass(frozen=True)
class ClipPlan:
    n_workers: int
    frames: int

    def __post_init__(self):
        if self.n_workers < 1:
            raise PartitionError("need at least one worker")
        if self.frames % self.n_workers:
            raise PartitionError(
                f"worker count N={self.n_workers} must divide frame count F={self.frames}")

    @property
    def f_clip(self) -> int:
        return self.frames // self.n_workers

    @property
    def ranges(self) -> list[FrameRange]:
        return [FrameRange(i * self.f_clip, self.f_clip) for i in range(self.n_workers)]

    def global_members(self, worker: int, n_global: int) -> list[int]:
        """Global-set frames owned by ``worker``, as global indices."""
        r = self.ranges[worker]
        return [f for f in build_global_index_set(self.frames, n_global) if f in r]


def partition(x: np.ndarray, n: int) -> tuple[list[np.ndarray], ClipPlan]:
    check_latent(x)
    plan = ClipPlan(n, x.shape[0])
    return [slice_frames(x, r) for r in plan.ranges], plan


@dataclass(frozen=True)
class LayerHaloSpec:
    kind: LayerKind
    halo: int
    n_global: int = 0

    @classmethod
    def for_conv(cls, kern: ConvKernel) -> "LayerHaloSpec":
        return cls("conv", kern.radius)

    @classmethod
    def for_attention(cls, cfg: DualScopeConfig) -> "LayerHaloSpec":
        return cls("attention", cfg.halo, cfg.n_global)

    @classmethod
    def for_groupnorm(cls, groups: int) -> "LayerHaloSpec":
        # global payload: one mean (round 1) then one deviation (round 2) per group
        return cls("groupnorm", 0, groups)

    def digest(self) -> int:
        return fnv1a64(f"kind={self.kind};halo={self.halo};global={self.n_global}") & 0xFFFFFF

    def check(self, plan: ClipPlan) -> None:
        if self.halo > plan.f_clip:
            raise ConfigError(
                f"{self.kind} halo {self.halo} exceeds clip length F_clip={plan.f_clip}")
        if self.kind == "attention" and self.n_global > plan.frames:
            raise ConfigError(f"n_global={self.n_global} exceeds F={plan.frames}")


@dataclass(frozen=True, eq=False)
class TemporalContext:
    c_pre: np.ndarray
    c_post: np.ndarray
    c_global: np.ndarray
    halo: int

    def check(self, frames_global: int | None = None) -> None:
        for name, c in (("c_pre", self.c_pre), ("c_post", self.c_post)):
            if c.shape[0] not in (0, self.halo):
                raise ProtocolError(f"{name} has {c.shape[0]} frames, layer halo is {self.halo}")
        if frames_global is not None and self.c_global.shape[0] != frames_global:
            raise ProtocolError(
                f"c_global has {self.c_global.shape[0]} frames, expected {frames_global}")

    def extended(self, v_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``[zeros | c_pre | v_in | c_post | zeros]`` padded to ``halo`` each side.

        Zeros appear only where a context is empty (video boundary); the mask
        marks real frames.
        """
        h = self.halo
        lo = h - self.c_pre.shape[0]
        hi = h - self.c_post.shape[0]
        tail = v_in.shape[1:]
        ext = np.concatenate([np.zeros((lo,) + tail, DTYPE), self.c_pre, v_in, self.c_post,
                              np.zeros((hi,) + tail, DTYPE)], axis=0)
        valid = np.ones(ext.shape[0], dtype=bool)
        valid[:lo] = False
        valid[ext.shape[0] - hi:] = False
        return ext, valid


def _frames(flat: np.ndarray, tail: tuple, expect: int | None, what: str) -> np.ndarray:
    per = int(np.prod(tail))
    if flat.size % per or (expect is not None and flat.size != expect * per):
        raise ProtocolError(f"{what} payload of {flat.size} floats does not fit frames of {tail}")
    return flat.reshape((-1,) + tail)


def sync_contexts(i: int, layer: LayerHaloSpec, v_in: np.ndarray, transport: Endpoint,
                  plan: ClipPlan, ablate: bool = False) -> TemporalContext:
    """Collective T1/T2/T3 synchronization for one conv or attention layer.

    T1 all-gathers each worker's global-set frames, T2 swaps halos inside
    pairs (i, i+1) with i even, T3 inside pairs with i odd. With ``ablate``
    nothing is sent and every context is zero-filled at its usual shape.
    """
    n = plan.n_workers
    stats = transport.stats
    stats.layer_calls[layer.kind] += 1
    if transport.rank != i or transport.size != n:
        raise ProtocolError(f"endpoint {transport.rank}/{transport.size} used as worker {i}/{n}", i)
    tail = v_in.shape[1:]
    digest = layer.digest()
    h = layer.halo

    if layer.n_global:
        start = plan.ranges[i].start
        members = [f - start for f in plan.global_members(i, layer.n_global)]
        own = v_in[members]
        if ablate:
            parts = [own if w == i else np.zeros((len(plan.global_members(w, layer.n_global)),)
                                                 + tail, DTYPE) for w in range(n)]
        else:
            with stats.stage(layer.kind, "T1"):
                gathered = transport.all_gather(own.ravel(), digest)
            parts = [_frames(p, tail, len(plan.global_members(w, layer.n_global)), "c_global")
                     for w, p in enumerate(gathered)]
        c_global = np.concatenate(parts, axis=0)
    else:
        c_global = empty_frames(v_in)

    c_pre = c_post = empty_frames(v_in)
    if h and n > 1:
        if ablate:
            zeros = np.zeros((h,) + tail, DTYPE)
            c_pre = zeros if i > 0 else c_pre
            c_post = zeros if i < n - 1 else c_post
        else:
            outgoing = {}
            if i > 0:
                outgoing[i - 1] = v_in[:h]
            if i < n - 1:
                outgoing[i + 1] = v_in[-h:]
            program = pair_exchange_program(i, n)
            incoming: dict[int, np.ndarray] = {}
            for stage in ("T2", "T3"):
                # called even with no ops so op sequence numbers stay in lockstep
                ops = [op for op in program if op.stage == stage]
                with stats.stage(layer.kind, stage):
                    incoming.update(transport.exchange(ops, outgoing, digest))
            if i > 0:
                c_pre = _frames(incoming[i - 1], tail, h, "c_pre")
            if i < n - 1:
                c_post = _frames(incoming[i + 1], tail, h, "c_post")
    return TemporalContext(c_pre, c_post, c_global, h)


def conv_parallel(i: int, v_in: np.ndarray, ctx: TemporalContext, kern: ConvKernel,
                  stats: WorkerStats | None = None) -> np.ndarray:
    if ctx.halo != kern.radius:
        raise ProtocolError(f"context halo {ctx.halo} != conv radius {kern.radius}", i)
    ctx.check()
    ext, _ = ctx.extended(v_in)
    out = conv_kernel(ext.astype(np.float64), kern)
    if stats is not None:
        stats.observe_live(v_in.size, 2 * ext.size, 2 * out.size)
    return out.astype(DTYPE)


def group_stats_parallel(v_in: np.ndarray, groups: int, transport: Endpoint,
                         ablate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Two all-gather rounds: global mean first, then deviations from it.

    Clips are equal-sized, so the mean of per-clip means is the global mean
    and the mean of per-clip squared deviations (about that global mean) is
    the global variance. Averaging per-clip variances would not be.
    """
    stats = transport.stats
    digest = LayerHaloSpec.for_groupnorm(groups).digest()

    def gather(local: np.ndarray, stage: str) -> np.ndarray:
        if ablate:
            parts = [local]
        else:
            with stats.stage("groupnorm", stage):
                parts = transport.all_gather(local, digest, stage)
        for p in parts:
            if p.shape != (groups,):
                raise ProtocolError(f"{stage}: statistics payload of shape {p.shape}",
                                    transport.rank, stage)
        return (np.sum(np.stack(parts).astype(np.float64), axis=0) / len(parts)).astype(DTYPE)

    mean = gather(group_means(v_in, groups), "GN1")
    var = gather(group_sq_dev(v_in, mean, groups), "GN2")
    return mean, var


def group_norm_parallel(i: int, v_in: np.ndarray, p: GroupNormParams, transport: Endpoint,
                        ablate: bool = False) -> np.ndarray:
    stats = transport.stats
    stats.layer_calls["groupnorm"] += 1
    mean, var = group_stats_parallel(v_in, p.groups, transport, ablate)
    out = normalize_kernel(v_in, mean, var, p)
    stats.observe_live(v_in.size, 3 * v_in.size, out.size)
    return out


def attention_parallel(i: int, v_in: np.ndarray, ctx: TemporalContext, t: float,
                       p: AttentionParams, cfg: DualScopeConfig,
                       stats: WorkerStats | None = None) -> np.ndarray:
    if ctx.halo != cfg.halo:
        raise ProtocolError(f"context halo {ctx.halo} != n_local/2 = {cfg.halo}", i)
    ctx.check(cfg.n_global)
    ext, valid = ctx.extended(v_in)
    return dual_scope_kernel(v_in, ext, valid, ctx.c_global, p, cfg.halo,
                             cfg.logit_bias(t), stats)


def predict_sent_bytes(kind: LayerKind, worker: int, plan: ClipPlan, frame_elems: int,
                       halo: int = 0, n_global: int = 0) -> int:
    """Closed-form payload bytes ``worker`` sends for one layer call.

    ``frame_elems`` is H*W*C. For group norm ``n_global`` is the group count.
    """
    n = plan.n_workers
    if n == 1:
        return 0
    neighbours = (worker > 0) + (worker < n - 1)
    if kind == "groupnorm":
        return 2 * (n - 1) * n_global * 4
    halo_bytes = 4 * halo * frame_elems * neighbours
    if kind == "conv" or not n_global:
        return halo_bytes
    # ring all-gather forwards every contribution except the successor's own
    counts = [len(plan.global_members(w, n_global)) for w in range(n)]
    ring = sum(counts) - counts[(worker + 1) % n]
    return halo_bytes + 4 * ring * frame_elems
