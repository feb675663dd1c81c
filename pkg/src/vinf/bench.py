"""Worker-count sweeps with per-module synchronization overhead.

For every N > 1 the run is repeated with all context sync disabled ("plain"),
with exactly one layer kind synchronized ("+conv", ...), and fully synced.
A kind's overhead is its "+kind" time minus the plain time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .clip import ClipPlan, predict_sent_bytes
from .config import RunConfig
from .pipeline import LAYER_KINDS, Distributed, build_model, denoise
from .runtime import initial_latent
from .tensor import max_abs_diff


@dataclass
class BenchRow:
    workers: int
    wall_seconds: float
    speedup: float
    max_abs_diff: float
    equivalent: bool
    traffic: dict[str, int]
    predicted: dict[str, int]
    overhead_seconds: dict[str, float] = field(default_factory=dict)
    ablation_diffs: dict[str, float] = field(default_factory=dict)

    @property
    def traffic_matches(self) -> bool:
        return self.traffic == self.predicted

    def to_dict(self) -> dict:
        return {
            "record": "bench", "workers": self.workers, "wall_seconds": self.wall_seconds,
            "speedup": self.speedup, "max_abs_diff": self.max_abs_diff,
            "equivalent": self.equivalent, "traffic": self.traffic,
            "predicted": self.predicted, "traffic_matches": self.traffic_matches,
            "overhead_seconds": self.overhead_seconds, "ablation_diffs": self.ablation_diffs,
        }


def predicted_traffic(cfg: RunConfig, workers: int) -> dict[str, int]:
    """Closed-form total payload bytes per layer kind for a whole run."""
    plan = ClipPlan(workers, cfg.frames)
    frame = cfg.height * cfg.width * cfg.channels
    calls = cfg.blocks * cfg.steps
    out = {}
    for kind, halo, n_global in (("conv", (cfg.taps - 1) // 2, 0),
                                 ("groupnorm", 0, cfg.groups),
                                 ("attention", cfg.n_local // 2, cfg.n_global)):
        per_call = sum(predict_sent_bytes(kind, w, plan, frame, halo, n_global)
                       for w in range(workers))
        out[kind] = per_call * calls
    return out


def bench(cfg: RunConfig, sweep: list[int], ablations: bool = True) -> list[BenchRow]:
    for n in sweep:
        cfg.validate(workers=n)
    x_T = initial_latent(cfg)
    model = build_model(cfg.model_config())
    dcfg = cfg.denoise_config()
    tol = dcfg.steps * 1e-5

    t0 = time.perf_counter()
    x_seq = denoise(x_T, model, dcfg)
    seq_seconds = time.perf_counter() - t0

    def timed(n: int, ablate: frozenset = frozenset()):
        t0 = time.perf_counter()
        x, report = denoise(x_T, model, dcfg, Distributed(n, ablate=ablate))
        return x, report, time.perf_counter() - t0

    rows = []
    for n in sweep:
        x, report, wall = timed(n)
        traffic = {k: report.bytes_by_kind().get(k, 0) for k in LAYER_KINDS}
        diff = max_abs_diff(x, x_seq)
        row = BenchRow(n, wall, seq_seconds / wall, diff, diff <= tol, traffic,
                       predicted_traffic(cfg, n))
        if n > 1 and ablations:
            _, _, plain = timed(n, frozenset(LAYER_KINDS))
            for kind in LAYER_KINDS:
                x_k, _, t_k = timed(n, frozenset(LAYER_KINDS) - {kind})
                row.overhead_seconds[kind] = t_k - plain
                # only ``kind`` unsynced: shows whether its context is load-bearing
                x_off, _, _ = timed(n, frozenset({kind}))
                row.ablation_diffs[kind] = max_abs_diff(x_off, x_seq)
        else:
            row.overhead_seconds = {k: 0.0 for k in LAYER_KINDS}
        rows.append(row)
    return rows


def format_table(rows: list[BenchRow]) -> str:
    head = (f"{'N':>3} {'wall[s]':>9} {'speedup*':>9} {'conv+[s]':>9} {'gn+[s]':>9} "
            f"{'attn+[s]':>9} {'bytes':>12} {'=pred':>6} {'max|diff|':>10} {'equiv':>6}")
    lines = [head]
    for r in rows:
        o = r.overhead_seconds
        lines.append(
            f"{r.workers:>3} {r.wall_seconds:>9.3f} {r.speedup:>9.2f} {o.get('conv', 0):>9.3f} "
            f"{o.get('groupnorm', 0):>9.3f} {o.get('attention', 0):>9.3f} "
            f"{sum(r.traffic.values()):>12} {str(r.traffic_matches):>6} "
            f"{r.max_abs_diff:>10.2e} {str(r.equivalent):>6}")
        for kind, d in r.ablation_diffs.items():
            flag = "breaks equivalence" if d > 1e-2 else "still equivalent"
            lines.append(f"      without {kind} sync: max|diff| {d:.2e} ({flag})")
    lines.append("* speedup vs the sequential reference run")
    return "\n".join(lines)
