"""Run orchestration: build inputs from a RunConfig and drive either backend."""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import time
import traceback

import numpy as np

from .clip import ClipPlan, partition
from .errors import TransportError, VinfError
from .config import RunConfig
from .metrics import MetricsReport, WorkerStats
from .pipeline import Distributed, Model, build_model, denoise, worker_denoise
from .tensor import DTYPE, concat_frames, tensor_from_seed
from .transport.envelope import Control, floats_to_bytes
from .transport.tcp import Coordinator, WorkerLink


def initial_latent(cfg: RunConfig) -> np.ndarray:
    return tensor_from_seed(cfg.dims, cfg.seed)


def run(cfg: RunConfig, ablate: frozenset = frozenset()) -> tuple[np.ndarray, MetricsReport]:
    cfg.validate()
    x_T = initial_latent(cfg)
    model = build_model(cfg.model_config())
    if cfg.transport == "tcp":
        return run_tcp(cfg, x_T, model)
    return denoise(x_T, model, cfg.denoise_config(),
                   Distributed(cfg.workers, validating=cfg.validating, ablate=ablate))


def run_sequential(cfg: RunConfig) -> tuple[np.ndarray, float]:
    cfg.validate(workers=1)
    x_T = initial_latent(cfg)
    model = build_model(cfg.model_config())
    t0 = time.perf_counter()
    x0 = denoise(x_T, model, cfg.denoise_config())
    return x0, time.perf_counter() - t0


def run_tcp(cfg: RunConfig, x_T: np.ndarray, model: Model,
            timeout: float = 120.0) -> tuple[np.ndarray, MetricsReport]:
    """Spawn ``cfg.workers`` worker processes on this host and coordinate them."""
    clips, plan = partition(x_T, cfg.workers)
    model.config.check_plan(plan)
    listen = cfg.listen or os.environ.get("VINF_LISTEN", "127.0.0.1:0")
    coord = Coordinator(listen, cfg.workers, cfg.digest(), timeout)
    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as fh:
        fh.write(cfg.canonical())
        cfg_path = fh.name
    procs = []
    t0 = time.perf_counter()
    try:
        procs = [subprocess.Popen([sys.executable, "-m", "vinf", "worker", "--config", cfg_path,
                                   "--connect", coord.address])
                 for _ in range(cfg.workers)]
        coord.accept_workers()
        for rank, clip in enumerate(clips):
            coord.send(rank, Control.CLIP, floats_to_bytes(clip))
        outputs, stats = [], []
        for rank in range(cfg.workers):
            outputs.append(_expect(coord, rank, Control.RESULT).control_body)
            stats.append(WorkerStats.from_dict(
                json.loads(_expect(coord, rank, Control.STATS).control_body)))
        wall = time.perf_counter() - t0
    finally:
        coord.close()
        for p in procs:
            try:
                p.wait(timeout=30)
            except subprocess.TimeoutExpired:
                p.kill()
        os.unlink(cfg_path)
    tail = x_T.shape[1:]
    parts = [np.frombuffer(b, dtype="<f4").astype(DTYPE).reshape((plan.f_clip,) + tail)
             for b in outputs]
    return concat_frames(parts), MetricsReport(stats, wall)


def _expect(coord: Coordinator, rank: int, code: Control):
    env = coord.recv(rank)
    if env.control_code == Control.ERROR:
        info = env.control_json()
        raise TransportError(info["message"], worker=info.get("worker", rank),
                             stage=info.get("stage"))
    if env.control_code != code:
        raise TransportError(f"expected {code.name}, got {env.control_code.name}", worker=rank)
    return env


def tcp_worker_main(config_path: str, address: str) -> int:
    cfg = RunConfig.from_file(config_path)
    try:
        link = WorkerLink(address, cfg.digest(), record_trace=cfg.validating)
    except OSError as exc:
        raise TransportError(f"cannot join coordinator at {address}: {exc}",
                             stage="handshake") from exc
    try:
        model = build_model(cfg.model_config())
        plan = ClipPlan(cfg.workers, cfg.frames)
        body = link.recv_control(Control.CLIP).control_body
        clip = np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(
            (plan.f_clip,) + cfg.dims[1:])
        out = worker_denoise(clip, model, cfg.denoise_config(), link.endpoint, plan)
        link.send_control(Control.RESULT, floats_to_bytes(out))
        link.send_control(Control.STATS, json.dumps(link.endpoint.stats.to_dict()).encode())
        return 0
    except (VinfError, OSError) as exc:
        info = {"worker": link.rank, "stage": getattr(exc, "stage", None),
                "message": f"{type(exc).__name__}: {exc}"}
        try:
            link.send_control(Control.ERROR, json.dumps(info).encode())
        except VinfError:
            pass
        traceback.print_exc()
        return 3
    finally:
        link.close()
