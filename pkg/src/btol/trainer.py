"""Training pipelines: source model, target init, freeze-and-thaw, black-box.

The oracle argument of every pipeline is anything exposing
``forward(x) -> logits``, ``backward(x, g_logits) -> g_x`` and
``supports_backward`` -- a :class:`~btol.oracle.RemoteOracle` in real use,
a :class:`~btol.oracle.LocalOracle` around the simulator in the black-box
pipeline.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .models import (AdapterSpec, Network, SegNetSpec, build_adapter, build_segnet,
                     clone_into_simulator)
from .netcore import (Tensor, adam_step, backward, kl_divergence, no_grad, softmax_channels,
                      softmax_cross_entropy, add)
from .oracle import BACKWARD_DISABLED, LocalOracle, OracleError, OracleMode
from .taskgen import SegDataset

log = logging.getLogger(__name__)

TRAIN_ADAPTER = "train_adapter"
TRAIN_TARGET = "train_target"

# batch-order stream per stage, so two stages never share a shuffle
_STREAM_SOURCE, _STREAM_INIT, _STREAM_BPBA, _STREAM_SATISFY, _STREAM_DISTILL = range(5)


@dataclass
class AdaptConfig:
    T_rounds: int = 4
    E1: int = 10
    E2: int = 30
    lr: float = 1e-4
    batch_size: int = 8
    init_epochs: int = 100
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    target_arch: SegNetSpec = field(default_factory=SegNetSpec)
    seed: int = 0
    pseudo_mode: str = "hard"
    satisfy_epochs: int = 10
    distill_epochs: int = 30

    def validate(self) -> None:
        if self.T_rounds < 0:
            raise ValueError("T_rounds must be >= 0")
        if self.T_rounds > 0 and (self.E1 < 1 or self.E2 < 1):
            raise ValueError("E1 and E2 must be >= 1 when T_rounds > 0")
        if self.init_epochs < 0 or self.satisfy_epochs < 0 or self.distill_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")
        if self.pseudo_mode != "hard":
            raise ValueError(f"pseudo_mode {self.pseudo_mode!r} is not implemented (only 'hard')")
        self.adapter.validate()
        self.target_arch.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown adapt keys: {sorted(unknown)}")
        d = dict(d)
        if "adapter" in d:
            d["adapter"] = _strict(AdapterSpec, d["adapter"], "adapt.adapter")
        if "target_arch" in d:
            d["target_arch"] = _strict(SegNetSpec, d["target_arch"], "adapt.target_arch")
        return cls(**d)


def _strict(cls, d: dict, where: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


def phase_plan(cfg: AdaptConfig) -> list[tuple[str, int]]:
    """(phase, epochs) pairs: adapter then target, repeated T_rounds times."""
    plan = []
    for _ in range(cfg.T_rounds):
        plan.append((TRAIN_ADAPTER, cfg.E1))
        plan.append((TRAIN_TARGET, cfg.E2))
    return plan


@dataclass
class PhaseRecord:
    phase: str
    round: int
    epochs: int
    losses: list[float]
    adapter_hash: tuple[str, str]
    target_hash: tuple[str, str]
    forward_calls: int
    backward_calls: int


@dataclass
class RunLog:
    seed: int = 0
    stages: dict[str, list[float]] = field(default_factory=dict)
    phases: list[PhaseRecord] = field(default_factory=list)
    forward_calls: int = 0
    backward_calls: int = 0
    wall_time: float = 0.0
    checkpoints: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def params_digest(net: Network) -> str:
    h = hashlib.sha256()
    for name, p in net.params.items():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def oracle_calls(oracle) -> tuple[int, int]:
    """(forward, backward) requests made through ``oracle`` so far."""
    stats = getattr(oracle, "calls", None) or oracle.stats
    return stats.forward_calls, stats.backward_calls


def pseudo_label(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim != 4 or arr.shape[1] < 2:
        raise ValueError(f"expected (N, K>=2, H, W) logits, got {arr.shape}")
    return np.argmax(arr, axis=1).astype(np.int64)


def predict(net: Network, images: np.ndarray, adapter: Network | None = None, batch_size: int = 32) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size])
            if adapter is not None:
                x = adapter(x)
            out.append(pseudo_label(net(x)))
    return np.concatenate(out)


def _sgd_step(net: Network, loss: Tensor, lr: float) -> float:
    backward(loss)
    adam_step(net.params, lr)
    net.step += 1
    return loss.item()


# --------------------------------------------------------------------------
# stages

def train_source(dataset: SegDataset, spec: SegNetSpec = SegNetSpec(), epochs: int = 30, lr: float = 1e-3,
                 seed: int = 0, batch_size: int = 8, log_to: RunLog | None = None) -> Network:
    """Supervised cross-entropy training of the source model on labelled data."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    net = build_segnet(spec, seed)
    losses = []
    for epoch in range(epochs):
        total = []
        for idx in dataset.batch_order(batch_size, seed, epoch, _STREAM_SOURCE):
            loss = softmax_cross_entropy(net(dataset.images[idx]), dataset.masks[idx])
            total.append(_sgd_step(net, loss, lr))
        losses.append(float(np.mean(total)))
        log.debug("source epoch %d loss %.5f", epoch, losses[-1])
    if log_to is not None:
        log_to.stages["train_source"] = losses
    return net


def init_target(oracle, target: Network, data: SegDataset, cfg: AdaptConfig,
                log_to: RunLog | None = None) -> Network:
    """Fit ``target`` to the oracle's hard pseudo labels, forward queries only."""
    target.thaw()
    losses = []
    for epoch in range(cfg.init_epochs):
        total = []
        for idx in data.batch_order(cfg.batch_size, cfg.seed, epoch, _STREAM_INIT):
            x = data.images[idx]
            y = pseudo_label(oracle.forward(x))
            total.append(_sgd_step(target, softmax_cross_entropy(target(x), y), cfg.lr))
        losses.append(float(np.mean(total)))
        log.debug("init epoch %d loss %.5f", epoch, losses[-1])
    if log_to is not None:
        log_to.stages["init_target"] = losses
    return target


def _adapter_epoch(oracle, adapter: Network, target: Network, data: SegDataset, cfg: AdaptConfig,
                   epoch: int, on_batch: Callable | None) -> float:
    total = []
    for idx in data.batch_order(cfg.batch_size, cfg.seed, epoch, _STREAM_BPBA):
        x = data.images[idx]
        with no_grad():
            y = pseudo_label(target(x))
        z = adapter(x)
        logits = Tensor(oracle.forward(z.data), requires_grad=True)
        loss = softmax_cross_entropy(logits, y)
        if on_batch is not None:
            on_batch(loss.item())
        backward(loss)
        # pull dL/dlogits back through the served model, then through the adapter locally
        z.backward(oracle.backward(z.data, logits.grad))
        adam_step(adapter.params, cfg.lr)
        adapter.step += 1
        total.append(loss.item())
    return float(np.mean(total))


def _target_epoch(oracle, adapter: Network, target: Network, data: SegDataset, cfg: AdaptConfig,
                  epoch: int) -> float:
    total = []
    for idx in data.batch_order(cfg.batch_size, cfg.seed, epoch, _STREAM_BPBA):
        x = data.images[idx]
        with no_grad():
            y = pseudo_label(oracle.forward(adapter(x).data))
        total.append(_sgd_step(target, softmax_cross_entropy(target(x), y), cfg.lr))
    return float(np.mean(total))


def run_bpba(oracle, adapter: Network, target: Network, data: SegDataset, cfg: AdaptConfig,
             log_to: RunLog | None = None, on_adapter_batch: Callable | None = None):
    """Freeze-and-thaw between adapter and target model using the oracle's VJP.

    Adapter phase (target frozen): loss = CE(S(A(x)), argmax T(x)), gradient
    w.r.t. A(x) downloaded from the oracle.  Target phase (adapter frozen):
    loss = CE(T(x), argmax S(A(x))).  Returns ``(adapter, target, runlog)``.
    """
    if not oracle.supports_backward:
        raise OracleError(BACKWARD_DISABLED, "oracle does not serve gradients; use run_blackbox")
    runlog = log_to if log_to is not None else RunLog(seed=cfg.seed)
    start = time.perf_counter()
    fwd0, bwd0 = oracle_calls(oracle)
    # Each stage starts from fresh Adam moments, so resuming from a checkpoint
    # (which stores weights only) matches an uninterrupted run.  Within
    # freeze-and-thaw every network keeps its own moments across rounds.
    for net in (adapter, target):
        for p in net.params.values():
            p.reset_optimizer()
    epoch = 0
    for i, (phase, epochs) in enumerate(phase_plan(cfg)):
        a_start, t_start = params_digest(adapter), params_digest(target)
        f_start, b_start = oracle_calls(oracle)
        losses = []
        if phase == TRAIN_ADAPTER:
            target.freeze()
            adapter.thaw()
            for _ in range(epochs):
                losses.append(_adapter_epoch(oracle, adapter, target, data, cfg, epoch, on_adapter_batch))
                epoch += 1
        else:
            adapter.freeze()
            target.thaw()
            for _ in range(epochs):
                losses.append(_target_epoch(oracle, adapter, target, data, cfg, epoch))
                epoch += 1
        f_end, b_end = oracle_calls(oracle)
        runlog.phases.append(PhaseRecord(phase, i // 2, epochs, losses,
                                         (a_start, params_digest(adapter)), (t_start, params_digest(target)),
                                         f_end - f_start, b_end - b_start))
        log.info("round %d %s: loss %.5f -> %.5f", i // 2, phase, losses[0], losses[-1])
    adapter.thaw()
    target.thaw()
    fwd1, bwd1 = oracle_calls(oracle)
    runlog.forward_calls += fwd1 - fwd0
    runlog.backward_calls += bwd1 - bwd0
    runlog.wall_time += time.perf_counter() - start
    return adapter, target, runlog


def train_adapter_satisfy_both(adapter: Network, target: Network, oracle, data: SegDataset, epochs: int,
                               lr: float, seed: int = 0, batch_size: int = 8,
                               log_to: RunLog | None = None) -> Network:
    """Train A so the frozen local T agrees, on A(x), with both S's and T's labels of x.

    loss = CE(T(A(x)), argmax S(x)) + CE(T(A(x)), argmax T(x)); S is only
    queried forward, gradients flow through the local T into A.
    """
    target.freeze()
    adapter.thaw()
    losses = []
    for epoch in range(epochs):
        total = []
        for idx in data.batch_order(batch_size, seed, epoch, _STREAM_SATISFY):
            x = data.images[idx]
            with no_grad():
                y_src = pseudo_label(oracle.forward(x))
                y_tgt = pseudo_label(target(x))
            out = target(adapter(x))
            loss = add(softmax_cross_entropy(out, y_src), softmax_cross_entropy(out, y_tgt))
            total.append(_sgd_step(adapter, loss, lr))
        losses.append(float(np.mean(total)))
    target.thaw()
    if log_to is not None:
        log_to.stages["train_adapter_satisfy_both"] = losses
    return adapter


def distill_simulator(simulator: Network, adapter: Network, oracle, data: SegDataset, epochs: int, lr: float,
                      seed: int = 0, batch_size: int = 8, log_to: RunLog | None = None) -> Network:
    """Fit M on adapted inputs to S's soft outputs: loss = KL(softmax S(A(x)) || softmax M(A(x)))."""
    adapter.freeze()
    simulator.thaw()
    losses = []
    for epoch in range(epochs):
        total = []
        for idx in data.batch_order(batch_size, seed, epoch, _STREAM_DISTILL):
            with no_grad():
                z = adapter(data.images[idx]).data
            p = softmax_channels(oracle.forward(z))
            total.append(_sgd_step(simulator, kl_divergence(simulator(z), p), lr))
        losses.append(float(np.mean(total)))
    adapter.thaw()
    if log_to is not None:
        log_to.stages["distill_simulator"] = losses
    return simulator


def argmax_agreement(a: Network, b: Network, images: np.ndarray, adapter: Network | None = None) -> float:
    return float(np.mean(predict(a, images, adapter) == predict(b, images, adapter)))


# --------------------------------------------------------------------------
# pipelines

def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def fresh_target(cfg: AdaptConfig) -> Network:
    return build_segnet(cfg.target_arch, cfg.seed)


def fresh_adapter(cfg: AdaptConfig) -> Network:
    return build_adapter(cfg.adapter, cfg.seed + 1)


def run_baseline(oracle, data: SegDataset, cfg: AdaptConfig, target: Network | None = None):
    """Target model trained on the source model's pseudo labels only."""
    cfg.validate()
    runlog = RunLog(seed=cfg.seed)
    target = target if target is not None else fresh_target(cfg)
    start = time.perf_counter()
    f0, b0 = oracle_calls(oracle)
    _stage("init_target", init_target, oracle, target, data, cfg, runlog)
    f1, b1 = oracle_calls(oracle)
    runlog.forward_calls, runlog.backward_calls = f1 - f0, b1 - b0
    runlog.wall_time = time.perf_counter() - start
    return target, runlog


def run_bpba_pipeline(oracle, data: SegDataset, cfg: AdaptConfig, target: Network | None = None,
                      initialized: bool = False):
    """init_target (unless ``initialized``) followed by freeze-and-thaw."""
    cfg.validate()
    if not oracle.supports_backward:
        raise OracleError(BACKWARD_DISABLED, "oracle does not serve gradients; use run_blackbox")
    runlog = RunLog(seed=cfg.seed)
    target = target if target is not None else fresh_target(cfg)
    f0, b0 = oracle_calls(oracle)
    if not initialized:
        _stage("init_target", init_target, oracle, target, data, cfg, runlog)
    f1, b1 = oracle_calls(oracle)
    runlog.forward_calls, runlog.backward_calls = f1 - f0, b1 - b0
    adapter = fresh_adapter(cfg)
    _stage("freeze_and_thaw", run_bpba, oracle, adapter, target, data, cfg, runlog)
    return adapter, target, runlog


def run_blackbox(oracle, data: SegDataset, cfg: AdaptConfig, target: Network | None = None,
                 initialized: bool = False):
    """Black-box pipeline: init T, copy T into a simulator M, train A through T,
    distill M from forward queries, then freeze-and-thaw with the frozen local M
    standing in for S.  The remote backward endpoint is never used.

    Returns ``(adapter, target, simulator, runlog)``.
    """
    cfg.validate()
    runlog = RunLog(seed=cfg.seed)
    start = time.perf_counter()
    f0, b0 = oracle_calls(oracle)
    target = target if target is not None else fresh_target(cfg)
    if not initialized:
        _stage("init_target", init_target, oracle, target, data, cfg, runlog)
    simulator = _stage("clone_into_simulator", clone_into_simulator, target)
    adapter = fresh_adapter(cfg)
    _stage("train_adapter_satisfy_both", train_adapter_satisfy_both, adapter, target, oracle, data,
           cfg.satisfy_epochs, cfg.lr, cfg.seed, cfg.batch_size, runlog)
    _stage("distill_simulator", distill_simulator, simulator, adapter, oracle, data,
           cfg.distill_epochs, cfg.lr, cfg.seed, cfg.batch_size, runlog)
    local = LocalOracle(simulator, OracleMode.FORWARD_BACKWARD)
    inner = RunLog(seed=cfg.seed)
    _stage("freeze_and_thaw", run_bpba, local, adapter, target, data, cfg, inner)
    # phase call counts there are simulator calls; remote calls are counted below
    runlog.phases = inner.phases
    f1, b1 = oracle_calls(oracle)
    runlog.forward_calls, runlog.backward_calls = f1 - f0, b1 - b0
    runlog.stages["simulator_calls"] = [float(local.stats.forward_calls), float(local.stats.backward_calls)]
    simulator.thaw()
    runlog.wall_time = time.perf_counter() - start
    return adapter, target, simulator, runlog
