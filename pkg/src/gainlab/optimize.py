"""Adapter training: AdamW on the LM loss plus the continual-learning add-ons.

The regularisers (L2-to-previous, EWC) and the replay buffer all hinge on
domain boundaries; the harness snapshots them between domains and passes them
in here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from gainlab.adapters import MULTIPLICATIVE, AdapterState, init_adapter, materialize
from gainlab.diagnostics import scaling_stats
from gainlab.model import GradTape, TransformerWeights, backward, forward, lm_loss, windows

REPLAY_BUFFER_PER_DOMAIN = 16
REPLAY_MIX_INTERVAL = 4
FISHER_SAMPLES = 64
# Desk default, shared by every method. At 1e-3 the toy base still improves
# on all domains whichever adapter is used, which hides the interference.
DEFAULT_LR = 3e-3


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, step: int, log: "TrainLog"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.log = log


@dataclass(frozen=True)
class Regularizer:
    kind: str  # "l2_prev" | "ewc"
    lam: float

    def __post_init__(self):
        if self.kind not in ("l2_prev", "ewc"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.lam < 0:
            raise ValueError("regularizer weight must be >= 0")


@dataclass(frozen=True)
class ReplayConfig:
    buffer_per_domain: int = REPLAY_BUFFER_PER_DOMAIN
    mix_interval: int = REPLAY_MIX_INTERVAL


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LR
    steps_per_epoch: int = 50
    epochs: int = 5
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    regularizer: Regularizer | None = None
    replay: ReplayConfig | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps_per_epoch * self.epochs <= 0:
            raise ValueError("need at least one training step")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if d.get("regularizer") is not None:
            d["regularizer"] = Regularizer(**d["regularizer"])
        if d.get("replay") is not None:
            d["replay"] = ReplayConfig(**d["replay"])
        return cls(**d)


@dataclass
class FisherEstimate:
    fisher: dict[str, torch.Tensor]
    snapshot: dict[str, torch.Tensor]

    def __post_init__(self):
        for k, v in self.fisher.items():
            if torch.any(v < 0):
                raise ValueError(f"negative Fisher entry in {k}")
            if v.shape != self.snapshot[k].shape:
                raise ValueError(f"Fisher/snapshot shape mismatch for {k}")

    def combine(self, newer: "FisherEstimate") -> "FisherEstimate":
        """Accumulate importances; anchor at the newer snapshot."""
        return FisherEstimate({k: self.fisher[k] + newer.fisher[k] for k in newer.fisher}, newer.snapshot)


class ReplayBuffer:
    """Fixed-size per-domain store of training windows."""

    def __init__(self, per_domain: int = REPLAY_BUFFER_PER_DOMAIN):
        self.per_domain = per_domain
        self.domains: list[tuple[str, np.ndarray]] = []

    def add(self, domain_id: str, train_tokens, context_len: int, rng: np.random.Generator):
        win = windows(train_tokens, context_len)
        if len(win) == 0:
            raise TrainingError(f"{domain_id}: no windows to store")
        idx = rng.choice(len(win), size=self.per_domain, replace=len(win) < self.per_domain)
        self.domains.append((domain_id, win[np.sort(idx)]))

    def sequences(self) -> np.ndarray:
        if not self.domains:
            return np.zeros((0, 0), dtype=np.int64)
        return np.concatenate([w for _, w in self.domains], axis=0)

    def __len__(self) -> int:
        return sum(len(w) for _, w in self.domains)


def replay_schedule(step: int, mix_interval: int, buffer: ReplayBuffer | None) -> str:
    """``"buffer"`` on every ``mix_interval``-th step when the buffer has data, else ``"current"``."""
    if step < 1:
        raise ValueError("steps are numbered from 1")
    if buffer is not None and len(buffer) > 0 and step % mix_interval == 0:
        return "buffer"
    return "current"


def l2_prev_penalty(params: Mapping[str, torch.Tensor], params_prev: Mapping[str, torch.Tensor], lam: float,
                    weights: Mapping[str, torch.Tensor] | None = None):
    """``lam * sum(w * (p - p_prev)**2)`` and its gradient ``2 lam w (p - p_prev)``.

    ``weights`` defaults to ones (plain L2); EWC passes the diagonal Fisher.
    """
    value = 0.0
    grads = {}
    for k, p in params.items():
        prev = params_prev[k]
        if p.shape != prev.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(p.shape)} vs {tuple(prev.shape)}")
        d = p.detach() - prev
        w = 1.0 if weights is None else weights[k]
        value += float(lam * torch.sum(w * d * d))
        grads[k] = 2.0 * lam * w * d
    return value, grads


def _penalty_term(adapter: AdapterState, cfg: TrainConfig, prev) -> torch.Tensor | None:
    reg = cfg.regularizer
    if reg is None or prev is None or reg.lam == 0:
        return None
    if reg.kind == "ewc":
        if not isinstance(prev, FisherEstimate):
            raise TrainingError("EWC needs a FisherEstimate from the previous domain")
        snap, w = prev.snapshot, prev.fisher
    else:
        snap = prev.snapshot if isinstance(prev, FisherEstimate) else prev
        w = None
    total = None
    for k, p in adapter.params.items():
        d = p - snap[k]
        term = torch.sum(d * d) if w is None else torch.sum(w[k] * d * d)
        total = term if total is None else total + term
    return None if total is None else reg.lam * total


def snapshot(adapter: AdapterState) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in adapter.params.items()}


def mean_squared(grads: Sequence[Mapping[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Elementwise mean of squared gradients over samples."""
    if len(grads) == 0:
        raise TrainingError("need at least one sequence to estimate the Fisher")
    acc = {k: torch.zeros_like(v) for k, v in grads[0].items()}
    for g in grads:
        for k, v in g.items():
            acc[k] += v.detach() ** 2
    n = float(len(grads))
    return {k: v / n for k, v in acc.items()}


def estimate_fisher(weights: TransformerWeights, adapter: AdapterState, sample: Sequence) -> FisherEstimate:
    """Diagonal Fisher: mean over sequences of the squared LM-loss gradient."""
    if len(sample) == 0:
        raise TrainingError("need at least one sequence to estimate the Fisher")
    grads = []
    for seq in sample:
        tape = GradTape(adapter.params)
        loss = tape.record(lm_loss(forward(weights, adapter, seq), seq))
        grads.append(backward(tape, loss))
    return FisherEstimate(mean_squared(grads), snapshot(adapter))


def scaling_summary(adapter: AdapterState) -> dict | None:
    if adapter.method not in MULTIPLICATIVE:
        return None
    return scaling_stats(adapter.flat_gains()).to_dict()


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    diverged: bool = False

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.steps])


def _as_window_pool(corpus, context_len: int) -> np.ndarray:
    if isinstance(corpus, (list, tuple)):
        parts = [windows(c, context_len) for c in corpus]
        pool = np.concatenate(parts, axis=0) if parts else np.zeros((0, context_len), dtype=np.int64)
    else:
        pool = windows(corpus, context_len)
    return pool


def make_optimizer(params: Sequence[torch.Tensor], cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                             weight_decay=cfg.weight_decay, foreach=False)


def train_domain(weights: TransformerWeights, adapter: AdapterState, corpus, cfg: TrainConfig,
                 prev=None, buffer: ReplayBuffer | None = None, stream: int = 0):
    """Train a copy of ``adapter`` on ``corpus`` and return ``(adapter', log)``.

    ``corpus`` is a token array or a list of them (windows are pooled).
    ``prev`` is a parameter snapshot (L2) or :class:`FisherEstimate` (EWC);
    it is ignored when no regulariser is configured, and ``buffer`` is ignored
    without a replay config. ``stream`` separates the RNG streams of successive
    domains in one run. Raises :class:`DivergenceError` on a non-finite loss.
    """
    ctx = weights.config.context_len
    pool = _as_window_pool(corpus, ctx)
    if len(pool) == 0:
        raise TrainingError("corpus has no full training windows")
    rng = np.random.default_rng([cfg.seed, stream])
    replay_rng = np.random.default_rng([cfg.seed, stream, 1])
    if cfg.replay is None:
        buffer = None
    if cfg.regularizer is None:
        prev = None

    adapter = adapter.clone()
    log = TrainLog()
    if not adapter.params:
        return adapter, log
    opt = make_optimizer(list(adapter.params.values()), cfg)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pool))
        cursor = 0
        for _ in range(cfg.steps_per_epoch):
            step += 1
            source = replay_schedule(step, cfg.replay.mix_interval, buffer) if buffer is not None else "current"
            if source == "buffer":
                seqs = buffer.sequences()
                batch = seqs[replay_rng.integers(0, len(seqs), size=cfg.batch_size)]
            else:
                idx = order[np.arange(cursor, cursor + cfg.batch_size) % len(pool)]
                cursor += cfg.batch_size
                batch = pool[idx]
            tape = GradTape(adapter.params)
            lm = lm_loss(forward(weights, adapter, batch), batch)
            pen = _penalty_term(adapter, cfg, prev)
            loss = tape.record(lm if pen is None else lm + pen)
            lval = float(lm.detach())
            if not math.isfinite(float(loss.detach())):
                log.diverged = True
                log.steps.append({"step": step, "epoch": epoch + 1, "loss": lval, "penalty": float("nan"),
                                  "source": source})
                raise DivergenceError(step, log)
            grads = backward(tape, loss)
            for name, p in adapter.params.items():
                p.grad = grads[name]
            opt.step()
            opt.zero_grad(set_to_none=True)
            row = {"step": step, "epoch": epoch + 1, "loss": lval,
                   "penalty": 0.0 if pen is None else float(pen.detach()), "source": source}
            log.steps.append(row)
        stats = scaling_summary(adapter)
        log.epochs.append({"epoch": epoch + 1, "mean_loss": float(np.mean(log.losses()[-cfg.steps_per_epoch:])),
                           **(stats or {})})
    return adapter, log


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    learning_rate: float = 3e-3
    batch_size: int = 8
    seed: int = 0

    def to_train_config(self) -> TrainConfig:
        epochs = 5 if self.steps % 5 == 0 else 1
        return TrainConfig(learning_rate=self.learning_rate, steps_per_epoch=self.steps // epochs, epochs=epochs,
                           batch_size=self.batch_size, seed=self.seed)


def pretrain(config, corpora, cfg: PretrainConfig = PretrainConfig(), dtype=torch.float32):
    """Train every weight of a freshly initialised model on the pooled corpora.

    Returns ``(weights, log)``; the weights are plain tensors without grad.
    """
    init = TransformerWeights.init_random(config, cfg.seed, dtype=dtype)
    full = init_adapter("full_ft", config, weights=init, dtype=dtype)
    full, log = train_domain(init, full, list(corpora), cfg.to_train_config())
    return materialize(full, init), log


def param_drift(adapter: AdapterState, reference: Mapping[str, torch.Tensor]) -> float:
    """``||theta - theta_ref||_2`` over all trainable tensors."""
    total = math.fsum(float(torch.sum((adapter.params[k].detach().double() - reference[k].double()) ** 2))
                      for k in adapter.params)
    return math.sqrt(total)
