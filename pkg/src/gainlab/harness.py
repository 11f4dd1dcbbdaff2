"""Sequential multi-domain adaptation and the adaptation-matrix metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from gainlab.adapters import AdapterOptions, AdapterState, Method, init_adapter, packnet_push
from gainlab.corpus import Corpus
from gainlab.model import TransformerWeights, perplexity, windows
from gainlab.optimize import (
    FISHER_SAMPLES,
    DivergenceError,
    ReplayBuffer,
    TrainConfig,
    TrainLog,
    estimate_fisher,
    scaling_summary,
    snapshot,
    train_domain,
)

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Protocol:
    domains: tuple[str, ...]
    method: Method | str
    options: AdapterOptions = AdapterOptions()
    train: TrainConfig = TrainConfig()
    cycles: int = 1
    seeds: tuple[int, ...] = (0,)
    halt_on_divergence: bool = False

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "method", Method.parse(self.method))
        if self.cycles < 1:
            raise ProtocolError("cycles must be >= 1")
        if not self.domains:
            raise ProtocolError("protocol needs at least one domain")
        if len(set(self.domains)) != len(self.domains):
            raise ProtocolError("domain ids must be unique")


@dataclass
class AdaptationMatrix:
    """Percent PPL change of every domain (columns) after each training step (rows)."""

    domains: list[str]
    trained: list[str]
    baseline: np.ndarray
    ppl: np.ndarray
    diverged: list[bool] = field(default_factory=list)
    scaling: list[dict | None] = field(default_factory=list)
    logs: list[TrainLog] = field(default_factory=list, repr=False)

    @property
    def entries(self) -> np.ndarray:
        return 100.0 * (self.ppl / self.baseline[None, :] - 1.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ppl.shape

    def trained_column(self, row: int) -> int:
        return self.domains.index(self.trained[row])


def _resolve_suite(suite) -> dict[str, Corpus]:
    if isinstance(suite, dict):
        return suite
    return {c.domain_id: c for c in suite}


def baseline_ppls(weights: TransformerWeights, suite, domains: Sequence[str]) -> np.ndarray:
    s = _resolve_suite(suite)
    return np.array([perplexity(weights, None, s[d].eval) for d in domains])


def run_sequential(weights: TransformerWeights, suite, protocol: Protocol, seed: int | None = None,
                   baseline: np.ndarray | None = None,
                   on_step: Callable[[int, str, AdapterState], None] | None = None,
                   adapter: AdapterState | None = None) -> AdaptationMatrix:
    """Train one adapter through the domain sequence, evaluating every domain after each step.

    The adapter is carried forward across domains; PackNet pushes a fresh unit
    at every domain start. ``on_step(row, domain, adapter)`` is called after
    each evaluated step (used for checkpointing).
    """
    s = _resolve_suite(suite)
    for d in protocol.domains:
        if d not in s:
            raise ProtocolError(f"unknown domain {d!r}")
    seed = protocol.seeds[0] if seed is None else seed
    cfg = replace(protocol.train, seed=seed)
    opts = replace(protocol.options, seed=seed)
    domains = list(protocol.domains)
    if baseline is None:
        baseline = baseline_ppls(weights, s, domains)
    if adapter is None:
        adapter = init_adapter(protocol.method, weights.config, opts, weights=weights)

    buffer = ReplayBuffer(cfg.replay.buffer_per_domain) if cfg.replay is not None else None
    buffer_rng = np.random.default_rng([seed, 7])
    prev = None
    rows, trained, diverged, scaling, logs = [], [], [], [], []
    order = domains * protocol.cycles
    for step, d in enumerate(order):
        if adapter.method is Method.PACKNET_STACK:
            adapter = packnet_push(adapter)
        try:
            adapter, tlog = train_domain(weights, adapter, s[d].train, cfg, prev=prev, buffer=buffer, stream=step)
        except DivergenceError as exc:
            log.warning("domain %s diverged at step %d", d, exc.step)
            rows.append(np.full(len(domains), np.nan))
            trained.append(d)
            diverged.append(True)
            scaling.append(None)
            logs.append(exc.log)
            if protocol.halt_on_divergence:
                break
            continue
        rows.append(np.array([perplexity(weights, adapter, s[c].eval) for c in domains]))
        trained.append(d)
        diverged.append(False)
        scaling.append(scaling_summary(adapter))
        logs.append(tlog)
        if on_step is not None:
            on_step(step, d, adapter)
        if cfg.regularizer is not None:
            if cfg.regularizer.kind == "ewc":
                win = windows(s[d].train, weights.config.context_len)
                pick = np.random.default_rng([seed, step, 3]).choice(
                    len(win), size=min(FISHER_SAMPLES, len(win)), replace=False)
                est = estimate_fisher(weights, adapter, win[np.sort(pick)])
                prev = est if prev is None else prev.combine(est)
            else:
                prev = snapshot(adapter)
        if buffer is not None:
            buffer.add(d, s[d].train, weights.config.context_len, buffer_rng)
    return AdaptationMatrix(domains=domains, trained=trained, baseline=np.asarray(baseline, dtype=np.float64),
                            ppl=np.array(rows).reshape(len(rows), len(domains)), diverged=diverged,
                            scaling=scaling, logs=logs)


@dataclass
class ForgettingMetrics:
    in_domain_avg: float
    final_forgetting: float
    earlier_avg_per_step: list[float]
    forward_interference_avg: float
    n_diverged: int = 0
    partial: bool = False

    def to_dict(self) -> dict:
        return {"in_domain_avg": self.in_domain_avg, "final_forgetting": self.final_forgetting,
                "earlier_avg_per_step": self.earlier_avg_per_step,
                "forward_interference_avg": self.forward_interference_avg,
                "n_diverged": self.n_diverged, "partial": self.partial}


def _nanmean(values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")


def forgetting_metrics(matrix) -> ForgettingMetrics:
    """Summaries of an adaptation matrix.

    Accepts an :class:`AdaptationMatrix` or a bare square array whose row ``i``
    follows training on column ``i``. Entries of not-yet-trained domains are
    forward interference; entries of already-trained domains (other than the
    current one) are retention.
    """
    if isinstance(matrix, AdaptationMatrix):
        e = matrix.entries
        cols = [matrix.trained_column(i) for i in range(len(matrix.trained))]
        diverged = list(matrix.diverged) or [False] * len(cols)
    else:
        e = np.asarray(matrix, dtype=np.float64)
        if e.ndim != 2:
            raise ProtocolError("adaptation matrix must be 2-D")
        cols = list(range(e.shape[0]))
        diverged = [bool(np.any(np.isnan(r))) for r in e]
    if e.size == 0 or e.shape[0] == 0:
        raise ProtocolError("empty adaptation matrix")
    diag, upper, earlier = [], [], []
    seen: list[int] = []
    for i, c in enumerate(cols):
        if not diverged[i]:
            diag.append(e[i, c])
            upper.extend(e[i, j] for j in range(e.shape[1]) if j not in seen and j != c)
        prior = [j for j in dict.fromkeys(seen) if j != c]
        earlier.append(_nanmean(e[i, j] for j in prior) if prior and not diverged[i] else float("nan"))
        seen.append(c)
    last = max((i for i in range(len(cols)) if not diverged[i]), default=None)
    if last is None:
        final = float("nan")
    else:
        prior = [j for j in dict.fromkeys(cols[:last]) if j != cols[last]]
        final = _nanmean(e[last, j] for j in prior) if prior else 0.0 if len(cols) == 1 else float("nan")
    n_div = int(sum(diverged))
    return ForgettingMetrics(
        in_domain_avg=_nanmean(diag),
        final_forgetting=final,
        earlier_avg_per_step=earlier,
        forward_interference_avg=_nanmean(upper) if upper else 0.0,
        n_diverged=n_div,
        partial=n_div > 0,
    )


@dataclass
class OrderingsSummary:
    orderings: list[list[str]]
    metrics: list[ForgettingMetrics]
    final_forgetting_mean: float
    final_forgetting_std: float
    in_domain_mean: float
    in_domain_std: float

    def to_dict(self) -> dict:
        return {"orderings": self.orderings, "metrics": [m.to_dict() for m in self.metrics],
                "final_forgetting_mean": self.final_forgetting_mean,
                "final_forgetting_std": self.final_forgetting_std,
                "in_domain_mean": self.in_domain_mean, "in_domain_std": self.in_domain_std}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ProtocolError("no values to summarise")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize_orderings(orderings: list[list[str]], metrics: list[ForgettingMetrics]) -> OrderingsSummary:
    ff = mean_std([m.final_forgetting for m in metrics])
    ind = mean_std([m.in_domain_avg for m in metrics])
    return OrderingsSummary(orderings, metrics, ff[0], ff[1], ind[0], ind[1])


def validate_ordering(protocol: Protocol, ordering: Sequence[str]):
    if len(ordering) != len(set(ordering)):
        raise ProtocolError(f"ordering {list(ordering)} repeats a domain")
    if set(ordering) != set(protocol.domains):
        raise ProtocolError(f"ordering {list(ordering)} does not cover the domain set exactly")


def random_orderings(domains: Sequence[str], n: int, seed: int) -> list[list[str]]:
    rng = np.random.default_rng([seed, 11])
    return [[domains[i] for i in rng.permutation(len(domains))] for _ in range(n)]


def run_orderings(weights: TransformerWeights, suite, protocol: Protocol,
                  orderings: Sequence[Sequence[str]], seed: int | None = None) -> OrderingsSummary:
    """One fresh sequential run per ordering, aggregated."""
    for o in orderings:
        validate_ordering(protocol, o)
    s = _resolve_suite(suite)
    base = dict(zip(protocol.domains, baseline_ppls(weights, s, protocol.domains)))
    metrics = []
    for o in orderings:
        p = replace(protocol, domains=tuple(o))
        m = run_sequential(weights, s, p, seed=seed, baseline=np.array([base[d] for d in o]))
        metrics.append(forgetting_metrics(m))
    return summarize_orderings([list(o) for o in orderings], metrics)


def run_lr_sweep(weights: TransformerWeights, suite, protocol: Protocol, learning_rates: Sequence[float],
                 seed: int | None = None) -> list[tuple[float, AdaptationMatrix]]:
    s = _resolve_suite(suite)
    base = baseline_ppls(weights, s, protocol.domains)
    out = []
    for lr in learning_rates:
        p = replace(protocol, train=replace(protocol.train, learning_rate=lr))
        out.append((lr, run_sequential(weights, s, p, seed=seed, baseline=base)))
    return out
