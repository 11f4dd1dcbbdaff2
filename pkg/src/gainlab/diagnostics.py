"""Weight-space and loss-space measurements of adapted models.

All matrix work is float64 through :mod:`gainlab.numerics`. Overlaps compare
orthonormal bases of top singular subspaces; ``side="right"`` uses the right
singular vectors (row space of the stored matrix), ``side="left"`` the left
ones (column space).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from gainlab.adapters import MULTIPLICATIVE, AdapterError, AdapterState, materialize
from gainlab.model import TARGETS, TransformerWeights, layer_key, perplexity, token_losses
from gainlab import numerics

TIE_GAP = 1e-8
TIGHT_BAND = (0.95, 1.05)
DEFAULT_K = 10
MAX_PROBED_LAYERS = 5
BOUND_TOL = 1e-9


class DiagnosticsError(ValueError):
    pass


class SubspaceTieWarning(UserWarning):
    """The k-th and (k+1)-th singular values are within ``TIE_GAP``."""


# ---- subspace measurements ------------------------------------------------

def _basis(m: np.ndarray, k: int, side: str) -> tuple[np.ndarray, bool]:
    r = numerics.svd(m)
    if side == "right":
        vecs = r.v
    elif side == "left":
        vecs = r.u
    else:
        raise DiagnosticsError(f"side must be 'left' or 'right', got {side!r}")
    tie = k < len(r.sigma) and (r.sigma[k - 1] - r.sigma[k]) < TIE_GAP
    return vecs[:, :k], tie


def overlap_with_tie(w_orig, w_new, k: int, side: str = "right") -> tuple[float, bool]:
    """:func:`subspace_overlap` plus whether either spectrum has a tie at ``k``."""
    a = numerics.as_matrix(w_orig)
    b = numerics.as_matrix(w_new)
    if a.shape != b.shape:
        raise numerics.DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 1 <= k <= min(a.shape):
        raise DiagnosticsError(f"k={k} must be in [1, {min(a.shape)}]")
    va, tie_a = _basis(a, k, side)
    vb, tie_b = _basis(b, k, side)
    value = float(np.sum((va.T @ vb) ** 2)) / k
    return value, bool(tie_a or tie_b)


def subspace_overlap(w_orig, w_new, k: int, side: str = "right") -> float:
    """Mean squared cosine between the top-``k`` singular subspaces, in [0, 1].

    Ties at the ``k``-th singular value make the subspace ill-defined; the
    value is still computed from the SVD's deterministic choice and a
    :class:`SubspaceTieWarning` is emitted.
    """
    value, tie = overlap_with_tie(w_orig, w_new, k, side)
    if tie:
        warnings.warn(f"singular-value tie at k={k}; top-k subspace is not unique", SubspaceTieWarning,
                      stacklevel=2)
    return value


def rank_subspace_overlap(w_orig, w_new, side: str = "right", tol: float = 1e-9) -> float:
    """Overlap of the full rank-``r`` singular subspaces, ``r = rank(w_orig)``.

    This is the quantity diagonal scaling preserves exactly: row scaling keeps
    the row space (``side="right"``), column scaling keeps the column space
    (``side="left"``).
    """
    r = numerics.rank(w_orig, tol)
    if r == 0:
        raise DiagnosticsError("w_orig has rank 0")
    return overlap_with_tie(w_orig, w_new, r, side)[0]


def truncate_rank(w, r: int) -> np.ndarray:
    """Best rank-``r`` approximation, used to build rank-deficient probes."""
    res = numerics.svd(w)
    if not 1 <= r <= len(res.sigma):
        raise DiagnosticsError(f"rank {r} out of range")
    return (res.u[:, :r] * res.sigma[:r]) @ res.v[:, :r].T


def frobenius_perturbation(w_orig, w_new) -> float:
    """``||w_new - w_orig||_F / ||w_orig||_F``."""
    a = numerics.as_matrix(w_orig)
    b = numerics.as_matrix(w_new)
    if a.shape != b.shape:
        raise numerics.DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    base = numerics.frobenius_norm(a)
    if base == 0.0:
        raise DiagnosticsError("w_orig is zero")
    return numerics.frobenius_norm(b - a) / base


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    max_violation: float


def singular_bound_check(w, s, side: str = "rows", tol: float = BOUND_TOL) -> BoundCheck:
    """Check ``s_min * sigma_i(W) <= sigma_i(S W) <= s_max * sigma_i(W)`` for every ``i``.

    ``side="rows"`` means ``diag(s) @ w``, ``"cols"`` means ``w @ diag(s)``.
    Breaches are reported relative to ``s_max * sigma_1(W)``, the scale of the
    largest singular value; the bound holds when the largest breach is at most
    ``tol`` (floating-point rounding).
    """
    a = numerics.as_matrix(w)
    s = np.asarray(s, dtype=np.float64).ravel()
    n = a.shape[0] if side == "rows" else a.shape[1] if side == "cols" else None
    if n is None:
        raise DiagnosticsError(f"side must be 'rows' or 'cols', got {side!r}")
    if s.shape != (n,):
        raise numerics.DimensionError(f"scaling has {s.size} entries, matrix side has {n}")
    if np.any(s <= 0):
        raise DiagnosticsError("singular-value bound needs strictly positive scaling")
    scaled = s[:, None] * a if side == "rows" else a * s[None, :]
    sig = numerics.singular_values(a)
    sig_s = numerics.singular_values(scaled)
    lo, hi = float(s.min()), float(s.max())
    scale = hi * sig[0] if sig[0] > 0 else 1.0
    breach = np.maximum(np.maximum(lo * sig - sig_s, sig_s - hi * sig), 0.0)
    worst = float(breach.max()) / scale
    return BoundCheck(holds=bool(worst <= tol), max_violation=worst)


# ---- scaling statistics -----------------------------------------------------

@dataclass(frozen=True)
class ScalingStats:
    s_min: float
    s_max: float
    s_mean: float
    pct_tight: float
    sign_flip_count: int

    def to_dict(self) -> dict:
        return {"s_min": self.s_min, "s_max": self.s_max, "s_mean": self.s_mean,
                "pct_tight": self.pct_tight, "sign_flips": self.sign_flip_count}


def scaling_stats(s, tight_band: tuple[float, float] = TIGHT_BAND) -> ScalingStats:
    v = np.asarray(s, dtype=np.float64).ravel()
    if v.size == 0:
        raise DiagnosticsError("empty scaling vector")
    lo, hi = tight_band
    return ScalingStats(
        s_min=float(v.min()),
        s_max=float(v.max()),
        s_mean=math.fsum(v.tolist()) / v.size,
        pct_tight=float(np.mean((v >= lo) & (v <= hi))),
        sign_flip_count=int(np.sum(v <= 0)),
    )


# ---- per-token deltas -------------------------------------------------------

@dataclass
class PerTokenDelta:
    deltas: np.ndarray  # (n_windows, context_len - 1)
    mean: float
    std: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def per_token_delta(weights: TransformerWeights, adapter_a, adapter_b, corpus, bins: int = 50) -> PerTokenDelta:
    """``loss_b - loss_a`` at every predicted position of the corpus windows."""
    if len(corpus) == 0:
        raise DiagnosticsError("empty corpus")
    la = token_losses(weights, adapter_a, corpus)
    lb = token_losses(weights, adapter_b, corpus)
    d = lb - la
    flat = d.ravel()
    mean = math.fsum(flat.tolist()) / flat.size
    std = float(np.sqrt(math.fsum(((flat - mean) ** 2).tolist()) / flat.size))
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    return PerTokenDelta(d, mean, std, counts, edges)


# ---- loss landscape -----------------------------------------------------------

@dataclass
class LandscapeTrace:
    coords: list[tuple[float, ...]]
    ppl: dict[str, list[float]]
    cosine: float | None = None

    def rows(self) -> list[dict]:
        out = []
        for i, c in enumerate(self.coords):
            row = {f"c{j}": v for j, v in enumerate(c)}
            row.update({name: vals[i] for name, vals in self.ppl.items()})
            out.append(row)
        return out


def _check_same_shapes(a: TransformerWeights, b: TransformerWeights | Mapping[str, torch.Tensor]):
    names = set(a.tensors)
    other = b.tensors if isinstance(b, TransformerWeights) else b
    if set(other) != names:
        raise numerics.DimensionError("weight sets have different tensor names")
    for k in names:
        if a[k].shape != other[k].shape:
            raise numerics.DimensionError(f"{k}: {tuple(a[k].shape)} vs {tuple(other[k].shape)}")


def blend(w_pre: TransformerWeights, w_adapted: TransformerWeights, alpha: float) -> TransformerWeights:
    """``(1 - alpha) * w_pre + alpha * w_adapted``, tensor by tensor."""
    _check_same_shapes(w_pre, w_adapted)
    a = float(alpha)
    return TransformerWeights(w_pre.config, {k: (1.0 - a) * w_pre[k] + a * w_adapted[k] for k in w_pre.tensors})


def interpolate_1d(w_pre: TransformerWeights, w_adapted: TransformerWeights, alphas: Sequence[float],
                   eval_sets: Mapping[str, np.ndarray], allow_extrapolation: bool = False) -> LandscapeTrace:
    _check_same_shapes(w_pre, w_adapted)
    for a in alphas:
        if not allow_extrapolation and not 0.0 <= a <= 1.0:
            raise DiagnosticsError(f"alpha {a} outside [0, 1]; pass allow_extrapolation=True")
    ppl: dict[str, list[float]] = {name: [] for name in eval_sets}
    for a in alphas:
        w = blend(w_pre, w_adapted, a)
        for name, toks in eval_sets.items():
            ppl[name].append(perplexity(w, None, toks))
    return LandscapeTrace([(float(a),) for a in alphas], ppl)


def weight_delta(w_new: TransformerWeights, w_pre: TransformerWeights) -> dict[str, torch.Tensor]:
    _check_same_shapes(w_pre, w_new)
    return {k: w_new[k] - w_pre[k] for k in w_pre.tensors}


def delta_cosine(delta_a: Mapping[str, torch.Tensor], delta_b: Mapping[str, torch.Tensor]) -> float:
    """Cosine similarity of the two deltas flattened into single vectors."""
    if set(delta_a) != set(delta_b):
        raise numerics.DimensionError("deltas have different tensor names")
    names = sorted(delta_a)
    va = torch.cat([delta_a[k].double().ravel() for k in names])
    vb = torch.cat([delta_b[k].double().ravel() for k in names])
    na, nb = float(torch.linalg.vector_norm(va)), float(torch.linalg.vector_norm(vb))
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(va @ vb) / (na * nb)


def grid_2d(w_pre: TransformerWeights, delta_a: Mapping[str, torch.Tensor], delta_b: Mapping[str, torch.Tensor],
            grid: Sequence[tuple[float, float]], eval_sets: Mapping[str, np.ndarray]) -> LandscapeTrace:
    """PPL at ``w_pre + alpha * delta_a + beta * delta_b`` for each ``(alpha, beta)``."""
    _check_same_shapes(w_pre, delta_a)
    _check_same_shapes(w_pre, delta_b)
    ppl: dict[str, list[float]] = {name: [] for name in eval_sets}
    for a, b in grid:
        w = TransformerWeights(w_pre.config, {k: w_pre[k] + float(a) * delta_a[k] + float(b) * delta_b[k]
                                              for k in w_pre.tensors})
        for name, toks in eval_sets.items():
            ppl[name].append(perplexity(w, None, toks))
    return LandscapeTrace([(float(a), float(b)) for a, b in grid], ppl, cosine=delta_cosine(delta_a, delta_b))


def lattice(values_a: Sequence[float], values_b: Sequence[float]) -> list[tuple[float, float]]:
    return [(float(a), float(b)) for a in values_a for b in values_b]


# ---- shared / specific decomposition -----------------------------------------

@dataclass
class SharedDecomposition:
    domains: list[str]
    shared: np.ndarray
    specific: dict[str, np.ndarray]
    shared_variance_fraction: float
    correlations: np.ndarray

    def log_gains(self, domain: str) -> np.ndarray:
        return self.shared + self.specific[domain]


def log_gains(adapter: AdapterState) -> np.ndarray:
    s = adapter.flat_gains()
    if np.any(s <= 0):
        raise DiagnosticsError("log-gains need strictly positive gains (sign flip present)")
    return np.log(s)


def shared_component(scaling_vectors) -> SharedDecomposition:
    """Split per-domain log-gain vectors into their elementwise mean and residuals.

    ``scaling_vectors`` maps domain ids to log-gain vectors (a sequence is
    keyed by position).
    """
    if not isinstance(scaling_vectors, Mapping):
        scaling_vectors = {str(i): v for i, v in enumerate(scaling_vectors)}
    if len(scaling_vectors) < 2:
        raise DiagnosticsError("need at least two domains")
    domains = list(scaling_vectors)
    mat = np.stack([np.asarray(scaling_vectors[d], dtype=np.float64).ravel() for d in domains])
    if mat.ndim != 2:
        raise numerics.DimensionError("log-gain vectors must have equal lengths")
    shared = mat.mean(axis=0)
    specific = {d: mat[i] - shared for i, d in enumerate(domains)}
    total = float(np.sum(mat * mat))
    frac = float(np.sum(shared * shared)) * len(domains) / total if total > 0 else 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(mat)
    return SharedDecomposition(domains, shared, specific, frac, np.atleast_2d(corr))


def ablate_component(adapter: AdapterState, decomposition: SharedDecomposition | None, domain: str,
                     keep: str = "full") -> AdapterState:
    """Adapter whose gains are ``exp`` of the kept log-components for ``domain``."""
    if keep not in ("full", "shared_only", "specific_only"):
        raise DiagnosticsError(f"unknown keep mode {keep!r}")
    if adapter.method not in MULTIPLICATIVE:
        raise AdapterError("component ablation applies to gain adapters only")
    if keep == "full":
        return adapter.clone()
    if decomposition is None or domain not in decomposition.specific:
        raise DiagnosticsError(f"no decomposition available for domain {domain!r}")
    kept = decomposition.shared if keep == "shared_only" else decomposition.specific[domain]
    return adapter.with_flat_gains(np.exp(kept))


# ---- reports ----------------------------------------------------------------

def probed_layers(n_layers: int, n_probe: int = MAX_PROBED_LAYERS) -> list[int]:
    """Up to ``n_probe`` evenly spaced layer indices including the first and last.

    Uses a whole-number stride plus the last layer (36 layers -> 0, 9, 18, 27, 35),
    falling back to rounded even spacing when the stride would collide.
    """
    n = min(n_probe, n_layers)
    if n == 1:
        return [0]
    stride = round((n_layers - 1) / (n - 1))
    picked = sorted({i * stride for i in range(n - 1)} | {n_layers - 1})
    if len(picked) == n and picked[-2] < n_layers - 1:
        return picked
    return sorted({int(round(i * (n_layers - 1) / (n - 1))) for i in range(n)})


@dataclass
class SubspaceRow:
    layer: int
    target: str
    k: int
    overlap: float
    perturbation: float
    bound_holds: bool | None
    bound_violation: float | None
    tie_warning: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _as_np(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy()


def infer_diagonal_scaling(w_orig, w_new, rtol: float = 1e-5) -> tuple[np.ndarray, str] | None:
    """Recover ``s`` with ``w_new = diag(s) w_orig`` (or ``w_orig diag(s)``), if one exists.

    Least-squares fit per row (then per column); accepted when the residual is
    below ``rtol`` relative to ``||w_new||_F``. Returns ``(s, "rows" | "cols")``.
    """
    a = numerics.as_matrix(w_orig)
    b = numerics.as_matrix(w_new)
    if a.shape != b.shape:
        raise numerics.DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    scale = max(numerics.frobenius_norm(b), 1e-300)
    for side, axis in (("rows", 1), ("cols", 0)):
        denom = np.sum(a * a, axis=axis)
        if np.any(denom == 0):
            continue
        s = np.sum(a * b, axis=axis) / denom
        fit = s[:, None] * a if side == "rows" else a * s[None, :]
        if numerics.frobenius_norm(b - fit) <= rtol * scale:
            return s, side
    return None


def subspace_report(w_pre: TransformerWeights, other, k: int = DEFAULT_K,
                    layers: Sequence[int] | None = None, targets: Sequence[str] = ("O", "down")) -> list[SubspaceRow]:
    """Overlap, perturbation and bound status per probed matrix.

    ``other`` is an adapter (gains read directly) or a plain weight set such as
    an absorbed checkpoint (gains inferred where the change is diagonal). The
    bound status is ``None`` where no positive diagonal scaling applies.
    """
    layers = probed_layers(w_pre.config.n_layers) if layers is None else list(layers)
    adapter = other if isinstance(other, AdapterState) else None
    w_new = materialize(adapter, w_pre) if adapter is not None else other
    if w_new.config != w_pre.config:
        raise DiagnosticsError("model configs differ")
    rows = []
    for i in layers:
        if not 0 <= i < w_pre.config.n_layers:
            raise DiagnosticsError(f"layer {i} out of range")
        for t in targets:
            name = layer_key(i, TARGETS[t])
            a, b = _as_np(w_pre[name]), _as_np(w_new[name])
            kk = min(k, *a.shape)
            ov, tie = overlap_with_tie(a, b, kk)
            if adapter is not None:
                g = adapter.target_gain(i, t) if adapter.method in MULTIPLICATIVE else None
                gain = None if g is None else (_as_np(g[0]), g[1])
            else:
                gain = None if np.array_equal(a, b) else infer_diagonal_scaling(a, b)
            holds = viol = None
            if gain is not None and bool(np.all(gain[0] > 0)):
                chk = singular_bound_check(a, gain[0], gain[1])
                holds, viol = chk.holds, chk.max_violation
            rows.append(SubspaceRow(i, t, kk, ov, frobenius_perturbation(a, b), holds, viol, tie))
    return rows


@dataclass(frozen=True)
class ProbeResult:
    layer: int
    target: str
    rank: int
    overlap: float


def probe_preservation(w_pre: TransformerWeights, adapter: AdapterState, rank_fraction: float = 0.5) -> list[ProbeResult]:
    """Rank-subspace overlap of every gain-scaled matrix on a rank-deficient probe.

    Each probe is the best rank-``r`` approximation of the pretrained matrix
    (``r = rank_fraction * min(shape)``); the adapter's trained gains scale it
    on their side, and the preserved subspace is compared. Any nonzero gain
    (sign flips included) keeps the subspace.
    """
    if adapter.method not in MULTIPLICATIVE:
        raise AdapterError("probes apply to gain adapters only")
    out = []
    for i, t in adapter.adapted_targets():
        vec, side = adapter.target_gain(i, t)
        s = _as_np(vec)
        if np.any(s == 0):
            raise DiagnosticsError(f"layer {i} {t}: zero gain, the scaling is singular")
        w = _as_np(w_pre[layer_key(i, TARGETS[t])])
        r = max(1, int(rank_fraction * min(w.shape)))
        probe = truncate_rank(w, r)
        scaled = s[:, None] * probe if side == "rows" else probe * s[None, :]
        ov = overlap_with_tie(probe, scaled, r, "right" if side == "rows" else "left")[0]
        out.append(ProbeResult(i, t, r, ov))
    return out
