"""Adaptation methods behind one interface.

Every method is an :class:`AdapterState`: trainable tensors in ``params``,
frozen tensors in ``frozen`` (PackNet units), plus the options it was built
with. ``bind`` hands the model its effective tensors and activation gains;
``effective_weight`` and ``absorb`` expose the same maths as plain matrices.

Orientation follows :mod:`gainlab.model` (``y = x @ W``). LoRA keeps the usual
``B (d_out x r)``, ``A (r x d_in)`` factors, so the stored update is
``(B @ A).T``.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
import torch

from gainlab.model import TARGETS, ModelConfig, TransformerWeights, layer_key


class AdapterError(ValueError):
    pass


class Method(str, enum.Enum):
    GAIN = "gain"
    GAIN_FFN = "gain_ffn"
    LORA = "lora"
    DORA = "dora"
    IA3 = "ia3"
    FULL_FT = "full_ft"
    PACKNET_STACK = "packnet"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise AdapterError(f"unknown method {value!r}") from None


MULTIPLICATIVE = (Method.GAIN, Method.GAIN_FFN, Method.IA3)
LOW_RANK = (Method.LORA, Method.DORA, Method.PACKNET_STACK)


@dataclass(frozen=True)
class AdapterOptions:
    rank: int = 1
    alpha: float | None = None  # None means alpha = rank
    targets: tuple[str, ...] = ("O",)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))

    @property
    def scale(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdapterOptions":
        return cls(**d)


# (layer point used in activation mode, target matrix, side of the matrix scaled)
_GAIN_POINTS = {
    "s_attn": ("attn_out", "O", "rows"),
    "s_ffn": ("ffn_hidden", "down", "rows"),
    "l_k": ("k", "K", "cols"),
    "l_v": ("v", "V", "cols"),
    "l_ffn": ("ffn_hidden", "down", "rows"),
}
_METHOD_GAINS = {
    Method.GAIN: ("s_attn",),
    Method.GAIN_FFN: ("s_attn", "s_ffn"),
    Method.IA3: ("l_k", "l_v", "l_ffn"),
}


def _validate(method: Method, options: AdapterOptions):
    if method in LOW_RANK:
        if options.rank < 1:
            raise AdapterError("rank must be >= 1")
        if not options.targets:
            raise AdapterError("at least one target is required")
        for t in options.targets:
            if t not in ("Q", "K", "V", "O"):
                raise AdapterError(f"unknown target {t!r}; low-rank targets are Q, K, V, O")
        if method is Method.PACKNET_STACK and options.rank != 1:
            raise AdapterError("PackNet units are rank 1")


def _lora_init_a(rng: np.random.Generator, rank: int, d_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(rank, d_in))


def _column_norms(w: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(w, dim=0)


@dataclass
class AdapterState:
    method: Method
    config: ModelConfig
    options: AdapterOptions
    params: dict[str, torch.Tensor]
    frozen: dict[str, torch.Tensor] = field(default_factory=dict)
    n_units: int = 0  # PackNet: units in the stack, active one included
    empty_dtype: torch.dtype = torch.float32  # dtype of the first tensors added to an empty stack

    # ---- bookkeeping -------------------------------------------------------
    @property
    def dtype(self) -> torch.dtype:
        for t in self.params.values():
            return t.dtype
        for t in self.frozen.values():
            return t.dtype
        return self.empty_dtype

    def num_params(self) -> int:
        return sum(t.numel() for t in self.params.values()) + sum(t.numel() for t in self.frozen.values())

    def clone(self) -> "AdapterState":
        return replace(
            self,
            params={k: v.detach().clone().requires_grad_(True) for k, v in self.params.items()},
            frozen={k: v.detach().clone() for k, v in self.frozen.items()},
        )

    def to(self, dtype: torch.dtype) -> "AdapterState":
        return replace(
            self,
            params={k: v.detach().to(dtype).clone().requires_grad_(True) for k, v in self.params.items()},
            frozen={k: v.detach().to(dtype).clone() for k, v in self.frozen.items()},
            empty_dtype=dtype,
        )

    def with_params(self, values: Mapping[str, torch.Tensor]) -> "AdapterState":
        if set(values) != set(self.params):
            raise AdapterError("parameter names do not match")
        return replace(self, params={k: values[k].detach().clone().requires_grad_(True) for k in self.params})

    def bitwise_equal(self, other: "AdapterState") -> bool:
        if self.method != other.method or set(self.params) != set(other.params) or set(self.frozen) != set(other.frozen):
            return False
        return all(torch.equal(self.params[k], other.params[k]) for k in self.params) and all(
            torch.equal(self.frozen[k], other.frozen[k]) for k in self.frozen)

    def gain_vectors(self) -> dict[str, torch.Tensor]:
        """All diagonal gain vectors of a multiplicative adapter, in fixed order."""
        if self.method not in MULTIPLICATIVE:
            return {}
        return {k: v for k, v in self.params.items()}

    def flat_gains(self) -> np.ndarray:
        g = self.gain_vectors()
        if not g:
            raise AdapterError(f"{self.method.value} has no gain vectors")
        return np.concatenate([v.detach().double().numpy().ravel() for v in g.values()])

    def target_gain(self, layer: int, target: str) -> tuple[torch.Tensor, str] | None:
        """``(gain vector, "rows" | "cols")`` scaling ``target`` at ``layer``, if any."""
        for g in _METHOD_GAINS.get(self.method, ()):
            _, tgt, side = _GAIN_POINTS[g]
            if tgt == target:
                return self.params[f"layers.{layer}.{g}"], side
        return None

    def with_flat_gains(self, flat) -> "AdapterState":
        """Copy with every gain vector replaced from one concatenated vector."""
        g = self.gain_vectors()
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(v.numel() for v in g.values())
        if not g or flat.shape != (total,):
            raise AdapterError(f"expected {total} gain entries, got {flat.shape}")
        out, pos = {}, 0
        for k, v in g.items():
            n = v.numel()
            out[k] = torch.as_tensor(flat[pos:pos + n], dtype=v.dtype).reshape(v.shape)
            pos += n
        return self.with_params({**{k: v for k, v in self.params.items()}, **out})

    # ---- model hooks -------------------------------------------------------
    def adapted_targets(self) -> list[tuple[int, str]]:
        cfg = self.config
        if self.method in MULTIPLICATIVE:
            out = []
            for i in range(cfg.n_layers):
                for g in _METHOD_GAINS[self.method]:
                    out.append((i, _GAIN_POINTS[g][1]))
            return out
        if self.method in LOW_RANK:
            return [(i, t) for i in range(cfg.n_layers) for t in self.options.targets]
        return [(i, t) for i in range(cfg.n_layers) for t in ("Q", "K", "V", "O", "up", "down")]

    def bind(self, weights: TransformerWeights, scaling: str = "activation"):
        if scaling not in ("activation", "weight"):
            raise AdapterError(f"unknown scaling mode {scaling!r}")
        if weights.config != self.config:
            raise AdapterError("adapter was built for a different model config")
        if self.method is Method.FULL_FT:
            return self.params, {}
        tensors = dict(weights.tensors)
        scales = {}
        if self.method in MULTIPLICATIVE and scaling == "activation":
            for i in range(self.config.n_layers):
                for g in _METHOD_GAINS[self.method]:
                    point = _GAIN_POINTS[g][0]
                    scales[(i, point)] = self.params[f"layers.{i}.{g}"]
            return tensors, scales
        for i, t in self.adapted_targets():
            tensors[layer_key(i, TARGETS[t])] = effective_weight(self, weights, i, t)
        return tensors, scales


def init_adapter(method, config: ModelConfig, options: AdapterOptions | None = None,
                 weights: TransformerWeights | None = None, dtype=torch.float32) -> AdapterState:
    """Fresh adapter whose forward pass equals the unadapted model.

    DoRA needs ``weights`` to initialise its magnitudes from the pretrained
    column norms; full fine-tuning copies ``weights``. PackNet starts with an
    empty stack; call :func:`packnet_push` at the start of each domain.
    """
    method = Method.parse(method)
    options = options or AdapterOptions()
    _validate(method, options)
    if weights is not None:
        dtype = weights.dtype
    params: dict[str, np.ndarray | torch.Tensor] = {}
    d, f = config.d_model, config.d_ffn
    if method in MULTIPLICATIVE:
        sizes = {"s_attn": d, "s_ffn": f, "l_k": d, "l_v": d, "l_ffn": f}
        for i in range(config.n_layers):
            for g in _METHOD_GAINS[method]:
                params[f"layers.{i}.{g}"] = torch.ones(sizes[g], dtype=dtype)
    elif method in (Method.LORA, Method.DORA):
        rng = np.random.default_rng(options.seed)
        for i in range(config.n_layers):
            for t in options.targets:
                params[f"layers.{i}.{t}.lora_A"] = torch.tensor(_lora_init_a(rng, options.rank, d), dtype=dtype)
                params[f"layers.{i}.{t}.lora_B"] = torch.zeros((d, options.rank), dtype=dtype)
                if method is Method.DORA:
                    if weights is None:
                        raise AdapterError("DoRA initialisation needs the pretrained weights")
                    params[f"layers.{i}.{t}.dora_m"] = _column_norms(weights[layer_key(i, TARGETS[t])]).detach().clone()
    elif method is Method.FULL_FT:
        if weights is None:
            raise AdapterError("full fine-tuning needs the pretrained weights")
        params = {k: v.detach().clone() for k, v in weights.items()}
    elif method is Method.PACKNET_STACK:
        pass
    params = {k: v.requires_grad_(True) for k, v in params.items()}
    return AdapterState(method=method, config=config, options=options, params=params, empty_dtype=dtype)


def packnet_push(stack: AdapterState, config: ModelConfig | None = None) -> AdapterState:
    """Freeze the active rank-1 unit (if any) and open a fresh zero-``B`` unit."""
    if stack.method is not Method.PACKNET_STACK:
        raise AdapterError("packnet_push needs a PackNet stack")
    config = config or stack.config
    frozen = {k: v.detach().clone() for k, v in stack.frozen.items()}
    for k, v in stack.params.items():
        frozen[k] = v.detach().clone()
    unit = stack.n_units
    rng = np.random.default_rng([stack.options.seed, unit])
    dtype = stack.dtype
    params = {}
    for i in range(config.n_layers):
        for t in stack.options.targets:
            params[f"layers.{i}.{t}.unit{unit}.lora_A"] = torch.tensor(
                _lora_init_a(rng, 1, config.d_model), dtype=dtype).requires_grad_(True)
            params[f"layers.{i}.{t}.unit{unit}.lora_B"] = torch.zeros(
                (config.d_model, 1), dtype=dtype).requires_grad_(True)
    return replace(stack, params=params, frozen=frozen, n_units=unit + 1)


def scale_rows(w: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """``diag(s) @ w``."""
    return s[:, None] * w


def scale_cols(w: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """``w @ diag(s)``."""
    return w * s[None, :]


def effective_weight(adapter: AdapterState, weights: TransformerWeights, layer: int, target: str) -> torch.Tensor:
    """The matrix the adapted model actually uses for ``target`` at ``layer``."""
    if (layer, target) not in adapter.adapted_targets():
        raise AdapterError(f"{adapter.method.value} does not adapt {target} at layer {layer}")
    w = weights[layer_key(layer, TARGETS[target])]
    p = adapter.params
    m = adapter.method
    if m in MULTIPLICATIVE:
        for g in _METHOD_GAINS[m]:
            _, tgt, side = _GAIN_POINTS[g]
            if tgt == target:
                vec = p[f"layers.{layer}.{g}"]
                return scale_rows(w, vec) if side == "rows" else scale_cols(w, vec)
    prefix = f"layers.{layer}.{target}"
    if m is Method.LORA:
        delta = (p[prefix + ".lora_B"] @ p[prefix + ".lora_A"]).T
        return w + adapter.options.scale * delta
    if m is Method.DORA:
        v = w + adapter.options.scale * (p[prefix + ".lora_B"] @ p[prefix + ".lora_A"]).T
        return v * (p[prefix + ".dora_m"] / _column_norms(v))[None, :]
    if m is Method.PACKNET_STACK:
        out = w
        units = {**adapter.frozen, **p}
        for u in range(adapter.n_units):
            a = units[f"{prefix}.unit{u}.lora_A"]
            b = units[f"{prefix}.unit{u}.lora_B"]
            out = out + (b @ a).T
        return out
    if m is Method.FULL_FT:
        return p[layer_key(layer, TARGETS[target])]
    raise AdapterError(f"unsupported method {m}")


def materialize(adapter: AdapterState | None, weights: TransformerWeights) -> TransformerWeights:
    """Plain weights equivalent to ``weights`` wrapped by ``adapter``."""
    if adapter is None:
        return weights.clone()
    if adapter.method is Method.FULL_FT:
        return TransformerWeights(weights.config, {k: v.detach().clone() for k, v in adapter.params.items()})
    with torch.no_grad():
        tensors, _ = adapter.bind(weights, "weight")
        return TransformerWeights(weights.config, {k: v.detach().clone() for k, v in tensors.items()})


def absorb(adapter: AdapterState, weights: TransformerWeights) -> TransformerWeights:
    """Fold the adapter into the base weights (zero added parameters)."""
    if adapter.method is Method.FULL_FT:
        raise AdapterError("full fine-tuning has no adapter to absorb; its parameters already are the weights")
    return materialize(adapter, weights)


def param_count(method, config: ModelConfig, options: AdapterOptions | None = None, n_units: int = 1) -> int:
    """Trainable-parameter count for a method (PackNet: ``n_units`` stacked units)."""
    method = Method.parse(method)
    options = options or AdapterOptions()
    d, f, L = config.d_model, config.d_ffn, config.n_layers
    n_t = len(options.targets)
    if method is Method.GAIN:
        return d * L
    if method is Method.GAIN_FFN:
        return (d + f) * L
    if method is Method.IA3:
        return (2 * d + f) * L
    if method is Method.LORA:
        return 2 * options.rank * d * L * n_t
    if method is Method.DORA:
        return (2 * options.rank * d + d) * L * n_t
    if method is Method.PACKNET_STACK:
        return 2 * d * L * n_t * n_units
    if method is Method.FULL_FT:
        return sum(int(np.prod(s)) for s in config.tensor_shapes().values())
    raise AdapterError(f"unsupported method {method}")
