"""Small pre-LN GPT with frozen base weights and adapter hook points.

Weights use the row-vector convention ``y = x @ W``, so every projection is
stored as ``(d_in, d_out)``: ``W_O`` is ``d_model x d_model``, ``W_up`` is
``d_model x d_ffn`` and ``W_down`` is ``d_ffn x d_model``. Scaling the input
dimensions of a projection therefore scales the *rows* of the stored matrix.

Gradients come from torch autograd. Base weights never require grad; only the
tensors an adapter marks as trainable do.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F

EVAL_BATCH = 16

LAYER_TENSORS = ("ln1.g", "ln1.b", "attn.q", "attn.k", "attn.v", "attn.o",
                 "ln2.g", "ln2.b", "ffn.up", "ffn.down")

# short adapter target names -> per-layer tensor names
TARGETS = {"Q": "attn.q", "K": "attn.k", "V": "attn.v", "O": "attn.o",
           "up": "ffn.up", "down": "ffn.down"}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ffn: int = 256
    context_len: int = 128
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.d_ffn < self.d_model:
            raise ModelError("d_ffn must be at least d_model")
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.context_len) < 1:
            raise ModelError("sizes must be positive")
        if not self.layer_norm_eps > 0:
            raise ModelError("layer_norm_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.d_model, self.d_ffn
        shapes = {"tok_emb": (self.vocab_size, d), "pos_emb": (self.context_len, d)}
        per_layer = {"ln1.g": (d,), "ln1.b": (d,), "attn.q": (d, d), "attn.k": (d, d),
                     "attn.v": (d, d), "attn.o": (d, d), "ln2.g": (d,), "ln2.b": (d,),
                     "ffn.up": (d, f), "ffn.down": (f, d)}
        for i in range(self.n_layers):
            for name in LAYER_TENSORS:
                shapes[f"layers.{i}.{name}"] = per_layer[name]
        shapes["ln_f.g"] = (d,)
        shapes["ln_f.b"] = (d,)
        shapes["unembed"] = (d, self.vocab_size)
        return shapes


def layer_key(layer: int, name: str) -> str:
    return f"layers.{layer}.{name}"


class TransformerWeights:
    """Named, shape-checked tensor table for one model."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, torch.Tensor]):
        shapes = config.tensor_shapes()
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ModelError(f"tensor names do not match config (missing={missing}, extra={extra})")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
        self.config = config
        self.tensors = {name: tensors[name] for name in shapes}

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["tok_emb"].dtype

    def to(self, dtype: torch.dtype) -> "TransformerWeights":
        return TransformerWeights(self.config, {k: t.detach().to(dtype).clone() for k, t in self.items()})

    def clone(self) -> "TransformerWeights":
        return TransformerWeights(self.config, {k: t.detach().clone() for k, t in self.items()})

    def replace(self, updates: Mapping[str, torch.Tensor]) -> "TransformerWeights":
        merged = dict(self.tensors)
        merged.update({k: v.detach() for k, v in updates.items()})
        return TransformerWeights(self.config, merged)

    def bitwise_equal(self, other: "TransformerWeights") -> bool:
        if self.config != other.config:
            return False
        return all(self[k].dtype == other[k].dtype and torch.equal(self[k], other[k]) for k in self)

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @classmethod
    def init_random(cls, config: ModelConfig, seed: int = 0, dtype=torch.float32) -> "TransformerWeights":
        rng = np.random.default_rng(seed)
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)
        tensors = {}
        for name, shape in config.tensor_shapes().items():
            if name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith(".b"):
                arr = np.zeros(shape)
            elif name.endswith("attn.o") or name.endswith("ffn.down"):
                arr = rng.normal(0.0, resid_std, shape)
            else:
                arr = rng.normal(0.0, 0.02, shape)
            tensors[name] = torch.tensor(arr, dtype=dtype)
        return cls(config, tensors)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=torch.float64) -> "TransformerWeights":
        return cls(config, {k: torch.zeros(s, dtype=dtype) for k, s in config.tensor_shapes().items()})


def _check_tokens(config: ModelConfig, tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.ndim != 2:
        raise ModelError("tokens must be a sequence or a batch of sequences")
    if t.shape[1] < 1 or t.shape[1] > config.context_len:
        raise ModelError(f"sequence length {t.shape[1]} outside [1, {config.context_len}]")
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= config.vocab_size):
        raise ModelError("token id out of range")
    return t


def forward(weights: TransformerWeights, adapter=None, tokens=None, scaling: str = "activation") -> torch.Tensor:
    """Logits for ``tokens`` (shape ``(T,)`` or ``(B, T)``).

    ``adapter`` is any object with a ``bind(weights, scaling)`` method returning
    ``(tensors, scales)``: the effective tensor table and a dict of activation
    gains keyed ``(layer, point)`` with points ``k``, ``v``, ``attn_out`` and
    ``ffn_hidden``. ``scaling`` selects whether diagonal gains act on the
    activations or are folded into the weights first; the two agree up to
    rounding.
    """
    cfg = weights.config
    toks = _check_tokens(cfg, tokens)
    squeeze = np.ndim(tokens) == 1
    if adapter is None:
        w, scales = weights.tensors, {}
    else:
        w, scales = adapter.bind(weights, scaling)
    bsz, T = toks.shape
    H = cfg.n_heads
    hd = cfg.d_model // H
    eps = cfg.layer_norm_eps
    mask = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)

    x = w["tok_emb"][toks] + w["pos_emb"][:T]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = F.layer_norm(x, (cfg.d_model,), w[p + "ln1.g"], w[p + "ln1.b"], eps)
        q = a @ w[p + "attn.q"]
        k = a @ w[p + "attn.k"]
        v = a @ w[p + "attn.v"]
        if (i, "k") in scales:
            k = k * scales[(i, "k")]
        if (i, "v") in scales:
            v = v * scales[(i, "v")]
        q = q.view(bsz, T, H, hd).transpose(1, 2)
        k = k.view(bsz, T, H, hd).transpose(1, 2)
        v = v.view(bsz, T, H, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        h = (att @ v).transpose(1, 2).reshape(bsz, T, cfg.d_model)
        if (i, "attn_out") in scales:
            h = h * scales[(i, "attn_out")]
        x = x + h @ w[p + "attn.o"]
        a = F.layer_norm(x, (cfg.d_model,), w[p + "ln2.g"], w[p + "ln2.b"], eps)
        z = F.gelu(a @ w[p + "ffn.up"])
        if (i, "ffn_hidden") in scales:
            z = z * scales[(i, "ffn_hidden")]
        x = x + z @ w[p + "ffn.down"]
    x = F.layer_norm(x, (cfg.d_model,), w["ln_f.g"], w["ln_f.b"], eps)
    logits = x @ w["unembed"]
    return logits[0] if squeeze else logits


def lm_loss(logits: torch.Tensor, tokens) -> torch.Tensor:
    """Mean next-token cross-entropy (nats) over positions 1..T-1."""
    toks = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
        toks = toks.unsqueeze(0)
    if toks.shape[-1] < 2:
        raise ModelError("need at least two tokens to score a prediction")
    V = logits.shape[-1]
    return F.cross_entropy(logits[:, :-1].reshape(-1, V), toks[:, 1:].reshape(-1))


def token_losses_of(logits: torch.Tensor, tokens) -> torch.Tensor:
    toks = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    V = logits.shape[-1]
    out = F.cross_entropy(logits[..., :-1, :].reshape(-1, V), toks[..., 1:].reshape(-1), reduction="none")
    return out.view(*toks.shape[:-1], toks.shape[-1] - 1)


def windows(tokens, context_len: int) -> np.ndarray:
    """Non-overlapping windows of ``context_len``; the final partial window is dropped."""
    arr = np.asarray(tokens, dtype=np.int64)
    n = len(arr) // context_len
    return arr[: n * context_len].reshape(n, context_len)


def token_losses(weights: TransformerWeights, adapter, corpus) -> np.ndarray:
    """Per-position losses, shape ``(n_windows, context_len - 1)``, float64."""
    win = windows(corpus, weights.config.context_len)
    if len(win) == 0:
        raise ModelError("corpus is empty after windowing")
    chunks = []
    with torch.no_grad():
        for s in range(0, len(win), EVAL_BATCH):
            batch = win[s: s + EVAL_BATCH]
            chunks.append(token_losses_of(forward(weights, adapter, batch), batch).double().numpy())
    return np.concatenate(chunks, axis=0)


def perplexity(weights: TransformerWeights, adapter, corpus) -> float:
    losses = token_losses(weights, adapter, corpus)
    # fsum is exactly rounded, so the result does not depend on reduction order
    return math.exp(math.fsum(losses.ravel().tolist()) / losses.size)


class TapeError(RuntimeError):
    pass


class GradTape:
    """Records which adapter tensors receive adjoints for one forward pass.

    Only the tensors in ``params`` get gradients; frozen tensors (base weights,
    frozen adapter units) never have ``requires_grad`` set and so never get
    adjoint buffers.
    """

    def __init__(self, params: Mapping[str, torch.Tensor]):
        self.params = dict(params)
        for name, t in self.params.items():
            if not t.requires_grad:
                raise TapeError(f"{name} is not a trainable leaf")
        self.losses: list[torch.Tensor] = []

    def record(self, loss: torch.Tensor) -> torch.Tensor:
        self.losses.append(loss)
        return loss


def backward(tape: GradTape, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    if not any(loss is l for l in tape.losses):
        raise TapeError("loss was not recorded on this tape")
    if loss.ndim != 0:
        raise TapeError("loss must be a scalar")
    names = list(tape.params)
    if not names:
        return {}
    if not loss.requires_grad:
        return {n: torch.zeros_like(tape.params[n]) for n in names}
    grads = torch.autograd.grad(loss, [tape.params[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(tape.params[n]) if g is None else g) for n, g in zip(names, grads)}
