"""Byte-level corpora and deterministic synthetic domains.

Each synthetic domain is a small template grammar over its own word list.
Words are spelled from a skewed alphabet, so domains differ in unigram byte
statistics; a shared set of function words gives them common structure. The
out-of-distribution stressor spells its words from high byte values that no
other domain uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FUNCTION_WORDS = (b"the", b"of", b"and", b"to", b"in", b"is", b"a", b"for", b"with", b"on")
LETTERS = bytes(range(ord("a"), ord("z") + 1))
OOD_ALPHABET = bytes(range(0xC0, 0x100))
MIN_EVAL_WINDOWS = 10
MIN_DOMAIN_KL = 0.1
OOD_KL_FACTOR = 3.0


class CorpusError(ValueError):
    pass


def tokenize(text) -> np.ndarray:
    """Bytes (or UTF-8 text) to token ids 0..255."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class SyntheticDomainSpec:
    seed: int
    alphabet: bytes = LETTERS
    skew: float = 1.0  # Dirichlet concentration over the alphabet; small = peaked
    n_words: int = 96
    n_templates: int = 12
    template_len: tuple[int, int] = (4, 10)
    function_word_rate: float = 0.3
    separator: bytes = b" "
    token_budget: int = 20_000
    name: str | None = None

    @property
    def domain_id(self) -> str:
        return self.name or f"syn{self.seed}"


@dataclass(frozen=True)
class Corpus:
    domain_id: str
    train: np.ndarray
    eval: np.ndarray
    provenance: str = field(default="", compare=False)

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.domain_id == other.domain_id
                and np.array_equal(self.train, other.train) and np.array_equal(self.eval, other.eval))

    def __hash__(self):
        return hash((self.domain_id, self.train.tobytes(), self.eval.tobytes()))


def generate_text(spec: SyntheticDomainSpec) -> bytes:
    rng = np.random.default_rng(spec.seed)
    alpha = np.frombuffer(spec.alphabet, dtype=np.uint8)
    char_p = rng.dirichlet(np.full(len(alpha), spec.skew))
    lengths = rng.integers(2, 9, size=spec.n_words)
    words = [bytes(rng.choice(alpha, size=n, p=char_p).tolist()) for n in lengths]
    n_cat = 4
    cats = [words[c::n_cat] for c in range(n_cat)]
    lo, hi = spec.template_len
    templates = []
    for _ in range(spec.n_templates):
        n = int(rng.integers(lo, hi + 1))
        slots = [(-1 - int(rng.integers(len(FUNCTION_WORDS)))) if rng.random() < spec.function_word_rate
                 else int(rng.integers(n_cat)) for _ in range(n)]
        templates.append(slots)
    end = bytes([alpha[int(np.argmax(char_p))]]) + b".\n"
    zipf_t = 1.0 / np.arange(1, spec.n_templates + 1)
    zipf_t /= zipf_t.sum()

    out = bytearray()
    while len(out) < spec.token_budget:
        slots = templates[int(rng.choice(spec.n_templates, p=zipf_t))]
        parts = []
        for s in slots:
            if s < 0:
                parts.append(FUNCTION_WORDS[-1 - s])
            else:
                pool = cats[s]
                zw = 1.0 / np.arange(1, len(pool) + 1)
                parts.append(pool[int(rng.choice(len(pool), p=zw / zw.sum()))])
        out += spec.separator.join(parts) + end
    return bytes(out[: spec.token_budget])


def split(tokens: np.ndarray, domain_id: str, split_fraction: float = 0.9,
          context_len: int = 128, provenance: str = "") -> Corpus:
    if not 0 < split_fraction < 1:
        raise CorpusError("split_fraction must be in (0, 1)")
    cut = int(round(len(tokens) * split_fraction))
    train, ev = tokens[:cut].copy(), tokens[cut:].copy()
    if len(ev) // context_len < MIN_EVAL_WINDOWS:
        raise CorpusError(
            f"{domain_id}: eval split has {len(ev)} tokens, fewer than {MIN_EVAL_WINDOWS} windows of {context_len}")
    return Corpus(domain_id, train, ev, provenance)


def load_domain(source, split_fraction: float = 0.9, context_len: int = 128,
                domain_id: str | None = None) -> Corpus:
    """Corpus from a text file path or a :class:`SyntheticDomainSpec`."""
    if isinstance(source, SyntheticDomainSpec):
        toks = tokenize(generate_text(source))
        return split(toks, domain_id or source.domain_id, split_fraction, context_len,
                     provenance=f"synthetic:{source!r}")
    path = Path(source)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    return split(tokenize(data), domain_id or path.stem, split_fraction, context_len, provenance=str(path))


def unigram(tokens, smoothing: float = 1.0) -> np.ndarray:
    counts = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=256).astype(np.float64)
    counts += smoothing
    return counts / counts.sum()


def unigram_kl(a, b) -> float:
    """KL(P_a || P_b) in nats between add-one-smoothed byte unigrams."""
    p, q = unigram(a), unigram(b)
    return float(np.sum(p * np.log(p / q)))


def _tokens(c: Corpus) -> np.ndarray:
    return np.concatenate([c.train, c.eval])


def make_domain_suite(n_domains: int, master_seed: int = 0, ood: bool = False,
                      token_budget: int = 20_000, split_fraction: float = 0.9,
                      context_len: int = 128, max_tries: int = 50) -> list[Corpus]:
    """``n_domains`` mutually distinct synthetic domains (last one OOD if ``ood``)."""
    if n_domains < 1:
        raise CorpusError("n_domains must be >= 1")
    seeds = np.random.default_rng(master_seed).integers(0, 2**31 - 1, size=n_domains * max_tries)
    it = iter(seeds.tolist())
    suite: list[Corpus] = []
    n_regular = n_domains - 1 if ood else n_domains
    while len(suite) < n_regular:
        try:
            seed = next(it)
        except StopIteration:
            raise CorpusError("could not generate distinct domains") from None
        spec = SyntheticDomainSpec(seed=seed, token_budget=token_budget, name=f"syn{len(suite)}")
        cand = load_domain(spec, split_fraction, context_len)
        ct = _tokens(cand)
        if all(min(unigram_kl(ct, _tokens(o)), unigram_kl(_tokens(o), ct)) > MIN_DOMAIN_KL for o in suite):
            suite.append(cand)
    if ood:
        spec = SyntheticDomainSpec(seed=next(it), alphabet=OOD_ALPHABET, function_word_rate=0.0,
                                   separator=b"\xa0", token_budget=token_budget, name="ood")
        cand = load_domain(spec, split_fraction, context_len)
        if suite:
            ref = float(np.mean(pairwise_kl(suite)[~np.eye(len(suite), dtype=bool)])) if len(suite) > 1 else MIN_DOMAIN_KL
            ct = _tokens(cand)
            for o in suite:
                if min(unigram_kl(ct, _tokens(o)), unigram_kl(_tokens(o), ct)) < OOD_KL_FACTOR * ref:
                    raise CorpusError("OOD domain is not far enough from the others")
        suite.append(cand)
    return suite


def pairwise_kl(suite: list[Corpus]) -> np.ndarray:
    toks = [_tokens(c) for c in suite]
    n = len(toks)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = unigram_kl(toks[i], toks[j])
    return out


def mixture(suite: list[Corpus]) -> list[np.ndarray]:
    """Train splits of every domain, for pretraining on the mixture."""
    return [c.train for c in suite]
