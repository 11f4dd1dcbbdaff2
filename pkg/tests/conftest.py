import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from gainlab.adapters import AdapterOptions, init_adapter, packnet_push
from gainlab.corpus import make_domain_suite
from gainlab.model import ModelConfig, TransformerWeights
from gainlab.optimize import PretrainConfig, pretrain

settings.register_profile("gainlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("gainlab")

TINY = ModelConfig(vocab_size=256, d_model=16, n_heads=2, n_layers=2, d_ffn=32, context_len=16)
ALL_METHODS = ("gain", "gain_ffn", "ia3", "lora", "dora", "full_ft", "packnet")

# acceptance lines, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def tiny_cfg():
    return TINY


def random_weights(cfg=TINY, seed=0, dtype=torch.float64, scale=0.3):
    """Weights with O(1) entries everywhere, so nothing is near-degenerate."""
    g = torch.Generator().manual_seed(seed)
    tensors = {}
    for name, shape in cfg.tensor_shapes().items():
        t = torch.randn(*shape, generator=g, dtype=dtype) * scale
        if name.endswith(".g"):
            t = 1.0 + t
        tensors[name] = t
    return TransformerWeights(cfg, tensors)


def random_adapter(method, weights, seed=0, scale=0.2, options=None):
    """An adapter moved away from its identity init (PackNet: two units)."""
    opts = options or AdapterOptions(rank=2 if method in ("lora", "dora") else 1, targets=("O", "V"), seed=seed)
    ad = init_adapter(method, weights.config, opts, weights=weights)
    if ad.method.value == "packnet":
        ad = packnet_push(packnet_push(ad))
    g = torch.Generator().manual_seed(1000 + seed)
    vals = {k: v.detach() + scale * torch.randn(v.shape, generator=g, dtype=v.dtype) for k, v in ad.params.items()}
    ad = ad.with_params(vals)
    if ad.frozen:
        ad.frozen = {k: v + scale * torch.randn(v.shape, generator=g, dtype=v.dtype) for k, v in ad.frozen.items()}
    return ad


def random_tokens(n, length, seed=0, vocab=256):
    return np.random.default_rng(seed).integers(0, vocab, size=(n, length))


@pytest.fixture(scope="session")
def tiny_suite():
    return make_domain_suite(3, master_seed=0, token_budget=3000, context_len=TINY.context_len)


@pytest.fixture(scope="session")
def tiny_base(tiny_suite):
    w, _ = pretrain(TINY, [c.train for c in tiny_suite], PretrainConfig(steps=60, batch_size=8))
    return w


@pytest.fixture(scope="session")
def desk_suite():
    return make_domain_suite(4, master_seed=0)


@pytest.fixture(scope="session")
def desk_base(desk_suite):
    """The desk pretrained model (about a minute of CPU)."""
    t0 = time.perf_counter()
    w, _ = pretrain(ModelConfig(), [c.train for c in desk_suite], PretrainConfig())
    TIMINGS["desk_pretrain"] = time.perf_counter() - t0
    return w
