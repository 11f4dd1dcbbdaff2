"""Shared setup for the experiment scripts: desk suite and pretrained base."""

import argparse
from pathlib import Path

from gainlab import checkpoint as ckpt_io
from gainlab.checkpoint import Checkpoint
from gainlab.corpus import make_domain_suite
from gainlab.model import ModelConfig
from gainlab.optimize import PretrainConfig, pretrain


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--pretrained", type=Path, help="pretrained checkpoint (created here if missing)")
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=[0, 1, 2])
    return p


def desk_setup(args):
    cfg = ModelConfig()
    suite = make_domain_suite(args.domains, master_seed=0, context_len=cfg.context_len)
    path = args.pretrained
    if path is not None and path.exists():
        return ckpt_io.load(path).weights, suite
    weights, _ = pretrain(cfg, [c.train for c in suite], PretrainConfig())
    if path is not None:
        ckpt_io.save(path, Checkpoint(weights, None, {"kind": "pretrained"}))
    return weights, suite
