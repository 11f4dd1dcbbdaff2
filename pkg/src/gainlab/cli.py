"""``gainlab`` command line: pretrain, adapt, analyse and report.

Every command reads one JSON RunConfig (``--config``; flags override single
fields) and writes CSV/JSON/checkpoint files under the output directory. A
relative output directory is resolved against ``$GAINLAB_OUTPUT_ROOT`` when
set. Files are written atomically and each CSV starts with a schema line
carrying the config hash.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 parity failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from gainlab import checkpoint as ckpt_io
from gainlab.adapters import MULTIPLICATIVE, AdapterError, Method, absorb, init_adapter, packnet_push
from gainlab.checkpoint import Checkpoint, CheckpointError
from gainlab.config import ConfigError, RunConfig
from gainlab.corpus import CorpusError
from gainlab.diagnostics import (
    ablate_component,
    grid_2d,
    interpolate_1d,
    lattice,
    log_gains,
    shared_component,
    subspace_report,
    weight_delta,
)
from gainlab.harness import (
    AdaptationMatrix,
    Protocol,
    ProtocolError,
    baseline_ppls,
    forgetting_metrics,
    mean_std,
    random_orderings,
    run_orderings,
    run_sequential,
)
from gainlab.model import TransformerWeights, perplexity, token_losses
from gainlab.optimize import DivergenceError, TrainLog, pretrain, train_domain

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_PARITY = 4

OUTPUT_ROOT_ENV = "GAINLAB_OUTPUT_ROOT"
CSV_SCHEMA_VERSION = 1
PARITY_RTOL = 1e-6

# fixed CSV headers; the adaptation matrix appends one column per domain
HEADERS = {
    "matrix": ["row", "trained"],
    "train_log": ["domain", "step", "epoch", "loss", "penalty", "source"],
    "scaling": ["row", "trained", "s_min", "s_max", "s_mean", "pct_tight", "sign_flips"],
    "single": ["domain", "baseline_ppl", "adapted_ppl", "pct_change"],
    "orderings": ["seed", "ordering", "final_forgetting", "in_domain_avg", "forward_interference_avg", "n_diverged"],
    "lr_sweep": ["seed", "learning_rate", "in_domain_avg", "final_forgetting", "forward_interference_avg",
                 "n_diverged", "s_min", "s_max", "pct_tight", "sign_flips"],
    "subspace": ["layer", "target", "k", "overlap", "perturbation", "bound_holds", "bound_violation",
                 "tie_warning"],
    "landscape_1d": ["alpha", "in_domain_ppl", "cross_domain_ppl"],
    "landscape_2d": ["alpha", "beta", "domain_a_ppl", "domain_b_ppl", "cross_domain_ppl"],
    "ablation": ["domain", "keep", "in_domain_ppl", "cross_domain_mean_ppl"],
    "summary": ["seed", "in_domain_avg", "final_forgetting", "forward_interference_avg", "n_diverged"],
}

log = logging.getLogger("gainlab")


class ParityError(RuntimeError):
    pass


# ---- output helpers -------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def csv_text(schema: str, config_hash: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# gainlab-csv schema={schema} version={CSV_SCHEMA_VERSION} config={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path: Path, schema: str, config_hash: str, rows, header=None):
    ckpt_io.atomic_write_bytes(path, csv_text(schema, config_hash, header or HEADERS[schema], rows).encode())


def _json_safe(x):
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return None if math.isnan(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _json_safe(x.tolist())
    return x


def write_json(path: Path, obj):
    text = json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    ckpt_io.atomic_write_bytes(path, text.encode())


def read_csv(path) -> tuple[str, list[dict]]:
    """Schema line and data rows of a gainlab CSV."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# gainlab-csv"):
        raise ConfigError(f"{path}: missing schema line")
    return lines[0], list(csv.DictReader(lines[1:]))


# ---- context ----------------------------------------------------------------------

class Context:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hash = cfg.canonical_hash()
        out = Path(cfg.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        self.out = out
        self.dtype = torch.float64 if cfg.precision == "float64" else torch.float32
        self._suite = None

    @property
    def suite(self):
        if self._suite is None:
            self._suite = self.cfg.suite.build(self.cfg.model.context_len)
        return self._suite

    @property
    def domains(self) -> list[str]:
        return [c.domain_id for c in self.suite]

    @property
    def pretrained_path(self) -> Path:
        return Path(self.cfg.pretrained) if self.cfg.pretrained else self.out / "pretrained.ckpt"

    def load_pretrained(self) -> TransformerWeights:
        path = self.pretrained_path
        if not path.exists():
            raise ConfigError(f"pretrained checkpoint {path} not found; run `gainlab pretrain` first")
        ck = ckpt_io.load(path)
        if ck.weights.config != self.cfg.model:
            raise ConfigError("pretrained checkpoint was built for a different model config")
        return ck.weights.to(self.dtype)

    def protocol(self, domains=None, method=None, train=None) -> Protocol:
        return Protocol(domains=tuple(domains or self.domains), method=method or self.cfg.method,
                        options=self.cfg.adapter, train=train or self.cfg.train, cycles=self.cfg.cycles,
                        seeds=self.cfg.seeds, halt_on_divergence=self.cfg.halt_on_divergence)

    def provenance(self, kind: str, **extra) -> dict:
        return {"kind": kind, "config_hash": self.hash, **extra}

    def save_config(self):
        ckpt_io.atomic_write_bytes(self.out / "config.json", self.cfg.to_json().encode())


def _log_rows(domain: str, tlog: TrainLog):
    return [[domain, r["step"], r["epoch"], r["loss"], r["penalty"], r["source"]] for r in tlog.steps]


def matrix_rows(m: AdaptationMatrix) -> list[list]:
    rows = [["baseline", "", *m.baseline.tolist()]]
    for i, (d, e) in enumerate(zip(m.trained, m.entries)):
        rows.append([i + 1, d, *e.tolist()])
    return rows


# ---- commands ---------------------------------------------------------------------

def cmd_pretrain(ctx: Context) -> int:
    cfg = ctx.cfg
    corpora = [c.train for c in ctx.suite]
    weights, tlog = pretrain(cfg.model, corpora, cfg.pretrain, dtype=ctx.dtype)
    losses = np.concatenate([token_losses(weights, None, c.eval).ravel() for c in ctx.suite])
    mixture_ppl = math.exp(math.fsum(losses.tolist()) / losses.size)
    per_domain = {c.domain_id: perplexity(weights, None, c.eval) for c in ctx.suite}
    ckpt_io.save(ctx.pretrained_path, Checkpoint(weights, None, ctx.provenance("pretrained")))
    write_csv(ctx.out / "pretrain_log.csv", "train_log", ctx.hash, _log_rows("mixture", tlog))
    write_json(ctx.out / "pretrain.json", {"config_hash": ctx.hash, "mixture_ppl": mixture_ppl,
                                           "uniform_ppl": cfg.model.vocab_size, "domain_ppl": per_domain})
    ctx.save_config()
    print(f"pretrained: mixture PPL {mixture_ppl:.4f} (uniform {cfg.model.vocab_size}) -> {ctx.pretrained_path}")
    return EXIT_OK


def _single_domain_adapter(ctx: Context, w, domain: str, seed: int):
    s = {c.domain_id: c for c in ctx.suite}
    ad = init_adapter(ctx.cfg.method, w.config, replace(ctx.cfg.adapter, seed=seed), weights=w)
    if ad.method is Method.PACKNET_STACK:
        ad = packnet_push(ad)
    return train_domain(w, ad, s[domain].train, replace(ctx.cfg.train, seed=seed))


def cmd_train(ctx: Context, domain: str | None) -> int:
    w = ctx.load_pretrained()
    domain = domain or ctx.domains[0]
    if domain not in ctx.domains:
        raise ConfigError(f"unknown domain {domain!r}")
    s = {c.domain_id: c for c in ctx.suite}
    seed = ctx.cfg.seeds[0]
    ad, tlog = _single_domain_adapter(ctx, w, domain, seed)
    rows = []
    for d in ctx.domains:
        b, a = perplexity(w, None, s[d].eval), perplexity(w, ad, s[d].eval)
        rows.append([d, b, a, 100.0 * (a / b - 1.0)])
    ckpt_io.save(ctx.out / "adapter.ckpt", Checkpoint(w, ad, ctx.provenance("adapter", domain=domain, seed=seed)))
    write_csv(ctx.out / "single.csv", "single", ctx.hash, rows)
    write_csv(ctx.out / "train_log.csv", "train_log", ctx.hash, _log_rows(domain, tlog))
    ctx.save_config()
    print(f"trained {ad.method.value} on {domain}: in-domain {rows[ctx.domains.index(domain)][3]:+.2f}%")
    return EXIT_OK


def _write_sequential(ctx: Context, seed: int, m: AdaptationMatrix, sub: Path):
    domains = m.domains
    write_csv(sub / "matrix.csv", "matrix", ctx.hash, matrix_rows(m), header=HEADERS["matrix"] + domains)
    scaling = [[i + 1, d, *(s[k] for k in ("s_min", "s_max", "s_mean", "pct_tight", "sign_flips"))]
               for i, (d, s) in enumerate(zip(m.trained, m.scaling)) if s is not None]
    if scaling:
        write_csv(sub / "scaling.csv", "scaling", ctx.hash, scaling)
    rows = [r for d, tl in zip(m.trained, m.logs) for r in _log_rows(d, tl)]
    write_csv(sub / "train_log.csv", "train_log", ctx.hash, rows)
    fm = forgetting_metrics(m)
    write_json(sub / "metrics.json", {"config_hash": ctx.hash, "seed": seed, "domains": domains,
                                      "trained": m.trained, "diverged": m.diverged, **fm.to_dict()})
    return fm


def cmd_sequential(ctx: Context) -> int:
    w = ctx.load_pretrained()
    p = ctx.protocol()
    base = baseline_ppls(w, ctx.suite, p.domains)
    any_div = False
    for seed in ctx.cfg.seeds:
        sub = ctx.out / f"seed{seed}"

        def save_step(row, domain, adapter, seed=seed, sub=sub):
            ckpt_io.save(sub / "checkpoints" / f"step{row + 1:03d}.ckpt",
                         Checkpoint(w, adapter, ctx.provenance("adapter", seed=seed, step=row + 1, domain=domain)))

        m = run_sequential(w, ctx.suite, p, seed=seed, baseline=base, on_step=save_step)
        fm = _write_sequential(ctx, seed, m, sub)
        any_div |= fm.n_diverged > 0
        print(f"seed {seed}: in-domain {fm.in_domain_avg:+.2f}%  final forgetting {fm.final_forgetting:+.2f}%  "
              f"forward interference {fm.forward_interference_avg:+.2f}%")
    ctx.save_config()
    return EXIT_DIVERGENCE if any_div else EXIT_OK


def _orderings(ctx: Context, seed: int) -> list[list[str]]:
    o = ctx.cfg.orderings
    if isinstance(o, int):
        return random_orderings(ctx.domains, o, seed)
    return [list(x) for x in o]


def cmd_orderings(ctx: Context) -> int:
    w = ctx.load_pretrained()
    p = ctx.protocol()
    rows, summaries = [], {}
    for seed in ctx.cfg.seeds:
        try:
            summ = run_orderings(w, ctx.suite, p, _orderings(ctx, seed), seed=seed)
        except ProtocolError as exc:
            raise ConfigError(str(exc)) from exc
        for o, m in zip(summ.orderings, summ.metrics):
            rows.append([seed, ">".join(o), m.final_forgetting, m.in_domain_avg, m.forward_interference_avg,
                         m.n_diverged])
        summaries[str(seed)] = summ.to_dict()
        print(f"seed {seed}: final forgetting {summ.final_forgetting_mean:+.2f} ± {summ.final_forgetting_std:.2f}%")
    write_csv(ctx.out / "orderings.csv", "orderings", ctx.hash, rows)
    write_json(ctx.out / "orderings.json", {"config_hash": ctx.hash, "per_seed": summaries})
    ctx.save_config()
    return EXIT_OK


def cmd_lr_sweep(ctx: Context) -> int:
    w = ctx.load_pretrained()
    base = baseline_ppls(w, ctx.suite, ctx.domains)
    rows = []
    for seed in ctx.cfg.seeds:
        for lr in ctx.cfg.learning_rates:
            p = ctx.protocol(train=replace(ctx.cfg.train, learning_rate=lr))
            m = run_sequential(w, ctx.suite, p, seed=seed, baseline=base)
            fm = forgetting_metrics(m)
            last = next((s for s in reversed(m.scaling) if s is not None), None) or {}
            rows.append([seed, lr, fm.in_domain_avg, fm.final_forgetting, fm.forward_interference_avg, fm.n_diverged,
                         last.get("s_min"), last.get("s_max"), last.get("pct_tight"), last.get("sign_flips")])
            print(f"seed {seed} lr {lr:g}: final forgetting {fm.final_forgetting:+.2f}%")
    write_csv(ctx.out / "lr_sweep.csv", "lr_sweep", ctx.hash, rows)
    ctx.save_config()
    return EXIT_OK


def _load_pair(base_path, other_path):
    base = ckpt_io.load(base_path)
    other = ckpt_io.load(other_path)
    if base.weights.config != other.weights.config:
        raise ConfigError("checkpoints have different model configs")
    return base, other


def cmd_analyze(ctx: Context, base_path, other_path) -> int:
    base, other = _load_pair(base_path, other_path)
    w_pre = base.weights.to(torch.float64)
    target = other.adapter.to(torch.float64) if other.adapter is not None else other.weights.to(torch.float64)
    if other.adapter is not None and not other.weights.bitwise_equal(base.weights):
        raise ConfigError("adapter checkpoint was trained on a different base than --base")
    layers = list(ctx.cfg.layers) if ctx.cfg.layers is not None else None
    rows = subspace_report(w_pre, target, k=ctx.cfg.k, layers=layers)
    write_csv(ctx.out / "subspace.csv", "subspace", ctx.hash,
              [[r.layer, r.target, r.k, r.overlap, r.perturbation, r.bound_holds, r.bound_violation, r.tie_warning]
               for r in rows])
    ctx.save_config()
    print(f"analyzed {len(rows)} matrices; min overlap {min(r.overlap for r in rows):.4f}")
    return EXIT_OK


def cmd_landscape(ctx: Context) -> int:
    w = ctx.load_pretrained()
    if len(ctx.domains) < 2:
        raise ConfigError("landscape needs at least two domains")
    s = {c.domain_id: c for c in ctx.suite}
    dom_a, dom_b, cross = ctx.domains[0], ctx.domains[1], ctx.domains[-1]
    seed = ctx.cfg.seeds[0]
    alphas = sorted(set(float(a) for a in ctx.cfg.alphas))
    ad_a, _ = _single_domain_adapter(ctx, w, dom_a, seed)
    w_a = absorb(ad_a, w)
    tr = interpolate_1d(w, w_a, alphas, {"in": s[dom_a].eval, "cross": s[cross].eval}, allow_extrapolation=True)
    write_csv(ctx.out / "landscape_1d.csv", "landscape_1d", ctx.hash,
              [[c[0], i, x] for c, i, x in zip(tr.coords, tr.ppl["in"], tr.ppl["cross"])])
    out = {"config_hash": ctx.hash, "domain_a": dom_a, "domain_b": dom_b, "cross_domain": cross}
    if len(ctx.domains) >= 3:
        ad_b, _ = _single_domain_adapter(ctx, w, dom_b, seed)
        w_b = absorb(ad_b, w)
        grid = lattice(ctx.cfg.grid, ctx.cfg.grid)
        g = grid_2d(w, weight_delta(w_a, w), weight_delta(w_b, w), grid,
                    {"a": s[dom_a].eval, "b": s[dom_b].eval, "cross": s[cross].eval})
        write_csv(ctx.out / "landscape_2d.csv", "landscape_2d", ctx.hash,
                  [[c[0], c[1], a, b, x] for c, a, b, x in zip(g.coords, g.ppl["a"], g.ppl["b"], g.ppl["cross"])])
        out["delta_cosine"] = g.cosine
    write_json(ctx.out / "landscape.json", out)
    ctx.save_config()
    print(f"landscape: {len(alphas)} interpolation points")
    return EXIT_OK


def parity_check(wrapped: Checkpoint, absorbed: TransformerWeights, eval_sets, rtol: float = PARITY_RTOL) -> float:
    """Largest relative PPL gap between wrapped and absorbed models; raises :class:`ParityError` above ``rtol``."""
    worst = 0.0
    for toks in eval_sets:
        a = perplexity(wrapped.weights, wrapped.adapter, toks)
        b = perplexity(absorbed, None, toks)
        worst = max(worst, abs(b - a) / a)
    if not worst <= rtol:
        raise ParityError(f"absorbed model PPL differs from wrapped by {worst:.3e} (> {rtol:g})")
    return worst


def cmd_absorb(ctx: Context, in_path, out_path) -> int:
    ck = ckpt_io.load(in_path)
    if ck.adapter is None:
        raise ConfigError(f"{in_path} has no adapter to absorb")
    try:
        absorbed = absorb(ck.adapter, ck.weights)
    except AdapterError as exc:
        raise ConfigError(str(exc)) from exc
    sets = [c.eval for c in ctx.suite] if ck.weights.config == ctx.cfg.model else []
    if not sets:
        raise ConfigError("config model does not match the checkpoint; cannot build parity eval sets")
    gap = parity_check(ck, absorbed, sets)
    prov = dict(ck.provenance, kind="absorbed", source_method=ck.adapter.method.value)
    out = Path(out_path) if out_path else ctx.out / "absorbed.ckpt"
    ckpt_io.save(out, Checkpoint(absorbed, None, prov))
    print(f"absorbed {ck.adapter.method.value} -> {out} (parity gap {gap:.2e})")
    return EXIT_OK


def cmd_decompose(ctx: Context) -> int:
    w = ctx.load_pretrained()
    if Method.parse(ctx.cfg.method) not in MULTIPLICATIVE:
        raise ConfigError("decompose needs a gain method (gain, gain_ffn, ia3)")
    if len(ctx.domains) < 2:
        raise ConfigError("decompose needs at least two domains")
    s = {c.domain_id: c for c in ctx.suite}
    seed = ctx.cfg.seeds[0]
    adapters = {d: _single_domain_adapter(ctx, w, d, seed)[0] for d in ctx.domains}
    try:
        dec = shared_component({d: log_gains(a) for d, a in adapters.items()})
    except ValueError as exc:
        print(f"decompose: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    rows = []
    for d, a in adapters.items():
        for keep in ("full", "shared_only", "specific_only"):
            ab = ablate_component(a, dec, d, keep)
            own = perplexity(w, ab, s[d].eval)
            others = [perplexity(w, ab, s[o].eval) for o in ctx.domains if o != d]
            rows.append([d, keep, own, float(np.mean(others))])
    write_csv(ctx.out / "ablation.csv", "ablation", ctx.hash, rows)
    write_json(ctx.out / "decompose.json", {"config_hash": ctx.hash, "domains": dec.domains,
                                            "shared_variance_fraction": dec.shared_variance_fraction,
                                            "correlations": dec.correlations, "shared": dec.shared})
    ctx.save_config()
    print(f"shared variance fraction {dec.shared_variance_fraction:.3f}")
    return EXIT_OK


def cmd_report(ctx: Context, run_dir) -> int:
    run_dir = Path(run_dir) if run_dir else ctx.out
    files = sorted(run_dir.glob("seed*/metrics.json"))
    if not files:
        raise ConfigError(f"no seed*/metrics.json under {run_dir}")
    rows, ff, ind = [], [], []
    for f in files:
        m = json.loads(f.read_text())
        nan = float("nan")
        vals = [m["in_domain_avg"], m["final_forgetting"], m["forward_interference_avg"]]
        vals = [nan if v is None else v for v in vals]
        rows.append([m["seed"], *vals, m["n_diverged"]])
        ind.append(vals[0])
        ff.append(vals[1])
    write_csv(run_dir / "summary.csv", "summary", ctx.hash, rows)
    summary = {"n_seeds": len(rows), "in_domain": mean_std(ind), "final_forgetting": mean_std(ff)}
    write_json(run_dir / "summary.json", summary)
    print(f"{len(rows)} seeds: final forgetting {summary['final_forgetting'][0]:+.2f} "
          f"± {summary['final_forgetting'][1]:.2f}%")
    return EXIT_OK


# ---- argument parsing ----------------------------------------------------------------

def _csv_list(conv):
    def parse(text):
        return tuple(conv(x) for x in text.split(",") if x.strip())
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gainlab", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="RunConfig JSON file (defaults used when omitted)")
        p.add_argument("--output-dir")
        p.add_argument("--pretrained", help="pretrained checkpoint path")
        p.add_argument("--method")
        p.add_argument("--rank", type=int)
        p.add_argument("--targets", type=_csv_list(str))
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--seeds", type=_csv_list(int))
        p.add_argument("--cycles", type=int)
        p.add_argument("--precision", choices=("float32", "float64"))
        p.add_argument("--k", type=int)
        p.add_argument("--layers", type=_csv_list(int))
        p.add_argument("--halt-on-divergence", action="store_true", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("pretrain", help="train the base model on the domain mixture"))
    common(sub.add_parser("train", help="adapt to a single domain")).add_argument("--domain")
    common(sub.add_parser("sequential", help="sequential multi-domain protocol"))
    common(sub.add_parser("orderings", help="sequential protocol over several domain orderings"))
    common(sub.add_parser("lr-sweep", help="sequential protocol at several learning rates"))
    p = common(sub.add_parser("analyze", help="subspace report of one checkpoint against a base"))
    p.add_argument("--base", required=True)
    p.add_argument("--other", required=True)
    common(sub.add_parser("landscape", help="1-D interpolation and 2-D grid of absorbed adapters"))
    p = common(sub.add_parser("absorb", help="fold an adapter checkpoint into plain weights"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    common(sub.add_parser("decompose", help="shared/specific split of per-domain gains"))
    common(sub.add_parser("report", help="summarise a sequential run directory")).add_argument("--run-dir")
    return ap


_PROTOCOL_OF = {"train": "single", "sequential": "sequential", "orderings": "orderings", "lr-sweep": "lr_sweep",
                "landscape": "landscape", "analyze": "subspace", "decompose": "decompose"}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    ch = {}
    if args.output_dir:
        ch["output_dir"] = args.output_dir
    if args.pretrained:
        ch["pretrained"] = args.pretrained
    if args.method:
        ch["method"] = args.method
    if args.seeds:
        ch["seeds"] = args.seeds
    if args.cycles is not None:
        ch["cycles"] = args.cycles
    if args.precision:
        ch["precision"] = args.precision
    if args.k is not None:
        ch["k"] = args.k
    if args.layers:
        ch["layers"] = args.layers
    if args.halt_on_divergence:
        ch["halt_on_divergence"] = True
    if args.command in _PROTOCOL_OF:
        ch["protocol"] = _PROTOCOL_OF[args.command]
    opts = {}
    if args.rank is not None:
        opts["rank"] = args.rank
    if args.targets:
        opts["targets"] = args.targets
    if opts:
        ch["adapter"] = replace(cfg.adapter, **opts)
    if args.learning_rate is not None:
        ch["train"] = replace(cfg.train, learning_rate=args.learning_rate)
    return cfg.replace(**ch) if ch else cfg


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        ctx = Context(resolve_config(args))
        c = args.command
        if c == "pretrain":
            return cmd_pretrain(ctx)
        if c == "train":
            return cmd_train(ctx, args.domain)
        if c == "sequential":
            return cmd_sequential(ctx)
        if c == "orderings":
            return cmd_orderings(ctx)
        if c == "lr-sweep":
            return cmd_lr_sweep(ctx)
        if c == "analyze":
            return cmd_analyze(ctx, args.base, args.other)
        if c == "landscape":
            return cmd_landscape(ctx)
        if c == "absorb":
            return cmd_absorb(ctx, args.checkpoint, args.out)
        if c == "decompose":
            return cmd_decompose(ctx)
        if c == "report":
            return cmd_report(ctx, args.run_dir)
        raise ConfigError(f"unknown command {c}")
    except (ConfigError, CheckpointError, CorpusError, ProtocolError, AdapterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ParityError as exc:
        print(f"parity check failed: {exc}", file=sys.stderr)
        return EXIT_PARITY


if __name__ == "__main__":
    sys.exit(main())
