"""Run the sequential protocol for gain and low-rank adapters and compare them.

For every seed, prints final forgetting and mean forward interference per
method, then the top-k right-singular overlap of W_O against the pretrained
model on the probed layers.
"""

from gainlab.adapters import AdapterOptions
from gainlab.diagnostics import subspace_report
from gainlab.harness import Protocol, forgetting_metrics, mean_std, run_sequential

from _common import desk_setup, parser

METHODS = {
    "gain": ("gain", AdapterOptions()),
    "gain_ffn": ("gain_ffn", AdapterOptions()),
    "ia3": ("ia3", AdapterOptions()),
    "lora_r8": ("lora", AdapterOptions(rank=8, targets=("O",))),
}


def main():
    p = parser(__doc__)
    p.add_argument("--k", type=int, default=10)
    args = p.parse_args()
    weights, suite = desk_setup(args)
    ids = tuple(c.domain_id for c in suite)
    results = {name: [] for name in METHODS}
    for seed in args.seeds:
        for name, (method, opts) in METHODS.items():
            last = {}
            m = run_sequential(weights, suite, Protocol(ids, method, options=opts), seed=seed,
                               on_step=lambda row, d, ad: last.update(adapter=ad))
            met = forgetting_metrics(m)
            rows = subspace_report(weights, last["adapter"], k=args.k, targets=("O",))
            overlaps = " ".join(f"L{r.layer}={r.overlap:.3f}" for r in rows)
            print(f"seed {seed} {name:8s} forgetting {met.final_forgetting:+7.2f}%  "
                  f"interference {met.forward_interference_avg:+7.2f}%  top-{args.k} O overlap {overlaps}")
            results[name].append(met)
    for name, mets in results.items():
        ff = mean_std([x.final_forgetting for x in mets])
        fi = mean_std([x.forward_interference_avg for x in mets])
        print(f"{name:8s} forgetting {ff[0]:+.2f} +/- {ff[1]:.2f}%  interference {fi[0]:+.2f} +/- {fi[1]:.2f}%")


if __name__ == "__main__":
    main()
