"""Cycle the domains several times with one GAIN adapter and track the gain range.

Prints s_min / s_max after every domain and the relative change of s_max
over the final cycle.
"""

from gainlab.harness import Protocol, forgetting_metrics, run_sequential
from gainlab.optimize import DEFAULT_LR, TrainConfig

from _common import desk_setup, parser


def main():
    p = parser(__doc__)
    p.add_argument("--method", default="gain")
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=DEFAULT_LR)
    args = p.parse_args()
    weights, suite = desk_setup(args)
    ids = tuple(c.domain_id for c in suite)
    for seed in args.seeds:
        m = run_sequential(weights, suite, Protocol(ids, args.method, train=TrainConfig(learning_rate=args.learning_rate),
                                                           cycles=args.cycles), seed=seed)
        for i, (d, s) in enumerate(zip(m.trained, m.scaling)):
            print(f"seed {seed} step {i + 1:2d} {d}: s_min {s['s_min']:.4f} s_max {s['s_max']:.4f}")
        n = len(ids)
        last = [s["s_max"] for s in m.scaling[-n - 1:]]
        change = (max(last) - min(last)) / last[0]
        met = forgetting_metrics(m)
        print(f"seed {seed}: min s_min {min(s['s_min'] for s in m.scaling):.4f}, "
              f"s_max change over final cycle {100 * change:.2f}%, final forgetting {met.final_forgetting:+.2f}%")


if __name__ == "__main__":
    main()
