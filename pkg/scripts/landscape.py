"""Perplexity along the line to an absorbed adapter and over a 2-D grid of two adapters.

Trains GAIN-FFN and LoRA (r=8 on W_O) on the first domain, folds both into the
base weights and evaluates the first and last domains.
"""

import numpy as np

from gainlab.adapters import AdapterOptions, absorb, init_adapter
from gainlab.diagnostics import grid_2d, interpolate_1d, lattice, weight_delta
from gainlab.optimize import TrainConfig, train_domain

from _common import desk_setup, parser


def main():
    p = parser(__doc__)
    p.add_argument("--points", type=int, default=11)
    args = p.parse_args()
    weights, suite = desk_setup(args)
    seed = args.seeds[0]
    cfg = TrainConfig(seed=seed)
    absorbed = {}
    for name, method, opts in (("gain_ffn", "gain_ffn", AdapterOptions(seed=seed)),
                               ("lora_r8", "lora", AdapterOptions(rank=8, targets=("O",), seed=seed))):
        ad, _ = train_domain(weights, init_adapter(method, weights.config, opts, weights=weights), suite[0].train, cfg)
        absorbed[name] = absorb(ad, weights)
    sets = {"in_domain": suite[0].eval, "cross_domain": suite[-1].eval}
    alphas = np.linspace(0.0, 1.0, args.points).tolist()
    for name, w_new in absorbed.items():
        tr = interpolate_1d(weights, w_new, alphas, sets)
        for i, a in enumerate(alphas):
            print(f"{name:8s} alpha {a:.2f}  " + "  ".join(f"{n} {tr.ppl[n][i]:.3f}" for n in sets))
    da, db = (weight_delta(absorbed[n], weights) for n in ("gain_ffn", "lora_r8"))
    axis = np.linspace(0.0, 1.0, 5).tolist()
    g = grid_2d(weights, da, db, lattice(axis, axis), sets)
    print(f"delta cosine (gain_ffn vs lora_r8): {g.cosine:+.4f}")
    for (a, b), ppl in zip(g.coords, g.ppl["cross_domain"]):
        print(f"grid alpha {a:.2f} beta {b:.2f}  cross_domain {ppl:.3f}")


if __name__ == "__main__":
    main()
