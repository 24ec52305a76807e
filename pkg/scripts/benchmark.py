"""Full model against the source-only baseline on the default benchmark."""

import time

import numpy as np

from _common import emit, parser, seeds
from gdcan.config import TrainConfig
from gdcan.data import DomainPairSpec, generate
from gdcan.train import train


def main():
    p = parser(__doc__)
    p.add_argument("--shift", type=float, default=0.8)
    args = p.parse_args()
    source, target = generate(DomainPairSpec(shift_magnitude=args.shift))
    extra = {} if args.epochs is None else {"epochs": args.epochs}
    rows, summary = [], {}
    for name, kw in (("full", {}), ("source_only", {"alpha": 0.0, "beta": 0.0})):
        for seed in seeds(args.seeds):
            start = time.perf_counter()
            final = train(TrainConfig(seed=seed, **kw, **extra), source, target).final()
            rows.append((name, seed, final["src_acc"], final["tgt_acc"], round(time.perf_counter() - start, 1)))
            summary.setdefault(name, []).append(final["tgt_acc"])
    emit(("setting", "seed", "src_acc", "tgt_acc", "seconds"), rows, args.out)
    gain = np.mean(summary["full"]) - np.mean(summary["source_only"])
    print(f"mean target gain: {100 * gain:+.1f} points")


if __name__ == "__main__":
    main()
