"""Routing separation and attention differences as the domain shift grows."""

from _common import emit, parser, seeds
from gdcan.config import TrainConfig
from gdcan.data import DomainPairSpec, generate
from gdcan.reports import attention_differences
from gdcan.routing import separation_fraction
from gdcan.train import train


def main():
    p = parser(__doc__)
    p.add_argument("--shifts", default="0.25,1.0")
    p.add_argument("--lam", type=float, default=0.2)
    args = p.parse_args()
    extra = {} if args.epochs is None else {"epochs": args.epochs}
    rows = []
    for shift in (float(v) for v in args.shifts.split(",")):
        source, target = generate(DomainPairSpec(shift_magnitude=shift))
        for seed in seeds(args.seeds):
            res = train(TrainConfig(seed=seed, lam=args.lam, **extra), source, target)
            diffs = attention_differences(res.model, source, target, res.policy)
            rows.append((shift, seed, separation_fraction(res.decisions), *(float(d.mean()) for d in diffs),
                         res.final()["tgt_acc"]))
    n_stages = len(rows[0]) - 4
    emit(("shift", "seed", "separation_fraction", *(f"stage{i + 1}_mean_diff" for i in range(n_stages)), "tgt_acc"),
         rows, args.out)


if __name__ == "__main__":
    main()
