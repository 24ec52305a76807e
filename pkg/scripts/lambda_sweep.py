"""Separation count and target accuracy across routing thresholds."""

from _common import emit, parser, seeds
from gdcan.config import TrainConfig
from gdcan.data import DomainPairSpec, generate
from gdcan.reports import routing_sweep


def main():
    p = parser(__doc__)
    p.add_argument("--lambdas", default="0,0.2,0.5,0.8,1")
    args = p.parse_args()
    lambdas = [float(v) for v in args.lambdas.split(",")]
    source, target = generate(DomainPairSpec())
    extra = {} if args.epochs is None else {"epochs": args.epochs}
    rows = []
    for seed in seeds(args.seeds):
        for r in routing_sweep(TrainConfig(seed=seed, **extra), lambdas, source, target):
            rows.append((seed, r.lam, r.separation_count, r.separation_fraction, r.target_accuracy))
    emit(("seed", "lambda", "separation_count", "separation_fraction", "target_accuracy"), rows, args.out)


if __name__ == "__main__":
    main()
