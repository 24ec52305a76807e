"""Target accuracy with individual loss terms or the attention routing removed."""

from _common import emit, parser, seeds
from gdcan.config import TrainConfig
from gdcan.data import DomainPairSpec, generate
from gdcan.train import train

SETTINGS = {
    "full": {},
    "no_alignment": {"alpha": 0.0},
    "no_entropy": {"beta": 0.0},
    "shared_se": {"lam": 1.0},
    "source_only": {"alpha": 0.0, "beta": 0.0},
}


def main():
    p = parser(__doc__)
    p.add_argument("--only", default=",".join(SETTINGS), help="comma-separated subset of settings")
    args = p.parse_args()
    source, target = generate(DomainPairSpec())
    extra = {} if args.epochs is None else {"epochs": args.epochs}
    rows = []
    for name in args.only.split(","):
        for seed in seeds(args.seeds):
            final = train(TrainConfig(seed=seed, **SETTINGS[name], **extra), source, target).final()
            rows.append((name, seed, final["src_acc"], final["tgt_acc"]))
    emit(("setting", "seed", "src_acc", "tgt_acc"), rows, args.out)


if __name__ == "__main__":
    main()
