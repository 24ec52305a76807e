"""Helpers shared by the experiment scripts."""

import argparse
import csv
import sys
from pathlib import Path


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--epochs", type=int, default=None, help="override the default epoch count")
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    return p


def seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def emit(header, rows, out=None) -> None:
    handle = open(out, "w", newline="") if out else sys.stdout
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if out:
            handle.close()
            print(Path(out), file=sys.stderr)
