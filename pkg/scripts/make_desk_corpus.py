#!/usr/bin/env python3
"""Fabricate the desk-scale corpus and matching pipeline config.

Creates <root>/data/{non_defective,defective} with procedural images and
writes <root>/desk.json ready for the CLI:

    python3 scripts/make_desk_corpus.py --root desk_run
    defectdiff train-ddpm --config desk_run/desk.json
"""

import argparse
import json
from pathlib import Path

from defectdiff.toydata import make_binary_corpus, make_desk_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=Path("desk_run"))
    parser.add_argument("--non-defective", type=int, default=48)
    parser.add_argument("--defective", type=int, default=28)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    data = args.root / "data"
    make_binary_corpus(data, n_nondef=args.non_defective, n_def=args.defective,
                       size=args.size, seed=args.seed)
    config = make_desk_config(data, args.root / "out")
    config_path = args.root / "desk.json"
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"corpus: {data} ({args.non_defective} non-defective, {args.defective} defective)")
    print(f"config: {config_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
