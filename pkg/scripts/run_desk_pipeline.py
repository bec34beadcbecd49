#!/usr/bin/env python3
"""Run the whole pipeline on the desk corpus: generator training, sampling,
augmentation, both classifier arms, the t-SNE projection, and the report.

    python3 scripts/run_desk_pipeline.py --root desk_run
"""

import argparse
import json
import sys
from pathlib import Path

from defectdiff.cli import main as cli_main
from defectdiff.toydata import make_binary_corpus, make_desk_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", type=Path, default=Path("desk_run"))
    args = parser.parse_args()

    config_path = args.root / "desk.json"
    if not config_path.is_file():
        data = args.root / "data"
        make_binary_corpus(data, n_nondef=48, n_def=28, size=32, seed=0)
        config_path.write_text(
            json.dumps(make_desk_config(data, args.root / "out"), indent=2, sort_keys=True) + "\n"
        )
        print(f"created corpus and config under {args.root}")

    for command in ("train-ddpm", "generate", "augment", "tsne", "report"):
        print(f"==> defectdiff {command}")
        code = cli_main([command, "--config", str(config_path)])
        if code != 0:
            print(f"{command} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
