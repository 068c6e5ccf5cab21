"""Run every shipped config (or the ones named) through the CLI into out/<config-name>/.

    python scripts/run_configs.py                 # all of configs/*.json
    python scripts/run_configs.py eig_invariance search_scale
"""
import json
import sys
import time
from pathlib import Path

from ringform.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(names):
    paths = [ROOT / "configs" / f"{n}.json" for n in names] if names else sorted((ROOT / "configs").glob("*.json"))
    status = 0
    for path in paths:
        kind = json.loads(path.read_text())["kind"]
        print(f"== {path.stem} ({kind})")
        t0 = time.perf_counter()
        code = main([kind, "--config", str(path), "--out", str(ROOT / "out" / path.stem)])
        print(f"   exit {code}, {time.perf_counter() - t0:.1f} s")
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
