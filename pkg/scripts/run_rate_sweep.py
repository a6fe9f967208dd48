#!/usr/bin/env python3
"""Self-transport rate experiments: sweep epsilon on fine grids, fit the
log-log slope of the support spread, and emit rates.csv plus an SVG plot.

The d=1 grid targets slope 1/3, the d=2 grid slope 1/4; epsilon grids are
chosen so the grid spacing stays below the resolvable-support floor.
"""
import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from qotlab import cli  # noqa: E402

SWEEPS = [
    {
        "label": "d1-h0.005",
        "instance": {"name": "rate-d1", "kind": "grid", "d": 1, "h": 0.005},
        "eps_list": [10.0**e for e in (-1.0, -1.5, -2.0, -2.5, -3.0, -3.5)],
        "target_slope": 1 / 3,
    },
    {
        "label": "d2-h0.05",
        "instance": {"name": "rate-d2", "kind": "grid", "d": 2, "h": 0.05},
        "eps_list": [10.0**e for e in (-0.5, -1.0, -1.5, -2.0, -2.4)],
        "target_slope": 1 / 4,
    },
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("-o", "--out", default="results/rates")
    args = parser.parse_args()
    out_root = Path(args.out)

    for sweep in SWEEPS:
        out_dir = out_root / sweep["label"]
        out_dir.mkdir(parents=True, exist_ok=True)
        config = {
            "instance": sweep["instance"],
            "eps_list": sweep["eps_list"],
            "checks": ["SymUB", "SymLB", "SuppDiamM", "GradEstimate", "DensityUB"],
            "rate_fit": True,
            "output_dir": str(out_dir.resolve()),
            "seed": 0,
        }
        cfg_path = out_dir / "config.json"
        cfg_path.write_text(json.dumps(config, indent=2, sort_keys=True))
        t0 = time.perf_counter()
        code = cli.run_command(str(cfg_path))
        elapsed = time.perf_counter() - t0
        if code != cli.EXIT_OK:
            print(f"{sweep['label']}: FAILED with exit code {code}")
            return code
        summary = json.loads((out_dir / "rates_summary.json").read_text())[0]
        print(
            f"{sweep['label']}: slope {summary['slope']:.4f} "
            f"(target {sweep['target_slope']:.4f}), r2 {summary['r_squared']:.4f}, "
            f"{elapsed:.0f}s"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
