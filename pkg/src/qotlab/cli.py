"""Batch orchestration: build or load instances, run the solver and the
bound checkers over an epsilon sweep, and emit reports and plots.

Exit codes: 0 all explicit-constant checks pass, 1 a check failed,
2 configuration error, 3 solver non-convergence.  Errors also emit one
machine-readable JSON record on stderr.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import geometry, verify
from .exact_ot import ExactOTError, solve_exact
from .measures import (
    DiscreteMeasure,
    MeasureError,
    MongeMapSpec,
    affine_map,
    identity_map,
    load_measure,
    make_measure,
    measure_from_dict,
    pushforward,
    save_measure,
    uniform_ball_grid,
)
from .qot_solver import ConfigError, ConvergenceError, SolverConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3

DEFAULT_CHECKS = list(verify.BOUND_IDS)

# instance families shipped with the lab; grids are self-transport, affine
# families push a d=1 grid through x -> a x (grid rescaled so images stay in
# the unit ball)
SHIPPED_INSTANCES = [
    {"name": "singleton", "kind": "singleton"},
    {"name": "two-point-self", "kind": "two_point"},
    {"name": "two-point-shift", "kind": "two_point", "a": 0.5},
    {"name": "grid-d1-h0.1", "kind": "grid", "d": 1, "h": 0.1},
    {"name": "grid-d1-h0.05", "kind": "grid", "d": 1, "h": 0.05},
    {"name": "grid-d1-h0.02", "kind": "grid", "d": 1, "h": 0.02},
    {"name": "grid-d2-h0.2", "kind": "grid", "d": 2, "h": 0.2},
    {"name": "affine-a0.5", "kind": "affine", "a": 0.5, "h": 0.02},
    {"name": "affine-a1", "kind": "affine", "a": 1.0, "h": 0.02},
    {"name": "affine-a2", "kind": "affine", "a": 2.0, "h": 0.02},
]


class CliConfigError(ValueError):
    pass


@dataclass
class Instance:
    name: str
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    monge: Optional[MongeMapSpec] = None

    @property
    def self_transport(self) -> bool:
        return self.mu.same_as(self.nu)


def _monge_from_dict(spec: dict, dim: int) -> MongeMapSpec:
    kind = spec.get("kind")
    if kind == "identity":
        return identity_map()
    if kind == "affine":
        if "a" in spec:
            A = float(spec["a"]) * np.eye(dim)
        else:
            A = np.asarray(spec["matrix"], dtype=float)
        offset = spec.get("offset")
        return affine_map(A, offset)
    raise CliConfigError(f"unknown monge map kind {kind!r}")


def build_instance(spec: dict, base_dir: Path = Path(".")) -> Instance:
    """Materialize an instance from a generator spec or measure files."""
    kind = spec.get("kind")
    name = spec.get("name", kind or "instance")
    if kind == "singleton":
        mu = make_measure([[0.0]], [1.0])
        return Instance(name, mu, mu, identity_map())
    if kind == "two_point":
        mu = make_measure([[-1.0], [1.0]], [0.5, 0.5])
        a = spec.get("a")
        if a is None:
            return Instance(name, mu, mu, identity_map())
        monge = _monge_from_dict({"kind": "affine", "a": float(a)}, 1)
        return Instance(name, mu, pushforward(mu, monge), monge)
    if kind == "grid":
        mu = uniform_ball_grid(int(spec["d"]), float(spec["h"]))
        return Instance(name, mu, mu, identity_map())
    if kind == "affine":
        a = float(spec["a"])
        d = int(spec.get("d", 1))
        base = uniform_ball_grid(d, float(spec["h"]))
        if a > 1.0:
            # shrink the source grid so images a * x stay inside the ball
            base = make_measure(base.atoms / a, base.weights)
        monge = _monge_from_dict({"kind": "affine", "a": a}, d)
        nu = base if a == 1.0 else pushforward(base, monge)
        return Instance(name, base, nu, monge)
    if kind == "files":
        mu = load_measure(base_dir / spec["mu"])
        nu_spec = spec.get("nu", "same")
        nu = mu if nu_spec == "same" else load_measure(base_dir / nu_spec)
        monge = None
        if spec.get("monge"):
            monge = _monge_from_dict(spec["monge"], mu.dim)
        elif nu_spec == "same":
            monge = identity_map()
        return Instance(name, mu, nu, monge)
    if kind == "inline":
        mu = measure_from_dict(spec["mu"])
        nu = mu if spec.get("nu", "same") == "same" else measure_from_dict(spec["nu"])
        monge = _monge_from_dict(spec["monge"], mu.dim) if spec.get("monge") else None
        if monge is None and spec.get("nu", "same") == "same":
            monge = identity_map()
        return Instance(name, mu, nu, monge)
    raise CliConfigError(f"unknown instance kind {kind!r}")


@dataclass
class ExperimentConfig:
    instance: dict
    eps_list: list[float]
    output_dir: Path
    checks: list[str] = field(default_factory=lambda: list(DEFAULT_CHECKS))
    max_sweeps: int = 10_000
    residual_tol: float = 1e-10
    support_tol: float = 0.0
    rate_fit: bool = False
    seed: int = 0

    @staticmethod
    def from_dict(raw: dict, base_dir: Path) -> "ExperimentConfig":
        try:
            eps_list = [float(e) for e in raw["eps_list"]]
            instance = dict(raw["instance"])
            output_dir = base_dir / raw["output_dir"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CliConfigError(f"malformed config: {exc}") from exc
        if not eps_list or any(e <= 0 for e in eps_list):
            raise CliConfigError("eps_list must be nonempty and positive")
        if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
            raise CliConfigError("eps_list must be sorted strictly descending")
        solver = raw.get("solver", {})
        checks = raw.get("checks", "all")
        if checks == "all":
            checks = list(DEFAULT_CHECKS)
        return ExperimentConfig(
            instance=instance,
            eps_list=eps_list,
            output_dir=output_dir,
            checks=list(checks),
            max_sweeps=int(solver.get("max_sweeps", 10_000)),
            residual_tol=float(solver.get("residual_tol", 1e-10)),
            support_tol=float(solver.get("support_tol", 0.0)),
            rate_fit=bool(raw.get("rate_fit", False)),
            seed=int(raw.get("seed", 0)),
        )


def _thread_count() -> int:
    raw = os.environ.get("QOTLAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise CliConfigError(f"QOTLAB_THREADS must be an integer, got {raw!r}") from exc
    return os.cpu_count() or 1


def _report_sort_key(record: dict):
    return (
        record["bound_id"],
        record["context"].get("epsilon", 0.0),
        record["context"].get("instance", ""),
        json.dumps(record["context"], sort_keys=True),
    )


def run_experiment(config: ExperimentConfig, base_dir: Path = Path(".")):
    """Solve the instance across the eps sweep, run the requested checks,
    and return (report records, rate fits, spread-profile CSV text)."""
    inst = build_instance(config.instance, base_dir)
    profile_csv = geometry.build_spread(inst.mu, source=inst.name).to_csv()
    exact = None
    if "CostSandwich" in config.checks:
        exact = solve_exact(inst.mu, inst.nu)

    def one_eps(eps: float):
        cfg = SolverConfig(
            epsilon=eps,
            max_sweeps=config.max_sweeps,
            residual_tol=config.residual_tol,
            support_tol=config.support_tol,
        )
        solved = verify.prepare_instance(
            inst.name, inst.mu, inst.nu, cfg, monge=inst.monge, exact=exact
        )
        reports = verify.run_checks(solved, config.checks)
        spread = None
        if solved.self_transport:
            ii, jj = solved.coupling.i_idx, solved.coupling.j_idx
            mask = solved.coupling.in_support
            if mask.any():
                diffs = solved.mu.atoms[ii[mask]] - solved.nu.atoms[jj[mask]]
                spread = float(np.sqrt((diffs**2).sum(-1)).max())
            else:
                spread = 0.0
        return reports, spread

    with ThreadPoolExecutor(max_workers=min(_thread_count(), len(config.eps_list))) as pool:
        results = list(pool.map(one_eps, config.eps_list))

    records = []
    for (reports, _), eps in zip(results, config.eps_list):
        for rep in reports:
            rec = rep.to_record()
            rec["context"]["seed"] = config.seed
            records.append(rec)
    records.sort(key=_report_sort_key)

    fits: list[verify.RateFit] = []
    if config.rate_fit:
        spreads = [spread for _, spread in results]
        if any(s is None for s in spreads):
            raise CliConfigError("rate_fit requires a self-transport instance")
        if len(inst.mu) < 2:
            raise CliConfigError("rate_fit needs a spread-resolving grid")
        verify.check_rate_floor(
            inst.mu.min_pairwise_distance(), inst.mu.dim, min(config.eps_list)
        )
        fits.append(verify.fit_rate(config.eps_list, spreads))
    return records, fits, profile_csv


def trend_summary(records: list[dict]) -> list[dict]:
    """Sweep-level summary for the universal-constant bounds: implied
    constants per epsilon (descending), their max/min ratio, and the
    nonincreasing-trend flag at 10 percent slack."""
    out = []
    universal = sorted(set(verify.BOUND_IDS) - verify.EXPLICIT_BOUND_IDS)
    for bound_id in universal:
        series = sorted(
            (
                (rec["context"]["epsilon"], rec["implied_constant"])
                for rec in records
                if rec["bound_id"] == bound_id and not rec["context"].get("vacuous", False)
            ),
            key=lambda pair: -pair[0],
        )
        if not series:
            continue
        constants = [c for _, c in series]
        out.append(
            {
                "bound_id": bound_id,
                "eps": [e for e, _ in series],
                "implied_constants": constants,
                "max_min_ratio": verify.max_min_ratio(constants),
                "nonincreasing_within_10pct": verify.nonincreasing_within(
                    constants, slack=0.10
                ),
            }
        )
    return out


def _write_reports(records: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def _write_rates(fits: list[verify.RateFit], out_dir: Path) -> None:
    csv_path = out_dir / "rates.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("epsilon,observable\n")
        for fit in fits:
            for eps, obs in zip(fit.eps_grid, fit.observable):
                fh.write(f"{eps!r},{obs!r}\n")
    summary = [
        {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "points": len(fit.eps_grid),
        }
        for fit in fits
    ]
    with open(out_dir / "rates_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for k, fit in enumerate(fits):
        write_rate_svg(fit, out_dir / f"rate_{k}.svg")


def write_rate_svg(fit: verify.RateFit, path: Path) -> None:
    """Log-log scatter of the observable with the fitted line, as plain SVG."""
    width, height, margin = 480, 360, 50
    lx = [math.log10(e) for e in fit.eps_grid]
    ly = [math.log10(o) for o in fit.observable]
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    spanx = (x1 - x0) or 1.0
    spany = (y1 - y0) or 1.0

    def sx(v):
        return margin + (v - x0) / spanx * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y0) / spany * (height - 2 * margin)

    ln10 = math.log(10.0)
    fit_y = [(fit.slope * v * ln10 + fit.intercept) / ln10 for v in (x0, x1)]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
        f'text-anchor="middle">log10 epsilon</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">log10 observable</text>',
        f'<line x1="{sx(x0):.2f}" y1="{sy(fit_y[0]):.2f}" x2="{sx(x1):.2f}" '
        f'y2="{sy(fit_y[1]):.2f}" stroke="steelblue" stroke-width="1.5"/>',
    ]
    for vx, vy in zip(lx, ly):
        parts.append(f'<circle cx="{sx(vx):.2f}" cy="{sy(vy):.2f}" r="3" fill="crimson"/>')
    parts.append(
        f'<text x="{width - margin}" y="{margin - 10}" font-size="12" text-anchor="end">'
        f"slope={fit.slope:.4f} r2={fit.r_squared:.4f}</text>"
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")


def _error_record(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}, sort_keys=True), file=sys.stderr)


def run_command(config_path: str, eps_override=None, tol_override=None) -> int:
    base_dir = Path(config_path).resolve().parent
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if eps_override:
            raw["eps_list"] = eps_override
        if tol_override is not None:
            raw.setdefault("solver", {})["residual_tol"] = tol_override
        config = ExperimentConfig.from_dict(raw, base_dir)
    except (OSError, json.JSONDecodeError, CliConfigError) as exc:
        _error_record("config", str(exc))
        return EXIT_CONFIG

    try:
        records, fits, profile_csv = run_experiment(config, base_dir)
    except ConvergenceError as exc:
        _error_record("no-convergence", f"{exc} (residual {exc.residual!r})")
        return EXIT_NO_CONVERGENCE
    except (CliConfigError, ConfigError, MeasureError, verify.VerifyError, ExactOTError) as exc:
        _error_record("config", str(exc))
        return EXIT_CONFIG

    config.output_dir.mkdir(parents=True, exist_ok=True)
    _write_reports(records, config.output_dir / "reports.jsonl")
    (config.output_dir / "spread.csv").write_text(profile_csv, encoding="utf-8")
    trends = trend_summary(records)
    if trends:
        with open(config.output_dir / "trends.json", "w", encoding="utf-8") as fh:
            json.dump(trends, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if fits:
        _write_rates(fits, config.output_dir)

    failed = [r for r in records if r["holds"] is False]
    if failed:
        _error_record(
            "check-failed",
            ";".join(sorted({r["bound_id"] for r in failed})),
        )
        return EXIT_CHECK_FAILED
    return EXIT_OK


def generate(spec: dict, out_dir: Path) -> list[Path]:
    """Write instance JSON files (and standalone measure files) for the
    requested families."""
    entries = spec.get("instances", "shipped")
    if entries == "shipped":
        entries = SHIPPED_INSTANCES
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for entry in entries:
        inst = build_instance(entry)
        mu_path = out_dir / f"{inst.name}.mu.json"
        save_measure(inst.mu, mu_path)
        written.append(mu_path)
        record = {
            "name": inst.name,
            "kind": "inline",
            "mu": inst.mu.to_dict(),
            "nu": "same" if inst.self_transport else inst.nu.to_dict(),
        }
        if inst.monge is not None:
            record["monge"] = inst.monge.to_dict()
        inst_path = out_dir / f"{inst.name}.instance.json"
        with open(inst_path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True)
            fh.write("\n")
        written.append(inst_path)
    return written


def gen_command(spec_path: str, out: str) -> int:
    try:
        with open(spec_path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
        generate(spec, Path(out))
    except (OSError, json.JSONDecodeError, CliConfigError, MeasureError) as exc:
        _error_record("config", str(exc))
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qotlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a sweep from a config file")
    p_run.add_argument("-c", "--config", required=True)
    p_run.add_argument("--eps", help="comma list overriding eps_list")
    p_run.add_argument("--tol", type=float, help="override solver residual_tol")

    p_gen = sub.add_parser("gen", help="generate instance files")
    p_gen.add_argument("-s", "--spec", required=True)
    p_gen.add_argument("-o", "--out", required=True)

    args = parser.parse_args(argv)
    if args.command == "run":
        eps_override = None
        if args.eps:
            try:
                eps_override = [float(tok) for tok in args.eps.split(",") if tok]
            except ValueError:
                _error_record("config", f"bad --eps list {args.eps!r}")
                return EXIT_CONFIG
        return run_command(args.config, eps_override, args.tol)
    if args.command == "gen":
        return gen_command(args.spec, args.out)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
