"""Command-line front end.

Configuration is a flat ``key = value`` file (``#`` starts a comment);
command-line flags override file values.  Every failure ends with a single
JSON line on stderr and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import exact
from .experiments import (
    ExperimentConfig,
    ValidationError,
    build_model,
    compute_oracle,
    fmt,
    generate_dataset,
    hmm_from_config,
    run_replications,
    scaling_check,
    substream,
    write_config,
    write_report,
    _write_csv,
)
from .filter import run_filter

__all__ = ["ParseError", "RunManifest", "parse_config", "dispatch", "main"]

SUBCOMMANDS = ("simulate", "filter", "experiment", "oracle-check", "sigma-check", "scaling")


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _matrix(text: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must fit in 64 unsigned bits")
    return v


PARSERS = {
    "model": str.strip,
    "T": int,
    "m": int,
    "m_oracle": int,
    "R": int,
    "bins": int,
    "jobs": int,
    "seed": _seed,
    "out": str.strip,
    "regenerate": _bool,
    "m_list": _ints,
    "x0": _floats,
    "sv_mu": _floats,
    "sv_phi": float,
    "sv_dim": int,
    "hmm_pi0": _floats,
    "hmm_P": _matrix,
    "hmm_B": _matrix,
    "hmm_values": _floats,
}
assert set(PARSERS) == {f.name for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    if key not in PARSERS:
        raise ValidationError(key, "unknown configuration key")
    try:
        return PARSERS[key](raw)
    except ValueError as exc:
        raise ValidationError(key, f"cannot parse {raw!r}: {exc}") from None


def parse_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a ``key = value`` file, apply ``overrides`` (which win) and validate."""
    values: dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(lineno, f"expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ParseError(lineno, "empty key")
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = _convert(key, str(raw))
    return ExperimentConfig(**values)


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    out_dir: Path | None = None

    def resolve(self) -> ExperimentConfig:
        cfg = parse_config(self.config_path, self.overrides)
        self.out_dir = Path(cfg.out)
        return cfg


FLAG_KEYS = {
    "seed": "seed",
    "model": "model",
    "particles": "m",
    "oracle_particles": "m_oracle",
    "reps": "R",
    "horizon": "T",
    "out": "out",
    "bins": "bins",
    "m_list": "m_list",
    "jobs": "jobs",
    "regenerate": "regenerate",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", metavar="U64")
    common.add_argument("--model", choices=["linear_uniform", "stoch_vol", "discrete_hmm"])
    common.add_argument("--particles", metavar="M")
    common.add_argument("--oracle-particles", metavar="M")
    common.add_argument("--reps", metavar="R")
    common.add_argument("--horizon", metavar="T")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--jobs", metavar="N", help="worker processes for replications")

    parser = argparse.ArgumentParser(prog="pfclt", description="Particle filter asymptotic-normality toolkit.")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    sub.add_parser("simulate", parents=[common], help="write one simulated dataset (dataset.csv)")
    sub.add_parser("filter", parents=[common], help="run one filter on a simulated dataset (estimates.csv)")
    p = sub.add_parser("experiment", parents=[common], help="full replication experiment")
    p.add_argument("--bins", metavar="N")
    p.add_argument("--regenerate", action="store_const", const="true", help="fresh dataset and reference per replication")
    sub.add_parser("oracle-check", parents=[common], help="discrete HMM: filter vs exact mean, estimator identity")
    sub.add_parser("sigma-check", parents=[common], help="discrete HMM: exact covariance vs replications")
    p = sub.add_parser("scaling", parents=[common], help="Sigma_hat across particle counts")
    p.add_argument("--m-list", metavar="M1,M2,...")
    return parser


def _emit_error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def _simulate(cfg, out: Path) -> list[Path]:
    model = build_model(cfg)
    states, obs = generate_dataset(cfg, model=model)
    vals = model.values(states)
    obs2 = np.asarray(obs).reshape(len(obs), -1)
    header = ["k"] + [f"x_{i + 1}" for i in range(vals.shape[1])] + [f"z_{i + 1}" for i in range(obs2.shape[1])]
    if cfg.model == "discrete_hmm":
        header.insert(1, "state")
    rows = []
    for k in range(cfg.T):
        row = [str(k + 1)]
        if cfg.model == "discrete_hmm":
            row.append(str(int(states[k])))
            row += [fmt(v) for v in vals[k]] + [str(int(v)) for v in obs2[k]]
        else:
            row += [fmt(v) for v in vals[k]] + [fmt(v) for v in obs2[k]]
        rows.append(row)
    path = out / "dataset.csv"
    _write_csv(path, header, rows)
    return [path]


def _filter(cfg, out: Path) -> list[Path]:
    model = build_model(cfg)
    states, obs = generate_dataset(cfg, model=model)
    run = run_filter(model, obs, cfg.m, substream(cfg.require_seed(), 1))
    truth = model.values(states)
    n = model.state_dim
    header = ["k"] + [f"xhat_{i + 1}" for i in range(n)] + [f"x_{i + 1}" for i in range(n)] + ["log_alpha_bar"]
    rows = (
        [str(k + 1)] + [fmt(v) for v in run.estimates[k]] + [fmt(v) for v in truth[k]] + [fmt(run.log_alpha_bars[k])]
        for k in range(run.T)
    )
    path = out / "estimates.csv"
    _write_csv(path, header, rows)
    return [path]


def _experiment(cfg, out: Path) -> list[Path]:
    model = build_model(cfg)
    _, obs = generate_dataset(cfg, model=model)
    oracle = compute_oracle(cfg, obs, model=model)
    report = run_replications(cfg, obs, oracle, model=model)
    paths = write_report(report, out)
    for c, res in enumerate(report.normality):
        if res is not None:
            print(f"component {c + 1}: JB = {res.jb_stat:.4f}  p = {res.p_value:.4f}  reject@0.05 = {res.reject_at_05}")
    print(f"collapsed replications: {report.n_collapsed}; wall clock {report.wall_clock:.1f}s", file=sys.stderr)
    return paths


def _oracle_check(cfg, out: Path) -> list[Path]:
    hmm = hmm_from_config(cfg)
    seed = cfg.require_seed()
    _, obs = generate_dataset(cfg, model=hmm)
    diag = exact.exact_diagnostics(hmm, obs)
    rows, worst = [], 0.0
    sq = np.zeros(hmm.state_dim)
    for r in range(1, cfg.R + 1):
        run = run_filter(hmm, obs, cfg.m, substream(seed, r), retain=True)
        x_star, ratio = exact.theoretical_estimator(run, diag)
        xhat = run.final_estimate
        lhs = xhat * np.exp(run.log_alpha_bar_product)
        rhs = np.exp(diag.log_Z[-1]) * x_star
        scale = np.maximum(np.abs(lhs), np.abs(rhs))
        dev = np.where(scale > 0, np.abs(lhs - rhs) / np.where(scale > 0, scale, 1.0), 0.0)
        worst = max(worst, float(dev.max()))
        sq += (xhat - diag.u0) ** 2
        rows.append([str(r)] + [fmt(v) for v in xhat] + [fmt(v) for v in x_star] + [fmt(ratio), fmt(dev.max())])
    n = hmm.state_dim
    header = ["rep"] + [f"xhat_{i + 1}" for i in range(n)] + [f"xstar_{i + 1}" for i in range(n)] + ["ratio", "identity_rel_dev"]
    path = out / "oracle_check.csv"
    _write_csv(path, header, rows)
    rmse = np.sqrt(sq / cfg.R)
    print(f"exact conditional mean: {' '.join(fmt(v) for v in diag.u0)}")
    print(f"filter RMSE over {cfg.R} runs (m={cfg.m}): {' '.join(fmt(v) for v in rmse)}")
    print(f"max relative identity violation: {worst:.3e}")
    return [path]


def _sigma_check(cfg, out: Path) -> list[Path]:
    hmm = hmm_from_config(cfg)
    _, obs = generate_dataset(cfg, model=hmm)
    diag = exact.exact_diagnostics(hmm, obs)
    sigma = diag.sigma
    sigma_star = diag.sigma_star
    report = run_replications(replace(cfg, model="discrete_hmm"), obs, diag.u0, model=hmm)
    n = hmm.state_dim
    rows = []
    for i in range(n):
        for j in range(n):
            ex, emp = sigma[i, j], report.sigma_hat[i, j]
            rel = abs(emp - ex) / abs(ex) if ex != 0 else float("nan")
            rows.append([str(i + 1), str(j + 1), fmt(ex), fmt(sigma_star[i, j]), fmt(emp), fmt(rel)])
    path = out / "sigma_check.csv"
    _write_csv(path, ["i", "j", "sigma_exact", "sigma_star_exact", "sigma_hat", "rel_diff"], rows)
    for row in rows:
        print(f"Sigma[{row[0]},{row[1]}]: exact {row[2]}  empirical {row[4]}  relative difference {row[5]}")
    return [path]


def _scaling(cfg, out: Path) -> list[Path]:
    model = build_model(cfg)
    _, obs = generate_dataset(cfg, model=model)
    oracle = compute_oracle(cfg, obs, model=model)
    table = scaling_check(cfg, obs, oracle, model=model)
    rows = []
    for row in table:
        n = row.sigma_hat.shape[0]
        for i in range(n):
            for j in range(n):
                rows.append([str(row.m), str(i + 1), str(j + 1), fmt(row.sigma_hat[i, j]), fmt(row.unscaled_cov[i, j]), str(row.n_collapsed)])
    path = out / "scaling.csv"
    _write_csv(path, ["m", "i", "j", "sigma_hat", "unscaled_cov", "collapsed"], rows)
    return [path]


HANDLERS = {
    "simulate": _simulate,
    "filter": _filter,
    "experiment": _experiment,
    "oracle-check": _oracle_check,
    "sigma-check": _sigma_check,
    "scaling": _scaling,
}


def dispatch(manifest: RunManifest) -> int:
    """Run one subcommand; 0 iff every requested output was written."""
    try:
        if manifest.subcommand not in HANDLERS:
            raise ValueError(f"unknown subcommand {manifest.subcommand!r}")
        cfg = manifest.resolve()
        cfg.require_seed()
        manifest.out_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, manifest.out_dir / "config_resolved.txt")
        HANDLERS[manifest.subcommand](cfg, manifest.out_dir)
    except ValidationError as exc:
        _emit_error("ValidationError", str(exc), key=exc.key)
        return 2
    except ParseError as exc:
        _emit_error("ParseError", str(exc), line=exc.line)
        return 2
    except Exception as exc:  # surfaced with its type for machine consumption
        _emit_error(type(exc).__name__, str(exc), subcommand=manifest.subcommand)
        return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        parser.print_usage(sys.stderr)
        _emit_error("UsageError", f"unknown subcommand {argv[0]!r}" if argv else "missing subcommand")
        return 2
    args = parser.parse_args(argv)
    overrides = {}
    for attr, key in FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    manifest = RunManifest(subcommand=args.subcommand, config_path=args.config, overrides=overrides)
    return dispatch(manifest)


if __name__ == "__main__":
    sys.exit(main())
