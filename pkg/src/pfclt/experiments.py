"""Replication harness for the asymptotic-normality experiments.

One experiment fixes a single simulated record ``z_{1:T}``, computes a
reference conditional mean once (exact for the discrete HMM, a large
particle filter otherwise), then runs ``R`` independent filters on that same
record and studies ``sqrt(m) (x_hat_T - reference)``.

Random streams are keyed by ``(seed, *key)`` through
:class:`numpy.random.SeedSequence`: key ``(0,)`` draws the dataset,
``ORACLE_KEY`` the reference filter and ``(r,)`` replication ``r``, so changing
``R`` never perturbs existing replications.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import stats
from .exact import forward_filter
from .filter import WeightCollapse, run_filter
from .models import (
    DiscreteHMMModel,
    LinearUniformModel,
    StateSpaceModel,
    StochVolModel,
    default_oracle_hmm,
    simulate_trajectory,
)

__all__ = [
    "MODELS",
    "ValidationError",
    "ExperimentDegenerate",
    "ExperimentConfig",
    "ExperimentReport",
    "ScalingRow",
    "substream",
    "build_model",
    "generate_dataset",
    "compute_oracle",
    "run_replications",
    "scaling_check",
    "write_report",
    "fmt",
]

MODELS = ("linear_uniform", "stoch_vol", "discrete_hmm")
DATA_KEY = (0,)
ORACLE_KEY = (0, 1)

_HMM = default_oracle_hmm()


class ValidationError(ValueError):
    """A configuration value violates its constraint; ``key`` names it."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ExperimentDegenerate(RuntimeError):
    """More than half of the replications collapsed."""


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "linear_uniform"
    T: int = 25
    m: int = 1000
    m_oracle: int = 100_000
    R: int = 500
    bins: int = 20
    seed: int | None = None
    out: str = "out"
    regenerate: bool = False
    m_list: tuple[int, ...] = (500, 2000)
    jobs: int = 1
    x0: tuple[float, ...] = (0.0, 0.0, 0.0)
    sv_mu: tuple[float, ...] = (0.0,)
    sv_phi: float = 0.5
    sv_dim: int = 3
    hmm_pi0: tuple[float, ...] = tuple(_HMM.pi0)
    hmm_P: tuple[tuple[float, ...], ...] = tuple(map(tuple, _HMM.P))
    hmm_B: tuple[tuple[float, ...], ...] = tuple(map(tuple, _HMM.B))
    hmm_values: tuple[float, ...] = tuple(_HMM.state_values[:, 0])

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError("model", f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        for key, low in (("T", 1), ("m", 1), ("R", 2), ("bins", 1), ("jobs", 1), ("sv_dim", 1)):
            if getattr(self, key) < low:
                raise ValidationError(key, f"must be >= {low}, got {getattr(self, key)}")
        if self.m_oracle < self.m:
            raise ValidationError("m_oracle", f"must be >= m ({self.m}), got {self.m_oracle}")
        if not self.m_list or min(self.m_list) < 1:
            raise ValidationError("m_list", "needs at least one positive particle count")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            raise ValidationError("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if len(self.sv_mu) not in (1, self.sv_dim):
            raise ValidationError("sv_mu", f"needs 1 or {self.sv_dim} entries")
        if not abs(self.sv_phi) < 1:
            raise ValidationError("sv_phi", "must satisfy |phi| < 1")

    def require_seed(self) -> int:
        if self.seed is None:
            raise ValidationError("seed", "a seed is required (never taken from the clock)")
        return self.seed


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def build_model(cfg: ExperimentConfig) -> StateSpaceModel:
    try:
        if cfg.model == "linear_uniform":
            return LinearUniformModel(x0=np.array(cfg.x0))
        if cfg.model == "stoch_vol":
            mu = np.broadcast_to(np.array(cfg.sv_mu, dtype=float), (cfg.sv_dim,))
            return StochVolModel(mu=mu.copy(), phi=cfg.sv_phi)
        return hmm_from_config(cfg)
    except ValueError as exc:
        raise ValidationError(cfg.model, str(exc)) from exc


def hmm_from_config(cfg: ExperimentConfig) -> DiscreteHMMModel:
    return DiscreteHMMModel(
        pi0=np.array(cfg.hmm_pi0),
        P=np.array(cfg.hmm_P),
        B=np.array(cfg.hmm_B),
        state_values=np.array(cfg.hmm_values),
    )


def generate_dataset(cfg: ExperimentConfig, rng: np.random.Generator | None = None, model=None):
    """One ``(states, observations)`` record of length ``T`` (stream ``(seed, 0)`` by default)."""
    model = build_model(cfg) if model is None else model
    rng = substream(cfg.require_seed(), *DATA_KEY) if rng is None else rng
    return simulate_trajectory(model, cfg.T, rng)


def compute_oracle(cfg: ExperimentConfig, observations, rng: np.random.Generator | None = None, model=None) -> np.ndarray:
    """Reference ``E[x_T | z_{1:T}]``: exact for the discrete HMM, else an ``m_oracle`` filter."""
    model = build_model(cfg) if model is None else model
    if isinstance(model, DiscreteHMMModel):
        return forward_filter(model, observations).conditional_means[-1]
    rng = substream(cfg.require_seed(), *ORACLE_KEY) if rng is None else rng
    return run_filter(model, observations, cfg.m_oracle, rng).final_estimate


@dataclass(eq=False)
class ExperimentReport:
    """Result of ``R`` replications.  Collapsed rows of ``errors`` hold NaN."""

    config: ExperimentConfig
    oracle: np.ndarray
    errors: np.ndarray
    collapsed: np.ndarray
    normality: list[stats.NormalityResult | None]
    sigma_hat: np.ndarray
    mean_error: np.ndarray
    histograms: list[tuple[np.ndarray, np.ndarray]]
    wall_clock: float = 0.0

    @property
    def n_collapsed(self) -> int:
        return int(self.collapsed.sum())

    @property
    def used(self) -> np.ndarray:
        return self.errors[~self.collapsed]

    @property
    def p_values(self) -> list[float]:
        return [np.nan if r is None else r.p_value for r in self.normality]


def _replicate(model, observations, oracle, m, seed, key, cfg):
    rng = substream(seed, *key)
    obs, ref = observations, oracle
    try:
        if cfg is not None:
            # regenerate mode: fresh record and reference per replication
            obs = simulate_trajectory(model, cfg.T, substream(seed, *key, 1))[1]
            ref = compute_oracle(cfg, obs, substream(seed, *key, 2), model=model)
        xhat = run_filter(model, obs, m, rng).final_estimate
    except WeightCollapse:
        return None
    return math.sqrt(m) * (xhat - ref)


def _replicate_batch(args):
    model, observations, oracle, m, seed, keys, cfg = args
    return [_replicate(model, observations, oracle, m, seed, k, cfg) for k in keys]


def run_replications(
    cfg: ExperimentConfig,
    observations,
    oracle,
    rep_keys: Sequence[int] | None = None,
    model: StateSpaceModel | None = None,
) -> ExperimentReport:
    """Run ``R`` independent filters and summarise ``sqrt(m)(x_hat_T - oracle)``.

    ``rep_keys`` overrides the replication stream indices (default ``1..R``).
    Collapsed replications are excluded from every statistic and counted.
    """
    start = time.perf_counter()
    seed = cfg.require_seed()
    model = build_model(cfg) if model is None else model
    keys = list(range(1, cfg.R + 1)) if rep_keys is None else list(rep_keys)
    oracle = np.asarray(oracle, dtype=float).reshape(-1)
    regen = cfg if cfg.regenerate else None
    key_tuples = [(k,) for k in keys]

    if cfg.jobs > 1 and len(keys) > 1:
        chunks = [key_tuples[i :: cfg.jobs] for i in range(cfg.jobs)]
        with ProcessPoolExecutor(cfg.jobs) as pool:
            parts = list(pool.map(_replicate_batch, [(model, observations, oracle, cfg.m, seed, c, regen) for c in chunks]))
        results = [None] * len(keys)
        for i, part in enumerate(parts):
            results[i :: cfg.jobs] = part
    else:
        results = _replicate_batch((model, observations, oracle, cfg.m, seed, key_tuples, regen))

    n = model.state_dim
    collapsed = np.array([r is None for r in results])
    errors = np.full((len(keys), n), np.nan)
    for i, r in enumerate(results):
        if r is not None:
            errors[i] = r
    if collapsed.sum() > len(keys) / 2:
        raise ExperimentDegenerate(f"{int(collapsed.sum())} of {len(keys)} replications collapsed")
    used = errors[~collapsed]

    normality = []
    for c in range(n):
        try:
            normality.append(stats.jarque_bera(used[:, c]))
        except stats.DegenerateSample:
            normality.append(None)
    return ExperimentReport(
        config=cfg,
        oracle=oracle,
        errors=errors,
        collapsed=collapsed,
        normality=normality,
        sigma_hat=stats.sample_covariance(used),
        mean_error=used.mean(axis=0),
        histograms=[stats.histogram(used[:, c], cfg.bins) for c in range(n)],
        wall_clock=time.perf_counter() - start,
    )


@dataclass(frozen=True, eq=False)
class ScalingRow:
    m: int
    sigma_hat: np.ndarray
    n_collapsed: int

    @property
    def unscaled_cov(self) -> np.ndarray:
        """Covariance of the raw errors ``x_hat_T - oracle``."""
        return self.sigma_hat / self.m


def scaling_check(cfg: ExperimentConfig, observations, oracle, m_list: Sequence[int] | None = None, model=None) -> list[ScalingRow]:
    """``Sigma_hat`` at each particle count, all on the same record and streams."""
    m_list = cfg.m_list if m_list is None else tuple(m_list)
    rows = []
    for m in m_list:
        rep = run_replications(replace(cfg, m=m, m_oracle=max(m, cfg.m_oracle)), observations, oracle, model=model)
        rows.append(ScalingRow(m=m, sigma_hat=rep.sigma_hat, n_collapsed=rep.n_collapsed))
    return rows


def fmt(v) -> str:
    """Round-trip safe text for a float (17 significant digits)."""
    return format(float(v), ".17g")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        assert len(row) == len(header)
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_config(cfg: ExperimentConfig, path: Path) -> None:
    """Echo the resolved configuration as ``key = value`` lines."""
    lines = []
    for key, val in asdict(cfg).items():
        if isinstance(val, (tuple, list)):
            if val and isinstance(val[0], (tuple, list)):
                val = "; ".join(" ".join(fmt(x) for x in row) for row in val)
            else:
                val = ",".join(fmt(x) if isinstance(x, float) else str(x) for x in val)
        lines.append(f"{key} = {val}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(report: ExperimentReport, out_dir) -> list[Path]:
    """Write ``errors.csv``, ``report.csv`` and ``hist_component_<k>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = report.errors.shape[1]
    written = []

    path = out / "errors.csv"
    _write_csv(
        path,
        ["rep"] + [f"component_{c + 1}" for c in range(n)] + ["collapsed"],
        (
            [str(i + 1)] + [fmt(v) for v in row] + [str(int(flag))]
            for i, (row, flag) in enumerate(zip(report.errors, report.collapsed))
        ),
    )
    written.append(path)

    rows = [
        ["replications", "", "", str(len(report.collapsed))],
        ["rows_used", "", "", str(len(report.used))],
        ["collapsed", "", "", str(report.n_collapsed)],
    ]
    for c in range(n):
        rows.append(["oracle", str(c + 1), "", fmt(report.oracle[c])])
        rows.append(["mean_error", str(c + 1), "", fmt(report.mean_error[c])])
        res = report.normality[c]
        for name in ("skewness", "excess_kurtosis", "jb_stat", "p_value"):
            rows.append([name, str(c + 1), "", "nan" if res is None else fmt(getattr(res, name))])
        rows.append(["reject_at_05", str(c + 1), "", "nan" if res is None else str(int(res.reject_at_05))])
    for i in range(n):
        for j in range(n):
            rows.append(["sigma_hat", str(i + 1), str(j + 1), fmt(report.sigma_hat[i, j])])
    path = out / "report.csv"
    _write_csv(path, ["metric", "component", "component_2", "value"], rows)
    written.append(path)

    for c, (edges, counts) in enumerate(report.histograms):
        path = out / f"hist_component_{c + 1}.csv"
        _write_csv(
            path,
            ["bin_left", "bin_right", "count"],
            ([fmt(edges[b]), fmt(edges[b + 1]), str(int(counts[b]))] for b in range(len(counts))),
        )
        written.append(path)
    return written
