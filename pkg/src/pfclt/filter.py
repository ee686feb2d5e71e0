"""Bootstrap particle filter with multinomial resampling at every step.

One step of :func:`run_filter` is ``propagate -> weigh -> estimate ->
multinomial_resample``.  With the transition density as proposal and weights
reset to ``1/m`` after each resampling, the unnormalised weight of particle
``i`` at step ``k`` is just the observation likelihood ``p(z_k | x_k^i)``.

Weights are kept as logs.  Indices (ancestors, lineage) are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from .models import StateSpaceModel

__all__ = [
    "WeightCollapse",
    "MissingHistory",
    "ParticleCloud",
    "ResampleRecord",
    "FilterRun",
    "initialize",
    "propagate",
    "weigh",
    "estimate",
    "resample_indices",
    "multinomial_resample",
    "run_filter",
    "particle_paths",
]

Phase = Literal["predicted", "weighted", "resampled"]


class WeightCollapse(RuntimeError):
    """Every particle has zero likelihood for the current observation."""

    def __init__(self, step: int):
        super().__init__(f"all particle weights are zero at step {step}")
        self.step = step


class MissingHistory(RuntimeError):
    """A path-level diagnostic was requested from a run without retained clouds."""


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """The ``m`` particles of one filtering step.

    ``ancestors[i]`` is the ancestry origin of particle ``i``: the index of the
    step-1 particle its path starts from.  ``log_alpha`` and ``log_alpha_bar``
    are set once the cloud has been weighted.
    """

    step: int
    particles: np.ndarray
    weights: np.ndarray
    ancestors: np.ndarray
    phase: Phase
    log_alpha: np.ndarray | None = None
    log_alpha_bar: float | None = None

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def alpha_bar(self) -> float | None:
        return None if self.log_alpha_bar is None else float(np.exp(self.log_alpha_bar))


@dataclass(frozen=True, eq=False)
class ResampleRecord:
    """Offspring counts ``#^i`` and the chosen parent index of every new slot."""

    counts: np.ndarray
    indices: np.ndarray


@dataclass(eq=False)
class FilterRun:
    """Everything a filter run leaves behind.

    ``lineage[k-1][j]`` is the pre-resampling index at step ``k`` that became
    resampled slot ``j``; together with ``clouds`` (the weighted cloud of each
    step) it reconstructs every particle path.  Both are only kept when the run
    was started with ``retain=True``.
    """

    estimates: np.ndarray
    log_alpha_bars: np.ndarray
    resample_counts: np.ndarray
    m: int
    clouds: list[ParticleCloud] | None = None
    lineage: list[np.ndarray] | None = None
    seed: object = None

    @property
    def T(self) -> int:
        return len(self.log_alpha_bars)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.exp(self.log_alpha_bars)

    @property
    def log_alpha_bar_product(self) -> float:
        return float(np.sum(self.log_alpha_bars))

    @property
    def final_estimate(self) -> np.ndarray:
        return self.estimates[-1]

    @property
    def retained(self) -> bool:
        return self.clouds is not None


def initialize(model: StateSpaceModel, m: int, rng: np.random.Generator) -> ParticleCloud:
    """Draw ``m`` particles from the law of ``x_1``; uniform weights, ``A_0^i = i``."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return ParticleCloud(
        step=1,
        particles=model.sample_initial(m, rng),
        weights=np.full(m, 1.0 / m),
        ancestors=np.arange(m),
        phase="predicted",
    )


def propagate(cloud: ParticleCloud, model: StateSpaceModel, rng: np.random.Generator) -> ParticleCloud:
    if cloud.phase != "resampled":
        raise ValueError(f"propagate needs a resampled cloud, got phase {cloud.phase!r}")
    return ParticleCloud(
        step=cloud.step + 1,
        particles=model.sample_transition(cloud.particles, rng),
        weights=cloud.weights,
        ancestors=cloud.ancestors,
        phase="predicted",
    )


def weigh(cloud: ParticleCloud, model: StateSpaceModel, z) -> ParticleCloud:
    """Attach ``alpha^i = p(z | x^i)``, the normalised weights and ``alpha_bar``.

    Raises
    ------
    WeightCollapse
        If every particle has zero likelihood.
    """
    if cloud.phase != "predicted":
        raise ValueError(f"weigh needs a predicted cloud, got phase {cloud.phase!r}")
    log_alpha = np.asarray(model.observation_logdensity(cloud.particles, z), dtype=float)
    return _weighted(cloud, log_alpha)


def _weighted(cloud, log_alpha):
    total = logsumexp(log_alpha)
    if not np.isfinite(total):
        raise WeightCollapse(cloud.step)
    return replace(
        cloud,
        weights=np.exp(log_alpha - total),
        log_alpha=log_alpha,
        log_alpha_bar=float(total - np.log(len(log_alpha))),
        phase="weighted",
    )


def estimate(cloud: ParticleCloud, model: StateSpaceModel | None = None) -> np.ndarray:
    """Weighted mean of the particles (mapped through ``model.values`` if given)."""
    if cloud.phase != "weighted":
        raise ValueError(f"estimate needs a weighted cloud, got phase {cloud.phase!r}")
    x = cloud.particles if model is None else model.values(cloud.particles)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return cloud.weights @ x


def resample_indices(weights: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``size`` i.i.d. indices with probabilities ``weights``.

    Inverse-CDF sampling against sorted uniforms.  The sorted uniforms are built
    from normalised exponential spacings, which gives the order statistics of
    ``size`` i.i.d. U(0, 1) draws in O(size), so the returned indices come out
    in non-decreasing order.
    """
    w = np.asarray(weights, dtype=float)
    n = len(w) if size is None else int(size)
    spacings = rng.standard_exponential(n + 1)
    cum = np.cumsum(spacings)
    cdf = np.cumsum(w)
    u = cum[:-1] * (cdf[-1] / cum[-1])
    idx = np.searchsorted(cdf, u, side="right")
    # rounding at the top end must not land on a zero-weight tail particle
    return np.minimum(idx, np.flatnonzero(w)[-1])


def multinomial_resample(cloud: ParticleCloud, rng: np.random.Generator) -> tuple[ParticleCloud, ResampleRecord]:
    if cloud.phase != "weighted":
        raise ValueError(f"resampling needs a weighted cloud, got phase {cloud.phase!r}")
    m = cloud.m
    idx = resample_indices(cloud.weights, rng)
    new = ParticleCloud(
        step=cloud.step,
        particles=cloud.particles[idx],
        weights=np.full(m, 1.0 / m),
        ancestors=cloud.ancestors[idx],
        phase="resampled",
    )
    return new, ResampleRecord(counts=np.bincount(idx, minlength=m), indices=idx)


def run_filter(
    model: StateSpaceModel,
    observations,
    m: int,
    rng: np.random.Generator,
    retain: bool = False,
) -> FilterRun:
    """Filter ``observations`` (one entry per step) with ``m`` particles.

    Raises :class:`WeightCollapse` carrying the failing step index.
    """
    T = len(observations)
    if T < 1:
        raise ValueError("need at least one observation")
    estimates = np.empty((T, model.state_dim))
    log_alpha_bars = np.empty(T)
    counts = np.empty((T, m), dtype=np.int64)
    clouds = [] if retain else None
    lineage = [] if retain else None

    cloud = initialize(model, m, rng)
    for k in range(T):
        if k > 0:
            cloud = propagate(cloud, model, rng)
        cloud = weigh(cloud, model, observations[k])
        estimates[k] = estimate(cloud, model)
        log_alpha_bars[k] = cloud.log_alpha_bar
        if retain:
            clouds.append(cloud)
        cloud, record = multinomial_resample(cloud, rng)
        counts[k] = record.counts
        if retain:
            lineage.append(record.indices)

    return FilterRun(
        estimates=estimates,
        log_alpha_bars=log_alpha_bars,
        resample_counts=counts,
        m=m,
        clouds=clouds,
        lineage=lineage,
        seed=getattr(rng.bit_generator, "seed_seq", None),
    )


def particle_paths(run: FilterRun, k: int, resampled: bool = False) -> np.ndarray:
    """Per-step indices of every particle path up to step ``k``.

    Row ``i`` of the ``(m, k)`` result lists, for steps ``1..k``, the index in
    that step's weighted cloud visited by path ``i``.  With ``resampled=False``
    the paths are the pre-resampling ones ``x~^i_{1:k}``; otherwise the
    post-resampling ones ``x^i_{1:k}``.
    """
    if not run.retained:
        raise MissingHistory("run was not started with retain=True")
    if not 1 <= k <= run.T:
        raise ValueError(f"k must be in 1..{run.T}, got {k}")
    out = np.empty((run.m, k), dtype=np.int64)
    cur = np.arange(run.m)
    if resampled:
        cur = run.lineage[k - 1][cur]
    out[:, k - 1] = cur
    for step in range(k - 1, 0, -1):
        # slot j of the resampled cloud at `step` is the parent of particle j at step + 1
        cur = run.lineage[step - 1][cur]
        out[:, step - 1] = cur
    return out


def path_log_alpha(run: FilterRun, paths: np.ndarray) -> np.ndarray:
    """``log alpha_l`` along each path, shape ``(m, k)``."""
    k = paths.shape[1]
    return np.stack([run.clouds[l].log_alpha[paths[:, l]] for l in range(k)], axis=1)
