"""State-space models used by the filter and the experiments.

Every model works on batches: particle arrays carry the particle axis first,
so a single state is just a batch of one.  Continuous models store states as
``(..., state_dim)`` float arrays; the discrete HMM stores integer state
labels and maps them to real values through :meth:`DiscreteHMMModel.values`.

The "initial law" of every model is the law of ``x_1``, the first hidden
state paired with the first observation.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelError",
    "StateSpaceModel",
    "LinearUniformModel",
    "StochVolModel",
    "DiscreteHMMModel",
    "default_oracle_hmm",
    "simulate_trajectory",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class ModelError(ValueError):
    """Raised when a model is constructed with inconsistent parameters."""


class StateSpaceModel(ABC):
    """Hidden Markov state-space model with vectorised samplers/densities."""

    state_dim: int
    obs_dim: int
    #: True only when every hidden quantity can be enumerated exactly.
    exact_support: bool = False

    @abstractmethod
    def sample_initial(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``size`` independent copies of ``x_1``."""

    @abstractmethod
    def sample_transition(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw ``x_{k+1} ~ p(. | x_k)`` independently for each state in ``x``."""

    @abstractmethod
    def sample_observation(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw ``z_k ~ p(. | x_k)`` for each state in ``x``."""

    @abstractmethod
    def observation_logdensity(self, x: np.ndarray, z) -> np.ndarray:
        """Natural-log density of ``z`` given each state; ``-inf`` for zero density."""

    def transition_logdensity(self, x_next: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no transition density")

    def values(self, x: np.ndarray) -> np.ndarray:
        """Real-valued state vectors for ``x``, shape ``(..., state_dim)``."""
        return np.asarray(x, dtype=float)


def _uniform_noise(rng, shape, zero):
    if zero:
        return np.zeros(shape)
    return rng.uniform(-1.0, 1.0, size=shape)


@dataclass(frozen=True, eq=False)
class LinearUniformModel(StateSpaceModel):
    """Linear dynamics and measurements with U[-1, 1] noise on every component.

    ``x_1 = A x0 + w_0`` with ``x0`` deterministic (zeros by default).
    ``zero_noise`` switches every sampler to its noiseless mean; densities are
    unaffected.  It exists for deterministic unit tests only.
    """

    A: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        )
    )
    C: np.ndarray = field(default_factory=lambda: np.full((2, 3), 0.5))
    x0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    zero_noise: bool = False

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        C = np.asarray(self.C, dtype=float)
        x0 = np.asarray(self.x0, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got shape {A.shape}")
        if C.ndim != 2 or C.shape[1] != A.shape[0]:
            raise ModelError(f"C must have {A.shape[0]} columns, got shape {C.shape}")
        if x0.shape != (A.shape[0],):
            raise ModelError(f"x0 must have shape ({A.shape[0]},), got {x0.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "x0", x0)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    def sample_initial(self, size, rng):
        mean = np.broadcast_to(self.A @ self.x0, (size, self.state_dim))
        return mean + _uniform_noise(rng, mean.shape, self.zero_noise)

    def sample_transition(self, x, rng):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + _uniform_noise(rng, x.shape, self.zero_noise)

    def sample_observation(self, x, rng):
        mean = np.asarray(x, dtype=float) @ self.C.T
        return mean + _uniform_noise(rng, mean.shape, self.zero_noise)

    def observation_logdensity(self, x, z):
        resid = np.asarray(z, dtype=float) - np.asarray(x, dtype=float) @ self.C.T
        inside = np.all(np.abs(resid) <= 1.0, axis=-1)
        return np.where(inside, self.obs_dim * np.log(0.5), -np.inf)

    def transition_logdensity(self, x_next, x):
        resid = np.asarray(x_next, dtype=float) - np.asarray(x, dtype=float) @ self.A.T
        inside = np.all(np.abs(resid) <= 1.0, axis=-1)
        return np.where(inside, self.state_dim * np.log(0.5), -np.inf)


@dataclass(frozen=True, eq=False)
class StochVolModel(StateSpaceModel):
    """Multivariate stochastic volatility model.

    ``x_{k+1} = mu + phi (x_k - mu) + w_k`` and ``z_k = diag(exp(x_k / 2)) v_k``
    with standard normal ``w_k``, ``v_k``.  ``x_1`` is drawn from the stationary
    law ``N(mu, I / (1 - phi^2))``.
    """

    mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    phi: float = 0.5
    zero_noise: bool = False

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if mu.ndim != 1:
            raise ModelError("mu must be a vector")
        if not abs(self.phi) < 1.0:
            raise ModelError(f"|phi| must be < 1 for a stationary law, got {self.phi}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "phi", float(self.phi))

    @classmethod
    def of_dim(cls, p: int = 3, phi: float = 0.5, mu: float = 0.0, **kw) -> StochVolModel:
        return cls(mu=np.full(p, float(mu)), phi=phi, **kw)

    @property
    def state_dim(self) -> int:
        return self.mu.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.mu.shape[0]

    @property
    def stationary_sd(self) -> float:
        return 1.0 / np.sqrt(1.0 - self.phi**2)

    def _normal(self, rng, shape):
        if self.zero_noise:
            return np.zeros(shape)
        return rng.standard_normal(shape)

    def sample_initial(self, size, rng):
        shape = (size, self.state_dim)
        return self.mu + self.stationary_sd * self._normal(rng, shape)

    def sample_transition(self, x, rng):
        x = np.asarray(x, dtype=float)
        return self.mu + self.phi * (x - self.mu) + self._normal(rng, x.shape)

    def sample_observation(self, x, rng):
        x = np.asarray(x, dtype=float)
        return np.exp(0.5 * x) * self._normal(rng, x.shape)

    def observation_logdensity(self, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        return -0.5 * np.sum(LOG_2PI + x + z**2 * np.exp(-x), axis=-1)

    def transition_logdensity(self, x_next, x):
        resid = np.asarray(x_next, dtype=float) - self.mu - self.phi * (np.asarray(x) - self.mu)
        return -0.5 * np.sum(LOG_2PI + resid**2, axis=-1)


def _check_stochastic(name, arr, ndim):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != ndim:
        raise ModelError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-12):
        raise ModelError(f"{name} rows must sum to 1")
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteHMMModel(StateSpaceModel):
    """Finite-state HMM with a finite observation alphabet.

    Parameters
    ----------
    pi0 : (S,) array
        Law of the first hidden state.
    P : (S, S) array
        Transition matrix, ``P[i, j] = p(x_{k+1} = j | x_k = i)``.
    B : (S, V) array
        Emission matrix over symbols ``0 .. V-1``.
    state_values : (S,) or (S, n) array
        Real value attached to each state label; defaults to ``0 .. S-1``.
    """

    pi0: np.ndarray
    P: np.ndarray
    B: np.ndarray
    state_values: np.ndarray | None = None
    exact_support = True

    def __post_init__(self):
        pi0 = _check_stochastic("pi0", self.pi0, 1)
        P = _check_stochastic("P", self.P, 2)
        B = _check_stochastic("B", self.B, 2)
        S = pi0.shape[0]
        if P.shape != (S, S):
            raise ModelError(f"P must be {S}x{S}, got {P.shape}")
        if B.shape[0] != S:
            raise ModelError(f"B must have {S} rows, got {B.shape[0]}")
        vals = np.arange(S, dtype=float) if self.state_values is None else self.state_values
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != S or vals.ndim != 2:
            raise ModelError(f"state_values must have {S} rows, got shape {vals.shape}")
        for name, arr in (("pi0", pi0), ("P", P), ("B", B), ("state_values", vals)):
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_cumP", np.cumsum(P, axis=1))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_logB", np.log(B))

    @property
    def n_states(self) -> int:
        return self.pi0.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.B.shape[1]

    @property
    def state_dim(self) -> int:
        return self.state_values.shape[1]

    @property
    def obs_dim(self) -> int:
        return 1

    def values(self, x):
        return self.state_values[np.asarray(x, dtype=int)]

    @staticmethod
    def _categorical(cdf, rng, size):
        # cdf rows may end at 1 - eps; clip keeps the draw in range
        u = rng.random(size)
        idx = (u[..., None] >= cdf).sum(axis=-1)
        return np.minimum(idx, cdf.shape[-1] - 1)

    def sample_initial(self, size, rng):
        return self._categorical(np.cumsum(self.pi0), rng, size)

    def sample_transition(self, x, rng):
        x = np.asarray(x, dtype=int)
        return self._categorical(self._cumP[x], rng, x.shape)

    def sample_observation(self, x, rng):
        x = np.asarray(x, dtype=int)
        return self._categorical(np.cumsum(self.B, axis=1)[x], rng, x.shape)

    def observation_logdensity(self, x, z):
        return self._logB[np.asarray(x, dtype=int), int(np.asarray(z).reshape(-1)[0])]

    def transition_logdensity(self, x_next, x):
        p = self.P[np.asarray(x, dtype=int), np.asarray(x_next, dtype=int)]
        with np.errstate(divide="ignore"):
            return np.log(p)


def default_oracle_hmm() -> DiscreteHMMModel:
    """The two-state HMM used by the exact-inference checks (values 0 and 1)."""
    return DiscreteHMMModel(
        pi0=np.array([0.5, 0.5]),
        P=np.array([[0.9, 0.1], [0.2, 0.8]]),
        B=np.array([[0.7, 0.3], [0.4, 0.6]]),
        state_values=np.array([0.0, 1.0]),
    )


def simulate_trajectory(model: StateSpaceModel, T: int, rng: np.random.Generator):
    """Draw ``(states, observations)`` of length ``T`` from the joint law.

    Continuous models return float arrays of shape ``(T, state_dim)`` and
    ``(T, obs_dim)``; the discrete HMM returns integer label and symbol
    arrays of shape ``(T,)``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x = model.sample_initial(1, rng)
    states, obs = [], []
    for k in range(T):
        if k > 0:
            x = model.sample_transition(x, rng)
        states.append(x[0])
        obs.append(model.sample_observation(x, rng)[0])
    return np.stack(states), np.stack(obs)
