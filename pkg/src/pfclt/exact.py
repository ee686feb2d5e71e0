"""Exact inference for :class:`~pfclt.models.DiscreteHMMModel`.

Two independent routes are provided: the forward recursion (filtering
posteriors and marginal likelihood) and brute-force enumeration of every
latent path.  The asymptotic-covariance quantities (``g*``, ``u_k``, ``Sigma``)
are evaluated by enumeration.

Expectations are taken under the proposal path law, which for the bootstrap
filter is the prior Markov chain ``Q(x_{1:T}) = pi0(x_1) prod P(x_{l-1}, x_l)``.
Under that law the step-``l`` unnormalised weight is ``alpha_l = B(x_l, z_l)``
and ``E[prod alpha_{1:k}] = p(z_{1:k})``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .filter import FilterRun, MissingHistory, particle_paths, path_log_alpha
from .models import DiscreteHMMModel

__all__ = [
    "UnknownSymbol",
    "EnumerationTooLarge",
    "ForwardResult",
    "PathEnumeration",
    "ExactDiagnostics",
    "forward_filter",
    "enumerate_paths",
    "exact_diagnostics",
    "g_star",
    "u_function",
    "exact_sigma",
    "theoretical_estimator",
    "h_factor",
    "h_over_g_star",
]

MAX_PATHS = 10**6


class UnknownSymbol(ValueError):
    """An observation is not in the emission alphabet."""


class EnumerationTooLarge(ValueError):
    """The latent path space exceeds :data:`MAX_PATHS`."""


@dataclass(frozen=True, eq=False)
class ForwardResult:
    posteriors: np.ndarray  # (T, S)
    log_marginal: np.ndarray  # (T,), log p(z_{1:k})
    conditional_means: np.ndarray  # (T, n)


def _check_symbols(hmm: DiscreteHMMModel, z) -> np.ndarray:
    z = np.asarray(z).reshape(-1)
    if z.size == 0:
        raise ValueError("empty observation sequence")
    if not np.issubdtype(z.dtype, np.integer):
        if not np.all(np.equal(np.mod(z, 1), 0)):
            raise UnknownSymbol(f"non-integer symbols in {z!r}")
        z = z.astype(np.int64)
    bad = (z < 0) | (z >= hmm.n_symbols)
    if bad.any():
        raise UnknownSymbol(
            f"symbol {int(z[bad][0])} at step {int(np.argmax(bad)) + 1} "
            f"outside alphabet 0..{hmm.n_symbols - 1}"
        )
    return z


def forward_filter(hmm: DiscreteHMMModel, z) -> ForwardResult:
    """Scaled forward recursion: predict with ``P``, update with ``B[:, z_k]``."""
    z = _check_symbols(hmm, z)
    T, S = len(z), hmm.n_states
    post = np.empty((T, S))
    log_marg = np.empty(T)
    pred = hmm.pi0
    acc = 0.0
    for k in range(T):
        joint = pred * hmm.B[:, z[k]]
        c = joint.sum()
        if c <= 0.0:
            raise ValueError(f"observation sequence has zero probability at step {k + 1}")
        acc += np.log(c)
        post[k] = joint / c
        log_marg[k] = acc
        pred = post[k] @ hmm.P
    return ForwardResult(post, log_marg, post @ hmm.state_values)


@dataclass(frozen=True, eq=False)
class PathEnumeration:
    """Every latent path of length ``k`` with its prior mass and likelihood.

    ``log_lik[:, l]`` is ``log prod_{j <= l} B(x_j, z_j)`` (cumulative).
    """

    paths: np.ndarray  # (S**k, k), lexicographic
    log_prior: np.ndarray  # (S**k,)
    log_lik: np.ndarray  # (S**k, k)

    def prefix_codes(self, j: int, n_states: int) -> np.ndarray:
        """Integer code of each path's length-``j`` prefix (0 for ``j = 0``)."""
        if j == 0:
            return np.zeros(len(self.paths), dtype=np.int64)
        radix = n_states ** np.arange(j - 1, -1, -1, dtype=np.int64)
        return self.paths[:, :j] @ radix


def enumerate_paths(hmm: DiscreteHMMModel, z, start=None) -> PathEnumeration:
    """Enumerate all state paths scored against ``z``.

    With ``start`` given, paths are continuations from that state: the first
    entry is drawn from ``P[start]`` instead of ``pi0``.
    """
    z = _check_symbols(hmm, z)
    S, k = hmm.n_states, len(z)
    if S**k > MAX_PATHS:
        raise EnumerationTooLarge(f"{S}**{k} paths exceeds the limit of {MAX_PATHS}")
    paths = np.indices((S,) * k).reshape(k, -1).T
    with np.errstate(divide="ignore"):
        logP = np.log(hmm.P)
        first = np.log(hmm.pi0) if start is None else logP[int(start)]
        log_prior = first[paths[:, 0]]
        for l in range(1, k):
            log_prior = log_prior + logP[paths[:, l - 1], paths[:, l]]
        log_lik = np.cumsum(np.log(hmm.B[paths, z[None, :]]), axis=1)
    return PathEnumeration(paths, log_prior, log_lik)


@dataclass(frozen=True, eq=False)
class ExactDiagnostics:
    """Exact reference values for one HMM and one observation record.

    ``log_Z[k-1] = log p(z_{1:k})``, ``u0`` is ``E[x_T | z_{1:T}]``.
    ``sigma`` is the asymptotic covariance of ``sqrt(m) (x_hat_T - u0)``;
    ``sigma_star`` is the same construction with an uncentred target, which
    governs ``x_hat*_T`` (see :func:`exact_sigma`).
    """

    hmm: DiscreteHMMModel
    z: np.ndarray
    log_Z: np.ndarray
    u0: np.ndarray

    @property
    def T(self) -> int:
        return len(self.z)

    @cached_property
    def sigma(self) -> np.ndarray:
        return exact_sigma(self.hmm, self.z, centered=True)

    @cached_property
    def sigma_star(self) -> np.ndarray:
        return exact_sigma(self.hmm, self.z, centered=False)


def exact_diagnostics(hmm: DiscreteHMMModel, z) -> ExactDiagnostics:
    z = _check_symbols(hmm, z)
    fw = forward_filter(hmm, z)
    return ExactDiagnostics(hmm=hmm, z=z, log_Z=fw.log_marginal, u0=fw.conditional_means[-1])


def _path_loglik(hmm, z, path) -> float:
    path = np.asarray(path, dtype=np.int64)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(hmm.B[path, z[: len(path)]])))


def g_star(diag: ExactDiagnostics, path) -> float:
    """``p(z_{1:k}) / prod_{l<=k} B(x_l, z_l)`` for ``path = x_{1:k}``; ``inf`` on zero-likelihood paths."""
    path = np.asarray(path, dtype=np.int64).reshape(-1)
    k = len(path)
    if k == 0:
        return 1.0
    if k > diag.T:
        raise ValueError(f"path length {k} exceeds T = {diag.T}")
    ll = _path_loglik(diag.hmm, diag.z, path)
    if ll == -np.inf:
        return np.inf
    return float(np.exp(diag.log_Z[k - 1] - ll))


def u_function(diag: ExactDiagnostics, path, offset=0.0) -> np.ndarray:
    """``E[(x_T - offset) L_T | x_{1:k}]`` by enumerating every continuation.

    ``L_T = prod_l B(x_l, z_l) / p(z_{1:T})``.  The empty path gives ``u_0``,
    the (offset) conditional mean.
    """
    hmm, z, T = diag.hmm, diag.z, diag.T
    path = np.asarray(path, dtype=np.int64).reshape(-1)
    k = len(path)
    if k > T:
        raise ValueError(f"path length {k} exceeds T = {T}")
    offset = np.asarray(offset, dtype=float)
    log_ZT = diag.log_Z[-1]
    head = _path_loglik(hmm, z, path) if k else 0.0
    if head == -np.inf:
        return np.zeros(hmm.state_dim)
    if k == T:
        return (hmm.state_values[path[-1]] - offset) * np.exp(head - log_ZT)
    cont = enumerate_paths(hmm, z[k:], start=path[-1] if k else None)
    log_w = cont.log_prior + cont.log_lik[:, -1] + head - log_ZT
    phi = hmm.state_values[cont.paths[:, -1]] - offset
    return np.exp(log_w) @ phi


def exact_sigma(hmm: DiscreteHMMModel, z, T: int | None = None, centered: bool = True) -> np.ndarray:
    """Asymptotic covariance by full path enumeration.

    Sums the ``2T - 1`` terms::

        odd:  E[(u_k u_k' - u_{k-1} u_{k-1}') g*_{k-1}],      k = 1..T
        even: E[(u_k g*_k - u_0)(u_k g*_k - u_0)' / g*_k],    k = 1..T-1

    with ``u_k(x_{1:k}) = E[phi(x_T) L_T | x_{1:k}]`` and expectations over the
    prior chain.  ``centered=True`` uses ``phi(x_T) = x_T - E[x_T | z_{1:T}]``,
    which is the covariance of ``sqrt(m)(x_hat_T - E[x_T | z_{1:T}])`` for the
    self-normalised filter estimate.  ``centered=False`` uses ``phi(x_T) = x_T``
    and gives the covariance of the unnormalised ``x_hat*_T`` instead.
    Zero-likelihood prefixes (``g* = inf``) contribute nothing.
    """
    z = _check_symbols(hmm, z)
    if T is not None:
        if not 1 <= T <= len(z):
            raise ValueError(f"T must be in 1..{len(z)}, got {T}")
        z = z[:T]
    T, S, n = len(z), hmm.n_states, hmm.state_dim
    en = enumerate_paths(hmm, z)
    log_Z = np.array([logsumexp(en.log_prior + en.log_lik[:, k]) for k in range(T)])

    Q = np.exp(en.log_prior)
    post = np.exp(en.log_prior + en.log_lik[:, -1] - log_Z[-1])
    xT = hmm.state_values[en.paths[:, -1]]
    u0 = post @ xT
    phi = xT - u0 if centered else xT
    target = post @ phi

    def prefix_u(j):
        codes = en.prefix_codes(j, S)
        Qj = np.bincount(codes, weights=Q, minlength=S**j)
        num = np.stack([np.bincount(codes, weights=post * phi[:, c], minlength=S**j) for c in range(n)], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(Qj[:, None] > 0, num / np.where(Qj > 0, Qj, 1.0)[:, None], 0.0)
        return u[codes]  # (N, n) per full path

    def log_g(j):
        # log g*_j along every full path; +inf marks zero likelihood
        if j == 0:
            return np.zeros(len(Q))
        return log_Z[j - 1] - en.log_lik[:, j - 1]

    sigma = np.zeros((n, n))
    u_prev = prefix_u(0)
    for k in range(1, T + 1):
        u_k = prefix_u(k)
        lg_prev = log_g(k - 1)
        live = Q > 0
        live &= np.isfinite(lg_prev)
        outer = np.einsum("ni,nj->nij", u_k, u_k) - np.einsum("ni,nj->nij", u_prev, u_prev)
        sigma += np.einsum("n,nij->ij", Q[live] * np.exp(lg_prev[live]), outer[live])
        if k < T:
            lg = log_g(k)
            live = (Q > 0) & np.isfinite(lg)
            g = np.exp(lg[live])
            d = u_k[live] * g[:, None] - target
            sigma += np.einsum("n,ni,nj->ij", Q[live] / g, d, d)
        u_prev = u_k
    return 0.5 * (sigma + sigma.T)


def _check_run(run: FilterRun, diag: ExactDiagnostics):
    if not run.retained:
        raise MissingHistory("run was not started with retain=True")
    if run.T > diag.T:
        raise ValueError(f"run has {run.T} steps but diagnostics cover only {diag.T}")


def theoretical_estimator(run: FilterRun, diag: ExactDiagnostics) -> tuple[np.ndarray, float]:
    """Return ``(x_hat*_T, ratio)`` for a retained run.

    ``x_hat*_T = m^-1 sum_i L_T(x~^i_{1:T}) x~^i_T H^i_{T-1}`` is assembled from
    the reconstructed particle paths, and
    ``ratio = prod alpha_bar / p(z_{1:T})`` so that ``x_hat_T = x_hat*_T / ratio``.
    """
    _check_run(run, diag)
    T = run.T
    paths = particle_paths(run, T)
    la = path_log_alpha(run, paths)  # (m, T)
    log_L = la.sum(axis=1) - diag.log_Z[T - 1]
    log_H = np.sum(run.log_alpha_bars[: T - 1]) - la[:, : T - 1].sum(axis=1)
    vals = diag.hmm.values(run.clouds[T - 1].particles)
    with np.errstate(invalid="ignore"):
        factor = np.exp(log_L + log_H)
    # zero-likelihood particles: log_L = -inf and log_H may be +inf; their term is 0
    factor = np.where(np.isfinite(la).all(axis=1), factor, 0.0)
    x_star = factor @ vals / run.m
    ratio = float(np.exp(run.log_alpha_bar_product - diag.log_Z[T - 1]))
    return x_star, ratio


def h_factor(run: FilterRun, i: int, k: int) -> float:
    """``H^i_k = alpha_bar_1..alpha_bar_k / prod_l alpha_l(x^i_{1:l})`` for resampled particle ``i``."""
    if k == 0:
        return 1.0
    if not run.retained:
        raise MissingHistory("run was not started with retain=True")
    path = particle_paths(run, k, resampled=True)[i : i + 1]
    la = path_log_alpha(run, path)[0]
    return float(np.exp(np.sum(run.log_alpha_bars[:k]) - la.sum()))


def h_over_g_star(run: FilterRun, i: int, k: int, diag: ExactDiagnostics) -> float:
    """``H^i_k / g*_k(x^i_{1:k})``; tends to 1 in probability as ``m`` grows."""
    if k == 0:
        return 1.0
    _check_run(run, diag)
    idx = particle_paths(run, k, resampled=True)[i]
    states = [run.clouds[l].particles[idx[l]] for l in range(k)]
    return h_factor(run, i, k) / g_star(diag, states)
