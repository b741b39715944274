"""Sparse channel recovery from stacked beam-training measurements.

Two estimators share the flat support indexing ``aod * M_m + aoa``:

* :func:`omp_estimate` -- plain orthogonal matching pursuit;
* :func:`greedy_map_estimate` -- greedy MAP recovery that scores each
  candidate support with a per-path prior carried over from earlier
  training periods, and returns the refreshed per-path posteriors
  propagated through the angle transition model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .array_channel import split_index
from .training_protocol import as_operator

log = logging.getLogger(__name__)

JITTER = 1e-12
LAST_TERM_MODES = ("verbatim", "log")


@dataclass(frozen=True)
class ChannelEstimate:
    support: tuple[int, ...]
    gains: np.ndarray
    M_b: int
    M_m: int
    ill_conditioned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(int(s) for s in self.support))
        gains = np.asarray(self.gains, dtype=complex)
        object.__setattr__(self, "gains", gains)
        if len(self.support) != len(gains):
            raise ValueError("support and gains differ in length")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support indices must be distinct")
        if any(not 0 <= s < self.M_b * self.M_m for s in self.support):
            raise ValueError("support index out of range")

    @property
    def aod_bins(self) -> np.ndarray:
        return split_index(np.array(self.support, dtype=int), self.M_m)[0]

    @property
    def aoa_bins(self) -> np.ndarray:
        return split_index(np.array(self.support, dtype=int), self.M_m)[1]

    def virtual(self) -> np.ndarray:
        h = np.zeros(self.M_b * self.M_m, dtype=complex)
        h[list(self.support)] = self.gains
        return h.reshape(self.M_m, self.M_b, order="F")


def estimate_to_dense(est: ChannelEstimate, A_b: np.ndarray, A_m: np.ndarray) -> np.ndarray:
    """N_m x N_b reconstruction A_m H_v A_b^H."""
    if not est.support:
        return np.zeros((A_m.shape[0], A_b.shape[0]), dtype=complex)
    # only the L active atoms matter
    a_m = A_m[:, est.aoa_bins]
    a_b = A_b[:, est.aod_bins]
    return (a_m * est.gains) @ a_b.conj().T


def _solve_normal(G: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    flagged = np.linalg.cond(G) > 1e12
    if flagged:
        G = G + JITTER * np.eye(G.shape[0])
    return np.linalg.solve(G, rhs), bool(flagged)


def omp_estimate(y: np.ndarray, Phi, L: int, M_b: int | None = None, M_m: int | None = None) -> ChannelEstimate:
    """Orthogonal matching pursuit with ``L`` iterations.

    ``Phi`` is a dense matrix or a :class:`KroneckerSensing`; ``M_b``/``M_m``
    default to the operator's grid sizes (or ``(n_cols, 1)`` for dense input).
    """
    op = as_operator(Phi)
    M_b, M_m = _grid_sizes(op, M_b, M_m)
    if L > op.shape[0]:
        raise ValueError("L exceeds the number of measurements")
    y = np.asarray(y, dtype=complex)
    r = y.copy()
    support: list[int] = []
    gains = np.zeros(0, dtype=complex)
    flagged = False
    for _ in range(L):
        corr = np.abs(op.rmatvec(r)) ** 2
        corr[support] = -np.inf
        support.append(int(np.argmax(corr)))
        Phi_S = op.columns(support)
        g, bad = _solve_normal(Phi_S.conj().T @ Phi_S, Phi_S.conj().T @ y)
        flagged |= bad
        gains = g
        r = y - Phi_S @ gains
    if flagged:
        log.warning("OMP normal equations ill-conditioned; applied %.0e jitter", JITTER)
    return ChannelEstimate(tuple(support), gains, M_b, M_m, flagged)


def gain_posterior(y, Phi, support, lam: float, noise_var: float):
    """Gaussian posterior of the path gains on a fixed support.

    Returns ``(mean, cov)`` with ``mean = (Phi_S^H Phi_S + s I)^-1 Phi_S^H y``
    and ``cov = noise_var (Phi_S^H Phi_S + s I)^-1``, ``s = noise_var / lam``.
    """
    if len(support) == 0:
        raise ValueError("support must be nonempty")
    Phi_S = as_operator(Phi).columns(list(support))
    G = Phi_S.conj().T @ Phi_S + (noise_var / lam) * np.eye(len(support))
    Ginv = np.linalg.inv(G)
    mean = Ginv @ (Phi_S.conj().T @ np.asarray(y, dtype=complex))
    cov = noise_var * Ginv
    return mean, 0.5 * (cov + cov.conj().T)


def _grid_sizes(op, M_b, M_m):
    if M_b is None or M_m is None:
        M_b = getattr(op, "M_b", op.shape[1])
        M_m = getattr(op, "M_m", 1)
    return M_b, M_m


def _score_terms(corr_sq, norms_sq, lam, noise_var):
    """Data and log-determinant terms shared by the score and the posterior update."""
    denom = norms_sq + noise_var / lam
    data = corr_sq / (noise_var * denom)
    logdet = -np.log(np.pi * (noise_var + lam * norms_sq))
    return data, logdet, denom


def psi_scores(
    residual: np.ndarray,
    Phi,
    log_prior: np.ndarray,
    lam: float,
    noise_var: float,
    last_term: str = "verbatim",
) -> np.ndarray:
    """Single-candidate MAP objective for every flat index at once.

    ``log_prior`` is the log of the predicted support prior.  Zero-norm
    columns score ``-inf``.  ``last_term='verbatim'`` uses the linear
    ``-pi s^2 / (||phi||^2 + s^2/lam)`` correction; ``'log'`` uses
    ``-ln(pi s^2 / (||phi||^2 + s^2/lam))`` instead.
    """
    op = as_operator(Phi)
    norms_sq = op.col_norms_sq
    corr_sq = np.abs(op.rmatvec(residual)) ** 2
    data, logdet, denom = _score_terms(corr_sq, norms_sq, lam, noise_var)
    if last_term == "verbatim":
        extra = -np.pi * noise_var / denom
    elif last_term == "log":
        extra = -np.log(np.pi * noise_var / denom)
    else:
        raise ValueError(f"last_term must be one of {LAST_TERM_MODES}")
    score = logdet + data + log_prior + extra
    return np.where(norms_sq > 0, score, -np.inf)


def psi_score(
    omega: int,
    residual,
    Phi,
    prior_vector,
    lam: float,
    noise_var: float,
    transition: np.ndarray | None = None,
    last_term: str = "verbatim",
) -> float:
    """Score of one candidate ``omega``.

    ``prior_vector`` is the previous-period posterior; when ``transition``
    (column-stochastic, over flat indices) is given the prior term is
    ``ln sum_v T[omega, v] prior[v]``, otherwise ``prior_vector`` is taken
    as already predicted.
    """
    op = as_operator(Phi)
    prior = np.asarray(prior_vector, dtype=float)
    p = transition[omega] @ prior if transition is not None else prior[omega]
    norm_sq = op.col_norms_sq[omega]
    if norm_sq <= 0:
        return -np.inf
    corr_sq = np.abs(op.columns([omega])[:, 0].conj() @ residual) ** 2
    data, logdet, denom = _score_terms(corr_sq, norm_sq, lam, noise_var)
    if last_term == "verbatim":
        extra = -np.pi * noise_var / denom
    elif last_term == "log":
        extra = -np.log(np.pi * noise_var / denom)
    else:
        raise ValueError(f"last_term must be one of {LAST_TERM_MODES}")
    with np.errstate(divide="ignore"):
        return float(logdet + data + np.log(p) + extra)


@dataclass(frozen=True)
class SupportPosterior:
    """Per-path distributions over (AoD, AoA) bins.

    In joint mode each entry is a length ``M_b*M_m`` vector on flat indices.
    In factored mode each entry is an ``(aod, aoa)`` pair of marginals whose
    outer product stands in for the joint.
    """

    per_path: tuple
    M_b: int
    M_m: int
    factored: bool = False

    def __post_init__(self):
        object.__setattr__(self, "per_path", tuple(self.per_path))

    @property
    def num_paths(self) -> int:
        return len(self.per_path)

    def joint(self, l: int) -> np.ndarray:
        p = self.per_path[l]
        if self.factored:
            return np.outer(p[0], p[1]).ravel()
        return p

    def aod_marginal(self, l: int) -> np.ndarray:
        p = self.per_path[l]
        if self.factored:
            return p[0]
        return p.reshape(self.M_b, self.M_m).sum(axis=1)

    def aoa_marginal(self, l: int) -> np.ndarray:
        p = self.per_path[l]
        if self.factored:
            return p[1]
        return p.reshape(self.M_b, self.M_m).sum(axis=0)

    def entropy(self) -> float:
        """Summed per-path entropy in nats (joint distribution)."""
        h = 0.0
        for l in range(self.num_paths):
            p = self.joint(l)
            nz = p[p > 0]
            h -= float(np.sum(nz * np.log(nz)))
        return h

    @classmethod
    def uniform(cls, L: int, M_b: int, M_m: int, factored: bool = False) -> "SupportPosterior":
        if factored:
            paths = [(np.full(M_b, 1.0 / M_b), np.full(M_m, 1.0 / M_m)) for _ in range(L)]
        else:
            paths = [np.full(M_b * M_m, 1.0 / (M_b * M_m)) for _ in range(L)]
        return cls(tuple(paths), M_b, M_m, factored)

    @classmethod
    def point_masses(cls, support, M_b: int, M_m: int, factored: bool = False) -> "SupportPosterior":
        paths = []
        for s in support:
            j, i = split_index(int(s), M_m)
            if factored:
                paths.append((np.eye(M_b)[j], np.eye(M_m)[i]))
            else:
                paths.append(np.eye(1, M_b * M_m, int(s)).ravel())
        return cls(tuple(paths), M_b, M_m, factored)


def _from_joint(p: np.ndarray, M_b: int, M_m: int, factored: bool):
    if not factored:
        return p
    P = p.reshape(M_b, M_m)
    return (P.sum(axis=1), P.sum(axis=0))


def posterior_predict(post: SupportPosterior, T_b: np.ndarray, T_m: np.ndarray) -> SupportPosterior:
    """One transition step: p_next = (T_b kron T_m) p for every path."""
    out = []
    for p in post.per_path:
        if post.factored:
            a = T_b @ p[0]
            b = T_m @ p[1]
            out.append((a / a.sum(), b / b.sum()))
        else:
            P = p.reshape(post.M_b, post.M_m)
            q = (T_b @ P @ T_m.T).ravel()
            out.append(q / q.sum())
    return replace(post, per_path=tuple(out))


@dataclass(frozen=True)
class EstimatorState:
    """Everything the greedy MAP estimator carries between training periods.

    ``posterior`` is the *predicted* prior for the next measurement;
    ``filtered`` is the last posterior before prediction (diagnostic).
    """

    posterior: SupportPosterior
    lam: float
    noise_var: float
    T_b: np.ndarray
    T_m: np.ndarray
    last_term: str = "verbatim"
    prior_floor: float = 1e-12
    filtered: SupportPosterior | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.lam > 0 and self.noise_var > 0):
            raise ValueError("lam and noise_var must be positive")
        if self.last_term not in LAST_TERM_MODES:
            raise ValueError(f"last_term must be one of {LAST_TERM_MODES}")

    @classmethod
    def from_estimate(cls, est: ChannelEstimate, T_b, T_m, lam=1.0, noise_var=1.0, factored=False, **kw):
        """Transition-smoothed point masses at the estimated supports."""
        post = SupportPosterior.point_masses(est.support, est.M_b, est.M_m, factored)
        return cls(posterior_predict(post, T_b, T_m), lam, noise_var, T_b, T_m, filtered=post, **kw)


def greedy_map_estimate(y: np.ndarray, Phi, state: EstimatorState):
    """Greedy MAP support recovery with per-path temporal priors.

    Each of the L iterations scores every unused flat index against every
    not-yet-assigned path prior, takes the best (index, path) pair (lowest
    index, then lowest path, on ties), refits ridge gains over the support,
    refreshes that path's posterior from the pre-update residual, and
    finally propagates all path posteriors one step through the transition
    model.

    Returns ``(estimate, new_state)``; ``estimate.support[l]`` belongs to
    path ``l`` of the posterior.
    """
    op = as_operator(Phi)
    post = state.posterior
    L, M_b, M_m = post.num_paths, post.M_b, post.M_m
    if op.shape[1] != M_b * M_m:
        raise ValueError("sensing matrix width does not match the posterior grid")
    lam, s2 = state.lam, state.noise_var
    y = np.asarray(y, dtype=complex)
    norms_sq = op.col_norms_sq
    valid = norms_sq > 0
    log_priors = np.log(np.maximum(np.array([post.joint(l) for l in range(L)]), state.prior_floor))

    r = y.copy()
    assigned = np.full(L, -1, dtype=int)
    order: list[int] = []  # support indices in selection order
    new_paths = list(post.per_path)
    flagged = False
    gains = np.zeros(0, dtype=complex)
    for _ in range(L):
        corr_sq = np.abs(op.rmatvec(r)) ** 2
        data, logdet, denom = _score_terms(corr_sq, norms_sq, lam, s2)
        if state.last_term == "verbatim":
            extra = -np.pi * s2 / denom
        else:
            extra = -np.log(np.pi * s2 / denom)
        base = np.where(valid, data + logdet + extra, -np.inf)
        base[order] = -np.inf
        free = np.flatnonzero(assigned < 0)
        scores = base[None, :] + log_priors[free]
        best_path = np.argmax(scores, axis=0)
        omega = int(np.argmax(scores[best_path, np.arange(scores.shape[1])]))
        k = int(free[best_path[omega]])
        assigned[k] = omega
        order.append(omega)

        # posterior refresh for path k uses the residual before this path's removal
        lp = data + logdet + log_priors[k]
        new_paths[k] = _from_joint(np.exp(lp - logsumexp(lp)), M_b, M_m, post.factored)

        Phi_S = op.columns(order)
        G = Phi_S.conj().T @ Phi_S + (s2 / lam) * np.eye(len(order))
        gains, bad = _solve_normal(G, Phi_S.conj().T @ y)
        flagged |= bad
        r = y - Phi_S @ gains

    # report per path in path order
    pos = {w: n for n, w in enumerate(order)}
    support = tuple(int(w) for w in assigned)
    est = ChannelEstimate(support, np.array([gains[pos[w]] for w in support]), M_b, M_m, flagged)
    filtered = replace(post, per_path=tuple(new_paths))
    new_state = replace(state, posterior=posterior_predict(filtered, state.T_b, state.T_m), filtered=filtered)
    return est, new_state


def match_paths(old: SupportPosterior, new: SupportPosterior) -> np.ndarray:
    """Associate new path posteriors with old ones by maximal overlap.

    Greedy assignment on the L x L matrix ``sum(old_k * new_l)``: repeatedly
    take the largest remaining entry (ties to the lowest indices).  Returns
    ``perm`` such that new path ``perm[k]`` continues old path ``k``.
    """
    L = old.num_paths
    ov = np.array([[old.joint(k) @ new.joint(l) for l in range(L)] for k in range(L)])
    perm = np.full(L, -1, dtype=int)
    for _ in range(L):
        k, l = np.unravel_index(np.argmax(ov), ov.shape)
        perm[k] = l
        ov[k, :] = -np.inf
        ov[:, l] = -np.inf
    return perm
