"""Training-beam selection from the single-path AoD Cramer-Rao bound.

For one path seen through an ideal combiner the observation is
``y = alpha * F^T conj(a(theta)) + n`` with ``n ~ CN(0, sigma2 I)``.  The
unknowns are ``[alpha, conj(alpha), theta]``; the AoD bound is the (3, 3)
entry of the inverse Fisher matrix.  Averaging that bound over a predicted
AoD distribution gives the cost minimised over codebook beams.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .array_channel import AngleGrid, ArrayGeometry, steering_derivative, steering_vector
from .training_protocol import BeamCodebook

# relative floor on the Fisher Schur complement; below it the beam set is
# treated as carrying no AoD information
BRACKET_RTOL = 1e-12
# relative floor on the beam response |F^T a*|^2 against the beam energy;
# at a common null of every beam the gain is unobservable and the bound is
# taken as infinite (its limit as the angle approaches the null)
GAIN_RTOL = 1e-12


@dataclass(frozen=True)
class FisherMatrix:
    """Fisher information over ``[alpha, conj(alpha), theta]``.

    Entry ``(i, j)`` is ``-E[d/d p_i^* d log p / d p_j]`` (1-based names
    below, 0-based storage in ``V``).
    """

    V: np.ndarray
    v11_floor: float = 0.0

    @property
    def v11(self) -> float:
        return float(self.V[0, 0].real)

    @property
    def v13(self) -> complex:
        return complex(self.V[0, 2])

    @property
    def v31(self) -> complex:
        return complex(self.V[2, 0])

    @property
    def v33(self) -> float:
        return float(self.V[2, 2].real)

    def crlb(self) -> float:
        """``[V33 - 2 Re(V31 V13 / V11)]^-1``, or inf when uninformative."""
        if self.v11 <= self.v11_floor:
            return np.inf
        bracket = self.v33 - 2.0 * (self.v31 * self.v13 / self.v11).real
        if self.v33 <= 0 or bracket <= BRACKET_RTOL * self.v33:
            return np.inf
        return 1.0 / bracket


def fisher_entries(F, theta: float, alpha: complex, sigma2: float, geom: ArrayGeometry) -> FisherMatrix:
    F = np.asarray(F).reshape(geom.num_elements, -1)
    g = F.T @ steering_vector(geom, theta).conj()
    dg = F.T @ steering_derivative(geom, theta).conj()
    v11 = np.vdot(g, g).real / sigma2
    v31 = np.conj(alpha) * np.vdot(dg, g) / sigma2
    v13 = np.conj(v31)
    v33 = 2.0 * abs(alpha) ** 2 * np.vdot(dg, dg).real / sigma2
    V = np.array(
        [
            [v11, 0.0, v13],
            [0.0, v11, v31],
            [v31, v13, v33],
        ],
        dtype=complex,
    )
    return FisherMatrix(V, GAIN_RTOL * np.sum(np.abs(F) ** 2) / sigma2)


def crlb_single_path(F, theta: float, sigma2: float, alpha_mag: float, geom: ArrayGeometry) -> float:
    """AoD variance bound for the beams in the columns of ``F``."""
    return fisher_entries(F, theta, alpha_mag, sigma2, geom).crlb()


class CrlbTable:
    """Vectorised bound evaluation for codebook beams on an angle grid.

    Precomputes, for every grid angle ``m`` and codebook beam ``r``, the
    beam response ``a(theta_m)^H d_r`` and its angle derivative, so that the
    bound of any beam subset is a few sums over columns.
    """

    def __init__(self, codebook: BeamCodebook, geom: ArrayGeometry, grid: AngleGrid,
                 sigma2: float = 1.0, alpha_mag: float = 1.0):
        self.codebook = codebook
        self.grid = grid
        self.sigma2 = sigma2
        self.alpha_mag = alpha_mag
        theta = grid.angles
        self.G = steering_vector(geom, theta).conj().T @ codebook.vectors
        self.D = steering_derivative(geom, theta).conj().T @ codebook.vectors
        self.energy = np.sum(np.abs(codebook.vectors) ** 2, axis=0)

    def crlb(self, beams, bins=None) -> np.ndarray:
        """Bound for the beam set ``beams`` at grid ``bins`` (all bins by default).

        ``beams`` may be 2-D (candidates x beams_per_candidate); the result
        is then (candidates x bins).
        """
        beams = np.asarray(beams, dtype=int)
        sl = slice(None) if bins is None else np.asarray(bins, dtype=int)
        G = self.G[sl][..., beams]  # bins x [cand] x k
        D = self.D[sl][..., beams]
        gg = np.sum(np.abs(G) ** 2, axis=-1)
        dd = np.sum(np.abs(D) ** 2, axis=-1)
        gd = np.sum(G.conj() * D, axis=-1)
        energy = np.sum(self.energy[beams], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            bracket = dd - np.abs(gd) ** 2 / gg
            ok = (gg > GAIN_RTOL * energy) & (dd > 0) & (bracket > BRACKET_RTOL * dd)
            out = np.where(ok, self.sigma2 / (2.0 * self.alpha_mag**2) / np.where(ok, bracket, 1.0), np.inf)
        return np.moveaxis(out, 0, -1) if out.ndim > 1 else out

    def average(self, beams, dist) -> tuple[np.ndarray, np.ndarray]:
        """Averaged bound and number of infinite positive-probability bins.

        Returns arrays over candidates when ``beams`` is 2-D.
        """
        dist = np.asarray(dist, dtype=float)
        bins = np.flatnonzero(dist > 0)
        c = self.crlb(beams, bins)
        inf = np.isinf(c)
        n_inf = inf.sum(axis=-1)
        cost = np.where(inf, 0.0, c) @ dist[bins]
        cost = np.where(n_inf > 0, np.inf, cost)
        return cost, n_inf


def average_cost(F, aod_distribution, sigma2: float, alpha_mag: float,
                 geom: ArrayGeometry, grid: AngleGrid) -> float:
    """Bound averaged over the AoD distribution on ``grid``."""
    p = np.asarray(aod_distribution, dtype=float)
    total = 0.0
    for m in np.flatnonzero(p > 0):
        c = crlb_single_path(F, float(grid.angle(m)), sigma2, alpha_mag, geom)
        if np.isinf(c):
            return np.inf
        total += c * p[m]
    return total


@dataclass(frozen=True)
class BeamSelection:
    indices: tuple[int, ...]
    center: int
    offset: int | None
    cost: float
    evaluated: int = 0


def _rank(cost: np.ndarray, n_inf: np.ndarray) -> int:
    """Lowest finite cost wins; all-infinite candidates rank by infinite-bin count."""
    finite = np.isfinite(cost)
    if finite.any():
        return int(np.argmin(np.where(finite, cost, np.inf)))
    return int(np.argmin(n_inf))


def center_index(codebook: BeamCodebook, grid: AngleGrid, aod_distribution) -> int:
    """Codebook index nearest the distribution mean (ties to the lower index)."""
    p = np.asarray(aod_distribution, dtype=float)
    mean_bin = float(np.arange(len(p)) @ p / p.sum())
    theta = grid.angle(mean_bin)
    d = np.abs(codebook.angles - theta)
    return int(np.flatnonzero(d <= d.min() + 1e-12)[0])


def select_pair_exhaustive(table: CrlbTable, aod_distribution, window: int = 33) -> BeamSelection:
    """Best pair among ``window`` consecutive codebook indices around the center."""
    R = table.codebook.size
    if not 2 <= window <= R:
        raise ValueError("window must lie in [2, R]")
    i0 = center_index(table.codebook, table.grid, aod_distribution)
    start = int(np.clip(i0 - window // 2, 0, R - window))
    pairs = np.array(list(combinations(range(start, start + window), 2)))
    cost, n_inf = table.average(pairs, aod_distribution)
    k = _rank(cost, n_inf)
    return BeamSelection(tuple(int(i) for i in pairs[k]), i0, None, float(cost[k]), len(pairs))


def select_dual_beams_1d(table: CrlbTable, aod_distribution, window: int = 16) -> BeamSelection:
    """Symmetric pair ``(i0 + delta, i0 - delta)`` minimising the averaged bound.

    Falls back to an exhaustive search over ``2*window + 1`` indices when the
    center sits on the codebook edge.
    """
    R = table.codebook.size
    i0 = center_index(table.codebook, table.grid, aod_distribution)
    deltas = np.arange(1, min(i0, R - 1 - i0) + 1)
    if deltas.size == 0:
        return select_pair_exhaustive(table, aod_distribution, min(2 * window + 1, R))
    pairs = np.stack([i0 + deltas, i0 - deltas], axis=1)
    cost, n_inf = table.average(pairs, aod_distribution)
    k = _rank(cost, n_inf)
    return BeamSelection((int(i0 + deltas[k]), int(i0 - deltas[k])), i0, int(deltas[k]), float(cost[k]), len(pairs))


def select_multipath_beams(table: CrlbTable, aod_marginals) -> list[int]:
    """Dual beams chosen independently per path, concatenated (2L indices)."""
    out: list[int] = []
    for p in aod_marginals:
        out.extend(select_dual_beams_1d(table, p).indices)
    return out


def select_single_beams(table: CrlbTable, aod_marginals) -> list[int]:
    """One beam per path at the distribution center (single-beam baseline)."""
    return [center_index(table.codebook, table.grid, p) for p in aod_marginals]
