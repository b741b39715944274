"""Uniform linear arrays, angle dictionaries and the mobile sparse channel.

Angles are carried as the sine of the physical angle, so they live in
[-1, 1].  Quantized angles are bin indices ``k`` on the grid
``-1 + 2k/M``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform linear array with ``num_elements`` elements.

    ``element_spacing`` is expressed in carrier wavelengths (d / lambda).
    """

    num_elements: int
    element_spacing: float = 0.5

    def __post_init__(self):
        if int(self.num_elements) < 1:
            raise ValueError(f"num_elements must be >= 1, got {self.num_elements}")
        if not self.element_spacing > 0:
            raise ValueError(f"element_spacing must be > 0, got {self.element_spacing}")


@dataclass(frozen=True)
class AngleGrid:
    num_bins: int

    def __post_init__(self):
        if int(self.num_bins) < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")

    @property
    def angles(self) -> np.ndarray:
        return -1.0 + 2.0 * np.arange(self.num_bins) / self.num_bins

    def angle(self, k) -> np.ndarray | float:
        return -1.0 + 2.0 * np.asarray(k) / self.num_bins

    def nearest_bin(self, theta) -> np.ndarray:
        """Nearest grid index for sine-domain angle(s), clipped to the grid."""
        k = np.rint((np.asarray(theta) + 1.0) * self.num_bins / 2.0).astype(int)
        return np.clip(k, 0, self.num_bins - 1)


@dataclass(frozen=True)
class PathState:
    aod_bin: int
    aoa_bin: int
    gain: complex


@dataclass(frozen=True)
class ChannelState:
    """Ground-truth channel: an ordered tuple of paths.

    ``merged`` is set when angle evolution left two paths on the same
    (AoD, AoA) bin pair after the single re-draw.
    """

    paths: tuple[PathState, ...]
    merged: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if len(self.paths) < 1:
            raise ValueError("a channel needs at least one path")

    @property
    def num_paths(self) -> int:
        return len(self.paths)

    @property
    def aod_bins(self) -> np.ndarray:
        return np.array([p.aod_bin for p in self.paths], dtype=int)

    @property
    def aoa_bins(self) -> np.ndarray:
        return np.array([p.aoa_bin for p in self.paths], dtype=int)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    def has_collision(self) -> bool:
        pairs = set(zip(self.aod_bins.tolist(), self.aoa_bins.tolist()))
        return len(pairs) < self.num_paths


@dataclass(frozen=True)
class MobilityModel:
    """Angle diffusion ``beta`` (per symbol, sine domain) and AR gain ``rho``."""

    beta: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    def sigma_l_sq(self, num_symbols: float) -> float:
        """Transition-kernel width after ``num_symbols`` steps, sine domain."""
        return float(num_symbols) * self.beta**2

    def sigma_l_bins(self, num_symbols: float, num_bins: int) -> float:
        """Same width expressed in grid bins (bin spacing is 2 / num_bins)."""
        return np.sqrt(self.sigma_l_sq(num_symbols)) * num_bins / 2.0


def _check_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(np.abs(theta) > 1.0 + 1e-12) or not np.all(np.isfinite(theta)):
        raise ValueError("sine-domain angle must lie in [-1, 1]")
    return theta


def steering_vector(geom: ArrayGeometry, theta) -> np.ndarray:
    """Unit-norm array response.

    A scalar ``theta`` gives a length-N vector; an array of angles gives an
    ``N x len(theta)`` matrix with one response per column.
    """
    theta = _check_theta(theta)
    k = np.arange(geom.num_elements)
    phase = 2j * np.pi * geom.element_spacing * np.multiply.outer(k, theta)
    return np.exp(phase) / np.sqrt(geom.num_elements)


def steering_derivative(geom: ArrayGeometry, theta) -> np.ndarray:
    """Derivative of :func:`steering_vector` with respect to ``theta``."""
    theta = _check_theta(theta)
    k = np.arange(geom.num_elements)
    scale = 2j * np.pi * geom.element_spacing * k
    a = steering_vector(geom, theta)
    if a.ndim == 1:
        return scale * a
    return scale[:, None] * a


def dictionary_matrix(geom: ArrayGeometry, grid: AngleGrid) -> np.ndarray:
    return steering_vector(geom, grid.angles)


def assemble_dense(
    state: ChannelState,
    geom_b: ArrayGeometry,
    geom_m: ArrayGeometry,
    grid_b: AngleGrid,
    grid_m: AngleGrid,
) -> np.ndarray:
    """Dense N_m x N_b channel sum_l alpha_l a_m(theta_m) a_b(theta_b)^H."""
    a_m = steering_vector(geom_m, grid_m.angle(state.aoa_bins))
    a_b = steering_vector(geom_b, grid_b.angle(state.aod_bins))
    return (a_m * state.gains) @ a_b.conj().T


def dense_from_angles(gains, aod, aoa, geom_b: ArrayGeometry, geom_m: ArrayGeometry) -> np.ndarray:
    """Dense channel for arbitrary (possibly off-grid) angles."""
    a_m = steering_vector(geom_m, np.asarray(aoa, dtype=float))
    a_b = steering_vector(geom_b, np.asarray(aod, dtype=float))
    return (a_m * np.asarray(gains)) @ a_b.conj().T


def to_virtual(state: ChannelState, M_b: int, M_m: int) -> np.ndarray:
    """Sparse virtual channel, shape (M_m, M_b); entry (aoa, aod) holds the gain.

    Returned dense; ``vec`` in column-major order gives the sparse vector
    whose flat index is ``aod * M_m + aoa``.
    """
    if state.has_collision():
        raise ValueError("two paths share the same (aod_bin, aoa_bin) pair")
    Hv = np.zeros((M_m, M_b), dtype=complex)
    for p in state.paths:
        if not (0 <= p.aod_bin < M_b and 0 <= p.aoa_bin < M_m):
            raise ValueError(f"bin out of range: {p}")
        Hv[p.aoa_bin, p.aod_bin] = p.gain
    return Hv


def from_virtual(Hv: np.ndarray, A_b: np.ndarray, A_m: np.ndarray) -> np.ndarray:
    return A_m @ Hv @ A_b.conj().T


def flat_index(aod_bin, aoa_bin, M_m: int):
    return np.asarray(aod_bin) * M_m + np.asarray(aoa_bin)


def split_index(flat, M_m: int):
    """Inverse of :func:`flat_index`: returns ``(aod_bin, aoa_bin)``."""
    flat = np.asarray(flat)
    return flat // M_m, flat % M_m


def transition_matrix(M: int, sigma_l: float) -> np.ndarray:
    """Column-stochastic Gaussian kernel T[m, n] = P(next = m | current = n).

    ``sigma_l`` is in bins; ``sigma_l == 0`` returns the identity.
    """
    if sigma_l < 0:
        raise ValueError("sigma_l must be >= 0")
    if sigma_l**2 == 0:  # also catches sigma_l so small its square underflows
        return np.eye(M)
    idx = np.arange(M)
    d2 = (idx[:, None] - idx[None, :]) ** 2
    # diagonal is exp(0) = 1, so no column can underflow to all zeros
    K = np.exp(-d2 / sigma_l**2)
    return K / K.sum(axis=0, keepdims=True)


def _sample_columns(T: np.ndarray, cols: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(T[:, cols], axis=0)
    u = rng.random(len(cols)) * cdf[-1]
    out = (cdf < u[None, :]).sum(axis=0)
    return np.minimum(out, T.shape[0] - 1)


def evolve_angles(
    state: ChannelState,
    T_b: np.ndarray,
    T_m: np.ndarray,
    rng: np.random.Generator,
) -> ChannelState:
    """One Markov step of every path's AoD and AoA bin.

    A collision between paths is re-drawn once; if it persists the state is
    returned with ``merged=True``.
    """
    aod = _sample_columns(T_b, state.aod_bins, rng)
    aoa = _sample_columns(T_m, state.aoa_bins, rng)

    def collide(a, b):
        return len(set(zip(a.tolist(), b.tolist()))) < len(a)

    merged = False
    if collide(aod, aoa):
        aod = _sample_columns(T_b, state.aod_bins, rng)
        aoa = _sample_columns(T_m, state.aoa_bins, rng)
        merged = collide(aod, aoa)
        if merged:
            warnings.warn("paths merged onto the same angle bin pair", RuntimeWarning, stacklevel=2)
    paths = tuple(
        replace(p, aod_bin=int(b), aoa_bin=int(m)) for p, b, m in zip(state.paths, aod, aoa)
    )
    return ChannelState(paths, merged=merged)


def complex_normal(rng: np.random.Generator, size=None, var: float = 1.0):
    """Circularly-symmetric CN(0, var) draws."""
    s = np.sqrt(var / 2.0)
    return s * (rng.standard_normal(size) + 1j * rng.standard_normal(size))


def evolve_gain(alpha: complex, model: MobilityModel, rng: np.random.Generator) -> complex:
    return model.rho * alpha + np.sqrt(1.0 - model.rho**2) * complex_normal(rng)


def random_state(
    L: int,
    M_b: int,
    M_m: int,
    rng: np.random.Generator,
    gain_var: float = 1.0,
) -> ChannelState:
    """Draw L paths with distinct bin pairs and independent CN(0, gain_var) gains."""
    if L > M_b * M_m:
        raise ValueError("more paths than angle bin pairs")
    flat = rng.choice(M_b * M_m, size=L, replace=False)
    aod, aoa = split_index(flat, M_m)
    gains = complex_normal(rng, L, gain_var)
    return ChannelState(
        tuple(PathState(int(b), int(m), complex(g)) for b, m, g in zip(aod, aoa, gains))
    )


def fold_angle(theta):
    """Reflect sine-domain angles back into [-1, 1] (triangle-wave fold)."""
    t = np.mod(np.asarray(theta, dtype=float) + 1.0, 4.0)
    return np.where(t > 2.0, 4.0 - t, t) - 1.0
