"""Beam codebooks, frame scheduling, measurement synthesis and sensing matrices."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .array_channel import (
    AngleGrid,
    ArrayGeometry,
    ChannelState,
    assemble_dense,
    complex_normal,
    steering_vector,
)


class Slot(enum.IntEnum):
    DATA = 0
    COMMON = 1
    DEDICATED = 2


@dataclass(frozen=True)
class BeamCodebook:
    """R steering beams on the sine-domain grid ``-1 + 2r/R``."""

    vectors: np.ndarray  # N_b x R, one beam per column
    angles: np.ndarray

    @classmethod
    def uniform(cls, geom_b: ArrayGeometry, R: int) -> "BeamCodebook":
        grid = AngleGrid(R)
        return cls(steering_vector(geom_b, grid.angles), grid.angles)

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    def beams(self, indices) -> np.ndarray:
        return self.vectors[:, np.asarray(indices, dtype=int)]


def cycling_beams(N_c: int, geom_b: ArrayGeometry) -> np.ndarray:
    """N_c beams at the equally spaced angles -1 + 2k/N_c, k = 0..N_c-1."""
    if N_c < 1:
        raise ValueError("N_c must be >= 1")
    return steering_vector(geom_b, -1.0 + 2.0 * np.arange(N_c) / N_c)


def dft_combiner(N_m: int) -> np.ndarray:
    """Unitary N_m x N_m DFT combiner, W[k, i] = exp(-2j pi k i / N_m) / sqrt(N_m)."""
    k = np.arange(N_m)
    return np.exp(-2j * np.pi * np.outer(k, k) / N_m) / np.sqrt(N_m)


def ideal_combiner(aoa_theta, geom_m: ArrayGeometry) -> np.ndarray:
    """Combiner matched to the given AoA(s).

    A scalar gives the N_m x 1 steering vector.  Several angles give an
    orthonormal basis of their steering vectors (duplicates collapse), so
    the combined noise stays white.
    """
    theta = np.atleast_1d(np.asarray(aoa_theta, dtype=float))
    if theta.size == 1:
        return steering_vector(geom_m, theta)
    theta = np.unique(theta)
    A = steering_vector(geom_m, theta)
    if A.shape[1] == 1:
        return A
    q, r = np.linalg.qr(A)
    keep = np.abs(np.diag(r)) > 1e-8
    return q[:, keep]


@dataclass(frozen=True)
class MeasurementBatch:
    received: np.ndarray  # N_w x N_beams
    beamformers: np.ndarray  # N_b x N_beams
    combiner: np.ndarray  # N_m x N_w
    noise_var: float

    def __post_init__(self):
        if self.received.shape != (self.combiner.shape[1], self.beamformers.shape[1]):
            raise ValueError("received block does not match beamformer/combiner shapes")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")

    @property
    def y(self) -> np.ndarray:
        """Column-stacked observation vec(Y)."""
        return self.received.reshape(-1, order="F")


def simulate_measurement_dense(H, F, W, noise_var, rng) -> np.ndarray:
    N = complex_normal(rng, (W.shape[0], F.shape[1]), noise_var)
    return W.conj().T @ (H @ F + N)


def simulate_measurement(
    state: ChannelState,
    F: np.ndarray,
    W: np.ndarray,
    noise_var: float,
    rng: np.random.Generator,
    geom_b: ArrayGeometry,
    geom_m: ArrayGeometry,
    grid_b: AngleGrid,
    grid_m: AngleGrid,
) -> MeasurementBatch:
    """Y = W^H H F + W^H N with the channel held fixed over all beams."""
    W = W.reshape(W.shape[0], -1)
    H = assemble_dense(state, geom_b, geom_m, grid_b, grid_m)
    Y = simulate_measurement_dense(H, F, W, noise_var, rng)
    return MeasurementBatch(Y, F, W, noise_var)


def build_sensing_matrix(F, W, A_b, A_m) -> np.ndarray:
    """Phi = (F^T conj(A_b)) kron (W^H A_m); column j*M_m + i is (AoD j, AoA i)."""
    W = W.reshape(W.shape[0], -1)
    return np.kron(F.T @ A_b.conj(), W.conj().T @ A_m)


class KroneckerSensing:
    """Matrix-free view of Phi = B kron C with B = F^T conj(A_b), C = W^H A_m.

    Avoids forming the (N_beams N_w) x (M_b M_m) matrix at full scale.
    """

    def __init__(self, F, W, A_b, A_m):
        W = W.reshape(W.shape[0], -1)
        self.B = F.T @ A_b.conj()
        self.C = W.conj().T @ A_m
        self.M_b = A_b.shape[1]
        self.M_m = A_m.shape[1]
        self.shape = (self.B.shape[0] * self.C.shape[0], self.M_b * self.M_m)
        # column j*M_m + i has norm ||B[:, j]|| * ||C[:, i]||
        nb = np.sum(np.abs(self.B) ** 2, axis=0)
        nc = np.sum(np.abs(self.C) ** 2, axis=0)
        self.col_norms_sq = np.outer(nb, nc).ravel()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Phi x for x = vec of an M_m x M_b virtual matrix (column-major)."""
        X = x.reshape(self.M_m, self.M_b, order="F")
        return (self.C @ X @ self.B.T).reshape(-1, order="F")

    def rmatvec(self, r: np.ndarray) -> np.ndarray:
        """Phi^H r, flat-indexed."""
        R = r.reshape(self.C.shape[0], self.B.shape[0], order="F")
        # (B kron C)^H vec(R) = vec(C^H R conj(B)); flat index j*M_m + i -> [j, i]
        return (self.C.conj().T @ R @ self.B.conj()).T.ravel()

    def columns(self, idx) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        j, i = idx // self.M_m, idx % self.M_m
        return (self.B[:, j][:, None, :] * self.C[:, i][None, :, :]).reshape(-1, len(idx))

    def dense(self) -> np.ndarray:
        return np.kron(self.B, self.C)


class DenseSensing:
    def __init__(self, Phi: np.ndarray):
        self.Phi = np.asarray(Phi)
        self.shape = self.Phi.shape
        self.col_norms_sq = np.sum(np.abs(self.Phi) ** 2, axis=0)

    def rmatvec(self, r):
        return self.Phi.conj().T @ r

    def columns(self, idx):
        return self.Phi[:, np.atleast_1d(np.asarray(idx, dtype=int))]

    def dense(self):
        return self.Phi


def as_operator(Phi):
    if isinstance(Phi, (KroneckerSensing, DenseSensing)):
        return Phi
    return DenseSensing(Phi)


@dataclass(frozen=True)
class FrameSchedule:
    total_symbols: int
    common_period: int
    dedicated_period: int | None
    num_common_beams: int
    num_dedicated_beams: int
    labels: np.ndarray  # Slot per symbol index

    def count(self, slot: Slot) -> int:
        return int(np.count_nonzero(self.labels == slot))

    def bursts(self):
        """Yield ``(start, length, slot)`` for every training burst in time order."""
        lab = self.labels
        change = np.flatnonzero(np.diff(lab) != 0) + 1
        starts = np.r_[0, change]
        ends = np.r_[change, len(lab)]
        for s, e in zip(starts, ends):
            slot = Slot(int(lab[s]))
            if slot == Slot.DATA:
                continue
            # back-to-back bursts of one kind (e.g. N_c == T_c) form a single run
            n = self.num_common_beams if slot == Slot.COMMON else self.num_dedicated_beams
            for b in range(s, e, n):
                yield int(b), int(min(n, e - b)), slot


def make_schedule(
    total_symbols: int,
    T_c: int,
    N_c: int,
    T_d: int | None = None,
    N_d: int = 0,
) -> FrameSchedule:
    """Label every symbol slot as common training, dedicated training or data.

    Common bursts of N_c slots open every T_c-symbol period.  Dedicated
    bursts of N_d slots start at every multiple of T_d; a burst that would
    overlap a common burst is dropped.
    """
    if T_c < 1 or N_c < 1:
        raise ValueError("T_c and N_c must be positive")
    if N_c > T_c:
        raise ValueError("N_c exceeds T_c")
    labels = np.zeros(total_symbols, dtype=np.int8)
    common_starts = np.arange(0, total_symbols, T_c)
    for s in common_starts:
        labels[s : s + N_c] = Slot.COMMON
    if T_d is not None:
        if T_d < 1 or N_d < 1:
            raise ValueError("T_d and N_d must be positive when dedicated training is on")
        if N_d > T_d:
            raise ValueError("N_d exceeds T_d")
        if T_d >= T_c:
            raise ValueError("T_d must be shorter than T_c")
        for s in range(T_d, total_symbols, T_d):
            e = min(s + N_d, total_symbols)
            if np.any(labels[s:e] != Slot.DATA):
                continue
            labels[s:e] = Slot.DEDICATED
    return FrameSchedule(total_symbols, T_c, T_d, N_c, N_d if T_d is not None else 0, labels)


def schedule_frames(cfg) -> FrameSchedule:
    """Schedule for a :class:`~beamtrain.link_simulator.SimConfig`."""
    T_d = cfg.T_d if cfg.dedicated else None
    return make_schedule(cfg.total_symbols, cfg.T_c, cfg.N_c, T_d, cfg.dedicated_burst_length)
