"""End-to-end Monte Carlo link simulation.

One run follows a single target user through ``total_symbols`` symbol
slots.  Training bursts (common beam cycling, and dedicated bursts in the
dedicated modes) produce channel estimates; the data slots in between carry
BPSK on the dominant singular pair of the latest estimate while the true
channel keeps moving.

The true channel's angles follow a reflected Gaussian random walk in the
sine domain (per-symbol variance ``beta**2 / 2``, i.e. the transition
kernel ``exp(-d**2 / beta**2)``), quantized to the nearest grid bin unless
``off_grid`` is set.  Path gains follow the AR(1) recursion with
coefficient ``rho``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.signal import lfilter
from scipy.special import erfc

from .array_channel import (
    AngleGrid,
    ArrayGeometry,
    MobilityModel,
    complex_normal,
    dense_from_angles,
    dictionary_matrix,
    fold_angle,
    random_state,
    steering_vector,
    transition_matrix,
)
from .beam_selection import CrlbTable, select_multipath_beams, select_single_beams
from .sparse_estimation import (
    EstimatorState,
    SupportPosterior,
    estimate_to_dense,
    greedy_map_estimate,
    omp_estimate,
)
from .training_protocol import (
    BeamCodebook,
    KroneckerSensing,
    Slot,
    cycling_beams,
    dft_combiner,
    ideal_combiner,
    schedule_frames,
    simulate_measurement_dense,
)


class Mode(str, enum.Enum):
    CONVENTIONAL = "ConventionalCycling"
    DEDICATED_DUAL = "DedicatedDual"
    DEDICATED_SINGLE = "DedicatedSingle"


class ConfigError(ValueError):
    """Raised for an infeasible or malformed simulation configuration."""


@dataclass(frozen=True)
class SimConfig:
    """All scalar parameters of one scenario (desk-scale defaults).

    ``N_d`` is the number of dedicated beams per path (2 for the dual mode,
    1 for the single-beam mode).  With ``beam_allocation="per_path"`` a
    dedicated burst carries ``N_d * L`` beams; with ``"dominant"`` it
    carries ``N_d`` beams aimed at the strongest estimated path.  ``estimator`` is ``"omp"`` or ``"greedy_map"``; empty picks OMP
    for conventional cycling and greedy MAP for the dedicated modes.
    ``snr_db`` sets the noise variance ``10**(-snr_db/10)`` for unit-power
    training symbols and unit-variance path gains.
    """

    N_b: int = 16
    N_m: int = 16
    M_b: int = 64
    M_m: int = 64
    L: int = 3
    N_c: int = 32
    N_d: int = 0
    T_c: int = 1000
    T_d: int = 100
    total_symbols: int = 100_000
    snr_db: float = 15.0
    beta: float = 0.001
    rho: float = 0.999
    gain_prior_var: float = 1.0
    mode: str = Mode.CONVENTIONAL.value
    estimator: str = ""
    oracle_combiner: bool = False
    off_grid: bool = False
    gain_step: str = "symbol"
    last_term: str = "verbatim"
    factored: bool = False
    prior_floor: float = 1e-12
    element_spacing: float = 0.5
    codebook_size: int = 0
    beam_allocation: str = "per_path"
    combiner: str = "dft"
    quantized_prior: bool = True
    symbol_duration: float = 4.46e-6
    rng_seed: int = 1

    @property
    def dedicated(self) -> bool:
        return self.mode != Mode.CONVENTIONAL.value

    @property
    def beams_per_path(self) -> int:
        if self.N_d:
            return self.N_d
        return 1 if self.mode == Mode.DEDICATED_SINGLE.value else 2

    @property
    def dedicated_burst_length(self) -> int:
        if not self.dedicated:
            return 0
        if self.beam_allocation == "dominant":
            return self.beams_per_path
        return self.beams_per_path * self.L

    @property
    def estimator_name(self) -> str:
        if self.estimator:
            return self.estimator
        return "greedy_map" if self.dedicated else "omp"

    @property
    def noise_var(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    @property
    def mode_label(self) -> str:
        default = "greedy_map" if self.dedicated else "omp"
        if self.estimator_name == default:
            return self.mode
        return f"{self.mode}/{self.estimator_name}"

    def validate(self) -> "SimConfig":
        for name in ("N_b", "N_m", "M_b", "M_m", "L", "N_c", "T_c", "total_symbols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.M_b < 2 or self.M_m < 2:
            raise ConfigError("M_b and M_m must be at least 2")
        if self.mode not in {m.value for m in Mode}:
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.estimator not in ("", "omp", "greedy_map"):
            raise ConfigError(f"estimator: unknown estimator {self.estimator!r}")
        if self.N_c > self.T_c:
            raise ConfigError("N_c exceeds T_c")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.gain_prior_var <= 0:
            raise ConfigError("gain_prior_var must be > 0")
        if self.gain_step not in ("symbol", "period"):
            raise ConfigError("gain_step must be 'symbol' or 'period'")
        if self.combiner not in ("dft", "ideal"):
            raise ConfigError("combiner must be 'dft' or 'ideal'")
        if self.beam_allocation not in ("per_path", "dominant"):
            raise ConfigError("beam_allocation must be 'per_path' or 'dominant'")
        if self.last_term not in ("verbatim", "log"):
            raise ConfigError("last_term must be 'verbatim' or 'log'")
        if self.L > self.M_b * self.M_m:
            raise ConfigError("L exceeds the number of angle bin pairs")
        if self.dedicated:
            if self.mode == Mode.DEDICATED_DUAL.value and self.N_d not in (0, 2):
                raise ConfigError("N_d must be 2 in DedicatedDual mode")
            if self.mode == Mode.DEDICATED_SINGLE.value and self.N_d not in (0, 1):
                raise ConfigError("N_d must be 1 in DedicatedSingle mode")
            if self.T_d < 1:
                raise ConfigError("T_d must be positive")
            if self.T_d >= self.T_c:
                raise ConfigError("T_d must be shorter than T_c")
            if self.dedicated_burst_length > self.T_d:
                raise ConfigError("N_d exceeds T_d")
        if self.L > self.N_c * self.N_m:
            raise ConfigError("L exceeds the number of common-training measurements")
        return self

    @classmethod
    def paper_scale(cls, **overrides) -> "SimConfig":
        base = dict(N_b=32, N_m=32, M_b=128, M_m=128, total_symbols=1_000_000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class MetricsReport:
    ber: float
    nmse: float
    overhead: float
    data_symbols: int
    bit_errors: int
    data_bits: int
    nmse_trace: list = field(default_factory=list)
    support_trace: list = field(default_factory=list)  # true paths found per burst
    beams_trace: list = field(default_factory=list)
    entropy_trace: list = field(default_factory=list)
    undefined_nmse: int = 0
    merged_symbols: int = 0
    degraded_links: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def svd_precoder(H_hat: np.ndarray):
    """Dominant right/left singular vectors ``(v, u)`` of the channel estimate.

    Returns ``(v, u, degraded)``; an all-zero estimate gives the first
    canonical basis vectors and ``degraded=True``.
    """
    N_m, N_b = H_hat.shape
    if not np.any(H_hat):
        return np.eye(N_b, 1).ravel().astype(complex), np.eye(N_m, 1).ravel().astype(complex), True
    U, _, Vh = np.linalg.svd(H_hat)
    return Vh[0].conj(), U[:, 0], False


def q_function(x):
    return 0.5 * erfc(np.asarray(x) / np.sqrt(2.0))


def bpsk_errors(eff_gain, bits, noise) -> int:
    """Errors of ``sign(Re z)`` decisions on ``z = g s + noise``, ``s = 2 bit - 1``."""
    z = eff_gain * (2.0 * bits - 1.0) + noise
    return int(np.count_nonzero((z.real >= 0) != (bits == 1)))


def transmit_effective(eff_gain: np.ndarray, noise_var: float, rng: np.random.Generator) -> tuple[int, int]:
    """BPSK over per-symbol effective scalar gains ``u^H H_n v``.

    Combined noise ``u^H n`` is CN(0, noise_var) for unit-norm ``u``.
    """
    n = len(eff_gain)
    if n == 0:
        return 0, 0
    bits = rng.integers(0, 2, n)
    return bpsk_errors(eff_gain, bits, complex_normal(rng, n, noise_var)), n


def transmit_data_block(H_seq, precoder, combiner, snr_db: float, rng) -> tuple[int, int]:
    """Send one BPSK symbol through each channel matrix in ``H_seq``."""
    H_seq = np.asarray(H_seq)
    eff = np.einsum("i,nij,j->n", combiner.conj(), H_seq, precoder)
    return transmit_effective(eff, 10.0 ** (-snr_db / 10.0), rng)


def nmse(H_true: np.ndarray, H_hat: np.ndarray) -> float:
    """Normalized squared error; ``nan`` when the true channel is zero."""
    den = np.sum(np.abs(H_true) ** 2)
    if den == 0:
        return float("nan")
    return float(np.sum(np.abs(H_true - H_hat) ** 2) / den)


def overhead(schedule) -> float:
    train = schedule.count(Slot.COMMON) + schedule.count(Slot.DEDICATED)
    return train / schedule.total_symbols


class ChannelTrajectory:
    """Per-symbol ground truth for one run.

    The trajectory depends only on the config's channel parameters and the
    channel random stream, never on the training mode, so runs with the
    same seed see the same channel.
    """

    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.geom_b = ArrayGeometry(cfg.N_b, cfg.element_spacing)
        self.geom_m = ArrayGeometry(cfg.N_m, cfg.element_spacing)
        self.grid_b = AngleGrid(cfg.M_b)
        self.grid_m = AngleGrid(cfg.M_m)
        n, L = cfg.total_symbols, cfg.L
        init = random_state(L, cfg.M_b, cfg.M_m, rng)
        aod0 = self.grid_b.angle(init.aod_bins)
        aoa0 = self.grid_m.angle(init.aoa_bins)
        step = cfg.beta / np.sqrt(2.0)
        inc = step * rng.standard_normal((2, L, n))
        inc[:, :, 0] = 0.0
        self.aod = fold_angle(aod0[:, None] + np.cumsum(inc[0], axis=1))
        self.aoa = fold_angle(aoa0[:, None] + np.cumsum(inc[1], axis=1))
        self.aod_bins = self.grid_b.nearest_bin(self.aod)
        self.aoa_bins = self.grid_m.nearest_bin(self.aoa)
        self.gains = self._gains(init.gains, rng)
        flat = self.aod_bins * cfg.M_m + self.aoa_bins
        srt = np.sort(flat, axis=0)
        self.merged = np.any(srt[1:] == srt[:-1], axis=0) if L > 1 else np.zeros(n, bool)

    def _gains(self, g0: np.ndarray, rng) -> np.ndarray:
        cfg = self.cfg
        n, L, rho = cfg.total_symbols, cfg.L, cfg.rho
        c = np.sqrt(1.0 - rho**2)
        if cfg.gain_step == "symbol":
            v = complex_normal(rng, (L, n))
            v[:, 0] = 0.0
            # alpha_n = rho alpha_{n-1} + c v_n with alpha_0 = g0
            out = lfilter([c], [1.0, -rho], v, axis=1, zi=g0[:, None])[0]
            out[:, 0] = g0
            return out
        n_per = -(-n // cfg.T_c)
        v = complex_normal(rng, (L, n_per))
        per = np.empty((L, n_per), dtype=complex)
        per[:, 0] = g0
        for k in range(1, n_per):
            per[:, k] = rho * per[:, k - 1] + c * v[:, k]
        return np.repeat(per, cfg.T_c, axis=1)[:, :n]

    def dense(self, k: int) -> np.ndarray:
        if self.cfg.off_grid:
            return dense_from_angles(self.gains[:, k], self.aod[:, k], self.aoa[:, k], self.geom_b, self.geom_m)
        return dense_from_angles(
            self.gains[:, k],
            self.grid_b.angle(self.aod_bins[:, k]),
            self.grid_m.angle(self.aoa_bins[:, k]),
            self.geom_b,
            self.geom_m,
        )

    def effective_gains(self, start: int, stop: int, v: np.ndarray, u: np.ndarray, A_b, A_m) -> np.ndarray:
        """``u^H H_n v`` for symbols ``start <= n < stop``."""
        if stop <= start:
            return np.zeros(0, dtype=complex)
        g = self.gains[:, start:stop]
        if self.cfg.off_grid:
            L, n = g.shape
            um = (u.conj() @ steering_vector(self.geom_m, self.aoa[:, start:stop].ravel())).reshape(L, n)
            vb = (steering_vector(self.geom_b, self.aod[:, start:stop].ravel()).conj().T @ v).reshape(L, n)
        else:
            um = (u.conj() @ A_m)[self.aoa_bins[:, start:stop]]
            vb = (A_b.conj().T @ v)[self.aod_bins[:, start:stop]]
        return np.sum(g * um * vb, axis=0)


def prior_width(cfg: SimConfig, period: int, M: int) -> float:
    """Kernel width in bins used by the estimator for one ``period``.

    With ``quantized_prior`` the kernel variance also carries the spread
    of the true angle inside its bin (uniform, 1/12 bin^2 at each end of
    the step, and the kernel variance is half of sigma^2), so a walk much
    shorter than a bin can still change the quantized bin.
    """
    s = MobilityModel(cfg.beta, cfg.rho).sigma_l_bins(period, M)
    if cfg.quantized_prior and cfg.beta > 0:
        return float(np.sqrt(s**2 + 1.0 / 3.0))
    return float(s)


def _transitions(cfg: SimConfig, period: int):
    T_b = transition_matrix(cfg.M_b, prior_width(cfg, period, cfg.M_b))
    T_m = transition_matrix(cfg.M_m, prior_width(cfg, period, cfg.M_m))
    return T_b, T_m


def run_scenario(cfg: SimConfig) -> MetricsReport:
    """Simulate one configuration; deterministic in ``cfg.rng_seed``."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(3)
    rng_channel, rng_train, rng_data = (np.random.default_rng(s) for s in seeds)
    # bits and receiver noise are drawn per symbol slot, so every mode sees
    # the same draw at the same slot
    data_bits = rng_data.integers(0, 2, cfg.total_symbols)
    data_noise = complex_normal(rng_data, cfg.total_symbols, cfg.noise_var)

    schedule = schedule_frames(cfg)
    traj = ChannelTrajectory(cfg, rng_channel)
    A_b = dictionary_matrix(traj.geom_b, traj.grid_b)
    A_m = dictionary_matrix(traj.geom_m, traj.grid_m)
    F_common = cycling_beams(cfg.N_c, traj.geom_b)
    W_common = dft_combiner(cfg.N_m)
    noise_var = cfg.noise_var

    period = cfg.T_d if cfg.dedicated else cfg.T_c
    T_b, T_m = _transitions(cfg, period)
    est_kw = dict(last_term=cfg.last_term, prior_floor=cfg.prior_floor)
    state: EstimatorState | None = None
    if cfg.estimator_name == "greedy_map":
        state = EstimatorState(
            SupportPosterior.uniform(cfg.L, cfg.M_b, cfg.M_m, cfg.factored),
            cfg.gain_prior_var, noise_var, T_b, T_m, **est_kw,
        )
    table = None
    if cfg.dedicated:
        codebook = BeamCodebook.uniform(traj.geom_b, cfg.codebook_size or cfg.M_b)
        table = CrlbTable(codebook, traj.geom_b, AngleGrid(cfg.M_b), sigma2=noise_var)

    report = MetricsReport(0.0, 0.0, overhead(schedule), 0, 0, 0)
    report.merged_symbols = int(np.count_nonzero(traj.merged))
    v = u = None
    initialized = False
    cursor = 0

    def send(stop):
        nonlocal cursor
        if v is not None and stop > cursor:
            eff = traj.effective_gains(cursor, stop, v, u, A_b, A_m)
            sl = slice(cursor, stop)
            report.bit_errors += bpsk_errors(eff, data_bits[sl], data_noise[sl])
            report.data_bits += stop - cursor
        cursor = max(cursor, stop)

    for start, length, slot in schedule.bursts():
        send(start)
        H = traj.dense(start)
        if slot == Slot.COMMON or not initialized:
            F, W = F_common, W_common
            beams = None
        else:
            post = state.posterior
            paths = range(cfg.L)
            if cfg.beam_allocation == "dominant":
                paths = [int(np.argmax(np.abs(est.gains)))]
            marg = [post.aod_marginal(l) for l in paths]
            if cfg.mode == Mode.DEDICATED_SINGLE.value:
                beams = select_single_beams(table, marg)
            else:
                beams = select_multipath_beams(table, marg)
            F = table.codebook.beams(beams)
            if cfg.combiner == "dft":
                W = W_common
            elif cfg.oracle_combiner:
                aoa = traj.grid_m.angle(traj.aoa_bins[:, start]) if not cfg.off_grid else traj.aoa[:, start]
                W = ideal_combiner(aoa, traj.geom_m)
            else:
                aoa = traj.grid_m.angle(np.array([np.argmax(post.aoa_marginal(l)) for l in range(cfg.L)]))
                W = ideal_combiner(aoa, traj.geom_m)
        Y = simulate_measurement_dense(H, F, W, noise_var, rng_train)
        y = Y.reshape(-1, order="F")
        Phi = KroneckerSensing(F, W, A_b, A_m)

        if cfg.estimator_name == "omp" or (cfg.dedicated and not initialized):
            est = omp_estimate(y, Phi, cfg.L)
            if cfg.dedicated:
                state = EstimatorState.from_estimate(
                    est, T_b, T_m, cfg.gain_prior_var, noise_var, cfg.factored, **est_kw
                )
        else:
            est, state = greedy_map_estimate(y, Phi, state)
        initialized = True

        H_hat = estimate_to_dense(est, A_b, A_m)
        e = nmse(H, H_hat)
        if math.isnan(e):
            report.undefined_nmse += 1
        report.nmse_trace.append(e)
        true_flat = traj.aod_bins[:, start] * cfg.M_m + traj.aoa_bins[:, start]
        report.support_trace.append(int(np.isin(true_flat, est.support).sum()))
        report.beams_trace.append(tuple(beams) if beams is not None else None)
        if state is not None:
            report.entropy_trace.append(state.posterior.entropy())
        v, u, degraded = svd_precoder(H_hat)
        report.degraded_links += int(degraded)
        cursor = start + length
    send(cfg.total_symbols)

    report.data_symbols = report.data_bits
    report.ber = report.bit_errors / report.data_bits if report.data_bits else float("nan")
    trace = np.array(report.nmse_trace, dtype=float)
    report.nmse = float(np.nanmean(trace)) if np.isfinite(trace).any() else float("nan")
    return report


def bpsk_ber_theory(snr_db) -> np.ndarray:
    """Q(sqrt(2 SNR)) for a unit-gain scalar channel."""
    snr = 10.0 ** (np.asarray(snr_db) / 10.0)
    return q_function(np.sqrt(2.0 * snr))


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    return replace(cfg, **kw)
