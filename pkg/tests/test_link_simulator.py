import math
from dataclasses import replace

import numpy as np
import pytest

from beamtrain.array_channel import dictionary_matrix
from beamtrain.link_simulator import (
    ChannelTrajectory,
    ConfigError,
    SimConfig,
    bpsk_ber_theory,
    bpsk_errors,
    nmse,
    overhead,
    prior_width,
    q_function,
    run_scenario,
    schedule_frames,
    svd_precoder,
    transmit_data_block,
    transmit_effective,
)
from beamtrain.training_protocol import Slot, make_schedule


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


# -- precoder --------------------------------------------------------------------------------

def test_svd_precoder_eigen_oracle():
    rng = np.random.default_rng(0)
    H = crandn(rng, 8, 8)
    v, u, degraded = svd_precoder(H)
    top = np.sqrt(np.linalg.eigvalsh(H.conj().T @ H)[-1])
    assert not degraded
    assert abs(abs(u.conj() @ H @ v) - top) < 1e-10
    assert abs(np.linalg.norm(v) - 1) < 1e-12 and abs(np.linalg.norm(u) - 1) < 1e-12


def test_svd_precoder_rank_one():
    rng = np.random.default_rng(1)
    a = crandn(rng, 6)
    b = crandn(rng, 4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    H = 2.5 * np.outer(a, b.conj())
    v, u, _ = svd_precoder(H)
    assert abs(abs(np.vdot(v, b)) - 1) < 1e-12
    assert abs(abs(np.vdot(u, a)) - 1) < 1e-12
    assert abs(u.conj() @ H @ v - 2.5) < 1e-12


def test_svd_precoder_identity_and_zero():
    v, u, _ = svd_precoder(np.eye(4))
    assert abs(abs(u.conj() @ np.eye(4) @ v) - 1) < 1e-12
    v, u, degraded = svd_precoder(np.zeros((3, 5)))
    assert degraded
    np.testing.assert_array_equal(v, np.eye(5)[0])
    np.testing.assert_array_equal(u, np.eye(3)[0])


# -- BPSK ------------------------------------------------------------------------------------

def test_noiseless_static_perfect_csi():
    rng = np.random.default_rng(2)
    H = crandn(rng, 4, 4)
    v, u, _ = svd_precoder(H)
    H_seq = np.repeat(H[None], 10_000, axis=0)
    errors, n = transmit_data_block(H_seq, v, u, 300.0, rng)
    assert (errors, n) == (0, 10_000)


def test_orthogonal_precoder_coin_flip():
    rng = np.random.default_rng(3)
    H = np.zeros((2, 2), complex)
    H[0, 0] = 1.0
    H_seq = np.repeat(H[None], 10_000, axis=0)
    errors, n = transmit_data_block(H_seq, np.array([0, 1.0]), np.array([1.0, 0]), 10.0, rng)
    assert abs(errors / n - 0.5) < 0.02


def test_scalar_channel_matches_q_function():
    # Q(sqrt(20)) ~ 3.9e-6, so 1e8 bits are needed for ~400 errors
    rng = np.random.default_rng(4)
    errors = n = 0
    for _ in range(20):
        e, k = transmit_effective(np.ones(5_000_000, complex), 0.1, rng)
        errors += e
        n += k
    ref = q_function(np.sqrt(2 * 10.0))
    assert abs(errors / n / ref - 1) < 0.15
    assert abs(bpsk_ber_theory(10.0) - ref) < 1e-18


def test_bpsk_errors_counting():
    bits = np.array([0, 1, 1, 0])
    assert bpsk_errors(np.ones(4), bits, np.zeros(4)) == 0
    assert bpsk_errors(-np.ones(4), bits, np.zeros(4)) == 4
    assert bpsk_errors(np.ones(4), bits, np.array([0, -2.0, 0, 2.0])) == 2
    assert transmit_effective(np.zeros(0), 1.0, np.random.default_rng(0)) == (0, 0)


# -- metrics ---------------------------------------------------------------------------------

def test_nmse_examples():
    rng = np.random.default_rng(5)
    H = crandn(rng, 5, 3)
    assert nmse(H, H) == 0
    assert abs(nmse(H, 0 * H) - 1) < 1e-15
    assert abs(nmse(H, 2 * H) - 1) < 1e-15
    G = crandn(rng, 5, 3)
    ref = sum(abs(H[i, j] - G[i, j]) ** 2 for i in range(5) for j in range(3))
    ref /= sum(abs(H[i, j]) ** 2 for i in range(5) for j in range(3))
    assert abs(nmse(H, G) - ref) < 1e-12
    assert math.isnan(nmse(np.zeros((2, 2)), G[:2, :2]))


def test_overhead_examples():
    assert overhead(make_schedule(100_000, 1000, 32)) == 0.032
    assert overhead(make_schedule(100_000, 100, 32)) == 0.32
    s = make_schedule(1_000_000, 1000, 32, T_d=500, N_d=2)
    # one dedicated instant per frame survives the collision rule
    assert s.count(Slot.DEDICATED) == 2 * 1000
    assert overhead(s) == (32_000 + 2_000) / 1_000_000


def test_overhead_is_label_count():
    cfg = SimConfig(mode="DedicatedDual", T_d=200, total_symbols=10_000)
    s = schedule_frames(cfg)
    train = np.count_nonzero(s.labels != Slot.DATA)
    assert overhead(s) == train / 10_000
    assert s.count(Slot.DEDICATED) == cfg.dedicated_burst_length * 40


def test_burst_length_conventions():
    assert SimConfig(mode="DedicatedDual").dedicated_burst_length == 6
    assert SimConfig(mode="DedicatedDual", beam_allocation="dominant").dedicated_burst_length == 2
    assert SimConfig(mode="DedicatedSingle").dedicated_burst_length == 3
    assert SimConfig().dedicated_burst_length == 0


# -- configuration ----------------------------------------------------------------------------

@pytest.mark.parametrize(
    "kw,msg",
    [
        (dict(N_c=64, T_c=32), "N_c exceeds T_c"),
        (dict(mode="DedicatedDual", T_d=1000), "T_d must be shorter"),
        (dict(mode="DedicatedDual", T_d=4), "N_d exceeds T_d"),
        (dict(mode="DedicatedDual", N_d=3), "N_d must be 2"),
        (dict(mode="DedicatedSingle", N_d=2), "N_d must be 1"),
        (dict(mode="Kalman"), "unknown mode"),
        (dict(estimator="amp"), "unknown estimator"),
        (dict(rho=1.5), "rho"),
        (dict(beta=-1.0), "beta"),
        (dict(L=0), "L must be positive"),
        (dict(combiner="mmse"), "combiner"),
    ],
)
def test_config_validation(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        run_scenario(SimConfig(total_symbols=100, **kw))


def test_prior_width():
    cfg = SimConfig(beta=0.002, M_b=64)
    s = 0.002 * np.sqrt(100) * 64 / 2
    assert abs(prior_width(cfg, 100, 64) - np.sqrt(s**2 + 1 / 3)) < 1e-12
    assert abs(prior_width(SimConfig(beta=0.002, quantized_prior=False), 100, 64) - s) < 1e-12
    assert prior_width(SimConfig(beta=0.0), 100, 64) == 0.0


# -- ground truth ------------------------------------------------------------------------------

def test_trajectory_is_mode_independent():
    a = SimConfig(total_symbols=3000, rng_seed=7)
    b = SimConfig(total_symbols=3000, rng_seed=7, mode="DedicatedDual", T_d=100)
    ta = ChannelTrajectory(a, np.random.default_rng(np.random.SeedSequence(7).spawn(3)[0]))
    tb = ChannelTrajectory(b, np.random.default_rng(np.random.SeedSequence(7).spawn(3)[0]))
    np.testing.assert_array_equal(ta.aod_bins, tb.aod_bins)
    np.testing.assert_array_equal(ta.gains, tb.gains)


def test_trajectory_static_when_beta_zero_rho_one():
    cfg = SimConfig(total_symbols=500, beta=0.0, rho=1.0)
    t = ChannelTrajectory(cfg, np.random.default_rng(0))
    assert np.all(t.aod_bins == t.aod_bins[:, :1]) and np.all(t.aoa_bins == t.aoa_bins[:, :1])
    assert np.all(t.gains == t.gains[:, :1])


def test_trajectory_gain_correlation():
    cfg = SimConfig(total_symbols=200_000, L=1, rho=0.999)
    g = ChannelTrajectory(cfg, np.random.default_rng(1)).gains[0]
    lag = 100
    c = np.vdot(g[:-lag], g[lag:]) / np.vdot(g, g)
    assert abs(c.real - 0.999**lag) < 0.1


def test_effective_gains_match_dense():
    cfg = SimConfig(N_b=8, N_m=8, M_b=16, M_m=16, total_symbols=50, beta=0.01)
    for off in (False, True):
        t = ChannelTrajectory(replace(cfg, off_grid=off), np.random.default_rng(2))
        A_b, A_m = dictionary_matrix(t.geom_b, t.grid_b), dictionary_matrix(t.geom_m, t.grid_m)
        rng = np.random.default_rng(3)
        v = crandn(rng, 8)
        u = crandn(rng, 8)
        eff = t.effective_gains(10, 20, v, u, A_b, A_m)
        ref = [u.conj() @ t.dense(k) @ v for k in range(10, 20)]
        np.testing.assert_allclose(eff, ref, atol=1e-12)


# -- end to end -------------------------------------------------------------------------------

SMALL = dict(N_b=8, N_m=8, M_b=32, M_m=32, L=2, N_c=16, T_c=500, total_symbols=10_000)


def test_deterministic_reports():
    for mode in ("ConventionalCycling", "DedicatedDual"):
        cfg = SimConfig(**SMALL, mode=mode, T_d=100, rng_seed=3)
        a, b = run_scenario(cfg).to_dict(), run_scenario(cfg).to_dict()
        assert a == b
    c = run_scenario(SimConfig(**SMALL, rng_seed=4)).to_dict()
    assert c["nmse_trace"] != a["nmse_trace"]


def test_static_channel_sanity():
    cfg = SimConfig(beta=0.0, rho=1.0, snr_db=30.0, total_symbols=20_000, rng_seed=1)
    r = run_scenario(cfg)
    assert r.ber < 1e-4
    assert r.nmse < 1e-3
    assert r.data_bits == 20_000 - 20 * 32


def test_ber_monotone_in_snr_static():
    bers = [
        run_scenario(SimConfig(beta=0.0, rho=1.0, snr_db=s, total_symbols=100_000, T_c=10_000, rng_seed=2)).ber
        for s in (0, 5, 10, 15)
    ]
    assert all(b1 >= b2 for b1, b2 in zip(bers, bers[1:]))


def test_single_beam_nmse_worse_than_dual():
    worse = 0
    for seed in range(1, 4):
        kw = dict(T_d=100, beta=0.002, total_symbols=20_000, rng_seed=seed)
        dual = run_scenario(SimConfig(mode="DedicatedDual", **kw)).nmse
        single = run_scenario(SimConfig(mode="DedicatedSingle", **kw)).nmse
        worse += single > dual
    assert worse == 3


def test_report_fields():
    r = run_scenario(SimConfig(**SMALL, mode="DedicatedDual", T_d=100))
    n_bursts = 10_000 // 100  # common instants replace the colliding dedicated ones
    assert len(r.nmse_trace) == n_bursts
    assert len(r.beams_trace) == n_bursts and len(r.entropy_trace) == n_bursts
    assert r.beams_trace[0] is None and len(r.beams_trace[1]) == 4
    assert 0 <= r.ber <= 1 and r.nmse >= 0
    assert r.data_bits + 20 * 16 + 80 * 4 == 10_000
    assert all(0 <= k <= 2 for k in r.support_trace)
