import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qatnrx.autodiff import ConfigurationError
from qatnrx.phy import (
    ChannelProfile,
    ChannelRealization,
    Link,
    LinkConfig,
    Tap,
    apply_channel,
    available_profiles,
    constellation,
    generate_channel,
    hard_demap,
    lmmse_equalize,
    load_profile,
    ls_estimate,
    ls_lmmse_receive,
    perfect_csi_receive,
    qam_map,
    snr_to_noise_var,
    soft_demap,
)
from qatnrx.phy.modulation import bit_labels
from qatnrx.phy.receivers import interp_matrix

GOLDEN = Path(__file__).parent / "golden"


# -- modulation -----------------------------------------------------------------


def test_qpsk_zero_bits():
    assert qam_map(np.array([0, 0]), 2)[0] == pytest.approx((1 + 1j) / np.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_unit_average_power(m):
    assert np.mean(np.abs(constellation(m)) ** 2) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_gray_neighbours_differ_in_one_bit(m):
    pts = constellation(m)
    labels = bit_labels(m)
    step = np.min(np.abs(pts[1:] - pts[0]))
    for i in range(len(pts)):
        for j in range(len(pts)):
            if i != j and abs(abs(pts[i] - pts[j]) - step) < 1e-9:
                assert np.sum(labels[i] != labels[j]) == 1


@pytest.mark.parametrize("m", [2, 4, 6])
def test_gray_tables_golden(m):
    golden = json.loads((GOLDEN / "gray_tables.json").read_text())[str(m)]
    expected = np.array([complex(*map(float, row.split())) for row in golden])
    np.testing.assert_array_equal(constellation(m), expected)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_hard_demap_round_trip(m):
    bits = np.random.default_rng(m).integers(0, 2, size=(3, 60 * m))
    np.testing.assert_array_equal(hard_demap(qam_map(bits, m), m), bits)


def test_map_length_mismatch():
    with pytest.raises(ConfigurationError):
        qam_map(np.zeros(5, dtype=int), 2)
    with pytest.raises(ConfigurationError):
        qam_map(np.zeros(6, dtype=int), 3)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_soft_demap_signs_on_points(m):
    pts = constellation(m)
    llr = soft_demap(pts, 1e-3, m)
    np.testing.assert_array_equal((llr < 0).astype(np.int8), bit_labels(m))


def test_qpsk_llr_closed_form():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50) + 1j * rng.normal(size=50)
    rho = rng.uniform(0.1, 2, size=50)
    llr = soft_demap(x, rho, 2)
    np.testing.assert_allclose(llr[:, 0], 2 * np.sqrt(2) * x.real / rho, rtol=1e-12)
    np.testing.assert_allclose(llr[:, 1], 2 * np.sqrt(2) * x.imag / rho, rtol=1e-12)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_soft_demap_symmetry_and_erasure(m):
    # the origin is equidistant only for the two sign bits
    llr = soft_demap(np.array([0j]), 0.5, m)[0]
    assert llr[0] == 0 and llr[m // 2] == 0
    if m == 2:
        assert not llr.any()
    assert not soft_demap(np.array([0.3 + 0.1j]), np.inf, m).any()


def test_soft_demap_brute_force_max_log():
    rng = np.random.default_rng(1)
    m = 4
    pts, labels = constellation(m), bit_labels(m)
    for _ in range(20):
        x = complex(rng.normal(), rng.normal())
        rho = rng.uniform(0.2, 3)
        got = soft_demap(np.array([x]), rho, m)[0]
        for b in range(m):
            d = np.abs(x - pts) ** 2
            ref = (min(d[labels[:, b] == 1]) - min(d[labels[:, b] == 0])) / rho
            assert got[b] == pytest.approx(ref, rel=1e-12)


# -- noise bookkeeping ----------------------------------------------------------------


def test_snr_to_noise_var_values():
    assert snr_to_noise_var(0.0, 2, 1.0) == pytest.approx(0.5)
    assert snr_to_noise_var(0.0, 6, 0.5) == pytest.approx(1 / 3)
    assert snr_to_noise_var(10.0, 2) == pytest.approx(snr_to_noise_var(0.0, 2) / 10)
    assert snr_to_noise_var(0.0, LinkConfig()) == pytest.approx(1.0)  # QPSK, rate 1/2


# -- channel ------------------------------------------------------------------


def test_bundled_profiles_load_and_normalise():
    names = available_profiles()
    assert {"cdl_a", "cdl_b", "cdl_c", "cdl_d", "cdl_e"} <= set(names)
    for n in names:
        p = load_profile(n)
        assert p.powers.sum() == pytest.approx(1.0)
    assert load_profile("cdl_d").los and not load_profile("cdl_b").los


def test_unknown_profile():
    with pytest.raises(FileNotFoundError):
        load_profile("cdl_z")


def test_profile_invariants():
    with pytest.raises(ConfigurationError):
        ChannelProfile("bad", (Tap(-1.0, 0.0),))
    with pytest.raises(ConfigurationError):
        ChannelProfile("bad", (Tap(0.0, 0.0, 10.0), Tap(5.0, -3.0, 5.0)))


def test_delay_scaling_hits_target_spread():
    p = load_profile("cdl_b").scaled(55.0)
    assert p.rms_delay_spread_ns == pytest.approx(55.0)


def test_doppler():
    p = load_profile("flat").with_velocity(30.0)
    assert p.doppler(3.5e9) == pytest.approx(30.0 * 3.5e9 / 299_792_458.0)


def test_static_flat_channel_constant_and_rayleigh():
    cfg = LinkConfig(n_rx=1)
    prof = load_profile("flat")
    mags = []
    for seed in range(2000):
        h = generate_channel(prof, cfg, np.random.default_rng(seed)).h
        assert np.allclose(h, h[0, 0, 0])
        mags.append(abs(h[0, 0, 0]))
    mags = np.array(mags)
    # Rayleigh with E|h|^2 = 1: mean |h| = sqrt(pi)/2, P(|h|^2 > 1) = e^-1
    assert np.mean(mags**2) == pytest.approx(1.0, abs=0.08)
    assert np.mean(mags) == pytest.approx(np.sqrt(np.pi) / 2, abs=0.04)
    assert np.mean(mags**2 > 1) == pytest.approx(np.exp(-1), abs=0.035)


def test_static_multitap_constant_in_time_varying_in_frequency():
    cfg = LinkConfig()
    h = generate_channel(load_profile("cdl_b").scaled(100), cfg, np.random.default_rng(3)).h
    np.testing.assert_allclose(h, np.broadcast_to(h[:, :1, :], h.shape), atol=1e-12)
    assert np.ptp(np.abs(h[0, 0])) > 1e-3


def test_independent_antennas():
    cfg = LinkConfig(n_rx=2)
    prof = load_profile("flat")
    pairs = np.array([generate_channel(prof, cfg, np.random.default_rng(s)).h[:, 0, 0] for s in range(3000)])
    corr = np.mean(pairs[:, 0] * np.conj(pairs[:, 1]))
    assert abs(corr) < 0.06


def test_too_few_sinusoids():
    with pytest.raises(ConfigurationError):
        generate_channel(load_profile("flat"), LinkConfig(), np.random.default_rng(0), n_sinusoids=8)


def test_apply_channel_noiseless_identity():
    x = qam_map(np.random.default_rng(0).integers(0, 2, size=(14, 54)), 2)
    y = apply_channel(x, ChannelRealization(np.ones((2, 14, 27), complex), 0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(y, np.broadcast_to(x, (2, 14, 27)))


def test_apply_channel_noise_variance():
    rng = np.random.default_rng(7)
    h = rng.normal(size=(1, 100, 100)) + 1j * rng.normal(size=(1, 100, 100))
    x = np.zeros((100, 100), complex)
    y = apply_channel(x, ChannelRealization(h, 0.3), rng)
    assert np.mean(np.abs(y) ** 2) == pytest.approx(0.3, rel=0.03)
    x = qam_map(rng.integers(0, 2, size=(1000, 2000)), 2)
    h = np.ones((1, 1000, 1000), complex)
    y = apply_channel(x, ChannelRealization(h, 0.7), rng)
    assert np.mean(np.abs(y - h * x) ** 2) == pytest.approx(0.7, rel=0.01)


def test_apply_channel_per_slot_noise():
    rng = np.random.default_rng(1)
    x = np.zeros((2, 50, 50), complex)
    h = np.ones((2, 1, 50, 50), complex)
    y = apply_channel(x, ChannelRealization(h, np.array([0.0, 2.0])), rng)
    assert not y[0].any()
    assert np.mean(np.abs(y[1]) ** 2) == pytest.approx(2.0, rel=0.1)


def test_negative_noise_rejected():
    with pytest.raises(ConfigurationError):
        ChannelRealization(np.ones((1, 2, 2)), -1.0)


# -- LS / LMMSE -----------------------------------------------------------------


def _link():
    return Link(LinkConfig())


def test_interp_matrix_linear_exact():
    W = interp_matrix(np.array([2, 11]), 14, extrapolate=True)
    f = 0.5 + 0.25 * np.arange(14)
    np.testing.assert_allclose(W @ f[[2, 11]], f, atol=1e-12)
    H = interp_matrix(np.array([0, 2, 4]), 6, extrapolate=False)
    np.testing.assert_allclose(H @ np.array([1.0, 3.0, 5.0]), [1, 2, 3, 4, 5, 5])


def test_ls_constant_channel_exact():
    link = _link()
    x = link.pilot_symbols
    h = np.full((2, 14, 27), 0.3 - 0.8j)
    np.testing.assert_allclose(ls_estimate(h * x, x, link.pilot_mask), h, atol=1e-12)


def test_ls_linear_in_time_exact():
    link = _link()
    x = link.pilot_symbols
    t = np.arange(14)[:, None]
    h = np.broadcast_to((0.2 + 0.1j) * t + (1 - 0.5j), (2, 14, 27))
    np.testing.assert_allclose(ls_estimate(h * x, x, link.pilot_mask), h, atol=1e-12)


def test_ls_pilot_error_variance():
    link = _link()
    rng = np.random.default_rng(0)
    nv = 0.2
    x = link.pilot_symbols
    h = np.ones((4000, 2, 14, 27), complex)
    y = apply_channel(np.broadcast_to(x, (4000, 14, 27)), ChannelRealization(h, nv), rng)
    err = (ls_estimate(y, x, link.pilot_mask) - h)[..., link.pilot_mask]
    assert np.mean(np.abs(err) ** 2) == pytest.approx(nv, rel=0.02)


def test_ls_needs_pilots():
    with pytest.raises(ConfigurationError):
        ls_estimate(np.ones((1, 2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))


def test_lmmse_hand_value():
    y = np.array([0.7 + 0.2j, -0.1 + 0.4j]).reshape(2, 1, 1)
    h = np.ones((2, 1, 1), complex)
    eq = lmmse_equalize(y, h, 1.0)
    assert eq.x_hat[0, 0] == pytest.approx((y[0, 0, 0] + y[1, 0, 0]) / 3)
    assert eq.noise_var[0, 0] == pytest.approx(0.5)


def test_lmmse_zero_forcing_limit():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(2, 3, 4)) + 1j * rng.normal(size=(2, 3, 4))
    x = qam_map(rng.integers(0, 2, size=(3, 8)), 2)
    eq = lmmse_equalize(h * x, h, 1e-12)
    np.testing.assert_allclose(eq.x_hat, x, atol=1e-9)


def test_lmmse_erasure():
    eq = lmmse_equalize(np.ones((2, 1, 1), complex), np.zeros((2, 1, 1), complex), 0.5)
    assert eq.x_hat[0, 0] == 0 and np.isinf(eq.noise_var[0, 0])
    llr = perfect_csi_receive(np.ones((2, 1, 1), complex), np.zeros((2, 1, 1), complex), 0.5, 2)
    assert not llr.any()


def test_perfect_csi_noiseless_exact_and_qpsk_form():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(1, 3, 5)) + 1j * rng.normal(size=(1, 3, 5))
    bits = rng.integers(0, 2, size=(3, 10))
    x = qam_map(bits, 2)
    llr = perfect_csi_receive(h * x, h, 1e-9, 2)  # (M, n_sym, n_sc)
    hard = (llr < 0).astype(int)
    np.testing.assert_array_equal(np.moveaxis(hard, 0, -1).reshape(3, 10), bits)
    # single antenna: x_hat/gain = y/h, rho = sigma^2/|h|^2
    nv = 0.3
    y = h * x + 0.1
    llr = perfect_csi_receive(y, h, nv, 2)
    z = (y / h)[0]
    rho = nv / np.abs(h[0]) ** 2
    np.testing.assert_allclose(llr[0], 2 * np.sqrt(2) * z.real / rho, rtol=1e-10)
    assert not perfect_csi_receive(np.zeros_like(y), h, nv, 2).any()


def test_llr_sign_convention_shared_with_classical_chain():
    link = _link()
    rng = np.random.default_rng(5)
    tx = link.transmit(rng, 2)
    h = np.ones((2, 2, 14, 27), complex)
    y = apply_channel(tx.grid.symbols, ChannelRealization(h, 1e-6), rng)
    for llr in (perfect_csi_receive(y, h, 1e-6, 2), ls_lmmse_receive(y, link.pilot_symbols, link.pilot_mask, 1e-6, 2)):
        positive_means_zero = (link.codeword_llrs(llr) < 0).astype(np.int8)
        np.testing.assert_array_equal(positive_means_zero, tx.codewords)


# -- link layout -----------------------------------------------------------------


def test_link_config_validation():
    with pytest.raises(ConfigurationError):
        LinkConfig(dmrs_symbols=(0, 12))
    with pytest.raises(ConfigurationError):
        LinkConfig(bits_per_symbol=3)
    with pytest.raises(ConfigurationError):
        LinkConfig(n_rx=0)
    with pytest.raises(ConfigurationError):
        LinkConfig.from_dict({"n_sym": 14, "bogus": 1})


def test_grid_layout_desk_default():
    link = _link()
    assert link.pilot_mask[[2, 11]].any(axis=1).all()
    assert not link.data_mask[[2, 11]].any()
    assert link.n_data_re == 12 * 27
    assert link.data_bits == 648 and link.codewords_per_slot == 1
    assert np.all(np.abs(link.pilot_symbols[link.pilot_mask]) == pytest.approx(1.0))


def test_grid_too_small_for_codeword():
    with pytest.raises(ConfigurationError):
        Link(LinkConfig(n_sc=8))


def test_transmit_grid_and_bit_positions():
    link = Link(LinkConfig(n_sc=40, bits_per_symbol=4))
    tx = link.transmit(np.random.default_rng(0), 3)
    assert np.all(link.code.syndrome(tx.codewords.reshape(-1, link.code.n)) == 0)
    np.testing.assert_array_equal(tx.grid.symbols[:, link.pilot_mask], np.broadcast_to(link.pilot_symbols[link.pilot_mask], (3, link.pilot_mask.sum())))
    bits = link.bit_grid(tx.slot_bits)
    # every data RE maps back to its bits
    data = tx.grid.symbols[:, link.data_mask]
    mapped = np.moveaxis(bits, 1, -1)[:, link.data_mask]
    np.testing.assert_array_equal(hard_demap(data, 4), mapped.reshape(3, -1))
    np.testing.assert_array_equal(link.codeword_llrs(1 - 2 * bits.astype(float)) < 0, tx.codewords.astype(bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transmit_is_seed_deterministic(seed):
    link = _link()
    a = link.transmit(np.random.default_rng(seed), 2)
    b = link.transmit(np.random.default_rng(seed), 2)
    np.testing.assert_array_equal(a.grid.symbols, b.grid.symbols)
