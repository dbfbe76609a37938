import numpy as np
import pytest
import torch

import oracles
from hspan.datamodel import HSICube
from hspan.degrade import DegradeSpec, make_sample
from hspan.dip import (
    DIPConfig,
    baseline_upsample,
    build_generator,
    downsample,
    optimize_dip,
    qss_energy,
    spectral_energy,
    upsample,
)
from hspan.errors import DimensionMismatchError, ParameterError
from hspan.srf import SRFParams, spatial_energy


def _small(**kw):
    base = dict(
        noise_channels=8,
        n_down=(8, 8, 8), k_down=(3, 3, 3),
        n_up=(8, 8, 8), k_up=(3, 3, 3),
        n_skip=(2, 2, 2), k_skip=(1, 1, 1),
        iterations=5,
    )
    base.update(kw)
    return DIPConfig(**base)


def _sample(bands=3, side=16, beta=2, k=2, seed=0):
    ref = HSICube(np.random.default_rng(seed).random((bands, side, side)).astype(np.float32))
    return make_sample(ref, DegradeSpec(beta=beta, pan_band_count=k))


# --- generator shapes ---------------------------------------------------------


@pytest.mark.parametrize("side, bands", [(160, 102), (120, 145)])
def test_generator_output_shape_real_sizes(side, bands):
    net = build_generator(DIPConfig(), bands)
    with torch.no_grad():
        out = net(torch.rand(1, 32, side, side) * 0.1)
    assert out.shape == (1, bands, side, side)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


@pytest.mark.parametrize("side", [1, 7, 33])
def test_generator_odd_sizes(side):
    net = build_generator(_small(), 2)
    assert net(torch.rand(1, 8, side, side)).shape == (1, 2, side, side)


def test_zero_skip_width():
    net = build_generator(_small(n_skip=(0, 0, 0)), 2)
    assert net(torch.rand(1, 8, 8, 8)).shape == (1, 2, 8, 8)


def test_config_rejects_ragged_lists():
    with pytest.raises(ParameterError):
        DIPConfig(n_down=(8, 8))
    with pytest.raises(ParameterError):
        DIPConfig(lam=-0.1)


# --- energies -------------------------------------------------------------------


def test_spectral_energy_zero_for_consistent_pair():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    y = downsample(x, 2)
    assert float(spectral_energy(x, y, 2)) == pytest.approx(0.0, abs=1e-15)


def test_spectral_energy_offset():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    y = downsample(x, 2)
    # blur is DC-preserving, so a constant shift of x shifts d(x) by the same amount
    assert float(spectral_energy(x + 0.1, y, 2)) == pytest.approx(0.1, abs=1e-12)


def test_matched_downsampler_agrees_with_oracle():
    x = np.random.default_rng(3).random((2, 8, 8))
    got = downsample(torch.as_tensor(x), 2).numpy()
    np.testing.assert_allclose(got, oracles.blur_downsample(x, 8, 0.4247 * 2, 2), atol=1e-12)


@pytest.mark.parametrize("beta", [2, 3, 4])
def test_lanczos2_agrees_with_oracle(beta):
    img = np.random.default_rng(beta).random((4 * beta, 4 * beta))
    got = downsample(torch.as_tensor(img), beta, mode="lanczos2").numpy()
    np.testing.assert_allclose(got, oracles.lanczos2_downsample(img, beta), atol=1e-12)


def test_spectral_energy_shape_checks():
    with pytest.raises(DimensionMismatchError):
        spectral_energy(torch.zeros(3, 8, 8), torch.zeros(3, 3, 4), 2)
    with pytest.raises(DimensionMismatchError):
        spectral_energy(torch.zeros(3, 8, 8), torch.zeros(2, 4, 4), 2)


def test_qss_lambda_zero_is_spectral():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    y = torch.rand(3, 4, 4, dtype=torch.float64)
    pan = torch.rand(8, 8, dtype=torch.float64)
    srf = SRFParams(3, dtype=torch.float64).freeze()
    e = qss_energy(x, y, pan, srf, 0.0, 2)
    assert float(e.total) == float(spectral_energy(x, y, 2))
    e8 = qss_energy(x, y, pan, srf, 0.8, 2)
    assert float(e8.total) == pytest.approx(float(e.spectral + 0.8 * spatial_energy(x, pan, srf)), abs=1e-15)


# --- optimization -------------------------------------------------------------


def test_single_iteration_run():
    s = _sample()
    cube, state = optimize_dip(s, _small(iterations=1))
    assert cube.shape == (3, 16, 16)
    assert cube.data.dtype == np.float32
    assert len(state.energy_trace) == 1
    assert state.response.shape == (3,)
    assert abs(state.response.sum() - 1) < 1e-6


def test_noise_is_fixed_and_seeded():
    s = _sample()
    _, a = optimize_dip(s, _small(iterations=3))
    _, b = optimize_dip(s, _small(iterations=3))
    assert a.z_digest() == b.z_digest()
    assert float(a.z.min()) >= 0.0 and float(a.z.max()) <= 0.1
    _, c = optimize_dip(s, _small(iterations=3, seed=1))
    assert c.z_digest() != a.z_digest()


def test_seed_determinism():
    s = _sample()
    x1, st1 = optimize_dip(s, _small(iterations=4))
    x2, st2 = optimize_dip(s, _small(iterations=4))
    assert x1.data.tobytes() == x2.data.tobytes()
    assert st1.energy_trace == st2.energy_trace


def test_energy_decreases():
    s = _sample(side=16)
    _, state = optimize_dip(s, _small(iterations=60, lr=1e-2))
    first = state.energy_trace[0][1] + 0.8 * state.energy_trace[0][2]
    last = state.energy_trace[-1][1] + 0.8 * state.energy_trace[-1][2]
    assert last < first


def test_lambda_zero_frozen_srf_matches_spectral_only():
    s = _sample()
    _, a = optimize_dip(s, _small(iterations=6, lam=0.0, train_srf=False))
    _, b = upsample(s, "dip-spectral", _small(iterations=6, train_srf=False))
    assert [t[1] for t in a.energy_trace] == [t[1] for t in b.energy_trace]


def test_lanczos_downsampler_runs():
    _, state = optimize_dip(_sample(), _small(iterations=2, downsampler="lanczos2"))
    assert len(state.energy_trace) == 2


def test_generator_gradient_check():
    torch.manual_seed(0)
    cfg = _small(noise_channels=2, n_down=(3,), k_down=(3,), n_up=(3,), k_up=(3,), n_skip=(1,), k_skip=(1,))
    net = build_generator(cfg, 2).double().eval()
    z = torch.rand(1, 2, 4, 4, dtype=torch.float64)
    y = torch.rand(1, 2, 2, 2, dtype=torch.float64)
    loss = lambda: ((downsample(net(z), 2) - y) ** 2).mean()  # noqa: E731
    params = [net.head.weight, net.down[0][0].weight]
    grads = torch.autograd.grad(loss(), params)
    eps = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(loss())
                flat[i] = orig - eps
                down = float(loss())
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = float(g.view(-1)[i])
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6)


# --- baselines -----------------------------------------------------------------


def test_nearest_block_replication():
    y = HSICube(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = baseline_upsample(y, 2, "nearest").data
    np.testing.assert_array_equal(out[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_bicubic_constant():
    y = HSICube(np.full((2, 5, 5), 0.3))
    np.testing.assert_allclose(baseline_upsample(y, 3, "bicubic").data, 0.3, atol=1e-12)


@pytest.mark.parametrize("beta", [2, 3, 4])
def test_bicubic_agrees_with_oracle(beta):
    img = np.random.default_rng(beta).random((5, 6))
    out = baseline_upsample(HSICube(img[None]), beta, "bicubic").data[0]
    np.testing.assert_allclose(out, oracles.bicubic_upsample(img, beta), atol=1e-12)


def test_unknown_method():
    with pytest.raises(ParameterError):
        upsample(_sample(), "lanczos")


def test_lanczos2_spectral_energy_matches_oracle():
    rng = np.random.default_rng(11)
    x = rng.random((4, 16, 16))
    y = rng.random((4, 8, 8))
    expected = np.mean([np.abs(oracles.lanczos2_downsample(x[b], 2) - y[b]).mean() for b in range(4)])
    got = float(spectral_energy(torch.as_tensor(x), torch.as_tensor(y), 2, mode="lanczos2"))
    assert got == pytest.approx(expected, abs=1e-12)


def test_qss_vanishes_when_both_residuals_do():
    # a spectrally flat constant cube: d(x) = y and every convex band mix equals the PAN
    x = torch.full((3, 8, 8), 0.4, dtype=torch.float64)
    y = torch.full((3, 4, 4), 0.4, dtype=torch.float64)
    pan = torch.full((8, 8), 0.4, dtype=torch.float64)
    srf = SRFParams(3, generator=torch.Generator().manual_seed(0), dtype=torch.float64).freeze()
    for lam in (0.0, 0.8, 5.0):
        assert float(qss_energy(x, y, pan, srf, lam, 2).total) == pytest.approx(0.0, abs=1e-15)


def test_output_shape_independent_of_lambda():
    s = _sample()
    a, _ = optimize_dip(s, _small(iterations=1, lam=0.0))
    b, _ = optimize_dip(s, _small(iterations=1, lam=0.8))
    assert a.shape == b.shape == (3, 16, 16)
