import json
import math

import numpy as np

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hspan.errors import DimensionMismatchError, ParameterError
from hspan.srf import (
    SRFParams,
    default_bottleneck,
    excite,
    normalize,
    predict_pan,
    save_response,
    spatial_energy,
    squeeze,
)


def test_squeeze_hand():
    x = torch.tensor([[[1.0, 2.0], [1.0, 2.0]], [[4.0, 4.0], [4.0, 4.0]]])
    torch.testing.assert_close(squeeze(x), torch.tensor([1.5, 4.0]))


def test_squeeze_batched():
    x = torch.rand(3, 5, 4, 4, dtype=torch.float64)
    torch.testing.assert_close(squeeze(x)[1], x[1].mean(dim=(1, 2)))


def test_zero_params_uniform():
    params = SRFParams(4).zero_()
    s = excite(torch.rand(4, dtype=torch.float64), params)
    torch.testing.assert_close(s, torch.full((4,), 0.25, dtype=torch.float64))


def test_softmax_hand():
    s = normalize(torch.tensor([math.log(3.0), 0.0], dtype=torch.float64))
    torch.testing.assert_close(s, torch.tensor([0.75, 0.25], dtype=torch.float64))


def test_sigmoid_variant_range():
    params = SRFParams(6, normalization="sigmoid", generator=torch.Generator().manual_seed(0))
    s = excite(torch.rand(6), params)
    assert ((s > 0) & (s < 1)).all()


def test_bottleneck_defaults():
    assert default_bottleneck(102) == 12
    assert default_bottleneck(4) == 4
    assert SRFParams(145).w1.shape == (18, 145)


def test_bad_args():
    with pytest.raises(ParameterError):
        SRFParams(0)
    with pytest.raises(ParameterError):
        SRFParams(4, normalization="relu")


def test_predict_pan_hand():
    x = torch.stack([torch.full((2, 2), 2.0), torch.full((2, 2), 4.0)])
    torch.testing.assert_close(predict_pan(x, [0.5, 0.5]), torch.full((2, 2), 3.0))
    torch.testing.assert_close(predict_pan(x, [1.0, 0.0]), x[0])


def test_predict_pan_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        predict_pan(torch.zeros(3, 2, 2), [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_predict_pan_linear(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    x1 = torch.rand(5, 3, 3, generator=g, dtype=torch.float64)
    x2 = torch.rand(5, 3, 3, generator=g, dtype=torch.float64)
    s = torch.softmax(torch.randn(5, generator=g, dtype=torch.float64), 0)
    torch.testing.assert_close(predict_pan(a * x1 + b * x2, s), a * predict_pan(x1, s) + b * predict_pan(x2, s))


def test_response_sums_to_one_random_draws():
    g = torch.Generator().manual_seed(123)
    for _ in range(1000):
        bands = int(torch.randint(1, 40, (1,), generator=g))
        params = SRFParams(bands, generator=g, dtype=torch.float64)
        with torch.no_grad():
            params.w1.mul_(10.0)
            s = params(torch.rand(bands, 4, 4, generator=g, dtype=torch.float64) * 5)
        assert (s >= 0).all()
        assert abs(float(s.sum()) - 1.0) < 1e-6


def test_zero_params_energy_is_l1_to_band_mean():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(4, 6, 6, generator=g, dtype=torch.float64)
    pan = torch.rand(6, 6, generator=g, dtype=torch.float64)
    params = SRFParams(4, dtype=torch.float64).zero_().freeze()
    expected = (x.mean(dim=0) - pan).abs().mean()
    assert float(spatial_energy(x, pan, params)) == pytest.approx(float(expected), abs=1e-15)


def test_spatial_energy_dims_mismatch():
    with pytest.raises(DimensionMismatchError):
        spatial_energy(torch.zeros(4, 6, 6), torch.zeros(5, 6), SRFParams(4))


def _fd_check(fn, tensors, eps=1e-6):
    """Max relative error between autograd and central differences."""
    out = fn()
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    for t, gr in zip(tensors, grads):
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            an = float(gr.view(-1)[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
    return worst


def test_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(7)
    x = torch.rand(4, 8, 8, generator=g, dtype=torch.float64)
    pan = torch.rand(8, 8, generator=g, dtype=torch.float64)
    params = SRFParams(4, generator=g, dtype=torch.float64)
    # the squared form keeps the check away from the |.| kink
    err = _fd_check(lambda: ((predict_pan(x, params(x)) - pan) ** 2).mean(), [params.w1, params.w2])
    assert err < 1e-3
    # the production L1 energy: points sit well away from zero residual
    err = _fd_check(lambda: spatial_energy(x, pan + 2.0, params), [params.w1, params.w2])
    assert err < 1e-3


def test_freeze():
    p = SRFParams(3).freeze()
    assert not p.trainable


def test_save_response(tmp_path):
    save_response(torch.tensor([0.25, 0.75]), tmp_path / "srf.json")
    assert json.loads((tmp_path / "srf.json").read_text()) == [0.25, 0.75]


def test_uniform_response_equals_band_mean_pan():
    from hspan.datamodel import HSICube
    from hspan.degrade import synthesize_pan

    x = np.random.default_rng(0).random((5, 4, 4))
    got = predict_pan(torch.as_tensor(x), torch.full((5,), 0.2, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(got, synthesize_pan(HSICube(x), 5).data, atol=1e-15)


def test_weighted_pan_hand():
    x = torch.stack([torch.zeros(2, 2), torch.full((2, 2), 4.0)])
    torch.testing.assert_close(predict_pan(x, [0.25, 0.75]), torch.full((2, 2), 3.0))


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_predict_pan_homogeneous(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 3, 3, generator=g, dtype=torch.float64)
    s = torch.softmax(torch.randn(4, generator=g, dtype=torch.float64), 0)
    torch.testing.assert_close(predict_pan(alpha * x, s), alpha * predict_pan(x, s))
