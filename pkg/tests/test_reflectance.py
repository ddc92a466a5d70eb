import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from ringflow import autodiff as ad
from ringflow.autodiff import Tensor
from ringflow.reflectance import (BrdfSample, PreconditionError, ShadePoint, eval_brdf, eval_brdf_point, shade,
                                  shade_point)

UP = np.array([0.0, 0.0, 1.0])


def random_hemisphere(rng, n, normal=UP, min_cos=0.05):
    out = []
    while len(out) < n:
        v = rng.standard_normal(3)
        v /= np.linalg.norm(v)
        if v @ normal >= min_cos:
            out.append(v)
    return np.array(out)


def random_config(rng, n):
    ns = random_hemisphere(rng, n, min_cos=-2)
    i = np.array([random_hemisphere(rng, 1, nn, 0.05)[0] for nn in ns])
    o = np.array([random_hemisphere(rng, 1, nn, 0.05)[0] for nn in ns])
    th = np.column_stack([rng.uniform(0, 1, (n, 4)), rng.uniform(0.05, 0.95, n)])
    return ns, i, o, th


# ---------------------------------------------------------------- examples

def test_zero_specular_is_pure_diffuse():
    rng = np.random.default_rng(0)
    n, i, o, th = random_config(rng, 50)
    th[:, 3] = 0.0
    assert np.array_equal(eval_brdf(n, i, o, th).data, th[:, :3])


def test_head_on_matches_oracle():
    p = ShadePoint(np.zeros(3), UP, UP, UP)
    got = eval_brdf_point(p, BrdfSample((0, 0, 0), 1.0, 0.5))
    want = oracles.cook_torrance(UP, UP, UP, (0, 0, 0), 1.0, 0.5)
    # D(1) = 1/(pi a^2), G = 1 at normal incidence
    assert want[0] == pytest.approx(1 / (math.pi ** 2 * 0.25), rel=1e-14)
    assert np.allclose(got, want, rtol=0, atol=1e-9)


def test_random_configurations_match_oracle():
    rng = np.random.default_rng(1)
    n, i, o, th = random_config(rng, 500)
    got = eval_brdf(n, i, o, th).data
    for k in range(len(n)):
        want = oracles.cook_torrance(n[k], i[k], o[k], th[k, :3], th[k, 3], th[k, 4])
        assert np.allclose(got[k], want, rtol=1e-9, atol=1e-9)
    d = np.array(rng.uniform(0.5, 3.0, len(n)))
    got = shade(n, i, o, d, th).data
    for k in range(len(n)):
        want = oracles.shade(n[k], i[k], o[k], d[k], th[k, :3], th[k, 3], th[k, 4])
        assert np.allclose(got[k], want, rtol=1e-9, atol=1e-9)


def test_reciprocity():
    rng = np.random.default_rng(2)
    n, i, o, th = random_config(rng, 1000)
    a, b = eval_brdf(n, i, o, th).data, eval_brdf(n, o, i, th).data
    assert np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))) <= 1e-12


def test_precondition_violation_raises():
    with pytest.raises(PreconditionError):
        eval_brdf(UP, np.array([1.0, 0, 0]), UP, np.array([0.5, 0.5, 0.5, 0.5, 0.5]))
    with pytest.raises(PreconditionError):
        eval_brdf(UP, np.array([0.0, 0.6, -0.8]), UP, np.array([0.5, 0.5, 0.5, 0.5, 0.5]))


def test_backfacing_light_is_black():
    i = np.array([0.0, 0.6, -0.8])
    out = shade(UP, i, UP, np.array([1.0]), np.array([0.5, 0.5, 0.5, 0.9, 0.3])).data
    assert np.array_equal(out, np.zeros((1, 3)))


def test_inverse_square():
    rng = np.random.default_rng(3)
    n, i, o, th = random_config(rng, 40)
    th[:, 3] = 0.0
    d = rng.uniform(0.5, 2.0, 40)
    a, b = shade(n, i, o, d, th).data, shade(n, i, o, 2 * d, th).data
    assert np.allclose(b, a / 4, rtol=1e-14, atol=0)


def test_distant_lambertian_head_on():
    p = ShadePoint(np.zeros(3), UP, UP, UP, light_distance=7.0)
    out = shade_point(p, BrdfSample((0.6, 0.2, 0.1), 0.0, 0.5), light_mode="distant")
    assert np.array_equal(out, [0.6, 0.2, 0.1])


def test_sample_validation():
    with pytest.raises(ValueError):
        BrdfSample((0.5, 1.2, 0.1), 0.0, 0.5)
    with pytest.raises(ValueError):
        BrdfSample((0.5, 0.2, 0.1), 0.0, 1.0)
    with pytest.raises(ValueError):
        ShadePoint(np.zeros(3), np.array([0.0, 0, 2]), UP, UP)


# ---------------------------------------------------------------- properties

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_shade_non_negative(seed):
    rng = np.random.default_rng(seed)
    n = random_hemisphere(rng, 8, min_cos=-2)
    i = random_hemisphere(rng, 8, min_cos=-2)   # includes back-facing lights
    o = random_hemisphere(rng, 8, min_cos=-2)
    th = np.column_stack([rng.uniform(0, 1, (8, 4)), rng.uniform(1e-3, 1 - 1e-3, 8)])
    out = shade(n, i, o, rng.uniform(0.1, 5, 8), th).data
    assert np.all(out >= 0) and np.all(np.isfinite(out))


def test_peak_non_increasing_in_roughness():
    i = np.array([0.6, 0.0, 0.8])
    o = np.array([-0.6, 0.0, 0.8])     # mirror pair: h = n
    peaks = []
    for r in np.arange(1, 10) / 10:
        peaks.append(eval_brdf(UP, i, o, np.array([0, 0, 0, 1.0, r])).data[0, 0])
    assert all(b <= a for a, b in zip(peaks, peaks[1:]))


def test_shade_gradients():
    rng = np.random.default_rng(4)
    n, i, o, th = random_config(rng, 20)
    d = Tensor(rng.uniform(0.5, 2.0, 20))
    w = Tensor(rng.standard_normal((20, 3)))
    th_t = Tensor(th, requires_grad=True)
    n_t = Tensor(n, requires_grad=True)
    f = lambda _: ad.sum_(shade(ad.normalize(n_t), i, o, d, th_t) * w)
    for leaf in (th_t, n_t):
        rep = ad.grad_check(f, leaf, tol=1e-4)
        assert rep.passed, str(rep)
