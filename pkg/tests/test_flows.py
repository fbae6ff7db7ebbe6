import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardattn.flows import (
    LOG_2PI, ActNorm, AutoregressiveSpline, FlowError, FlowStack, SplineParams, actnorm_forward,
    autoregressive_condition, flip, flow_log_prob, flow_sample, nsf_eval, nsf_invert, params_from_raw,
)
from hardattn.tensor import engine as E
from hardattn.tensor.engine import Tensor


@pytest.fixture(autouse=True)
def float64():
    with E.default_dtype(np.float64):
        yield


def random_params(rng, shape, scale=1.5):
    raw = rng.standard_normal(shape + (3 * 8 - 1,)) * scale
    return params_from_raw(raw)


def randomize(module, rng, scale=0.3):
    """Overwrite every parameter with small Gaussian noise so the flow is far from identity."""
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


def random_stack(dim=4, cond=3, n_s=2, seed=0, scale=0.2):
    """Stack with random conditioners; ActNorm maps get a third of the scale to keep z moderate."""
    rng = np.random.default_rng(seed)
    with E.default_dtype(np.float64):
        stack = FlowStack(dim, cond, n_s, rng)
    for layer in stack.layers:
        randomize(layer, rng, scale / 3 if isinstance(layer, ActNorm) else scale)
    randomize(stack.base_head, rng, scale)
    return stack


def bisect(y, params, lo=-10.0, hi=10.0, iters=80):
    """Scalar inverse by bisection, independent of the analytic root."""
    lo, hi = np.full_like(y, lo), np.full_like(y, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        up = nsf_eval(mid, params)[0] < y
        lo, hi = np.where(up, mid, lo), np.where(up, hi, mid)
    return 0.5 * (lo + hi)


def fd_jacobian(f, z, step=1e-6):
    d = z.shape[-1]
    jac = np.zeros(z.shape + (d,))
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        jac[..., :, j] = (f(z + e) - f(z - e)) / (2 * step)
    return jac


class TestActNorm:
    def test_unit_scale_is_identity(self):
        z = np.array([[0.3, -1.2]])
        out, ld = actnorm_forward(z, np.ones(2), np.zeros(2))
        np.testing.assert_array_equal(out, z)
        assert ld == 0.0

    def test_logdet_sums_log_scales(self):
        _, ld = actnorm_forward(np.zeros(2), np.array([2.0, 3.0]), np.array([5.0, -1.0]))
        assert ld == pytest.approx(np.log(6.0), abs=1e-12)

    def test_zero_scale_rejected(self):
        with pytest.raises(FlowError):
            actnorm_forward(np.zeros(2), np.array([0.0, 1.0]), np.zeros(2))

    def test_data_init_whitens_first_batch(self):
        rng = np.random.default_rng(1)
        with E.default_dtype(np.float64):
            layer = ActNorm(3, 2, rng)
            z = rng.standard_normal((512, 3)) * [0.5, 2.0, 7.0] + [1.0, -3.0, 10.0]
            layer.initialize(z)
            out, _ = layer(Tensor(z), Tensor(rng.standard_normal((512, 2))))
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-3)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-3)

    def test_inverse(self):
        rng = np.random.default_rng(2)
        with E.default_dtype(np.float64):
            layer = ActNorm(4, 3, rng)
            randomize(layer, rng)
            z, h = Tensor(rng.standard_normal((20, 4))), Tensor(rng.standard_normal((20, 3)))
            y, _ = layer(z, h)
            back = layer.inverse(y, h)
        np.testing.assert_allclose(back.data, z.data, atol=1e-12)


class TestFlip:
    def test_reverses(self):
        out, ld = flip(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out, [3.0, 2.0, 1.0])
        assert ld == 0.0

    def test_involution(self):
        z = np.random.default_rng(0).standard_normal((5, 7))
        np.testing.assert_array_equal(flip(flip(z)[0])[0], z)

    def test_length_one(self):
        np.testing.assert_array_equal(flip(np.array([4.0]))[0], [4.0])

    def test_odd_middle_stays(self):
        assert flip(np.arange(5.0))[0][2] == 2.0


class TestSplineEval:
    def test_identity_configuration(self):
        params = SplineParams.identity()
        z = np.linspace(-3, 3, 101)
        y, dy = nsf_eval(z, params)
        np.testing.assert_allclose(y, z, atol=1e-12)
        np.testing.assert_allclose(dy, 1.0, atol=1e-12)

    def test_knot_values(self):
        p = random_params(np.random.default_rng(0), ())
        y, _ = nsf_eval(p.knot_x, p)
        np.testing.assert_allclose(y, p.knot_y, atol=1e-9)

    def test_continuity_at_knots(self):
        p = random_params(np.random.default_rng(3), ())
        eps = 1e-10
        lo = nsf_eval(p.knot_x[1:-1] - eps, p)[0]
        hi = nsf_eval(p.knot_x[1:-1] + eps, p)[0]
        np.testing.assert_allclose(hi, lo, atol=1e-8)

    def test_linear_tails(self):
        p = random_params(np.random.default_rng(4), ())
        z = np.array([-7.0, -3.5, 3.2, 20.0])
        y, dy = nsf_eval(z, p)
        np.testing.assert_array_equal(y, z)
        np.testing.assert_array_equal(dy, 1.0)

    def test_derivative_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        n = 10_000
        p = random_params(rng, (n,))
        z = rng.uniform(-2.95, 2.95, n)
        _, dy = nsf_eval(z, p)
        step = 1e-6
        fd = (nsf_eval(z + step, p)[0] - nsf_eval(z - step, p)[0]) / (2 * step)
        # points within a step of a knot see two rational pieces; skip those
        near = (np.abs(z[:, None] - p.knot_x) < 2 * step).any(axis=1)
        rel = np.abs(dy - fd)[~near] / dy[~near]
        assert rel.max() < 1e-4

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 4.0))
    def test_strictly_increasing(self, seed, scale):
        p = random_params(np.random.default_rng(seed), (), scale)
        y, dy = nsf_eval(np.linspace(-4, 4, 2001), p)
        assert (np.diff(y) > 0).all()
        assert (dy > 0).all()

    def test_parameter_floors(self):
        p = random_params(np.random.default_rng(6), (1000,), scale=10.0)
        p.validate(min_bin=1e-3)
        assert np.diff(p.knot_x, axis=-1).min() >= 1e-3 * 6 * (1 - 1e-6)
        assert (p.derivs >= 1e-3).all()

    def test_zero_raw_is_identity(self):
        p = params_from_raw(np.zeros(23))
        np.testing.assert_allclose(p.knot_x, np.linspace(-3, 3, 9), atol=1e-12)
        np.testing.assert_allclose(p.knot_y, p.knot_x, atol=1e-12)
        np.testing.assert_allclose(p.derivs, 1.0, atol=1e-12)

    def test_validate_rejects_nonmonotone(self):
        p = SplineParams.identity()
        p.knot_x[3], p.knot_x[4] = p.knot_x[4], p.knot_x[3]
        with pytest.raises(FlowError):
            p.validate()


class TestSplineInvert:
    def test_identity_configuration(self):
        y = np.linspace(-3, 3, 13)
        np.testing.assert_allclose(nsf_invert(y, SplineParams.identity()), y, atol=1e-12)

    def test_knot_fixed_points(self):
        p = random_params(np.random.default_rng(7), ())
        np.testing.assert_allclose(nsf_invert(p.knot_y, p), p.knot_x, atol=1e-9)

    def test_round_trip(self):
        rng = np.random.default_rng(8)
        n = 10_000
        p = random_params(rng, (n,))
        z = rng.uniform(-4, 4, n)
        back = nsf_invert(nsf_eval(z, p)[0], p)
        assert np.abs(back - z).max() < 1e-6

    def test_agrees_with_bisection(self):
        rng = np.random.default_rng(9)
        p = random_params(rng, (500,))
        y = rng.uniform(-2.99, 2.99, 500)
        np.testing.assert_allclose(nsf_invert(y, p), bisect(y, p), atol=1e-9)

    def test_corrupt_params_raise(self):
        p = SplineParams.identity()
        p.derivs[...] = -5.0
        with pytest.raises(FlowError):
            nsf_invert(np.linspace(-2.9, 2.9, 50), p)
        with pytest.raises(FlowError):
            nsf_eval(0.0, p)


class TestConditioner:
    def _layer(self, seed=0):
        rng = np.random.default_rng(seed)
        with E.default_dtype(np.float64):
            layer = AutoregressiveSpline(5, 3, rng)
        randomize(layer, rng, 0.5)
        return layer, rng

    def test_first_dimension_sees_only_h(self):
        layer, rng = self._layer()
        h = rng.standard_normal((1, 3))
        a = autoregressive_condition(rng.standard_normal((1, 5)), h, layer)
        b = autoregressive_condition(rng.standard_normal((1, 5)), h, layer)
        np.testing.assert_array_equal(a.knot_x[:, 0], b.knot_x[:, 0])
        np.testing.assert_array_equal(a.derivs[:, 0], b.derivs[:, 0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 4), st.integers(0, 1000))
    def test_causal_mask(self, i, seed):
        layer, _ = self._layer()
        rng = np.random.default_rng(seed)
        z, h = rng.standard_normal((1, 5)), rng.standard_normal((1, 3))
        z2 = z.copy()
        z2[:, i:] = rng.standard_normal(5 - i)
        a, b = (autoregressive_condition(v, h, layer) for v in (z, z2))
        for arr_a, arr_b in ((a.knot_x, b.knot_x), (a.knot_y, b.knot_y), (a.derivs, b.derivs)):
            np.testing.assert_array_equal(arr_a[:, :i + 1], arr_b[:, :i + 1])

    def test_fresh_layer_is_identity(self):
        with E.default_dtype(np.float64):
            layer = AutoregressiveSpline(3, 2, np.random.default_rng(0))
        z = np.random.default_rng(1).standard_normal((4, 3))
        y, ld = layer(Tensor(z), Tensor(np.ones((4, 2))))
        np.testing.assert_allclose(y.data, z, atol=1e-12)
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)


class TestFlowStack:
    def test_layer_count(self):
        for n_s in (0, 1, 4):
            assert len(FlowStack(3, 2, n_s, np.random.default_rng(0))) == 3 * n_s

    def test_layer_order(self):
        stack = FlowStack(3, 2, 2, np.random.default_rng(0))
        names = [type(layer).__name__ for layer in stack.layers]
        assert names == ["AutoregressiveSpline", "Flip", "ActNorm"] * 2

    def test_round_trip(self):
        stack = random_stack(dim=6, cond=4, n_s=3, seed=1)
        rng = np.random.default_rng(2)
        z0 = rng.standard_normal((10_000, 6)) * 1.5
        h = Tensor(rng.standard_normal((10_000, 4)))
        with E.no_grad():
            zn, _ = stack.transform(Tensor(z0), h)
            back = stack.inverse(zn, h)
        assert np.abs(back.data - z0).max() < 1e-6

    @pytest.mark.parametrize("dim", [1, 3, 8])
    def test_logdet_matches_jacobian(self, dim):
        stack = random_stack(dim=dim, cond=3, n_s=2, seed=dim)
        rng = np.random.default_rng(10 + dim)
        z0 = rng.standard_normal((16, dim))
        h = rng.standard_normal((16, 3))

        def push(z):
            with E.no_grad():
                return stack.transform(Tensor(z), Tensor(h))[0].data

        with E.no_grad():
            _, ld = stack.transform(Tensor(z0), Tensor(h))
        jac = fd_jacobian(push, z0)
        ref = np.linalg.slogdet(jac)[1]
        rel = np.abs(ld.data - ref) / np.maximum(np.abs(ref), 1.0)
        assert rel.max() < 1e-4

    def test_identity_stack_log_prob_at_origin(self):
        d = 5
        with E.default_dtype(np.float64):
            stack = FlowStack(d, 2, 2, np.random.default_rng(0))
        lp = flow_log_prob(np.zeros((1, d)), np.zeros((1, 2)), stack)
        assert lp.data[0] == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-12)

    def test_sample_density_matches_log_prob(self):
        stack = random_stack(dim=4, cond=3, n_s=2, seed=3)
        h = np.random.default_rng(4).standard_normal((50, 3))
        with E.no_grad():
            zn, lq = flow_sample(h, stack, np.random.default_rng(5))
        lp = flow_log_prob(zn.data, h, stack)
        np.testing.assert_allclose(lp.data, lq.data, atol=1e-5)

    def test_density_integrates_to_one(self):
        stack = random_stack(dim=1, cond=2, n_s=2, seed=6, scale=0.5)
        grid = np.linspace(-15, 15, 30_001)[:, None]
        h = np.broadcast_to(np.array([[0.4, -0.7]]), (grid.shape[0], 2))
        dens = np.exp(flow_log_prob(grid, h, stack).data)
        assert np.trapezoid(dens, grid[:, 0]) == pytest.approx(1.0, abs=1e-2)

    def test_identity_stack_samples_match_base(self):
        d = 3
        rng = np.random.default_rng(7)
        with E.default_dtype(np.float64):
            stack = FlowStack(d, 2, 2, rng)
        # nontrivial base: mean and log-variance linear in h
        stack.base_head.bias.data[...] = [0.5, -1.0, 2.0, np.log(0.25), 0.0, np.log(4.0)]
        n = 100_000
        with E.no_grad():
            zn, _ = stack.sample(np.zeros((n, 2)), rng)
        mean, var = np.array([0.5, -1.0, 2.0]), np.array([0.25, 1.0, 4.0])
        se = np.sqrt(var / n)
        assert (np.abs(zn.data.mean(axis=0) - mean) < 5 * se).all()
        cov = np.cov(zn.data.T)
        np.testing.assert_allclose(np.diag(cov), var, rtol=0.03)
        off = cov[~np.eye(d, dtype=bool)]
        assert np.abs(off).max() < 0.05

    def test_same_seed_same_sample(self):
        stack = random_stack(seed=8)
        h = np.ones((3, 3))
        with E.no_grad():
            a = flow_sample(h, stack, np.random.default_rng(11))[0].data
            b = flow_sample(h, stack, np.random.default_rng(11))[0].data
        np.testing.assert_array_equal(a, b)

    def test_stack_output_is_causal_before_flip(self):
        stack = random_stack(dim=4, cond=2, n_s=1, seed=9)
        spline = stack.layers[0]
        rng = np.random.default_rng(0)
        z, h = rng.standard_normal((1, 4)), Tensor(rng.standard_normal((1, 2)))
        z2 = z.copy()
        z2[0, 2:] += 1.0
        with E.no_grad():
            a = spline(Tensor(z), h)[0].data
            b = spline(Tensor(z2), h)[0].data
        np.testing.assert_array_equal(a[0, :2], b[0, :2])

    def test_gradient_flows_to_parameters(self):
        stack = random_stack(dim=3, cond=2, n_s=1, seed=10)
        with E.default_dtype(np.float64):
            zn, lq = stack.sample(np.ones((4, 2)), np.random.default_rng(0))
            E.backward((zn * zn).sum() + lq.sum())
        grads = [p.grad for p in stack.parameters()]
        assert all(g is not None and np.isfinite(g).all() for g in grads)
        assert any(np.abs(g).sum() > 0 for g in grads)

    def test_data_init_on_stack(self):
        stack = random_stack(dim=3, cond=2, n_s=2, seed=12)
        for layer in stack.layers:
            if isinstance(layer, ActNorm):
                layer.log_scale.weight.data[...] = 0.0
                layer.shift.weight.data[...] = 0.0
        h = np.random.default_rng(0).standard_normal((2000, 2))
        stack.data_init(Tensor(h), np.random.default_rng(1))
        with E.no_grad():
            z, _ = stack.sample(h, np.random.default_rng(1))
        np.testing.assert_allclose(z.data.mean(axis=0), 0.0, atol=1e-3)
        np.testing.assert_allclose(z.data.var(axis=0), 1.0, atol=1e-3)
