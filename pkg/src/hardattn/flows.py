"""Conditional normalizing flows: ActNorm, Flip and autoregressive rational-quadratic splines.

A :class:`FlowStack` maps a base Gaussian sample ``z0 ~ N(mu(h), diag(var(h)))``
through ``n_s`` repetitions of ``[NSF, Flip, ActNorm]``. Sampling runs
forward in one pass per layer; density evaluation of an arbitrary point needs
the inverse, which for the autoregressive spline is sequential over
dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import engine as E
from .tensor.engine import Tensor, TensorError
from .tensor.nn import Linear, Module, ModuleList, Parameter, kaiming_uniform

TAIL_BOUND = 3.0
NUM_BINS = 8
MIN_BIN = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_SHIFT) + MIN_DERIVATIVE == 1, so raw zeros give unit slopes
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))
LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(RuntimeError):
    pass


@dataclass
class SplineParams:
    """Knots and interior derivatives of a monotone rational-quadratic spline.

    Arrays carry arbitrary leading batch axes; the last axis indexes knots
    (``K + 1``) or interior derivatives (``K - 1``).
    """

    knot_x: np.ndarray
    knot_y: np.ndarray
    derivs: np.ndarray
    tail_bound: float = TAIL_BOUND

    @property
    def num_bins(self) -> int:
        return self.knot_x.shape[-1] - 1

    def full_derivs(self) -> np.ndarray:
        ones = np.ones(self.derivs.shape[:-1] + (1,), dtype=self.derivs.dtype)
        return np.concatenate([ones, self.derivs, ones], axis=-1)

    def validate(self, min_bin: float = 0.0) -> None:
        dx = np.diff(self.knot_x, axis=-1)
        dy = np.diff(self.knot_y, axis=-1)
        if (dx <= min_bin * (1 - 1e-6)).any() or (dy <= min_bin * (1 - 1e-6)).any():
            raise FlowError("spline knots are not strictly increasing")
        if (self.derivs <= 0).any():
            raise FlowError("spline derivatives must be positive")
        b = self.tail_bound
        for knots in (self.knot_x, self.knot_y):
            if not (np.allclose(knots[..., 0], -b) and np.allclose(knots[..., -1], b)):
                raise FlowError("spline knots must span [-B, B]")

    @classmethod
    def identity(cls, num_bins: int = NUM_BINS, tail_bound: float = TAIL_BOUND, shape=()) -> "SplineParams":
        knots = np.broadcast_to(np.linspace(-tail_bound, tail_bound, num_bins + 1), shape + (num_bins + 1,))
        return cls(knots.copy(), knots.copy(), np.ones(shape + (num_bins - 1,)), tail_bound)


# ---------------------------------------------------------------------------
# spline evaluation
# ---------------------------------------------------------------------------

def _knots_from_raw(raw: Tensor, bound: float, min_bin: float) -> Tensor:
    k = raw.shape[-1]
    frac = E.softmax(raw, axis=-1) * (1.0 - min_bin * k) + min_bin
    cum = E.cumsum(frac, axis=-1)[..., :-1]
    edge = np.ones(raw.shape[:-1] + (1,), dtype=raw.dtype) * bound
    return E.concat([Tensor(-edge, dtype=raw.dtype), cum * (2.0 * bound) - bound,
                     Tensor(edge, dtype=raw.dtype)], axis=-1)


def spline_tensors_from_raw(raw: Tensor, num_bins: int = NUM_BINS, bound: float = TAIL_BOUND,
                            min_bin: float = MIN_BIN, min_derivative: float = MIN_DERIVATIVE):
    """Map unconstrained conditioner output (..., 3K-1) to (knot_x, knot_y, full derivatives)."""
    k = num_bins
    if raw.shape[-1] != 3 * k - 1:
        raise TensorError(f"expected {3 * k - 1} raw spline values, got {raw.shape[-1]}")
    knot_x = _knots_from_raw(raw[..., :k], bound, min_bin)
    knot_y = _knots_from_raw(raw[..., k:2 * k], bound, min_bin)
    inner = E.softplus(raw[..., 2 * k:] + _DERIV_SHIFT) + min_derivative
    ones = Tensor(np.ones(raw.shape[:-1] + (1,)), dtype=raw.dtype)
    derivs = E.concat([ones, inner, ones], axis=-1)
    return knot_x, knot_y, derivs


def params_from_raw(raw: np.ndarray, **kw) -> SplineParams:
    """Numpy form of :func:`spline_tensors_from_raw` returning :class:`SplineParams`."""
    raw = np.asarray(raw)
    with E.no_grad(), E.default_dtype(raw.dtype if raw.dtype == np.float64 else np.float32):
        kx, ky, d = spline_tensors_from_raw(Tensor(raw), **kw)
    return SplineParams(kx.data, ky.data, d.data[..., 1:-1], kw.get("bound", TAIL_BOUND))


def rq_spline(z: Tensor, knot_x: Tensor, knot_y: Tensor, derivs: Tensor, bound: float = TAIL_BOUND):
    """Elementwise spline with linear tails. Returns (y, log dy/dz), both shaped like z.

    ``knot_x``/``knot_y``/``derivs`` have shape ``z.shape + (K+1,)``; derivs
    include the boundary slopes.
    """
    zd = z.data
    inside = (zd >= -bound) & (zd <= bound)
    zc = E.where(inside, z, 0.0)
    k = knot_x.shape[-1] - 1
    idx = (knot_x.data[..., 1:k] <= zc.data[..., None]).sum(axis=-1, keepdims=True)

    def pick(t, offset):
        return E.take_along_axis(t, idx + offset, axis=-1)[..., 0]

    wk, wk1 = pick(knot_x, 0), pick(knot_x, 1)
    vk, vk1 = pick(knot_y, 0), pick(knot_y, 1)
    dk, dk1 = pick(derivs, 0), pick(derivs, 1)
    width = wk1 - wk
    height = vk1 - vk
    s = height / width
    xi = (zc - wk) / width
    xi1 = xi * (1.0 - xi)
    den = s + (dk1 + dk - 2.0 * s) * xi1
    y_in = vk + height * (s * xi * xi + dk * xi1) / den
    num_d = (s * s) * (dk1 * xi * xi + 2.0 * s * xi1 + dk * (1.0 - xi) * (1.0 - xi))
    logd_in = E.log(num_d) - 2.0 * E.log(den)
    y = E.where(inside, y_in, z)
    logdet = E.where(inside, logd_in, 0.0)
    return y, logdet


def nsf_eval(z, params: SplineParams):
    """Spline value and derivative at ``z`` (array broadcast against the params' batch shape)."""
    params.validate()
    z = np.asarray(z, dtype=np.result_type(params.knot_x.dtype, np.asarray(z).dtype, np.float32))
    batch = np.broadcast_shapes(z.shape, params.knot_x.shape[:-1])
    z = np.broadcast_to(z, batch)
    kx, ky, d = (np.broadcast_to(a, batch + (a.shape[-1],))
                 for a in (params.knot_x, params.knot_y, params.full_derivs()))
    with E.no_grad(), E.default_dtype(z.dtype if z.dtype == np.float64 else np.float32):
        y, logd = rq_spline(Tensor(z), Tensor(kx), Tensor(ky), Tensor(d), params.tail_bound)
    return y.data, np.exp(logd.data)


def nsf_invert(y, params: SplineParams) -> np.ndarray:
    """Analytic inverse: solve the per-bin quadratic in xi and keep the root in [0, 1]."""
    params.validate()
    y = np.asarray(y, dtype=np.result_type(params.knot_y.dtype, np.asarray(y).dtype))
    b = params.tail_bound
    inside = (y >= -b) & (y <= b)
    yc = np.where(inside, y, 0.0)
    kx, ky, d = params.knot_x, params.knot_y, params.full_derivs()
    k = kx.shape[-1] - 1
    kx, ky, d = (np.broadcast_to(a, yc.shape + (a.shape[-1],)) for a in (kx, ky, d))
    idx = (ky[..., 1:k] <= yc[..., None]).sum(axis=-1, keepdims=True)

    def pick(a, off):
        return np.take_along_axis(a, idx + off, axis=-1)[..., 0]

    wk, wk1, vk, vk1 = pick(kx, 0), pick(kx, 1), pick(ky, 0), pick(ky, 1)
    dk, dk1 = pick(d, 0), pick(d, 1)
    width, height = wk1 - wk, vk1 - vk
    s = height / width
    dy = yc - vk
    mix = dk1 + dk - 2.0 * s
    qa = height * (s - dk) + dy * mix
    qb = height * dk - dy * mix
    qc = -s * dy
    disc = qb * qb - 4.0 * qa * qc
    if (disc < -1e-9 * np.maximum(1.0, qb * qb)).any():
        raise FlowError("spline inversion has no real root; parameters are corrupt")
    xi = (2.0 * qc) / (-qb - np.sqrt(np.maximum(disc, 0.0)))
    if ((xi < -1e-6) | (xi > 1 + 1e-6))[inside].any():
        raise FlowError("spline inversion root outside [0, 1]")
    z = np.clip(xi, 0.0, 1.0) * width + wk
    return np.where(inside, z, y)


# ---------------------------------------------------------------------------
# bijector layers
# ---------------------------------------------------------------------------

class Flip(Module):
    def forward(self, z: Tensor, h=None):
        return z[..., ::-1], _zeros_like_batch(z)

    def inverse(self, y: Tensor, h=None):
        return y[..., ::-1]


def flip(z):
    """Reverse the last axis; log|det J| = 0."""
    z = np.asarray(z)
    return z[..., ::-1].copy(), np.zeros(z.shape[:-1])


def _zeros_like_batch(z: Tensor) -> Tensor:
    return Tensor(np.zeros(z.shape[:-1], dtype=z.dtype))


class ActNorm(Module):
    """``z' = exp(log_s(h)) * z + b(h)`` with both maps linear in h.

    The linear weights start at zero, so the first call to :meth:`initialize`
    fixes a per-dimension scale and shift that whiten the batch it sees.
    """

    def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator):
        super().__init__()
        self.log_scale = Linear(cond_dim, dim, rng, zero=True)
        self.shift = Linear(cond_dim, dim, rng, zero=True)
        self.initialized = False

    def scale_shift(self, h: Tensor):
        return self.log_scale(h), self.shift(h)

    def forward(self, z: Tensor, h: Tensor):
        log_s, b = self.scale_shift(h)
        return E.exp(log_s) * z + b, log_s.sum(axis=-1)

    def inverse(self, y: Tensor, h: Tensor):
        log_s, b = self.scale_shift(h)
        return (y - b) * E.exp(-log_s)

    def initialize(self, z: np.ndarray) -> None:
        z = np.asarray(z, dtype=np.float64)
        mu = z.mean(axis=0)
        std = z.std(axis=0) + 1e-6
        dt = self.log_scale.bias.dtype
        self.log_scale.bias.data[...] = (-np.log(std)).astype(dt)
        self.shift.bias.data[...] = (-mu / std).astype(dt)
        self.initialized = True


def actnorm_forward(z, s, b):
    """Plain elementwise affine with its log-determinant; any zero scale is an error."""
    z, s, b = np.asarray(z), np.asarray(s), np.asarray(b)
    if (s == 0).any():
        raise FlowError("ActNorm scale must be nonzero")
    return s * z + b, np.log(np.abs(s)).sum(axis=-1)


class MaskedConditioner(Module):
    """One masked hidden layer: outputs for dimension i see only z[j < i] and h.

    Hidden unit k has degree ``k mod dim`` and reads inputs of lower degree;
    the output block for dimension i reads hidden units of degree <= i.
    Degree-0 units therefore carry h alone.
    """

    def __init__(self, dim: int, cond_dim: int, out_per_dim: int, rng: np.random.Generator,
                 hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * dim
        self.dim, self.out_per_dim = dim, out_per_dim
        degrees = np.arange(hidden) % dim
        self.mask_in = (np.arange(dim)[:, None] < degrees[None, :]).astype(E.get_default_dtype())
        out_deg = np.repeat(np.arange(dim), out_per_dim)
        self.mask_out = (degrees[:, None] <= out_deg[None, :]).astype(E.get_default_dtype())
        fan_in = max(1, int(self.mask_in.sum(axis=0).mean()) + cond_dim)
        self.w_in = Parameter(kaiming_uniform(rng, (dim, hidden), fan_in))
        self.w_cond = Parameter(kaiming_uniform(rng, (cond_dim, hidden), fan_in))
        self.b_in = Parameter(np.zeros(hidden, dtype=E.get_default_dtype()))
        self.w_out = Parameter(np.zeros((hidden, dim * out_per_dim), dtype=E.get_default_dtype()))
        self.b_out = Parameter(np.zeros(dim * out_per_dim, dtype=E.get_default_dtype()))

    def forward(self, z: Tensor, h: Tensor) -> Tensor:
        hid = E.leaky_relu(z @ (self.w_in * self.mask_in) + h @ self.w_cond + self.b_in)
        out = hid @ (self.w_out * self.mask_out) + self.b_out
        return out.reshape(z.shape[:-1] + (self.dim, self.out_per_dim))


class AutoregressiveSpline(Module):
    def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator,
                 num_bins: int = NUM_BINS, tail_bound: float = TAIL_BOUND):
        super().__init__()
        self.num_bins, self.tail_bound = num_bins, tail_bound
        self.conditioner = MaskedConditioner(dim, cond_dim, 3 * num_bins - 1, rng)

    def spline_tensors(self, z: Tensor, h: Tensor):
        return spline_tensors_from_raw(self.conditioner(z, h), self.num_bins, self.tail_bound)

    def condition(self, z_prefix, h) -> SplineParams:
        """Spline parameters for every dimension given the (prefix of) z and h."""
        with E.no_grad():
            kx, ky, d = self.spline_tensors(E.as_tensor(z_prefix), E.as_tensor(h))
        return SplineParams(kx.data, ky.data, d.data[..., 1:-1], self.tail_bound)

    def forward(self, z: Tensor, h: Tensor):
        kx, ky, d = self.spline_tensors(z, h)
        y, logd = rq_spline(z, kx, ky, d, self.tail_bound)
        return y, logd.sum(axis=-1)

    def inverse(self, y: Tensor, h: Tensor):
        y_np = y.data
        z = np.zeros_like(y_np)
        for i in range(y_np.shape[-1]):
            params = self.condition(Tensor(z), h)
            sub = SplineParams(params.knot_x[..., i, :], params.knot_y[..., i, :],
                               params.derivs[..., i, :], self.tail_bound)
            z[..., i] = nsf_invert(y_np[..., i], sub)
        return Tensor(z)


def autoregressive_condition(z_prefix, h, layer: AutoregressiveSpline) -> SplineParams:
    return layer.condition(z_prefix, h)


# ---------------------------------------------------------------------------
# the stack
# ---------------------------------------------------------------------------

class FlowStack(Module):
    """q(z|h): diagonal Gaussian base followed by ``n_s`` x [NSF, Flip, ActNorm].

    ``n_s = 0`` gives the plain Gaussian posterior used in the ablation.
    """

    def __init__(self, dim: int, cond_dim: int, n_s: int, rng: np.random.Generator,
                 num_bins: int = NUM_BINS, tail_bound: float = TAIL_BOUND):
        super().__init__()
        self.dim, self.cond_dim, self.n_s = dim, cond_dim, n_s
        self.base_head = Linear(cond_dim, 2 * dim, rng, zero=True)
        layers = []
        for _ in range(n_s):
            layers += [AutoregressiveSpline(dim, cond_dim, rng, num_bins, tail_bound),
                       Flip(), ActNorm(dim, cond_dim, rng)]
        self.layers = ModuleList(layers)

    def __len__(self):
        return len(self.layers)

    def base(self, h: Tensor):
        out = self.base_head(h)
        return out[..., :self.dim], out[..., self.dim:]

    def base_log_prob(self, z0: Tensor, mean: Tensor, logvar: Tensor) -> Tensor:
        diff = z0 - mean
        return (-0.5 * (diff * diff * E.exp(-logvar) + logvar + LOG_2PI)).sum(axis=-1)

    def transform(self, z0: Tensor, h: Tensor):
        """Push a base point through all layers; returns (z_N, sum of log|det J|)."""
        z = z0
        total = Tensor(np.zeros(z0.shape[:-1], dtype=z0.dtype))
        for layer in self.layers:
            z, ld = layer(z, h)
            total = total + ld
        return z, total

    def inverse(self, zn: Tensor, h: Tensor) -> Tensor:
        z = zn
        for layer in reversed(list(self.layers)):
            z = layer.inverse(z, h)
        return z

    def sample(self, h: Tensor, rng: np.random.Generator, eps: np.ndarray | None = None):
        """Reparameterised draw; returns (z_N, log q(z_N|h))."""
        h = E.as_tensor(h)
        mean, logvar = self.base(h)
        if eps is None:
            eps = rng.standard_normal(mean.shape)
        eps = Tensor(np.asarray(eps), dtype=mean.dtype)
        z0 = mean + E.exp(0.5 * logvar) * eps
        log_q = (-0.5 * (eps * eps + logvar + LOG_2PI)).sum(axis=-1)
        zn, logdet = self.transform(z0, h)
        if not np.isfinite(zn.data).all():
            raise FlowError("non-finite flow sample")
        return zn, log_q - logdet

    def log_prob(self, zn, h) -> Tensor:
        """Exact log-density by inverting the stack (sequential in the spline layers)."""
        zn, h = E.as_tensor(zn), E.as_tensor(h)
        with E.no_grad():
            z0 = self.inverse(zn, h)
            mean, logvar = self.base(h)
            _, logdet = self.transform(z0, h)
            return self.base_log_prob(z0, mean, logvar) - logdet

    def data_init(self, h: Tensor, rng: np.random.Generator) -> None:
        """Data-dependent ActNorm initialisation on one batch of conditioning vectors."""
        with E.no_grad():
            mean, logvar = self.base(E.as_tensor(h))
            z = mean + E.exp(0.5 * logvar) * Tensor(rng.standard_normal(mean.shape), dtype=mean.dtype)
            for layer in self.layers:
                if isinstance(layer, ActNorm):
                    layer.initialize(z.data)
                z, _ = layer(z, E.as_tensor(h))


def flow_sample(h, stack: FlowStack, rng: np.random.Generator):
    return stack.sample(E.as_tensor(h), rng)


def flow_log_prob(zn, h, stack: FlowStack) -> Tensor:
    return stack.log_prob(zn, h)
