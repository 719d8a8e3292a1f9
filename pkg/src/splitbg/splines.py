"""Monotone rational-quadratic splines on an interval and on the circle.

Raw conditioner outputs have ``3K + 1`` entries per coordinate: ``K`` bin
widths, ``K`` bin heights and ``K + 1`` knot derivatives. Widths and heights
go through a softmax scaled to the interval, derivatives through a shifted
softplus so that all-zero raw parameters give the identity map.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_SHIFT) + MIN_DERIVATIVE == 1
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


def n_raw_params(bins: int) -> int:
    return 3 * bins + 1


def _cumulative(raw: Tensor, left: float, right: float, min_size: float) -> Tensor:
    K = raw.shape[-1]
    frac = ad.softmax(raw, axis=-1) * (1.0 - min_size * K) + min_size
    cum = ad.cumsum(frac, axis=-1)
    lead = raw.shape[:-1] + (1,)
    inner = left + (right - left) * cum[..., : K - 1]
    return ad.concat([Tensor(np.full(lead, left)), inner, Tensor(np.full(lead, right))], axis=-1)


def spline_knots(raw, bins: int, left: float, right: float, circular: bool = False):
    """Knot positions, knot values and knot derivatives from raw parameters.

    Returns ``(xk, yk, dk)`` of shapes ``(..., K+1)``.
    """
    raw = ad.as_tensor(raw)
    K = bins
    if raw.shape[-1] != n_raw_params(K):
        raise ValueError(f"expected {n_raw_params(K)} raw parameters, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw.value)):
        raise ad.NonFiniteError("non-finite spline parameters")
    xk = _cumulative(raw[..., :K], left, right, MIN_BIN_WIDTH)
    yk = _cumulative(raw[..., K : 2 * K], left, right, MIN_BIN_HEIGHT)
    rd = raw[..., 2 * K :]
    if circular:
        # one shared derivative at the seam keeps the map C1 on the circle
        seam = 0.5 * (rd[..., :1] + rd[..., K:])
        rd = ad.concat([seam, rd[..., 1:K], seam], axis=-1)
    dk = ad.softplus(rd + _DERIV_SHIFT) + MIN_DERIVATIVE
    return xk, yk, dk


def _gather(t: Tensor, idx: np.ndarray) -> Tensor:
    return ad.take_along_axis(t, idx[..., None], axis=-1)[..., 0]


def _bin_index(v: np.ndarray, knots: np.ndarray) -> np.ndarray:
    K = knots.shape[-1] - 1
    return np.sum(v[..., None] >= knots[..., 1:K], axis=-1)


def _bin_terms(knots_in, knots_out, dk, idx):
    x0 = _gather(knots_in, idx)
    w = _gather(knots_in, idx + 1) - x0
    y0 = _gather(knots_out, idx)
    h = _gather(knots_out, idx + 1) - y0
    d0 = _gather(dk, idx)
    d1 = _gather(dk, idx + 1)
    return x0, w, y0, h, d0, d1


def _rq_forward(x, xk, yk, dk):
    idx = _bin_index(x.value, xk.value)
    x0, w, y0, h, d0, d1 = _bin_terms(xk, yk, dk, idx)
    s = h / w
    xi = (x - x0) / w
    t = xi * (1.0 - xi)
    num = h * (s * xi * xi + d0 * t)
    den = s + (d1 + d0 - 2.0 * s) * t
    y = y0 + num / den
    dnum = s * s * (d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi))
    logdet = ad.log(dnum) - 2.0 * ad.log(den)
    return y, logdet


def _rq_inverse(y, xk, yk, dk):
    idx = _bin_index(y.value, yk.value)
    x0, w, y0, h, d0, d1 = _bin_terms(xk, yk, dk, idx)
    s = h / w
    dy = y - y0
    c2 = d1 + d0 - 2.0 * s
    a = h * (s - d0) + dy * c2
    b = h * d0 - dy * c2
    c = -s * dy
    disc = b * b - 4.0 * a * c
    root = ad.sqrt(ad.where(disc.value > 0, disc, 1.0))
    root = ad.where(disc.value > 0, root, 0.0)
    denom = -b - root
    xi = 2.0 * c / ad.where(denom.value != 0, denom, -1.0)
    xi = ad.where(denom.value != 0, xi, 0.0)
    x = x0 + xi * w
    t = xi * (1.0 - xi)
    den = s + c2 * t
    dnum = s * s * (d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi))
    logdet = 2.0 * ad.log(den) - ad.log(dnum)
    return x, logdet


def rqs(x, raw, bins: int = 8, bound: float = 1.0, inverse: bool = False):
    """Rational-quadratic spline on ``[-bound, bound]`` with identity tails.

    Returns ``(y, logdet)`` with elementwise ``log |dy/dx|`` (zero in the tails).
    """
    x = ad.as_tensor(x)
    xk, yk, dk = spline_knots(raw, bins, -bound, bound)
    inside = (x.value >= -bound) & (x.value <= bound)
    x_safe = ad.where(inside, x, 0.0)
    fn = _rq_inverse if inverse else _rq_forward
    y, ld = fn(x_safe, xk, yk, dk)
    return ad.where(inside, y, x), ad.where(inside, ld, 0.0)


def rqs_forward(x, raw, bins: int = 8, bound: float = 1.0):
    return rqs(x, raw, bins, bound, inverse=False)


def rqs_inverse(y, raw, bins: int = 8, bound: float = 1.0):
    return rqs(y, raw, bins, bound, inverse=True)


def circular_rqs(x, raw, bins: int = 8, inverse: bool = False):
    """Rational-quadratic spline on the circle ``[-pi, pi)``.

    The knot derivative at ``-pi`` and ``pi`` is shared, so the map and its
    derivative are continuous across the seam.
    """
    x = ad.wrap_angle(ad.as_tensor(x))
    xk, yk, dk = spline_knots(raw, bins, -np.pi, np.pi, circular=True)
    fn = _rq_inverse if inverse else _rq_forward
    y, ld = fn(x, xk, yk, dk)
    return ad.wrap_angle(y), ld
