"""Monotone rational spline transforms for the noise flow.

A transform is strictly increasing on [-B, B], the identity outside, and has
an analytic inverse and log-derivative. Bin widths and heights come from a
softmax over the raw parameter vector (floored for stability), interior knot
derivatives from a softplus shifted so that an all-zero raw vector yields the
identity map; boundary derivatives are pinned to 1 to merge with the tails.

Two kinds share the same raw layout of 3*bins - 1 values per conditional:
``quadratic`` (rational-quadratic pieces) and ``linear`` (two linear-rational
pieces per bin joined at the midpoint). Everything is traced through the
autodiff engine so spline parameters may be the output of a hypernetwork.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class SplineError(ValueError):
    """Invalid spline parameterization or input."""


def param_count(bins: int) -> int:
    """Raw parameters per conditional: bins widths + bins heights +
    (bins - 1) interior derivatives."""
    return 3 * bins - 1


@dataclass(frozen=True)
class SplineSpec:
    bins: int = 8
    bound: float = 5.0
    kind: str = "quadratic"
    min_bin_fraction: float = 1e-3
    min_derivative: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("quadratic", "linear"):
            raise SplineError(f"unknown spline kind {self.kind!r}")
        if self.bins < 2:
            raise SplineError("need at least 2 bins")
        if self.bound <= 0:
            raise SplineError("bound must be positive")

    @property
    def n_params(self) -> int:
        return param_count(self.bins)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _cumsum_last(t: Tensor, prepend_zero: bool = True) -> Tensor:
    """Cumulative sum over the last axis via a triangular matmul (keeps the
    computation on the tape)."""
    k = t.shape[-1]
    tri = np.tril(np.ones((k + 1, k)), -1).T if prepend_zero else \
        np.tril(np.ones((k, k))).T
    lead = t.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    flat = ad.reshape(t, (n, k))
    out = ad.matmul(flat, Tensor(tri))
    return ad.reshape(out, lead + (tri.shape[1],))


def _gather_last(t: Tensor, onehot: np.ndarray) -> Tensor:
    """Select one entry along the last axis per leading position, given a
    constant one-hot mask; stays differentiable in ``t``."""
    return ad.tensor_sum(t * Tensor(onehot), axis=-1)


@dataclass
class SplineTransform:
    """Normalized spline: bin widths/heights (..., bins) and knot
    derivatives (..., bins + 1) with unit boundary derivatives."""

    widths: Tensor
    heights: Tensor
    derivatives: Tensor
    bound: float = 5.0
    kind: str = "quadratic"

    def __post_init__(self):
        self.knots_x = _cumsum_last(self.widths) - self.bound
        self.knots_y = _cumsum_last(self.heights) - self.bound

    @property
    def bins(self) -> int:
        return self.widths.shape[-1]

    @classmethod
    def from_raw(cls, raw, spec: SplineSpec) -> "SplineTransform":
        """Normalize a raw (..., 3*bins-1) parameter tensor.

        An all-zero raw vector produces the identity transform on
        [-bound, bound].
        """
        raw = _as_tensor(raw)
        k = spec.bins
        if raw.shape[-1] != spec.n_params:
            raise SplineError(f"expected last axis {spec.n_params}, got "
                              f"{raw.shape[-1]}")
        lead = raw.shape[:-1]
        frac_floor = spec.min_bin_fraction
        span = 2.0 * spec.bound
        w = ad.softmax(raw[..., :k], axis=-1)
        w = (w * (1.0 - frac_floor * k) + frac_floor) * span
        h = ad.softmax(raw[..., k:2 * k], axis=-1)
        h = (h * (1.0 - frac_floor * k) + frac_floor) * span
        shift = float(np.log(np.expm1(1.0 - spec.min_derivative)))
        d_int = ad.softplus(raw[..., 2 * k:] + shift) + spec.min_derivative
        ones = Tensor(np.ones(lead + (1,)))
        d = ad.concat([ones, d_int, ones], axis=-1)
        return cls(w, h, d, bound=spec.bound, kind=spec.kind)

    # -- evaluation ---------------------------------------------------------

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Map x -> y; returns (y, log dy/dx). Identity outside the interval
        (log-derivative zero there)."""
        return self._apply(x, inverse=False)

    def inverse(self, y) -> tuple[Tensor, Tensor]:
        """Map y -> x; returns (x, log dx/dy)."""
        return self._apply(y, inverse=True)

    def _apply(self, v, inverse: bool) -> tuple[Tensor, Tensor]:
        v = _as_tensor(v)
        if v.shape != self.widths.shape[:-1]:
            raise SplineError(f"input shape {v.shape} does not match spline "
                              f"batch shape {self.widths.shape[:-1]}")
        b = self.bound
        inside = np.abs(v.data) < b
        v_safe = ad.where(inside, v, Tensor(0.0))
        knots_in = self.knots_y if inverse else self.knots_x
        kb = self.bins
        counts = (v_safe.data[..., None] >= knots_in.data[..., :-1]).sum(-1)
        idx = np.clip(counts - 1, 0, kb - 1)
        eye = np.eye(kb + 1)
        oh0 = eye[idx]
        oh1 = eye[idx + 1]
        x0 = _gather_last(self.knots_x, oh0)
        x1 = _gather_last(self.knots_x, oh1)
        y0 = _gather_last(self.knots_y, oh0)
        y1 = _gather_last(self.knots_y, oh1)
        d0 = _gather_last(self.derivatives, oh0)
        d1 = _gather_last(self.derivatives, oh1)
        if self.kind == "quadratic":
            out, ld = _rq_piece(v_safe, x0, x1, y0, y1, d0, d1, inverse)
        else:
            out, ld = _lr_piece(v_safe, x0, x1, y0, y1, d0, d1, inverse)
        out = ad.where(inside, out, v)
        ld = ad.where(inside, ld, Tensor(0.0))
        return out, ld


def _rq_piece(v, x0, x1, y0, y1, d0, d1, inverse):
    """Rational-quadratic piece on one bin; returns (value, log-derivative
    of the requested direction)."""
    w = x1 - x0
    h = y1 - y0
    s = h / w
    dsum = d1 + d0 - 2.0 * s
    if not inverse:
        xi = (v - x0) / w
        omx = 1.0 - xi
        xiomx = xi * omx
        den = s + dsum * xiomx
        y = y0 + h * (s * xi * xi + d0 * xiomx) / den
        deriv = s * s * (d1 * xi * xi + 2.0 * s * xiomx + d0 * omx * omx) \
            / (den * den)
        return y, ad.log(deriv)
    yp = v - y0
    a = h * (s - d0) + yp * dsum
    bq = h * d0 - yp * dsum
    c = (-s) * yp
    disc = bq * bq - 4.0 * a * c
    if np.any(disc.data < -1e-10):
        raise AssertionError("spline inverse discriminant went negative; "
                             "parameterization is non-monotone")
    disc = ad.where(disc.data > 0.0, disc, Tensor(0.0))
    xi = (2.0 * c) / (-bq - disc ** 0.5)
    omx = 1.0 - xi
    xiomx = xi * omx
    den = s + dsum * xiomx
    x = x0 + xi * w
    deriv = s * s * (d1 * xi * xi + 2.0 * s * xiomx + d0 * omx * omx) \
        / (den * den)
    return x, -ad.log(deriv)


def _lr_piece(v, x0, x1, y0, y1, d0, d1, inverse):
    """Linear-rational piece: two homographic segments joined at the bin
    midpoint (mid-fraction fixed at 1/2 keeps the 3*bins-1 raw layout)."""
    w = x1 - x0
    h = y1 - y0
    half = w * 0.5
    r0 = d0 ** 0.5
    r1 = d1 ** 0.5
    ym = y0 + h * r0 / (r0 + r1)
    dya = ym - y0
    dyb = y1 - ym
    wm = d0 * half / dya
    wb2 = d1 * half / dyb
    xm = x0 + half
    # each piece evaluates on an input clamped to its own domain so the
    # unselected branch never hits a vanishing denominator
    if not inverse:
        in_a = v.data <= xm.data
        va = ad.where(in_a, v, x0)
        vb = ad.where(in_a, x1, v)
        u = (va - x0) / half
        den_a = (1.0 - u) + wm * u
        ya = (y0 * (1.0 - u) + wm * ym * u) / den_a
        da = wm * dya / (den_a * den_a) / half
        t = (vb - xm) / half
        den_b = wb2 * (1.0 - t) + t
        yb = (wb2 * ym * (1.0 - t) + y1 * t) / den_b
        db = wb2 * dyb / (den_b * den_b) / half
        return ad.where(in_a, ya, yb), ad.log(ad.where(in_a, da, db))
    in_a = v.data <= ym.data
    va = ad.where(in_a, v, y0)
    vb = ad.where(in_a, y1, v)
    ya_num = va - y0
    u = ya_num / (wm * (ym - va) + ya_num)
    xa = x0 + half * u
    den_a = (1.0 - u) + wm * u
    da = wm * dya / (den_a * den_a) / half
    yb_num = wb2 * (vb - ym)
    t = yb_num / ((y1 - vb) + yb_num)
    xb = xm + half * t
    den_b = wb2 * (1.0 - t) + t
    db = wb2 * dyb / (den_b * den_b) / half
    return ad.where(in_a, xa, xb), -ad.log(ad.where(in_a, da, db))
