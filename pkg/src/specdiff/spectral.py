"""Spectral primitives: windowing, FFT magnitude, log-polar resampling,
phase correlation and soft expectation over correlation surfaces.

Every function accepts either a numpy array or a torch tensor.  Numpy in
gives numpy out (float64); tensors stay tensors so gradients flow through
to whatever produced them.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

__all__ = [
    "LogPolarParams",
    "to_grayscale",
    "apodize",
    "fft_magnitude",
    "highpass",
    "highpass_gain",
    "log_polar",
    "phase_correlate",
    "soft_expectation",
    "normalize_to_distribution",
    "bilinear_sample",
    "is_power_of_two",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SPECTRUM_EPS = 1e-12


def is_power_of_two(n):
    return n > 0 and (n & (n - 1)) == 0


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _out(t, to_numpy):
    if to_numpy:
        return t.detach().cpu().numpy()
    return t


def _array_api(func):
    """Run ``func`` on tensors, handing numpy back to numpy callers."""

    @functools.wraps(func)
    def wrapper(x, *args, **kwargs):
        t, to_numpy = _as_tensor(x)
        return _out(func(t, *args, **kwargs), to_numpy)

    return wrapper


def _tiny(dtype):
    """Floor under a squared modulus; keeps sqrt differentiable at zero."""
    return 1e-60 if dtype == torch.float64 else 1e-36


def _require_finite(t, what):
    if not bool(torch.isfinite(t).all()):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class LogPolarParams:
    """Sampling grid of the log-polar transform.

    ``r_max`` and ``center`` default to ``None`` and are resolved against
    the plane shape (half the shorter side, and the zero-frequency bin of a
    centered spectrum).  ``angle_span`` is the angular extent in degrees
    covered by the ``angular_bins`` columns.
    """

    angular_bins: int = 256
    radial_bins: int = 256
    r_min: float = 1.0
    r_max: float | None = None
    center: tuple[float, float] | None = None
    angle_span: float = 360.0

    def resolve(self, shape):
        h, w = shape[-2], shape[-1]
        out = self
        if out.r_max is None:
            out = replace(out, r_max=min(h, w) / 2.0)
        if out.center is None:
            out = replace(out, center=(float(h // 2), float(w // 2)))
        out.validate()
        return out

    def validate(self):
        if self.angular_bins < 8 or self.radial_bins < 8:
            raise ValueError("angular_bins and radial_bins must be >= 8")
        if self.r_min <= 0:
            raise ValueError("r_min must be positive")
        if self.r_max is not None and not self.r_min < self.r_max:
            raise ValueError(f"need r_min < r_max, got {self.r_min} >= {self.r_max}")
        if not 0 < self.angle_span <= 360.0:
            raise ValueError("angle_span must lie in (0, 360]")

    @property
    def log_base(self):
        """Natural log of the radius ratio between neighbouring rows."""
        if self.r_max is None:
            raise ValueError("r_max is unresolved")
        return math.log(self.r_max / self.r_min) / (self.radial_bins - 1)

    def radii(self):
        i = np.arange(self.radial_bins, dtype=np.float64)
        return self.r_min * np.exp(i * self.log_base)

    def angles(self):
        """Sample angles in radians."""
        j = np.arange(self.angular_bins, dtype=np.float64)
        return np.deg2rad(self.angle_span * j / self.angular_bins)


@_array_api
def to_grayscale(image):
    """Collapse an H x W x C image (C in {1, 3}) or an H x W plane to one channel."""
    if image.ndim == 2:
        return image
    if image.ndim != 3 or image.shape[-1] not in (1, 3):
        raise ValueError(f"expected H x W, H x W x 1 or H x W x 3, got shape {tuple(image.shape)}")
    if image.shape[-1] == 1:
        return image[..., 0]
    wr, wg, _ = LUMA_WEIGHTS
    r, g, b = image.unbind(-1)
    # same weights, arranged so that any grey level comes back exactly
    return b + wr * (r - b) + wg * (g - b)


def hann(n, dtype=torch.float64):
    if n == 1:
        return torch.ones(1, dtype=dtype)
    i = torch.arange(n, dtype=dtype)
    return 0.5 * (1.0 - torch.cos(2.0 * math.pi * i / (n - 1)))


@_array_api
def apodize(p):
    """Multiply by a separable Hann window (zero on the border rows and columns)."""
    h, w = p.shape[-2], p.shape[-1]
    win = hann(h, p.dtype)[:, None] * hann(w, p.dtype)[None, :]
    return p * win


@_array_api
def fft_magnitude(p):
    """Centered magnitude of the 2-D DFT (zero frequency at ``(H // 2, W // 2)``)."""
    _require_finite(p, "plane")
    spec = torch.fft.fftshift(torch.fft.fft2(p), dim=(-2, -1))
    # abs() has an undefined gradient at 0; route through a floored hypot instead
    return torch.sqrt(spec.real**2 + spec.imag**2 + _tiny(p.dtype))


def highpass_gain(rho):
    """Raised-cosine high-pass gain; 0 at rho=0 and 1 at rho>=1."""
    rho = np.clip(np.asarray(rho, dtype=np.float64), 0.0, 1.0)
    u = 0.5 * (1.0 - np.cos(np.pi * rho))
    return u * (2.0 - u)


def _highpass_filter(h, w):
    cy, cx = h // 2, w // 2
    y = (np.arange(h) - cy) / (h / 2.0)
    x = (np.arange(w) - cx) / (w / 2.0)
    rho = np.hypot(y[:, None], x[None, :])
    return highpass_gain(rho)


@_array_api
def highpass(spectrum):
    """Attenuate low frequencies of a centered spectrum; the DC bin becomes 0."""
    filt = torch.as_tensor(_highpass_filter(spectrum.shape[-2], spectrum.shape[-1]), dtype=spectrum.dtype)
    return spectrum * filt


def bilinear_sample(plane, rows, cols):
    """Sample ``plane`` (..., H, W) at real coordinates with zero fill.

    Neighbours that fall outside the grid contribute zero, so a sample half
    a pixel past the border fades linearly instead of clamping.
    """
    t, to_numpy = _as_tensor(plane)
    rows = torch.as_tensor(rows, dtype=t.dtype)
    cols = torch.as_tensor(cols, dtype=t.dtype)
    h, w = t.shape[-2], t.shape[-1]
    r0 = torch.floor(rows)
    c0 = torch.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.long()
    c0 = c0.long()
    flat = t.reshape(*t.shape[:-2], h * w)
    out = torch.zeros(*t.shape[:-2], *rows.shape, dtype=t.dtype)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            idx = (rr.clamp(0, h - 1) * w + cc.clamp(0, w - 1)).reshape(-1)
            vals = flat[..., idx].reshape(*t.shape[:-2], *rows.shape)
            out = out + vals * (wr * wc * inside.to(t.dtype))
    return _out(out, to_numpy)


def _log_polar_coords(params):
    radii = params.radii()
    angles = params.angles()
    cy, cx = params.center
    rows = cy + radii[:, None] * np.sin(angles)[None, :]
    cols = cx + radii[:, None] * np.cos(angles)[None, :]
    return rows, cols


@_array_api
def log_polar(p, params=None):
    """Resample ``p`` onto a radial_bins x angular_bins log-polar grid.

    Row ``i`` sits at radius ``r_min * (r_max / r_min) ** (i / (radial_bins - 1))``
    and column ``j`` at angle ``angle_span * j / angular_bins`` degrees, measured
    from the +column axis towards +row.  Rotating the input by ``d`` degrees
    rolls the output by ``d * angular_bins / angle_span`` columns; scaling it by
    ``s`` rolls the rows by ``log(s) / log(r_max / r_min) * (radial_bins - 1)``.
    """
    _require_finite(p, "plane")
    params = (params or LogPolarParams()).resolve(p.shape)
    rows, cols = _log_polar_coords(params)
    return bilinear_sample(p, rows, cols)


def phase_correlate(a, b):
    """Phase correlation surface of ``b`` against ``a``.

    Returns the real inverse FFT of the normalised cross-power spectrum,
    fftshifted so zero displacement lands on ``(H // 2, W // 2)``.  If ``b``
    is ``a`` circularly shifted by ``(dr, dc)`` the peak sits at
    ``(H // 2 + dr, W // 2 + dc)``.
    """
    ta, np_a = _as_tensor(a)
    tb, np_b = _as_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    _require_finite(ta, "first plane")
    _require_finite(tb, "second plane")
    cross = torch.conj(torch.fft.fft2(ta)) * torch.fft.fft2(tb)
    mag = torch.sqrt(cross.real**2 + cross.imag**2 + _tiny(ta.dtype))
    norm = cross / torch.clamp(mag, min=SPECTRUM_EPS)
    corr = torch.fft.fftshift(torch.fft.ifft2(norm).real, dim=(-2, -1))
    return _out(corr, np_a and np_b)


def _softmax_flat(c, temperature):
    flat = (c * temperature).reshape(*c.shape[:-2], -1)
    return torch.softmax(flat, dim=-1).reshape(c.shape)


@_array_api
def normalize_to_distribution(c, temperature=1.0):
    """Softmax of ``temperature * c`` over all bins; the output sums to 1.

    ``temperature`` multiplies the map, so larger values sharpen the
    distribution.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return _softmax_flat(c, temperature)


def _circular_offsets(n, center, dtype):
    """Offsets of each index from ``center`` wrapped into [-n/2, n/2).

    For even ``n`` the bin exactly opposite ``center`` is equidistant both
    ways; it gets offset 0 so a flat background carries no bias.
    """
    idx = torch.arange(n, dtype=torch.long)
    off = (idx - center + n // 2) % n - n // 2
    off = off.to(dtype)
    if n % 2 == 0:
        off = torch.where(off == -(n // 2), torch.zeros_like(off), off)
    return off


def soft_expectation(c, temperature=10.0):
    """Probability-weighted mean (row, col) of ``softmax(temperature * c)``.

    Coordinates are measured relative to the argmax with circular wrap, then
    mapped back into ``[0, N)``, so peaks near the seam are not dragged
    towards the middle.  Differentiable in the map entries.
    """
    t, to_numpy = _as_tensor(c)
    _require_finite(t, "correlation map")
    if t.ndim != 2:
        raise ValueError("soft_expectation expects a 2-D map")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    h, w = t.shape
    p = _softmax_flat(t, temperature)
    peak = int(torch.argmax(t.detach()))
    r0, c0 = divmod(peak, w)
    dr = _circular_offsets(h, r0, t.dtype)
    dc = _circular_offsets(w, c0, t.dtype)
    row = (r0 + (p.sum(1) * dr).sum()) % h
    col = (c0 + (p.sum(0) * dc).sum()) % w
    if to_numpy:
        return float(row), float(col)
    return row, col
