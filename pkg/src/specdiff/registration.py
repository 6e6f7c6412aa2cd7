"""SIM(2) registration by Fourier-Mellin phase correlation.

Rotation and scale come from correlating log-polar resampled magnitude
spectra; translation from a second correlation after undoing them.  The
stage is frozen: everything here runs without autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .spectral import (
    LogPolarParams,
    apodize,
    bilinear_sample,
    fft_magnitude,
    highpass,
    is_power_of_two,
    log_polar,
    normalize_to_distribution,
    phase_correlate,
    soft_expectation,
    to_grayscale,
)

__all__ = [
    "PoseSim2",
    "RegistrationResult",
    "bins_to_pose",
    "estimate_rot_scale",
    "estimate_translation",
    "warp_sim2",
    "register",
    "SCALE_LIMITS",
    "registration_params",
]

TWO_PI = 2.0 * math.pi
SCALE_LIMITS = (0.5, 2.0)
# the outer quarter of the spectrum is dominated by interpolation and
# aliasing residue shared by every warped image, which pins the peak to 0/90 deg
BAND_FRACTION = 0.75


def registration_params(shape, angular_bins=256, radial_bins=256):
    """Log-polar grid used for rotation/scale estimation on ``shape``."""
    r_max = BAND_FRACTION * min(shape[0], shape[1]) / 2.0
    return LogPolarParams(angular_bins, radial_bins, r_min=1.0, r_max=r_max).resolve(shape)


@dataclass(frozen=True)
class PoseSim2:
    """Similarity transform: rotate by ``theta`` (radians) and scale by
    ``scale`` about the image center, then shift by ``(tx, ty)`` pixels
    along columns and rows."""

    theta: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)

    @property
    def theta_deg(self):
        return math.degrees(self.theta)

    def inverse(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        # -(1/s) R(-theta) t
        tx = -(c * self.tx + s * self.ty) / self.scale
        ty = -(-s * self.tx + c * self.ty) / self.scale
        return PoseSim2(-self.theta, 1.0 / self.scale, tx, ty)

    def to_dict(self):
        # radians ride along so a stored pose reloads bit-exactly
        return {"theta_deg": self.theta_deg, "theta_rad": self.theta, "scale": self.scale, "tx": self.tx, "ty": self.ty}

    @classmethod
    def from_dict(cls, d):
        theta = d["theta_rad"] if "theta_rad" in d else math.radians(d["theta_deg"])
        return cls(theta, d["scale"], d["tx"], d["ty"])


def angle_diff_deg(a, b):
    """Smallest signed difference a - b in degrees."""
    return (a - b + 180.0) % 360.0 - 180.0


@dataclass
class RegistrationResult:
    pose: PoseSim2
    angle_scale_map: np.ndarray
    translation_map: np.ndarray
    aligned_template: np.ndarray


def _plane(image):
    p = to_grayscale(np.asarray(image, dtype=np.float64))
    if not np.all(np.isfinite(p)):
        raise ValueError("image contains non-finite values")
    return p


def _check_pair(a, b, pow2=True):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if pow2 and not (is_power_of_two(a.shape[0]) and is_power_of_two(a.shape[1])):
        raise ValueError(f"image dimensions must be powers of two, got {a.shape[:2]}")


def bins_to_pose(row, col, lp):
    """Decode a log-polar correlation peak into ``(theta, scale)``.

    ``theta`` (radians, in [0, 2*pi)) is the angular displacement of the
    peak from the map center and ``scale`` the radial one, so the center
    bin decodes to the identity ``(0, 1)``.  ``lp`` must be resolved.
    """
    a, r = lp.angular_bins, lp.radial_bins
    if not (0 <= row < r and 0 <= col < a):
        raise ValueError(f"bin ({row}, {col}) outside a {r} x {a} map")
    theta = math.radians((col - a / 2) * lp.angle_span / a) % TWO_PI
    scale = math.exp((row - r / 2) * lp.log_base)
    return theta, scale


def _spectrum_log_polar(plane, lp):
    return log_polar(highpass(fft_magnitude(apodize(plane))), lp)


def estimate_rot_scale(template, source, lp=None, temperature=10.0):
    """Rotation and scale taking ``template`` to ``source``.

    Returns ``(theta, scale, angle_scale_map)`` where the map is the
    normalised correlation surface over (radial, angular) displacement.
    ``theta`` carries the 180 degree ambiguity of magnitude spectra;
    :func:`register` resolves it.
    """
    t = _plane(template)
    s = _plane(source)
    _check_pair(t, s)
    lp = lp.resolve(t.shape) if lp is not None else registration_params(t.shape)
    corr = phase_correlate(_spectrum_log_polar(t, lp), _spectrum_log_polar(s, lp))
    row, col = soft_expectation(corr, temperature)
    theta, spectral_scale = bins_to_pose(row, col, lp)
    # magnifying an image shrinks its spectrum
    scale = float(np.clip(1.0 / spectral_scale, *SCALE_LIMITS))
    return theta, scale, normalize_to_distribution(corr, temperature)


def _warp_coords(shape, pose):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    y, x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = x - cx - pose.tx
    dy = y - cy - pose.ty
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    src_x = cx + (c * dx + s * dy) / pose.scale
    src_y = cy + (-s * dx + c * dy) / pose.scale
    return src_y, src_x


def warp_sim2(image, pose):
    """Warp ``image`` so that content at ``q`` lands at ``c + s R (q - c) + t``.

    ``c`` is the pixel-grid center.  Bilinear inverse mapping with zero fill;
    accepts H x W or H x W x C arrays, and torch tensors (gradients flow to
    the pixel values).
    """
    is_tensor = isinstance(image, torch.Tensor)
    arr = image if is_tensor else np.asarray(image, dtype=np.float64)
    h, w = arr.shape[0], arr.shape[1]
    rows, cols = _warp_coords((h, w), pose)
    if arr.ndim == 3:
        moved = arr.permute(2, 0, 1) if is_tensor else np.moveaxis(arr, -1, 0)
        out = bilinear_sample(moved, rows, cols)
        return out.permute(1, 2, 0) if is_tensor else np.moveaxis(out, 0, -1)
    return bilinear_sample(arr, rows, cols)


def estimate_translation(reference, rotated_template, temperature=10.0):
    """Shift ``(tx, ty)`` carrying ``rotated_template`` onto ``reference``.

    Returns ``(tx, ty, translation_map)``.
    """
    ref = _plane(reference)
    mov = _plane(rotated_template)
    _check_pair(ref, mov)
    corr = phase_correlate(apodize(mov), apodize(ref))
    row, col = soft_expectation(corr, temperature)
    h, w = corr.shape
    ty = (row - h // 2 + h / 2) % h - h / 2
    tx = (col - w // 2 + w / 2) % w - w / 2
    return tx, ty, corr


def _peak_sharpness(corr):
    return float(corr.max())


def register(template, source, lp=None, temperature=10.0):
    """Estimate the pose taking ``template`` to ``source`` and align it.

    Both 180 degree rotation candidates are tried; the one whose
    translation correlation peaks higher wins.
    """
    t = _plane(template)
    s = _plane(source)
    _check_pair(t, s)
    with torch.no_grad():
        theta, scale, rs_map = estimate_rot_scale(t, s, lp, temperature)
        best = None
        for cand in (theta, theta + math.pi):
            rs_only = warp_sim2(t, PoseSim2(cand, scale))
            tx, ty, corr = estimate_translation(s, rs_only, temperature)
            sharp = _peak_sharpness(corr)
            if best is None or sharp > best[0]:
                best = (sharp, PoseSim2(cand, scale, tx, ty), corr)
        _, pose, corr = best
        aligned = warp_sim2(np.asarray(template, dtype=np.float64), pose)
    return RegistrationResult(
        pose=pose,
        angle_scale_map=rs_map,
        translation_map=normalize_to_distribution(corr, temperature),
        aligned_template=aligned,
    )
