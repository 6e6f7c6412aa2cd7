"""Training objectives and a finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .spectral import LogPolarParams, fft_magnitude, highpass, log_polar, normalize_to_distribution, phase_correlate

__all__ = [
    "TargetDistribution",
    "LossValue",
    "GradCheckReport",
    "target_one_peak",
    "angle_marginal",
    "irrelevance_loss",
    "defect_loss",
    "total_loss",
    "grad_check",
    "BORDER_MARGIN",
    "IRRELEVANCE_TEMPERATURE",
]

BORDER_MARGIN = 8
# softmax sharpness for the angle distribution; at 3 or less identical maps
# score like unrelated ones, at 30 the gradient on near-copies is three
# orders above the defect term and saturates both streams
IRRELEVANCE_TEMPERATURE = 10.0
KL_FLOOR = 1e-12


@dataclass(frozen=True)
class TargetDistribution:
    data: np.ndarray
    sigma_bins: float

    @property
    def angular_bins(self):
        return len(self.data)


def _circular_distance(n, center):
    k = np.arange(n, dtype=np.float64)
    d = np.abs(k - center)
    return np.minimum(d, n - d)


def target_one_peak(angular_bins=256, sigma_bins=2.0):
    """Circular Gaussian over angle bins with its mode at half a turn.

    ``sigma_bins = 0`` gives an indicator on bin ``angular_bins // 2``.
    """
    if angular_bins < 8:
        raise ValueError("angular_bins must be >= 8")
    if sigma_bins < 0:
        raise ValueError("sigma_bins must be non-negative")
    center = angular_bins // 2
    if sigma_bins == 0:
        data = np.zeros(angular_bins)
        data[center] = 1.0
    else:
        d = _circular_distance(angular_bins, center)
        data = np.exp(-(d**2) / (2.0 * sigma_bins**2))
        data /= data.sum()
    return TargetDistribution(data, float(sigma_bins))


def angle_marginal(template_only, source_only, lp=None, temperature=IRRELEVANCE_TEMPERATURE):
    """Angle distribution of the rotation/scale correlation between two maps.

    Entry ``k`` is the probability that ``source_only`` is ``template_only``
    rotated by ``k * angle_span / angular_bins``; so bin 0 means no rotation
    and bin ``angular_bins // 2`` half a turn.  Accepts (..., H, W) tensors.
    """
    lp = lp or LogPolarParams()
    la = log_polar(highpass(fft_magnitude(template_only)), lp)
    lb = log_polar(highpass(fft_magnitude(source_only)), lp)
    p = normalize_to_distribution(phase_correlate(la, lb), temperature)
    q = p.sum(-2)
    # correlation maps put zero displacement in the middle column
    if isinstance(q, torch.Tensor):
        return torch.fft.ifftshift(q, dim=-1)
    return np.fft.ifftshift(q, axes=-1)


def _kl(target, q):
    t = torch.as_tensor(target, dtype=q.dtype)
    support = t > 0
    ts = t[support]
    return (ts * (torch.log(ts) - torch.log(torch.clamp(q[..., support], min=KL_FLOOR)))).sum(-1)


def irrelevance_loss(template_only, source_only, target=None, temperature=IRRELEVANCE_TEMPERATURE, lp=None):
    """KL(target || q) pushing the two streams' angle distribution to half a turn.

    Parameters
    ----------
    template_only, source_only : array or tensor, shape (..., H, W)
        The two learner streams.  Leading dimensions are a batch and the
        loss is averaged over them.
    target : TargetDistribution, optional
        Defaults to ``target_one_peak(A, 2.0)`` for the grid's ``A``.
    temperature : float
        Softmax sharpness applied to the correlation surface.
    lp : LogPolarParams, optional
        Log-polar grid for the spectra.

    Returns
    -------
    Scalar tensor (or float for numpy inputs).
    """
    to_numpy = not isinstance(template_only, torch.Tensor) and not isinstance(source_only, torch.Tensor)
    a = template_only
    if not isinstance(a, torch.Tensor):
        a = torch.as_tensor(a, dtype=torch.float64)
    b = source_only
    if not isinstance(b, torch.Tensor):
        b = torch.as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    lp = lp or LogPolarParams()
    target = target or target_one_peak(lp.angular_bins, 2.0)
    if target.angular_bins != lp.angular_bins:
        raise ValueError("target and log-polar grid disagree on angular_bins")
    q = angle_marginal(a, b, lp, temperature)
    loss = _kl(target.data, q).mean()
    return float(loss) if to_numpy else loss


def _valid(t, margin):
    if margin <= 0:
        return t
    h, w = t.shape[-2], t.shape[-1]
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} leaves no valid region in {h}x{w}")
    return t[..., margin : h - margin, margin : w - margin]


def defect_loss(pred, truth, margin=BORDER_MARGIN, pos_weight=1.0):
    """Mean squared error between prediction and ground truth, ignoring a
    ``margin``-pixel border where warping leaves no valid data.

    ``pos_weight`` scales the squared error on ground-truth defect pixels;
    the default of 1 is the plain mean.
    """
    to_numpy = not isinstance(pred, torch.Tensor) and not isinstance(truth, torch.Tensor)
    pred = pred if isinstance(pred, torch.Tensor) else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    truth = truth if isinstance(truth, torch.Tensor) else torch.as_tensor(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    pv, tv = _valid(pred, margin), _valid(truth.to(pred.dtype), margin)
    sq = (pv - tv) ** 2
    if pos_weight != 1.0:
        sq = sq * (1.0 + (pos_weight - 1.0) * tv)
    loss = sq.mean()
    return float(loss) if to_numpy else loss


@dataclass
class LossValue:
    value: object
    components: dict = field(default_factory=dict)

    @property
    def irr(self):
        return self.components["irr"]

    @property
    def defect(self):
        return self.components["def"]

    def as_floats(self):
        return {"total": _scalar(self.value), "irr": _scalar(self.irr), "def": _scalar(self.defect)}


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(irr, defect):
    """Unit-weight sum of the two components."""
    for name, v in (("irr", irr), ("def", defect)):
        if not math.isfinite(_scalar(v)):
            raise FloatingPointError(f"non-finite {name} loss: {_scalar(v)}")
    return LossValue(irr + defect, {"irr": irr, "def": defect})


# ---------------------------------------------------------------- gradients


@dataclass
class GradCheckReport:
    max_rel_error: float
    samples: int
    worst: tuple
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol):
        return self.max_rel_error < tol


def grad_check(loss_fn, point, epsilon=1e-6, samples=50, seed=0, floor=None):
    """Compare the autograd gradient of ``loss_fn`` at ``point`` against
    central finite differences.

    Parameters
    ----------
    loss_fn : callable
        Maps the tensor(s) in ``point`` to a scalar tensor.
    point : tensor or sequence of tensors
        Evaluation point; promoted to float64 copies.
    epsilon : float
        Step size, in [1e-7, 1e-3].
    samples : int
        Coordinates drawn uniformly over all entries of all tensors.
    floor : float, optional
        Lower bound on the relative-error denominator so coordinates with
        vanishing gradient are judged on an absolute scale.  Defaults to
        ``1e-6`` times the largest sampled gradient magnitude.

    Returns
    -------
    GradCheckReport
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    single = isinstance(point, torch.Tensor)
    pts = [point] if single else list(point)
    pts = [p.detach().to(torch.float64).clone().requires_grad_(True) for p in pts]

    def call():
        return loss_fn(pts[0]) if single else loss_fn(*pts)

    loss = call()
    grads = torch.autograd.grad(loss, pts, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(pts, grads)]

    sizes = [p.numel() for p in pts]
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sum(sizes), size=min(samples, sum(sizes)), replace=False)
    analytic, numeric, where = [], [], []
    with torch.no_grad():
        for fi in flat_idx:
            k = int(np.searchsorted(np.cumsum(sizes), fi, side="right"))
            j = int(fi - (sum(sizes[:k])))
            view = pts[k].view(-1)
            orig = view[j].item()
            view[j] = orig + epsilon
            up = float(call())
            view[j] = orig - epsilon
            down = float(call())
            view[j] = orig
            numeric.append((up - down) / (2 * epsilon))
            analytic.append(float(grads[k].view(-1)[j]))
            where.append((k, j))
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if floor is None:
        floor = 1e-6 * max(float(np.abs(analytic).max(initial=0.0)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), len(rel), where[worst], analytic, numeric)
