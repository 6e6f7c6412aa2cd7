"""Difference learner and outlier-masking head.

The difference learner is a small UNet over the channel-stacked
(aligned template, source) pair; it emits two sigmoid maps, one per input.
The masking head fuses those two maps into the final defect map.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .registration import register

__all__ = [
    "ArchConfig",
    "DifferenceLearner",
    "MaskHead",
    "SegmenterNet",
    "init_params",
    "param_count",
    "difference_forward",
    "mask_forward",
    "full_forward",
    "save_params",
    "load_params",
    "encode_params",
    "decode_params",
    "ForwardResult",
    "CheckpointError",
]

MAGIC = b"SPDF"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Network topology.

    Parameters
    ----------
    in_channels : int
        Channels per image; 1 for grayscale, 3 for RGB.  The learner sees
        twice this many.
    base_width : int
        Feature width at full resolution, doubled at every level.
    depth : int
        Number of resolution levels.
    mask_width : int
        Hidden width of the masking head.
    leak : float
        Negative slope of the leaky rectifier.
    """

    in_channels: int = 1
    base_width: int = 16
    depth: int = 4
    mask_width: int = 16
    leak: float = 0.1

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.base_width < 1 or self.mask_width < 1:
            raise ValueError("widths must be positive")
        if not 1 <= self.depth <= 8:
            raise ValueError("depth must lie in [1, 8]")
        if not 0 <= self.leak < 1:
            raise ValueError("leak must lie in [0, 1)")

    @property
    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    def layers(self):
        """Ordered ``(name, in_ch, out_ch, kernel)`` for every convolution."""
        w = self.widths
        out = [("enc0a", 2 * self.in_channels, w[0], 3), ("enc0b", w[0], w[0], 3)]
        for i in range(1, self.depth):
            out += [(f"enc{i}a", w[i - 1], w[i], 3), (f"enc{i}b", w[i], w[i], 3)]
        for i in reversed(range(self.depth - 1)):
            out += [(f"dec{i}a", w[i + 1] + w[i], w[i], 3), (f"dec{i}b", w[i], w[i], 3)]
        out.append(("head", w[0], 2, 1))
        m = self.mask_width
        out += [("mask0", 2, m, 3), ("mask1", m, m, 3), ("mask2", m, 1, 3)]
        return out

    def min_size(self):
        return 2 ** (self.depth - 1)


def param_count(arch):
    """Closed-form parameter count: weights plus biases of every layer."""
    return sum(cin * cout * k * k + cout for _, cin, cout, k in arch.layers())


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _standardize(x, eps=1e-2):
    """Zero mean, unit deviation per sample and channel; cancels global gain."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    std = x.std(dim=(-2, -1), keepdim=True)
    return (x - mean) / (std + eps)


class DifferenceLearner(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        w = arch.widths
        self.enc = nn.ModuleList()
        self.enc.append(nn.ModuleList([_conv(2 * arch.in_channels, w[0], 3), _conv(w[0], w[0], 3)]))
        for i in range(1, arch.depth):
            self.enc.append(nn.ModuleList([_conv(w[i - 1], w[i], 3, stride=2), _conv(w[i], w[i], 3)]))
        self.dec = nn.ModuleList()
        for i in reversed(range(arch.depth - 1)):
            self.dec.append(nn.ModuleList([_conv(w[i + 1] + w[i], w[i], 3), _conv(w[i], w[i], 3)]))
        self.head = _conv(w[0], 2, 1)

    def forward(self, x):
        act = lambda t: F.leaky_relu(t, self.arch.leak)  # noqa: E731
        x = _standardize(x)
        skips = []
        for a, b in self.enc:
            x = act(b(act(a(x))))
            skips.append(x)
        for (a, b), skip in zip(self.dec, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = act(b(act(a(torch.cat([x, skip], dim=1)))))
        return torch.sigmoid(self.head(x))


class MaskHead(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        m = arch.mask_width
        self.convs = nn.ModuleList([_conv(2, m, 3), _conv(m, m, 3), _conv(m, 1, 3)])

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, self.arch.leak)
        return torch.sigmoid(x)


class SegmenterNet(nn.Module):
    """Both learnable stages plus the seed they were initialised from."""

    def __init__(self, arch=None, seed=0):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.seed = int(seed)
        self.difference = DifferenceLearner(self.arch)
        self.mask = MaskHead(self.arch)

    def layer_modules(self):
        """Convolutions in the order of :meth:`ArchConfig.layers`."""
        mods = []
        for a, b in self.difference.enc:
            mods += [a, b]
        for a, b in self.difference.dec:
            mods += [a, b]
        mods.append(self.difference.head)
        mods += list(self.mask.convs)
        return mods

    def named_tensors(self):
        """``(name, tensor)`` in serialization order."""
        out = []
        for (name, *_), conv in zip(self.arch.layers(), self.layer_modules()):
            out += [(f"{name}.weight", conv.weight), (f"{name}.bias", conv.bias)]
        return out

    def param_count(self):
        return sum(p.numel() for p in self.parameters())


def init_params(seed=0, arch=None, dtype=torch.float32):
    """Fresh network with fan-in scaled uniform weights and zero biases.

    Weights are drawn from ``U(-b, b)`` with ``b = sqrt(6 / ((1 + leak**2) * fan_in))``
    using a generator seeded by ``seed`` alone, so the result does not
    depend on torch's global RNG.
    """
    arch = arch or ArchConfig()
    net = SegmenterNet(arch, seed).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in net.layer_modules():
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            bound = math.sqrt(6.0 / ((1.0 + arch.leak**2) * fan_in))
            w = torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
            conv.weight.copy_(w * bound)
            conv.bias.zero_()
    return net


def _as_batch(img, channels, dtype):
    t = img if isinstance(img, torch.Tensor) else torch.as_tensor(np.asarray(img, dtype=np.float64))
    t = t.to(dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        # H x W x C single image, or B x H x W batch of planes
        t = t.permute(2, 0, 1)[None] if channels > 1 and t.shape[-1] == channels else t[:, None]
    if t.ndim != 4 or t.shape[1] != channels:
        raise ValueError(f"expected {channels}-channel images, got shape {tuple(t.shape)}")
    return t


def _check_size(net, h, w):
    m = net.arch.min_size()
    if h % m or w % m:
        raise ValueError(f"image size {h}x{w} must be divisible by {m} for depth {net.arch.depth}")


def _dtype(net):
    return next(net.parameters()).dtype


def difference_forward(net, aligned_template, source):
    """Run the difference learner.

    Accepts H x W planes or B x H x W batches (numpy or torch).  Returns
    ``(template_only, source_only)`` as tensors of shape B x H x W (batch)
    or H x W (single).
    """
    c = net.arch.in_channels
    single = np.ndim(aligned_template) == 2 or (c == 3 and np.ndim(aligned_template) == 3)
    t = _as_batch(aligned_template, c, _dtype(net))
    s = _as_batch(source, c, _dtype(net))
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
    _check_size(net, *t.shape[-2:])
    out = net.difference(torch.cat([t, s], dim=1))
    template_only, source_only = out[:, 0], out[:, 1]
    if single:
        return template_only[0], source_only[0]
    return template_only, source_only


def mask_forward(net, template_only, source_only):
    """Fuse the two streams into the defect map (same leading shape as the inputs)."""
    if tuple(template_only.shape) != tuple(source_only.shape):
        raise ValueError(f"shape mismatch: {tuple(template_only.shape)} vs {tuple(source_only.shape)}")
    single = template_only.ndim == 2
    x = torch.stack([template_only, source_only], dim=-3)
    if single:
        x = x[None]
    out = net.mask(x.to(_dtype(net)))[:, 0]
    return out[0] if single else out


@dataclass
class ForwardResult:
    defect_map: torch.Tensor
    template_only: torch.Tensor
    source_only: torch.Tensor
    registration: object


def full_forward(net, template, source, registration=None, use_mask=True):
    """Register, difference, mask.  ``registration`` may be a precomputed
    result (or anything with an ``aligned_template`` attribute)."""
    reg = registration if registration is not None else register(template, source)
    template_only, source_only = difference_forward(net, reg.aligned_template, _gray(source))
    if use_mask:
        fused = mask_forward(net, template_only, source_only)
    else:
        fused = torch.maximum(template_only, source_only)
    return ForwardResult(fused, template_only, source_only, reg)


def _gray(img):
    from .spectral import to_grayscale

    return to_grayscale(np.asarray(img, dtype=np.float64)) if np.ndim(img) == 3 else img


# ---------------------------------------------------------------- checkpoints


def _pack(header, tensors):
    """Binary container: magic, version, header length, JSON header, float64 data."""
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    for t in tensors:
        buf.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes())
    return buf.getvalue()


def _unpack(blob):
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    data = blob[12 + hlen :]
    arrays = {}
    offset = 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(data):
            raise CheckpointError("truncated checkpoint")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        offset += n
    if offset != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, arrays


def encode_params(net, extra_header=None, extra_tensors=()):
    named = net.named_tensors() + list(extra_tensors)
    header = {
        "kind": "params",
        "arch": asdict(net.arch),
        "seed": net.seed,
        "dtype": str(_dtype(net)).replace("torch.", ""),
        "tensors": [[n, list(t.shape)] for n, t in named],
    }
    header.update(extra_header or {})
    return _pack(header, [t for _, t in named])


def decode_params(blob):
    """Returns ``(net, header, arrays)``; arrays include any extra tensors."""
    header, arrays = _unpack(blob)
    try:
        arch = ArchConfig(**header["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad arch descriptor: {exc}") from exc
    dtype = getattr(torch, header.get("dtype", "float64"))
    net = SegmenterNet(arch, header.get("seed", 0)).to(dtype)
    with torch.no_grad():
        for name, t in net.named_tensors():
            if name not in arrays or tuple(arrays[name].shape) != tuple(t.shape):
                raise CheckpointError(f"tensor {name} missing or misshapen")
            t.copy_(torch.from_numpy(arrays[name].copy()))
    return net, header, arrays


def save_params(net, path):
    with open(path, "wb") as fh:
        fh.write(encode_params(net))


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_params(blob)[0]
