"""Procedural template/defect pairs built from random primitive shapes.

A template is a handful of anti-aliased shapes on mid-gray.  Its defected
twin redraws the same shapes with small per-shape translations (assembly
jitter, which is *not* a defect), adds a few new small shapes (the
defects), then applies a global similarity pose and a lighting gain.  The
ground-truth mask covers the defects only, in the source frame.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .registration import SCALE_LIMITS, PoseSim2, warp_sim2

__all__ = [
    "GenConfig",
    "Shape",
    "SamplePair",
    "PairRecipe",
    "DatasetError",
    "FORMAT_VERSION",
    "sample_shapes",
    "render",
    "gen_template",
    "draw_pair",
    "gen_pair",
    "pair_seed",
    "gen_dataset",
    "write_dataset",
    "read_dataset",
]

FORMAT_VERSION = 1
SHAPE_KINDS = ("rectangle", "ellipse", "triangle", "line")
BACKGROUND = 0.5
SUPERSAMPLE = 4
MAX_ATTEMPTS = 100


class DatasetError(RuntimeError):
    pass


def _pair_range(name, v, lo=None, hi=None):
    a, b = v
    if a > b:
        raise ValueError(f"{name}: lower bound {a} exceeds upper bound {b}")
    if lo is not None and a < lo:
        raise ValueError(f"{name}: {a} below {lo}")
    if hi is not None and b > hi:
        raise ValueError(f"{name}: {b} above {hi}")


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 256
    n_shapes: tuple[int, int] = (5, 15)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    jitter_px: tuple[float, float] = (0.0, 3.0)
    n_defects: tuple[int, int] = (1, 3)
    defect_area_frac: tuple[float, float] = (0.0005, 0.01)
    translation: tuple[float, float] = (-50.0, 50.0)
    rotation: tuple[float, float] = (0.0, math.pi)
    scale: tuple[float, float] = (0.8, 1.2)
    lighting_gain: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        for name in ("n_shapes", "jitter_px", "n_defects", "defect_area_frac", "translation",
                     "rotation", "scale", "lighting_gain"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        self.validate()

    def validate(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        _pair_range("n_shapes", self.n_shapes, lo=0)
        _pair_range("n_defects", self.n_defects, lo=0)
        _pair_range("jitter_px", self.jitter_px, lo=0)
        _pair_range("defect_area_frac", self.defect_area_frac, lo=0, hi=0.01)
        _pair_range("translation", self.translation)
        _pair_range("rotation", self.rotation, lo=0, hi=2 * math.pi)
        _pair_range("scale", self.scale, lo=SCALE_LIMITS[0], hi=SCALE_LIMITS[1])
        _pair_range("lighting_gain", self.lighting_gain, lo=0)
        if self.n_defects[1] > 0 and self.defect_area_frac[1] <= 0:
            raise ValueError("defects requested with a zero area budget")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if unknown or not self.shape_kinds:
            raise ValueError(f"shape_kinds must be a non-empty subset of {SHAPE_KINDS}")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown GenConfig keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class Shape:
    """One convex primitive.  ``size`` holds half-extents (a, b) along the
    shape's own axes; triangles store their vertex offsets in ``vertices``."""

    kind: str
    cy: float
    cx: float
    size: tuple[float, float]
    angle: float
    value: float
    vertices: tuple[tuple[float, float], ...] = ()

    def moved(self, dy, dx):
        return replace(self, cy=self.cy + dy, cx=self.cx + dx)

    def polygon(self):
        """Vertices as (row, col) offsets from the center, or None for ellipses."""
        a, b = self.size
        if self.kind == "ellipse":
            return None
        if self.kind == "triangle":
            pts = np.asarray(self.vertices, dtype=np.float64)
        else:
            pts = np.array([[-b, -a], [-b, a], [b, a], [b, -a]], dtype=np.float64)
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[c, s], [-s, c]])
        return pts @ rot.T

    def area(self):
        a, b = self.size
        if self.kind == "ellipse":
            return math.pi * a * b
        if self.kind == "triangle":
            (y0, x0), (y1, x1), (y2, x2) = self.vertices
            return abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) / 2.0
        return 4.0 * a * b

    def radius(self):
        poly = self.polygon()
        if poly is None:
            return max(self.size)
        return float(np.max(np.hypot(poly[:, 0], poly[:, 1])))

    def coverage(self, size):
        """Fractional pixel coverage on a ``size`` x ``size`` grid (supersampled)."""
        cov = np.zeros((size, size), dtype=np.float64)
        r = self.radius() + 1.0
        r0 = max(int(math.floor(self.cy - r)), 0)
        r1 = min(int(math.ceil(self.cy + r)) + 1, size)
        c0 = max(int(math.floor(self.cx - r)), 0)
        c1 = min(int(math.ceil(self.cx + r)) + 1, size)
        if r0 >= r1 or c0 >= c1:
            return cov
        k = SUPERSAMPLE
        sub = (np.arange(k) + 0.5) / k - 0.5
        ys = (np.arange(r0, r1)[:, None] + sub[None, :]).ravel() - self.cy
        xs = (np.arange(c0, c1)[:, None] + sub[None, :]).ravel() - self.cx
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        poly = self.polygon()
        if poly is None:
            c, s = math.cos(self.angle), math.sin(self.angle)
            u = c * xx + s * yy
            v = -s * xx + c * yy
            a, b = self.size
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        else:
            inside = _inside_convex(poly, yy, xx)
        block = inside.reshape(r1 - r0, k, c1 - c0, k).mean(axis=(1, 3))
        cov[r0:r1, c0:c1] = block
        return cov

    def to_dict(self):
        d = asdict(self)
        d["size"] = list(self.size)
        d["vertices"] = [list(v) for v in self.vertices]
        return d


def _inside_convex(poly, yy, xx):
    n = len(poly)
    # orientation-agnostic: all edge cross products share one sign
    signs = []
    for i in range(n):
        y0, x0 = poly[i]
        y1, x1 = poly[(i + 1) % n]
        signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
    signs = np.stack(signs)
    return np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)


def render(shapes, size, background=BACKGROUND):
    """Paint shapes in order over a flat background (later shapes on top)."""
    img = np.full((size, size), background, dtype=np.float64)
    for sh in shapes:
        cov = sh.coverage(size)
        img = img * (1.0 - cov) + sh.value * cov
    return img


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _integer(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _contrasting_value(rng, against, min_contrast=0.2):
    for _ in range(32):
        v = float(rng.uniform(0.0, 1.0))
        if abs(v - against) >= min_contrast:
            return v
    return 0.0 if against > 0.5 else 1.0


def _random_shape(rng, kind, cy, cx, extent, value):
    """Shape of ``kind`` whose half-extent is about ``extent`` pixels."""
    angle = float(rng.uniform(0.0, math.pi))
    if kind == "rectangle":
        a = extent * float(rng.uniform(0.5, 1.0))
        b = extent * float(rng.uniform(0.5, 1.0))
        return Shape(kind, cy, cx, (a, b), angle, value)
    if kind == "ellipse":
        a = extent * float(rng.uniform(0.5, 1.0))
        b = extent * float(rng.uniform(0.5, 1.0))
        return Shape(kind, cy, cx, (a, b), angle, value)
    if kind == "line":
        a = extent * float(rng.uniform(1.2, 2.0))
        b = float(rng.uniform(0.75, 1.5))
        return Shape(kind, cy, cx, (a, min(b, a)), angle, value)
    # triangle: three points on a jittered circle, kept reasonably fat
    base = float(rng.uniform(0, 2 * math.pi))
    phis = base + np.array([0.0, 2.0943951, 4.1887902]) + rng.uniform(-0.4, 0.4, 3)
    rad = extent * rng.uniform(0.8, 1.2, 3)
    verts = tuple((float(r * math.sin(p)), float(r * math.cos(p))) for r, p in zip(rad, phis))
    return Shape(kind, cy, cx, (extent, extent), 0.0, value, verts)


def sample_shapes(rng, cfg):
    """Draw the template's shape list."""
    n = cfg.image_size
    count = _integer(rng, cfg.n_shapes)
    shapes = []
    for _ in range(count):
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        cy, cx = rng.uniform(0.1 * n, 0.9 * n, 2)
        extent = float(rng.uniform(0.04, 0.12)) * n
        value = _contrasting_value(rng, BACKGROUND, 0.15)
        shapes.append(_random_shape(rng, kind, float(cy), float(cx), extent, value))
    return shapes


def gen_template(seed, cfg=None):
    """Defect-free template image for ``seed``."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    return render(sample_shapes(rng, cfg), cfg.image_size)


@dataclass
class PairRecipe:
    """Everything needed to re-render a pair; kept for consistency checks."""

    shapes: list
    jittered: list
    defects: list
    pose: PoseSim2
    gain: float
    size: int

    def render_template(self):
        return render(self.shapes, self.size)

    def render_defected(self):
        """Jittered shapes plus defects, before the global pose and gain."""
        return render(self.jittered + self.defects, self.size)

    def defect_coverage(self):
        cov = np.zeros((self.size, self.size))
        for d in self.defects:
            cov = np.maximum(cov, d.coverage(self.size))
        return cov


@dataclass
class SamplePair:
    template: np.ndarray
    source: np.ndarray
    gt_mask: np.ndarray
    gt_pose: PoseSim2 | None
    seed: int | None = None
    pair_id: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def pose_known(self):
        return self.gt_pose is not None


def _is_identity(pose):
    return pose.theta == 0.0 and pose.scale == 1.0 and pose.tx == 0.0 and pose.ty == 0.0


def _apply_pose(img, pose):
    return img.copy() if _is_identity(pose) else warp_sim2(img, pose)


def _draw_defects(rng, cfg, shapes_img, area_px):
    n = cfg.image_size
    count = _integer(rng, cfg.n_defects)
    if count == 0:
        return []
    parts = rng.dirichlet(np.ones(count)) * area_px
    defects = []
    for part in parts:
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        cy, cx = (float(v) for v in rng.uniform(0.15 * n, 0.85 * n, 2))
        probe = _random_shape(rng, kind, cy, cx, 1.0, 0.0)
        # shape area scales with extent**2 for every kind
        extent = math.sqrt(max(part, 1.0) / probe.area())
        under = shapes_img[int(round(cy)) % n, int(round(cx)) % n]
        shape = _random_shape(rng, kind, cy, cx, extent, 0.0)
        defects.append(replace(shape, value=_contrasting_value(rng, under, 0.3)))
    return defects


def _jitter(rng, shapes, jitter_px):
    out = []
    for sh in shapes:
        mag = _uniform(rng, jitter_px)
        phi = float(rng.uniform(0, 2 * math.pi))
        out.append(sh.moved(mag * math.sin(phi), mag * math.cos(phi)))
    return out


def draw_pair(seed, cfg=None):
    """Sample a :class:`PairRecipe`, rejecting draws whose visible defect
    area in the source frame falls outside ``cfg.defect_area_frac``."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    shapes = sample_shapes(rng, cfg)
    template = render(shapes, n)
    lo, hi = cfg.defect_area_frac
    for _ in range(MAX_ATTEMPTS):
        pose = PoseSim2(
            _uniform(rng, cfg.rotation),
            _uniform(rng, cfg.scale),
            _uniform(rng, cfg.translation),
            _uniform(rng, cfg.translation),
        )
        jittered = _jitter(rng, shapes, cfg.jitter_px)
        # aim at the middle of the admissible band, measured after scaling
        target = _uniform(rng, (lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))) * n * n / pose.scale**2
        defects = _draw_defects(rng, cfg, template, target)
        recipe = PairRecipe(shapes, jittered, defects, pose, _uniform(rng, cfg.lighting_gain), n)
        if not defects:
            return recipe
        frac = _source_mask(recipe).mean()
        if lo <= frac <= hi and frac > 0:
            return recipe
    raise RuntimeError(f"could not satisfy defect area bounds {cfg.defect_area_frac} "
                       f"after {MAX_ATTEMPTS} attempts (seed {seed})")


def _source_mask(recipe):
    if not recipe.defects:
        return np.zeros((recipe.size, recipe.size), dtype=bool)
    cov = _apply_pose(recipe.defect_coverage(), recipe.pose)
    return cov >= 0.5


def gen_pair(seed, cfg=None):
    """Generate one (template, source, mask, pose) sample."""
    cfg = cfg or GenConfig()
    recipe = draw_pair(seed, cfg)
    template = recipe.render_template()
    source = _apply_pose(recipe.render_defected(), recipe.pose)
    if recipe.gain != 1.0:
        source = np.clip(source * recipe.gain, 0.0, 1.0)
    return SamplePair(
        template=template,
        source=source,
        gt_mask=_source_mask(recipe).astype(np.float64),
        gt_pose=recipe.pose,
        seed=int(seed),
        meta={"gain": recipe.gain, "n_defects": len(recipe.defects)},
    )


def pair_seed(dataset_seed, index):
    """Independent per-pair seed, so generation order cannot matter."""
    ss = np.random.SeedSequence([int(dataset_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def gen_dataset(count, cfg=None, seed=None):
    cfg = cfg or GenConfig()
    seed = cfg.seed if seed is None else seed
    return [gen_pair(pair_seed(seed, i), cfg) for i in range(count)]


# ---------------------------------------------------------------- disk format


def _to_png(arr, path):
    q = np.clip(np.rint(np.asarray(arr) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def _from_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    arr = arr / 255.0
    if arr.ndim == 3:
        from .spectral import to_grayscale

        arr = to_grayscale(arr)
    return arr


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_dataset(pairs, directory, cfg=None):
    """Write pairs as ``{id}_template.png``/``_source.png``/``_mask.png`` plus
    ``{id}_meta.json``, and a top-level ``manifest.json``.  Returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, pair in enumerate(pairs):
        pid = pair.pair_id or f"{i:06d}"
        ids.append(pid)
        _to_png(pair.template, directory / f"{pid}_template.png")
        _to_png(pair.source, directory / f"{pid}_source.png")
        _to_png(pair.gt_mask, directory / f"{pid}_mask.png")
        meta = {
            "id": pid,
            "seed": pair.seed,
            "pose": pair.gt_pose.to_dict() if pair.gt_pose is not None else None,
            "config": cfg.to_dict() if cfg is not None else None,
        }
        meta.update({k: v for k, v in pair.meta.items() if k not in meta})
        _dump_json(meta, directory / f"{pid}_meta.json")
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(ids),
        "ids": ids,
        "config": cfg.to_dict() if cfg is not None else None,
    }
    _dump_json(manifest, directory / "manifest.json")
    return manifest


def _discover_ids(directory):
    ids = set()
    for name in os.listdir(directory):
        for suffix in ("_template.png", "_source.png", "_mask.png"):
            if name.endswith(suffix):
                ids.add(name[: -len(suffix)])
    return sorted(ids)


def _read_one(directory, pid):
    paths = {k: directory / f"{pid}_{k}.png" for k in ("template", "source", "mask")}
    missing = [k for k, p in paths.items() if not p.exists()]
    if missing:
        raise DatasetError(f"pair {pid}: missing {', '.join(missing)}")
    template = _from_png(paths["template"])
    source = _from_png(paths["source"])
    mask = (_from_png(paths["mask"]) >= 0.5).astype(np.float64)
    if not (template.shape == source.shape == mask.shape):
        raise DatasetError(f"pair {pid}: image shapes differ")
    meta_path = directory / f"{pid}_meta.json"
    pose = None
    seed = None
    meta = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"pair {pid}: corrupt meta.json: {exc}") from exc
        if meta.get("pose") is not None:
            pose = PoseSim2.from_dict(meta["pose"])
        seed = meta.get("seed")
    return SamplePair(template, source, mask, pose, seed=seed, pair_id=pid, meta=meta)


def read_dataset(directory, strict=True):
    """Load a dataset directory.

    Directories without ``manifest.json`` or per-pair meta files (for
    instance real captures laid out as id triples) load with ``gt_pose``
    set to None.  With ``strict=False`` unreadable pairs are skipped and
    counted instead of raising; the return value is then
    ``(pairs, skipped)``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"corrupt manifest: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"format version {manifest.get('format_version')} not supported (expected {FORMAT_VERSION})"
            )
        ids = manifest.get("ids") or _discover_ids(directory)
    else:
        ids = _discover_ids(directory)
    pairs, skipped = [], 0
    for pid in ids:
        try:
            pairs.append(_read_one(directory, pid))
        except DatasetError:
            if strict:
                raise
            skipped += 1
    if strict:
        return pairs
    return pairs, skipped
