"""Appearance transforms: noise in-painting, local shuffling, Bezier remapping.

A transform is described by a replayable :class:`TransformSpec`; sampling
a spec and applying it are separate steps so a spec can be stored next to
its output and re-applied later with bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("inpaint", "shuffle", "bezier")
BEZIER_POINTS = 1000


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    kinds: tuple = KINDS
    max_boxes: int = 5
    inpaint_frac: tuple = (0.10, 0.25)
    compose: int = 1  # transforms drawn per image; >1 chains them

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise TransformError(f"unknown or empty transform kinds: {self.kinds}")
        if self.max_boxes < 1:
            raise TransformError("max_boxes must be >= 1")
        lo, hi = self.inpaint_frac
        if not 0 < lo <= hi <= 1:
            raise TransformError(f"bad inpaint fraction range {self.inpaint_frac}")
        if self.compose < 1:
            raise TransformError("compose must be >= 1")


@dataclass
class TransformSpec:
    kind: str
    seed: int
    extents: tuple  # (Z, Y, X) of the grid the spec was drawn for
    boxes: list = field(default_factory=list)  # [((z, y, x), (dz, dy, dx)), ...]
    control_points: tuple | None = None  # ((x1, y1), (x2, y2))

    def to_dict(self):
        return {
            "kind": self.kind,
            "seed": int(self.seed),
            "extents": [int(e) for e in self.extents],
            "boxes": [[list(map(int, c)), list(map(int, e))] for c, e in self.boxes],
            "control_points": None if self.control_points is None
            else [list(map(float, p)) for p in self.control_points],
        }

    @classmethod
    def from_dict(cls, d):
        cp = d.get("control_points")
        return cls(
            kind=d["kind"],
            seed=int(d["seed"]),
            extents=tuple(d["extents"]),
            boxes=[(tuple(c), tuple(e)) for c, e in d.get("boxes", [])],
            control_points=None if cp is None else (tuple(cp[0]), tuple(cp[1])),
        )

    def validate(self, shape=None):
        if self.kind not in KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}")
        if shape is not None and tuple(shape) != tuple(self.extents):
            raise TransformError(f"spec drawn for grid {tuple(self.extents)}, volume is {tuple(shape)}")
        for corner, ext in self.boxes:
            for c, e, n in zip(corner, ext, self.extents):
                if e < 1 or c < 0 or c + e > n:
                    raise TransformError(f"box {corner}+{ext} outside grid {tuple(self.extents)}")
        if self.kind == "bezier":
            (x1, y1), (x2, y2) = self.control_points
            if not (0 <= x1 <= x2 <= 1 and 0 <= y1 <= 1 and 0 <= y2 <= 1):
                raise TransformError(f"bad bezier control points {self.control_points}")


def _extents(grid):
    ext = getattr(grid, "extents", grid)
    return tuple(int(e) for e in ext)


def _boxes(rng, extents, count, size_range):
    boxes = []
    for _ in range(count):
        ext = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in (size_range(n) for n in extents))
        corner = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(extents, ext))
        boxes.append((corner, ext))
    return boxes


def sample_transform(seed, grid, cfg=TransformConfig()):
    """Draw one spec: kind uniform over ``cfg.kinds``, parameters per kind."""
    extents = _extents(grid)
    if min(extents) < 8:
        raise TransformError(f"grid {extents} too small for transforms (need >= 8 per axis)")
    rng = np.random.default_rng(seed)
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    spec = TransformSpec(kind=kind, seed=int(seed), extents=extents)
    if kind == "inpaint":
        lo_f, hi_f = cfg.inpaint_frac

        def size(n):
            lo = max(1, int(np.ceil(lo_f * n)))
            return lo, max(lo, int(np.floor(hi_f * n)))

        spec.boxes = _boxes(rng, extents, int(rng.integers(1, cfg.max_boxes + 1)), size)
    elif kind == "shuffle":
        spec.boxes = _boxes(rng, extents, int(rng.integers(1, cfg.max_boxes + 1)),
                            lambda n: (2, max(2, n // 4)))
    else:
        pts = rng.uniform(0.0, 1.0, size=(2, 2))
        # Sorting both coordinates keeps y(x) non-decreasing, not just x(t).
        xs, ys = np.sort(pts[:, 0]), np.sort(pts[:, 1])
        spec.control_points = ((float(xs[0]), float(ys[0])), (float(xs[1]), float(ys[1])))
    return spec


def sample_transforms(seed, grid, cfg=TransformConfig()):
    """``cfg.compose`` specs drawn from consecutive child seeds."""
    if cfg.compose == 1:
        return [sample_transform(seed, grid, cfg)]
    children = np.random.SeedSequence(seed).generate_state(cfg.compose)
    return [sample_transform(int(s), grid, cfg) for s in children]


def bezier_table(control_points, n=BEZIER_POINTS):
    """(x, y) samples of the cubic curve from (0,0) to (1,1)."""
    (x1, y1), (x2, y2) = control_points
    t = np.linspace(0.0, 1.0, n)
    a, b, c, d = (1 - t) ** 3, 3 * (1 - t) ** 2 * t, 3 * (1 - t) * t ** 2, t ** 3
    return b * x1 + c * x2 + d, b * y1 + c * y2 + d


def apply_transform(volume, spec):
    """Apply ``spec`` to a [Z, Y, X] volume with intensities in [0, 1]."""
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise TransformError(f"expected a [Z, Y, X] volume, got shape {v.shape}")
    spec.validate(v.shape)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise TransformError(f"intensities must lie in [0, 1], got [{v.min()}, {v.max()}]")
    out = v.copy()
    # the sampling draw used default_rng(seed); a child stream keeps fill values independent of it
    rng = np.random.default_rng([spec.seed, 1])
    if spec.kind == "inpaint":
        for corner, ext in spec.boxes:
            sl = tuple(slice(c, c + e) for c, e in zip(corner, ext))
            out[sl] = rng.uniform(0.0, 1.0, size=ext)
    elif spec.kind == "shuffle":
        for corner, ext in spec.boxes:
            sl = tuple(slice(c, c + e) for c, e in zip(corner, ext))
            block = out[sl].ravel()
            out[sl] = block[rng.permutation(block.size)].reshape(ext)
    else:
        xs, ys = bezier_table(spec.control_points)
        out = np.clip(np.interp(v, xs, ys), 0.0, 1.0)
    return out


def apply_transforms(volume, specs):
    for spec in specs:
        volume = apply_transform(volume, spec)
    return volume
