"""Synthetic labelled phantoms sharing one anatomy.

Every phantom is the same canonical template (a body ellipsoid holding a
stack of nested ellipsoids and one tube) pushed through a random smooth
deformation and an affine jitter, with per-region intensities perturbed
per instance. Region adjacency is therefore the same for every seed while
appearance and pose vary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import geometry, io

BACKGROUND = 0.05


@dataclass(frozen=True)
class PhantomConfig:
    extent: int = 32
    regions: int = 4
    max_disp: float | None = None  # peak |u| of the smooth field; default extent / 16
    max_rotation: float = 0.2
    max_translation: float | None = None  # default extent / 10
    scale_range: tuple = (0.9, 1.1)
    max_shear: float = 0.1
    intensity_jitter: float = 0.1
    noise_sigma: float = 0.02

    def __post_init__(self):
        E, L = self.extent, self.regions
        if E < 16:
            raise ValueError(f"extent must be >= 16, got {E}")
        if L < 2:
            raise ValueError(f"regions must be >= 2, got {L}")
        # each nested layer needs a couple of voxels of wall to survive warping
        if L > 2 + max(1, E // 16):
            raise ValueError(f"at most {2 + max(1, E // 16)} regions fit a {E}^3 phantom, got {L}")
        if self.displacement > E / 8:
            raise ValueError(f"max_disp must be <= extent/8 = {E / 8}")
        if self.translation > E / 10:
            raise ValueError(f"max_translation must be <= extent/10 = {E / 10}")
        lo, hi = self.scale_range
        if not (0.9 <= lo <= hi <= 1.1):
            raise ValueError(f"scale_range must lie within [0.9, 1.1], got {self.scale_range}")
        if not (0 <= self.max_rotation <= 0.2 and 0 <= self.max_shear <= 0.1):
            raise ValueError("rotation must be within 0.2 rad and shear within 0.1")

    @property
    def displacement(self):
        return self.extent / 16 if self.max_disp is None else self.max_disp

    @property
    def translation(self):
        return self.extent / 10 if self.max_translation is None else self.max_translation

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass
class Phantom:
    volume: np.ndarray  # [Z, Y, X] in [0, 1]
    labels: np.ndarray  # [Z, Y, X] int32, 0 = background
    gt_affine: geometry.AffineParams
    gt_deform: np.ndarray  # [3, Z, Y, X] smooth field before the affine
    field: np.ndarray  # [3, Z, Y, X] full pull field template <- phantom
    intensities: np.ndarray  # [L + 1] region intensities before noise
    seed: int


def template_labels(extent, regions, coords=None):
    """Canonical label map, evaluated on the voxel grid or at given (x, y, z) coordinates."""
    E, L = extent, regions
    if coords is None:
        coords = geometry._centered_coords((E, E, E))
    x, y, z = coords
    lab = np.zeros(x.shape, dtype=np.int32)
    body = (x / (0.40 * E)) ** 2 + (y / (0.34 * E)) ** 2 + (z / (0.32 * E)) ** 2 <= 1
    lab[body] = 1
    layers = L - 2
    for j in range(layers):
        f = 1.0 - j / (layers + 1)
        sx, sy, sz = 0.20 * E * f, 0.20 * E * f, 0.18 * E * f
        inside = ((x + 0.10 * E) / sx) ** 2 + (y / sy) ** 2 + (z / sz) ** 2 <= 1
        lab[inside] = 2 + j
    r = 0.06 * E
    tube = ((x - 0.24 * E) ** 2 + z ** 2 <= r * r) & (np.abs(y) <= 0.16 * E)
    lab[tube] = L
    return lab


def smooth_field(rng, extent, max_disp):
    """Gaussian-smoothed noise scaled so the largest displacement norm is in [max_disp/2, max_disp]."""
    E = extent
    while True:
        u = np.stack([gaussian_filter(rng.standard_normal((E, E, E)), sigma=E / 8, mode="reflect")
                      for _ in range(3)])
        peak = np.sqrt((u ** 2).sum(axis=0)).max()
        u *= max_disp * rng.uniform(0.5, 1.0) / peak
        if geometry.jacobian_determinant(u).min() > 0:
            return u


def _jitter(rng, cfg):
    return geometry.AffineParams(
        rotation=tuple(rng.uniform(-cfg.max_rotation, cfg.max_rotation, 3)),
        translation=tuple(rng.uniform(-cfg.translation, cfg.translation, 3)),
        scaling=tuple(rng.uniform(*cfg.scale_range, 3)),
        shearing=tuple(rng.uniform(-cfg.max_shear, cfg.max_shear, 6)),
    )


def generate_phantom(seed, cfg=PhantomConfig()) -> Phantom:
    E, L = cfg.extent, cfg.regions
    rng = np.random.default_rng(seed)
    deform = smooth_field(rng, E, cfg.displacement)
    affine = _jitter(rng, cfg)
    base = 0.2 + 0.7 * np.arange(L + 1) / L
    inten = base + rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter, L + 1)
    inten[0] = BACKGROUND
    inten = np.clip(inten, 0.0, 1.0)

    field = geometry.compose_dvf(geometry.affine_matrix_from_params(affine), deform)
    tlab = template_labels(E, L)
    timg = inten[tlab] - BACKGROUND
    vol = geometry.warp_trilinear(timg[None], field)[0] + BACKGROUND
    vol = np.clip(vol + rng.normal(0.0, cfg.noise_sigma, vol.shape), 0.0, 1.0)
    labels = geometry.warp_nearest(tlab, field).astype(np.int32)
    return Phantom(vol, labels, affine, deform, field, inten, int(seed))


def region_adjacency(labels):
    """Set of unordered label pairs that touch across a face."""
    pairs = set()
    for axis in range(labels.ndim):
        a = np.moveaxis(labels, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        diff = lo != hi
        for p, q in zip(lo[diff], hi[diff]):
            pairs.add((int(min(p, q)), int(max(p, q))))
    return pairs


def sample_field(field, points):
    """Trilinear sample of a [3,Z,Y,X] field at (x, y, z) points, clamped at the border."""
    x, y, z = points
    return np.stack([map_coordinates(field[a], [z, y, x], order=1, mode="nearest") for a in range(3)])


def invert_map(field, target, iters=50):
    """Solve q + field(q) = target for q by fixed-point iteration."""
    q = target.copy()
    for _ in range(iters):
        q = target - sample_field(field, q)
    return q


def pair_field(field_a, field_b):
    """Ground-truth DVF u with warp(x_A, u) ~ x_B for two phantoms of one template.

    Phantom k reads the template at p + field_k(p); the DVF maps each
    B voxel to the A voxel that reads the same template point.
    """
    shape = field_b.shape[1:]
    gz, gy, gx = np.meshgrid(*(np.arange(n, dtype=float) for n in shape), indexing="ij")
    p = np.stack([gx, gy, gz])
    q = invert_map(field_a, p + field_b)
    return q - p


# -- datasets ---------------------------------------------------------------------

def split_counts(count, ratios=(0.70, 0.15, 0.15)):
    """Floor each of train/val, the remainder goes to test."""
    n_train = int(np.floor(ratios[0] * count))
    n_val = int(np.floor(ratios[1] * count))
    return n_train, n_val, count - n_train - n_val


def phantom_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_dataset(seed, count, out_dir, cfg=PhantomConfig(), ratios=(0.70, 0.15, 0.15)):
    """Write ``count`` phantoms and ``manifest.json`` into ``out_dir``; return the manifest."""
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(count, ratios)
    entries = []
    for i, s in enumerate(phantom_seeds(seed, count)):
        ph = generate_phantom(s, cfg)
        stem = f"phantom_{i:03d}"
        files = {
            "volume": f"{stem}.gvol",
            "labels": f"{stem}_labels.gvol",
            "gt_deform": f"{stem}_deform.gvol",
            "gt_field": f"{stem}_field.gvol",
        }
        io.write_volume(out / files["volume"], ph.volume)
        io.write_volume(out / files["labels"], ph.labels)
        io.write_volume(out / files["gt_deform"], ph.gt_deform)
        io.write_volume(out / files["gt_field"], ph.field)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append({
            "id": stem,
            "seed": s,
            "split": split,
            **files,
            "gt_affine": ph.gt_affine.to_dict(),
            "checksums": {k: io.sha256_file(out / v) for k, v in files.items()},
        })
    manifest = {
        "format": "gvsl-phantoms",
        "version": 1,
        "seed": int(seed),
        "count": int(count),
        "config": cfg.to_dict(),
        "ratios": list(ratios),
        "entries": entries,
    }
    io.write_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict

    @property
    def config(self):
        return PhantomConfig.from_dict(self.manifest["config"])

    def entries(self, split=None):
        return [e for e in self.manifest["entries"] if split is None or e["split"] == split]

    def _read(self, entry, key):
        return io.read_volume(self.root / entry[key]).array

    def volume(self, entry):
        return self._read(entry, "volume")

    def labels(self, entry):
        return self._read(entry, "labels")

    def field(self, entry):
        return self._read(entry, "gt_field")

    def volumes(self, split=None):
        return np.stack([self.volume(e) for e in self.entries(split)])

    def label_maps(self, split=None):
        return np.stack([self.labels(e) for e in self.entries(split)])


def load_dataset(path, verify=True) -> Dataset:
    """Open a dataset from its directory or manifest path, checking every checksum."""
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    manifest = io.read_json(mpath)
    root = mpath.parent
    if verify:
        for e in manifest["entries"]:
            for key, digest in e["checksums"].items():
                f = root / e[key]
                if not f.exists():
                    raise FileNotFoundError(f"manifest entry {e['id']}: missing {f}")
                if io.sha256_file(f) != digest:
                    raise io.IntegrityError(f"manifest entry {e['id']}: checksum mismatch for {f}")
    return Dataset(root, manifest)
