"""Downstream metrics: Dice, linear probing, registration accuracy, feature clustering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion

from . import geometry, models
from .autodiff import Graph, ops
from .autodiff.optim import AdamState, adam_update


@dataclass
class DiceResult:
    per_class: np.ndarray  # [classes], background included
    mean: float  # foreground mean
    degenerate: bool = False  # truth has no foreground at all

    def to_dict(self):
        return {"mean_dice": self.mean, "per_class": self.per_class.tolist(), "degenerate": self.degenerate}


def dice(pred, truth, classes):
    """Per-class Dice; a class absent from both grids scores 1.

    The foreground mean covers classes 1..classes-1. When ``truth`` holds no
    foreground voxel the mean is reported as 0 and flagged degenerate, since
    the all-empty convention would otherwise reward predicting nothing.
    """
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    for name, a in (("prediction", p), ("truth", t)):
        if a.size and (a.min() < 0 or a.max() >= classes):
            raise ValueError(f"{name} labels outside [0, {classes})")
    cp = np.bincount(p.ravel(), minlength=classes)
    ct = np.bincount(t.ravel(), minlength=classes)
    both = np.bincount(p.ravel()[p.ravel() == t.ravel()], minlength=classes)
    denom = cp + ct
    per = np.where(denom > 0, 2.0 * both / np.maximum(denom, 1), 1.0)
    if ct[1:].sum() == 0:
        return DiceResult(per, 0.0, True)
    return DiceResult(per, float(per[1:].mean()))


# -- linear probe ------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    iterations: int = 300
    lr: float = 1e-4
    seed: int = 0
    classes: int | None = None  # default: regions + 1 from the dataset

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("probe iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("probe lr must be positive")


@dataclass
class ProbeResult:
    dice: DiceResult
    losses: np.ndarray
    weight_hash: str

    @property
    def mean(self):
        return self.dice.mean


def _onehot(labels, classes):
    return np.moveaxis(np.eye(classes)[labels], -1, 1)


def weights_hash(weights: models.ModelWeights):
    import hashlib

    h = hashlib.sha256()
    for k in sorted(weights.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(weights.params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def linear_probe(weights, dataset, cfg=ProbeConfig(), train_split="train", test_split="test"):
    """Train a 1x1x1 conv + softmax on frozen local features; Dice on the test split.

    ``weights`` may be ``None`` for a randomly initialised backbone (seeded by
    ``cfg.seed``), which gives the no-pretraining baseline.
    """
    if weights is None:
        weights = models.init_weights(cfg.seed)
    before = weights_hash(weights)
    classes = cfg.classes or dataset.config.regions + 1
    f_train = models.local_features(weights, dataset.volumes(train_split))
    f_test = models.local_features(weights, dataset.volumes(test_split))
    y_train = dataset.label_maps(train_split)
    y_test = dataset.label_maps(test_split)
    C = f_train.shape[1]

    g = Graph()
    f, y = g.input("f"), g.input("y")
    w, b = g.param("w"), g.param("b")
    logits = ops.conv3d(f, w, b)
    loss = ops.softmax_cross_entropy(logits, y)
    g.output("logits", logits)
    g.output("loss", loss)
    rng = np.random.default_rng([cfg.seed, 2])
    params = {"w": rng.normal(0.0, 0.01, (classes, C, 1, 1, 1)), "b": np.zeros(classes)}
    states = {k: AdamState.zeros_like(v) for k, v in params.items()}
    onehot = _onehot(y_train, classes)
    trace = []
    for _ in range(cfg.iterations):
        trace.append(float(g.evaluate({"f": f_train, "y": onehot, **params})["loss"]))
        grads = g.backpropagate(loss)
        for k in params:
            params[k] = adam_update(params[k], grads[k], states[k], cfg.lr)
    out = g.evaluate({"f": f_test, "y": _onehot(y_test, classes), **params})
    pred = out["logits"].argmax(axis=1)
    after = weights_hash(weights)
    if after != before:
        raise AssertionError("probe modified backbone weights")
    return ProbeResult(dice(pred, y_test, classes), np.array(trace), after)


# -- registration accuracy -----------------------------------------------------------------

@dataclass
class RegistrationReport:
    dice: DiceResult
    endpoint_error: float
    negative_jacobian_pct: float

    def to_dict(self):
        return {"warped_label_dice": self.dice.mean, "per_class": self.dice.per_class.tolist(),
                "endpoint_error": self.endpoint_error, "negative_jacobian_pct": self.negative_jacobian_pct}


def registration_eval(pred, labels_a, labels_b, gt, classes):
    """Score a predicted DVF [3,Z,Y,X] on the B grid against the ground-truth DVF.

    Endpoint error averages |pred - gt| over B's foreground voxels.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[1:] != np.shape(labels_b) or np.shape(labels_a) != np.shape(labels_b):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, labels {np.shape(labels_a)}/{np.shape(labels_b)}")
    warped = geometry.warp_nearest(labels_a, pred)
    fg = np.asarray(labels_b) > 0
    err = np.sqrt(((pred - gt) ** 2).sum(axis=0))
    epe = float(err[fg].mean()) if fg.any() else float(err.mean())
    jac = geometry.jacobian_determinant(pred)
    return RegistrationReport(dice(warped, labels_b, classes), epe, float(100.0 * (jac <= 0).mean()))


# -- clustering contrast ---------------------------------------------------------------------

@dataclass
class ContrastResult:
    ratio: float  # inf when the different-label mean is <= 0
    same_mean: float
    diff_mean: float
    skipped: list = field(default_factory=list)

    def to_dict(self):
        return {"ratio": self.ratio, "same_label_mean": self.same_mean,
                "different_label_mean": self.diff_mean, "skipped_classes": self.skipped}


def _unit(v):
    n = np.sqrt((v * v).sum(axis=1, keepdims=True))
    return v / np.maximum(n, 1e-12)


def clustering_contrast(features, labels, samples_per_class=64, seed=0):
    """Same-label over different-label mean cosine similarity across images.

    ``features`` is a list of [C,Z,Y,X] maps and ``labels`` the matching
    label grids. Vectors are drawn from label-interior voxels (one-voxel
    erosion) of the foreground classes; only pairs from different images
    are compared.
    """
    if len(features) < 2:
        raise ValueError("need at least 2 images")
    rng = np.random.default_rng(seed)
    classes = sorted(set(int(c) for lab in labels for c in np.unique(lab)) - {0})
    picked = {}  # (image, class) -> unit vectors [s, C]
    skipped = []
    for c in classes:
        per_image = []
        for i, (f, lab) in enumerate(zip(features, labels)):
            idx = np.flatnonzero(binary_erosion(np.asarray(lab) == c))
            if idx.size < 2:
                break
            take = rng.choice(idx, size=min(samples_per_class, idx.size), replace=False)
            per_image.append(_unit(f.reshape(f.shape[0], -1)[:, np.sort(take)].T))
        if len(per_image) < len(features):
            skipped.append(c)
            continue
        for i, v in enumerate(per_image):
            picked[(i, c)] = v
    kept = [c for c in classes if c not in skipped]
    same, diff = [], []
    n = len(features)
    for i in range(n):
        for j in range(i + 1, n):
            for a in kept:
                for b in kept:
                    s = (picked[(i, a)] @ picked[(j, b)].T).mean()
                    (same if a == b else diff).append(s)
    same_m = float(np.mean(same)) if same else float("nan")
    diff_m = float(np.mean(diff)) if diff else float("nan")
    ratio = float("inf") if not diff or diff_m <= 0 else same_m / diff_m
    return ContrastResult(ratio, same_m, diff_m, skipped)


def feature_contrast(weights, volumes, labels, samples_per_class=64, seed=0):
    feats = models.local_features(weights, volumes)
    return clustering_contrast(list(feats), list(labels), samples_per_class, seed)
