"""Joint geometric-matching + self-restoration training, and classical registration.

One training step:

1. draw an appearance transform t for every x_A and form x_A^t = t(x_A);
2. run the shared backbone on x_A^t and x_B;
3. restore x_A from the local features of x_A^t (MSE against the original);
4. predict the affine and deformable fields from both feature sets, fuse
   them, warp the original x_A and score it against x_B (NCC + smoothness);
5. backpropagate the summed objective once and take one Adam step per
   parameter namespace.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, io, losses, models, transforms
from .autodiff import Graph, NonFiniteError
from .autodiff.optim import Adam, AdamState, adam_update

METRIC_COLUMNS = ("iter", "ncc", "smooth", "mse", "total")


class TrainingError(RuntimeError):
    """Non-finite loss; carries the 1-based iteration at which it happened."""

    def __init__(self, iteration, detail):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {detail}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch: int = 2
    lr: float = 1e-4
    loss: losses.LossConfig = losses.LossConfig()
    warmup_restoration_iters: int = 0
    restoration: bool = True  # False = geometric matching only
    smooth_target: str = "fused"  # or "local": penalize the deformable map only
    seed: int = 0
    dtype: str = "float64"
    checkpoint_every: int = 0
    best_window: int = 10
    arch: models.BackboneArch = models.BackboneArch()
    transforms: transforms.TransformConfig = transforms.TransformConfig()

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ValueError("lr must be finite and >= 0")
        if self.smooth_target not in ("fused", "local"):
            raise ValueError(f"smooth_target must be 'fused' or 'local', got {self.smooth_target!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.warmup_restoration_iters < 0 or self.checkpoint_every < 0:
            raise ValueError("warmup and checkpoint cadence must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["transforms"]["kinds"] = list(self.transforms.kinds)
        d["transforms"]["inpaint_frac"] = list(self.transforms.inpaint_frac)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = losses.LossConfig(**d["loss"])
        if "arch" in d:
            d["arch"] = models.BackboneArch(**d["arch"])
        if "transforms" in d:
            t = dict(d["transforms"])
            for k in ("kinds", "inpaint_frac"):
                if k in t:
                    t[k] = tuple(t[k])
            d["transforms"] = transforms.TransformConfig(**t)
        return cls(**d)


# -- state -----------------------------------------------------------------------

@dataclass
class TrainState:
    weights: models.ModelWeights
    optimizers: dict  # namespace -> Adam
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)  # rows of METRIC_COLUMNS

    def to_checkpoint(self, cfg: TrainConfig) -> io.Checkpoint:
        m, v, t = {}, {}, {}
        for opt in self.optimizers.values():
            for name, st in opt.states.items():
                m[name], v[name], t[name] = st.m.copy(), st.v.copy(), st.t
        return io.Checkpoint(
            arch=self.weights.arch.to_dict(),
            params={k: a.copy() for k, a in self.weights.params.items()},
            adam_m=m, adam_v=v, adam_t=t, lr=cfg.lr,
            rng_state=self.rng.bit_generator.state,
            iteration=self.iteration,
            history=np.array(self.history, dtype=np.float64).reshape(-1, len(METRIC_COLUMNS)),
            config=cfg.to_dict(),
        )

    @classmethod
    def from_checkpoint(cls, ck: io.Checkpoint, cfg: TrainConfig):
        arch = models.BackboneArch(**ck.arch)
        if arch != cfg.arch:
            raise io.ArchMismatchError("arch", f"checkpoint arch {ck.arch} differs from {cfg.arch.to_dict()}")
        io.check_shapes(ck.params, {k: s for k, (_, s) in models.param_specs(arch).items()})
        weights = models.ModelWeights(arch, {k: a.copy() for k, a in ck.params.items()})
        opts = _optimizers(cfg.lr)
        for name in ck.adam_t:
            opts[models.namespace_of(name)].states[name] = AdamState(
                ck.adam_m[name].copy(), ck.adam_v[name].copy(), int(ck.adam_t[name]))
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        history = [tuple(r) for r in np.asarray(ck.history).tolist()]
        return cls(weights, opts, rng, int(ck.iteration), history)


def _optimizers(lr):
    return {ns: Adam(lr) for ns in models.NAMESPACES}


def init_state(cfg: TrainConfig) -> TrainState:
    weights = models.init_weights(cfg.seed, cfg.arch)
    return TrainState(weights, _optimizers(cfg.lr), np.random.default_rng([cfg.seed, 1]))


# -- step graph ----------------------------------------------------------------------

class StepGraph:
    """The training graph for one batch shape, built once and re-evaluated every step."""

    def __init__(self, cfg: TrainConfig, extents):
        arch = cfg.arch
        arch.check_extent(extents)
        losses.check_window(extents, cfg.loss)
        self.extents = tuple(extents)
        g = self.graph = Graph(dtype=np.dtype(cfg.dtype))
        P = models.Params(g)
        x_a, x_at, x_b = g.input("x_a"), g.input("x_at"), g.input("x_b")
        fg_a, fl_a = models.backbone_forward(P, x_at, arch)
        fg_b, fl_b = models.backbone_forward(P, x_b, arch)
        restored = models.restoration_head_forward(P, fl_a, arch)
        match = models.zmatch_forward(P, fg_a, fl_a, fg_b, fl_b, self.extents, arch)
        x_ab = geometry.warp_node(x_a, match.dvf)
        ncc = losses.local_ncc_loss(x_ab, x_b, cfg.loss)
        smooth = losses.smoothness_loss(match.dvf if cfg.smooth_target == "fused" else match.deform)
        mse = losses.restoration_mse(restored, x_a)
        gvsl = losses.gvsl_total(ncc, smooth, cfg.loss)
        self.objectives = {"joint": gvsl + mse, "gvsl": gvsl, "mse": mse}
        for name, node in (("ncc", ncc), ("smooth", smooth), ("mse", mse), ("gvsl", gvsl),
                           ("dvf", match.dvf), ("affine", match.affine_params), ("x_ab", x_ab),
                           ("restored", restored)):
            g.output(name, node)
        for name, node in self.objectives.items():
            g.output(f"objective/{name}", node)


def phase(cfg: TrainConfig, iteration):
    """Which objective a 1-based iteration optimizes and which namespaces it updates."""
    if not cfg.restoration:
        return "gvsl", ("backbone", "zmatch.affine", "zmatch.deform")
    if iteration <= cfg.warmup_restoration_iters:
        return "mse", ("backbone", "restore")
    return "joint", models.NAMESPACES


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 4 else x


def gvsl_train_step(state: TrainState, batch, cfg: TrainConfig, step_graph: StepGraph | None = None):
    """One optimization step on ``batch = {"x_a": [N,Z,Y,X], "x_b": [N,Z,Y,X]}``.

    Returns ``(state, metrics)``; ``state`` is updated in place.
    """
    x_a, x_b = _as_batch(batch["x_a"]), _as_batch(batch["x_b"])
    if x_a.shape != x_b.shape:
        raise ValueError(f"x_a {x_a.shape} and x_b {x_b.shape} differ")
    sg = step_graph or StepGraph(cfg, x_a.shape[2:])
    if sg.extents != x_a.shape[2:]:
        raise ValueError(f"batch grid {x_a.shape[2:]} differs from graph grid {sg.extents}")
    k = state.iteration + 1
    x_at = np.empty_like(x_a)
    for n in range(x_a.shape[0]):
        seed = int(state.rng.integers(2 ** 31))
        specs = transforms.sample_transforms(seed, x_a.shape[2:], cfg.transforms)
        x_at[n, 0] = transforms.apply_transforms(x_a[n, 0], specs)
    objective, namespaces = phase(cfg, k)
    bindings = {"x_a": x_a, "x_at": x_at, "x_b": x_b, **state.weights.params}
    g = sg.graph
    try:
        out = g.evaluate(bindings)
        grads = g.backpropagate(sg.objectives[objective])
    except NonFiniteError as exc:
        raise TrainingError(k, str(exc)) from None
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise TrainingError(k, f"non-finite gradient for {name}")
    params = state.weights.params
    for ns in namespaces:
        names = sorted(n for n in params if n.startswith(ns + "/"))
        opt = state.optimizers[ns]
        for name in names:
            if name not in opt.states:
                opt.states[name] = AdamState.zeros_like(params[name])
            params[name] = adam_update(params[name], grads[name].astype(np.float64), opt.states[name], opt.lr)
    metrics = {
        "iter": k,
        "ncc": float(out["ncc"]),
        "smooth": float(out["smooth"]),
        "mse": float(out["mse"]),
        "total": float(out[f"objective/{objective}"]),
    }
    state.iteration = k
    state.history.append(tuple(float(metrics[c]) for c in METRIC_COLUMNS))
    return state, metrics


def sample_pairs(rng, count, batch):
    """Index arrays (A, B) with A[i] != B[i]; all 2*batch distinct when the pool allows."""
    if count < 2:
        raise ValueError("need at least 2 volumes to form pairs")
    if count >= 2 * batch:
        idx = rng.choice(count, size=2 * batch, replace=False)
        return idx[:batch], idx[batch:]
    pairs = np.array([rng.choice(count, size=2, replace=False) for _ in range(batch)])
    return pairs[:, 0], pairs[:, 1]


# -- outer loop --------------------------------------------------------------------------

@dataclass
class PretrainResult:
    out_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path
    metrics_csv: Path
    curves_png: Path | None
    history: list
    seconds: float


def write_metrics(path, history):
    """One row per iteration; floats use repr so the log round-trips exactly."""
    lines = [",".join(METRIC_COLUMNS)]
    for row in history:
        lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
    io.atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}


def pretrain(data, cfg: TrainConfig, out_dir, resume=None, plot=True, progress=None):
    """Run Alg.-1 style pretraining on the train split of a phantom dataset.

    ``data`` is a dataset directory, manifest path or loaded :class:`~gvsl.phantom.Dataset`.
    ``resume`` names a checkpoint written by an earlier run of the same config.
    """
    from . import phantom

    ds = data if isinstance(data, phantom.Dataset) else phantom.load_dataset(data)
    vols = ds.volumes("train")
    if len(vols) < 2:
        raise ValueError(f"need >= 2 training volumes, manifest has {len(vols)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = TrainState.from_checkpoint(io.load_checkpoint(resume), cfg)
    else:
        state = init_state(cfg)
    sg = StepGraph(cfg, vols.shape[1:])
    best = None
    best_score = np.inf
    t0 = time.perf_counter()
    while state.iteration < cfg.iterations:
        ia, ib = sample_pairs(state.rng, len(vols), cfg.batch)
        gvsl_train_step(state, {"x_a": vols[ia], "x_b": vols[ib]}, cfg, sg)
        k = state.iteration
        if len(state.history) >= cfg.best_window:
            score = float(np.mean([r[4] for r in state.history[-cfg.best_window:]]))
            if score < best_score:
                best_score, best = score, state.to_checkpoint(cfg)
        if cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
            io.save_checkpoint(out / f"checkpoint_{k:06d}.gvck", state.to_checkpoint(cfg))
        if progress is not None:
            progress(state.history[-1])
    seconds = time.perf_counter() - t0
    final = state.to_checkpoint(cfg)
    paths = {"final": out / "checkpoint_final.gvck", "best": out / "checkpoint_best.gvck"}
    io.save_checkpoint(paths["final"], final)
    io.save_checkpoint(paths["best"], best if best is not None else final)
    metrics_csv = out / "metrics.csv"
    write_metrics(metrics_csv, state.history)
    curves = None
    if plot:
        from . import report
        curves = report.plot_training_curves({"run": metrics_csv}, out / "curves.png")
    return PretrainResult(out, paths["final"], paths["best"], metrics_csv, curves, list(state.history), seconds)


def load_weights(path, arch=None) -> models.ModelWeights:
    """Model weights from a checkpoint, checked against ``arch`` (default: the stored arch)."""
    ck = io.load_checkpoint(path)
    stored = models.BackboneArch(**ck.arch)
    arch = stored if arch is None else arch
    io.check_shapes(ck.params, {k: s for k, (_, s) in models.param_specs(arch).items()})
    return models.ModelWeights(arch, ck.params)


def predict_registration(weights: models.ModelWeights, x_a, x_b, dtype="float64"):
    """Network registration of one pair: returns (AffineParams, dvf [3,Z,Y,X], warped x_A)."""
    extents = np.shape(x_a)[-3:]
    arch = weights.arch
    arch.check_extent(extents)
    g = Graph(dtype=np.dtype(dtype))
    P = models.Params(g)
    a, b = g.input("x_a"), g.input("x_b")
    fg_a, fl_a = models.backbone_forward(P, a, arch)
    fg_b, fl_b = models.backbone_forward(P, b, arch)
    m = models.zmatch_forward(P, fg_a, fl_a, fg_b, fl_b, extents, arch)
    g.output("affine", m.affine_params)
    g.output("dvf", m.dvf)
    g.output("warped", geometry.warp_node(a, m.dvf))
    used = {n: weights.params[n] for n in g.leaves("param")}
    out = g.evaluate({"x_a": np.reshape(x_a, (1, 1) + extents), "x_b": np.reshape(x_b, (1, 1) + extents), **used})
    return geometry.AffineParams.from_vector(out["affine"][0]), out["dvf"][0], out["warped"][0, 0]


# -- classical registration ------------------------------------------------------------------

@dataclass(frozen=True)
class ClassicalConfig:
    affine_iters: int = 150
    deform_iters: int = 60
    lr_translation: float = 0.1
    lr_linear: float = 0.005  # rotation, scaling, shearing
    lr_deform: float = 0.05
    loss: losses.LossConfig = losses.LossConfig()

    def __post_init__(self):
        if self.affine_iters < 0 or self.deform_iters < 0:
            raise ValueError("iteration counts must be >= 0")


@dataclass
class ClassicalResult:
    affine: geometry.AffineParams
    dvf: np.ndarray  # fused field [3, Z, Y, X]
    deform: np.ndarray  # deformable part [3, Z, Y, X]
    affine_trace: np.ndarray  # NCC per affine iteration
    deform_trace: np.ndarray  # NCC + smoothness per deformable iteration
    initial_ncc: float
    final_ncc: float


def _identity_vector():
    return geometry.AffineParams().to_vector()[None]


def classical_register(x_a, x_b, cfg=ClassicalConfig()):
    """Network-free registration: Adam on the 15 affine values, then on a free DVF.

    Each stage returns its best iterate, so the final NCC never exceeds the
    NCC of the unregistered pair.
    """
    a = np.asarray(x_a, dtype=np.float64)
    b = np.asarray(x_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"expected two equal [Z,Y,X] volumes, got {a.shape} and {b.shape}")
    ext = a.shape
    losses.check_window(ext, cfg.loss)
    a5, b5 = a[None, None], b[None, None]

    g = Graph()
    xa, xb = g.input("x_a"), g.input("x_b")
    theta = g.param("affine")
    aff = geometry.affine_field_node(geometry.affine_matrix_node(theta), ext)
    ncc = losses.local_ncc_loss(geometry.warp_node(xa, aff), xb, cfg.loss)
    g.output("ncc", ncc)
    lr = np.full(15, cfg.lr_linear)
    lr[3:6] = cfg.lr_translation
    v = _identity_vector()
    st = AdamState.zeros_like(v)
    trace = []
    best_v, best = v.copy(), np.inf
    for it in range(cfg.affine_iters + 1):
        try:
            val = float(g.evaluate({"x_a": a5, "x_b": b5, "affine": v})["ncc"])
        except NonFiniteError as exc:
            raise TrainingError(it + 1, str(exc)) from None
        trace.append(val)
        if val < best:
            best, best_v = val, v.copy()
        if it == cfg.affine_iters:
            break
        grad = g.backpropagate(ncc)["affine"]
        v = adam_update(v, grad, st, lr)
        v[0, 6:9] = np.maximum(v[0, 6:9], 1e-3)
    initial = trace[0]
    affine = geometry.AffineParams.from_vector(best_v[0])
    aff_field = geometry.affine_to_dvf(geometry.affine_matrix_from_params(affine), ext)

    g2 = Graph()
    xa2, xb2, af = g2.input("x_a"), g2.input("x_b"), g2.input("aff")
    d = g2.param("deform")
    fused = geometry.compose_dvf_node(af, d)
    ncc2 = losses.local_ncc_loss(geometry.warp_node(xa2, fused), xb2, cfg.loss)
    total = losses.gvsl_total(ncc2, losses.smoothness_loss(fused), cfg.loss)
    g2.output("ncc", ncc2)
    g2.output("total", total)
    u = np.zeros((1, 3) + ext)
    st2 = AdamState.zeros_like(u)
    bind = {"x_a": a5, "x_b": b5, "aff": aff_field[None]}
    dtrace = []
    best_u, best_total, best_ncc = u.copy(), np.inf, best
    for it in range(cfg.deform_iters + 1):
        try:
            o = g2.evaluate({**bind, "deform": u})
        except NonFiniteError as exc:
            raise TrainingError(cfg.affine_iters + it + 1, str(exc)) from None
        tot, nc = float(o["total"]), float(o["ncc"])
        dtrace.append(tot)
        if tot < best_total and nc <= best:
            best_total, best_u, best_ncc = tot, u.copy(), nc
        if it == cfg.deform_iters:
            break
        u = adam_update(u, g2.backpropagate(total)["deform"], st2, cfg.lr_deform)
    dvf = geometry.compose_dvf(geometry.affine_matrix_from_params(affine), best_u[0])
    return ClassicalResult(affine, dvf, best_u[0], np.array(trace), np.array(dtrace), initial, best_ncc)
