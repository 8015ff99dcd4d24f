"""``gvsl`` command line.

Every command accepts ``--config file.json`` whose keys are the long flag
names with dashes replaced by underscores; flags given on the command line
win. The resolved settings are written as ``resolved_config.json`` next to
the command's outputs. Reports are printed as ``key=value`` lines.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure, 5 compatibility.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


def _emit(pairs, out=None):
    out = out or sys.stdout
    for k, v in pairs.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple, dict)):
            v = json.dumps(v)
        print(f"{k}={v}", file=out)


def _write_resolved(out_dir, command, cfg):
    from . import io

    if out_dir is None:
        return
    io.write_json(Path(out_dir) / "resolved_config.json", {"command": command, **cfg})


# -- commands ----------------------------------------------------------------------

def cmd_phantom(cfg):
    from . import phantom

    try:
        pcfg = phantom.PhantomConfig(extent=cfg["extent"], regions=cfg["regions"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg["count"] < 2:
        raise UsageError("--count must be >= 2")
    out = Path(cfg["out"])
    man = phantom.generate_dataset(cfg["seed"], cfg["count"], out, pcfg)
    _write_resolved(out, "phantom", cfg)
    splits = [e["split"] for e in man["entries"]]
    _emit({"manifest": str(out / "manifest.json"), "count": len(splits),
           "train": splits.count("train"), "val": splits.count("val"), "test": splits.count("test")})


def _train_config(cfg):
    from . import losses, trainer

    try:
        return trainer.TrainConfig(
            iterations=cfg["iters"], batch=cfg["batch"], lr=cfg["lr"], seed=cfg["seed"],
            warmup_restoration_iters=cfg["warmup"], restoration=not cfg["no_restoration"],
            smooth_target=cfg["smooth_target"], dtype=cfg["dtype"], checkpoint_every=cfg["checkpoint_every"],
            loss=losses.LossConfig(window=cfg["window"], smooth_weight=cfg["smooth_weight"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_pretrain(cfg):
    from . import trainer

    tcfg = _train_config(cfg)
    out = Path(cfg["out"])
    _write_resolved(out, "pretrain", cfg)

    def progress(row):
        k = int(row[0])
        if cfg["log_every"] and k % cfg["log_every"] == 0:
            print(f"iter={k} ncc={row[1]:.5f} smooth={row[2]:.5f} mse={row[3]:.5f} total={row[4]:.5f}",
                  file=sys.stderr, flush=True)

    res = trainer.pretrain(cfg["data"], tcfg, out, resume=cfg["resume"], plot=True, progress=progress)
    last = res.history[-1]
    _emit({"checkpoint": str(res.final_checkpoint), "best_checkpoint": str(res.best_checkpoint),
           "metrics": str(res.metrics_csv), "curves": str(res.curves_png), "iterations": int(last[0]),
           "ncc": last[1], "smooth": last[2], "mse": last[3], "total": last[4], "seconds": round(res.seconds, 2)})


def cmd_register(cfg):
    from . import evalkit, geometry, io, report, trainer

    fixed = io.read_volume(cfg["fixed"]).array
    moving = io.read_volume(cfg["moving"]).array
    if fixed.shape != moving.shape:
        raise UsageError(f"fixed {fixed.shape} and moving {moving.shape} grids differ")
    out = Path(cfg["out"])
    if cfg["mode"] == "classical":
        ccfg = trainer.ClassicalConfig(affine_iters=cfg["affine_iters"], deform_iters=cfg["deform_iters"])
        res = trainer.classical_register(moving, fixed, ccfg)
        affine, dvf = res.affine, res.dvf
        extra = {"initial_ncc": res.initial_ncc, "final_ncc": res.final_ncc}
    else:
        if cfg["checkpoint"] is None:
            raise UsageError("--checkpoint is required in network mode")
        weights = trainer.load_weights(cfg["checkpoint"])
        affine, dvf, _ = trainer.predict_registration(weights, moving, fixed)
        extra = {}
    warped = geometry.warp_trilinear(moving[None], dvf)[0]
    io.write_volume(out / "dvf.gvol", dvf)
    io.write_volume(out / "warped.gvol", warped)
    rep = {"mode": cfg["mode"], **{k: float(v) for k, v in affine.to_dict().items()}, **extra,
           "mean_abs_displacement": float(np.abs(dvf).mean())}
    if cfg["fixed_labels"] and cfg["moving_labels"]:
        la = io.read_volume(cfg["moving_labels"]).array
        lb = io.read_volume(cfg["fixed_labels"]).array
        gt = io.read_volume(cfg["gt"]).data if cfg["gt"] else np.zeros_like(dvf)
        classes = int(max(la.max(), lb.max())) + 1
        rep.update(evalkit.registration_eval(dvf, la, lb, gt, classes).to_dict())
    report.plot_registration(fixed, moving, warped, dvf, out / "registration.png")
    io.write_json(out / "report.json", rep)
    _write_resolved(out, "register", cfg)
    _emit(rep)


def cmd_augment(cfg):
    from . import io, transforms

    vol = io.read_volume(cfg["in"])
    x = vol.array
    if cfg["replay"]:
        specs = [transforms.TransformSpec.from_dict(d) for d in io.read_json(cfg["replay"])["specs"]]
    else:
        if cfg["kind"] not in transforms.KINDS:
            raise UsageError(f"unknown kind {cfg['kind']!r}; choose from {', '.join(transforms.KINDS)}")
        tcfg = transforms.TransformConfig(kinds=(cfg["kind"],))
        specs = [transforms.sample_transform(cfg["seed"], x.shape, tcfg)]
    try:
        y = transforms.apply_transforms(x, specs)
    except transforms.TransformError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    io.write_volume(out / "augmented.gvol", y, vol.spacing)
    io.write_json(out / "spec.json", {"specs": [s.to_dict() for s in specs]})
    _write_resolved(out, "augment", cfg)
    _emit({"volume": str(out / "augmented.gvol"), "spec": str(out / "spec.json"),
           "kind": ",".join(s.kind for s in specs), "changed_voxels": int((y != x).sum())})


def _weights_or_none(path):
    from . import trainer

    if path is None or str(path).lower() == "none":
        return None
    return trainer.load_weights(path)


def cmd_probe(cfg):
    from . import evalkit, io, phantom

    ds = phantom.load_dataset(cfg["data"])
    weights = _weights_or_none(cfg["checkpoint"])
    pcfg = evalkit.ProbeConfig(iterations=cfg["iters"], lr=cfg["lr"], seed=cfg["seed"])
    res = evalkit.linear_probe(weights, ds, pcfg)
    rep = {"checkpoint": str(cfg["checkpoint"]), "mean_dice": res.mean, "degenerate": res.dice.degenerate,
           **{f"dice_class_{c}": float(d) for c, d in enumerate(res.dice.per_class) if c > 0},
           "final_probe_loss": float(res.losses[-1])}
    if cfg["out"]:
        io.write_json(Path(cfg["out"]) / "probe.json", rep)
        _write_resolved(cfg["out"], "probe", cfg)
    _emit(rep)


def cmd_eval(cfg):
    from . import evalkit, io, models, phantom, trainer

    ds = phantom.load_dataset(cfg["data"])
    weights = _weights_or_none(cfg["checkpoint"])
    if weights is None:
        weights = models.init_weights(cfg["seed"])
    entries = ds.entries("val") + ds.entries("test")
    if len(entries) < 2:
        raise UsageError("eval needs at least 2 val/test phantoms")
    vols = np.stack([ds.volume(e) for e in entries])
    labs = np.stack([ds.labels(e) for e in entries])
    con = evalkit.feature_contrast(weights, vols, labs, cfg["samples"], cfg["seed"])
    classes = ds.config.regions + 1
    regs = []
    for ea, eb in zip(entries[:-1], entries[1:]):
        _, dvf, _ = trainer.predict_registration(weights, ds.volume(ea), ds.volume(eb))
        gt = phantom.pair_field(ds.field(ea), ds.field(eb))
        regs.append(evalkit.registration_eval(dvf, ds.labels(ea), ds.labels(eb), gt, classes))
    rep = {"checkpoint": str(cfg["checkpoint"]), "clustering_ratio": con.ratio,
           "same_label_cos": con.same_mean, "different_label_cos": con.diff_mean,
           "registration_dice": float(np.mean([r.dice.mean for r in regs])),
           "endpoint_error": float(np.mean([r.endpoint_error for r in regs])),
           "negative_jacobian_pct": float(np.mean([r.negative_jacobian_pct for r in regs]))}
    if cfg["out"]:
        io.write_json(Path(cfg["out"]) / "eval.json", rep)
        _write_resolved(cfg["out"], "eval", cfg)
    _emit(rep)


def cmd_curves(cfg):
    from . import report

    runs = {}
    for item in cfg["log"]:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or item, item
        if not Path(path).exists():
            raise FileNotFoundError(path)
        runs[label] = path
    out = Path(cfg["out"])
    report.plot_training_curves(runs, out, smooth=cfg["smooth"])
    _write_resolved(out.parent, "curves", cfg)
    _emit({"figure": str(out), "runs": len(runs)})


# -- parser --------------------------------------------------------------------------

DEFAULTS = {
    "phantom": {"seed": 0, "count": 10, "extent": 32, "regions": 4, "out": None},
    "pretrain": {"data": None, "iters": 500, "batch": 2, "lr": 1e-4, "seed": 0, "warmup": 0,
                 "no_restoration": False, "smooth_target": "fused", "dtype": "float64", "window": 5,
                 "smooth_weight": 1.0, "checkpoint_every": 0, "resume": None, "log_every": 25, "out": None},
    "register": {"fixed": None, "moving": None, "mode": "classical", "checkpoint": None, "out": None,
                 "fixed_labels": None, "moving_labels": None, "gt": None, "affine_iters": 150, "deform_iters": 60},
    "augment": {"in": None, "kind": None, "seed": 0, "replay": None, "out": None},
    "probe": {"checkpoint": None, "data": None, "iters": 300, "lr": 1e-4, "seed": 0, "out": None},
    "eval": {"checkpoint": None, "data": None, "seed": 0, "samples": 64, "out": None},
    "curves": {"log": None, "out": None, "smooth": 10},
}
REQUIRED = {
    "phantom": ("out",), "pretrain": ("data", "out"), "register": ("fixed", "moving", "out"),
    "augment": ("in", "out"), "probe": ("data",), "eval": ("data",), "curves": ("log", "out"),
}
COMMANDS = {"phantom": cmd_phantom, "pretrain": cmd_pretrain, "register": cmd_register, "augment": cmd_augment,
            "probe": cmd_probe, "eval": cmd_eval, "curves": cmd_curves}


def build_parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="gvsl", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        sp = sub.add_parser(name, help=help, argument_default=S)
        sp.add_argument("--config", help="JSON file of settings; flags override it")
        return sp

    sp = cmd("phantom", "generate a synthetic phantom dataset")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--extent", type=int)
    sp.add_argument("--regions", type=int)
    sp.add_argument("--out")

    sp = cmd("pretrain", "joint geometric-matching + restoration pretraining")
    sp.add_argument("--data")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--warmup", type=int, help="restoration-only iterations before joint training")
    sp.add_argument("--no-restoration", action="store_true", help="geometric matching only")
    sp.add_argument("--smooth-target", choices=("fused", "local"))
    sp.add_argument("--dtype", choices=("float64", "float32"))
    sp.add_argument("--window", type=int)
    sp.add_argument("--smooth-weight", type=float)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--log-every", type=int)
    sp.add_argument("--out")

    sp = cmd("register", "register a moving volume onto a fixed one")
    sp.add_argument("--fixed")
    sp.add_argument("--moving")
    sp.add_argument("--mode", choices=("network", "classical"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--fixed-labels")
    sp.add_argument("--moving-labels")
    sp.add_argument("--gt", help="ground-truth DVF volume for endpoint error")
    sp.add_argument("--affine-iters", type=int)
    sp.add_argument("--deform-iters", type=int)
    sp.add_argument("--out")

    sp = cmd("augment", "apply one appearance transform")
    sp.add_argument("--in")
    sp.add_argument("--kind")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--replay", help="spec.json from an earlier run")
    sp.add_argument("--out")

    sp = cmd("probe", "linear probe on frozen features")
    sp.add_argument("--checkpoint", help="checkpoint path, or 'none' for a random backbone")
    sp.add_argument("--data")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = cmd("eval", "clustering contrast and network registration accuracy")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--out")

    sp = cmd("curves", "overlay training curves from metrics logs")
    sp.add_argument("--log", nargs="+", help="metrics.csv paths, optionally label=path")
    sp.add_argument("--smooth", type=int)
    sp.add_argument("--out", help="output PNG")
    return p


def resolve(args):
    """Defaults, then config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if getattr(args, "config", None):
        from . import io

        file_cfg = io.read_json(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    cfg.update(given)
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def main(argv=None):
    from . import io, trainer
    from .autodiff import NonFiniteError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except io.ArchMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (io.FormatError, io.IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (trainer.TrainingError, NonFiniteError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
