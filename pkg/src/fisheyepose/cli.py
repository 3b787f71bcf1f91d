"""Command-line pipeline: marker generation, synthesis, training, evaluation.

Every subcommand resolves its settings as CLI flag > config-file value >
built-in default, then records the resolved values next to its outputs so any
run can be reproduced from the artifacts alone.  Defaults chain, so

    fisheyepose gen-markers
    fisheyepose synth
    fisheyepose train
    fisheyepose eval

runs a complete desk-scale experiment with zero configuration.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .network import Model, ModelConfig, gradient_suite
from .synthesis import (
    CanvasSpec,
    ManifestError,
    MarkerSpec,
    generate_marker_dataset,
    load_dataset,
    load_source_dataset,
    save_dataset,
    save_source_dataset,
    synthesize_dataset,
    warp_canvas,
)
from .training import (
    LossWeights,
    NonFiniteLossError,
    TrainConfig,
    run_training,
    split_dataset,
)
from . import evaluation as ev

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MISSING_INPUT = 2
EXIT_BAD_MANIFEST = 3
EXIT_NON_FINITE_LOSS = 4


# config resolution -----------------------------------------------------------

DEFAULTS = {
    "gen-markers": {
        "out": "markers",
        "seed": 0,
        "count": 500,
        "size": 96,
        "pitch_max": 60.0,
        "yaw_max": 60.0,
        "roll_max": 45.0,
    },
    "synth": {
        "source": "markers",
        "out": "dataset",
        "seed": 0,
        "scale": 5.0,
        "rho_max": 0.8,
        "crop_margin": 1.2,
        "crop_size": 224,
        "max_retries": 20,
        "limit": 0,
    },
    "train": {
        "data": "dataset",
        "out": "run",
        "seed": 0,
        "epochs": 25,
        "batch_size": 32,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.9,
        "lr_decay_epochs": "10,20",
        "lr_decay": 0.5,
        "alpha_rho": 100.0,
        "lambda1": 10.0,
        "lambda2": 0.001,
        "no_location": False,
        "input_size": 224,
        "stages": "",
        "limit": 0,
    },
    "eval": {
        "data": "dataset",
        "checkpoint": "run/checkpoint.ckpt",
        "model_config": "",
        "out": "run/eval",
        "batch_size": 32,
        "rho_bins": 8,
        "limit": 0,
    },
    "ablate": {
        "data": "dataset",
        "out": "ablation",
        "seed": 0,
        "seeds": "0,1,2",
        "variants": "pair",
        "split": 0.7,
        "epochs": 25,
        "batch_size": 32,
        "lr": 1e-4,
        "lambda1": 10.0,
        "lambda2": 0.001,
        "input_size": 224,
        "stages": "",
        "limit": 0,
    },
    "sweep": {
        "data": "dataset",
        "out": "sweep",
        "seed": 0,
        "lambda1": "0.2,2.0,20.0",
        "lambda2": "0.0002,0.002,0.02",
        "split": 0.7,
        "epochs": 5,
        "batch_size": 32,
        "lr": 1e-4,
        "input_size": 224,
        "stages": "",
        "limit": 0,
    },
    "gradcheck": {
        "out": "",
        "seed": 0,
        "eps": 1e-5,
        "threshold": 1e-4,
        "ops_only": False,
    },
    "warp": {
        "image": "",
        "out": "warped.png",
        "fill": "128,128,128",
        "tol": 1e-8,
    },
}


def resolve_options(args: argparse.Namespace, command: str) -> dict:
    """Merge flag values over config-file values over defaults."""
    defaults = DEFAULTS[command]
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as f:
            file_cfg = json.load(f)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config keys for {command}: {unknown}")
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_cfg:
            resolved[key] = type(default)(file_cfg[key])
        else:
            resolved[key] = default
    return resolved


def record_config(out_dir, command: str, cfg: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump({"command": command, **cfg}, f, indent=2, sort_keys=True)
        f.write("\n")


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


def _float_list(text: str) -> tuple:
    return tuple(float(v) for v in str(text).split(",") if str(v).strip())


def _model_config(cfg: dict, location_module: bool = True) -> ModelConfig:
    kwargs = {"input_size": int(cfg["input_size"]), "location_module": location_module}
    if cfg.get("stages"):
        kwargs["stages"] = tuple(tuple(int(v) for v in s) for s in json.loads(cfg["stages"]))
    return ModelConfig(**kwargs)


def _train_config(cfg: dict, location_module: bool = True) -> TrainConfig:
    weights = LossWeights(
        alpha_rho=float(cfg.get("alpha_rho", 100.0)),
        lambda1=float(cfg["lambda1"]),
        lambda2=float(cfg["lambda2"]),
    )
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        lr=float(cfg["lr"]),
        beta1=float(cfg.get("beta1", 0.9)),
        beta2=float(cfg.get("beta2", 0.9)),
        lr_decay_epochs=_int_list(cfg.get("lr_decay_epochs", "10,20")),
        lr_decay=float(cfg.get("lr_decay", 0.5)),
        seed=int(cfg["seed"]),
        weights=weights,
        model=_model_config(cfg, location_module),
    )


def _load_samples(path, limit: int = 0) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    samples = load_dataset(path)
    if limit:
        samples = samples[: int(limit)]
    return samples


def _epoch_line(rec: dict) -> str:
    return "epoch {epoch:3d}  loss {loss:.4f}  train_mae {train_mae:.3f}  lr {lr:.2e}".format(**rec)


# subcommands ------------------------------------------------------------------


def cmd_gen_markers(args) -> int:
    cfg = resolve_options(args, "gen-markers")
    spec = MarkerSpec(render_size=int(cfg["size"]))
    sources = generate_marker_dataset(
        int(cfg["count"]),
        int(cfg["seed"]),
        spec,
        pitch_range=(-cfg["pitch_max"], cfg["pitch_max"]),
        yaw_range=(-cfg["yaw_max"], cfg["yaw_max"]),
        roll_range=(-cfg["roll_max"], cfg["roll_max"]),
    )
    save_source_dataset(sources, cfg["out"])
    record_config(cfg["out"], "gen-markers", cfg)
    print(f"wrote {len(sources)} marker sources to {cfg['out']}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = resolve_options(args, "synth")
    src_dir = Path(cfg["source"])
    if not src_dir.exists():
        raise FileNotFoundError(f"source directory not found: {src_dir}")
    sources = load_source_dataset(src_dir)
    if cfg["limit"]:
        sources = sources[: int(cfg["limit"])]
    spec = CanvasSpec(
        scale=float(cfg["scale"]),
        crop_margin=float(cfg["crop_margin"]),
        crop_size=int(cfg["crop_size"]),
    )
    samples = synthesize_dataset(
        sources,
        int(cfg["seed"]),
        spec,
        rho_max=float(cfg["rho_max"]),
        max_retries=int(cfg["max_retries"]),
    )
    save_dataset(samples, cfg["out"])
    record_config(cfg["out"], "synth", cfg)
    print(f"synthesized {len(samples)}/{len(sources)} samples into {cfg['out']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_options(args, "train")
    samples = _load_samples(cfg["data"], cfg["limit"])
    train_cfg = _train_config(cfg, location_module=not cfg["no_location"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    record_config(out, "train", cfg)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    result = run_training(
        samples, train_cfg, log_path=log_path, progress=lambda rec: print(_epoch_line(rec), flush=True)
    )
    result.model.save(out / "checkpoint.ckpt", out / "model_config.json")
    with open(out / "train_config.json", "w") as f:
        json.dump(train_cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    ev.plot_training_curves(result.records, out / "loss_curve.svg")
    final = result.records[-1]
    print(f"final loss {final['loss']:.4f}  train_mae {final['train_mae']:.3f}")
    print(f"checkpoint written to {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_options(args, "eval")
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model_cfg = Path(cfg["model_config"]) if cfg["model_config"] else ckpt.parent / "model_config.json"
    if not model_cfg.exists():
        raise FileNotFoundError(f"model config not found: {model_cfg}")
    model = Model.load(ckpt, model_cfg)
    samples = _load_samples(cfg["data"], cfg["limit"])
    records = ev.evaluate_model(model, samples, batch_size=int(cfg["batch_size"]))
    metrics = ev.mae(records)
    curve = ev.radial_error_curve(records, n_bins=int(cfg["rho_bins"]))
    report = dict(metrics)
    report["count"] = len(records)
    if len(curve) >= 2:
        report["radial_spearman"] = ev.radial_trend_spearman(curve)
    ev.emit_eval_report(cfg["out"], report, curve, predictions=records)
    record_config(cfg["out"], "eval", cfg)
    print(
        "mae {mae:.3f}  pitch {pitch:.3f}  yaw {yaw:.3f}  roll {roll:.3f}".format(**metrics)
    )
    if "radial_spearman" in report:
        print(f"radial spearman {report['radial_spearman']:.3f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_options(args, "ablate")
    samples = _load_samples(cfg["data"], cfg["limit"])
    base_cfg = _train_config(cfg)
    if cfg["variants"] == "pair":
        variants = ev.ablation_pair(float(cfg["lambda1"]), float(cfg["lambda2"]))
    elif cfg["variants"] == "grid":
        variants = ev.full_variant_grid(float(cfg["lambda1"]), float(cfg["lambda2"]))
    else:
        raise ValueError(f"unknown variant set: {cfg['variants']!r} (want pair or grid)")
    seeds = _int_list(cfg["seeds"])
    report = ev.ablation_run(
        samples,
        base_cfg,
        variants,
        seeds,
        split_fraction=float(cfg["split"]),
        progress=lambda row: print(
            "variant {variant:14s} seed {seed}  mae {mae:.3f}".format(**row), flush=True
        ),
    )
    ev.emit_ablation_report(cfg["out"], report)
    record_config(cfg["out"], "ablate", cfg)
    baseline_records = [
        r
        for (name, _seed), recs in report.records.items()
        if name in ("baseline", "att0-rho0-theta0")
        for r in recs
    ]
    if baseline_records:
        curve = ev.radial_error_curve(baseline_records)
        ev.write_csv(
            Path(cfg["out"]) / "radial_baseline.csv",
            [b._asdict() for b in curve],
            ev.RADIAL_CSV_COLUMNS,
        )
        ev.plot_radial_curve(curve, Path(cfg["out"]) / "radial_baseline.svg")
        if len(curve) >= 2:
            print(f"baseline radial spearman {ev.radial_trend_spearman(curve):.3f}")
    for row in report.summary:
        print("summary {variant:14s} mae {mae:.3f}".format(**row))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_options(args, "sweep")
    samples = _load_samples(cfg["data"], cfg["limit"])
    l1_values = _float_list(cfg["lambda1"])
    l2_values = _float_list(cfg["lambda2"])
    seed = int(cfg["seed"])
    train_samples, test_samples = split_dataset(samples, float(cfg["split"]), seed)
    rows = []
    grid = np.zeros((len(l1_values), len(l2_values)))
    for i, l1 in enumerate(l1_values):
        for j, l2 in enumerate(l2_values):
            cell = dict(cfg, lambda1=l1, lambda2=l2)
            train_cfg = _train_config(cell)
            result = run_training(train_samples, train_cfg)
            records = ev.evaluate_model(result.model, test_samples, int(cfg["batch_size"]))
            metrics = ev.mae(records)
            grid[i, j] = metrics["mae"]
            rows.append(
                {
                    "lambda1": l1,
                    "lambda2": l2,
                    **metrics,
                    "final_train_loss": result.records[-1]["loss"],
                }
            )
            print(f"lambda1 {l1:g}  lambda2 {l2:g}  mae {metrics['mae']:.3f}", flush=True)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ev.write_csv(
        out / "sweep.csv",
        rows,
        ("lambda1", "lambda2", "pitch", "yaw", "roll", "mae", "final_train_loss"),
    )
    ev.write_json(out / "sweep.json", {"rows": rows})
    ev.plot_sweep_heatmap(grid, l1_values, l2_values, out / "sweep_heatmap.svg")
    record_config(out, "sweep", cfg)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_options(args, "gradcheck")
    results = gradient_suite(
        eps=float(cfg["eps"]), seed=int(cfg["seed"]), include_network=not cfg["ops_only"]
    )
    threshold = float(cfg["threshold"])
    worst = max(results.values())
    for name in sorted(results):
        verdict = "PASS" if results[name] < threshold else "FAIL"
        print(f"{name:18s} {results[name]:.3e}  {verdict}")
    overall = "PASS" if worst < threshold else "FAIL"
    print(f"overall: {overall} (max relative error {worst:.3e}, threshold {threshold:g})")
    if cfg["out"]:
        out = Path(cfg["out"])
        ev.write_json(out / "gradcheck.json", {"results": results, "max": worst})
        record_config(out, "gradcheck", cfg)
    return EXIT_OK if overall == "PASS" else EXIT_UNEXPECTED


def cmd_warp(args) -> int:
    cfg = resolve_options(args, "warp")
    if not cfg["image"]:
        raise FileNotFoundError("warp needs --image <path>")
    src_path = Path(cfg["image"])
    if not src_path.exists():
        raise FileNotFoundError(f"input image not found: {src_path}")
    image = np.asarray(Image.open(src_path).convert("RGB"))
    fill = tuple(int(v) for v in str(cfg["fill"]).split(","))
    if len(fill) != 3:
        raise ValueError(f"fill must be r,g,b; got {cfg['fill']!r}")
    h, w = image.shape[:2]
    side = max(h, w)
    canvas = np.empty((side, side, 3), dtype=np.uint8)
    canvas[:, :] = fill
    top = (side - h) // 2
    left = (side - w) // 2
    canvas[top : top + h, left : left + w] = image
    warped = warp_canvas(canvas, fill=fill, tol=float(cfg["tol"]))
    out_path = Path(cfg["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(warped).save(out_path)
    print(f"warped {src_path} -> {out_path}")
    return EXIT_OK


# parser -----------------------------------------------------------------------


def _add_common(sub, with_seed: bool = True):
    sub.add_argument("--config", default=None, help="JSON file with option overrides")
    sub.add_argument("--out", default=None, help="output directory or file")
    if with_seed:
        sub.add_argument("--seed", type=int, default=None, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fisheyepose",
        description="Synthesize fisheye head-pose data and train the location-guided estimator.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-markers", help="render a labeled synthetic marker dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="marker raster side in pixels")
    p.add_argument("--pitch-max", type=float, default=None, dest="pitch_max")
    p.add_argument("--yaw-max", type=float, default=None, dest="yaw_max")
    p.add_argument("--roll-max", type=float, default=None, dest="roll_max")
    p.set_defaults(func=cmd_gen_markers)

    p = subs.add_parser("synth", help="place sources on canvases and warp through the mapping")
    _add_common(p)
    p.add_argument("--source", default=None, help="source dataset directory")
    p.add_argument("--scale", type=float, default=None, help="canvas side / face box side")
    p.add_argument("--rho-max", type=float, default=None, dest="rho_max")
    p.add_argument("--crop-margin", type=float, default=None, dest="crop_margin")
    p.add_argument("--crop-size", type=int, default=None, dest="crop_size")
    p.add_argument("--max-retries", type=int, default=None, dest="max_retries")
    p.add_argument("--limit", type=int, default=None, help="use only the first N sources")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="train the multi-task estimator on a synthesized dataset")
    _add_common(p)
    p.add_argument("--data", default=None, help="synthesized dataset directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--lr-decay-epochs", default=None, dest="lr_decay_epochs")
    p.add_argument("--lr-decay", type=float, default=None, dest="lr_decay")
    p.add_argument("--alpha-rho", type=float, default=None, dest="alpha_rho")
    p.add_argument("--lambda1", type=float, default=None, help="radial loss weight")
    p.add_argument("--lambda2", type=float, default=None, help="angular loss weight")
    p.add_argument(
        "--no-location", action="store_const", const=True, default=None, dest="no_location",
        help="drop the location attention module and location losses",
    )
    p.add_argument("--input-size", type=int, default=None, dest="input_size")
    p.add_argument("--stages", default=None, help="backbone stages as JSON [[c,k,s,p],...]")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("eval", help="evaluate a checkpoint and emit metrics + figures")
    _add_common(p, with_seed=False)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model-config", default=None, dest="model_config")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--rho-bins", type=int, default=None, dest="rho_bins")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="train variant/seed grid and compare test MAE")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--seeds", default=None, help="comma-separated training seeds")
    p.add_argument("--variants", default=None, choices=("pair", "grid"))
    p.add_argument("--split", type=float, default=None, help="train fraction")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--input-size", type=int, default=None, dest="input_size")
    p.add_argument("--stages", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("sweep", help="grid-sweep the location loss weights")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--lambda1", default=None, help="comma-separated values")
    p.add_argument("--lambda2", default=None, help="comma-separated values")
    p.add_argument("--split", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--input-size", type=int, default=None, dest="input_size")
    p.add_argument("--stages", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("gradcheck", help="finite-difference check of every op and the model")
    _add_common(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument(
        "--ops-only", action="store_const", const=True, default=None, dest="ops_only",
        help="skip the (slow) whole-network check",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("warp", help="push a single image through the fisheye mapping")
    _add_common(p, with_seed=False)
    p.add_argument("--image", default=None, help="input image path")
    p.add_argument("--fill", default=None, help="background color r,g,b")
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_warp)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ManifestError as e:
        print(f"error: bad manifest: {e}", file=sys.stderr)
        return EXIT_BAD_MANIFEST
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NON_FINITE_LOSS
    except (ValueError, OSError, RuntimeError, ad.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
