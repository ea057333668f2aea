"""Command-line harness: dataset generation, training, sweeps, ablations,
PCA analysis and plot emission.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 divergence in
single-run mode.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from fbseg import experiments as ex
from fbseg.analysis import pca_strongest_component
from fbseg.autodiff import Tensor
from fbseg.metrics import f1_score
from fbseg.network import (
    ConfigError,
    DivergenceError,
    feedforward_predict,
    load_checkpoint,
    predict_mask,
    run_trajectory,
)
from fbseg.polygons import (
    DatasetError,
    ValidationError,
    build_split,
    read_dataset,
    write_dataset,
)
from fbseg.svg import pca_chart, sweep_chart


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


GENERATE_KEYS = ("H", "W", "D_train", "D_test", "sigma", "base_seed")
SWEEP_KEYS = GENERATE_KEYS + ("replicates", "epochs", "workers", "sigma_grid", "d_grid")


def parse_config_file(path, valid_keys) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in valid_keys:
            raise UsageError(
                f"{path}:{lineno}: unknown key {key!r}; valid keys: {', '.join(valid_keys)}")
        values[key] = value
    return values


def _int_list(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _merged_generate_settings(args) -> dict:
    settings = {"H": 64, "W": 64, "D_train": 200, "D_test": 20,
                "sigma": 0.0, "base_seed": 0}
    if args.config:
        raw = parse_config_file(args.config, GENERATE_KEYS)
        for key, value in raw.items():
            settings[key] = value
    overrides = {"H": args.height, "W": args.width, "D_train": args.d_train,
                 "D_test": args.d_test, "sigma": args.sigma, "base_seed": args.seed}
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    settings["H"] = int(settings["H"])
    settings["W"] = int(settings["W"])
    settings["D_train"] = int(settings["D_train"])
    settings["D_test"] = int(settings["D_test"])
    settings["sigma"] = float(settings["sigma"])
    settings["base_seed"] = int(settings["base_seed"])
    if settings["sigma"] < 0:
        raise ValidationError(f"sigma must be >= 0, got {settings['sigma']}")
    return settings


def cmd_generate(args) -> int:
    settings = _merged_generate_settings(args)
    out = Path(args.out)
    for split, count in (("train", settings["D_train"]), ("test", settings["D_test"])):
        instances, manifest = build_split({
            "D": count, "sigma": settings["sigma"], "H": settings["H"],
            "W": settings["W"], "base_seed": settings["base_seed"], "split": split,
        })
        write_dataset(instances, manifest, out / split)
        print(f"{split}: {manifest.count} instances, sigma={manifest.sigma}, "
              f"{manifest.height}x{manifest.width} -> {out / split}")
    return 0


def _sweep_spec(args) -> ex.SweepSpec:
    settings = {"base_seed": 0, "replicates": 3, "epochs": 10, "D_train": 200,
                "D_test": 20, "H": 64, "W": 64, "sigma_grid": None, "d_grid": None}
    if args.config:
        raw = parse_config_file(args.config, SWEEP_KEYS)
        settings.update(raw)
    if args.seed is not None:
        settings["base_seed"] = args.seed
    if args.replicates is not None:
        settings["replicates"] = args.replicates
    if getattr(args, "epochs", None) is not None:
        settings["epochs"] = args.epochs
    if getattr(args, "d_train", None) is not None:
        settings["D_train"] = args.d_train
    if getattr(args, "d_test", None) is not None:
        settings["D_test"] = args.d_test
    sigma_grid = ex.SIGMA_GRID
    if getattr(args, "sigma_grid", None):
        sigma_grid = tuple(float(s) for s in _int_list(args.sigma_grid))
    elif settings["sigma_grid"]:
        sigma_grid = tuple(float(s) for s in _int_list(str(settings["sigma_grid"])))
    d_grid = ex.D_GRID
    if getattr(args, "d_grid", None):
        d_grid = _int_list(args.d_grid)
    elif settings["d_grid"]:
        d_grid = _int_list(str(settings["d_grid"]))
    spec = ex.SweepSpec(
        base_seed=int(settings["base_seed"]),
        replicates=int(settings["replicates"]),
        sigma_grid=sigma_grid,
        d_grid=d_grid,
        d_train=int(settings["D_train"]),
        d_test=int(settings["D_test"]),
        epochs=int(settings["epochs"]),
        height=int(settings["H"]),
        width=int(settings["W"]),
        extended=bool(args.extended),
    )
    spec.validate()
    return spec


def _progress(done, total):
    print(f"  run {done}/{total} finished", file=sys.stderr, flush=True)


def _workers(args) -> int:
    return args.workers if args.workers is not None else ex.default_workers()


def cmd_noise_sweep(args) -> int:
    spec = _sweep_spec(args)
    out = Path(args.out)
    configs = ex.noise_sweep_configs(spec)
    rows = ex.run_many(configs, cache_dir=out, workers=_workers(args), progress=_progress)
    rows.extend(ex.noise_sweep_baselines(spec))
    rows = ex.sort_rows(rows)
    ex.write_rows_csv(rows, out / "results.csv")
    print(f"wrote {len(rows)} rows -> {out / 'results.csv'}")
    for sigma in spec.sigma_grid:
        at_sigma = [r for r in rows if float(r["sigma"]) == sigma and r["status"] == "ok"]
        base = [float(r["mean_f1"]) for r in at_sigma if r["mode"] == "random"]
        for mode in ("feedback", "feedforward"):
            vals = [float(r["mean_f1"]) for r in at_sigma
                    if r["mode"] == mode and r["mean_f1"] != ""]
            if sigma == 0.0 and vals and base and max(vals) <= base[0]:
                print(f"warning: {mode} does not beat the random baseline at "
                      f"sigma=0 ({max(vals):.3f} <= {base[0]:.3f})", file=sys.stderr)
    return 0


def cmd_trainsize_sweep(args) -> int:
    spec = _sweep_spec(args)
    out = Path(args.out)
    configs = ex.trainsize_sweep_configs(spec)
    rows = ex.run_many(configs, cache_dir=out, workers=_workers(args), progress=_progress)
    rows.extend(ex.trainsize_sweep_baselines(spec))
    rows = ex.sort_rows(rows)
    ex.write_rows_csv(rows, out / "results.csv")
    print(f"wrote {len(rows)} rows -> {out / 'results.csv'}")
    return 0


def cmd_ablation(args) -> int:
    spec = _sweep_spec(args)
    out = Path(args.out)
    configs = ex.ablation_grid_configs(spec)
    rows = ex.run_many(configs, cache_dir=out, workers=_workers(args), progress=_progress)
    ex.write_rows_csv(rows, out / "results.csv")
    summary = ex.ablation_summary(rows)
    ex.write_ablation_summary_csv(summary, out / "summary.csv")
    print(f"wrote {len(rows)} rows -> {out / 'results.csv'}")
    print(f"wrote {len(summary)} cells -> {out / 'summary.csv'}")
    return 0


def cmd_train(args) -> int:
    mode = args.mode or "feedback"
    config = ex.RunConfig(
        experiment="single_run",
        sigma=args.sigma if args.sigma is not None else 0.0,
        d_train=args.d_train if args.d_train is not None else 200,
        d_test=args.d_test if args.d_test is not None else 20,
        mode=mode,
        use_decay=(not args.no_decay) if mode == "feedback" else bool(args.static_decay),
        use_softmax=not args.no_softmax,
        base_seed=args.seed if args.seed is not None else 0,
        epochs=args.epochs if args.epochs is not None else 10,
    )
    result = ex.run_experiment(config, cache_dir=Path(args.out), use_cache=not args.force)
    print(f"status: {result.status}")
    if result.status != "ok":
        return 3
    print(f"test f1: {result.mean_f1:.4f} +/- {result.std_f1:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    instances, manifest = read_dataset(args.data)
    flags = f"decay={int(params.config.use_decay)};softmax={int(params.config.use_softmax)}"
    mode = "feedback" if params.config.feedback else "feedforward"
    lines = ["instance_id,sigma,D,mode,flags,f1"]
    scores = []
    for i, inst in enumerate(instances):
        score = f1_score(predict_mask(params, inst.image), inst.mask)
        scores.append(score)
        lines.append(f"{i},{manifest.sigma},{manifest.count},{mode},{flags},{score:.6f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"mean f1 {np.mean(scores):.4f} +/- {np.std(scores):.4f} over "
          f"{len(scores)} instances -> {out}")
    return 0


def cmd_pca(args) -> int:
    params = load_checkpoint(args.checkpoint)
    if not params.config.feedback:
        raise ConfigError("pca requires a feedback checkpoint (got feedforward)")
    ff_params = None
    if args.ff_checkpoint:
        ff_params = load_checkpoint(args.ff_checkpoint)
        if ff_params.config.feedback:
            raise ConfigError("--ff-checkpoint must hold a feedforward model")
        if ff_params.config.n_classes != params.config.n_classes:
            raise ConfigError("checkpoint class counts differ")
    probe = ex.RunConfig(sigma=args.sigma, d_train=args.d_train,
                         d_test=args.d_test, base_seed=args.seed or 0)
    samples = ex.split_samples(probe, "test")
    timesteps = params.config.timesteps
    records = [run_trajectory(Tensor(image[None, None]), params, timesteps)
               for image, _ in samples]
    projection = pca_strongest_component(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["instance_id,timestep,projection,explained_variance_ratio"]
    for i, per_step in enumerate(projection.projections):
        for t, value in enumerate(per_step, start=1):
            lines.append(f"{i},{t},{value:.9g},{projection.explained_variance_ratio:.9g}")
    (out / "pca.csv").write_text("\n".join(lines) + "\n")

    ff_level = None
    if ff_params is not None:
        pooled = []
        for image, _ in samples:
            logits, _ = feedforward_predict(Tensor(image[None, None]), ff_params)
            pooled.append(logits.values[0].mean(axis=(1, 2)))
        ff_level = float(np.mean(projection.project(np.stack(pooled))))
    svg = pca_chart(projection.projections, list(range(1, timesteps + 1)),
                    ff_level, projection.explained_variance_ratio)
    (out / "pca.svg").write_text(svg)
    print(f"explained variance ratio: {projection.explained_variance_ratio:.4f}")
    print(f"wrote {out / 'pca.csv'} and {out / 'pca.svg'}")
    return 0


def cmd_plot(args) -> int:
    try:
        rows = ex.read_rows_csv(args.csv)
    except ValueError as err:
        raise ValidationError(str(err)) from err
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        print("warning: empty results CSV, plotting axes only", file=sys.stderr)
        chart = sweep_chart([], "sigma", "results", "sigma")
        out.write_text(chart)
        return 0
    sigmas = {row["sigma"] for row in rows}
    if len(sigmas) > 1:
        x_column, xlabel = "sigma", "noise level sigma"
    else:
        x_column, xlabel = "d_train", "training set size D"
    chart = sweep_chart(rows, x_column, "segmentation performance", xlabel)
    out.write_text(chart)
    print(f"wrote {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="fbseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="base seed")

    p = sub.add_parser("generate", help="write train/test polygon datasets")
    common(p)
    p.add_argument("--d-train", type=int)
    p.add_argument("--d-test", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_generate)

    for name, func in (("noise-sweep", cmd_noise_sweep),
                       ("trainsize-sweep", cmd_trainsize_sweep),
                       ("ablation", cmd_ablation)):
        p = sub.add_parser(name, help=f"run the {name.replace('-', ' ')}")
        common(p)
        p.add_argument("--replicates", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--extended", action="store_true",
                       help="allow grids outside the studied ranges")
        p.add_argument("--epochs", type=int)
        p.add_argument("--d-train", type=int)
        p.add_argument("--d-test", type=int)
        p.add_argument("--sigma-grid", help="comma-separated sigma values")
        p.add_argument("--d-grid", help="comma-separated train sizes")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train one model and store a checkpoint")
    common(p)
    p.add_argument("--mode", choices=("feedback", "feedforward"))
    p.add_argument("--no-decay", action="store_true")
    p.add_argument("--no-softmax", action="store_true")
    p.add_argument("--static-decay", action="store_true",
                   help="feedforward: apply the static attenuation factor")
    p.add_argument("--sigma", type=float)
    p.add_argument("--d-train", type=int)
    p.add_argument("--d-test", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--force", action="store_true", help="ignore the run cache")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="per-instance f1 CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pca", help="strongest-component trajectory analysis")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ff-checkpoint", help="feedforward overlay checkpoint")
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--d-train", type=int, default=200)
    p.add_argument("--d-test", type=int, default=20)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("plot", help="render a sweep results CSV as SVG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="SVG output path")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ValidationError, DatasetError, ConfigError, ValueError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return 2
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
