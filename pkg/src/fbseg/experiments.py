"""Reproducible experiment runs and sweeps.

Every run is a pure function of its RunConfig: dataset seeds, model init
and the training visit order all derive from the config fields, so any CSV
row can be regenerated bit-identically from its provenance (config fields +
hash).  Finished runs are cached on disk under their config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fbseg.analysis import evaluate_model
from fbseg.metrics import random_baseline
from fbseg.network import (
    ArchConfig,
    DivergenceError,
    ModelParams,
    load_checkpoint,
    save_checkpoint,
)
from fbseg.polygons import build_split
from fbseg.seeding import derive_seed64, stream
from fbseg.training import TrainConfig, train

CSV_COLUMNS = [
    "experiment", "sigma", "d_train", "mode", "use_decay", "use_softmax",
    "replicate", "status", "mean_f1", "std_f1", "n_test", "epochs",
    "height", "width", "base_seed", "run_seed", "config_hash",
]

SIGMA_GRID = tuple(float(s) for s in range(11))
D_GRID = tuple(range(1, 11))
BASELINE_DRAWS = 1000


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "single_run"
    sigma: float = 0.0
    d_train: int = 200
    d_test: int = 20
    mode: str = "feedback"              # "feedback" | "feedforward"
    use_decay: bool = True
    use_softmax: bool = True
    replicate: int = 0
    base_seed: int = 0
    epochs: int = 10
    learning_rate: float = 0.01
    timesteps: int = 5
    tau: float = 1.0
    height: int = 64
    width: int = 64
    seg_channels: int = 4
    n_classes: int = 2
    enc_channels: tuple = (8, 16)
    bottleneck_channels: int = 32

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["enc_channels"] = list(self.enc_channels)
        return raw

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def run_seed(self) -> int:
        """Seed for model init and epoch shuffling; mode-specific."""
        return derive_seed64("run", self.base_seed, self.experiment, self.sigma,
                             self.d_train, self.mode, self.use_decay,
                             self.use_softmax, self.replicate)

    @property
    def data_seed(self) -> int:
        """Seed for the dataset; shared across modes at one sweep point so
        competing models see identical data."""
        return derive_seed64("data", self.base_seed, self.sigma, self.d_train,
                             self.replicate)

    def arch(self) -> ArchConfig:
        return ArchConfig(
            seg_channels=self.seg_channels,
            n_classes=self.n_classes,
            enc_channels=tuple(self.enc_channels),
            bottleneck_channels=self.bottleneck_channels,
            timesteps=self.timesteps,
            tau=self.tau,
            feedback=self.mode == "feedback",
            use_decay=self.use_decay,
            use_softmax=self.use_softmax,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            timesteps=self.timesteps,
            tau=self.tau,
            use_decay=self.use_decay,
            use_softmax_projection=self.use_softmax,
            feedback_enabled=self.mode == "feedback",
            seed=self.run_seed,
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        raw["enc_channels"] = tuple(raw["enc_channels"])
        return cls(**raw)


def split_samples(config: RunConfig, split: str):
    count = config.d_train if split == "train" else config.d_test
    instances, _ = build_split({
        "D": count, "sigma": config.sigma, "H": config.height,
        "W": config.width, "base_seed": config.data_seed, "split": split,
    })
    return [(inst.image, inst.mask) for inst in instances]


@dataclass
class RunResult:
    config: RunConfig
    status: str
    mean_f1: float
    std_f1: float
    per_instance_f1: list
    loss_curve: list = field(default_factory=list)
    checkpoint_path: str | None = None

    def row(self) -> dict:
        c = self.config
        return {
            "experiment": c.experiment,
            "sigma": c.sigma,
            "d_train": c.d_train,
            "mode": c.mode,
            "use_decay": int(c.use_decay),
            "use_softmax": int(c.use_softmax),
            "replicate": c.replicate,
            "status": self.status,
            "mean_f1": "" if np.isnan(self.mean_f1) else f"{self.mean_f1:.6f}",
            "std_f1": "" if np.isnan(self.std_f1) else f"{self.std_f1:.6f}",
            "n_test": c.d_test,
            "epochs": c.epochs,
            "height": c.height,
            "width": c.width,
            "base_seed": c.base_seed,
            "run_seed": c.run_seed,
            "config_hash": c.config_hash(),
        }


def _run_dir(cache_dir, config: RunConfig) -> Path:
    return Path(cache_dir) / "runs" / config.config_hash()


def load_cached_result(cache_dir, config: RunConfig) -> RunResult | None:
    run_dir = _run_dir(cache_dir, config)
    result_path = run_dir / "result.json"
    if not result_path.exists():
        return None
    raw = json.loads(result_path.read_text())
    if raw.get("config_hash") != config.config_hash():
        return None
    ckpt = run_dir / "checkpoint.ckpt"
    return RunResult(
        config=config,
        status=raw["status"],
        mean_f1=raw["mean_f1"] if raw["mean_f1"] is not None else float("nan"),
        std_f1=raw["std_f1"] if raw["std_f1"] is not None else float("nan"),
        per_instance_f1=raw["per_instance_f1"],
        loss_curve=raw.get("loss_curve", []),
        checkpoint_path=str(ckpt) if ckpt.exists() else None,
    )


def run_experiment(config: RunConfig, cache_dir=None, use_cache: bool = True) -> RunResult:
    """Train and evaluate one sweep point, honoring the on-disk cache."""
    if cache_dir is not None and use_cache:
        cached = load_cached_result(cache_dir, config)
        if cached is not None:
            return cached

    train_samples = split_samples(config, "train")
    test_samples = split_samples(config, "test")
    params = ModelParams.initialize(config.arch(), seed=config.run_seed)
    status = "ok"
    loss_curve = []
    try:
        stats = train(params, train_samples, config.train_config())
        loss_curve = [(s.epoch, s.mean_loss, s.max_delta_norm) for s in stats]
        report = evaluate_model(params, test_samples)
        per_instance = report.per_instance_f1
        mean_f1, std_f1 = report.mean_f1, report.std_f1
    except DivergenceError as err:
        status = f"diverged at epoch {err.epoch} instance {err.instance}"
        per_instance = []
        mean_f1 = std_f1 = float("nan")

    result = RunResult(config=config, status=status, mean_f1=mean_f1,
                       std_f1=std_f1, per_instance_f1=per_instance,
                       loss_curve=loss_curve)
    if cache_dir is not None:
        run_dir = _run_dir(cache_dir, config)
        run_dir.mkdir(parents=True, exist_ok=True)
        if status == "ok":
            ckpt = run_dir / "checkpoint.ckpt"
            save_checkpoint(params, ckpt)
            result.checkpoint_path = str(ckpt)
        with open(run_dir / "loss.csv", "w") as fh:
            fh.write("epoch,mean_loss,max_delta_norm\n")
            for epoch, mean_loss, max_delta in loss_curve:
                fh.write(f"{epoch},{mean_loss:.9g},{max_delta:.9g}\n")
        payload = {
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "status": status,
            "mean_f1": None if np.isnan(mean_f1) else mean_f1,
            "std_f1": None if np.isnan(std_f1) else std_f1,
            "per_instance_f1": per_instance,
            "loss_curve": loss_curve,
        }
        (run_dir / "result.json").write_text(json.dumps(payload, indent=1))
    return result


def trained_params(result: RunResult) -> ModelParams:
    if result.checkpoint_path is None:
        raise FileNotFoundError("run has no stored checkpoint")
    return load_checkpoint(result.checkpoint_path)


def _worker(args):
    config_dict, cache_dir = args
    config = RunConfig.from_dict(config_dict)
    result = run_experiment(config, cache_dir=cache_dir)
    return result.row()


def run_many(configs, cache_dir=None, workers: int = 1, progress=None) -> list:
    """Execute runs (serially or in a process pool) and return CSV rows in
    canonical order, independent of execution order."""
    rows = []
    if workers <= 1:
        for i, config in enumerate(configs):
            rows.append(run_experiment(config, cache_dir=cache_dir).row())
            if progress:
                progress(i + 1, len(configs))
    else:
        import multiprocessing as mp

        jobs = [(c.to_dict(), str(cache_dir) if cache_dir else None) for c in configs]
        with mp.get_context("spawn").Pool(workers) as pool:
            for i, row in enumerate(pool.imap_unordered(_worker, jobs)):
                rows.append(row)
                if progress:
                    progress(i + 1, len(configs))
    return sort_rows(rows)


def sort_rows(rows) -> list:
    def key(row):
        return (row["experiment"], float(row["sigma"]), int(row["d_train"]),
                row["mode"], int(row["use_decay"]), int(row["use_softmax"]),
                int(row["replicate"]))
    return sorted(rows, key=key)


def baseline_row(experiment: str, sigma: float, d_train: int, d_test: int,
                 base_seed: int, height: int = 64, width: int = 64,
                 n_draws: int = BASELINE_DRAWS) -> dict:
    """Monte-Carlo fair-coin f1 row against the replicate-0 test masks."""
    probe = RunConfig(experiment=experiment, sigma=sigma, d_train=d_train,
                      d_test=d_test, base_seed=base_seed, height=height,
                      width=width)
    masks = [mask for _, mask in split_samples(probe, "test")]
    rng = stream("baseline", base_seed, experiment, sigma, d_train)
    value = random_baseline(masks, n_draws, rng)
    return {
        "experiment": experiment, "sigma": sigma, "d_train": d_train,
        "mode": "random", "use_decay": 0, "use_softmax": 0, "replicate": 0,
        "status": "ok", "mean_f1": f"{value:.6f}", "std_f1": "",
        "n_test": d_test, "epochs": "", "height": height, "width": width,
        "base_seed": base_seed,
        "run_seed": derive_seed64("baseline", base_seed, experiment, sigma, d_train),
        "config_hash": "",
    }


def write_rows_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in CSV_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


def read_rows_csv(path) -> list:
    text = Path(path).read_text().splitlines()
    if not text:
        return []
    header = text[0].split(",")
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(parts)}")
        rows.append(dict(zip(header, parts)))
    return rows


# ---------------------------------------------------------------------------
# sweep planners


@dataclass(frozen=True)
class SweepSpec:
    base_seed: int = 0
    replicates: int = 3
    sigma_grid: tuple = SIGMA_GRID
    d_grid: tuple = D_GRID
    d_train: int = 200
    d_test: int = 20
    epochs: int = 10
    height: int = 64
    width: int = 64
    extended: bool = False

    def validate(self) -> None:
        if not self.extended:
            for s in self.sigma_grid:
                if s not in SIGMA_GRID:
                    raise ValueError(
                        f"sigma {s} outside the studied grid {list(SIGMA_GRID)}; pass --extended")
            for d in self.d_grid:
                if d not in D_GRID:
                    raise ValueError(
                        f"train size {d} outside the studied grid {list(D_GRID)}; pass --extended")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


def _base_config(spec: SweepSpec, experiment: str, **kw) -> RunConfig:
    return RunConfig(experiment=experiment, base_seed=spec.base_seed,
                     d_test=spec.d_test, epochs=spec.epochs,
                     height=spec.height, width=spec.width, **kw)


def noise_sweep_configs(spec: SweepSpec) -> list:
    """Sigma grid x {feedback, feedforward} x replicates.

    Both modes run with use_decay on: the comparison feedforward model
    carries the static attenuation factor, matching how the single-pass
    baseline is normalized against the recurrent model.
    """
    configs = []
    for sigma in spec.sigma_grid:
        for mode in ("feedback", "feedforward"):
            for rep in range(spec.replicates):
                configs.append(_base_config(
                    spec, "noise_sweep", sigma=float(sigma), d_train=spec.d_train,
                    mode=mode, use_decay=True, use_softmax=True,
                    replicate=rep))
    return configs


def noise_sweep_baselines(spec: SweepSpec) -> list:
    return [baseline_row("noise_sweep", float(s), spec.d_train, spec.d_test,
                         spec.base_seed, spec.height, spec.width)
            for s in spec.sigma_grid]


def trainsize_sweep_configs(spec: SweepSpec) -> list:
    """Train-size grid at sigma = 0, same mode pairing as the noise sweep."""
    configs = []
    for d in spec.d_grid:
        for mode in ("feedback", "feedforward"):
            for rep in range(spec.replicates):
                configs.append(_base_config(
                    spec, "trainsize_sweep", sigma=0.0, d_train=int(d),
                    mode=mode, use_decay=True, use_softmax=True,
                    replicate=rep))
    return configs


def trainsize_sweep_baselines(spec: SweepSpec) -> list:
    return [baseline_row("trainsize_sweep", 0.0, int(d), spec.d_test,
                         spec.base_seed, spec.height, spec.width)
            for d in spec.d_grid]


ABLATION_VARIANTS = (
    # (mode, use_decay, use_softmax)
    ("feedback", True, True),
    ("feedback", True, False),
    ("feedback", False, True),
    ("feedback", False, False),
    ("feedforward", True, True),   # static decay on
    ("feedforward", False, True),  # static decay off
)


def ablation_grid_configs(spec: SweepSpec) -> list:
    configs = []
    for mode, use_decay, use_softmax in ABLATION_VARIANTS:
        for sigma in spec.sigma_grid:
            for rep in range(spec.replicates):
                configs.append(_base_config(
                    spec, "ablation_grid", sigma=float(sigma), d_train=spec.d_train,
                    mode=mode, use_decay=use_decay, use_softmax=use_softmax,
                    replicate=rep))
    return configs


def ablation_summary(rows) -> list:
    """Aggregate per-run rows into the 4x2 table structure: one summary row
    per (mode, decay, softmax) cell, averaged across noise levels, with a
    diverged-run count."""
    cells = {}
    for row in rows:
        if row["mode"] == "random":
            continue
        key = (row["mode"], int(row["use_decay"]), int(row["use_softmax"]))
        cells.setdefault(key, []).append(row)
    summary = []
    for mode, use_decay, use_softmax in ((m, int(d), int(s)) for m, d, s in ABLATION_VARIANTS):
        rows_for_cell = cells.get((mode, use_decay, use_softmax), [])
        values = [float(r["mean_f1"]) for r in rows_for_cell if r["status"] == "ok"]
        diverged = sum(1 for r in rows_for_cell if r["status"] != "ok")
        summary.append({
            "mode": mode, "use_decay": use_decay, "use_softmax": use_softmax,
            "mean_f1": f"{np.mean(values):.6f}" if values else "",
            "std_f1": f"{np.std(values):.6f}" if values else "",
            "n_runs": len(rows_for_cell), "n_diverged": diverged,
        })
    return summary


def write_ablation_summary_csv(summary, path) -> None:
    cols = ["mode", "use_decay", "use_softmax", "mean_f1", "std_f1", "n_runs", "n_diverged"]
    lines = [",".join(cols)]
    for row in summary:
        lines.append(",".join(str(row[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def rerun_row(row: dict, cache_dir=None) -> RunResult:
    """Re-execute a CSV row from its provenance fields; the recomputed
    result must hash and score identically on the same platform."""
    config = RunConfig(
        experiment=row["experiment"],
        sigma=float(row["sigma"]),
        d_train=int(row["d_train"]),
        d_test=int(row["n_test"]),
        mode=row["mode"],
        use_decay=bool(int(row["use_decay"])),
        use_softmax=bool(int(row["use_softmax"])),
        replicate=int(row["replicate"]),
        base_seed=int(row["base_seed"]),
        epochs=int(row["epochs"]) if row.get("epochs") else 10,
        height=int(row["height"]) if row.get("height") else 64,
        width=int(row["width"]) if row.get("width") else 64,
    )
    if row["config_hash"] and config.config_hash() != row["config_hash"]:
        raise ValueError(
            "row provenance does not reproduce its config hash; "
            "non-default run settings must be rerun from the stored config")
    return run_experiment(config, cache_dir=cache_dir, use_cache=False)


def default_workers() -> int:
    env = os.environ.get("FBSEG_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
