"""Command-line entry point: ``plmlab {prepare,train,eval,report}``.

Science parameters live in one JSON config; flags only pick the command,
the config, the variant, an output directory and verbosity.

Layout under the config's ``output_dir``::

    dataset/                 prepare
    runs/<variant>/          train (manifest.json, metrics.csv, models/, ...)
    report/                  eval / report (summary.csv, summary.json)

Exit codes: 0 success, 1 unexpected, 2 config, 3 training, 4 evaluation.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from plmlab.autodiff import Mlp
from plmlab.data import (
    NoisyDataset,
    export_dataset,
    gen_synthetic,
    inject,
    load_dataset_dir,
    load_idx,
    read_matrix_csv,
    write_matrix_csv,
)
from plmlab.errors import (
    ComparisonError,
    ConfigurationError,
    EvaluationError,
    FormatError,
    PlmError,
    TrainingError,
)
from plmlab.evaluation import (
    MetricsRecord,
    build_pseudo_anchors,
    matrix_error,
    posterior_error,
    report,
    test_accuracy,
)
from plmlab.partlab import write_part_labels
from plmlab.trainer import STAGES, VARIANTS, OptimConfig, TrainConfig, run_pipeline, train_ce

log = logging.getLogger("plmlab")

EXIT_OK, EXIT_UNEXPECTED, EXIT_CONFIG, EXIT_TRAINING, EXIT_EVAL = 0, 1, 2, 3, 4
METRICS_COLUMNS = ("epoch", "stage", "train_loss", "val_acc", "lr")


# -- config ---------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSpec(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    c: int = Field(10, ge=2)
    per_class_n: int = Field(200, ge=1)
    test_per_class_n: int = Field(50, ge=0)
    H: int = Field(16, ge=8)
    W: int = Field(16, ge=8)
    noise_scale: float = Field(0.1, ge=0.0)
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit: int | None = Field(None, ge=0)


class NoiseSpec(_Strict):
    kind: Literal["symmetric", "pair", "idn"] = "symmetric"
    rate: float = Field(0.2, ge=0.0, lt=1.0)


class CropSpec(_Strict):
    strategy: Literal["uniform", "random", "emphasized"] = "uniform"
    size: int | None = Field(None, ge=1)
    n_crops: int = Field(5, ge=1)
    emphasis_m: int | None = Field(None, ge=1)


class OptimSpec(_Strict):
    lr: float = Field(0.05, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    schedule: Literal["cosine", "step", "constant"] = "cosine"
    milestones: list[int] = []
    factor: float = Field(100.0, gt=0.0)


class TrainSpec(_Strict):
    epochs_labeler: int = Field(20, ge=1)
    epochs_joint: int = Field(20, ge=1)
    epochs_classifier: int = Field(20, ge=1)
    batch_size: int = Field(128, ge=1)
    hidden: list[int] = [256, 128]
    optimizer: OptimSpec = OptimSpec()
    n_anchors: int = Field(10, ge=1)
    slack_lr_scale: float = Field(0.1, ge=0.0)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    variant: Literal["plm_f", "plm_r", "forward_baseline", "ce_baseline"] = "plm_f"


class EvalSpec(_Strict):
    tau: float = Field(0.99, ge=0.0)
    per_class_cap: int = Field(100, ge=1)
    anchor_epochs: int = Field(20, ge=1)


class RunConfig(_Strict):
    seed: int
    output_dir: str = "out"
    dataset: DatasetSpec = DatasetSpec()
    noise: NoiseSpec = NoiseSpec()
    crop: CropSpec = CropSpec()
    train: TrainSpec = TrainSpec()
    eval: EvalSpec = EvalSpec()

    def train_config(self, variant=None):
        t = self.train
        return TrainConfig(
            epochs_labeler=t.epochs_labeler, epochs_joint=t.epochs_joint,
            epochs_classifier=t.epochs_classifier, batch_size=t.batch_size,
            hidden=tuple(t.hidden),
            optimizer=OptimConfig(**{**t.optimizer.model_dump(), "milestones": tuple(t.optimizer.milestones)}),
            crop_strategy=self.crop.strategy, crop_size=self.crop.size, n_crops=self.crop.n_crops,
            emphasis_m=self.crop.emphasis_m, n_anchors=t.n_anchors, slack_lr_scale=t.slack_lr_scale,
            val_fraction=t.val_fraction, seed=self.seed, variant=variant or t.variant,
        )


def _resolve(base, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else (base / p).resolve()


def load_config(path):
    """Parse and validate a RunConfig; relative paths resolve against the config's folder."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigurationError(f"{path}: {loc}: {err['msg']}") from exc
    base = path.resolve().parent
    cfg.output_dir = str(_resolve(base, cfg.output_dir))
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        setattr(cfg.dataset, key, None if getattr(cfg.dataset, key) is None
                else str(_resolve(base, getattr(cfg.dataset, key))))
    return cfg


def dataset_dir(cfg):
    return Path(cfg.output_dir) / "dataset"


def run_dir(cfg, variant):
    return Path(cfg.output_dir) / "runs" / variant


# -- prepare --------------------------------------------------------------


def _clean_data(cfg):
    d = cfg.dataset
    if d.source == "synthetic":
        train = gen_synthetic(d.c, d.per_class_n, d.H, d.W, d.noise_scale, cfg.seed)
        test = (gen_synthetic(d.c, d.test_per_class_n, d.H, d.W, d.noise_scale, cfg.seed, "synthetic/test")
                if d.test_per_class_n else None)
        return train, test
    if not d.train_images or not d.train_labels:
        raise ConfigurationError("dataset.train_images and dataset.train_labels are required for idx data")
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        p = getattr(d, key)
        if p is not None and not Path(p).exists():
            raise ConfigurationError(f"dataset.{key}: {p} does not exist")
    train = load_idx(d.train_images, d.train_labels, d.limit, d.c)
    test = load_idx(d.test_images, d.test_labels, None, d.c) if d.test_images and d.test_labels else None
    return train, test


def cmd_prepare(cfg, out=None):
    clean, test = _clean_data(cfg)
    noisy = inject(clean, cfg.noise.kind, cfg.noise.rate, cfg.seed)
    target = Path(out) if out else dataset_dir(cfg)
    export_dataset(target, noisy, test, extra={"source": cfg.dataset.source})
    log.info("prepared %d instances (%s %.2f) in %s", len(noisy), cfg.noise.kind, cfg.noise.rate, target)
    return target


# -- train ----------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path, history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in history:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def cmd_train(cfg, variant=None, out=None):
    variant = variant or cfg.train.variant
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    tcfg = cfg.train_config(variant)
    src = dataset_dir(cfg)
    if not (src / "manifest.json").exists():
        raise ConfigurationError(f"no prepared dataset at {src}; run `plmlab prepare` first")
    _, noisy, _ = load_dataset_dir(src)
    log.info("training %s on %d instances", variant, len(noisy))
    art = run_pipeline(tcfg, noisy)

    target = Path(out) if out else run_dir(cfg, variant)
    (target / "models").mkdir(parents=True, exist_ok=True)
    files = {"metrics": "metrics.csv", "split": "split.json"}
    write_metrics_csv(target / "metrics.csv", art.history)
    (target / "split.json").write_text(json.dumps(
        {"train": art.train_index.tolist(), "val": art.val_index.tolist()}) + "\n")
    for name, model in art.models.items():
        model.save(target / "models" / f"{name}.npz")
        files[f"model_{name}"] = f"models/{name}.npz"
    if art.T_hat is not None:
        write_matrix_csv(target / "T.csv", art.T_hat)
        files["T"] = "T.csv"
    if art.delta_T is not None:
        write_matrix_csv(target / "delta_T.csv", art.delta_T)
        write_matrix_csv(target / "T_revised.csv", art.T_revised)
        files["delta_T"], files["T_revised"] = "delta_T.csv", "T_revised.csv"
    if art.part_labels is not None:
        write_part_labels(target / "part_labels.csv", art.part_labels, art.train_index)
        files["part_labels"] = "part_labels.csv"
    manifest = {
        "variant": variant, "seed": cfg.seed, "config": art.config, "run_config": cfg.model_dump(),
        "dataset": str(src), "stages": art.stages, "timings_ms": art.timings_ms, "files": files,
    }
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("stages %s written to %s", ", ".join(art.stages), target)
    return target


# -- eval / report ----------------------------------------------------------


def _load_run(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise EvaluationError(f"{path}: no readable run manifest") from exc
    if manifest.get("stages") != list(STAGES.get(manifest.get("variant"), ())):
        raise EvaluationError(f"{path}: run is incomplete (stages {manifest.get('stages')})")
    models = {}
    for key, rel in manifest["files"].items():
        if key.startswith("model_"):
            try:
                models[key[len("model_"):]] = Mlp.load(path / rel)
            except (OSError, ValueError, KeyError) as exc:
                raise EvaluationError(f"{path}: cannot load {rel}") from exc
    split = json.loads((path / "split.json").read_text())
    return manifest, models, np.array(split["train"], dtype=np.int64), np.array(split["val"], dtype=np.int64)


def _estimator(models):
    for name in ("g_e", "f_l", "g"):
        if name in models:
            return models[name]
    raise EvaluationError("run holds no posterior estimator")


def _clean_view(noisy):
    return NoisyDataset(noisy.instances, noisy.clean_labels, noisy.clean_labels, noisy.c,
                        "symmetric", 0.0, np.eye(noisy.c), noisy.seed, noisy.index)


class _AnchorCache:
    """Pseudo-anchors per (dataset, split); the clean filter model is trained once per key."""

    def __init__(self, spec):
        self.spec = spec
        self.cache = {}

    def get(self, ds_manifest, noisy, train_idx, val_idx, tcfg):
        key = (ds_manifest.get("seed"), hashlib.sha1(train_idx.tobytes()).hexdigest(), tcfg.seed)
        if key not in self.cache:
            train = noisy.subset(train_idx)
            if ds_manifest.get("source") == "synthetic":
                anchors = build_pseudo_anchors(train, None, 1.0, self.spec.per_class_cap)
            else:
                clean = _clean_view(noisy)
                filt = train_ce(clean.subset(train_idx), clean.subset(val_idx), tcfg,
                                self.spec.anchor_epochs, "anchor_filter", [])
                anchors = build_pseudo_anchors(train, filt, self.spec.tau, self.spec.per_class_cap)
            self.cache[key] = anchors
        return self.cache[key]


def evaluate_run(path, spec, cache=None):
    """MetricsRecord for one run directory; also written to ``<run>/eval.json``."""
    path = Path(path)
    manifest, models, train_idx, val_idx = _load_run(path)
    ds_manifest, noisy, test = load_dataset_dir(manifest["dataset"])
    if test is None:
        raise EvaluationError(f"dataset {manifest['dataset']} has no test split")
    tcfg = TrainConfig(**{**manifest["config"], "hidden": tuple(manifest["config"]["hidden"])})
    cache = cache or _AnchorCache(spec)
    anchors = cache.get(ds_manifest, noisy, train_idx, val_idx, tcfg)
    train = noisy.subset(train_idx)
    T_err = None
    if noisy.class_dependent:
        T_file = manifest["files"].get("T_revised") or manifest["files"].get("T")
        if T_file:
            T_err = matrix_error(read_matrix_csv(path / T_file), noisy.true_T)
    cfg = manifest["config"]
    record = MetricsRecord(
        variant=manifest["variant"], noise_kind=noisy.noise_kind, rate=float(noisy.rate),
        seed=int(manifest["seed"]),
        posterior_error=posterior_error(_estimator(models), anchors, train.flat()),
        test_accuracy=test_accuracy(models["g"], test.instances, test.labels),
        T_error=T_err, timings_ms=manifest["timings_ms"],
        epochs={k: cfg[k] for k in ("epochs_labeler", "epochs_joint", "epochs_classifier")},
    )
    (path / "eval.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    return record


def _record_from_json(path):
    try:
        return MetricsRecord(**json.loads(Path(path).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise EvaluationError(f"{path}: unreadable eval record") from exc


def cmd_eval(cfg, runs, out=None):
    cache = _AnchorCache(cfg.eval)
    records = [evaluate_run(r, cfg.eval, cache) for r in runs]
    target = Path(out) if out else Path(cfg.output_dir) / "report"
    report(records, target)
    for r in records:
        log.info("%s %s %.2f seed %d: posterior error %.4f, test acc %.4f",
                 r.variant, r.noise_kind, r.rate, r.seed, r.posterior_error, r.test_accuracy)
    return target


def cmd_report(runs, out):
    records = [_record_from_json(Path(r) / "eval.json" if Path(r).is_dir() else r) for r in runs]
    report(records, out)
    return Path(out)


# -- entry point ------------------------------------------------------------


def _default_runs(cfg):
    root = Path(cfg.output_dir) / "runs"
    return sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []


def build_parser():
    ap = argparse.ArgumentParser(prog="plmlab", description="Part-level multi-labeling experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report", help="RunConfig JSON")
        p.add_argument("--out", help="override the output location")
        p.add_argument("--quiet", action="store_true")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
        if name in ("eval", "report"):
            p.add_argument("runs", nargs="*", help="run directories (default: every run under output_dir)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else None
        if args.command == "prepare":
            cmd_prepare(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.variant, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.runs or _default_runs(cfg), args.out)
        else:
            runs = args.runs or (_default_runs(cfg) if cfg else [])
            if not runs:
                raise EvaluationError("no run directories given")
            out = args.out or (Path(cfg.output_dir) / "report" if cfg else None)
            if out is None:
                raise ConfigurationError("report needs --out or --config")
            cmd_report(runs, out)
    except (ConfigurationError, FormatError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingError as exc:
        log.error("training error in stage %s: %s", exc.stage, exc)
        return EXIT_TRAINING
    except (EvaluationError, ComparisonError) as exc:
        log.error("evaluation error: %s", exc)
        return EXIT_EVAL
    except PlmError as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.error("unexpected error: %s: %s", type(exc).__name__, exc)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
