"""Command-line entry point: ``train``, ``eval``, ``synth`` and ``gradcheck``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure (non-finite loss, or a failing gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import tensor as T
from .data import (
    MAGNIFICATIONS,
    SyntheticSpec,
    filter_magnification,
    generate_synthetic,
    load_arrays,
    normalize_magnification,
    scan_dataset,
    split,
)
from .errors import ConfigError, DataError, NumericalError
from .gradcheck import EPS, run_gradcheck, format_rows
from .metrics import compute_metrics, confusion, write_reports
from .multinet import ModelSpec, build_model, canonical_pairing
from .tensor import ShapeError, no_grad
from .train import (
    CheckpointError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    read_checkpoint,
    seed_streams,
    train,
)
from .vit import VIT_PRESETS

log = logging.getLogger("multinet_vit")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
PRECISIONS = {"f32": np.float32, "f64": np.float64}

TRAIN_DEFAULTS = {
    "model": "vit+multinet",
    "data": None,
    "layout": "breakhis-tree",
    "magnification": "all",
    "split": "0.7,0.15,0.15",
    "seed": 0,
    "lr": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "batch_size": 8,
    "epochs": 200,
    "loss_form": "categorical",
    "distill": "off",
    "out": "runs/latest",
    "image_size": 64,
    "precision": "f32",
    "vit_preset": "tiny",
    "cnn_preset": "reduced",
    "patch_size": 0,
    "dropout": 0.1,
    "teacher": "",
    "max_steps": 0,
}

EVAL_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "layout": "breakhis-tree",
    "model": "",
    "magnification": "all",
    "split_record": "",
    "subset": "test",
    "batch_size": 0,
    "loss_form": "",
    "out": "eval",
}


# ------------------------------------------------------------------ config
def load_config_file(path) -> dict:
    """Flat ``key = value`` TOML; keys may use dashes or underscores."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"config file {path} must be flat; found table [{key}]")
        out[key.replace("-", "_")] = value
    return out


def merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def parse_ratios(value) -> tuple:
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = str(value).replace("/", ",").replace(":", ",").split(",")
    try:
        ratios = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--split expects three numbers like 0.7,0.15,0.15, got {value!r}") from None
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"--split expects three non-negative numbers, got {value!r}")
    if abs(sum(ratios) - 100.0) < 1e-9:
        ratios = [r / 100.0 for r in ratios]
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {value!r}")
    return tuple(ratios)


def parse_magnification(value) -> str:
    token = str(value or "all")
    if token.lower() in ("all", "pooled"):
        return "all"
    try:
        return normalize_magnification(token)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def to_toml(cfg: dict) -> str:
    """Serialize a flat dict of str/int/float/bool/list values."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return json.dumps(str(v))

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items() if v is not None)


@dataclass
class RunConfig:
    """Resolved, validated settings for one ``train`` invocation."""

    model: ModelSpec
    train: TrainConfig
    data: Path
    layout: str
    magnification: str
    ratios: tuple
    out: Path
    precision: str
    teacher: Path | None
    max_steps: int | None
    raw: dict

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunConfig":
        if not cfg.get("data"):
            raise ConfigError("--data is required")
        if cfg["layout"] not in ("breakhis-tree", "manifest"):
            raise ConfigError(f"unknown layout {cfg['layout']!r}; expected breakhis-tree or manifest")
        if cfg["precision"] not in PRECISIONS:
            raise ConfigError(f"precision must be f32 or f64, got {cfg['precision']!r}")
        if cfg["vit_preset"] not in VIT_PRESETS:
            raise ConfigError(f"unknown ViT preset {cfg['vit_preset']!r}")
        if int(cfg["image_size"]) < 1:
            raise ConfigError("image size must be positive")
        try:
            train_cfg = TrainConfig(
                learning_rate=float(cfg["lr"]), beta1=float(cfg["beta1"]), beta2=float(cfg["beta2"]),
                batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]), seed=int(cfg["seed"]),
                loss_form=cfg["loss_form"], distillation=str(cfg["distill"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        spec = ModelSpec(
            pairing=canonical_pairing(cfg["model"]), image_size=int(cfg["image_size"]),
            vit_preset=cfg["vit_preset"], cnn_preset=cfg["cnn_preset"],
            patch_size=int(cfg["patch_size"]) or None, dropout=float(cfg["dropout"]),
        )
        teacher = Path(cfg["teacher"]).resolve() if cfg.get("teacher") else None
        if train_cfg.distill.kind != "off" and spec.pairing == "deit" and teacher is None:
            raise ConfigError("distillation for a standalone DeiT needs --teacher CHECKPOINT")
        if teacher is not None and not teacher.is_file():
            raise ConfigError(f"teacher checkpoint {teacher} not found")
        raw = dict(cfg)
        raw["model"] = spec.pairing
        raw["magnification"] = parse_magnification(cfg["magnification"])
        raw["data"] = str(Path(cfg["data"]).resolve())
        raw["out"] = str(Path(cfg["out"]).resolve())
        raw["teacher"] = str(teacher) if teacher else ""
        return cls(spec, train_cfg, Path(raw["data"]), cfg["layout"], raw["magnification"],
                   parse_ratios(cfg["split"]), Path(raw["out"]), cfg["precision"], teacher,
                   int(cfg["max_steps"]) or None, raw)


# --------------------------------------------------------------- helpers
def _scan(root: Path, layout: str, magnification: str) -> list:
    samples = scan_dataset(root, layout).samples
    return filter_magnification(samples, None if magnification == "all" else magnification)


def _model_from_checkpoint(path: Path):
    """Rebuild the architecture stored in a checkpoint header and load its weights."""
    ckpt = read_checkpoint(path)
    if not ckpt.model:
        raise CheckpointError(f"checkpoint {path} carries no model description")
    spec = ModelSpec(**ckpt.model)
    dtype = next(iter(ckpt.params().values())).dtype
    with T.default_dtype(dtype):
        model = build_model(spec, 0)
    load_checkpoint(path, model)
    return model, ckpt


def _teacher_fn(path: Path):
    teacher, _ = _model_from_checkpoint(path)
    teacher.eval()

    def logits(xb):
        with no_grad():
            out = teacher(T.Tensor(xb.data.astype(teacher.parameters()[0].dtype, copy=False)))
        return out["logits"].detach()

    return logits


# --------------------------------------------------------------- commands
def cmd_train(args) -> int:
    run = RunConfig.from_dict(merge_config(TRAIN_DEFAULTS, args))
    dtype = PRECISIONS[run.precision]
    init_rng, _, _ = seed_streams(run.train.seed)
    with T.default_dtype(dtype):
        model = build_model(run.model, init_rng)
    teacher = _teacher_fn(run.teacher) if run.teacher is not None else None
    log.info("model %s: %d parameters", run.model.pairing, model.num_parameters())
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "config.toml").write_text(to_toml(run.raw), encoding="utf-8")

    try:
        samples = _scan(run.data, run.layout, run.magnification)
        if not samples:
            raise DataError(f"no images found under {run.data} (magnification {run.magnification})")
        parts = split(samples, run.ratios, run.train.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    parts.save(run.out / "split.json")
    size = run.model.image_size
    train_x, train_y = load_arrays(parts.train, size, run.data)
    val_x, val_y = load_arrays(parts.val, size, run.data)
    test_x, test_y = load_arrays(parts.test, size, run.data)
    log.info("split: %d train, %d val, %d test", len(train_y), len(val_y), len(test_y))

    log_path = run.out / "train_log.jsonl"
    ckpt_path = run.out / "checkpoint.bin"
    t0 = time.perf_counter()
    result = train(model, train_x.astype(dtype), train_y, run.train, val_x.astype(dtype), val_y,
                   log_path=log_path, checkpoint_path=ckpt_path, teacher=teacher,
                   checkpoint_config=run.raw, max_steps=run.max_steps)
    log.info("trained %d epochs in %.1fs", result.epochs_run, time.perf_counter() - t0)

    model.load_state_dict(result.best_state)
    subset, x, y = next((n, x, y) for n, x, y in
                        (("test", test_x, test_y), ("val", val_x, val_y), ("train", train_x, train_y)) if len(y))
    ev = evaluate(model, x.astype(dtype), y, run.train.batch_size, run.train.loss_form)
    record = {"epoch": result.best_epoch, "step": sum(1 for r in result.records if r["split"] == "train"),
              "split": "test" if subset == "test" else "final", "subset": subset, "samples": int(len(y)),
              "loss": ev.loss, "accuracy": ev.accuracy, "macro_f1": ev.macro_f1}
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")
    metrics = compute_metrics(confusion(ev.labels, ev.predictions))
    write_reports(metrics, run.out, title=f"{run.model.pairing} on {subset} split ({len(y)} images)")
    print(f"{subset}: loss={ev.loss:.4f} accuracy={ev.accuracy:.4f} macro_f1={ev.macro_f1:.4f}  -> {run.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = merge_config(EVAL_DEFAULTS, args)
    if not cfg["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    if not cfg["data"]:
        raise ConfigError("--data is required")
    magnification = parse_magnification(cfg["magnification"])
    if cfg["subset"] not in ("train", "val", "test"):
        raise ConfigError(f"--subset must be train, val or test, got {cfg['subset']!r}")
    ckpt_path = Path(cfg["checkpoint"]).resolve()
    data_root = Path(cfg["data"]).resolve()
    out = Path(cfg["out"]).resolve()
    record_path = Path(cfg["split_record"]).resolve() if cfg["split_record"] else None
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint {ckpt_path} not found")

    ckpt = read_checkpoint(ckpt_path)
    if not ckpt.model:
        raise ConfigError(f"checkpoint {ckpt_path} carries no model description")
    spec = ModelSpec(**ckpt.model)
    if cfg["model"]:
        spec = ModelSpec(**{**spec.to_dict(), "pairing": canonical_pairing(cfg["model"])})
    dtype = next(iter(ckpt.params().values())).dtype
    with T.default_dtype(dtype):
        model = build_model(spec, 0)
    try:
        load_checkpoint(ckpt_path, model)
    except (CheckpointError, ShapeError) as exc:
        raise ConfigError(f"checkpoint does not match --model {spec.pairing}: {exc}") from None

    run_cfg = ckpt.config or {}
    batch_size = int(cfg["batch_size"]) or int(run_cfg.get("batch_size", 8))
    loss_form = cfg["loss_form"] or run_cfg.get("loss_form", "categorical")
    layout = cfg["layout"]
    try:
        samples = _scan(data_root, layout, "all")
        if record_path is not None:
            record = json.loads(record_path.read_text(encoding="utf-8"))
            wanted = set(record[cfg["subset"]])
            by_path = {s.path: s for s in samples}
            missing = sorted(wanted - set(by_path))
            if missing:
                raise DataError(f"{len(missing)} images of the split record are absent, e.g. {missing[0]}")
            samples = [s for s in samples if s.path in wanted]
            # keep the order the training run used
            order = {p: i for i, p in enumerate(record[cfg["subset"]])}
            samples.sort(key=lambda s: order[s.path])
        samples = filter_magnification(samples, None if magnification == "all" else magnification)
        if not samples:
            raise DataError(f"no images to evaluate under {data_root} (magnification {magnification})")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot use split record {record_path}: {exc}") from None
    x, y = load_arrays(samples, spec.image_size, data_root)
    ev = evaluate(model, x.astype(dtype), y, batch_size, loss_form)
    metrics = compute_metrics(confusion(ev.labels, ev.predictions))
    out.mkdir(parents=True, exist_ok=True)
    write_reports(metrics, out, title=f"{spec.pairing} on {len(y)} images (magnification {magnification})")
    summary = {"checkpoint": str(ckpt_path), "model": spec.pairing, "magnification": magnification,
               "samples": int(len(y)), "loss": ev.loss, "accuracy": ev.accuracy, "macro_f1": ev.macro_f1}
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"eval: {len(y)} images, loss={ev.loss:.4f} accuracy={ev.accuracy:.4f} macro_f1={ev.macro_f1:.4f}")
    return 0


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(images_per_class=args.images_per_class, resolution=args.resolution,
                             noise=args.noise, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    scan = generate_synthetic(spec, Path(args.out).resolve())
    print(f"wrote {len(scan)} images to {scan.root}")
    return 0


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    rows = run_gradcheck(seed=args.seed, max_entries=args.max_entries, eps=args.eps)
    print(format_rows(rows))
    print(f"{len(rows)} components in {time.perf_counter() - start:.1f}s")
    failed = [r.component for r in rows if not r.passed]
    if failed:
        print(f"error: gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multinet-vit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    # flags default to None so that config-file values survive unless overridden
    p = sub.add_parser("train", help="train a model and write checkpoint, log, split record and report")
    p.add_argument("--config", help="flat TOML file; flags override its values")
    p.add_argument("--model", help="branch or fused pair, e.g. vit, deit, multinet, vit+multinet")
    p.add_argument("--data", help="dataset root (or manifest CSV)")
    p.add_argument("--layout", choices=("breakhis-tree", "manifest"))
    p.add_argument("--magnification", help="all (pooled) or one of " + ", ".join(MAGNIFICATIONS))
    p.add_argument("--split", help="train,val,test ratios (default 0.7,0.15,0.15)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--batch-size", type=int, help="default 8")
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss-form", choices=("categorical", "eq3-literal"))
    p.add_argument("--distill", help="off, hard or soft[:T]")
    p.add_argument("--out", help="output directory")
    p.add_argument("--image-size", type=int, help="square input resolution (default 64)")
    p.add_argument("--precision", choices=tuple(PRECISIONS))
    p.add_argument("--vit-preset", choices=tuple(VIT_PRESETS))
    p.add_argument("--cnn-preset")
    p.add_argument("--patch-size", type=int, help="0 picks the preset default")
    p.add_argument("--dropout", type=float)
    p.add_argument("--teacher", help="checkpoint of a teacher model for standalone DeiT distillation")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (0 = no limit)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write confusion matrix and metrics")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--layout", choices=("breakhis-tree", "manifest"))
    p.add_argument("--model", help="expected architecture; defaults to the one stored in the checkpoint")
    p.add_argument("--magnification")
    p.add_argument("--split-record", help="split.json from a training run")
    p.add_argument("--subset", help="which list of the split record to evaluate (default test)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--loss-form", choices=("categorical", "eq3-literal"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic texture dataset in breakhis-tree layout")
    p.add_argument("--out", default="synth")
    p.add_argument("--images-per-class", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of every layer and model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=12, help="sampled entries per tensor")
    p.add_argument("--eps", type=float, default=EPS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
