"""Command-line entry point: ``apnea-cnn <verb> ...``.

Verbs: prepare, train, prune, binarize, finetune, eval, predict, cost.
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import costmodel, datapipe, model_zoo, sparsify, trainer
from .metrics import Metrics, fmt_pct, unweighted_mean
from .tensor_nn import InvariantError

log = logging.getLogger("apnea_cnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MODEL_FILE = "model.apnea"
PARTITIONS = ("train", "validation", "test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later lines override earlier ones."""
    values = {}
    for number, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_conv_blocks(text: str) -> tuple[model_zoo.ConvBlock, ...]:
    """``"3x100/2,50x10,30x30"``: filters x kernel length, optional ``/stride``."""
    blocks = []
    for item in text.split(","):
        try:
            shape, _, stride = item.strip().partition("/")
            filters, kernel = shape.split("x")
            blocks.append(model_zoo.ConvBlock(int(filters), int(kernel), stride=int(stride or 1)))
        except ValueError:
            raise UsageError(f"bad conv block {item!r}; expected FILTERSxKERNEL[/STRIDE]") from None
    return tuple(blocks)


def _layered(args, defaults: dict) -> dict:
    """Defaults, then the --config file, then explicit command-line flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes", "on"):
        return True
    if str(value).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {value!r}")


TRAIN_DEFAULTS = {
    "seed": 0,
    "epochs": 100,
    "batch_size": 128,
    "learning_rate": 1e-3,
    "dropout_p": None,
    "profile": "M1",
    "conv_blocks": None,
    "use_bias": None,
    "initial_sparsity": 0.5,
    "final_sparsity": 0.8,
    "ramp_epochs": 50,
    "bn_momentum": 0.99,
}


def _train_settings(args) -> dict:
    s = _layered(args, TRAIN_DEFAULTS)
    try:
        s["seed"] = int(s["seed"])
        s["epochs"] = int(s["epochs"])
        s["batch_size"] = int(s["batch_size"])
        s["learning_rate"] = float(s["learning_rate"])
        s["dropout_p"] = None if s["dropout_p"] in (None, "", "none") else float(s["dropout_p"])
        s["initial_sparsity"] = float(s["initial_sparsity"])
        s["final_sparsity"] = float(s["final_sparsity"])
        s["ramp_epochs"] = int(s["ramp_epochs"])
        s["bn_momentum"] = float(s["bn_momentum"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad numeric setting: {exc}") from None
    if s["use_bias"] is not None:
        s["use_bias"] = _as_bool(s["use_bias"])
    return s


def _architecture(settings: dict) -> model_zoo.ArchitectureConfig:
    if settings["profile"] not in model_zoo.PROFILES:
        raise UsageError(f"unknown profile {settings['profile']!r}; choose from {', '.join(model_zoo.PROFILES)}")
    config = model_zoo.PROFILES[settings["profile"]]
    if settings["conv_blocks"]:
        config = replace(config, conv_blocks=parse_conv_blocks(settings["conv_blocks"]), name="custom")
    if settings["use_bias"] is not None:
        config = replace(config, use_bias=settings["use_bias"])
    return config


def _train_config(settings: dict, mode: str) -> trainer.TrainConfig:
    schedule = None
    if mode == "pruned":
        schedule = sparsify.PruneSchedule(settings["initial_sparsity"], settings["final_sparsity"],
                                          settings["ramp_epochs"])
    return trainer.TrainConfig(
        learning_rate=settings["learning_rate"],
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        dropout_p=settings["dropout_p"],
        seed=settings["seed"],
        mode=mode,
        schedule=schedule,
        bn_momentum=settings["bn_momentum"],
    )


# ---------------------------------------------------------------------------
# Dataset artifacts
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def prepare_dataset(records_dir, out_dir, seed: int, split_mode: str = "pooled") -> dict:
    """Window every record, split 8:1:1, balance train/validation, and persist everything as .npy files."""
    records_dir, out_dir = Path(records_dir), Path(out_dir)
    if not records_dir.is_dir():
        raise DataError(f"{records_dir}: not a directory")
    files = datapipe.record_files(records_dir)
    if not files:
        raise DataError(f"{records_dir}: no records found")
    sets, errors, records = [], [], []
    for path in files:
        try:
            record = datapipe.load_record(path)
        except (datapipe.RecordFormatError, OSError) as exc:
            errors.append(f"{path.name}: {exc}")
            continue
        records.append({"file": path.name, "patient_id": record.patient_id, "seconds": record.seconds,
                        "flags": sorted(record.flags)})
        sets.append(datapipe.window_array(record))
    if errors:
        raise DataError("; ".join(errors))
    pooled = datapipe.WindowSet.concat(sets)
    if len(pooled) == 0:
        raise DataError("records yield no windows (each needs at least 11 s)")
    parts = datapipe.split_windows(pooled, seed, split_mode)
    split = datapipe.balance_split(*parts, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "windows.npy", pooled.x)
    np.save(out_dir / "labels.npy", pooled.y)
    np.save(out_dir / "patients.npy", pooled.patient_ids.astype(str))
    np.save(out_dir / "start_seconds.npy", pooled.start_seconds)
    for name, raw, balanced in zip(PARTITIONS, parts, (split.train, split.validation, split.test)):
        np.save(out_dir / f"{name}_raw.npy", raw.index)
        np.save(out_dir / f"{name}.npy", balanced.index)
    manifest = {
        "seed": seed,
        "split_mode": split_mode,
        "windows_pre_balance": len(pooled),
        "records": records,
        "partitions": {
            name: {"raw": raw.class_counts(), "balanced": bal.class_counts()}
            for name, raw, bal in zip(PARTITIONS, parts, (split.train, split.validation, split.test))
        },
    }
    _write_json(out_dir / "manifest.json", manifest)
    return manifest


class Dataset:
    """A prepared dataset directory."""

    def __init__(self, directory):
        self.dir = Path(directory)
        manifest = self.dir / "manifest.json"
        if not manifest.exists():
            raise DataError(f"{self.dir}: no manifest.json (run 'prepare' first)")
        self.manifest = json.loads(manifest.read_text())
        self.pooled = datapipe.WindowSet(
            np.load(self.dir / "windows.npy"),
            np.load(self.dir / "labels.npy"),
            np.load(self.dir / "patients.npy"),
            np.load(self.dir / "start_seconds.npy"),
            None,
        )
        self.pooled.index = np.arange(len(self.pooled))

    def partition(self, name: str, balanced: bool = True) -> datapipe.WindowSet:
        if name not in PARTITIONS:
            raise UsageError(f"unknown partition {name!r}")
        return self.pooled.take(np.load(self.dir / f"{name}{'' if balanced else '_raw'}.npy"))

    def split(self) -> datapipe.DatasetSplit:
        return datapipe.DatasetSplit(*(self.partition(p) for p in PARTITIONS), self.manifest["seed"])

    def patients(self) -> list[str]:
        return sorted(set(self.pooled.patient_ids.tolist()))

    def patient_split(self, patient_id: str) -> datapipe.DatasetSplit:
        """The pooled partitions restricted to one patient, train/validation rebalanced."""
        parts = [self.partition(p, balanced=False).for_patient(patient_id) for p in PARTITIONS]
        if not len(parts[0]):
            raise DataError(f"patient {patient_id!r} has no training windows")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", datapipe.DataWarning)
            return datapipe.balance_split(*parts, self.manifest["seed"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path) -> model_zoo.Model:
    path = Path(path)
    if path.is_dir():
        path = path / MODEL_FILE
    if not path.exists():
        raise UsageError(f"{path}: model file not found")
    return model_zoo.load_model(path)


def _summary(command: str, settings: dict, split: datapipe.DatasetSplit, model, history, out: Path) -> dict:
    test = trainer.evaluate(model, split.test) if len(split.test) else None
    summary = {
        "command": command,
        "settings": {k: v for k, v in settings.items()},
        "split_seed": split.split_seed,
        "model": model.config.to_dict(),
        "mode": model.mode,
        "best_epoch": history.best_epoch,
        "best_val_acc": history.val_acc[history.best_epoch],
        "notes": history.notes,
        "test": test.as_row() if test else None,
    }
    model_zoo.save_model(model, out / MODEL_FILE)
    (out / "history.csv").write_text(history.to_csv())
    _write_json(out / "summary.json", summary)
    return summary


def cmd_prepare(args) -> int:
    manifest = prepare_dataset(args.records_dir, _out_dir(args), args.seed, args.split_mode)
    print(f"{manifest['windows_pre_balance']} windows from {len(manifest['records'])} records")
    for name, counts in manifest["partitions"].items():
        print(f"  {name}: {counts['balanced']['non_apnea']} non-apnea / {counts['balanced']['apnea']} apnea")
    return EXIT_OK


def _run_training(args, command: str, mode: str, start: model_zoo.Model | None) -> int:
    settings = _train_settings(args)
    data = Dataset(args.data)
    if start is None:
        config = _architecture(settings)
        if mode == "binarized" and config.use_bias:
            raise UsageError("binarize needs use_bias=false (binarized models carry no biases)")
        start = model_zoo.build_model(config, np.random.default_rng([settings["seed"], 2]),
                                      "dense" if mode == "pruned" else mode)
    elif mode == "binarized" and start.config.use_bias:
        raise UsageError("binarize needs an input model without biases")
    try:
        config = _train_config(settings, mode)
    except model_zoo.ConfigError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    model, history = trainer.train(start, data.split(), config)
    summary = _summary(command, settings, data.split(), model, history, out)
    print(f"best epoch {summary['best_epoch']} val_acc {summary['best_val_acc']:.4f}; wrote {out / MODEL_FILE}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, "train", "dense", None)


def cmd_prune(args) -> int:
    return _run_training(args, "prune", "pruned", _load_model(args.model))


def cmd_binarize(args) -> int:
    start = _load_model(args.model) if args.model else None
    return _run_training(args, "binarize", "binarized", start)


def cmd_finetune(args) -> int:
    settings = _train_settings(args)
    data = Dataset(args.data)
    generic = _load_model(args.model)
    patients = args.patients.split(",") if args.patients else data.patients()
    missing = sorted(set(patients) - set(data.patients()))
    if missing:
        raise DataError(f"unknown patients: {', '.join(missing)}")
    out = _out_dir(args)
    try:
        config = _train_config(settings, "dense")
    except model_zoo.ConfigError as exc:
        raise UsageError(str(exc)) from None
    for pid in patients:
        split = data.patient_split(pid)
        model, history = trainer.derive_patient_model(generic, split, config)
        target = out / pid
        target.mkdir(exist_ok=True)
        summary = _summary("finetune", {**settings, "patient": pid}, split, model, history, target)
        print(f"{pid}: {model.config.name} best val_acc {summary['best_val_acc']:.4f}")
    return EXIT_OK


def metrics_rows(model, ws: datapipe.WindowSet, per_patient: bool) -> list[tuple[str, Metrics]]:
    rows = []
    if per_patient:
        for pid in sorted(set(ws.patient_ids.tolist())):
            rows.append((pid, trainer.evaluate(model, ws.for_patient(pid))))
    rows.append(("overall", trainer.evaluate(model, ws)))
    return rows


def format_metrics(rows: list[tuple[str, Metrics]], per_patient: bool) -> tuple[str, str]:
    """Text and CSV renderings; with per-patient rows an unweighted ``average`` row is appended."""
    header = ["patient", "tp", "fp", "tn", "fn", "accuracy", "sensitivity", "specificity", "flag"]
    table = []
    for name, m in rows:
        r = m.as_row()
        table.append([name, str(m.tp), str(m.fp), str(m.tn), str(m.fn), r["accuracy"], r["sensitivity"],
                      r["specificity"], "no_apnea" if m.flagged else ""])
    if per_patient:
        patients = [m for name, m in rows if name != "overall"]
        avg = [unweighted_mean(getattr(m, k) for m in patients) for k in ("accuracy", "sensitivity", "specificity")]
        table.append(["average", "", "", "", "", *(fmt_pct(v) for v in avg), ""])
    csv_text = "\n".join(",".join(row) for row in [header, *table]) + "\n"
    widths = [max(len(row[i]) for row in [header, *table]) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *table]) + "\n"
    return text, csv_text


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = Dataset(args.data)
    ws = data.partition(args.partition, balanced=False)
    if not len(ws):
        raise DataError(f"{args.partition} partition is empty")
    if args.patients:
        ws = datapipe.WindowSet.concat([ws.for_patient(p) for p in args.patients.split(",")])
    rows = metrics_rows(model, ws, args.per_patient)
    text, csv_text = format_metrics(rows, args.per_patient)
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        (out / "metrics.csv").write_text(csv_text)
        (out / "metrics.txt").write_text(text)
    return EXIT_OK


def predict_trace(model, record: datapipe.EcgRecord) -> list[tuple[int, int, float]]:
    """``(second, label, apnea probability)`` for every labelable second 1..S-10, in order."""
    if record.seconds < datapipe.WINDOW_SECONDS:
        raise DataError(f"{record.patient_id}: record of {record.seconds} s is shorter than one 11 s window")
    ws = datapipe.window_array(record)
    probs = model_zoo.predict_proba(model, ws.x)
    labels = model_zoo.predict_labels(probs)
    seconds = ws.start_seconds + datapipe.LABEL_OFFSET
    return [(int(s), int(lab), float(p)) for s, lab, p in zip(seconds, labels, probs[:, model_zoo.APNEA])]


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    try:
        record = datapipe.load_record(args.record)
    except (datapipe.RecordFormatError, OSError) as exc:
        raise DataError(str(exc)) from None
    trace = predict_trace(model, record)
    lines = [f"# patient {record.patient_id}; second 0 and the last 9 seconds have no prediction",
             "second,label,p_apnea"]
    lines += [f"{s},{lab},{p:.6f}" for s, lab, p in trace]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def _model_label(path: Path) -> str:
    if path.is_dir() or path.name == MODEL_FILE:
        return (path if path.is_dir() else path.parent).name
    return path.stem


def cmd_cost(args) -> int:
    energy = costmodel.EnergyModel(
        args.mac_energy if args.mac_energy is not None else costmodel.DEFAULT_ENERGY.mac_energy,
        args.add_energy if args.add_energy is not None else costmodel.DEFAULT_ENERGY.add_energy,
    )
    reports = []
    for path in args.models:
        model = _load_model(path)
        report = costmodel.count_ops(model, energy)
        reports.append(replace(report, name=model.metadata.get("label") or _model_label(Path(path))))
    text = costmodel.report_table(reports, args.format)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _training_flags(p: argparse.ArgumentParser, pruning: bool = False) -> None:
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--profile", help="architecture profile (M1, M3, M4)")
    p.add_argument("--conv-blocks", dest="conv_blocks", help="override conv blocks, e.g. 3x100/2,50x10,30x30")
    p.add_argument("--use-bias", dest="use_bias", choices=("true", "false"))
    p.add_argument("--bn-momentum", dest="bn_momentum", type=float, help="running-statistics momentum (default 0.99)")
    if pruning:
        p.add_argument("--initial-sparsity", dest="initial_sparsity", type=float)
        p.add_argument("--final-sparsity", dest="final_sparsity", type=float)
        p.add_argument("--ramp-epochs", dest="ramp_epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apnea-cnn", description="Per-second sleep apnea detection from single-lead ECG.")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key=value file; command-line flags take precedence")
    common.add_argument("--out")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="window records and write a split dataset")
    p.add_argument("records_dir")
    p.add_argument("--split-mode", choices=("pooled", "segments"), default="pooled")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a dense model")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", parents=[common], help="fine-tune a dense model under a sparsity schedule")
    p.add_argument("--model", required=True)
    _training_flags(p, pruning=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("binarize", parents=[common], help="train a sign-weight model")
    p.add_argument("--model", help="optional bias-free dense model to start from")
    _training_flags(p)
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("finetune", parents=[common], help="derive and retrain patient-specific models")
    p.add_argument("--model", required=True, help="generic dense model")
    p.add_argument("--patients", help="comma-separated patient ids (default: all)")
    _training_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="accuracy, sensitivity and specificity")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition", choices=PARTITIONS, default="test")
    p.add_argument("--patients", help="comma-separated patient ids to restrict to")
    p.add_argument("--per-patient", dest="per_patient", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="per-second predictions for one record")
    p.add_argument("--model", required=True)
    p.add_argument("--record", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cost", parents=[common], help="operation counts and energy per inference")
    p.add_argument("models", nargs="*")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--mac-energy", dest="mac_energy", type=float, help="joules per MAC")
    p.add_argument("--add-energy", dest="add_energy", type=float, help="joules per addition")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "prepare" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, datapipe.RecordFormatError, model_zoo.ModelFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except model_zoo.ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
