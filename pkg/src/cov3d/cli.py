"""Command-line interface.

Subcommands: synth, preprocess, train, predict, evaluate. Every invocation
writes a run manifest (command, resolved config, paths, seed, timestamps,
exit status), outputs are written atomically, and all randomness flows from a
single --seed flag; when the flag is omitted a seed is drawn and recorded in
the manifest.

Exit codes: 0 success, 1 validation error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, inference, metrics, trainer
from .errors import ConfigError, Cov3dError, DataError
from .network import NetworkConfig, build_network, load_checkpoint
from .objectives import ClassWeights, LossConfig, SmoothingParams
from .resampler import preset_by_name, preprocess_volume
from .trainer import TrainConfig, fit

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


# key -> (parser, default); mirrors TrainConfig / LossConfig / NetworkConfig
CONFIG_SCHEMA = {
    "epochs": (int, 30),
    "batch_size": (int, 2),
    "max_lr": (float, 1e-4),
    "weight_decay": (float, 1e-5),
    "preset": (str, "small"),
    "reflection_augment": (_parse_bool, True),
    "seed": (int, None),
    "lambda": (float, 0.5),
    "eps_p": (float, 0.0),
    "eps_s": (float, 0.0),
    "class_weighting": (_parse_bool, True),
    "stage_widths": (_parse_int_tuple, (64, 128, 256, 512)),
    "blocks_per_stage": (_parse_int_tuple, (2, 2, 2, 2)),
    "stage_dropout": (_parse_float_tuple, (0.1, 0.1, 0.1, 0.1)),
    "head_hidden": (int, 128),
    "head_dropout": (float, 0.5),
    "head_mode": (str, "dual"),
}


def read_config_file(path: Path) -> dict[str, str]:
    """Flat key/value config: one `key = value` per line, # comments."""
    raw: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"i/o error: cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config {path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_settings(file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Merge defaults, config-file values, and CLI overrides; parse and
    collect problems field by field."""
    merged = dict(file_values)
    merged.update(overrides)
    settings = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    problems = []
    for key, text in merged.items():
        if key not in CONFIG_SCHEMA:
            problems.append(f"{key}: unknown config key")
            continue
        parser, _ = CONFIG_SCHEMA[key]
        try:
            settings[key] = parser(text)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return settings


def _pick_seed(explicit: int | None) -> tuple[int, bool]:
    if explicit is not None:
        return int(explicit), True
    return int.from_bytes(os.urandom(8), "little"), False


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


class RunManifest:
    def __init__(self, command: str, path: Path):
        self.path = path
        self.data = {
            "command": command,
            "config": {},
            "inputs": {},
            "outputs": {},
            "seed": None,
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "finished": None,
            "exit_status": None,
        }

    def finalize(self, exit_status: int) -> None:
        self.data["finished"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.data["exit_status"] = exit_status
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n")
        except OSError:
            print(f"warning: could not write run manifest {self.path}", file=sys.stderr)


def cmd_synth(args, manifest: RunManifest) -> int:
    seed, given = _pick_seed(args.seed)
    spec = dataio.SyntheticSpec(
        n_scans_per_class=args.n_per_class, seed=seed, n_test_scans=args.n_test
    )
    manifest.data["seed"] = seed
    manifest.data["config"] = {
        "n_scans_per_class": args.n_per_class, "n_test_scans": args.n_test,
        "seed_given": given,
    }
    manifest.data["outputs"]["dataset_root"] = str(args.out)
    annotations = dataio.generate_synthetic_dataset(spec, args.out)
    counts = annotations.counts
    print(f"wrote {len(annotations)} scans under {args.out}")
    for part in dataio.PARTITIONS:
        tally = counts[part]
        print(f"  {part}: {tally['positive']} positive, {tally['negative']} negative, "
              f"{tally['unlabeled']} unlabeled")
    return EXIT_OK


def cmd_preprocess(args, manifest: RunManifest) -> int:
    preset = preset_by_name(args.preset)
    root = Path(args.dataset_root)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest.data["config"] = {"preset": preset.name, "force": args.force}
    manifest.data["inputs"]["dataset_root"] = str(root)
    manifest.data["outputs"]["volumes_dir"] = str(out_dir)

    annotations = dataio.scan_dataset(root)
    written = skipped = failed = 0
    for record in annotations.records:
        target = out_dir / f"{record.scan_id}{dataio.VOLUME_SUFFIX}"
        if target.is_file() and not args.force:
            try:
                if dataio.read_volume_header(target) == preset.dims:
                    skipped += 1
                    continue
            except DataError:
                pass  # malformed existing file, rewrite it
        try:
            raw = dataio.load_slice_stack(dataio.scan_directory(root, record))
            volume = preprocess_volume(raw, preset)
            dataio.write_volume_file(volume, target)
            written += 1
        except Cov3dError as exc:
            print(f"error: scan {record.scan_id}: {exc}", file=sys.stderr)
            failed += 1
    print(f"preprocessed {written} scans, skipped {skipped}, failed {failed}")
    manifest.data["outputs"]["written"] = written
    manifest.data["outputs"]["skipped"] = skipped
    manifest.data["outputs"]["failed"] = failed
    return EXIT_DATA if failed else EXIT_OK


def _settings_from_args(args) -> dict:
    file_values = read_config_file(Path(args.config)) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return resolve_settings(file_values, overrides)


def cmd_train(args, manifest: RunManifest) -> int:
    settings = _settings_from_args(args)
    seed, _ = _pick_seed(settings["seed"])
    settings["seed"] = seed
    manifest.data["seed"] = seed
    manifest.data["config"] = {k: list(v) if isinstance(v, tuple) else v
                               for k, v in settings.items()}
    manifest.data["inputs"] = {"dataset_root": str(args.dataset_root),
                               "volumes_dir": str(args.volumes)}
    manifest.data["outputs"]["out_dir"] = str(args.out)

    preset = preset_by_name(settings["preset"])
    annotations = dataio.scan_dataset(args.dataset_root)
    weights = None
    if settings["class_weighting"]:
        weights = ClassWeights.from_annotations(annotations, "train")
    loss_cfg = LossConfig(
        lam=settings["lambda"],
        smoothing=SmoothingParams(eps_p=settings["eps_p"], eps_s=settings["eps_s"]),
        class_weights=weights,
    )
    train_cfg = TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        max_lr=settings["max_lr"],
        weight_decay=settings["weight_decay"],
        loss=loss_cfg,
        preset=preset,
        reflection_augment=settings["reflection_augment"],
        seed=seed,
    )
    # the head layout follows the loss: a head the loss never reaches would
    # stay at its initialization
    head_mode = settings["head_mode"]
    if head_mode == "dual" and settings["lambda"] == 1.0:
        head_mode = "severity_only"
    elif head_mode == "dual" and settings["lambda"] == 0.0:
        head_mode = "covid_only"
    network_cfg = NetworkConfig(
        input_dims=preset.dims,
        stage_widths=settings["stage_widths"],
        blocks_per_stage=settings["blocks_per_stage"],
        stage_dropout=settings["stage_dropout"],
        head_hidden=settings["head_hidden"],
        head_dropout=settings["head_dropout"],
        head_mode=head_mode,
    )
    network = build_network(network_cfg, seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo_lines = [f"{key} = {','.join(str(x) for x in value) if isinstance(value, tuple) else value}"
                  for key, value in sorted(settings.items())]
    _atomic_write_text(out_dir / "config_echo.cfg", "\n".join(echo_lines) + "\n")

    history, checkpoints = fit(network, annotations, args.volumes, train_cfg, out_dir=out_dir)
    best1 = max(r.f1_task1 for r in history.records)
    print(f"best task 1 macro F1: {best1:.6f}")
    task2_scores = [r.f1_task2 for r in history.records if r.f1_task2 is not None]
    if task2_scores:
        print(f"best task 2 macro F1: {max(task2_scores):.6f}")
    manifest.data["outputs"]["checkpoints"] = {k: str(v) for k, v in checkpoints.items()}
    manifest.data["outputs"]["history"] = str(out_dir / trainer.HISTORY_FILENAME)
    return EXIT_OK


def cmd_predict(args, manifest: RunManifest) -> int:
    manifest.data["inputs"] = {"checkpoints": [str(c) for c in args.checkpoints],
                               "volumes_dir": str(args.volumes)}
    manifest.data["config"] = {"tta": args.tta}
    manifest.data["outputs"]["predictions"] = str(args.out)

    networks = []
    input_dims = None
    for path in args.checkpoints:
        network, meta = load_checkpoint(path)
        if input_dims is None:
            input_dims = tuple(meta.config.input_dims)
        elif tuple(meta.config.input_dims) != input_dims:
            raise ConfigError(
                "configuration error: checkpoints disagree on input dims "
                f"({input_dims} vs {tuple(meta.config.input_dims)})"
            )
        networks.append(network)

    volume_paths = sorted(Path(args.volumes).glob(f"*{dataio.VOLUME_SUFFIX}"))
    if not volume_paths:
        raise DataError(f"structural error: no volume files in {args.volumes}")
    predictions = []
    for path in volume_paths:
        volume = dataio.read_volume_file(path)
        if volume.dims != input_dims:
            raise ConfigError(
                f"configuration error: volume {path.name} has dims {volume.dims} but the "
                f"checkpoint expects {input_dims} (preset mismatch)"
            )
        members = [inference.predict_volume(net, volume, tta=args.tta) for net in networks]
        predictions.append(members[0] if len(members) == 1 else inference.ensemble(members))
    inference.write_predictions(predictions, args.out)
    if len(networks) > 1:
        members_path = Path(str(args.out) + ".members.txt")
        _atomic_write_text(members_path, "\n".join(str(c) for c in args.checkpoints) + "\n")
        manifest.data["outputs"]["ensemble_members"] = str(members_path)
    print(f"wrote {len(predictions)} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args, manifest: RunManifest) -> int:
    manifest.data["inputs"] = {"predictions": str(args.predictions),
                               "dataset_root": str(args.dataset_root)}
    manifest.data["config"] = {"task": args.task}
    predictions = inference.read_predictions(args.predictions)
    annotations = dataio.scan_dataset(args.dataset_root)
    if args.task == 1:
        mapping = {p.scan_id: p.covid_label for p in predictions}
        report = metrics.evaluate_presence(annotations, mapping)
    else:
        mapping = {p.scan_id: p.severity_label for p in predictions
                   if p.severity_label is not None}
        report = metrics.evaluate_task2(annotations, mapping)
    print(report.to_text())
    if args.report_out:
        report.write_kv(args.report_out)
        manifest.data["outputs"]["report"] = str(args.report_out)
    manifest.data["outputs"]["macro_f1"] = report.macro_f1
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise ConfigError(f"usage error: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="cov3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")

    p = sub.add_parser("preprocess", help="resample scans into volume files")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("small", "medium", "large"), default="small")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--volumes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--preset", choices=("small", "medium", "large"))
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")

    p = sub.add_parser("predict", help="predict scans with one model or an ensemble")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--volumes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")

    p = sub.add_parser("evaluate", help="score a prediction table")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset-root", required=True)
    p.add_argument("--task", type=int, choices=(1, 2), required=True)
    p.add_argument("--report-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--manifest")

    return parser


def _default_manifest_path(args) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if args.command in ("synth", "preprocess", "train"):
        return Path(args.out) / "run_manifest.json"
    if args.command == "predict":
        return Path(str(args.out) + ".manifest.json")
    return Path(str(args.predictions) + ".eval_manifest.json")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    manifest = RunManifest(args.command, _default_manifest_path(args))
    if getattr(args, "seed", None) is not None:
        manifest.data["seed"] = args.seed
    status = EXIT_INTERNAL
    try:
        status = COMMANDS[args.command](args, manifest)
        return status
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_VALIDATION
        return status
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_DATA
        return status
    except Cov3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_INTERNAL
        return status
    finally:
        manifest.finalize(status)


if __name__ == "__main__":
    sys.exit(main())
