"""Command-line entry point.

Every subcommand resolves a flat JSON RunConfig (preset, then config file,
then flags), writes it to ``<out>/resolved.json`` and runs from that alone.
Errors print one JSON line on stderr and exit with a category code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    CLASS_NAMES,
    SPLEEN,
    DataError,
    DatasetConfig,
    build_dataset,
    labels_to_png_array,
    load_dataset,
    save_dataset,
    save_png,
    to_png_array,
)
from .evaluation import METHODS, build_report, dice_multiclass, emit_report, montage, montage_rows, run_comparison
from .gradcheck import grad_check
from .losses import GAN_MODES, LossWeights
from .networks import ArchitectureError, DiscriminatorConfig, GeneratorConfig
from .trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    load_checkpoint,
    segment_many,
    train,
    train_two_stage,
    translate,
)

log = logging.getLogger("essnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

CLI_MODES = ("essnet", "two_stage", "seg_only")
SPLITS = ("A_train", "A_val", "B_train", "B_val", "B_test")

# key -> type; every key must be present after preset resolution
SCHEMA = {
    "preset": str,
    "out": str,
    "seed": int,
    # data
    "height": int,
    "width": int,
    "n_a_train": int,
    "n_a_val": int,
    "n_b_train": int,
    "n_b_val": int,
    "n_b_test": int,
    "spleen_scale_min": float,
    "spleen_scale_max": float,
    "data_dir": (str, type(None)),
    # networks
    "gen_width": int,
    "gen_blocks": int,
    "disc_width": int,
    "disc_down": int,
    # trainer
    "mode": str,
    "epochs": int,
    "batch_size": int,
    "lr_g": float,
    "lr_d": float,
    "beta1": float,
    "beta2": float,
    "lambda_gan_g1": float,
    "lambda_gan_g2": float,
    "lambda_cycle_a": float,
    "lambda_cycle_b": float,
    "lambda_seg": float,
    "pool_size": int,
    "gan_mode": str,
    "seg_reduction": str,
    "seg_source": str,
    "paper_protocol": bool,
    "keep_checkpoints": str,
    # inference and evaluation
    "checkpoint": (str, type(None)),
    "split": (str, type(None)),
    "methods": list,
    "n_synth": int,
    # gradient audit
    "gc_samples": int,
    "gc_h": float,
    "gc_tol": float,
}

_COMMON = {
    "out": "out", "seed": 0, "n_a_train": 60, "n_a_val": 10, "n_b_train": 60, "n_b_val": 10, "n_b_test": 19,
    "spleen_scale_min": 1.0, "spleen_scale_max": 1.8, "data_dir": None, "mode": "essnet", "batch_size": 1,
    "lr_g": 1e-4, "lr_d": 2e-4, "beta1": 0.5, "beta2": 0.999, "lambda_gan_g1": 1.0, "lambda_gan_g2": 1.0,
    "lambda_cycle_a": 10.0, "lambda_cycle_b": 10.0, "lambda_seg": 1.0, "pool_size": 50,
    "gan_mode": "nonsaturating", "seg_reduction": "mean", "seg_source": "A", "paper_protocol": False,
    "keep_checkpoints": "best_last", "checkpoint": None, "split": None, "methods": list(METHODS), "n_synth": 3,
    "gc_samples": 200, "gc_h": 1e-3, "gc_tol": 1e-3, "disc_down": 3,
}

PRESETS = {
    "desk": {**_COMMON, "preset": "desk", "height": 64, "width": 64, "gen_width": 16, "gen_blocks": 3,
             "disc_width": 16, "epochs": 30},
    "paper-parity": {**_COMMON, "preset": "paper-parity", "height": 256, "width": 256, "gen_width": 64,
                     "gen_blocks": 9, "disc_width": 64, "epochs": 100},
}

# flag name -> config key, for the per-λ and per-rate overrides
OVERRIDE_FLAGS = {
    "lambda_gan_g1": float, "lambda_gan_g2": float, "lambda_cycle_a": float, "lambda_cycle_b": float,
    "lambda_seg": float, "lr_g": float, "lr_d": float,
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _check_type(key: str, value, expected) -> object:
    types = expected if isinstance(expected, tuple) else (expected,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"expected {types[0].__name__}, got bool", key)
    if not isinstance(value, types):
        raise ConfigError(f"expected {types[0].__name__}, got {type(value).__name__}", key)
    if expected is list and not all(isinstance(v, str) for v in value):
        raise ConfigError("expected a list of strings", key)
    return value


def parse_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Resolve preset defaults, then file values, then ``overrides``.

    The file's own ``preset`` key selects the preset unless ``preset`` is
    given explicitly.  Unknown keys and type mismatches raise
    :class:`ConfigError` naming the key.
    """
    file_values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror}", "config") from exc
        try:
            file_values = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}", "config") from exc
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object", "config")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for source in (file_values, overrides):
        for key in source:
            if key not in SCHEMA:
                raise ConfigError("unknown key", key)
    name = preset or overrides.get("preset") or file_values.get("preset") or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", "preset")
    resolved = dict(PRESETS[name])
    resolved.update(file_values)
    resolved.update(overrides)
    resolved["preset"] = name
    for key, expected in SCHEMA.items():
        if key not in resolved:
            raise ConfigError("missing required field", key)
        resolved[key] = _check_type(key, resolved[key], expected)
    _validate(resolved)
    return resolved


def _validate(cfg: dict) -> None:
    if cfg["mode"] not in CLI_MODES:
        raise ConfigError(f"must be one of {', '.join(CLI_MODES)}", "mode")
    if cfg["gan_mode"] not in GAN_MODES:
        raise ConfigError(f"must be one of {', '.join(GAN_MODES)}", "gan_mode")
    if cfg["split"] is not None and cfg["split"] not in SPLITS:
        raise ConfigError(f"must be one of {', '.join(SPLITS)}", "split")
    for m in cfg["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", "methods")
    if cfg["spleen_scale_min"] > cfg["spleen_scale_max"] or cfg["spleen_scale_min"] < 1.0:
        raise ConfigError("need 1 <= spleen_scale_min <= spleen_scale_max", "spleen_scale_min")
    for key in ("lambda_gan_g1", "lambda_gan_g2", "lambda_cycle_a", "lambda_cycle_b", "lambda_seg"):
        if cfg[key] < 0:
            raise ConfigError("weights must be >= 0", key)


def dataset_config(cfg: dict) -> DatasetConfig:
    return DatasetConfig(height=cfg["height"], width=cfg["width"], n_a_train=cfg["n_a_train"],
                         n_a_val=cfg["n_a_val"], n_b_train=cfg["n_b_train"], n_b_val=cfg["n_b_val"],
                         n_b_test=cfg["n_b_test"], seed=cfg["seed"],
                         spleen_scale=(cfg["spleen_scale_min"], cfg["spleen_scale_max"]))


def train_config(cfg: dict) -> TrainConfig:
    mode = "essnet" if cfg["mode"] == "two_stage" else cfg["mode"]
    try:
        return TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_g=cfg["lr_g"], lr_d=cfg["lr_d"],
            beta1=cfg["beta1"], beta2=cfg["beta2"],
            weights=LossWeights(cfg["lambda_gan_g1"], cfg["lambda_gan_g2"], cfg["lambda_cycle_a"],
                                cfg["lambda_cycle_b"], cfg["lambda_seg"]),
            pool_size=cfg["pool_size"], gan_mode=cfg["gan_mode"], seg_reduction=cfg["seg_reduction"],
            seed=cfg["seed"], mode=mode,
            generator=GeneratorConfig(cfg["gen_width"], cfg["gen_blocks"]),
            discriminator=DiscriminatorConfig(cfg["disc_width"], cfg["disc_down"]),
            seg_source=cfg["seg_source"], paper_protocol=cfg["paper_protocol"],
            keep_checkpoints=cfg["keep_checkpoints"],
        )
    except (ValueError, ArchitectureError) as exc:
        raise ConfigError(str(exc), "trainer") from exc


def _bundle(cfg: dict):
    if cfg["data_dir"] is not None:
        return load_dataset(cfg["data_dir"])
    return build_dataset(dataset_config(cfg))


def _split(bundle, name: str):
    return getattr(bundle, name)


def _checkpoint(cfg: dict):
    if cfg["checkpoint"] is None:
        raise ConfigError("this command needs a checkpoint", "checkpoint")
    return load_checkpoint(cfg["checkpoint"])


def _labeled_split(bundle, name: str):
    split = _split(bundle, name)
    if name == "B_train":
        raise ConfigError("B_train labels are sequestered", "split")
    return split


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: dict, out: Path) -> dict:
    bundle = build_dataset(dataset_config(cfg))
    path = save_dataset(bundle, out / "data")
    return {"data_dir": str(path), "counts": dataset_config(cfg).counts()}


def cmd_train(cfg: dict, out: Path) -> dict:
    bundle = _bundle(cfg)
    tcfg = train_config(cfg)
    if cfg["mode"] == "two_stage":
        _, run = train_two_stage(tcfg, bundle, out)
    elif cfg["mode"] == "seg_only" and cfg["seg_source"] == "B":
        from .evaluation import oracle_split

        run = train(tcfg, bundle, out, oracle_split=oracle_split(bundle))
    else:
        run = train(tcfg, bundle, out)
    return {"epochs": len(run.records), "best_checkpoint": str(run.best_checkpoint),
            "last_checkpoint": str(run.last_checkpoint),
            "b_train_label_reads": bundle.B_train.labels.access_count}


def cmd_translate(cfg: dict, out: Path) -> dict:
    bundle, ckpt = _bundle(cfg), _checkpoint(cfg)
    name = cfg["split"] or "A_val"
    role = "G1" if name.startswith("A") else "G2"
    G = ckpt.network(role)
    target = out / "translated"
    target.mkdir(parents=True, exist_ok=True)
    for item in _split(bundle, name).items:
        img = translate(G, item.image)
        img.pixels.astype("<f4").tofile(target / f"{item.item_id}.f32")
        save_png(to_png_array(img.pixels), target / f"{item.item_id}.png")
    return {"split": name, "generator": role, "count": len(_split(bundle, name))}


def cmd_segment(cfg: dict, out: Path) -> dict:
    bundle, ckpt = _bundle(cfg), _checkpoint(cfg)
    name = cfg["split"] or "B_test"
    split = _split(bundle, name)
    target = out / "segmented"
    target.mkdir(parents=True, exist_ok=True)
    labels = segment_many(ckpt.network("S"), split.images)
    for item, lab in zip(split.items, labels):
        lab.ids.astype(np.uint8).tofile(target / f"{item.item_id}.u8")
        save_png(labels_to_png_array(lab.ids), target / f"{item.item_id}.png")
    return {"split": name, "count": len(labels)}


def cmd_evaluate(cfg: dict, out: Path) -> dict:
    bundle, ckpt = _bundle(cfg), _checkpoint(cfg)
    name = cfg["split"] or "B_test"
    split = _labeled_split(bundle, name)
    preds = segment_many(ckpt.network("S"), split.images)
    rows = [dice_multiclass(p, r, range(len(CLASS_NAMES)), it.item_id)
            for p, r, it in zip(preds, split.labels, split.items)]
    with (out / "dice.csv").open("w") as fh:
        fh.write("image_id,class_id,dice\n")
        for it, row in zip(split.items, rows):
            for c in range(len(CLASS_NAMES)):
                fh.write(f"{it.item_id},{c},{row.per_class[c]!r}\n")
    spleen = [row.per_class[SPLEEN] for row in rows]
    return {"split": name, "spleen_median": float(np.median(spleen)), "spleen_mean": float(np.mean(spleen)),
            "mean_foreground": float(np.mean([row.mean_foreground for row in rows]))}


def cmd_compare(cfg: dict, out: Path) -> dict:
    bundle = _bundle(cfg)
    report = run_comparison(bundle, replace(train_config(cfg), mode="essnet"), out / "runs",
                            methods=tuple(cfg["methods"]), n_synth=cfg["n_synth"])
    emit_report(report, out / "report")
    return {"medians": report.medians, "means": report.means(), "best_epochs": report.best_epochs}


def cmd_grad_check(cfg: dict, out: Path) -> dict:
    res = grad_check(seed=cfg["seed"], samples=cfg["gc_samples"], h=cfg["gc_h"], tol=cfg["gc_tol"])
    summary = {"fraction_within": res.fraction_within, "max_rel_error": res.max_rel_error,
               "median_rel_error": res.median_rel_error, "samples": cfg["gc_samples"], "h": cfg["gc_h"],
               "tol": cfg["gc_tol"], "pass": res.fraction_within >= 0.95}
    (out / "gradcheck.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_montage(cfg: dict, out: Path) -> dict:
    bundle, ckpt = _bundle(cfg), _checkpoint(cfg)
    name = cfg["split"] or "B_test"
    split = _labeled_split(bundle, name)
    report = build_report(split, {"model": segment_many(ckpt.network("S"), split.images)})
    if "G1" in ckpt.arch:
        G1 = ckpt.network("G1")
        report.synthesized["model"] = [translate(G1, im) for im in bundle.A_val.images[:cfg["n_synth"]]]
    path = out / "montage.png"
    save_png(montage(montage_rows(report, "model")), path)
    return {"montage": str(path), "spleen_median": report.medians["model"]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
    "montage": cmd_montage,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="essnet", description="Unpaired cross-modality synthesis and segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON RunConfig")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--epochs", type=int)
        p.add_argument("--mode", choices=CLI_MODES)
        p.add_argument("--data", dest="data_dir", help="dataset directory written by gen-data")
        p.add_argument("--checkpoint")
        p.add_argument("--split", choices=SPLITS)
        for key, typ in OVERRIDE_FLAGS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, kind: str, message: str, key: str | None = None) -> int:
    payload = {"error": kind, "exit": code, "message": message}
    if key is not None:
        payload["key"] = key
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "out", "epochs", "mode", "data_dir", "checkpoint", "split")}
    overrides.update({k: getattr(args, k) for k in OVERRIDE_FLAGS})
    try:
        cfg = parse_config(args.config, args.preset, overrides)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        result = COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.key)
    except ArchitectureError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), "architecture")
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (OSError, CheckpointError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
