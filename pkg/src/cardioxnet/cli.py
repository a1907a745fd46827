"""``cardioxnet`` command line: synth, train, cv, eval, predict, bench.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 data, 4 model/data class mismatch,
5 numerical failure, 6 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import config as kv
from .errors import (ClassMismatchError, ConfigError, DataError, ModelFormatError,
                     NumericalError)
from .layers import INFER
from .model import ModelConfig, build_model, count_flops, count_params, load_model, save_model
from .signal import (CLASSES, decode_wav, encode_wav,
                     load_dataset, preprocess, synth_pcg, write_wav)
from .training import (TrainConfig, confusion_to_csv, cross_validate, cv_to_csv, evaluate,
                       history_to_csv, metrics_to_csv, split_dataset, train)

logger = logging.getLogger("cardioxnet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_MISMATCH, EXIT_NUMERIC, EXIT_INTERNAL = range(7)

RUN_KEYS = ("preset",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# run configuration

@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig


def resolve_run_config(config_file: str | None, preset: str | None, overrides: list[str],
                       flag_train: dict) -> RunConfig:
    """File values, then ``--set`` overrides, then dedicated flags.

    Keys may belong to the model or the training config; ``preset`` picks the
    base model config. Unknown keys are errors.
    """
    items: dict[str, str] = {}
    if config_file:
        path = Path(config_file)
        items.update(kv.parse_kv_text(path.read_text(encoding="utf-8"), str(path)))
    for text in overrides:
        items.update(kv.parse_kv_text(text, "--set"))
    if preset:
        items["preset"] = preset
    model_keys = set(kv.field_kinds(ModelConfig))
    train_keys = set(kv.field_kinds(TrainConfig))
    unknown = sorted(set(items) - model_keys - train_keys - set(RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    base = ModelConfig.preset(items.get("preset", "default"))
    model = ModelConfig.from_kv({k: v for k, v in items.items() if k in model_keys}, base)
    tcfg = TrainConfig.from_kv({k: v for k, v in items.items() if k in train_keys})
    tcfg = dataclasses.replace(tcfg, **{k: v for k, v in flag_train.items() if v is not None})
    return RunConfig(model.validate(), tcfg.validate())


def _fit_classes(cfg: ModelConfig, names: list[str]) -> ModelConfig:
    return dataclasses.replace(cfg, num_classes=len(names), class_names=tuple(names))


def _class_names(cfg: ModelConfig) -> list[str]:
    if cfg.class_names:
        return list(cfg.class_names)
    if cfg.num_classes == len(CLASSES):
        return list(CLASSES)
    return [f"class{i}" for i in range(cfg.num_classes)]


def _check_classes(model_cfg: ModelConfig, names: list[str]) -> None:
    if model_cfg.num_classes != len(names):
        raise ClassMismatchError(f"model predicts {model_cfg.num_classes} classes, data has "
                                 f"{len(names)} ({', '.join(names)})")
    if model_cfg.class_names and list(model_cfg.class_names) != list(names):
        raise ClassMismatchError(f"model classes {list(model_cfg.class_names)} differ from data "
                                 f"classes {names}")


def _load_for(cfg: ModelConfig, data: str):
    duration = cfg.input_len / cfg.sample_rate
    return load_dataset(data, rate=cfg.sample_rate, duration=duration)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    out = Path(args.out)
    for name in CLASSES:
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(args.per_class):
            write_wav(d / f"{name}_{i}.wav", synth_pcg(name, args.seed * 100_003 + i,
                                                        args.rate, args.duration))
    print(f"wrote {args.per_class * len(CLASSES)} files to {out}")
    return EXIT_OK


def _train_flags(args) -> dict:
    return {"learning_rate": args.lr, "epochs": args.epochs, "batch_size": args.batch_size,
            "patience": args.patience, "seed": args.seed}


def cmd_train(args) -> int:
    run = resolve_run_config(args.config, args.preset, args.set, _train_flags(args))
    ds = _load_for(run.model, args.data)
    cfg = _fit_classes(run.model, ds.class_names)
    tr, va, te = split_dataset(ds, (0.7, 0.1, 0.2), run.train.seed)
    model, history = train(build_model(cfg, run.train.seed), tr, va, run.train,
                           log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    size = save_model(model, out)
    hist_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    hist_path.write_text(history_to_csv(history), encoding="utf-8")
    report = evaluate(model, te)
    print(f"trained {len(history)} epochs; model {out} ({size} bytes); history {hist_path}")
    print(f"held-out test: {report.summary()}")
    return EXIT_OK


def cmd_cv(args) -> int:
    run = resolve_run_config(args.config, args.preset, args.set, _train_flags(args))
    ds = _load_for(run.model, args.data)
    cfg = _fit_classes(run.model, ds.class_names)
    result = cross_validate(ds, cfg, run.train, k=args.folds)
    text = cv_to_csv(result)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = _load_for(model.config, args.data)
    _check_classes(model.config, ds.class_names)
    report = evaluate(model, ds)
    if args.out:
        out = Path(args.out)
        out.write_text(metrics_to_csv(report), encoding="utf-8")
        out.with_suffix(".confusion.csv").write_text(confusion_to_csv(report), encoding="utf-8")
    print(report.summary())
    return EXIT_OK


def _clip_input(model, wav_bytes: bytes, source: str) -> np.ndarray:
    cfg = model.config
    clip = preprocess(decode_wav(wav_bytes, source), cfg.sample_rate, cfg.input_len / cfg.sample_rate)
    return clip.samples[None, :]


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if args.classes is not None and args.classes != model.config.num_classes:
        raise ClassMismatchError(f"requested {args.classes} classes, model predicts "
                                 f"{model.config.num_classes}")
    path = Path(args.wav)
    probs = model.forward(_clip_input(model, path.read_bytes(), str(path)), INFER)[0]
    names = _class_names(model.config)
    top = int(np.argmax(probs))
    print(names[top])
    for name, p in zip(names, probs):
        print(f"{name}\t{float(p)!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 2:
        raise UsageError("--repeats must be >= 2 to report a standard deviation")
    path = Path(args.model)
    size = path.stat().st_size
    model = load_model(path)
    if args.wav:
        wav = Path(args.wav).read_bytes()
    else:
        wav = encode_wav(synth_pcg("N", 0, 8000, max(3.0, model.config.input_len / model.config.sample_rate + 0.5)
                                   ).samples, 8000)
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        model.forward(_clip_input(model, wav, "bench"), INFER)
        times.append((time.perf_counter() - t0) * 1e3)
    print(f"parameters\t{count_params(model)}")
    print(f"flops\t{count_flops(model)}")
    print(f"model_bytes\t{size}")
    print(f"latency_ms\t{statistics.mean(times):.3f} +/- {statistics.stdev(times):.3f} "
          f"(n={args.repeats})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _add_run_options(p) -> None:
    p.add_argument("--data", required=True, help="dataset root with one directory per class")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", choices=ModelConfig.PRESETS, help="base model configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cardioxnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic WAV dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=int, default=8000)
    p.add_argument("--duration", type=float, default=3.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a 70/10/20 split and save the model")
    _add_run_options(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _add_run_options(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out", help="per-fold and summary CSV")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="score a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV; the confusion matrix goes next to it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one WAV file")
    p.add_argument("--model", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--classes", type=int, help="fail unless the model predicts this many classes")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="parameters, FLOPs, model size and latency")
    p.add_argument("--model", required=True)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--wav", help="clip to time (default: a synthetic 8 kHz clip)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ClassMismatchError as exc:
        print(f"class mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, ModelFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
