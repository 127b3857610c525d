"""Command-line entry point: ``dctpoison <command> [flags]``.

Errors print one line, ``dctpoison: error: <kind>: <message>``, and exit with
2 (bad usage or unknown flag), 3 (missing file), 4 (file format mismatch)
or 1 (anything else).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import FormatError, IqaDataset, SynthConfig, gen_synthetic, load_dataset, load_trigger, save_dataset, \
    save_trigger
from .data.formats import atomic_write_text
from .dct import FrequencyBand, Trigger
from .defense import DefenseConfig, EvalSet, calibration_images, clean_subset, defense_sweep, fine_tune
from .metrics import AlphaGrid, AttackReport, evaluate
from .model import TrainConfig, fit_params, load_checkpoint, save_checkpoint
from .numerics import Rng64
from .poison import AlphaSampler, PgdConfig, PoisonSpec, c_baiqa, p_baiqa, select_subset
from .svg import line_chart
from .trigger_search import (BaselineTriggerSpec, UapConfig, make_baseline_trigger, project_to_budget, train_surrogate,
                             uap_dct_search)

SEED_ENV = "DCTPOISON_SEED"
EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_OTHER = 2, 3, 4, 1


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def number(text: str) -> float:
    """Float that also accepts fractions such as ``8/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def float_list(text: str) -> list[float]:
    return [number(t) for t in text.split(",") if t.strip()]


# ------------------------------------------------------------------ helpers

def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise CliError(EXIT_USAGE, "usage", f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing-file", f"{what} file not found: {p}")
    return p


def _load_dataset(path) -> IqaDataset:
    return load_dataset(_existing(path, "data"))


def _load_trigger_arg(args, shape) -> Any:
    if args.blended is not None:
        return make_baseline_trigger(BaselineTriggerSpec("blended-noise", blend_weight=args.blended, seed=args.seed),
                                     image_shape=shape)
    return load_trigger(_existing(args.trigger, "trigger"))


def _resolved(args) -> dict[str, Any]:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    cfg["version"] = __version__
    return cfg


def _json(obj) -> str:
    def fix(v):
        if isinstance(v, float) and not math.isfinite(v):
            return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        if isinstance(v, np.generic):
            return fix(v.item())
        return v

    return json.dumps(fix(obj), indent=2, sort_keys=True) + "\n"


def _write_report(path: str | None, payload: dict[str, Any]) -> None:
    if path:
        atomic_write_text(path, _json(payload))


def _sidecar(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _train_cfg(args, epochs=None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs if epochs is None else epochs, batch_size=args.batch_size, lr=args.lr,
                       crop_size=args.crop_size, seed=args.seed, loss=args.loss)


def _train_split(ds: IqaDataset) -> IqaDataset:
    train = ds.where_split("train")
    if len(train) == 0:
        raise CliError(EXIT_OTHER, "invalid-input", "dataset has no training records")
    return train


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> dict:
    cfg = SynthConfig(n_images=args.n, size=args.size, train_fraction=args.train_fraction, seed=args.seed)
    ds = gen_synthetic(cfg)
    save_dataset(ds, args.out)
    return {"command": "gen-data", "config": _resolved(args), "synth": asdict(cfg), "records": len(ds),
            "train": int(np.sum(ds.split == "train"))}


def cmd_train(args) -> dict:
    train = _train_split(_load_dataset(args.data))
    params, history = fit_params(train.images, train.mos, _train_cfg(args))
    save_checkpoint(params, args.out)
    return {"command": "train", "config": _resolved(args), "records": len(train),
            "poisoned": int(train.poisoned.sum()), "loss_history": history}


def cmd_search_trigger(args) -> dict:
    band = FrequencyBand()
    if args.kind == "ftrojan-fixed":
        trig = make_baseline_trigger(BaselineTriggerSpec("ftrojan-fixed", magnitude=args.magnitude), band)
        save_trigger(trig, args.out)
        return {"command": "search-trigger", "config": _resolved(args)}
    if args.kind == "random":
        coeffs = project_to_budget(Rng64(args.seed).normal_array((3, len(band))), band, args.epsilon)
        save_trigger(Trigger(band, coeffs), args.out)
        return {"command": "search-trigger", "config": _resolved(args)}
    train = _train_split(_load_dataset(args.data))
    subset = train.subset(select_subset(len(train), args.ratio, args.seed))
    cfg = UapConfig(epsilon=args.epsilon, lam=args.lam, e1=args.e1, e2=args.e2, lr=args.trigger_lr, seed=args.seed,
                    share_channels=args.share_channels, fill_budget=not args.keep_last_iterate)
    if args.surrogate:
        surrogate = load_checkpoint(_existing(args.surrogate, "surrogate"))
    else:
        surrogate = train_surrogate(subset.images, subset.mos, cfg, _train_cfg(args, epochs=cfg.e1))
        if args.save_surrogate:
            save_checkpoint(surrogate, args.save_surrogate)
    result = uap_dct_search(subset.images, surrogate, cfg, band)
    save_trigger(result.trigger, args.out)
    return {"command": "search-trigger", "config": _resolved(args), "subset_size": len(subset),
            "effect_history": result.effect_history, "mse_history": result.mse_history}


def _poison_spec(args) -> PoisonSpec:
    return PoisonSpec(ratio=args.ratio, delta_y=args.delta, mu_y=args.mu, sampler=AlphaSampler(args.strategy),
                      pgd=PgdConfig(args.eps_t, args.step_t, args.iters), g_mode=args.g_mode, seed=args.seed)


def _poison_summary(args, out: IqaDataset) -> dict:
    return {"command": args.command, "config": _resolved(args), "records": len(out),
            "poisoned": int(out.poisoned.sum())}


def cmd_poison_p(args) -> dict:
    ds = _load_dataset(args.data)
    out = p_baiqa(ds, _load_trigger_arg(args, ds.image_shape[:2]), _poison_spec(args))
    save_dataset(out, args.out)
    return _poison_summary(args, out)


def cmd_poison_c(args) -> dict:
    ds = _load_dataset(args.data)
    trig = _load_trigger_arg(args, ds.image_shape[:2])
    surrogate = load_checkpoint(_existing(args.surrogate, "surrogate"))
    out = c_baiqa(ds, surrogate, trig, _poison_spec(args), use_pgd=not args.no_pgd)
    save_dataset(out, args.out)
    return _poison_summary(args, out)


def _test_split(ds: IqaDataset) -> IqaDataset:
    test = ds.where_split("test")
    test = test.subset(np.flatnonzero(~test.poisoned))
    if len(test) == 0:
        raise CliError(EXIT_OTHER, "invalid-input", "dataset has no clean test records")
    return test


def cmd_eval_attack(args) -> dict:
    params = load_checkpoint(_existing(args.model, "model"))
    test = _test_split(_load_dataset(args.data))
    trig = _load_trigger_arg(args, test.image_shape[:2])
    grid = AlphaGrid(tuple(args.alphas)) if args.alphas else AlphaGrid()
    report = evaluate(params, test.images, test.mos, trig, args.delta, grid, n_crops=args.crops, seed=args.seed,
                      config=_resolved(args))
    if args.out:
        atomic_write_text(_sidecar(args.out, ".curves.csv"), report.curves.to_csv())
        if args.svg:
            atomic_write_text(_sidecar(args.out, ".curves.svg"),
                              line_chart(report.curves.alphas, {"MAE": report.curves.mae}, "attack error",
                                         "alpha", "MAE"))
    return {"command": "eval-attack", **report.to_dict()}


def cmd_defend(args) -> dict:
    params = load_checkpoint(_existing(args.model, "model"))
    ds = _load_dataset(args.data)
    test = _test_split(ds)
    trig = _load_trigger_arg(args, test.image_shape[:2])
    cfg = DefenseConfig(finetune_fraction=args.fraction, finetune_epochs=args.finetune_epochs,
                        finetune_lr=args.finetune_lr, prune_rates=tuple(args.rates),
                        calibration_fraction=args.calibration_fraction, seed=args.seed)
    evaluator = EvalSet(test.images, test.mos, trig, args.delta, n_crops=args.crops, seed=args.seed)
    before = evaluator.score(params)
    tuned, trace = fine_tune(params, clean_subset(ds, cfg.finetune_fraction, cfg.seed), cfg, evaluator)
    sweep = defense_sweep(params, calibration_images(ds, cfg), evaluator, cfg)
    if args.out:
        atomic_write_text(_sidecar(args.out, ".sweep.csv"), sweep.to_csv())
        if args.svg:
            atomic_write_text(_sidecar(args.out, ".sweep.svg"),
                              line_chart(sweep.column("beta"), {"RMSE": sweep.column("rmse"),
                                                                "mMAE": sweep.column("mmae")},
                                         "pruning sweep", "pruning rate", "value"))
    return {"command": "defend", "config": _resolved(args), "defense": asdict(cfg), "before": before,
            "finetune_trace": trace, "sweep": sweep.rows}


def cmd_report(args) -> dict:
    rows = []
    for path in args.inputs:
        p = _existing(path, "report")
        try:
            doc = json.loads(p.read_text())
            rep = AttackReport.from_dict(doc)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CliError(EXIT_FORMAT, "format", f"{p}: not an eval-attack report ({exc})") from None
        rows.append({"report": str(p), **rep.benign, "mmae": rep.mmae, "mmra": rep.mmra, "psnr1": rep.psnr1})
    if args.out:
        cols = ["report", "plcc", "srocc", "rmse", "mmae", "mmra", "psnr1"]
        lines = [",".join(cols)] + [",".join(repr(r[c]) if c != "report" else r[c] for c in cols) for r in rows]
        atomic_write_text(_sidecar(args.out, ".summary.csv"), "\n".join(lines) + "\n")
    return {"command": "report", "config": _resolved(args), "rows": rows}


# ------------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=number, default=3e-3)
    p.add_argument("--crop-size", type=int, default=48)
    p.add_argument("--loss", choices=("l1", "mse"), default="l1")


def _add_trigger_source(p):
    p.add_argument("--trigger", help="TRIG file")
    p.add_argument("--blended", type=number, help="use a blended-noise trigger of this weight instead")


def _add_poison_flags(p):
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _add_trigger_source(p)
    p.add_argument("--ratio", type=number, default=0.2)
    p.add_argument("--delta", type=number, default=40.0)
    p.add_argument("--mu", type=number, default=50.0)
    p.add_argument("--strategy", choices=("discrete8", "pm1", "uniform"), default="discrete8")
    p.add_argument("--eps-t", type=number, default=2 / 255)
    p.add_argument("--step-t", type=number, default=1 / 255)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--g-mode", choices=("clamp", "identity", "rescale"), default="clamp")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="file of 'key = value' lines supplying flag defaults")
    common.add_argument("--report", help="write the JSON report here (default: stdout)")

    parser = _Parser(prog="dctpoison", description="DCT-domain backdoor attacks on a small quality regressor.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train-fraction", type=number, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the regressor on the train split")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search-trigger", parents=[common], help="search a UAP-DCT trigger or make a baseline")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("uap", "ftrojan-fixed", "random"), default="uap")
    p.add_argument("--surrogate", help="checkpoint; trained on the attack subset when omitted")
    p.add_argument("--save-surrogate")
    p.add_argument("--ratio", type=number, default=0.2)
    p.add_argument("--epsilon", type=number, default=8 / 255)
    p.add_argument("--lam", type=number, default=1e8)
    p.add_argument("--e1", type=int, default=24)
    p.add_argument("--e2", type=int, default=50)
    p.add_argument("--trigger-lr", type=number, default=1e-2)
    p.add_argument("--share-channels", action="store_true")
    p.add_argument("--keep-last-iterate", action="store_true",
                   help="skip rescaling the searched trigger onto the MSE budget")
    p.add_argument("--magnitude", type=number, default=66 / 255)
    _add_train_flags(p)
    p.set_defaults(func=cmd_search_trigger)

    p = sub.add_parser("poison-p", parents=[common], help="poison-label attack")
    _add_poison_flags(p)
    p.set_defaults(func=cmd_poison_p)

    p = sub.add_parser("poison-c", parents=[common], help="clean-label attack")
    _add_poison_flags(p)
    p.add_argument("--surrogate")
    p.add_argument("--no-pgd", action="store_true")
    p.set_defaults(func=cmd_poison_c)

    p = sub.add_parser("eval-attack", parents=[common], help="benign metrics and attack curves on the test split")
    p.add_argument("--model")
    p.add_argument("--data")
    _add_trigger_source(p)
    p.add_argument("--delta", type=number, default=40.0)
    p.add_argument("--crops", type=int, default=9)
    p.add_argument("--alphas", type=float_list)
    p.add_argument("--out", help="report path; curves go to a CSV sidecar next to it")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_eval_attack)

    p = sub.add_parser("defend", parents=[common], help="fine-tuning and pruning resistance")
    p.add_argument("--model")
    p.add_argument("--data")
    _add_trigger_source(p)
    p.add_argument("--delta", type=number, default=40.0)
    p.add_argument("--crops", type=int, default=9)
    p.add_argument("--fraction", type=number, default=0.2)
    p.add_argument("--finetune-epochs", type=int, default=10)
    p.add_argument("--finetune-lr", type=number, default=1e-3)
    p.add_argument("--rates", type=float_list, default=[round(0.05 * k, 2) for k in range(20)])
    p.add_argument("--calibration-fraction", type=number, default=0.2)
    p.add_argument("--out")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", parents=[common], help="tabulate eval-attack reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    p = _existing(path, "config")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_FORMAT, "format", f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], path: str) -> None:
    """Install config-file values as defaults of the chosen subcommand, so explicit flags still win."""
    values = read_config_file(path)
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in commands), None)
    if command is None:
        return
    sub = commands[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise CliError(EXIT_USAGE, "usage", f"unknown config key {key!r} for {command}")
        if action.nargs == 0:
            defaults[key] = text.lower() in ("1", "true", "yes", "on")
            continue
        try:
            defaults[key] = action.type(text) if action.type else text
        except argparse.ArgumentTypeError as exc:
            raise CliError(EXIT_USAGE, "usage", f"config key {key!r}: {exc}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise CliError(EXIT_USAGE, "usage", f"config key {key!r}: invalid choice {text!r}")
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _config_path(argv)
        if config is not None:
            _apply_config(parser, argv, config)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                args.seed = int(env_seed)
            except ValueError:
                raise CliError(EXIT_USAGE, "usage", f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        payload = args.func(args)
        target = args.report or (args.out if args.command in ("eval-attack", "defend", "report") else None)
        if target:
            _write_report(target, payload)
        else:
            sys.stdout.write(_json(payload))
        return 0
    except CliError as exc:
        return _fail(exc)
    except FormatError as exc:
        return _fail(CliError(EXIT_FORMAT, "format", str(exc)))
    except FileNotFoundError as exc:
        return _fail(CliError(EXIT_MISSING, "missing-file", str(exc)))
    except ValueError as exc:
        return _fail(CliError(EXIT_OTHER, "invalid-input", str(exc)))


def _fail(exc: CliError) -> int:
    msg = " ".join(str(exc).split())
    sys.stderr.write(f"dctpoison: error: {exc.kind}: {msg}\n")
    return exc.code


if __name__ == "__main__":
    sys.exit(main())
