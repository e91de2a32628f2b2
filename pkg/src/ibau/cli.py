"""Command-line entry point: ``ibau <command> [flags]``.

Commands read their inputs from and write their outputs to ``--out`` (fixed
file names, see ``FILES``), so the usual sequence is::

    ibau gen-data --out run && ibau poison --out run && ibau train --out run
    ibau unlearn --out run && ibau attack-eval --out run --checkpoint run/sanitized.ckpt

Exit codes: 0 success, 1 internal or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from . import formats
from .config import ConfigError, RunConfig
from .evalmetrics import MetricsReport, attack_report, empirical_margin_risk
from .pipeline import (
    SWEEP_AXES,
    build_data,
    build_plan,
    defense_subset,
    eval_hook,
    full_report,
    model_spec,
    oracle_check,
    sweep,
    time_to_effective,
    train_config,
    unlearn_config,
)
from .poison import DataFormatError, load_csv, poison_dataset, save_csv
from .model import train
from .unlearn import ibau, naive_unlearn

FILES = {
    "train": "train.csv",
    "clean": "clean.csv",
    "test": "test.csv",
    "poisoned": "poisoned_train.csv",
    "trigger": "trigger.txt",
    "model": "model.ckpt",
    "train_log": "train_log.csv",
    "sanitized": "sanitized.ckpt",
    "results_json": "results.json",
    "results_csv": "results.csv",
    "oracle_json": "oracle_check.json",
    "error_curve": "error_curve.csv",
}

USAGE_ERRORS = (ConfigError, ValueError, FileNotFoundError, FileExistsError, DataFormatError, formats.FormatError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", type=Path, default=Path("."), help="working directory for inputs and outputs")
    common.add_argument("--seed", type=int, help="set data, attack, train and unlearn seeds at once")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = _Parser(prog="ibau", description="Backdoor unlearning experiments on small MLPs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train/clean/test CSVs")
    sub.add_parser("poison", parents=[common], help="poison train.csv and write the trigger file")
    sub.add_parser("train", parents=[common], help="train on poisoned_train.csv")
    u = sub.add_parser("unlearn", parents=[common], help="sanitize model.ckpt with clean.csv")
    u.add_argument("--method", choices=("ibau", "naive"), help="shorthand for --set unlearn.method=...")
    a = sub.add_parser("attack-eval", parents=[common], help="ACC and ASR of a checkpoint")
    a.add_argument("--checkpoint", type=Path, help="defaults to OUT/model.ckpt")
    a.add_argument("--trigger", type=Path, help="defaults to OUT/trigger.txt")
    a.add_argument("--test", type=Path, help="defaults to OUT/test.csv")
    o = sub.add_parser("oracle-check", parents=[common], help="hypergradients against quadratic closed forms")
    o.add_argument("--analytic-hvp", action="store_true", help="exact curvature products, threshold 1e-8")
    s = sub.add_parser("sweep", parents=[common], help="one-axis sensitivity table")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    return p


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.default_config()
    cfg = cfg.with_overrides(args.overrides)
    if getattr(args, "method", None):
        cfg = cfg.with_values(unlearn__method=args.method)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


class Outputs:
    """Output paths of one command, checked for clobbering before any work."""

    def __init__(self, out: Path, names, force: bool):
        self.paths = {n: out / FILES.get(n, n) for n in names}
        existing = [str(p) for p in self.paths.values() if p.exists()]
        if existing and not force:
            raise FileExistsError(f"refusing to overwrite {', '.join(existing)} (use --force)")
        out.mkdir(parents=True, exist_ok=True)

    def __getitem__(self, name) -> Path:
        return self.paths[name]


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    text = cfg.dumps()
    print(text, end="")
    (out / f"{command}.resolved.ini").write_text(text, encoding="utf-8")


def _need(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} not found")
    return path


def _report_dict(rep: MetricsReport) -> dict:
    return {
        "acc": rep.acc,
        "asr": rep.asr_overall,
        "asr_per_entry": [{"entry": i, "target": t, "asr": a} for i, t, a in rep.asr_per_entry],
        "margin_risk": None if rep.margin_risk is None else {"gamma": rep.margin_risk[0], "value": rep.margin_risk[1]},
        "error_gap": rep.error_gap,
    }


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg, args):
    outs = Outputs(args.out, ["train", "clean", "test"], args.force)
    _echo(cfg, args.out, "gen-data")
    for name, ds in zip(("train", "clean", "test"), build_data(cfg)):
        save_csv(ds, outs[name])
        print(f"{name}: {len(ds)} rows -> {outs[name]}")


def cmd_poison(cfg, args):
    train_set = load_csv(_need(args.out / FILES["train"], "training set"), cfg["data.classes"])
    outs = Outputs(args.out, ["poisoned", "trigger"], args.force)
    _echo(cfg, args.out, "poison")
    plan = build_plan(cfg, train_set.dim)
    poisoned, picked = poison_dataset(train_set, plan)
    save_csv(poisoned, outs["poisoned"])
    formats.save_plan(plan, outs["trigger"])
    print(f"poisoned {sum(len(p) for p in picked)} of {len(train_set)} rows ({plan.mode}) -> {outs['poisoned']}")


def cmd_train(cfg, args):
    data = load_csv(_need(args.out / FILES["poisoned"], "poisoned training set"), cfg["data.classes"])
    outs = Outputs(args.out, ["model", "train_log"], args.force)
    _echo(cfg, args.out, "train")
    params, history = train(data, model_spec(cfg, data.dim, data.num_classes), train_config(cfg))
    formats.save_checkpoint(params, outs["model"])
    formats.write_csv(outs["train_log"], ["epoch", "mean_loss"], [[i + 1, float(h)] for i, h in enumerate(history)])
    print(f"trained {len(history)} epochs, final loss {history[-1] if history else float('nan'):.6g} -> {outs['model']}")


def cmd_unlearn(cfg, args):
    act = cfg["train.activation"]
    params = formats.load_checkpoint(_need(args.out / FILES["model"], "checkpoint"), act)
    plan = formats.load_plan(_need(args.out / FILES["trigger"], "trigger file"))
    C = cfg["data.classes"]
    clean = load_csv(_need(args.out / FILES["clean"], "clean set"), C)
    test = load_csv(_need(args.out / FILES["test"], "test set"), C)
    train_path = args.out / FILES["train"]
    train_set = load_csv(train_path, C) if train_path.is_file() else clean
    outs = Outputs(args.out, ["sanitized", "results_json", "results_csv"], args.force)
    _echo(cfg, args.out, "unlearn")

    gamma = cfg["eval.gamma"]
    before = full_report(params, train_set, test, plan, gamma)
    method = ibau if cfg["unlearn.method"] == "ibau" else naive_unlearn
    defense = defense_subset(clean, cfg["unlearn.clean_size"], cfg["unlearn.seed"])
    sanitized, records = method(params, defense, unlearn_config(cfg), eval_hook(test, plan))
    after = full_report(sanitized, train_set, test, plan, gamma)
    formats.save_checkpoint(sanitized, outs["sanitized"])

    n = len(plan.entries)
    as_dicts = [vars(r) for r in records]
    columns = formats.round_columns(n)
    summary = {
        "method": cfg["unlearn.method"],
        "rounds": len(records),
        "clean_samples": len(defense),
        "total_wall_time": sum(r.wall_time for r in records),
        "time_to_effective": time_to_effective(records, cfg["eval.asr_threshold"]),
        "asr_threshold": cfg["eval.asr_threshold"],
        "before": _report_dict(before),
        "after": _report_dict(after),
    }
    formats.write_json(outs["results_json"], {"columns": columns, "rounds": as_dicts, "summary": summary})
    formats.write_csv(outs["results_csv"], columns, formats.round_rows(as_dicts, n))
    print(f"{cfg['unlearn.method']}: ACC {before.acc:.4f} -> {after.acc:.4f}, "
          f"ASR {before.asr_overall:.4f} -> {after.asr_overall:.4f} over {len(records)} rounds")


def cmd_attack_eval(cfg, args):
    ckpt = _need(args.checkpoint or args.out / FILES["model"], "checkpoint")
    plan = formats.load_plan(_need(args.trigger or args.out / FILES["trigger"], "trigger file"))
    test = load_csv(_need(args.test or args.out / FILES["test"], "test set"), cfg["data.classes"])
    params = formats.load_checkpoint(ckpt, cfg["train.activation"])
    stem = f"attack_eval_{ckpt.stem}"
    outs = Outputs(args.out, [stem + ".json", stem + ".csv"], args.force)
    _echo(cfg, args.out, "attack-eval")
    train_path = args.out / FILES["train"]
    if train_path.is_file():
        rep = full_report(params, load_csv(train_path, cfg["data.classes"]), test, plan, cfg["eval.gamma"])
    else:
        rep = attack_report(params, test, plan)
        rep.margin_risk = (cfg["eval.gamma"], empirical_margin_risk(params, test, None, cfg["eval.gamma"]))
    doc = {"checkpoint": str(ckpt), **_report_dict(rep)}
    formats.write_json(outs[stem + ".json"], doc)
    formats.write_csv(outs[stem + ".csv"], ["entry", "target", "acc", "asr", "asr_overall"],
                      [[i, t, rep.acc, a, rep.asr_overall] for i, t, a in rep.asr_per_entry])
    print(f"{ckpt}: ACC {rep.acc:.4f}  ASR {rep.asr_overall:.4f}")


def cmd_oracle_check(cfg, args):
    outs = Outputs(args.out, ["oracle_json", "error_curve"], args.force)
    _echo(cfg, args.out, "oracle-check")
    res = oracle_check(seed=cfg["unlearn.seed"], analytic=args.analytic_hvp)
    formats.write_csv(outs["error_curve"], ["inner_steps", "hypergrad_error"], [[t, e] for t, e in res.curve])
    formats.write_json(outs["oracle_json"], {
        "analytic_hvp": res.analytic, "threshold": res.threshold, "max_relative_error": res.max_error,
        "linear_coupling_errors": res.linear_errors, "quadratic_errors": res.quadratic_errors,
        "cg_residuals": res.residuals, "curve_non_increasing": res.curve_monotone, "passed": res.passed,
    })
    print(f"max relative hypergradient error {res.max_error:.3e} (threshold {res.threshold:.0e}), "
          f"max CG residual {max(res.residuals):.3e}: {'PASS' if res.passed else 'FAIL'}")
    return 0 if res.passed else 1


def cmd_sweep(cfg, args):
    stem = f"sweep_{args.axis}"
    outs = Outputs(args.out, [stem + ".csv", stem + ".json"], args.force)
    _echo(cfg, args.out, "sweep")
    res = sweep(cfg, args.axis)
    formats.write_csv(outs[stem + ".csv"], res.columns, res.rows)
    stats = {k: vars(v) for k, v in res.stats.items()}
    formats.write_json(outs[stem + ".json"], {"axis": res.axis, "columns": res.columns, "rows": res.rows, "stats": stats})
    for row in res.rows:
        print("  ".join(format(v, ".4g") if isinstance(v, float) else str(v) for v in row))
    for name, s in res.stats.items():
        print(f"{name}: mean {s.mean:.4f} std {s.std:.4f} min {s.min:.4f} max {s.max:.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "poison": cmd_poison,
    "train": cmd_train,
    "unlearn": cmd_unlearn,
    "attack-eval": cmd_attack_eval,
    "oracle-check": cmd_oracle_check,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args) or 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except USAGE_ERRORS as exc:
        print(f"ibau: error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"ibau: numeric failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        print(f"ibau: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
