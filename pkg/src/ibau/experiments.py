"""Multi-seed desk experiments behind the acceptance checks and ``scripts/``.

Each function runs the default preset (optionally overridden) over several
seeds and returns a plain dict of per-seed values and the aggregate that is
compared against a threshold. Seeds set every RNG in the pipeline at once.
"""

from __future__ import annotations

import time

import numpy as np

from .config import RunConfig, default_config
from .pipeline import ExperimentResult, defense_subset, prepare_poisoned, run_experiment, unlearn_config
from .poison import trigger_l2_norm
from .evalmetrics import attack_report
from .unlearn import sweep_norm_bound


def desk_config(*overrides: str) -> RunConfig:
    return default_config().with_overrides(overrides)


def _max_asr(rep) -> float:
    return max(e[2] for e in rep.asr_per_entry)


_CACHE: dict[str, ExperimentResult] = {}


def cached_run(cfg: RunConfig) -> ExperimentResult:
    """``run_experiment`` memoised on the resolved config text; runs are deterministic."""
    key = cfg.dumps()
    if key not in _CACHE:
        _CACHE[key] = run_experiment(cfg)
    return _CACHE[key]


def _per_seed(cfg: RunConfig, seeds) -> list[ExperimentResult]:
    return [cached_run(cfg.with_seed(s)) for s in seeds]


def _summary(results: list[ExperimentResult]) -> dict:
    before_acc = [r.before.acc for r in results]
    before_asr = [_max_asr(r.before) for r in results]
    after_acc = [r.after.acc for r in results]
    after_asr = [_max_asr(r.after) for r in results]
    drop = [b - a for b, a in zip(before_acc, after_acc)]
    return {
        "before_acc": before_acc,
        "before_asr": before_asr,
        "after_acc": after_acc,
        "after_asr": after_asr,
        "acc_drop": drop,
        "median_before_acc": float(np.median(before_acc)),
        "median_before_asr": float(np.median(before_asr)),
        "median_after_asr": float(np.median(after_asr)),
        "median_acc_drop": float(np.median(drop)),
        "fallback_rounds": sum(rec.fallback_used for r in results for rec in r.records),
    }


def single_target(seeds=range(5), *overrides: str) -> dict:
    start = time.perf_counter()
    res = _per_seed(desk_config(*overrides), seeds)
    out = _summary(res)
    out["trigger_norm"] = res[0].trigger_norm
    out["norm_bound"] = desk_config(*overrides)["unlearn.norm_bound"]
    out["seconds"] = time.perf_counter() - start
    return out


def all_to_all(seeds=range(5), rounds: int = 20, *overrides: str) -> dict:
    cfg = desk_config("attack.mode=all_to_all", f"unlearn.rounds={rounds}", *overrides)
    out = _summary(_per_seed(cfg, seeds))
    out["chance_bound"] = 1.5 / cfg["data.classes"] + 0.05
    return out


def multi_trigger(seeds=range(5), rounds: int = 30, *overrides: str) -> dict:
    cfg = desk_config("attack.mode=multi_trigger", "attack.targets=0,1,2", f"unlearn.rounds={rounds}", *overrides)
    res = _per_seed(cfg, seeds)
    out = _summary(res)
    per = np.array([[e[2] for e in r.after.asr_per_entry] for r in res])
    out["after_asr_per_trigger"] = per.tolist()
    out["median_asr_per_trigger"] = np.median(per, axis=0).tolist()
    return out


def stability(seeds=range(10), *overrides: str) -> dict:
    base = desk_config(*overrides)
    final = {}
    for method in ("ibau", "naive"):
        final[method] = [_max_asr(r.after) for r in _per_seed(base.with_values(unlearn__method=method), seeds)]
    return {
        "final_asr": final,
        "std": {m: float(np.std(v)) for m, v in final.items()},
        "median": {m: float(np.median(v)) for m, v in final.items()},
    }


def clean_size(size: int = 100, seeds=range(5), rounds: int = 10, threshold: float = 0.25, *overrides: str) -> dict:
    cfg = desk_config(f"unlearn.clean_size={size}", f"unlearn.rounds={rounds}", *overrides)
    res = _per_seed(cfg, seeds)
    out = _summary(res)
    out["first_round_below"] = [r.first_round_below(threshold) for r in res]
    out["best_asr"] = [r.best_asr() for r in res]
    out["median_best_asr"] = float(np.median(out["best_asr"]))
    return out


def norm_bound(seeds=range(5), factors=(0.25, 1.0, 4.0), *overrides: str) -> dict:
    """Final ACC/ASR per ``C_delta = factor * tau`` on one poisoned model per seed."""
    cfg = desk_config(*overrides)
    acc = {f: [] for f in factors}
    asr = {f: [] for f in factors}
    tau = None
    for s in seeds:
        pm = prepare_poisoned(cfg.with_seed(s))
        tau = trigger_l2_norm(pm.plan.entries[0].trigger)
        clean = defense_subset(pm.clean, cfg["unlearn.clean_size"], s)

        def evaluate(p):
            rep = attack_report(p, pm.test, pm.plan)
            return rep.acc, _max_asr(rep)

        ucfg = unlearn_config(pm.cfg)
        rows = sweep_norm_bound(pm.params, clean, [f * tau for f in factors], ucfg, evaluate)
        for f, (_, a, r) in zip(sorted(factors), rows):
            acc[f].append(a)
            asr[f].append(r)
    return {
        "tau": tau,
        "acc": {str(f): v for f, v in acc.items()},
        "asr": {str(f): v for f, v in asr.items()},
        "median_acc": {str(f): float(np.median(v)) for f, v in acc.items()},
        "median_asr": {str(f): float(np.median(v)) for f, v in asr.items()},
    }


__all__ = ["all_to_all", "cached_run", "clean_size", "desk_config", "multi_trigger", "norm_bound", "single_target", "stability"]
