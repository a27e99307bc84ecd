"""Run experiments from a config and write their artifacts.

Output directory layout::

    manifest.json            config echo, seeds, package version, config hash
    metrics_seed<S>.jsonl    one JSON object per round
    summary.json             per-seed finals, baseline finals, FATE, cross-seed mean/std

Every byte of these files is a function of (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, nn, protocol
from .config import ExperimentConfig
from .errors import CafeError, InputError

log = logging.getLogger(__name__)

SUMMARY_FIELDS = ("f1", "accuracy", "eo_gap", "group_lambda_gap", "fate")


def _clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def load_dataset(cfg: ExperimentConfig, seed: int) -> data.LabeledDataset:
    if cfg.data.path is not None:
        return data.load_csv(cfg.data.path)
    data_seed = seed if cfg.data.seed is None else cfg.data.seed
    return data.generate(cfg.data.synthetic, data_seed)


def _finals(spec, params, eval_data, mcfg) -> dict:
    report, lams, loss = protocol.evaluate_global(spec, params, eval_data, mcfg)
    gap = float(max(lams.values()) - min(lams.values())) if len(lams) >= 2 else float("nan")
    return {
        "f1": report.f1,
        "accuracy": report.accuracy,
        "eo_gap": report.eo_gap,
        "eo_gap_signed": report.eo_gap_signed,
        "loss": loss,
        "group_lambdas": {str(k): v for k, v in sorted(lams.items())},
        "group_lambda_gap": gap,
        "per_group": report.to_dict()["per_group"],
    }


def baseline_config(mcfg: protocol.MethodConfig, method: str) -> protocol.MethodConfig:
    return dataclasses.replace(mcfg, method=method, optimizer=None, aggregation=None, use_swa=None)


def fate_from(finals: dict, base: dict, metric: str = "f1") -> float:
    try:
        return metrics.fate(finals[metric], base[metric], finals["eo_gap"], base["eo_gap"])
    except (CafeError, TypeError):
        return float("nan")


def run_seed(cfg: ExperimentConfig, seed: int):
    """Run the configured method (and its baseline) for one seed.

    Returns ``(round_records, seed_summary)``.
    """
    dataset = load_dataset(cfg, seed)
    clients = data.partition(dataset, cfg.partition, seed)
    eval_data = nn.Batch.concat([c.eval_data for c in clients])
    init = cfg.model.init_params(seed)

    res = protocol.run_experiment(
        clients, cfg.model, cfg.method, seed=seed, init_params=init,
        participation=cfg.participation, eval_data=eval_data,
    )
    finals = _finals(cfg.model, res.final_params, eval_data, cfg.method)
    if cfg.baseline_method == cfg.method.method:
        base = finals
    else:
        bcfg = baseline_config(cfg.method, cfg.baseline_method)
        bres = protocol.run_experiment(
            clients, cfg.model, bcfg, seed=seed, init_params=init,
            participation=cfg.participation, eval_data=eval_data, evaluate_rounds=False,
        )
        base = _finals(cfg.model, bres.final_params, eval_data, bcfg)
    summary = {
        "dataset_fingerprint": dataset.fingerprint(),
        "swa_models": res.swa_models,
        "final": finals,
        "baseline": base,
        "fate": fate_from(finals, base, cfg.fate_metric),
    }
    return [r.to_dict() for r in res.reports], summary


def _mean_std(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0, "n": int(arr.size)}


def run(cfg: ExperimentConfig, out_dir=None, seed_override: int | None = None) -> int:
    """Execute every seed and write artifacts. Returns the process exit status."""
    out = Path(out_dir or cfg.output_dir)
    seeds = (seed_override,) if seed_override is not None else cfg.seeds
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "package_version": __version__,
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "seeds": list(seeds),
        }
        (out / "manifest.json").write_text(dumps(manifest) + "\n")
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return 2

    per_seed, failed = {}, {}
    for seed in seeds:
        try:
            records, summary = run_seed(cfg, seed)
        except (CafeError, FloatingPointError) as exc:
            log.error("seed %d failed: %s", seed, exc)
            failed[str(seed)] = str(exc)
            continue
        try:
            with (out / f"metrics_seed{seed}.jsonl").open("w") as fh:
                for rec in records:
                    fh.write(dumps(rec) + "\n")
        except OSError as exc:
            log.error("cannot write metrics: %s", exc)
            return 2
        per_seed[str(seed)] = summary

    aggregate = {}
    for name in SUMMARY_FIELDS:
        if name == "fate":
            aggregate[name] = _mean_std([s["fate"] for s in per_seed.values()])
        else:
            aggregate[name] = _mean_std([s["final"][name] for s in per_seed.values()])
            aggregate[f"baseline_{name}"] = _mean_std([s["baseline"][name] for s in per_seed.values()])
    summary = {
        "method": cfg.method.method,
        "baseline_method": cfg.baseline_method,
        "fate_metric": cfg.fate_metric,
        "config_hash": cfg.config_hash(),
        "seeds": per_seed,
        "failed_seeds": failed,
        "aggregate": aggregate,
    }
    try:
        (out / "summary.json").write_text(dumps(summary) + "\n")
    except OSError as exc:
        log.error("cannot write summary: %s", exc)
        return 2
    return 0 if per_seed else 2


def report(run_dirs, out_path, baseline_dir=None, fate_metric: str = "f1") -> dict:
    """Compare completed runs in a table; FATE is taken against ``baseline_dir``
    (default: the first run) using cross-seed means."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise InputError("need at least one run directory")
    summaries = []
    for d in run_dirs:
        path = d / "summary.json"
        if not path.exists():
            raise InputError(f"{d}: no summary.json (run incomplete?)")
        summaries.append(json.loads(path.read_text()))

    def fingerprints(s):
        return {k: v["dataset_fingerprint"] for k, v in s["seeds"].items()}

    ref = fingerprints(summaries[0])
    for d, s in zip(run_dirs[1:], summaries[1:]):
        if fingerprints(s) != ref:
            raise InputError(f"{d}: dataset fingerprints differ from {run_dirs[0]}; runs are not comparable")

    base_idx = 0 if baseline_dir is None else [str(p) for p in run_dirs].index(str(Path(baseline_dir)))
    base = summaries[base_idx]["aggregate"]
    rows = []
    for d, s in zip(run_dirs, summaries):
        agg = s["aggregate"]
        row = {
            "run": d.name,
            "method": s["method"],
            "f1": agg["f1"]["mean"],
            "accuracy": agg["accuracy"]["mean"],
            "eo_gap": agg["eo_gap"]["mean"],
            "group_lambda_gap": agg["group_lambda_gap"]["mean"],
        }
        row["fate"] = fate_from(
            row, {"f1": base["f1"]["mean"], "accuracy": base["accuracy"]["mean"], "eo_gap": base["eo_gap"]["mean"]}, fate_metric
        )
        rows.append(row)

    def fmt(v):
        return "n/a" if v is None or not math.isfinite(v) else f"{v:.4f}"

    header = f"{'run':<20} {'method':<10} {'F1':>8} {'Acc':>8} {'EO gap':>8} {'dLam(F)':>8} {'FATE':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['run']:<20} {r['method']:<10} {fmt(r['f1']):>8} {fmt(r['accuracy']):>8} "
            f"{fmt(r['eo_gap']):>8} {fmt(r['group_lambda_gap']):>8} {fmt(r['fate']):>8}"
        )
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n")
    result = {"baseline": run_dirs[base_idx].name, "fate_metric": fate_metric, "rows": rows}
    out_path.with_suffix(".json").write_text(dumps(result) + "\n")
    return result
