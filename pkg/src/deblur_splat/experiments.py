"""
Training runs on disk and ablation sweeps.

A run directory holds ``config.json`` (the exact configuration used),
``log.jsonl``, optional periodic checkpoints, ``final.ckpt`` and
``report.json``. Sweeps train variants whose first stage is identical only
once up to the stage boundary and resume each variant from that shared
checkpoint; resuming is exact, so this changes nothing but wall time.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from .config import TrainConfig, ablation_overrides, apply_overrides
from .dataset import Dataset
from .io import read_json, write_json
from .trainer import Trainer

log = logging.getLogger(__name__)

# Settings that only matter from the stage boundary on.
STAGE2_ONLY = ("out_dir", "lambda_track", "track_frames", "optimize_poses_stage2", "field_net")
STAGE2_ONLY_ABLATION = ("track_loss", "object_deblur", "static_field")
STAGE2_ONLY_LR = ("field", "field_final")

DEFAULT_VARIANTS = ("full", "wo_tl", "wo_db", "wo_sd", "wo_sdf", "baseline", "views_2")
SINGLE_ABLATIONS = ("wo_tl", "wo_db", "wo_sdf", "wo_sd")


def run_report(trainer: Trainer) -> dict:
    ev = trainer.evaluate()
    return {
        "iteration": trainer.iteration,
        "n_gaussians": len(trainer.gaussians),
        "n_dynamic": int(trainer.gaussians.is_dynamic.sum()),
        "aggregate": ev["aggregate"],
        "rows": ev["rows"],
    }


def train_run(cfg: TrainConfig, out_dir=None, dataset: Dataset | None = None, resume=None, until=None) -> Trainer:
    """Train (or continue) one run and write its directory; returns the trainer."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.out_dir = str(out)
    write_json(out / "config.json", cfg.to_dict())
    data = dataset if dataset is not None else Dataset(cfg.dataset)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, data, cfg)
    else:
        trainer = Trainer(cfg, data)
        (out / "log.jsonl").write_text("")
    ckpt_dir = out / "checkpoints" if cfg.checkpoint_every > 0 else None
    trainer.train(until=until, log_path=out / "log.jsonl", checkpoint_dir=ckpt_dir)
    if until is None or trainer.iteration >= cfg.schedule.iters_total:
        trainer.save_checkpoint(out / "final.ckpt")
        write_json(out / "report.json", run_report(trainer))
    return trainer


def variant_config(base: dict, name: str) -> TrainConfig:
    return TrainConfig.from_dict(apply_overrides(base, ablation_overrides(name)))


def stage1_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    for k in STAGE2_ONLY:
        d.pop(k)
    for k in STAGE2_ONLY_ABLATION:
        d["ablation"].pop(k)
    for k in STAGE2_ONLY_LR:
        d["lr"].pop(k)
    return json.dumps(d, sort_keys=True)


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def warmup_track_error(records: list[dict], cfg: TrainConfig):
    """Last logged ``(iteration, track_error)`` inside the track warmup window."""
    sch = cfg.schedule
    hits = [
        (r["iter"], r["track_error"])
        for r in records
        if "track_error" in r and "iter" in r and sch.iters_stage1 <= r["iter"] < sch.iters_track_warmup_end
    ]
    return hits[-1] if hits else (None, None)


def track_error_at(records: list[dict], iteration: int):
    for r in records:
        if r.get("iter") == iteration and "track_error" in r:
            return r["track_error"]
    return None


def ablation_sweep(base: dict, out_dir, variants=DEFAULT_VARIANTS, dataset: Dataset | None = None) -> dict:
    """Train every variant of ``base`` under ``out_dir/<variant>`` and write a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgs = {name: variant_config(base, name) for name in variants}
    data = dataset if dataset is not None else Dataset(next(iter(cfgs.values())).dataset)
    shared = {}
    for name, cfg in cfgs.items():
        key = stage1_key(cfg)
        run_dir = out / name
        if key not in shared:
            stage1_dir = out / "_stage1" / f"{len(shared):02d}"
            c1 = TrainConfig.from_dict(cfg.to_dict())
            t1 = train_run(c1, stage1_dir, data, until=cfg.schedule.iters_stage1)
            t1.save_checkpoint(stage1_dir / "stage1.ckpt")
            shared[key] = stage1_dir
        src = shared[key]
        run_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src / "log.jsonl", run_dir / "log.jsonl")
        log.info("training variant %s", name)
        train_run(cfg, run_dir, data, resume=src / "stage1.ckpt")
    return summarize(out, cfgs)


def summarize(out, cfgs: dict) -> dict:
    out = Path(out)
    rows = {}
    full_records = read_log(out / "full" / "log.jsonl") if "full" in cfgs else None
    probe = warmup_track_error(full_records, cfgs["full"])[0] if full_records else None
    for name, cfg in cfgs.items():
        report = read_json(out / name / "report.json")
        records = read_log(out / name / "log.jsonl")
        row = {"variant": name, **report["aggregate"]}
        row["track_error_warmup"] = track_error_at(records, probe) if probe is not None else None
        rows[name] = row
    summary = {"variants": list(cfgs), "track_probe_iteration": probe, "rows": rows}
    summary["checks"] = ordering_checks(rows)
    write_json(out / "summary.json", summary)
    _write_csv(out / "summary.csv", list(rows.values()))
    return summary


def _write_csv(path, rows):
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def ordering_checks(rows: dict, tie: float = 0.1) -> list[dict]:
    """Directional comparisons between variants; only those whose variants are present."""
    checks = []

    def add(name, ok, detail):
        checks.append({"name": name, "passed": bool(ok), "detail": detail})

    full = rows.get("full")
    base = rows.get("baseline")
    if full and base:
        d_all = full["psnr"] - base["psnr"]
        d_dyn = full["psnr_dynamic"] - base["psnr_dynamic"]
        add("full_vs_baseline_psnr", d_all >= 2.0, f"overall gain {d_all:+.2f} dB (need >= 2.0)")
        add("full_vs_baseline_dynamic_psnr", d_dyn >= 3.0, f"dynamic-mask gain {d_dyn:+.2f} dB (need >= 3.0)")
        add("full_vs_baseline_lv", full["lv"] > base["lv"], f"LV {full['lv']:.5f} vs {base['lv']:.5f}")
    singles = [n for n in SINGLE_ABLATIONS if n in rows]
    if full and singles:
        worse = {n: rows[n]["psnr"] for n in singles}
        ok = all(full["psnr"] >= v - tie for v in worse.values())
        add("full_beats_single_ablations", ok,
            f"full {full['psnr']:.2f} vs " + ", ".join(f"{n} {v:.2f}" for n, v in worse.items()))
        if "wo_sd" in worse and len(worse) > 1:
            others = [v for n, v in worse.items() if n != "wo_sd"]
            add("wo_sd_is_worst", worse["wo_sd"] <= min(others) + tie,
                f"wo_sd {worse['wo_sd']:.2f} vs lowest other ablation {min(others):.2f}")
    if full and "views_2" in rows:
        d = full["psnr"] - rows["views_2"]["psnr"]
        add("views_10_vs_2", d >= 0.5, f"gain {d:+.2f} dB (need >= 0.5)")
    if full and "wo_tl" in rows:
        a, b = full.get("track_error_warmup"), rows["wo_tl"].get("track_error_warmup")
        ok = a is not None and b is not None and np.isfinite(a) and np.isfinite(b) and a <= 0.5 * b
        add("track_loss_halves_error", ok, f"track error {_fmt(a)} vs w/o track loss {_fmt(b)} (need <= 50%)")
    return checks
