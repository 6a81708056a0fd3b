"""Masking and modality ablation grids.

Every grid entry is trained with the same total step budget. Masked entries
split it between a masked pre-training and an unmasked fine-tuning; the
unmasked entry trains from scratch. Entries that resolve to the same training
recipe (the unmasked full-modality row appears in both grids) are run once.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .masking import PATTERNS, MaskSpec
from .model import ALL_MODALITIES, ModelConfig
from .training import TrainConfig, evaluate_model, occlude, prepare, pretrain_then_finetune, train

log = logging.getLogger(__name__)

METRICS = ("ade_m", "maxerr_m", "state_acc", "poss_acc")
ERROR_METRICS = ("ade_m", "maxerr_m")


@dataclass(frozen=True)
class GridEntry:
    name: str
    mask: MaskSpec | None = None
    modalities: tuple[str, ...] = ALL_MODALITIES

    def key(self) -> tuple:
        m = self.mask
        return (None if m is None else (m.temporal_pattern, m.modalities, m.ratio, m.placeholder_crop,
                                        m.placeholder_traj), self.modalities)

    @property
    def masking(self) -> str:
        return "none" if self.mask is None else self.mask.temporal_pattern

    @property
    def masked_modes(self) -> str:
        return "none" if self.mask is None else self.mask.modalities


def masking_grid(ratio: float = 0.5) -> list[GridEntry]:
    rows = [GridEntry("none")]
    for pattern in PATTERNS[::-1]:
        for mod in ("both", "traj", "crops"):
            rows.append(GridEntry(f"{pattern}:{mod}", MaskSpec(pattern, mod, ratio)))
    return rows


MODALITY_ROWS = (("crops",), ("types", "crops"), ("traj",), ("traj", "types"), ("traj", "crops"),
                 ("traj", "types", "crops"))


def modality_grid() -> list[GridEntry]:
    return [GridEntry("+".join(m), None, m) for m in MODALITY_ROWS]


GRIDS = {"masking": masking_grid, "modality": modality_grid}
BASELINES = {"masking": "none", "modality": "traj+types+crops"}


def run_entry(entry: GridEntry, base: TrainConfig, model_cfg: ModelConfig, train_seqs, val_seqs, test_seqs,
              seed: int, out_dir=None, pretrain_fraction: float = 0.5) -> dict:
    """Train one entry with one seed; returns val and test metric dicts."""
    torch.set_num_threads(1)
    cfg = replace(base, seed=seed, modalities=entry.modalities, phase="scratch", mask=None)
    if entry.mask is None:
        model = train(cfg, train_seqs, val_seqs, model_cfg, out_dir=out_dir).model
    else:
        mask = replace(entry.mask, seed=seed)
        model = pretrain_then_finetune(mask, cfg, train_seqs, val_seqs, model_cfg, pretrain_fraction,
                                       out_dir=out_dir)[1].model
    out = {}
    for split, seqs in (("val", val_seqs), ("test", test_seqs)):
        if not seqs:
            continue
        report, parts = evaluate_model(model, occlude(prepare(seqs), base.eval_occlusion), base.weights, split)
        row = report.row()
        out[split] = {k: float(row[k]) for k in METRICS}
        out[split]["loss"] = parts["total"]
    return out


def _job(args):
    entry, seed, kw = args
    return entry, seed, run_entry(entry, seed=seed, **kw)


def aggregate(entries: list[GridEntry], per_seed: dict, baseline: str) -> list[dict]:
    """Mean and std rows per (entry, split), followed by ratio rows against ``baseline``."""
    rows = []
    means = {}
    for e in entries:
        runs = per_seed[e.key()]
        for split in runs[0]:
            vals = {m: np.array([r[split][m] for r in runs]) for m in METRICS}
            row = {"kind": "result", "config": e.name, "masking": e.masking, "masked_modes": e.masked_modes,
                   "modalities": "+".join(e.modalities), "split": split, "n_seeds": len(runs)}
            for m in METRICS:
                row[m] = float(vals[m].mean())
                row[f"{m}_std"] = float(vals[m].std(ddof=1)) if len(runs) > 1 else 0.0
            means[(e.name, split)] = row
            rows.append(row)
    if not any(e.name == baseline for e in entries):
        raise ValueError(f"baseline {baseline!r} not in grid")
    for e in entries:
        for split in per_seed[e.key()][0]:
            ref, cur = means[(baseline, split)], means[(e.name, split)]
            row = {k: cur[k] for k in ("config", "masking", "masked_modes", "modalities", "split", "n_seeds")}
            row["kind"] = "ratio"
            for m in METRICS:
                row[m] = 1.0 if cur[m] == ref[m] else (cur[m] / ref[m] if ref[m] else math.nan)
                row[f"{m}_std"] = ""
            rows.append(row)
    return rows


RESULT_COLUMNS = ["kind", "config", "masking", "masked_modes", "modalities", "split", "n_seeds",
                  *[c for m in METRICS for c in (m, f"{m}_std")]]
SEED_COLUMNS = ["config", "seed", "split", *METRICS, "loss"]


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)


def run_ablation_grid(entries: list[GridEntry], base: TrainConfig, model_cfg: ModelConfig, train_seqs, val_seqs,
                      test_seqs=None, seeds=(0, 1, 2), baseline: str = "none", jobs: int = 1, out_dir=None,
                      pretrain_fraction: float = 0.5, cache: dict | None = None, log_fn=None):
    """Run every (entry, seed) once and return (summary rows, per-seed rows).

    ``cache`` maps ``(entry.key(), seed)`` to finished results and is updated in
    place, so a second grid sharing recipes skips them.
    """
    cache = {} if cache is None else cache
    out_dir = Path(out_dir) if out_dir else None
    todo, seen = [], set()
    for e in entries:
        for s in seeds:
            k = (e.key(), s)
            if k in cache or k in seen:
                continue
            seen.add(k)
            run_dir = out_dir / "runs" / f"{e.name.replace(':', '_')}_seed{s}" if out_dir else None
            kw = dict(base=base, model_cfg=model_cfg, train_seqs=train_seqs, val_seqs=val_seqs,
                      test_seqs=test_seqs or [], out_dir=run_dir, pretrain_fraction=pretrain_fraction)
            todo.append((e, s, kw))

    def done(e, s, res):
        cache[(e.key(), s)] = res
        if log_fn:
            log_fn({"config": e.name, "seed": s, **{f"{sp}_{m}": v for sp, d in res.items() for m, v in d.items()}})

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(todo), os.cpu_count() or 1)) as pool:
            for e, s, res in pool.map(_job, todo):
                done(e, s, res)
    else:
        for item in todo:
            done(*_job(item))

    per_seed = {e.key(): [cache[(e.key(), s)] for s in seeds] for e in entries}
    summary = aggregate(entries, per_seed, baseline)
    seed_rows = [{"config": e.name, "seed": s, "split": split, **cache[(e.key(), s)][split]}
                 for e in entries for s in seeds for split in cache[(e.key(), s)]]
    return summary, seed_rows
