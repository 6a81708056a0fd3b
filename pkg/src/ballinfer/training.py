"""Scratch, masked pre-training and fine-tuning loops.

Sequences enter in meters and are normalized here. Ball loss is measured in
meters, so the loss weights keep their meaning regardless of pitch size.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import save_checkpoint
from .datamodel import PitchSpec, Sequence, normalize_sequence
from .masking import MaskSpec, apply_mask, mask_arrays, mask_rng
from .model import (ALL_MODALITIES, BallTransformer, ModelConfig, NonFiniteError, Predictions,
                    batch_from_arrays, build_model, collate, stack_arrays)

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune", "scratch")
EVAL_OCCLUSION_SEED = 7_000_003


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: str | None = None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "scratch"
    mask: MaskSpec | None = None
    modalities: tuple[str, ...] = ALL_MODALITIES
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    warmup_steps: int = 0
    seed: int = 0
    eval_interval: int = 200
    weights: L.LossWeights = L.LossWeights()
    eval_occlusion: float = 0.0
    dtype: str = "float32"
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.phase == "pretrain" and self.mask is None:
            raise ValueError("pretrain phase requires a mask spec")
        if self.phase != "pretrain" and self.mask is not None:
            raise ValueError("masking is only applied in the pretrain phase")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("steps, batch_size and eval_interval must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0.0 <= self.eval_occlusion <= 1.0:
            raise ValueError("eval_occlusion must lie in [0, 1]")
        object.__setattr__(self, "modalities", tuple(m for m in ALL_MODALITIES if m in self.modalities))

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d


@dataclass
class TrainResult:
    model: BallTransformer
    best_val_loss: float
    best_step: int
    log: list[dict] = field(default_factory=list)
    checkpoint: str | None = None


def prepare(seqs: list[Sequence]) -> list[Sequence]:
    return [s if s.normalized else normalize_sequence(s) for s in seqs]


def occlude(seqs: list[Sequence], ratio: float, seed: int = EVAL_OCCLUSION_SEED) -> list[Sequence]:
    """Replace the crops of ``ratio`` of the players by the placeholder (fixed draw)."""
    if ratio == 0.0:
        return seqs
    spec = MaskSpec("all_frames", "crops", ratio, seed=seed)
    return [apply_mask(s, spec) for s in seqs]


def compute_losses(model: BallTransformer, preds: Predictions, batch, pitch: PitchSpec):
    half = torch.tensor(pitch.half_extent, dtype=preds.ball.dtype)
    b = L.ball_loss(preds.ball * half, batch.ball * half)
    s = L.state_loss(preds.state_logits, batch.states)
    p = L.poss_loss(preds.poss_logits, batch.possessor, batch.agent_valid)
    return b, s, p


@torch.no_grad()
def evaluate_model(model: BallTransformer, seqs: list[Sequence], weights: L.LossWeights = L.LossWeights(),
                   split: str = "val", batch_size: int = 128) -> tuple[L.EvalReport, dict]:
    """EvalReport plus mean loss parts over normalized ``seqs``."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    pitch = seqs[0].pitch
    half = pitch.half_extent
    sums = np.zeros(3)
    outs = {k: [] for k in ("ball", "state", "poss", "ball_gt", "states", "possessor")}
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        batch = collate(chunk, model.cfg.n_max, dtype)
        preds = model.run(batch)
        parts = compute_losses(model, preds, batch, pitch)
        sums += np.array([float(x) for x in parts]) * len(chunk)
        outs["ball"].append(preds.ball.double().numpy() * half)
        outs["state"].append(preds.state_logits.double().numpy())
        outs["poss"].append(preds.poss_logits.double().numpy())
        outs["ball_gt"].append(batch.ball.double().numpy() * half)
        outs["states"].append(batch.states.numpy())
        outs["possessor"].append(batch.possessor.numpy())
    model.train(was)
    cat = {k: np.concatenate(v) for k, v in outs.items()}
    report = L.evaluate(cat["ball"], cat["state"], cat["poss"], cat["ball_gt"], cat["states"], cat["possessor"],
                        split=split)
    b, s, p = sums / len(seqs)
    total = float(L.total_loss((b, s, p), weights))
    return report, {"ball": b, "state": s, "poss": p, "total": total}


def _lr_factor(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (step - cfg.warmup_steps) / span)))


def train(cfg: TrainConfig, train_seqs: list[Sequence], val_seqs: list[Sequence],
          model_cfg: ModelConfig | None = None, init_model: BallTransformer | None = None,
          out_dir: str | Path | None = None, log_fn=None) -> TrainResult:
    """Minimize the weighted multi-task loss; returns the best-on-validation model.

    ``init_model`` is required for the finetune phase. When ``out_dir`` is
    given, ``checkpoint.bin`` (best model) and ``train_log.jsonl`` are written.
    """
    if cfg.phase == "finetune" and init_model is None:
        raise ValueError("finetune phase requires an initial model")
    train_seqs, val_seqs = prepare(train_seqs), prepare(val_seqs)
    val_seqs = occlude(val_seqs, cfg.eval_occlusion)
    pitch = train_seqs[0].pitch
    dtype = cfg.torch_dtype

    if init_model is not None:
        model = copy.deepcopy(init_model).to(dtype)
        if model.cfg.modalities != cfg.modalities:
            raise ValueError(f"initial model uses modalities {model.cfg.modalities}, config asks for {cfg.modalities}")
    else:
        first = train_seqs[0]
        base = model_cfg or ModelConfig()
        mcfg = replace(base, d_c=first.crop_dim, T=first.n_frames,
                       n_max=max(base.n_max, max(s.n_agents for s in train_seqs)), modalities=cfg.modalities)
        model = build_model(mcfg, seed=cfg.seed, dtype=dtype)
    mcfg = model.cfg

    arrays = stack_arrays(train_seqs, mcfg.n_max)
    n = len(train_seqs)
    order_rng = np.random.default_rng([cfg.seed, 1])
    drop_gen = torch.Generator().manual_seed(cfg.seed + 17) if mcfg.dropout > 0 else None

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, cfg))

    out_dir = Path(out_dir) if out_dir else None
    ckpt_path = str(out_dir / "checkpoint.bin") if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w")

    records: list[dict] = []
    best = {"loss": math.inf, "step": -1, "state": None}
    running = np.zeros(4)
    n_running = 0

    def do_eval(step: int):
        nonlocal running, n_running
        report, parts = evaluate_model(model, val_seqs, cfg.weights, split="val")
        rec = {"step": step, "phase": cfg.phase, "lr": opt.param_groups[0]["lr"],
               "train": dict(zip(("ball", "state", "poss", "total"), (running / max(n_running, 1)).tolist()))
               if n_running else None,
               "val_loss": parts, "val": report.to_dict()}
        running, n_running = np.zeros(4), 0
        records.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if log_fn:
            log_fn(rec)
        if parts["total"] < best["loss"]:
            best.update(loss=parts["total"], step=step,
                        state={k: v.detach().clone() for k, v in model.state_dict().items()})

    def meta():
        return {"phase": cfg.phase, "step": best["step"], "val_loss": best["loss"], "train_config": cfg.to_dict()}

    try:
        model.train()
        do_eval(0)
        epoch, perm, cursor = 0, order_rng.permutation(n), 0
        for step in range(cfg.steps):
            if cursor + cfg.batch_size > n and cursor > 0:
                epoch, perm, cursor = epoch + 1, order_rng.permutation(n), 0
            idx = perm[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            sub = {k: v[idx] for k, v in arrays.items()}
            if cfg.phase == "pretrain":
                for j, sid in enumerate(sub["seq_ids"]):
                    pos, crops, present, _ = mask_arrays(sub["positions"][j], sub["crops"][j], sub["crop_present"][j],
                                                         sub["agent_valid"][j], cfg.mask,
                                                         mask_rng(cfg.mask.seed, epoch, int(sid)))
                    sub["positions"][j], sub["crops"][j], sub["crop_present"][j] = pos, crops, present
            batch = batch_from_arrays(sub, dtype)
            try:
                preds = model.run(batch, drop_gen)
            except NonFiniteError as exc:
                raise TrainingDiverged(step) from exc
            parts = compute_losses(model, preds, batch, pitch)
            loss = L.total_loss(parts, cfg.weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            sched.step()
            running += np.array([parts[0].item(), parts[1].item(), parts[2].item(), loss.item()])
            n_running += 1
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                do_eval(step + 1)
    except TrainingDiverged as exc:
        if ckpt_path and best["state"] is not None:
            save_checkpoint(ckpt_path, model, meta(), state=best["state"])
            exc.checkpoint = ckpt_path
        raise
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best["state"])
    model.eval()
    if ckpt_path:
        save_checkpoint(ckpt_path, model, meta())
    return TrainResult(model, best["loss"], best["step"], records, ckpt_path)


def pretrain_then_finetune(mask: MaskSpec, base: TrainConfig, train_seqs, val_seqs, model_cfg=None,
                           pretrain_fraction: float = 0.5, out_dir=None, log_fn=None) -> tuple[TrainResult, TrainResult]:
    """Split ``base.steps`` between a masked pre-training and an unmasked fine-tuning."""
    n_pre = max(1, int(round(base.steps * pretrain_fraction)))
    n_fine = max(1, base.steps - n_pre)
    pre_dir = Path(out_dir) / "pretrain" if out_dir else None
    fine_dir = Path(out_dir) / "finetune" if out_dir else None
    pre = train(replace(base, phase="pretrain", mask=mask, steps=n_pre), train_seqs, val_seqs, model_cfg,
                out_dir=pre_dir, log_fn=log_fn)
    fine = train(replace(base, phase="finetune", mask=None, steps=n_fine, init_checkpoint=pre.checkpoint),
                 train_seqs, val_seqs, init_model=pre.model, out_dir=fine_dir, log_fn=log_fn)
    return pre, fine

