"""Task losses, weighted total objective and frame-level evaluation metrics.

Losses operate on torch tensors with arbitrary leading batch dimensions and
average over frames first, then over the batch. Metrics operate on numpy
arrays in meters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datamodel import N_STATES, STATE_NAMES


@dataclass(frozen=True)
class LossWeights:
    ball: float = 1.0
    state: float = 3.0
    poss: float = 3.0

    def __post_init__(self):
        w = (self.ball, self.state, self.poss)
        if any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ValueError(f"loss weights must be nonnegative with one strictly positive, got {w}")


def ball_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the per-frame Euclidean distance, shapes (..., T, 2)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.linalg.vector_norm(pred - gt, dim=-1).mean(dim=-1).mean()


def max_err(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-sequence maximum per-frame distance, averaged over any batch dims."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.linalg.vector_norm(pred - gt, dim=-1).amax(dim=-1).mean()


def state_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over S states; ``gt`` holds class indices (..., T)."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, gt[..., None]).squeeze(-1).mean(dim=-1).mean()


def poss_loss(logits: torch.Tensor, gt: torch.Tensor, agent_valid: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over valid players. ``agent_valid`` is (..., N), ``gt`` (..., T)."""
    valid = agent_valid[..., None, :].expand_as(logits)
    if not valid.gather(-1, gt[..., None]).all():
        raise ValueError("possessor ground truth points at an invalid (padding) slot")
    logp = torch.log_softmax(logits.masked_fill(~valid, float("-inf")), dim=-1)
    return -logp.gather(-1, gt[..., None]).squeeze(-1).mean(dim=-1).mean()


def total_loss(parts, w: LossWeights = LossWeights()):
    """``parts`` = (ball, state, poss)."""
    ball, state, poss = parts
    return w.ball * ball + w.state * state + w.poss * poss


# evaluation -------------------------------------------------------------

EVAL_COLUMNS = ["split", "ade_m", "maxerr_m", "state_acc", "poss_acc",
                *[f"state_acc_{name}" for name in STATE_NAMES], "oracle_input"]


@dataclass
class EvalReport:
    split: str
    ade: float
    max_err: float
    state_acc: float
    poss_acc: float
    per_class_state_acc: list[float] = field(default_factory=lambda: [math.nan] * N_STATES)
    oracle_input: bool = False

    def row(self) -> dict:
        out = {"split": self.split, "ade_m": self.ade, "maxerr_m": self.max_err,
               "state_acc": self.state_acc, "poss_acc": self.poss_acc}
        for name, v in zip(STATE_NAMES, self.per_class_state_acc):
            out[f"state_acc_{name}"] = v
        out["oracle_input"] = str(self.oracle_input).lower()
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def argmax_lowest(x: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, ties resolved to the lowest index."""
    return np.argmax(x, axis=-1)


def frame_errors(pred_m: np.ndarray, gt_m: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred_m) - np.asarray(gt_m), axis=-1)


def evaluate(ball_pred_m, state_logits, poss_logits, ball_gt_m, states_gt, poss_gt,
             split: str = "test", aggregation: str = "pooled", oracle_input: bool = False) -> EvalReport:
    """Metrics over a split. Arrays are (B, T, ...) and ball positions in meters.

    ``pooled`` accuracies count every frame of the split once; ``per_sequence``
    averages per-sequence accuracies instead. ADE is the mean per-frame error
    and MaxErr the mean over sequences of the per-sequence maximum error.
    """
    err = frame_errors(ball_pred_m, ball_gt_m)
    state_hit = argmax_lowest(np.asarray(state_logits)) == np.asarray(states_gt)
    poss_hit = argmax_lowest(np.asarray(poss_logits)) == np.asarray(poss_gt)
    if aggregation == "pooled":
        state_acc, poss_acc = 100.0 * state_hit.mean(), 100.0 * poss_hit.mean()
    elif aggregation == "per_sequence":
        state_acc, poss_acc = 100.0 * state_hit.mean(axis=-1).mean(), 100.0 * poss_hit.mean(axis=-1).mean()
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    states_gt = np.asarray(states_gt)
    per_class = [100.0 * state_hit[states_gt == s].mean() if np.any(states_gt == s) else math.nan
                 for s in range(N_STATES)]
    return EvalReport(split, float(err.mean()), float(err.max(axis=-1).mean()), float(state_acc),
                      float(poss_acc), per_class, oracle_input)


def write_reports_csv(path, reports: list[EvalReport], extra: list[dict] | None = None) -> None:
    """One row per report; ``extra`` adds leading columns (same keys for every row)."""
    extra = extra or [{} for _ in reports]
    lead = list(extra[0].keys()) if extra else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=lead + EVAL_COLUMNS)
        w.writeheader()
        for rep, ex in zip(reports, extra):
            w.writerow({**ex, **rep.row()})
