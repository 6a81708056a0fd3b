"""Input masking for pre-training: CropDrop and its ablation variants.

``all_frames`` picks ``round(ratio * N_valid)`` valid players and hides the
selected modality over the whole clip; ``random_frames`` hides individual
(frame, player) cells with probability ``ratio``. Masked crop cells hold
``placeholder_crop`` and are flagged not present; masked trajectory cells hold
``placeholder_traj``. Player types and labels are never touched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .datamodel import Sequence

PATTERNS = ("all_frames", "random_frames")
MODALITIES = ("crops", "traj", "both")


@dataclass(frozen=True)
class MaskSpec:
    temporal_pattern: str = "all_frames"
    modalities: str = "crops"
    ratio: float = 0.5
    placeholder_crop: float = -1.0
    placeholder_traj: tuple[float, float] = (-2.0, -2.0)
    seed: int = 0

    def __post_init__(self):
        if self.temporal_pattern not in PATTERNS:
            raise ValueError(f"temporal_pattern must be one of {PATTERNS}")
        if self.modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0, 1]")
        if 0.0 <= self.placeholder_crop <= 1.0:
            raise ValueError("placeholder_crop must lie outside the crop range [0, 1]")
        if all(-1.0 <= v <= 1.0 for v in self.placeholder_traj):
            raise ValueError("placeholder_traj must lie outside the normalized square [-1, 1]^2")
        object.__setattr__(self, "placeholder_traj", tuple(float(v) for v in self.placeholder_traj))

    @property
    def masks_crops(self) -> bool:
        return self.modalities in ("crops", "both")

    @property
    def masks_traj(self) -> bool:
        return self.modalities in ("traj", "both")

    @property
    def name(self) -> str:
        return f"{self.temporal_pattern}:{self.modalities}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def mask_rng(seed: int, epoch: int, seq_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, seq_id])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_cells(agent_valid: np.ndarray, n_frames: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean (T, N) array of cells to hide."""
    valid_idx = np.flatnonzero(agent_valid)
    cells = np.zeros((n_frames, agent_valid.size), bool)
    if spec.ratio == 0.0 or valid_idx.size == 0:
        return cells
    if spec.temporal_pattern == "all_frames":
        k = round_half_up(spec.ratio * valid_idx.size)
        if k == valid_idx.size and spec.masks_traj:
            warnings.warn("masking trajectories of every valid player: the model is fully blinded", stacklevel=3)
        chosen = rng.choice(valid_idx, size=k, replace=False)
        cells[:, chosen] = True
    else:
        cells = (rng.random(cells.shape) < spec.ratio) & agent_valid[None, :]
    return cells


def mask_arrays(positions, crops, crop_present, agent_valid, spec: MaskSpec, rng):
    """Array-level masking used by both :func:`apply_mask` and batch training."""
    cells = select_cells(agent_valid, positions.shape[0], spec, rng)
    positions, crops, crop_present = positions.copy(), crops.copy(), crop_present.copy()
    if spec.masks_traj:
        positions[cells] = spec.placeholder_traj
    if spec.masks_crops:
        crops[cells] = spec.placeholder_crop
        crop_present[cells] = False
    return positions, crops, crop_present, cells


def apply_mask(seq: Sequence, spec: MaskSpec, epoch: int = 0) -> Sequence:
    """Mask one normalized sequence; the draw is keyed by (seed, epoch, seq_id)."""
    if not seq.normalized:
        raise ValueError("apply_mask expects a normalized sequence")
    if spec.ratio == 0.0:
        return seq
    pos, crops, present, _ = mask_arrays(seq.positions, seq.crop_features, seq.crop_present, seq.agent_valid,
                                         spec, mask_rng(spec.seed, epoch, seq.seq_id))
    return seq.replace(positions=pos, crop_features=crops, crop_present=present)
