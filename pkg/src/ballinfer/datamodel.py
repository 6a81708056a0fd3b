"""Sequence containers, pitch normalization and agent padding.

A :class:`Sequence` holds one clip of player-centric inputs together with the
ball, ball-state and possessor labels. Instances are treated as immutable:
every operation returns a new object and arrays are flagged read-only.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

OUT_OF_BOUNDS_MARGIN = 5.0
FRAME_RATE_HZ = 6.25


class BallState(enum.IntEnum):
    PASS = 0
    POSSESSION = 1
    UNCONTROLLED = 2


STATE_NAMES = tuple(s.name.lower() for s in BallState)
N_STATES = len(BallState)

OFFENSE = np.array([1.0, 0.0])
DEFENSE = np.array([0.0, 1.0])


class SequenceError(ValueError):
    """Raised when a sequence violates its invariants."""


@dataclass(frozen=True)
class PitchSpec:
    length: float = 105.0
    width: float = 68.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"pitch dimensions must be positive, got {self.length}x{self.width}")

    @property
    def half_extent(self) -> np.ndarray:
        return np.array([self.length / 2.0, self.width / 2.0])


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sequence:
    """One clip. Shapes: T frames, N agent slots, d_c crop feature dims.

    positions      (T, N, 2)  meters, or [-1, 1] when ``normalized``
    player_types   (N, 2)     one-hot offense/defense, zeros for padding
    crop_features  (T, N, d_c) in [0, 1] where ``crop_present``
    crop_present   (T, N)
    agent_valid    (N,)
    ball_positions (T, 2)
    ball_states    (T,)       :class:`BallState` codes
    possessor      (T,)       agent index, last-toucher during pass/uncontrolled
    """

    positions: np.ndarray
    player_types: np.ndarray
    crop_features: np.ndarray
    crop_present: np.ndarray
    agent_valid: np.ndarray
    ball_positions: np.ndarray
    ball_states: np.ndarray
    possessor: np.ndarray
    frame_rate_hz: float = FRAME_RATE_HZ
    seq_id: int = 0
    normalized: bool = False
    pitch: PitchSpec = field(default_factory=PitchSpec)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "positions", _frozen(self.positions, np.float64))
        set_(self, "player_types", _frozen(self.player_types, np.float64))
        set_(self, "crop_features", _frozen(self.crop_features, np.float64))
        set_(self, "crop_present", _frozen(self.crop_present, bool))
        set_(self, "agent_valid", _frozen(self.agent_valid, bool))
        set_(self, "ball_positions", _frozen(self.ball_positions, np.float64))
        set_(self, "ball_states", _frozen(self.ball_states, np.int64))
        set_(self, "possessor", _frozen(self.possessor, np.int64))
        set_(self, "seq_id", int(self.seq_id))
        set_(self, "frame_rate_hz", float(self.frame_rate_hz))
        self.validate()

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def crop_dim(self) -> int:
        return self.crop_features.shape[2]

    @property
    def n_valid(self) -> int:
        return int(self.agent_valid.sum())

    def replace(self, **changes) -> "Sequence":
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        T, N = self.positions.shape[:2]
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise SequenceError(f"positions must be (T, N, 2), got {self.positions.shape}")
        if T < 2 or N < 2:
            raise SequenceError(f"need T >= 2 and N >= 2, got T={T}, N={N}")
        expected = {
            "player_types": (N, 2),
            "crop_present": (T, N),
            "agent_valid": (N,),
            "ball_positions": (T, 2),
            "ball_states": (T,),
            "possessor": (T,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise SequenceError(f"{name} must have shape {shape}, got {got}")
        if self.crop_features.ndim != 3 or self.crop_features.shape[:2] != (T, N):
            raise SequenceError(f"crop_features must be (T, N, d_c), got {self.crop_features.shape}")
        if not self.frame_rate_hz > 0:
            raise SequenceError("frame_rate_hz must be positive")

        check_finite(self.positions, "positions")
        check_finite(self.ball_positions, "ball_positions")

        valid = self.agent_valid
        if not valid.any():
            raise SequenceError("sequence has no valid agents")
        rows = self.player_types[valid]
        if not (np.all((rows == 0) | (rows == 1)) and np.all(rows.sum(axis=1) == 1)):
            raise SequenceError("valid player_types rows must be one-hot over {offense, defense}")
        if np.any(self.player_types[~valid] != 0):
            raise SequenceError("padding agents must carry an all-zero type vector")
        if np.any(self.ball_states < 0) or np.any(self.ball_states >= N_STATES):
            raise SequenceError("ball_states out of range")
        if np.any(self.possessor < 0) or np.any(self.possessor >= N):
            raise SequenceError("possessor index out of range")
        bad = np.flatnonzero(~valid[self.possessor])
        if bad.size:
            raise SequenceError(f"possessor at frame {bad[0]} points at invalid slot {self.possessor[bad[0]]}")
        present = self.crop_features[self.crop_present]
        if present.size and (np.any(present < 0) or np.any(present > 1) or not np.all(np.isfinite(present))):
            raise SequenceError("present crop features must lie in [0, 1]")

        if not self.normalized:
            lim = self.pitch.half_extent + OUT_OF_BOUNDS_MARGIN
            p = self.positions[:, valid]
            if np.any(np.abs(p) > lim) or np.any(np.abs(self.ball_positions) > lim):
                raise SequenceError("coordinates exceed pitch bounds plus margin")


def check_finite(arr: np.ndarray, name: str) -> None:
    """Reject non-finite coordinates, naming the first offending frame (and agent)."""
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = np.argwhere(bad)[0]
        if arr.ndim == 3:
            raise SequenceError(f"non-finite {name} at frame {idx[0]}, agent {idx[1]}")
        raise SequenceError(f"non-finite {name} at frame {idx[0]}")


def to_normalized(xy: np.ndarray, pitch: PitchSpec) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) / pitch.half_extent


def to_meters(xy: np.ndarray, pitch: PitchSpec) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) * pitch.half_extent


def normalize_sequence(seq: Sequence, pitch: PitchSpec | None = None) -> Sequence:
    """Map positions and ball positions from meters into [-1, 1]^2."""
    pitch = pitch or seq.pitch
    if seq.normalized:
        raise SequenceError("sequence is already normalized")
    check_finite(seq.positions, "positions")
    check_finite(seq.ball_positions, "ball_positions")
    positions = to_normalized(seq.positions, pitch)
    positions[:, ~seq.agent_valid] = 0.0
    return seq.replace(
        positions=positions,
        ball_positions=to_normalized(seq.ball_positions, pitch),
        normalized=True,
        pitch=pitch,
    )


def denormalize_sequence(seq: Sequence) -> Sequence:
    if not seq.normalized:
        raise SequenceError("sequence is not normalized")
    positions = to_meters(seq.positions, seq.pitch)
    positions[:, ~seq.agent_valid] = 0.0
    return seq.replace(
        positions=positions,
        ball_positions=to_meters(seq.ball_positions, seq.pitch),
        normalized=False,
    )


def pad_to(seq: Sequence, n_max: int) -> Sequence:
    """Append padding agents up to ``n_max`` slots; labels stay untouched."""
    N = seq.n_agents
    if n_max < N:
        raise SequenceError(f"cannot pad {N} agents down to n_max={n_max}")
    extra = n_max - N
    if extra == 0:
        return seq
    T, d_c = seq.n_frames, seq.crop_dim
    return seq.replace(
        positions=np.concatenate([seq.positions, np.zeros((T, extra, 2))], axis=1),
        player_types=np.concatenate([seq.player_types, np.zeros((extra, 2))], axis=0),
        crop_features=np.concatenate([seq.crop_features, np.zeros((T, extra, d_c))], axis=1),
        crop_present=np.concatenate([seq.crop_present, np.zeros((T, extra), bool)], axis=1),
        agent_valid=np.concatenate([seq.agent_valid, np.zeros(extra, bool)]),
    )


def sequences_equal(a: Sequence, b: Sequence) -> bool:
    """Bitwise equality of all arrays plus scalar metadata."""
    arrays = ("positions", "player_types", "crop_features", "crop_present", "agent_valid",
              "ball_positions", "ball_states", "possessor")
    if (a.seq_id, a.normalized, a.pitch, a.frame_rate_hz) != (b.seq_id, b.normalized, b.pitch, b.frame_rate_hz):
        return False
    for name in arrays:
        x, y = getattr(a, name), getattr(b, name)
        if x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True
