"""Parameter-free reference predictors.

These read the ground-truth ball position, which the model never sees, so
their rows are reported with ``oracle_input=true``.
"""

from __future__ import annotations

import numpy as np


def nearest_player_possessor(positions: np.ndarray, ball: np.ndarray, agent_valid: np.ndarray | None = None) -> np.ndarray:
    """Per frame, the valid player closest to the ball (ties go to the lowest index).

    positions (T, N, 2), ball (T, 2) -> (T,) indices.
    """
    positions = np.asarray(positions, dtype=np.float64)
    d = np.linalg.norm(positions - np.asarray(ball)[:, None, :], axis=-1)
    if agent_valid is not None:
        d = np.where(np.asarray(agent_valid)[None, :], d, np.inf)
    return np.argmin(d, axis=-1)


def ball_centroid_baseline(positions: np.ndarray, agent_valid: np.ndarray | None = None) -> np.ndarray:
    """Centroid of valid players per frame, (T, N, 2) -> (T, 2)."""
    positions = np.asarray(positions, dtype=np.float64)
    if agent_valid is None:
        return positions.mean(axis=1)
    return positions[:, np.asarray(agent_valid)].mean(axis=1)
