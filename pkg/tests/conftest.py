from pathlib import Path

import numpy as np
import pytest
import torch

from ballinfer.datamodel import PitchSpec, Sequence, normalize_sequence
from ballinfer.model import ModelConfig, build_model
from ballinfer.synthgen import GenParams, generate_dataset

FIXTURES = Path(__file__).parent / "fixtures"

# PASS/FAIL lines of the acceptance checks, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def random_sequence(rng, T=6, N=4, d_c=3, seq_id=0, float32_exact=True, pitch=PitchSpec()):
    """Arbitrary valid sequence (not physically plausible) for format and shape tests."""
    q = (lambda a: a.astype(np.float32).astype(np.float64)) if float32_exact else (lambda a: a)
    half = pitch.half_extent
    types = np.zeros((N, 2))
    types[np.arange(N), rng.integers(0, 2, N)] = 1.0
    present = rng.random((T, N)) < 0.8
    feats = np.where(present[..., None], q(rng.random((T, N, d_c))), 0.0)
    return Sequence(
        positions=q(rng.uniform(-1, 1, (T, N, 2)) * half),
        player_types=types,
        crop_features=feats,
        crop_present=present,
        agent_valid=np.ones(N, bool),
        ball_positions=q(rng.uniform(-1, 1, (T, 2)) * half),
        ball_states=rng.integers(0, 3, T),
        possessor=rng.integers(0, N, T),
        seq_id=seq_id,
        pitch=pitch,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_params():
    return GenParams(n_players_per_team=2, n_frames=4, crop_dim=5, seed=3)


@pytest.fixture(scope="session")
def tiny_seqs(tiny_params):
    """Four normalized clips with T=4, N=4 (two per team)."""
    return [normalize_sequence(s) for s in generate_dataset(tiny_params, 4)]


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d=8, n_heads=2, d_ff=16, d_c=5, n_max=4, T=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=0, dtype=torch.float64)
