import numpy as np
import pytest
import torch

from ballinfer.datamodel import (PitchSpec, SequenceError, denormalize_sequence, normalize_sequence, pad_to,
                                 to_normalized)
from ballinfer.model import build_model, collate

from conftest import random_sequence


def test_center_maps_to_origin():
    assert np.array_equal(to_normalized(np.array([0.0, 0.0]), PitchSpec(105, 68)), [0.0, 0.0])


def test_corner_maps_to_unit_corner():
    assert np.array_equal(to_normalized(np.array([52.5, 34.0]), PitchSpec(105, 68)), [1.0, 1.0])


def test_normalize_round_trip(rng):
    worst = 0.0
    for k in range(100):
        seq = random_sequence(rng, seq_id=k, float32_exact=False)
        back = denormalize_sequence(normalize_sequence(seq))
        worst = max(worst, np.abs(back.positions - seq.positions).max(),
                    np.abs(back.ball_positions - seq.ball_positions).max())
    assert worst <= 1e-9


def test_non_finite_rejected_with_location(rng):
    seq = random_sequence(rng)
    pos = seq.positions.copy()
    pos[2, 1, 0] = np.nan
    with pytest.raises(SequenceError, match="frame 2, agent 1"):
        seq.replace(positions=pos)


def test_invariants_enforced(rng):
    seq = random_sequence(rng, N=3)
    with pytest.raises(SequenceError):
        seq.replace(player_types=np.array([[1, 1], [1, 0], [0, 1]]))
    valid = np.array([True, True, False])
    types = seq.player_types.copy()
    types[2] = 0
    poss = np.zeros(seq.n_frames, int)
    poss[0] = 2
    with pytest.raises(SequenceError, match="invalid slot"):
        seq.replace(agent_valid=valid, player_types=types, possessor=poss)
    with pytest.raises(SequenceError, match="pitch bounds"):
        seq.replace(positions=seq.positions + 100.0)
    with pytest.raises(ValueError):
        PitchSpec(0, 68)


def test_arrays_are_read_only(rng):
    seq = random_sequence(rng)
    with pytest.raises(ValueError):
        seq.positions[0, 0, 0] = 1.0


def test_pad_adds_one_invalid_agent(rng):
    seq = random_sequence(rng, N=21)
    padded = pad_to(seq, 22)
    assert padded.n_agents == 22
    assert np.sum(~padded.agent_valid) == 1
    assert np.array_equal(padded.player_types[-1], [0, 0])
    assert not padded.crop_present[:, -1].any()
    assert np.array_equal(padded.positions[:, -1], np.zeros((seq.n_frames, 2)))
    assert np.array_equal(padded.possessor, seq.possessor)
    assert np.array_equal(padded.positions[:, :21], seq.positions)
    assert np.array_equal(padded.crop_features[:, :21], seq.crop_features)


def test_pad_identity_and_rejection(rng):
    seq = random_sequence(rng, N=22)
    assert pad_to(seq, 22) is seq
    with pytest.raises(SequenceError):
        pad_to(seq, 21)


def test_padded_forward_matches_unpadded(tiny_seqs, tiny_cfg):
    from dataclasses import replace
    cfg = replace(tiny_cfg, n_max=7)
    model = build_model(cfg, seed=1, dtype=torch.float64)
    short = collate(tiny_seqs, n_max=4, dtype=torch.float64)
    long = collate(tiny_seqs, n_max=7, dtype=torch.float64)
    with torch.no_grad():
        a, b = model.run(short), model.run(long)
    torch.testing.assert_close(a.ball, b.ball, atol=1e-5, rtol=0)
    torch.testing.assert_close(a.state_logits, b.state_logits, atol=1e-5, rtol=0)
    torch.testing.assert_close(a.poss_logits, b.poss_logits[..., :4], atol=1e-5, rtol=0)
    assert torch.all(torch.softmax(b.poss_logits, -1)[..., 4:] == 0)
