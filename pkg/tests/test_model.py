from dataclasses import replace

import numpy as np
import pytest
import torch

from ballinfer.losses import LossWeights, ball_loss, poss_loss, state_loss, total_loss
from ballinfer.model import (BallTransformer, ModelConfig, NonFiniteError, ShapeMismatchError, build_model, collate,
                             sinusoidal_encoding)

torch.set_num_threads(1)


def random_inputs(B=2, T=4, N=3, d_c=8, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    types = torch.zeros(B, N, 2, dtype=dtype)
    types[:, :, 0] = (torch.arange(N) % 2 == 0).to(dtype)
    types[:, :, 1] = 1 - types[:, :, 0]
    return dict(
        positions=torch.rand(B, T, N, 2, generator=g, dtype=dtype) * 2 - 1,
        player_types=types,
        crops=torch.rand(B, T, N, d_c, generator=g, dtype=dtype),
        crop_present=torch.ones(B, T, N, dtype=torch.bool),
        agent_valid=torch.ones(B, N, dtype=torch.bool),
    )


def small_cfg(**kw):
    base = dict(d=8, n_heads=2, d_ff=16, d_c=8, n_max=3, T=4)
    base.update(kw)
    return ModelConfig(**base)


def model64(seed=0, **kw):
    return build_model(small_cfg(**kw), seed=seed, dtype=torch.float64)


def tokens(model, inp):
    x = model.project_and_fuse(inp["positions"], inp["player_types"], inp["crops"], inp["crop_present"])
    return model.append_cls(x, inp["agent_valid"])


def test_fuse_shape_contract():
    model = build_model(ModelConfig(d=16, n_heads=2, d_ff=32, d_c=8, n_max=3, T=4), dtype=torch.float64)
    inp = random_inputs()
    x = model.project_and_fuse(inp["positions"], inp["player_types"], inp["crops"], inp["crop_present"])
    assert x.shape == (2, 4, 3, 16)


def test_identical_players_get_identical_rows():
    model = model64()
    inp = random_inputs()
    for k in ("positions", "crops"):
        inp[k][:, :, 1] = inp[k][:, :, 0]
    inp["player_types"][:, 1] = inp["player_types"][:, 0]
    x = model.project_and_fuse(inp["positions"], inp["player_types"], inp["crops"], inp["crop_present"])
    assert torch.equal(x[:, :, 0], x[:, :, 1])


@pytest.mark.parametrize("modality,key", [("traj", "positions"), ("types", "player_types"), ("crops", "crops")])
def test_zeroed_projection_removes_sensitivity(modality, key):
    model = model64()
    with torch.no_grad():
        getattr(model, f"proj_{modality}").weight.zero_()
    inp = random_inputs()
    base = model(**inp)
    bumped = dict(inp)
    bumped[key] = inp[key] + 0.3
    out = model(**bumped)
    assert torch.equal(base.ball, out.ball) and torch.equal(base.poss_logits, out.poss_logits)


def test_missing_crops_without_placeholder_rejected():
    model = model64(placeholder_crop=float("nan"))
    inp = random_inputs()
    inp["crop_present"][0, 0, 0] = False
    with pytest.raises(ValueError, match="placeholder"):
        model(**inp)


def test_cls_columns_replicated_and_valid():
    model = model64()
    x, valid = tokens(model, random_inputs())
    assert x.shape == (2, 4, 5, 8)
    assert torch.equal(x[:, :, 3], model.cls[0].expand(2, 4, 8))
    assert torch.equal(x[:, :, 4], model.cls[1].expand(2, 4, 8))
    assert valid[:, 3:].all()


def test_cls_receives_gradient():
    model = model64()
    inp = random_inputs()
    out = model(**inp)
    loss = total_loss((ball_loss(out.ball, torch.zeros_like(out.ball)),
                       state_loss(out.state_logits, torch.zeros(2, 4, dtype=torch.long)),
                       poss_loss(out.poss_logits, torch.zeros(2, 4, dtype=torch.long), inp["agent_valid"])))
    loss.backward()
    assert torch.all(model.cls.grad.abs().sum(-1) > 0)


def test_positional_encoding_closed_form():
    pe = sinusoidal_encoding(5, 8, dtype=torch.float64)
    assert torch.equal(pe[0], torch.tensor([0.0, 1.0] * 4, dtype=torch.float64))
    assert pe[1, 0] == pytest.approx(np.sin(1.0)) and pe[1, 3] == pytest.approx(np.cos(1.0 / 10000 ** (2 / 8)))
    assert not torch.equal(pe[0], pe[1])


def test_positional_encoding_distinguishes_identical_frames():
    model = model64()
    x = torch.ones(1, 4, 5, 8, dtype=torch.float64)
    y = model.add_positional_encoding(x)
    assert not torch.equal(y[0, 0], y[0, 1])
    assert torch.equal(model64(positional_encoding=False).add_positional_encoding(x), x)


def test_temporal_block_equivariant_without_pe():
    model = model64(positional_encoding=False)
    inp = random_inputs()
    perm = torch.tensor([2, 0, 3, 1])
    a = model(**inp)
    shuffled = {k: (v[:, perm] if k in ("positions", "crops", "crop_present") else v) for k, v in inp.items()}
    b = model(**shuffled)
    torch.testing.assert_close(b.ball, a.ball[:, perm], atol=1e-5, rtol=0)
    torch.testing.assert_close(b.poss_logits, a.poss_logits[:, perm], atol=1e-5, rtol=0)
    x, _ = tokens(model, inp)
    block = model.coarse.temporal[0]
    torch.testing.assert_close(model.sab_temporal(block, x[:, perm]), model.sab_temporal(block, x)[:, perm],
                               atol=1e-5, rtol=0)


def test_temporal_block_single_frame_closed_form():
    model = model64()
    block = model.coarse.temporal[0]
    x = torch.randn(6, 1, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    h = block.ln1(x + block.o(block.v(x)))
    expected = block.ln2(h + block.ff(h))
    torch.testing.assert_close(block(x), expected, atol=1e-12, rtol=0)


def test_temporal_block_has_no_cross_agent_leakage():
    model = model64()
    x, _ = tokens(model, random_inputs())
    block = model.coarse.temporal[1]
    a = model.sab_temporal(block, x)
    x2 = x.clone()
    x2[:, :, 1] += torch.randn_like(x2[:, :, 1])
    b = model.sab_temporal(block, x2)
    assert torch.equal(a[:, :, [0, 2, 3, 4]], b[:, :, [0, 2, 3, 4]])
    assert not torch.equal(a[:, :, 1], b[:, :, 1])
    assert a.shape == x.shape


def test_social_block_has_no_cross_frame_leakage():
    model = model64()
    x, valid = tokens(model, random_inputs())
    a = model.sab_social(model.coarse.social, x, valid)
    x2 = x.clone()
    x2[:, 2] += 1.0
    b = model.sab_social(model.coarse.social, x2, valid)
    assert torch.equal(a[:, [0, 1, 3]], b[:, [0, 1, 3]])
    assert a.shape == x.shape


def test_social_block_ignores_and_passes_through_invalid():
    model = model64()
    inp = random_inputs()
    x, valid = tokens(model, inp)
    valid = valid.clone()
    valid[:, 2] = False
    a = model.sab_social(model.coarse.social, x, valid)
    assert torch.equal(a[:, :, 2], x[:, :, 2])
    x2 = x.clone()
    x2[:, :, 2] = 1e3
    b = model.sab_social(model.coarse.social, x2, valid)
    torch.testing.assert_close(a[:, :, [0, 1, 3, 4]], b[:, :, [0, 1, 3, 4]], atol=1e-12, rtol=0)
    with pytest.raises(ValueError, match="no valid player"):
        model.sab_social(model.coarse.social, x, torch.cat([torch.zeros(2, 3, dtype=torch.bool),
                                                             torch.ones(2, 2, dtype=torch.bool)], 1))


def test_social_permutation_equivariance_in_block_and_forward():
    model = model64()
    inp = random_inputs()
    perm = torch.tensor([2, 0, 1])
    x, valid = tokens(model, inp)
    full = torch.cat([perm, torch.tensor([3, 4])])
    a = model.sab_social(model.coarse.social, x, valid)
    b = model.sab_social(model.coarse.social, x[:, :, full], valid[:, full])
    torch.testing.assert_close(b, a[:, :, full], atol=1e-5, rtol=1e-5)
    out = model(**inp)
    permuted = {k: (v[..., perm, :] if k in ("positions", "crops", "player_types") else v[..., perm])
                for k, v in inp.items()}
    out_p = model(**permuted)
    torch.testing.assert_close(out_p.poss_logits, out.poss_logits[..., perm], atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(out_p.ball, out.ball, atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(out_p.state_logits, out.state_logits, atol=1e-5, rtol=1e-5)


def test_stages_have_disjoint_equal_size_parameters():
    model = model64()
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(model.coarse) == count(model.fine) > 0
    ids = lambda m: {id(p) for p in m.parameters()}
    assert not ids(model.coarse) & ids(model.fine)
    x, valid = tokens(model, random_inputs())
    assert model.encoder_pass(model.fine, model.encoder_pass(model.coarse, x, valid), valid).shape == x.shape


def test_forward_shapes_and_padding_probabilities():
    model = build_model(small_cfg(n_max=5), dtype=torch.float64)
    inp = random_inputs(N=5)
    inp["agent_valid"][:, 3:] = False
    inp["player_types"][:, 3:] = 0
    out = model(**inp)
    assert out.ball.shape == (2, 4, 2) and out.state_logits.shape == (2, 4, 3) and out.poss_logits.shape == (2, 4, 5)
    prob = torch.softmax(out.poss_logits, -1)
    assert torch.all(prob[..., 3:] < 1e-30)


def test_shape_mismatch_rejected():
    model = model64()
    with pytest.raises(ShapeMismatchError):
        model(**random_inputs(T=5))
    with pytest.raises(ShapeMismatchError):
        model(**random_inputs(d_c=4))
    with pytest.raises(ShapeMismatchError):
        model(**random_inputs(N=4))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ValueError):
        ModelConfig(modalities=("audio",))
    cfg = ModelConfig(modalities=("crops", "traj"))
    assert cfg.modalities == ("traj", "crops")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_deterministic_and_dropout_via_generator():
    model = model64(dropout=0.2)
    inp = random_inputs()
    assert torch.equal(model(**inp).ball, model(**inp).ball)
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    a = model(**inp, generator=g1).ball
    assert torch.equal(a, model(**inp, generator=g2).ball)
    assert not torch.equal(a, model(**inp).ball)


def test_non_finite_reports_block():
    model = model64()
    with torch.no_grad():
        model.coarse.social.ff[2].bias.fill_(float("inf"))
    with pytest.raises(NonFiniteError, match="coarse.social"):
        model(**random_inputs())


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-6), (torch.float32, 1e-3)])
def test_jvp_matches_finite_differences(dtype, tol):
    model = build_model(small_cfg(), seed=2, dtype=dtype)
    inp = random_inputs(dtype=dtype)
    g = torch.Generator().manual_seed(9)
    tangent_pos = torch.randn(inp["positions"].shape, generator=g, dtype=dtype)
    tangent_crop = torch.randn(inp["crops"].shape, generator=g, dtype=dtype)

    def f(pos, crops):
        out = model(pos, inp["player_types"], crops, inp["crop_present"], inp["agent_valid"])
        return torch.cat([out.ball.flatten(), out.state_logits.flatten(), out.poss_logits.flatten()])

    jac_pos, jac_crop = torch.autograd.functional.jacobian(f, (inp["positions"], inp["crops"]))
    jvp = jac_pos.flatten(1) @ tangent_pos.flatten() + jac_crop.flatten(1) @ tangent_crop.flatten()
    # 64-bit central difference of a 64-bit copy is the oracle for both precisions
    m64 = build_model(small_cfg(), seed=2, dtype=torch.float64)
    m64.load_state_dict({k: v.double() for k, v in model.state_dict().items()})
    p64, c64 = inp["positions"].double(), inp["crops"].double()
    t_p, t_c = tangent_pos.double(), tangent_crop.double()

    def f64(pos, crops):
        out = m64(pos, inp["player_types"].double(), crops, inp["crop_present"], inp["agent_valid"])
        return torch.cat([out.ball.flatten(), out.state_logits.flatten(), out.poss_logits.flatten()])

    h = 1e-5
    with torch.no_grad():
        fd = (f64(p64 + h * t_p, c64 + h * t_c) - f64(p64 - h * t_p, c64 - h * t_c)) / (2 * h)
    rel = (jvp.double() - fd).norm() / fd.norm()
    assert rel <= tol


def test_batch_collation_runs(tiny_seqs, tiny_cfg):
    model = build_model(tiny_cfg, dtype=torch.float64)
    out = model.run(collate(tiny_seqs, 4, torch.float64))
    assert out.poss_logits.shape == (4, 4, 4)
    assert isinstance(model, BallTransformer)


def test_parameter_groups_cover_every_parameter():
    model = model64()
    groups = model.parameter_groups()
    names = [n for g in groups.values() for n, _ in g]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())
    assert {"coarse.temporal.0", "coarse.temporal.1", "coarse.social", "fine.social", "cls", "fusion"} <= set(groups)
