"""Multi-modal sociotemporal transformer.

Input tensors (B = batch, T = frames, N = agent slots, d_c = crop dims)::

    positions     (B, T, N, 2)   normalized pitch coordinates
    player_types  (B, N, 2)
    crops         (B, T, N, d_c)
    crop_present  (B, T, N)
    agent_valid   (B, N)

Tokens are laid out as (B, T, N + 2, d): the N player columns followed by the
ball CLS column and the state CLS column.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import N_STATES, Sequence, pad_to

MASK_VALUE = -1e9
ALL_MODALITIES = ("traj", "types", "crops")


class NonFiniteError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    n_heads: int = 4
    d_ff: int = 256
    d_c: int = 32
    n_max: int = 22
    T: int = 60
    S: int = N_STATES
    dropout: float = 0.0
    fusion_depth: int = 2
    head_depth: int = 2
    modalities: tuple[str, ...] = ALL_MODALITIES
    positional_encoding: bool = True
    placeholder_crop: float = -1.0

    def __post_init__(self):
        for name in ("d", "n_heads", "d_ff", "d_c", "n_max", "T", "S", "fusion_depth", "head_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        mods = tuple(self.modalities)
        if not mods or any(m not in ALL_MODALITIES for m in mods):
            raise ValueError(f"modalities must be a nonempty subset of {ALL_MODALITIES}")
        object.__setattr__(self, "modalities", tuple(m for m in ALL_MODALITIES if m in mods))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "modalities" in kw:
            kw["modalities"] = tuple(kw["modalities"])
        return cls(**kw)


@dataclass
class Batch:
    positions: torch.Tensor
    player_types: torch.Tensor
    crops: torch.Tensor
    crop_present: torch.Tensor
    agent_valid: torch.Tensor
    ball: torch.Tensor
    states: torch.Tensor
    possessor: torch.Tensor
    seq_ids: list = field(default_factory=list)

    def __len__(self):
        return self.positions.shape[0]

    def to(self, dtype) -> "Batch":
        f = lambda t: t.to(dtype)
        return Batch(f(self.positions), f(self.player_types), f(self.crops), self.crop_present,
                     self.agent_valid, f(self.ball), self.states, self.possessor, list(self.seq_ids))


@dataclass
class Predictions:
    ball: torch.Tensor          # (B, T, 2) normalized coordinates
    state_logits: torch.Tensor  # (B, T, S)
    poss_logits: torch.Tensor   # (B, T, N), invalid agents at MASK_VALUE


def stack_arrays(seqs: list[Sequence], n_max: int | None = None) -> dict[str, np.ndarray]:
    """Stack normalized sequences into numpy arrays, padding agents to ``n_max``."""
    if not seqs:
        raise ValueError("empty batch")
    n_max = n_max or max(s.n_agents for s in seqs)
    padded = [pad_to(s, n_max) for s in seqs]
    for s in padded:
        if not s.normalized:
            raise ValueError("batches must be built from normalized sequences")
    return {
        "positions": np.stack([s.positions for s in padded]),
        "player_types": np.stack([s.player_types for s in padded]),
        "crops": np.stack([s.crop_features for s in padded]),
        "crop_present": np.stack([s.crop_present for s in padded]),
        "agent_valid": np.stack([s.agent_valid for s in padded]),
        "ball": np.stack([s.ball_positions for s in padded]),
        "states": np.stack([s.ball_states for s in padded]),
        "possessor": np.stack([s.possessor for s in padded]),
        "seq_ids": np.array([s.seq_id for s in padded]),
    }


def batch_from_arrays(arrs: dict[str, np.ndarray], dtype=torch.float32) -> Batch:
    f = lambda k: torch.as_tensor(np.ascontiguousarray(arrs[k]), dtype=dtype)
    return Batch(
        positions=f("positions"),
        player_types=f("player_types"),
        crops=f("crops"),
        crop_present=torch.as_tensor(arrs["crop_present"], dtype=torch.bool),
        agent_valid=torch.as_tensor(arrs["agent_valid"], dtype=torch.bool),
        ball=f("ball"),
        states=torch.as_tensor(arrs["states"], dtype=torch.long),
        possessor=torch.as_tensor(arrs["possessor"], dtype=torch.long),
        seq_ids=[int(i) for i in arrs["seq_ids"]],
    )


def collate(seqs: list[Sequence], n_max: int | None = None, dtype=torch.float32) -> Batch:
    return batch_from_arrays(stack_arrays(seqs, n_max), dtype)


def dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout drawing from an explicit generator (``None`` or p == 0 disables it)."""
    if generator is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def sinusoidal_encoding(T: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(T, d + (d % 2), dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe[:, :d].to(dtype)


def mlp(d_in: int, d_hidden: int, d_out: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = d_in
    for _ in range(depth - 1):
        layers += [nn.Linear(width, d_hidden), nn.GELU()]
        width = d_hidden
    layers.append(nn.Linear(width, d_out))
    return nn.Sequential(*layers)


class SetAttentionBlock(nn.Module):
    """Post-norm self-attention block: LN(H + FF(H)) with H = LN(X + MHA(X))."""

    def __init__(self, d: int, n_heads: int, d_ff: int, p_drop: float = 0.0, name: str = "sab"):
        super().__init__()
        self.n_heads = n_heads
        self.p_drop = p_drop
        self.name = name
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def attention(self, x, valid=None, generator=None):
        M, L, d = x.shape
        h = self.n_heads
        split = lambda t: t.view(M, L, h, d // h).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        bias = None
        if valid is not None and not bool(valid.all()):
            bias = (~valid)[:, None, None, :].to(x.dtype) * MASK_VALUE
        if generator is None or self.p_drop == 0.0:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=bias)
        else:
            scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
            if bias is not None:
                scores = scores + bias
            out = dropout(torch.softmax(scores, dim=-1), self.p_drop, generator) @ v
        out = out.transpose(1, 2).reshape(M, L, d)
        return self.o(out)

    def forward(self, x, valid=None, generator=None):
        """``x``: (M, L, d) sets; ``valid``: (M, L) membership, invalid rows pass through."""
        h = self.ln1(x + dropout(self.attention(x, valid, generator), self.p_drop, generator))
        out = self.ln2(h + dropout(self.ff(h), self.p_drop, generator))
        if valid is not None:
            out = torch.where(valid[..., None], out, x)
        if not torch.isfinite(out).all():
            raise NonFiniteError(f"non-finite output in block {self.name}")
        return out


class Encoder(nn.Module):
    """Two temporal blocks followed by one social block."""

    def __init__(self, cfg: ModelConfig, stage: str):
        super().__init__()
        args = (cfg.d, cfg.n_heads, cfg.d_ff, cfg.dropout)
        self.temporal = nn.ModuleList([SetAttentionBlock(*args, name=f"{stage}.temporal{i}") for i in range(2)])
        self.social = SetAttentionBlock(*args, name=f"{stage}.social")


class BallTransformer(nn.Module):

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.proj_traj = nn.Linear(2, d)
        self.proj_types = nn.Linear(2, d)
        self.proj_crops = nn.Linear(cfg.d_c, d)
        fusion: list[nn.Module] = []
        width = 3 * d
        for _ in range(cfg.fusion_depth):
            fusion += [nn.Linear(width, d), nn.GELU()]
            width = d
        self.fusion = nn.Sequential(*fusion)
        self.cls = nn.Parameter(torch.zeros(2, d))
        self.coarse = Encoder(cfg, "coarse")
        self.fine = Encoder(cfg, "fine")
        self.ball_head = mlp(d, d, 2, cfg.head_depth)
        self.state_head = mlp(d, d, cfg.S, cfg.head_depth)
        self.poss_head = mlp(d, d, 1, cfg.head_depth)
        self.register_buffer("pe", sinusoidal_encoding(cfg.T, d), persistent=False)
        self.reset_parameters()

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=generator)
                    m.bias.zero_()
        with torch.no_grad():
            self.cls.normal_(0.0, 1.0, generator=generator).mul_(0.02)

    # pipeline stages ----------------------------------------------------
    def project_and_fuse(self, positions, player_types, crops, crop_present):
        cfg = self.cfg
        B, T, N, _ = positions.shape
        crops = torch.where(crop_present[..., None], crops, torch.full_like(crops, cfg.placeholder_crop))
        if not torch.isfinite(crops).all():
            raise ValueError("crop features contain non-finite values; substitute a placeholder first")
        if "traj" not in cfg.modalities:
            positions = torch.zeros_like(positions)
        if "types" not in cfg.modalities:
            player_types = torch.zeros_like(player_types)
        if "crops" not in cfg.modalities:
            crops = torch.zeros_like(crops)
        types = player_types[:, None].expand(B, T, N, 2)
        z = torch.cat([self.proj_traj(positions), self.proj_types(types), self.proj_crops(crops)], dim=-1)
        return self.fusion(z)

    def append_cls(self, x, agent_valid):
        B, T = x.shape[:2]
        cls = self.cls[None, None].expand(B, T, 2, -1)
        valid = torch.cat([agent_valid, torch.ones(B, 2, dtype=torch.bool, device=agent_valid.device)], dim=1)
        return torch.cat([x, cls], dim=2), valid

    def add_positional_encoding(self, x):
        if not self.cfg.positional_encoding:
            return x
        return x + self.pe[: x.shape[1]].to(x.dtype)[None, :, None, :]

    def sab_temporal(self, block: SetAttentionBlock, x, generator=None):
        B, T, A, d = x.shape
        y = block(x.permute(0, 2, 1, 3).reshape(B * A, T, d), None, generator)
        return y.view(B, A, T, d).permute(0, 2, 1, 3)

    def sab_social(self, block: SetAttentionBlock, x, valid, generator=None):
        B, T, A, d = x.shape
        if not valid[:, :-2].any(dim=1).all():
            raise ValueError("a sample has no valid player agents")
        v = valid[:, None, :].expand(B, T, A).reshape(B * T, A)
        return block(x.reshape(B * T, A, d), v, generator).view(B, T, A, d)

    def encoder_pass(self, enc: Encoder, x, valid, generator=None):
        for block in enc.temporal:
            x = self.sab_temporal(block, x, generator)
        return self.sab_social(enc.social, x, valid, generator)

    def encode(self, positions, player_types, crops, crop_present, agent_valid, generator=None):
        cfg = self.cfg
        B, T, N, _ = positions.shape
        if T != cfg.T or N > cfg.n_max or crops.shape[-1] != cfg.d_c:
            raise ShapeMismatchError(f"input (T={T}, N={N}, d_c={crops.shape[-1]}) does not fit config "
                                     f"(T={cfg.T}, n_max={cfg.n_max}, d_c={cfg.d_c})")
        x = self.project_and_fuse(positions, player_types, crops, crop_present)
        x, valid = self.append_cls(x, agent_valid)
        x = self.add_positional_encoding(x)
        x = self.encoder_pass(self.coarse, x, valid, generator)
        return self.encoder_pass(self.fine, x, valid, generator), valid

    def forward(self, positions, player_types, crops, crop_present, agent_valid, generator=None) -> Predictions:
        """Dropout is active only when a ``generator`` is passed."""
        x, _ = self.encode(positions, player_types, crops, crop_present, agent_valid, generator)
        N = positions.shape[2]
        ball = self.ball_head(x[:, :, N])
        state_logits = self.state_head(x[:, :, N + 1])
        poss = self.poss_head(x[:, :, :N]).squeeze(-1)
        poss = poss.masked_fill(~agent_valid[:, None, :], MASK_VALUE)
        return Predictions(ball, state_logits, poss)

    def run(self, batch: Batch, generator=None) -> Predictions:
        return self(batch.positions, batch.player_types, batch.crops, batch.crop_present,
                    batch.agent_valid, generator)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0] in ("coarse", "fine"):
                key = ".".join(parts[:3] if parts[1] == "temporal" else parts[:2])
            else:
                key = parts[0]
            groups.setdefault(key, []).append((name, p))
        return groups


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> BallTransformer:
    model = BallTransformer(cfg)
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model.to(dtype)


@torch.no_grad()
def predict(model: BallTransformer, seqs: list[Sequence], batch_size: int = 64) -> Predictions:
    """Deterministic inference over normalized sequences, padded to the model's ``n_max``."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    parts = []
    for i in range(0, len(seqs), batch_size):
        parts.append(model.run(collate(seqs[i:i + batch_size], model.cfg.n_max, dtype)))
    model.train(was)
    return Predictions(*(torch.cat([getattr(p, f) for p in parts]) for f in ("ball", "state_logits", "poss_logits")))
