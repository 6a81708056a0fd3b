"""Model checkpoints in the shared container format.

Header: ``kind="checkpoint"``, ``model_config`` (every ModelConfig field),
``dtype`` and free-form ``meta`` (training phase, step, recorded val loss, ...).
Payload: a single record whose arrays are the model parameters, named by
their ``state_dict`` keys, stored as f4 (or f8 for 64-bit models).
"""

from __future__ import annotations

import numpy as np
import torch

from .model import BallTransformer, ModelConfig, build_model
from .seqio import ContainerError, read_container, write_container


class CheckpointError(ContainerError):
    pass


def save_checkpoint(path, model: BallTransformer, meta: dict | None = None, state: dict | None = None) -> None:
    """Write ``model`` (or an explicit ``state`` dict for it) to ``path``."""
    state = state if state is not None else model.state_dict()
    dtype = next(iter(state.values())).dtype
    np_dtype = "<f8" if dtype == torch.float64 else "<f4"
    arrays = {k: v.detach().cpu().numpy().astype(np_dtype) for k, v in state.items()}
    header = {
        "kind": "checkpoint",
        "model_config": model.cfg.to_dict(),
        "dtype": "float64" if np_dtype == "<f8" else "float32",
        "meta": meta or {},
    }
    write_container(path, header, [arrays])


def load_checkpoint(path) -> tuple[BallTransformer, dict]:
    """Rebuild the model, checking every stored array against the config's shapes."""
    header, records = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: expected kind 'checkpoint', got {header.get('kind')!r}")
    if len(records) != 1:
        raise CheckpointError(f"{path}: expected one parameter record, found {len(records)}")
    cfg = ModelConfig.from_dict(header["model_config"])
    dtype = torch.float64 if header.get("dtype") == "float64" else torch.float32
    model = build_model(cfg, dtype=dtype)
    expected = model.state_dict()
    stored = records[0]
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: parameter names disagree with config (missing={missing}, unexpected={extra})")
    state = {}
    for name, ref in expected.items():
        arr = stored[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(arr.shape)}, config implies {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.array(arr)).to(dtype)
    model.load_state_dict(state)
    return model, header.get("meta", {})
