"""Ingestion boundary for per-player crop descriptors.

Any extractor can feed the model as long as it emits fixed-size vectors with
a known value range, keyed by (sequence id, frame, agent). Feature files use
the same container as sequence files, with ``kind="features"`` and one record
per sequence holding arrays ``seq_id`` (u4), ``t`` (u2, K), ``n`` (u2, K) and
``features`` (f4, K x d_c). Slots without a key are marked not present.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .datamodel import Sequence
from .seqio import ContainerError, read_container, write_container
from .synthgen import GenParams, simulate_crop_features

log = logging.getLogger(__name__)


class FeatureDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSource:
    provider: str
    d_c: int
    value_range: tuple[float, float] = (0.0, 1.0)
    path: str | None = None
    gen_params: GenParams | None = None
    seed: int = 0

    def __post_init__(self):
        if self.provider not in ("synthetic", "file"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.d_c <= 0:
            raise ValueError("d_c must be positive")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError("value_range must satisfy lo < hi")
        if self.provider == "file" and not self.path:
            raise ValueError("file provider needs a path")


def feature_rng(seed: int, seq_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, seq_id, 0xC0])


def write_feature_file(path, entries: dict, d_c: int, value_range=(0.0, 1.0)) -> None:
    """``entries`` maps seq_id -> (t indices, n indices, features K x d_c)."""
    records = []
    for sid, (t, n, feats) in sorted(entries.items()):
        feats = np.asarray(feats, dtype="<f4").reshape(len(t), d_c)
        records.append({
            "seq_id": np.array(sid, dtype="<u4"),
            "t": np.asarray(t, dtype="<u2"),
            "n": np.asarray(n, dtype="<u2"),
            "features": feats,
        })
    write_container(path, {"kind": "features", "d_c": int(d_c), "value_range": list(value_range)}, records)


def _attach_from_file(seqs: list[Sequence], source: FeatureSource) -> list[Sequence]:
    header, records = read_container(source.path)
    if header.get("kind") != "features":
        raise ContainerError(f"{source.path}: expected kind 'features', got {header.get('kind')!r}")
    if int(header["d_c"]) != source.d_c:
        raise FeatureDimensionError(f"feature file has d_c={header['d_c']}, expected d_c={source.d_c}")
    lo, hi = source.value_range
    by_id = {int(r["seq_id"].reshape(-1)[0]): r for r in records}
    out, missing, total = [], 0, 0
    for seq in seqs:
        T, N = seq.n_frames, seq.n_agents
        feats = np.zeros((T, N, source.d_c))
        present = np.zeros((T, N), bool)
        rec = by_id.get(seq.seq_id)
        if rec is not None:
            t, n = rec["t"].astype(np.int64), rec["n"].astype(np.int64)
            ok = (t < T) & (n < N)
            vals = (rec["features"][ok].astype(np.float64) - lo) / (hi - lo)
            feats[t[ok], n[ok]] = np.clip(vals, 0.0, 1.0)
            present[t[ok], n[ok]] = True
        present &= seq.agent_valid[None, :]
        feats[~present] = 0.0
        n_slots = T * seq.n_valid
        total += n_slots
        missing += n_slots - int(present.sum())
        out.append(seq.replace(crop_features=feats, crop_present=present))
    if missing:
        log.info("feature file %s: %d of %d valid slots missing (%.2f%%)", source.path, missing, total,
                 100.0 * missing / max(total, 1))
    return out


def attach_features(seqs: list[Sequence], source: FeatureSource) -> list[Sequence]:
    """Populate crop_features / crop_present from ``source``."""
    if source.provider == "file":
        return _attach_from_file(seqs, source)
    params = source.gen_params or GenParams(crop_dim=source.d_c)
    if params.crop_dim != source.d_c:
        raise FeatureDimensionError(f"generator crop_dim={params.crop_dim} != source d_c={source.d_c}")
    out = []
    for seq in seqs:
        feats, present = simulate_crop_features(seq, params, feature_rng(source.seed, seq.seq_id))
        out.append(seq.replace(crop_features=feats, crop_present=present))
    return out
