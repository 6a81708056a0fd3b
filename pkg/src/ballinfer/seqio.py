"""Binary record container and the sequence file formats built on it.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"BINF"
    4       2     format version (u16, currently 1)
    6       4     header length H in bytes (u32)
    10      H     header, UTF-8 JSON object
    then, repeated ``header["count"]`` times, one record:
            4     record payload length R in bytes (u32)
            2     number of arrays A (u16)
            then A array entries:
            1     name length L (u8)
            L     name, ASCII
            1     dtype code (u8): 1=f4, 2=u2, 3=u1, 4=u4, 5=f8
            1     ndim D (u8)
            4*D   dims (u32 each)
            4     data length B in bytes (u32)
            B     raw little-endian array data, C order

The header of a sequence file carries ``kind="sequences"``, ``T``, ``N``,
``d_c``, ``frame_rate_hz``, ``pitch`` and ``count``. Floats are stored as
32-bit, indices (states, possessor) as 16-bit, booleans as bytes.

The JSON-lines variant (for hand-authored fixtures) has the same header as
its first line and one JSON object per sequence after it, with the same array
names as nested lists. ``ball_states`` may be names (``"pass"``) or codes.
``crop_features``/``crop_present`` may be omitted (no crops present).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .datamodel import STATE_NAMES, PitchSpec, Sequence

MAGIC = b"BINF"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u2"), 3: np.dtype("u1"), 4: np.dtype("<u4"), 5: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class ContainerError(ValueError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedRecordError(ContainerError):
    pass


class HeaderMismatchError(ContainerError):
    """Header and payload disagree (counts, shapes or record lengths)."""


def _encode_record(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<H", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        data = arr.astype(dt, copy=False).tobytes()
        raw = name.encode("ascii")
        buf.write(struct.pack("<B", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<I", len(data)))
        buf.write(data)
    payload = buf.getvalue()
    return struct.pack("<I", len(payload)) + payload


def _decode_record(payload: bytes, index: int) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise HeaderMismatchError(f"record {index}: array data overruns declared record length")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (n_arrays,) = struct.unpack("<H", take(2))
    out = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<B", take(1))
        name = bytes(take(name_len)).decode("ascii")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"record {index}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<I", take(4))
        dt = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dt.itemsize:
            raise HeaderMismatchError(f"record {index}: array {name!r} length disagrees with its shape")
        out[name] = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(dims)
    if pos != len(view):
        raise HeaderMismatchError(f"record {index}: {len(view) - pos} trailing bytes after arrays")
    return out


def write_container(path, header: dict, records: Iterable[dict[str, np.ndarray]]) -> None:
    records = list(records)
    header = {**header, "version": FORMAT_VERSION, "count": len(records)}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for rec in records:
            fh.write(_encode_record(rec))


def read_container(path) -> tuple[dict, list[dict[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    if len(data) < 10 or data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if 10 + hlen > len(data):
        raise TruncatedRecordError(f"{path}: truncated header")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    if header.get("version") != version:
        raise VersionMismatchError(f"{path}: header version {header.get('version')} != container version {version}")
    pos = 10 + hlen
    count = int(header.get("count", 0))
    records = []
    for k in range(count):
        if pos == len(data):
            raise HeaderMismatchError(f"{path}: header declares {count} records, payload holds {k}")
        if pos + 4 > len(data):
            raise TruncatedRecordError(f"truncated record at sequence {k}")
        (rlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + rlen > len(data):
            raise TruncatedRecordError(f"truncated record at sequence {k}")
        records.append(_decode_record(data[pos:pos + rlen], k))
        pos += rlen
    if pos != len(data):
        raise HeaderMismatchError(f"{path}: payload holds more data than the {count} records declared")
    return header, records


def _sequence_header(seqs: list[Sequence]) -> dict:
    first = seqs[0]
    for s in seqs:
        if (s.n_frames, s.n_agents, s.crop_dim) != (first.n_frames, first.n_agents, first.crop_dim):
            raise ContainerError("all sequences in one file must share T, N and d_c")
        if s.normalized:
            raise ContainerError("write sequences in meters (denormalize first)")
    return {
        "kind": "sequences",
        "T": first.n_frames,
        "N": first.n_agents,
        "d_c": first.crop_dim,
        "frame_rate_hz": first.frame_rate_hz,
        "pitch": {"length": first.pitch.length, "width": first.pitch.width},
    }


def _sequence_record(s: Sequence) -> dict[str, np.ndarray]:
    return {
        "seq_id": np.array(s.seq_id, dtype="<u4"),
        "positions": s.positions.astype("<f4"),
        "player_types": s.player_types.astype("<f4"),
        "crop_features": s.crop_features.astype("<f4"),
        "crop_present": s.crop_present.astype("u1"),
        "agent_valid": s.agent_valid.astype("u1"),
        "ball_positions": s.ball_positions.astype("<f4"),
        "ball_states": s.ball_states.astype("<u2"),
        "possessor": s.possessor.astype("<u2"),
    }


def write_sequences(path, seqs: Iterable[Sequence]) -> None:
    """Write sequences (in meters) to the binary container.

    Float arrays are narrowed to 32-bit; sequences produced by the generator
    are already float32-exact, so their round trip is bit-exact.
    """
    seqs = list(seqs)
    if not seqs:
        raise ContainerError("refusing to write an empty sequence file")
    write_container(path, _sequence_header(seqs), (_sequence_record(s) for s in seqs))


def _check_shapes(rec: dict, header: dict, k: int) -> None:
    T, N, d_c = header["T"], header["N"], header["d_c"]
    expected = {
        "positions": (T, N, 2), "player_types": (N, 2), "crop_features": (T, N, d_c),
        "crop_present": (T, N), "agent_valid": (N,), "ball_positions": (T, 2),
        "ball_states": (T,), "possessor": (T,),
    }
    for name, shape in expected.items():
        if name not in rec:
            raise HeaderMismatchError(f"sequence {k}: missing array {name!r}")
        if tuple(rec[name].shape) != shape:
            raise HeaderMismatchError(f"sequence {k}: {name} has shape {tuple(rec[name].shape)}, header implies {shape}")


def _build(rec: dict, header: dict) -> Sequence:
    pitch = PitchSpec(**header["pitch"])
    return Sequence(
        positions=rec["positions"],
        player_types=rec["player_types"],
        crop_features=rec["crop_features"],
        crop_present=np.asarray(rec["crop_present"]).astype(bool),
        agent_valid=np.asarray(rec["agent_valid"]).astype(bool),
        ball_positions=rec["ball_positions"],
        ball_states=rec["ball_states"],
        possessor=rec["possessor"],
        frame_rate_hz=header["frame_rate_hz"],
        seq_id=int(np.asarray(rec.get("seq_id", 0)).reshape(-1)[0]),
        pitch=pitch,
    )


def _read_jsonl(path) -> list[Sequence]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ContainerError(f"{path}: empty JSON-lines file")
    header = json.loads(lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {header.get('version')}, expected {FORMAT_VERSION}")
    header.setdefault("pitch", {"length": 105.0, "width": 68.0})
    header.setdefault("frame_rate_hz", 6.25)
    T, N, d_c = header["T"], header["N"], header.get("d_c", 0)
    header["d_c"] = d_c
    if "count" in header and header["count"] != len(lines) - 1:
        raise HeaderMismatchError(f"{path}: header declares {header['count']} sequences, found {len(lines) - 1}")
    seqs = []
    for k, line in enumerate(lines[1:]):
        obj = json.loads(line)
        states = [STATE_NAMES.index(s) if isinstance(s, str) else int(s) for s in obj["ball_states"]]
        rec = {
            "seq_id": obj.get("seq_id", k),
            "positions": np.asarray(obj["positions"], dtype=np.float64),
            "player_types": np.asarray(obj["player_types"], dtype=np.float64),
            "crop_features": (np.asarray(obj["crop_features"], dtype=np.float64).reshape(T, N, d_c)
                              if "crop_features" in obj else np.zeros((T, N, d_c))),
            "crop_present": np.asarray(obj.get("crop_present", np.zeros((T, N), bool)), dtype=bool),
            "agent_valid": np.asarray(obj.get("agent_valid", np.ones(N, bool)), dtype=bool),
            "ball_positions": np.asarray(obj["ball_positions"], dtype=np.float64),
            "ball_states": np.asarray(states, dtype=np.int64),
            "possessor": np.asarray(obj["possessor"], dtype=np.int64),
        }
        _check_shapes(rec, header, k)
        seqs.append(_build(rec, header))
    return seqs


def read_sequences(path) -> list[Sequence]:
    """Read a binary container or a JSON-lines fixture (detected by content)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:1] == b"{":
        return _read_jsonl(path)
    header, records = read_container(path)
    if header.get("kind") != "sequences":
        raise ContainerError(f"{path}: expected kind 'sequences', got {header.get('kind')!r}")
    out = []
    for k, rec in enumerate(records):
        _check_shapes(rec, header, k)
        out.append(_build(rec, header))
    return out


def write_sequences_jsonl(path, seqs: Iterable[Sequence]) -> None:
    seqs = list(seqs)
    header = {**_sequence_header(seqs), "version": FORMAT_VERSION, "count": len(seqs), "format": "jsonl"}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in seqs:
            fh.write(json.dumps({
                "seq_id": s.seq_id,
                "positions": s.positions.tolist(),
                "player_types": s.player_types.tolist(),
                "crop_features": s.crop_features.tolist(),
                "crop_present": s.crop_present.tolist(),
                "agent_valid": s.agent_valid.tolist(),
                "ball_positions": s.ball_positions.tolist(),
                "ball_states": [STATE_NAMES[c] for c in s.ball_states],
                "possessor": s.possessor.tolist(),
            }) + "\n")
