"""On-disk formats: binary parameter files, JSON-lines manifests, teacher tables, track CSVs.

Parameter files are little-endian::

    magic  b"SMST"  | version u32 | count u32
    count x ( name_len u32 | name utf-8 | rows u32 | cols u32 | rows*cols f64 )
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .datapipe import ParallelExample
from .errors import CheckpointError, DataError
from .segtool import ProbabilityTrack

MAGIC = b"SMST"
VERSION = 1


def write_matrices(path, tensors: Mapping[str, np.ndarray]):
    buf = _io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise CheckpointError(f"{name}: only matrices can be stored, got shape {arr.shape}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_matrices(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        offset = 12
        out = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack_from("<II", data, offset)
            offset += 8
            nbytes = rows * cols * 8
            if offset + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(
                rows, cols).astype(np.float64)
            offset += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated file") from exc
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def write_features(path, features: np.ndarray):
    write_matrices(path, {"features": features})


def read_features(path) -> np.ndarray:
    mats = read_matrices(path)
    if "features" not in mats:
        raise DataError(f"{path}: no 'features' record")
    return mats["features"]


def read_manifest(path) -> list[ParallelExample]:
    examples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            ex = ParallelExample.from_dict(record)
            if ex.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return examples


def write_manifest(path, examples: Iterable[ParallelExample]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def load_example_features(manifest_path, example: ParallelExample) -> np.ndarray:
    if example.features is None:
        raise DataError(f"example {example.id} has no features")
    return read_features(Path(manifest_path).parent / example.features)


# teacher tables: {"id": ..., "positions": [[[index, prob], ...], ...]}


def write_teacher_table(path, table: Mapping[str, list]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id, positions in table.items():
            rows = [[[int(i), float(p)] for i, p in zip(entry.indices, entry.probs)] for entry in positions]
            fh.write(json.dumps({"id": ex_id, "positions": rows}) + "\n")


def read_teacher_table(path) -> dict:
    from .sttrain import TeacherEntry

    table = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            table[record["id"]] = [
                TeacherEntry(np.array([int(i) for i, _ in pos]), np.array([float(p) for _, p in pos]))
                for pos in record["positions"]
            ]
    return table


# probability tracks: "# frame_rate=<float>" header line, then frame_index,probability


def write_track(path, track: ProbabilityTrack):
    with open(path, "w", newline="") as fh:
        fh.write(f"# frame_rate={track.frame_rate!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "probability"])
        for i, p in enumerate(track.probabilities):
            writer.writerow([i, repr(float(p))])


def read_track(path) -> ProbabilityTrack:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if not header.startswith("# frame_rate="):
            raise DataError(f"{path}: missing '# frame_rate=' header")
        frame_rate = float(header.split("=", 1)[1])
        reader = csv.DictReader(fh)
        rows = [(int(r["frame_index"]), float(r["probability"])) for r in reader]
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise DataError(f"{path}: frame indices are not contiguous from 0")
    return ProbabilityTrack(np.array([p for _, p in rows]), frame_rate)
