"""Frozen-encoder feature containers, AnyRes crop bookkeeping and ``.aovf`` files.

File layout (all little-endian)::

    magic  b"AOVF"
    u32    version (=1)
    u32    n_crops, g, d_enc, n_levels, label, class_id, region_len, reserved
    f32    v_final   [n_crops, g*g, d_enc]
    f32    v_levels  [n_levels, n_crops, g*g, d_enc]   (level 1 first)
    u32    region    [region_len]

Crop 0 is always the resized original image.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BadMagic, DataError, DimensionOverflow, TruncatedPayload, UnsupportedVersion

MAGIC = b"AOVF"
VERSION = 1
N_LEVELS = 4
HEADER = struct.Struct("<4sI8I")
HEADER_SIZE = HEADER.size  # 40 bytes

MAX_CROPS = 4096
MAX_GRID = 1024
MAX_DIM = 65536


@dataclass(frozen=True)
class CropLayout:
    n_crops: int
    g: int

    def __post_init__(self):
        if self.n_crops < 1 or self.g < 1:
            raise ValueError(f"invalid crop layout ({self.n_crops}, {self.g})")

    @property
    def tokens_per_crop(self) -> int:
        return self.g * self.g

    @property
    def total_tokens(self) -> int:
        return self.n_crops * self.g * self.g


def anyres_layout(image_w: int, image_h: int, base: int, g: int) -> CropLayout:
    """Crop layout for an image tiled into ``base``-pixel crops plus the resized original.

    An image no larger than ``base`` still yields one crop plus the original.
    """
    if min(image_w, image_h, base, g) <= 0:
        raise ValueError("anyres_layout arguments must be positive")
    n = math.ceil(image_w / base) * math.ceil(image_h / base) + 1
    return CropLayout(n_crops=n, g=g)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """Features of one image: final-layer tokens plus four intermediate levels per crop."""

    v_final: np.ndarray  # [n_crops, g*g, d_enc]
    v_levels: np.ndarray  # [4, n_crops, g*g, d_enc]
    label: int
    class_id: int = 0
    anomaly_region: tuple[int, ...] = field(default_factory=tuple)
    id: str = ""

    def __post_init__(self):
        vf = _frozen(self.v_final)
        vl = _frozen(self.v_levels)
        object.__setattr__(self, "v_final", vf)
        object.__setattr__(self, "v_levels", vl)
        object.__setattr__(self, "anomaly_region", tuple(int(i) for i in self.anomaly_region))
        if vf.ndim != 3:
            raise DataError(f"v_final must be [n_crops, tokens, d_enc], got {vf.shape}")
        g = math.isqrt(vf.shape[1])
        if g * g != vf.shape[1]:
            raise DataError(f"token count {vf.shape[1]} is not a square grid")
        if vl.shape != (N_LEVELS,) + vf.shape:
            raise DataError(f"v_levels shape {vl.shape} inconsistent with v_final {vf.shape}")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")
        if any(i < 0 or i >= g * g for i in self.anomaly_region):
            raise DataError("anomaly_region index outside the token grid")

    @property
    def layout(self) -> CropLayout:
        return CropLayout(self.v_final.shape[0], math.isqrt(self.v_final.shape[1]))

    @property
    def d_enc(self) -> int:
        return self.v_final.shape[2]

    def equals(self, other: "FeatureBundle") -> bool:
        """Bitwise equality of all payload fields (ignores ``id``)."""
        return (
            self.label == other.label
            and self.class_id == other.class_id
            and self.anomaly_region == other.anomaly_region
            and self.v_final.shape == other.v_final.shape
            and self.v_final.tobytes() == other.v_final.tobytes()
            and self.v_levels.tobytes() == other.v_levels.tobytes()
        )


def payload_size(n_crops: int, g: int, d_enc: int, region_len: int = 0) -> int:
    return HEADER_SIZE + (1 + N_LEVELS) * n_crops * g * g * d_enc * 4 + 4 * region_len


def encode_bundle(bundle: FeatureBundle) -> bytes:
    lay = bundle.layout
    header = HEADER.pack(
        MAGIC,
        VERSION,
        lay.n_crops,
        lay.g,
        bundle.d_enc,
        N_LEVELS,
        bundle.label,
        bundle.class_id,
        len(bundle.anomaly_region),
        0,
    )
    return b"".join(
        [
            header,
            bundle.v_final.astype("<f4").tobytes(),
            bundle.v_levels.astype("<f4").tobytes(),
            np.asarray(bundle.anomaly_region, dtype="<u4").tobytes(),
        ]
    )


def decode_bundle(raw: bytes, id: str = "") -> FeatureBundle:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic("not an AOVF feature file")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    _, version, n_crops, g, d_enc, n_levels, label, class_id, region_len, _ = HEADER.unpack_from(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if not (1 <= n_crops <= MAX_CROPS and 1 <= g <= MAX_GRID and 1 <= d_enc <= MAX_DIM):
        raise DimensionOverflow(f"dimensions out of range: n_crops={n_crops} g={g} d_enc={d_enc}")
    if n_levels != N_LEVELS or region_len > g * g:
        raise DimensionOverflow(f"n_levels={n_levels} region_len={region_len}")
    expected = payload_size(n_crops, g, d_enc, region_len)
    if len(raw) < expected:
        raise TruncatedPayload(f"expected {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise TruncatedPayload(f"{len(raw) - expected} trailing bytes after payload")
    t = g * g
    n_final = n_crops * t * d_enc
    off = HEADER_SIZE
    vf = np.frombuffer(raw, dtype="<f4", count=n_final, offset=off).reshape(n_crops, t, d_enc)
    off += 4 * n_final
    vl = np.frombuffer(raw, dtype="<f4", count=N_LEVELS * n_final, offset=off)
    vl = vl.reshape(N_LEVELS, n_crops, t, d_enc)
    off += 4 * N_LEVELS * n_final
    region = np.frombuffer(raw, dtype="<u4", count=region_len, offset=off)
    return FeatureBundle(
        v_final=vf.astype(np.float32),
        v_levels=vl.astype(np.float32),
        label=int(label),
        class_id=int(class_id),
        anomaly_region=tuple(int(i) for i in region),
        id=id,
    )


def save_bundle(bundle: FeatureBundle, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def load_bundle(path: str | os.PathLike) -> FeatureBundle:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise DataError(f"{p}: {exc}") from exc
    try:
        return decode_bundle(raw, id=p.stem)
    except DataError as exc:
        raise type(exc)(f"{p}: {exc}") from exc


# ---------------------------------------------------------------------------
# JSONL manifests


def read_manifest(path: str | os.PathLike) -> list[dict]:
    """Read a JSONL manifest; relative ``path`` entries resolve against the manifest's folder."""
    p = Path(path)
    entries = []
    try:
        lines = p.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{p}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(entry, dict):
            raise DataError(f"{p}:{lineno}: manifest lines must be JSON objects")
        if "path" in entry and not os.path.isabs(entry["path"]):
            entry["path"] = str(p.parent / entry["path"])
        entries.append(entry)
    return entries


def write_manifest(entries: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def iter_bundles(entries: list[dict]) -> Iterator[FeatureBundle]:
    for e in entries:
        if "path" not in e:
            raise DataError("manifest entry has no 'path'")
        b = load_bundle(e["path"])
        if "label" in e and int(e["label"]) != b.label:
            raise DataError(f"{e['path']}: manifest label {e['label']} disagrees with file label {b.label}")
        yield b
