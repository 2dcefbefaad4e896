"""Trainable parameters of the anomaly expert and ``.aovc`` checkpoint files.

Tensor names::

    adapter.{i}.weight/bias            level adapters, d_enc -> d          (i = 1..4)
    lookback.{i}.weight/bias           token-axis fusion, g*g -> 1 (bias per channel)
    e_plus, e_minus                    learnable abnormal / normal embeddings
    mlp_plus.{i}.fc{1,2}.weight/bias   description MLPs, input = concat(embedding, fused)
    mlp_minus.{i}.fc{1,2}.weight/bias
    qformer.{wq,wk,wv,wo}.weight/bias  cross-attention block, d_enc -> d_enc
    score.fc{1,2}.weight/bias          scoring MLP, d_enc -> d -> 1
    tau                                only when the temperature is trainable

Checkpoint layout (little-endian)::

    b"AOVC" | u32 version | u32 meta_len | meta JSON | u32 n_tensors |
    per tensor: u32 name_len | name | u8 dtype (0=f32, 1=f64) | u32 ndim | u32 dims[ndim] | data
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, get_dtype
from .errors import BadMagic, CheckpointError, MissingTensor, ShapeMismatch, TruncatedPayload, UnknownTensor

LEVELS = (1, 2, 3, 4)
CKPT_MAGIC = b"AOVC"
CKPT_VERSION = 1
CONCAT_ORDER = "embedding,fused"
OPTIM_PREFIX = "optim."


@dataclass(frozen=True)
class ExpertConfig:
    d_enc: int = 64
    d: int = 32
    g: int = 8
    tau: float = 0.07
    n_heads: int = 4
    pool_h: int = 2
    pool_w: int = 2
    lookback_bias: bool = True
    train_tau: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.d_enc % self.n_heads:
            raise ValueError(f"d_enc={self.d_enc} is not divisible by n_heads={self.n_heads}")
        if self.pool_h * self.pool_w > self.g * self.g:
            raise ValueError("pooling grid has more cells than tokens")


def param_shapes(cfg: ExpertConfig) -> dict[str, tuple[int, ...]]:
    d, de, t = cfg.d, cfg.d_enc, cfg.g * cfg.g
    shapes: dict[str, tuple[int, ...]] = {}
    for i in LEVELS:
        shapes[f"adapter.{i}.weight"] = (de, d)
        shapes[f"adapter.{i}.bias"] = (d,)
        shapes[f"lookback.{i}.weight"] = (t,)
        if cfg.lookback_bias:
            shapes[f"lookback.{i}.bias"] = (d,)
    shapes["e_plus"] = (d,)
    shapes["e_minus"] = (d,)
    for sign in ("plus", "minus"):
        for i in LEVELS:
            shapes[f"mlp_{sign}.{i}.fc1.weight"] = (2 * d, d)
            shapes[f"mlp_{sign}.{i}.fc1.bias"] = (d,)
            shapes[f"mlp_{sign}.{i}.fc2.weight"] = (d, d)
            shapes[f"mlp_{sign}.{i}.fc2.bias"] = (d,)
    for w in ("wq", "wk", "wv", "wo"):
        shapes[f"qformer.{w}.weight"] = (de, de)
        shapes[f"qformer.{w}.bias"] = (de,)
    shapes["score.fc1.weight"] = (de, d)
    shapes["score.fc1.bias"] = (d,)
    shapes["score.fc2.weight"] = (d, 1)
    shapes["score.fc2.bias"] = (1,)
    if cfg.train_tau:
        shapes["tau"] = ()
    return shapes


@dataclass
class ExpertParams:
    config: ExpertConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    def tau(self) -> float | Tensor:
        return self.tensors["tau"] if self.config.train_tau else self.config.tau

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ExpertParams":
        return ExpertParams(
            self.config,
            {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=v.data.dtype) for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "ExpertParams":
        return ExpertParams(
            self.config,
            {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype) for k, v in self.tensors.items()},
        )

    def equals(self, other: "ExpertParams") -> bool:
        if self.config != other.config or self.names() != other.names():
            return False
        return all(
            self[k].data.dtype == other[k].data.dtype and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self.names()
        )


def init_params(cfg: ExpertConfig, dtype=None) -> ExpertParams:
    """Fan-in scaled uniform weights and biases, Gaussian embeddings with distinct sub-seeds.

    Biases share the bound of their weight matrix, so a layer whose ReLU units
    are all inactive still emits a non-zero vector.
    """
    dtype = dtype or get_dtype()
    shapes = param_shapes(cfg)
    tensors = {}
    for idx, (name, shape) in enumerate(shapes.items()):
        rng = np.random.default_rng([cfg.seed, idx])
        if name == "tau":
            data = np.array(cfg.tau)
        elif name in ("e_plus", "e_minus"):
            data = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=shape)
        elif name.endswith(".bias"):
            bound = 1.0 / np.sqrt(shapes[name[: -len("bias")] + "weight"][0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return ExpertParams(cfg, tensors)


# ---------------------------------------------------------------------------
# checkpoint files

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: "<f4", 1: "<f8"}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES[arr.dtype]
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_CODE_DTYPES[code]).tobytes()


def save_checkpoint(
    params: ExpertParams,
    path: str | os.PathLike,
    optimizer_state=None,
    extra_meta: dict | None = None,
) -> None:
    meta = {"config": asdict(params.config), "concat_order": CONCAT_ORDER}
    if extra_meta:
        meta.update(extra_meta)
    named = [(k, v.data) for k, v in params.tensors.items()]
    if optimizer_state is not None:
        meta["optimizer"] = {"step": optimizer_state.step}
        for k in sorted(optimizer_state.m):
            named.append((f"{OPTIM_PREFIX}m.{k}", optimizer_state.m[k]))
            named.append((f"{OPTIM_PREFIX}v.{k}", optimizer_state.v[k]))
    write_checkpoint_raw(path, meta, dict(named))


def write_checkpoint_raw(path: str | os.PathLike, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Inverse of :func:`read_checkpoint_raw`; tensors are written in dict order."""
    mb = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(mb)), mb, struct.pack("<I", len(arrays))]
    parts += [_pack_tensor(k, np.asarray(a)) for k, a in arrays.items()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.off = raw, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedPayload("checkpoint ends prematurely")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint_raw(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{p}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{p}: not an AOVC checkpoint")
    r = _Reader(raw)
    r.take(4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{p}: unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode())
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        code = r.take(1)[0]
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{p}: tensor {name!r} has unknown dtype code {code}")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        dt = np.dtype(_CODE_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.off != len(raw):
        raise CheckpointError(f"{p}: trailing bytes after last tensor")
    return meta, arrays


def _params_from_arrays(cfg: ExpertConfig, arrays: dict[str, np.ndarray]) -> ExpertParams:
    shapes = param_shapes(cfg)
    for name in arrays:
        if name not in shapes and not name.startswith(OPTIM_PREFIX):
            raise UnknownTensor(name)
    tensors = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise MissingTensor(name)
        a = arrays[name]
        if a.shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, found {a.shape}")
        tensors[name] = Tensor(a, requires_grad=True, dtype=a.dtype)
    return ExpertParams(cfg, tensors)


def load_checkpoint(path: str | os.PathLike) -> ExpertParams:
    meta, arrays = read_checkpoint_raw(path)
    try:
        cfg = ExpertConfig(**meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block ({exc})") from exc
    return _params_from_arrays(cfg, arrays)


def load_training_state(path: str | os.PathLike):
    """Params plus the optimizer state stored alongside them (``None`` if absent)."""
    from .training import AdamState

    meta, arrays = read_checkpoint_raw(path)
    params = _params_from_arrays(ExpertConfig(**meta["config"]), arrays)
    if "optimizer" not in meta:
        return params, None
    state = AdamState(step=int(meta["optimizer"]["step"]))
    for name in params.names():
        try:
            state.m[name] = arrays[f"{OPTIM_PREFIX}m.{name}"]
            state.v[name] = arrays[f"{OPTIM_PREFIX}v.{name}"]
        except KeyError as exc:
            raise MissingTensor(str(exc.args[0])) from exc
    return params, state
