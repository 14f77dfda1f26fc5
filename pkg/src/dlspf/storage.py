"""Bit-exact file formats, canonical config hashing and the deployable model bundle.

All multi-byte integers are little-endian.

TensorFile (one array)::

    magic    4 bytes  b"LTSF"
    version  u32      1
    dtype    u32      0 = float32, 1 = float64
    ndim     u32
    shape    ndim x u64
    payload  row-major little-endian values

Checkpoint (named arrays plus the config that built them)::

    magic       4 bytes  b"LTCK"
    version     u32      1
    kind        u16 length + UTF-8 text
    config_hash 32 bytes (SHA-256 of the canonical config JSON)
    config      u32 length + UTF-8 canonical JSON
    count       u32
    entries     count x (u16 name length, UTF-8 name, TensorFile block)

Writes go to a temporary file in the target directory and are renamed into
place, so readers never see partial files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.rng import rng_stream
from .stepper import LatentStepper, StepperConfig, pad_history, step
from .wae import AEConfig, Autoencoder, ConfigurationError, NormStats

TENSOR_MAGIC = b"LTSF"
CHECKPOINT_MAGIC = b"LTCK"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


# -------------------------------------------------------------- primitives
def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj: object) -> str:
    """Sorted keys, no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_hash(obj: object) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------------------------------------------- TensorFile
def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    head = TENSOR_MAGIC + struct.pack("<III", FORMAT_VERSION, _DTYPE_CODES[dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one TensorFile block at ``offset``; returns the array and the end offset."""
    buf = memoryview(buf)
    if bytes(buf[offset : offset + 4]) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    try:
        version, code, ndim = struct.unpack_from("<III", buf, offset + 4)
        offset += 16
        shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    except struct.error as exc:
        raise FormatError("truncated tensor header") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    offset += 8 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if offset + nbytes > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write(path, encode_tensor(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError("trailing bytes after tensor payload")
    return arr


# -------------------------------------------------------------- Checkpoint
@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    kind = ckpt.kind.encode()
    cfg = canonical_json(ckpt.config).encode()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IH", FORMAT_VERSION, len(kind)),
        kind,
        bytes.fromhex(ckpt.config_hash),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<I", len(ckpt.tensors)),
    ]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts += [struct.pack("<H", len(raw)), raw, encode_tensor(arr)]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    buf = memoryview(data)
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    try:
        version, klen = struct.unpack_from("<IH", buf, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 10
        kind = bytes(buf[off : off + klen]).decode()
        off += klen
        digest = bytes(buf[off : off + 32]).hex()
        off += 32
        (clen,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = json.loads(bytes(buf[off : off + clen]).decode())
        off += clen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off : off + nlen]).decode()
            off += nlen
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name], off = decode_tensor(buf, off)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    ckpt = Checkpoint(kind, config, tensors)
    if ckpt.config_hash != digest:
        raise FormatError("checkpoint config hash mismatch")
    return ckpt


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------ model files
def autoencoder_checkpoint(model: Autoencoder, stats: NormStats) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({k: np.asarray(v, dtype=np.float64) for k, v in stats.to_tensors().items()})
    return Checkpoint("autoencoder", model.cfg.to_dict(), tensors)


def autoencoder_from_checkpoint(ckpt: Checkpoint) -> tuple[Autoencoder, NormStats]:
    if ckpt.kind != "autoencoder":
        raise FormatError(f"expected an autoencoder checkpoint, got {ckpt.kind!r}")
    model = Autoencoder(AEConfig.from_dict(ckpt.config), rng_stream(0, "unused"))
    model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("model.")})
    return model, NormStats.from_tensors(ckpt.tensors)


def stepper_checkpoint(model: LatentStepper) -> Checkpoint:
    return Checkpoint("stepper", model.cfg.to_dict(), {f"model.{k}": v for k, v in model.state_dict().items()})


def stepper_from_checkpoint(ckpt: Checkpoint) -> LatentStepper:
    if ckpt.kind != "stepper":
        raise FormatError(f"expected a stepper checkpoint, got {ckpt.kind!r}")
    model = LatentStepper(StepperConfig.from_dict(ckpt.config), rng_stream(0, "unused"))
    model.load_state_dict({k[6:]: v for k, v in ckpt.tensors.items()})
    return model


# ------------------------------------------------------------ ModelBundle
class PhysicalAutoencoder:
    """Autoencoder plus normalization: encode/decode in physical units."""

    def __init__(self, autoencoder: Autoencoder, stats: NormStats) -> None:
        self.autoencoder = autoencoder
        self.stats = stats

    @property
    def latent_dim(self) -> int:
        return self.autoencoder.latent_dim

    @property
    def _single(self) -> bool:
        return self.autoencoder.cfg.state_channels == 1

    def _norm_params(self, m: np.ndarray | None, width: int) -> np.ndarray | None:
        if width == 0:
            return None
        return self.stats.normalize_params(np.asarray(m, dtype=np.float64).reshape(-1, width))

    def encode(self, q: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        qn = self.stats.normalize_state(q[..., None, :])[..., 0, :] if self._single else self.stats.normalize_state(q)
        return self.autoencoder.encode_numpy(qn).astype(np.float64)

    def decode(self, z: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
        qn = self.autoencoder.decode_numpy(z, self._norm_params(m, self.autoencoder.cfg.param_dim))
        if self._single:
            return self.stats.denormalize_state(qn[..., None, :])[..., 0, :]
        return self.stats.denormalize_state(qn)

    def encode_batched(self, q: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Encode ``(..., state)`` snapshots in chunks; returns ``(..., latent_dim)``."""
        lead = q.shape[:-1] if self._single else q.shape[:-2]
        flat = q.reshape(-1, *q.shape[len(lead):])
        z = np.concatenate([self.encode(flat[i : i + chunk]) for i in range(0, len(flat), chunk)])
        return z.reshape(*lead, -1)

    def reconstruct(self, q: np.ndarray, m: np.ndarray | None = None, chunk: int = 4096) -> np.ndarray:
        """``decode(encode(q))`` for snapshots ``(n, state)`` with parameters ``(n, N_m)``."""
        parts = []
        for i in range(0, len(q), chunk):
            mi = None if m is None else m[i : i + chunk]
            parts.append(self.decode(self.encode(q[i : i + chunk]), mi))
        return np.concatenate(parts)


class ModelBundle(PhysicalAutoencoder):
    """Trained autoencoder, stepper and normalization acting on physical units.

    Implements the surrogate interface of :func:`dlspf.filter.run_dlspf`:
    states and parameters go in and come out unnormalized.

    Raises:
        ConfigurationError: If the latent or parameter widths of the parts disagree.
    """

    def __init__(self, autoencoder: Autoencoder, stepper: LatentStepper, stats: NormStats) -> None:
        if autoencoder.latent_dim != stepper.cfg.latent_dim:
            raise ConfigurationError(
                f"autoencoder latent_dim {autoencoder.latent_dim} != stepper latent_dim {stepper.cfg.latent_dim}"
            )
        if stepper.cfg.param_dim not in (0, autoencoder.cfg.param_dim):
            raise ConfigurationError("stepper and decoder disagree on the parameter width")
        super().__init__(autoencoder, stats)
        self.stepper = stepper

    @property
    def window(self) -> int:
        return self.stepper.cfg.window

    @property
    def time_stride(self) -> int:
        return self.stepper.cfg.time_stride

    @property
    def latent_noise_std(self) -> float:
        return self.stepper.cfg.latent_noise_std

    @property
    def config_hash(self) -> str:
        return config_hash({"ae": self.autoencoder.cfg.to_dict(), "stepper": self.stepper.cfg.to_dict()})

    def step(self, history: np.ndarray, m: np.ndarray | None = None) -> np.ndarray:
        mn = self._norm_params(m, self.stepper.cfg.param_dim)
        return step(self.stepper, history, mn).astype(np.float64)

    def rollout(self, q0: np.ndarray, m: np.ndarray | None, latent_steps: int) -> np.ndarray:
        """Decoded states ``(n, latent_steps + 1, state)`` starting from ``q0: (n, state)``."""
        z = self.encode(q0, m)
        hist = pad_history(z[:, None, :], self.window)
        out = [self.decode(z, m)]
        for _ in range(latent_steps):
            z = self.step(hist, m)
            hist = np.concatenate([hist[:, 1:, :], z[:, None, :]], axis=1)
            out.append(self.decode(z, m))
        return np.stack(out, axis=1)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        save_checkpoint(d / "autoencoder.ckpt", autoencoder_checkpoint(self.autoencoder, self.stats))
        save_checkpoint(d / "stepper.ckpt", stepper_checkpoint(self.stepper))

    @classmethod
    def load(cls, ae_path: str | os.PathLike, stepper_path: str | os.PathLike) -> ModelBundle:
        ae, stats = autoencoder_from_checkpoint(load_checkpoint(ae_path))
        return cls(ae, stepper_from_checkpoint(load_checkpoint(stepper_path)), stats)
