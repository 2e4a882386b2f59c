"""Datasets (CIFAR-10 binary batches, synthetic clusters) and the checkpoint container.

Checkpoint layout, all integers little-endian::

    magic     8 bytes   b"BPCKPT\\x00\\x01"
    version   u32
    meta_len  u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count     u32
    count x record:
        name_len u32, name bytes (UTF-8)
        dtype    u8   (0 float64, 1 float32, 2 int64, 3 uint8)
        rank     u8
        dims     rank x u64
        data     raw little-endian bytes, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise UsageError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, images.ndim))
    mean = images.mean(axis=axes)
    std = images.std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def normalize(train: Dataset, test: Dataset, dtype=np.float64) -> tuple[Dataset, Dataset]:
    """Standardize both splits per channel with statistics of the train split."""
    mean, std = channel_stats(train.images.astype(np.float64))
    bshape = (1, -1) + (1,) * (train.images.ndim - 2)
    out = []
    for ds in (train, test):
        x = (ds.images.astype(np.float64) - mean.reshape(bshape)) / std.reshape(bshape)
        out.append(Dataset(x.astype(dtype), ds.labels, ds.split, ds.num_classes))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, normalized: bool = True, dtype=np.float64) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch of the binary release."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    # some archives nest the files one level down
    if not (directory / CIFAR_TEST_FILES[0]).exists() and (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    splits = []
    for split, names in (("train", CIFAR_TRAIN_FILES), ("test", CIFAR_TEST_FILES)):
        parts = []
        for name in names:
            path = directory / name
            if not path.exists():
                raise FileNotFoundError(f"missing CIFAR-10 file {path}")
            parts.append(read_cifar_batch(path))
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        splits.append(Dataset(images, labels, split, 10))
    train, test = splits
    if normalized:
        train, test = normalize(train, test, dtype)
    return train, test


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, 3, 32, 32) and labels in the binary record layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _prototypes(seed, classes, shape, margin):
    rng = np.random.default_rng([seed, 0])
    protos = rng.standard_normal((classes,) + tuple(shape))
    # smooth spatially so conv features matter
    if len(shape) == 3 and shape[1] >= 4 and shape[2] >= 4:
        for axis in (2, 3):
            protos = (protos + np.roll(protos, 1, axis=axis) + np.roll(protos, -1, axis=axis)) / 3.0
    flat = protos.reshape(classes, -1)
    flat = flat - flat.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    flat = flat / np.where(norms > 0, norms, 1.0) * margin
    return flat.reshape((classes,) + tuple(shape))


def synthetic_dataset(seed: int, classes: int, n: int, shape, margin: float = 4.0,
                      noise: float = 1.0, split: str = "train") -> Dataset:
    """Gaussian clusters around one prototype per class.

    Prototypes depend only on ``(seed, classes, shape, margin)``; samples also
    depend on ``split``, so train and test draws share prototypes but not
    noise. Prototypes are centered and scaled to norm ``margin``; larger
    margins are easier. Labels are balanced to within one.
    """
    if n < classes:
        raise UsageError(f"need n >= classes, got n={n}, classes={classes}")
    shape = tuple(int(s) for s in shape)
    protos = _prototypes(seed, classes, shape, margin)
    split_key = {"train": 1, "test": 2}.get(split, 3)
    rng = np.random.default_rng([seed, split_key])
    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[rng.permutation(n)]
    images = protos[labels] + noise * rng.standard_normal((n,) + shape)
    return Dataset(images, labels, split, classes)


def synthetic_splits(seed: int, classes: int, n_train: int, n_test: int, shape,
                     margin: float = 4.0, noise: float = 1.0,
                     dtype=np.float64) -> tuple[Dataset, Dataset]:
    train = synthetic_dataset(seed, classes, n_train, shape, margin, noise, "train")
    test = synthetic_dataset(seed, classes, n_test, shape, margin, noise, "test")
    return normalize(train, test, dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"BPCKPT\x00\x01"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Model identity plus every parameter and buffer, keyed by name."""

    model_name: str
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, epoch: int = 0, config: dict | None = None, **extra) -> "Checkpoint":
        meta = dict(
            model=model.name,
            num_classes=model.num_classes,
            input_shape=list(model.input_shape),
            n=model.n,
            t_init=model.t_init,
            seed=model.seed,
            dtype=model.dtype.name,
            mode=model.mode,
            epoch=epoch,
            config=config or {},
            config_fingerprint=fingerprint(config or {}),
        )
        meta.update(extra)
        tensors = OrderedDict((k, np.array(v, copy=True)) for k, v in model.state_dict().items())
        return cls(model.name, tensors, epoch, meta)

    def to_model(self):
        from .models import build

        m = self.meta
        model = build(self.model_name, m["num_classes"], tuple(m["input_shape"]),
                      seed=m.get("seed", 0), t_init=m.get("t_init", 100.0), n=m["n"],
                      dtype=np.dtype(m.get("dtype", "float64")))
        model.load_state_dict(self.tensors)
        model.set_mode(m.get("mode", "reparam"))
        return model


def _encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta["model"] = ckpt.model_name
    meta["epoch"] = ckpt.epoch
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise UsageError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    try:
        off = 8
        version, meta_len = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            tag, rank = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=off)
            tensors[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(meta["model"], tensors, int(meta.get("epoch", 0)), meta)
