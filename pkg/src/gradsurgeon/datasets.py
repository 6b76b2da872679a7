"""Dataset ingestion and generation.

Three sources:

* IDX byte streams (big-endian, magic 0x00000803 for u8 image stacks and
  0x00000801 for u8 label vectors), parsed bit-exactly.
* Two-digit overlay composition: one item anchored top-left, one
  bottom-right on a 36x36 canvas with up to 4px jitter each, merged by
  pixel-wise maximum; task 1 classifies the first item, task 2 the second.
* A synthetic two-task regression rig with one engineered
  maximally-conflicted trunk layer, used as ground truth for selection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import BadMagicError, SizeMismatchError, TruncatedPayloadError
from .network import NetworkSpec
from .rng import RngState

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class ImageSet:
    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) integer class ids

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 3:
            raise SizeMismatchError(f"images must be (N, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise SizeMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )


def load_idx(data: bytes) -> np.ndarray:
    """Parse one IDX stream into a u8 array (3-D images or 1-D labels)."""
    if len(data) < 4:
        raise TruncatedPayloadError("stream shorter than the 4-byte magic", expected=4, actual=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise BadMagicError(f"unsupported IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedPayloadError(
            "stream ends inside the dimension header", expected=header_len, actual=len(data)
        )
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = header_len + int(np.prod(dims))
    if len(data) != expected:
        raise TruncatedPayloadError(
            f"payload is {len(data)} bytes, expected {expected}",
            expected=expected,
            actual=len(data),
        )
    return np.frombuffer(data[header_len:], dtype=np.uint8).reshape(dims).copy()


def dump_idx(arr: np.ndarray) -> bytes:
    """Serialize a u8 array back to IDX bytes (inverse of load_idx)."""
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        magic = IDX_MAGIC_IMAGES
    elif arr.ndim == 1:
        magic = IDX_MAGIC_LABELS
    else:
        raise SizeMismatchError(f"only 1-D labels or 3-D images serialize, got ndim={arr.ndim}")
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def load_image_set(images_bytes: bytes, labels_bytes: bytes) -> ImageSet:
    images = load_idx(images_bytes)
    labels = load_idx(labels_bytes)
    if images.ndim != 3 or labels.ndim != 1:
        raise BadMagicError("expected an image stream and a label stream")
    return ImageSet(images=images, labels=labels.astype(np.int64))


@dataclass
class MultiTaskDataset:
    """Shared inputs with one target array per task."""

    inputs: np.ndarray  # (N, ...) float64
    targets: list[np.ndarray]  # per task, first axis N
    loss_kinds: list[str]
    metric_kinds: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        for t, y in enumerate(self.targets):
            if len(y) != n:
                raise SizeMismatchError(f"task {t} has {len(y)} targets for {n} inputs")

    @property
    def num_tasks(self) -> int:
        return len(self.targets)

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "MultiTaskDataset":
        return MultiTaskDataset(
            inputs=self.inputs[idx],
            targets=[y[idx] for y in self.targets],
            loss_kinds=list(self.loss_kinds),
            metric_kinds=list(self.metric_kinds),
            metadata=dict(self.metadata),
        )

    def split(self, val_fraction: float, rng: RngState):
        """Deterministic shuffled split; returns (train, validation)."""
        n = len(self)
        perm = rng.permutation(n)
        n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


CANVAS = 36
JITTER = 4


def compose_multi_overlay(a: ImageSet, b: ImageSet, rng: RngState, n_samples: int | None = None) -> MultiTaskDataset:
    """Overlay random item pairs on one canvas; each task labels one item.

    Item A lands toward the top-left corner, item B toward the bottom-right,
    each jittered by up to 4 pixels, merged by pixel-wise max.  Inputs are
    normalized to [0, 1]; targets are one-hot over 10 classes.
    """
    for name, s in (("first", a), ("second", b)):
        if s.images.shape[1:] != (28, 28):
            raise SizeMismatchError(f"{name} image set must be 28x28, got {s.images.shape[1:]}")
    n = n_samples if n_samples is not None else min(len(a.images), len(b.images))
    ia = rng.fork("pick-a").integers(0, len(a.images), size=n)
    ib = rng.fork("pick-b").integers(0, len(b.images), size=n)
    offs = rng.fork("jitter").integers(0, JITTER + 1, size=(n, 4))
    canvas = np.zeros((n, CANVAS, CANVAS), dtype=np.uint8)
    far = CANVAS - 28  # == 2 * JITTER
    for k in range(n):
        ra, ca, rb, cb = offs[k]
        patch = canvas[k, ra : ra + 28, ca : ca + 28]
        np.maximum(patch, a.images[ia[k]], out=patch)
        patch = canvas[k, far - rb : far - rb + 28, far - cb : far - cb + 28]
        np.maximum(patch, b.images[ib[k]], out=patch)
    inputs = canvas.astype(np.float64)[:, None, :, :] / 255.0
    return MultiTaskDataset(
        inputs=inputs,
        targets=[one_hot(a.labels[ia], 10), one_hot(b.labels[ib], 10)],
        loss_kinds=["cross_entropy", "cross_entropy"],
        metric_kinds=["accuracy", "accuracy"],
        metadata={"kind": "overlay", "canvas": CANVAS, "jitter": JITTER},
    )


RIG_HIDDEN = 4
RIG_WIDE = 16
RIG_OUT = 4


def gen_conflict_rig(
    dim: int,
    n_samples: int,
    seed: int,
    amp_primary: float = 4.0,
    amp_bypass: float = 1.0,
) -> MultiTaskDataset:
    """Two regression tasks engineered to fight over the first trunk layer.

    Inputs are standard normal.  Task 1's target is A*tanh(Wx); task 2's is
    the exact negation plus a full-rank linear bypass B*x.  On the matching
    trunk (see :func:`rig_trunk_spec`) the first dense layer is a bottleneck
    that can carry tanh(Wx) or raw x but not both, so its gradients stay
    near-opposite while wider later layers settle; metadata records that
    layer's unit id.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = RngState(seed)
    w = rng.fork("W").standard_normal((RIG_HIDDEN, dim)) / np.sqrt(dim)
    a = rng.fork("A").standard_normal((RIG_OUT, RIG_HIDDEN)) * amp_primary / np.sqrt(RIG_HIDDEN)
    b = rng.fork("B").standard_normal((RIG_OUT, dim)) * amp_bypass / np.sqrt(dim)
    x = rng.fork("inputs").standard_normal((n_samples, dim))
    core = np.tanh(x @ w.T) @ a.T
    y1 = core
    y2 = -core + x @ b.T
    return MultiTaskDataset(
        inputs=x,
        targets=[y1, y2],
        loss_kinds=["squared_error", "squared_error"],
        metric_kinds=["mse", "mse"],
        metadata={
            "kind": "conflict_rig",
            "seed": int(seed),
            "dim": int(dim),
            "amp_primary": float(amp_primary),
            "amp_bypass": float(amp_bypass),
            "engineered_layer": "trunk.0.weight",
        },
    )


def rig_trunk_spec(dim: int) -> NetworkSpec:
    """The two-hidden-layer trunk matching the conflict rig.

    The first dense layer mirrors the generator's W (the engineered
    bottleneck, bias-free so it is a single parameter unit); the second is
    wide enough to serve both heads once the bottleneck output is fixed.
    """
    return NetworkSpec(
        input_shape=(dim,),
        trunk=[
            L.dense(dim, RIG_HIDDEN, bias=False),
            L.relu(),
            L.dense(RIG_HIDDEN, RIG_WIDE),
            L.relu(),
        ],
        heads=[[L.dense(RIG_WIDE, RIG_OUT)], [L.dense(RIG_WIDE, RIG_OUT)]],
    )


def save_dataset(ds: MultiTaskDataset, path) -> None:
    """Write a dataset to one .npz container with its construction metadata."""
    arrays = {"inputs": ds.inputs}
    for t, y in enumerate(ds.targets):
        arrays[f"targets_{t}"] = y
    arrays["meta"] = np.frombuffer(
        json.dumps(
            {
                "loss_kinds": ds.loss_kinds,
                "metric_kinds": ds.metric_kinds,
                "metadata": ds.metadata,
                "num_tasks": ds.num_tasks,
            },
            sort_keys=True,
        ).encode("utf-8"),
        dtype=np.uint8,
    )
    np.savez(path, **arrays)


def load_dataset(path) -> MultiTaskDataset:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        targets = [z[f"targets_{t}"] for t in range(meta["num_tasks"])]
        return MultiTaskDataset(
            inputs=z["inputs"],
            targets=targets,
            loss_kinds=list(meta["loss_kinds"]),
            metric_kinds=list(meta["metric_kinds"]),
            metadata=dict(meta["metadata"]),
        )
