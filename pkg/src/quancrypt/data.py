"""Datasets, client partitioning and run-artifact persistence."""

from __future__ import annotations

import csv
import struct
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803  # 2051
IDX_LABEL_MAGIC = 0x00000801  # 2049
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

METRICS_HEADER = (
    "round,test_acc,val_acc,loss,prune_rate,enc_ms,dec_ms,agg_ms,upload_bytes,checkpoint"
)


class FormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # (count, features)
    labels: np.ndarray  # (count,) int64
    class_count: int
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.image_shape)


@dataclass(frozen=True)
class Partition:
    indices: tuple[np.ndarray, ...]
    strategy: str

    def shards(self, ds: Dataset) -> list[Dataset]:
        return [ds.subset(ix) for ix in self.indices]


# --------------------------------------------------------------------------
# IDX


def _read_be_u32(data: bytes, offset: int, what: str) -> int:
    if len(data) < offset + 4:
        raise FormatError(f"truncated {what} header")
    return struct.unpack_from(">I", data, offset)[0]


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = _read_be_u32(data, 0, "image")
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"image file magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x} (2051)")
    count, rows, cols = (_read_be_u32(data, o, "image") for o in (4, 8, 12))
    body = data[16:]
    if len(body) < count * rows * cols:
        raise FormatError(f"truncated image file: need {count * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count * rows * cols).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = _read_be_u32(data, 0, "label")
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"label file magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x} (2049)")
    count = _read_be_u32(data, 4, "label")
    body = data[8:]
    if len(body) < count:
        raise FormatError(f"truncated label file: need {count} labels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_mnist_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Load an IDX image/label pair with pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    n, r, c = images.shape
    return Dataset(images.reshape(n, r * c) / 255.0, labels.astype(np.int64), class_count, (r, c))


def standardize(ds: Dataset, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> Dataset:
    return Dataset((ds.inputs - mean) / std, ds.labels, ds.class_count, ds.image_shape)


def bundled_mnist_arrays() -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-image MNIST subset shipped with mlxtend (500 per digit)."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return x.astype(np.uint8).reshape(-1, 28, 28), y.astype(np.uint8)


def materialize_bundled_mnist(directory) -> tuple[Path, Path]:
    """Write the bundled subset as IDX files (idempotent)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img, lab = d / "mnist5k-images-idx3-ubyte", d / "mnist5k-labels-idx1-ubyte"
    if not (img.exists() and lab.exists()):
        x, y = bundled_mnist_arrays()
        write_idx(img, lab, x, y)
    return img, lab


def load_mnist(directory=None, cache_dir=None) -> Dataset:
    """Load MNIST from ``directory`` holding IDX files, else the bundled subset.

    ``directory`` may contain the standard ``train-images-idx3-ubyte`` /
    ``train-labels-idx1-ubyte`` pair.
    """
    if directory is not None:
        d = Path(directory)
        for stem in ("train", "mnist5k"):
            img = d / f"{stem}-images-idx3-ubyte"
            lab = d / f"{stem}-labels-idx1-ubyte"
            if img.exists() and lab.exists():
                return load_mnist_idx(img, lab)
        raise FileNotFoundError(f"no IDX image/label pair found in {d}")
    if cache_dir is not None:
        return load_mnist_idx(*materialize_bundled_mnist(cache_dir))
    x, y = bundled_mnist_arrays()
    return Dataset(x.reshape(len(x), -1) / 255.0, y.astype(np.int64), 10, (28, 28))


def downsample_images(ds: Dataset, side: int = 8) -> Dataset:
    """Block-average square images down to ``side x side`` (center-cropped first)."""
    h, w = ds.image_shape
    block = min(h, w) // side
    crop = block * side
    top, left = (h - crop) // 2, (w - crop) // 2
    imgs = ds.inputs.reshape(-1, h, w)[:, top : top + crop, left : left + crop]
    small = imgs.reshape(-1, side, block, side, block).mean(axis=(2, 4))
    return Dataset(small.reshape(len(small), -1), ds.labels, ds.class_count, (side, side))


# --------------------------------------------------------------------------
# splitting and partitioning


def split_train_validation(ds: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(np.floor(fraction * len(ds)))
    return ds.subset(order[:cut]), ds.subset(order[cut:])


def partition_iid(ds: Dataset, num_clients: int, seed: int = 0) -> Partition:
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if num_clients > len(ds):
        raise ValueError(f"{num_clients} clients but only {len(ds)} samples")
    order = np.random.default_rng(seed).permutation(len(ds))
    return Partition(tuple(np.sort(order[i::num_clients]) for i in range(num_clients)), "iid")


def partition_label_shards(ds: Dataset, num_clients: int, classes_per_client: int, seed: int = 0) -> Partition:
    """Give each client samples from only ``classes_per_client`` classes.

    Classes are dealt to clients cyclically over a shuffled class order, so
    together the clients cover every class whenever
    ``num_clients * classes_per_client >= class_count``.  Each class's samples
    are split evenly among the clients that hold it.
    """
    c = ds.class_count
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not 1 <= classes_per_client <= c:
        raise ValueError("classes_per_client must lie in [1, class_count]")
    if num_clients > len(ds):
        raise ValueError(f"{num_clients} clients but only {len(ds)} samples")
    if num_clients * classes_per_client < c:
        raise ValueError("too few client-class slots to cover every class")
    rng = np.random.default_rng(seed)
    class_order = rng.permutation(c)
    owners: dict[int, list[int]] = {k: [] for k in range(c)}
    assigned = []
    for i in range(num_clients):
        mine = sorted({int(class_order[(i * classes_per_client + j) % c]) for j in range(classes_per_client)})
        assigned.append(mine)
        for k in mine:
            owners[k].append(i)
    buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for k in range(c):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        holders = owners[k]
        for h, part in zip(holders, np.array_split(idx, len(holders))):
            buckets[h].append(part)
    shards = tuple(np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets)
    return Partition(shards, "label-shards")


def gen_synthetic(count: int, features: int, classes: int, separation: float, seed: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian clusters around random centers.

    Centers sit on a sphere of radius ``separation``; sample ``i`` has
    label ``i % classes``.
    """
    if classes < 2 or features < 1 or count < classes:
        raise ValueError("need classes >= 2, features >= 1 and count >= classes")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(count) % classes
    inputs = centers[labels] + rng.normal(size=(count, features))
    return Dataset(inputs, labels.astype(np.int64), classes)


# --------------------------------------------------------------------------
# metrics CSV and images


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_acc: float
    val_acc: float
    loss: float
    prune_rate: float
    enc_ms: float
    dec_ms: float
    agg_ms: float
    upload_bytes: int
    checkpoint: str = "none"



def _format_row(rec: RoundRecord) -> list[str]:
    return [repr(v) if isinstance(v, float) else str(v) for v in astuple(rec)]


def write_metrics(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for rec in records:
            w.writerow(_format_row(rec))


def append_metrics(record: RoundRecord, path) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        if fresh:
            fh.write(METRICS_HEADER + "\n")
        csv.writer(fh, lineterminator="\n").writerow(_format_row(record))


def read_metrics(path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]) != METRICS_HEADER:
        raise FormatError("metrics file header mismatch")
    out = []
    for row in rows[1:]:
        vals = [int(row[0]), *map(float, row[1:8]), int(row[8]), row[9]]
        out.append(RoundRecord(*vals))
    return out


def write_pgm(path, image) -> None:
    """8-bit binary PGM of a 2-D array with values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = img.shape
    px = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    body = data[pos + 1 : pos + 1 + w * h]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) / float(maxval)
