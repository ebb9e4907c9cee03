"""Datasets: synthetic student-teacher regression and IDX image files."""
import struct
from dataclasses import dataclass

import numpy as np

from dfclab.network import forward_pass, init_params

# IDX element type codes we read/write.
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_CLASSES = 10


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "regression"

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], self.kind)


@dataclass
class TeacherSpec:
    """Random teacher network; inputs are uniform on [-1, 1]."""
    sizes: tuple = (15, 20, 15, 15, 5)
    activations: tuple = ("tanh", "tanh", "tanh", "linear")
    seed: int = 0
    weight_scale: float = 1.0


def generate_student_teacher(spec, n_train, n_test):
    """Sample a teacher and label uniform random inputs with its outputs.

    Returns:
        ``(train, test)`` regression datasets, deterministic in ``spec.seed``.
    """
    if n_train < 0 or n_test < 0 or min(spec.sizes) <= 0:
        raise ValueError("sizes and sample counts must be positive")
    rng = np.random.default_rng(spec.seed)
    teacher = init_params(spec.sizes, spec.activations, rng, weight_scale=spec.weight_scale)
    x = rng.uniform(-1.0, 1.0, size=(n_train + n_test, spec.sizes[0]))
    y = forward_pass(teacher, x).output
    return (Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:]))


def one_hot(labels, n_classes=N_CLASSES):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def read_idx(path, expected_magic=None, limit=None):
    """Read an IDX file into an array with its stored shape (native byte order)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    magic = struct.unpack(">I", raw[:4])[0]
    if zero != 0 or code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    hdr_end = 4 + 4 * ndim
    if len(raw) < hdr_end:
        raise IdxFormatError(f"{path}: truncated dimension header at offset 4")
    dims = list(struct.unpack(f">{ndim}I", raw[4:hdr_end]))
    dtype = _IDX_TYPES[code]
    if limit is not None and ndim > 0:
        dims[0] = min(dims[0], int(limit))
    count = int(np.prod(dims)) if dims else 1
    need = hdr_end + count * dtype.itemsize
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated data at offset {len(raw)}, need {need} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=hdr_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    """Write ``array`` as IDX (unsigned bytes or float64, by dtype)."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, dtype = 0x08, _IDX_TYPES[0x08]
    else:
        code, dtype = 0x0E, _IDX_TYPES[0x0E]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def load_idx(images_path, labels_path, limit=None):
    """Load IDX image/label files as a classification dataset.

    Pixels are divided by 255 and flattened row-major; labels become one-hot
    vectors over 10 classes.
    """
    images = read_idx(images_path, IMAGES_MAGIC, limit)
    labels = read_idx(labels_path, LABELS_MAGIC, limit)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise IdxFormatError("image and label files must hold unsigned bytes (type at offset 2)")
    if len(images) != len(labels):
        raise IdxFormatError(f"{images_path}: {len(images)} images but {labels_path} has "
                             f"{len(labels)} labels (count field at offset 4)")
    if labels.size and labels.max() >= N_CLASSES:
        bad = int(np.argmax(labels >= N_CLASSES))
        raise IdxFormatError(f"{labels_path}: label {labels[bad]} out of range at offset {8 + bad}")
    x = images.reshape(len(images), int(np.prod(images.shape[1:]))).astype(np.float64) / 255.0
    return Dataset(x, one_hot(labels), "classification")


def save_idx(ds, images_path, labels_path, image_shape=None):
    """Write a classification dataset (pixels must be multiples of 1/255)."""
    if ds.kind != "classification":
        raise ValueError("save_idx writes classification datasets; use write_idx for regression")
    n = len(ds)
    shape = image_shape or (ds.inputs.shape[1],)
    pix = np.rint(ds.inputs * 255.0).astype(np.uint8).reshape((n, *shape))
    write_idx(images_path, pix)
    write_idx(labels_path, np.argmax(ds.targets, axis=1).astype(np.uint8))


class BatchStream:
    """Validation split plus per-epoch shuffled minibatches of the remainder."""

    def __init__(self, ds, val_count, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= val_count <= len(ds):
            raise ValueError(f"val_count {val_count} outside [0, {len(ds)}]")
        perm = np.random.default_rng([int(seed), 0]).permutation(len(ds))
        self.val = ds.subset(np.sort(perm[:val_count]))
        self.train = ds.subset(np.sort(perm[val_count:]))
        self.batch_size = batch_size
        self.seed = int(seed)

    def __len__(self):
        return -(-len(self.train) // self.batch_size)

    def epoch(self, e):
        """Yield ``(inputs, targets)`` batches for epoch ``e``; the last may be short."""
        order = np.random.default_rng([self.seed, 1, int(e)]).permutation(len(self.train))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.train.inputs[idx], self.train.targets[idx]


def split_and_batch(ds, val_count, batch_size, seed):
    return BatchStream(ds, val_count, batch_size, seed)


def mnist_subset():
    """The 5000-sample MNIST subset bundled with ``mlxtend`` (500 per digit)."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return Dataset(x.astype(np.float64) / 255.0, one_hot(y), "classification")
