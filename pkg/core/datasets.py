"""
Data generation and ingestion: the norm-regression task, a Gaussian-cluster
classification task, MNIST IDX files and the tokenizers that turn raw
vectors and images into token matrices.
"""
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from core.shared import ConfigError, IdxFormatError, ShapeError
from core.tensor_core import DTYPE, frobenius_norms

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


@dataclass
class LabeledSet:
    inputs: np.ndarray  # N x m x d
    labels: np.ndarray  # N, int

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class ClassificationData:
    train: LabeledSet
    test: LabeledSet
    classes: int


# --- Norm regression task ---

@dataclass
class NormTaskConfig:
    input_dim: int = 10
    tokens: int = 2
    token_dim: int = 5
    std: float = float(np.sqrt(5.0))
    batch_size: int = 1024

    def __post_init__(self):
        if self.tokens * self.token_dim != self.input_dim:
            raise ConfigError(
                f"token shape {self.tokens}x{self.token_dim} does not partition {self.input_dim} inputs")
        if self.std < 0 or self.batch_size < 1:
            raise ConfigError("norm task needs std >= 0 and batch_size >= 1")


def tokenize_vector(v, m, d):
    """Row i holds coordinates [i*d, (i+1)*d)."""
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1 or v.shape[0] != m * d:
        raise ShapeError(f"cannot tokenize a length-{v.shape[-1] if v.ndim else 0} vector into {m}x{d}")
    return v.reshape(m, d).copy()


def tokenize_vectors(vs, m, d):
    vs = np.asarray(vs, dtype=DTYPE)
    if vs.ndim != 2 or vs.shape[1] != m * d:
        raise ShapeError(f"cannot tokenize vectors of shape {vs.shape} into {m}x{d}")
    return vs.reshape(vs.shape[0], m, d).copy()


def gen_norm_batch(cfg, stream):
    """Fresh batch: vectors from N(0, std^2 I), tokenized in index order, target = Euclidean norm."""
    vectors = stream.normal((cfg.batch_size, cfg.input_dim), 0.0, cfg.std) if cfg.std > 0 \
        else np.zeros((cfg.batch_size, cfg.input_dim))
    inputs = tokenize_vectors(vectors, cfg.tokens, cfg.token_dim)
    return inputs, frobenius_norms(inputs)


# --- Gaussian cluster classification task ---

@dataclass
class ClusterTaskConfig:
    classes: int = 10
    tokens: int = 4
    token_dim: int = 8
    std: float = 1.0
    spread: float = 1.0
    train_size: int = 4000
    test_size: int = 2000
    means: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.classes < 2 or self.tokens < 1 or self.token_dim < 1:
            raise ConfigError("cluster task needs classes >= 2 and positive token shape")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("cluster task needs train_size and test_size >= 1")
        if self.std < 0:
            raise ConfigError(f"cluster std must be >= 0, got {self.std}")


def cluster_means(cfg, stream):
    if cfg.means is not None:
        means = np.asarray(cfg.means, dtype=DTYPE)
        if means.shape != (cfg.classes, cfg.tokens, cfg.token_dim):
            raise ConfigError(f"means must be {cfg.classes}x{cfg.tokens}x{cfg.token_dim}, got {means.shape}")
    else:
        means = stream.normal((cfg.classes, cfg.tokens, cfg.token_dim), 0.0, cfg.spread)
    flat = means.reshape(cfg.classes, -1)
    if len(np.unique(flat, axis=0)) != cfg.classes:
        raise ConfigError("class means must be distinct")
    return means


def _balanced_labels(size, classes, stream):
    labels = np.arange(size) % classes
    return labels[stream.permutation(size)]


def _cluster_split(means, cfg, size, stream):
    labels = _balanced_labels(size, cfg.classes, stream.child('labels'))
    noise = stream.child('noise').normal((size, cfg.tokens, cfg.token_dim), 0.0, cfg.std) if cfg.std > 0 \
        else np.zeros((size, cfg.tokens, cfg.token_dim))
    return LabeledSet(inputs=means[labels] + noise, labels=labels.astype(np.int64))


def gen_cluster_dataset(cfg, stream):
    means = cluster_means(cfg, stream.child('means'))
    train = _cluster_split(means, cfg, cfg.train_size, stream.child('train'))
    test = _cluster_split(means, cfg, cfg.test_size, stream.child('test'))
    return train, test


# --- MNIST (IDX) ---

@dataclass
class MnistStore:
    images: np.ndarray  # N x 28 x 28 uint8
    labels: np.ndarray  # N uint8

    def __len__(self):
        return self.images.shape[0]


def _read_header(data, magic, ndims, path):
    if len(data) < 4 + 4 * ndims:
        raise IdxFormatError('truncated', f"{path}: header needs {4 + 4 * ndims} bytes, got {len(data)}")
    found = struct.unpack('>I', data[:4])[0]
    if found != magic:
        raise IdxFormatError('wrong magic', f"{path}: expected {magic}, found {found}")
    dims = struct.unpack(f'>{ndims}I', data[4:4 + 4 * ndims])
    return dims, data[4 + 4 * ndims:]


def read_idx_images(path):
    with open(path, 'rb') as f:
        data = f.read()
    (count, rows, cols), payload = _read_header(data, IDX_IMAGES_MAGIC, 3, path)
    if (rows, cols) != (28, 28):
        raise IdxFormatError('bad dimensions', f"{path}: images are {rows}x{cols}, expected 28x28")
    expected = count * rows * cols
    if len(payload) < expected:
        raise IdxFormatError('truncated', f"{path}: pixel payload has {len(payload)} of {expected} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(count, rows, cols)


def read_idx_labels(path):
    with open(path, 'rb') as f:
        data = f.read()
    (count,), payload = _read_header(data, IDX_LABELS_MAGIC, 1, path)
    if len(payload) < count:
        raise IdxFormatError('truncated', f"{path}: label payload has {len(payload)} of {count} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=count)


def load_mnist_idx(images_path, labels_path):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError('count mismatch', f"{images.shape[0]} images vs {labels.shape[0]} labels")
    return MnistStore(images=images, labels=labels)


def load_mnist_dir(directory):
    """Loads {'train': MnistStore, 'test': MnistStore} from the standard file names."""
    stores = {}
    for split, (images_name, labels_name) in MNIST_FILES.items():
        stores[split] = load_mnist_idx(os.path.join(directory, images_name), os.path.join(directory, labels_name))
    return stores


def mnist_available(directory):
    return bool(directory) and all(
        os.path.exists(os.path.join(directory, name)) for pair in MNIST_FILES.values() for name in pair)


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{array.ndim}I', *array.shape))
        f.write(array.tobytes())


def patchify_image(img, normalize=True):
    """28x28 image -> 4x196 tokens, quadrants TL, TR, BL, BR, each flattened row-major."""
    img = np.asarray(img)
    if img.shape != (28, 28):
        raise ShapeError(f"expected a 28x28 image, got {img.shape}")
    return patchify_images(img[None], normalize)[0]


def patchify_images(imgs, normalize=True):
    imgs = np.asarray(imgs)
    if imgs.ndim != 3 or imgs.shape[1:] != (28, 28):
        raise ShapeError(f"expected N x 28 x 28 images, got {imgs.shape}")
    x = imgs.astype(DTYPE)
    if normalize:
        x = x / 255.0
    # N, 2 (row half), 14, 2 (col half), 14 -> N, row half, col half, 14, 14
    quads = x.reshape(-1, 2, 14, 2, 14).transpose(0, 1, 3, 2, 4)
    return quads.reshape(-1, 4, 196)


def unpatchify_image(tokens):
    tokens = np.asarray(tokens)
    if tokens.shape != (4, 196):
        raise ShapeError(f"expected 4x196 tokens, got {tokens.shape}")
    return tokens.reshape(2, 2, 14, 14).transpose(0, 2, 1, 3).reshape(28, 28)


def mnist_classification(stores, normalize=True, train_limit=None, test_limit=None):
    train, test = stores['train'], stores['test']
    n_train = len(train) if train_limit is None else min(train_limit, len(train))
    n_test = len(test) if test_limit is None else min(test_limit, len(test))
    return ClassificationData(
        train=LabeledSet(patchify_images(train.images[:n_train], normalize), train.labels[:n_train].astype(np.int64)),
        test=LabeledSet(patchify_images(test.images[:n_test], normalize), test.labels[:n_test].astype(np.int64)),
        classes=10,
    )
