"""Image datasets: IDX files, synthetic clusters and attack target sampling.

IDX layout (big endian): two zero bytes, a type byte (0x08 for unsigned
bytes), a dimension count byte, one 32-bit size per dimension, then the raw
payload. Image files of MNIST and Fashion-MNIST have three dimensions
(magic 0x00000803), label files one (magic 0x00000801).
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Tuple, Union

import numpy as np

from . import AdvrankingError
from .attacks import AttackKind
from .metrics import RankingIndex

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08
_GZIP_MAGIC = b"\x1f\x8b"

#: Standard file names of the MNIST-style splits
SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

#: Fraction of the corpus forming the top pool of "-" attacks
TOP_POOL_FRACTION = 0.01

PathLike = Union[str, Path]


class DatasetError(AdvrankingError, ValueError):
    """A dataset file is malformed or a sampling request cannot be met."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Flattened images with their class labels.

    Attributes:
        images: ``n x N`` float32 pixels in [0, 1].
        labels: ``n`` integer class ids.
        name: Dataset name (``mnist``, ``fashion``, ``synthetic``, ...).
        split: ``train`` or ``test``.
        image_shape: Shape of one image before flattening.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str = "mnist"
    split: str = "test"
    image_shape: Tuple[int, ...] = field(default=(28, 28))

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.int64)
        if images.ndim != 2:
            images = images.reshape(images.shape[0], -1)
        if labels.shape != (images.shape[0],):
            raise DatasetError(
                "Dataset has {} images but {} labels".format(images.shape[0], labels.size)
            )
        if not np.all(np.isfinite(images)) or images.min(initial=0) < 0 or images.max(initial=0) > 1:
            raise DatasetError("Dataset pixels must be finite and within [0, 1]")
        if int(np.prod(self.image_shape)) != images.shape[1]:
            object.__setattr__(self, "image_shape", (images.shape[1],))
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.images[indices], self.labels[indices], self.name, self.split, self.image_shape)

    def head(self, size: Optional[int]) -> "Dataset":
        """The first ``size`` items (all of them when ``size`` is None)."""

        if size is None or size >= len(self):
            return self
        if size <= 0:
            raise DatasetError("Corpus size must be positive, got {}".format(size))
        return self.subset(np.arange(size))


def _open(path: Path) -> BinaryIO:
    stream = path.open("rb")
    if stream.read(2) == _GZIP_MAGIC:
        stream.close()
        return gzip.open(path, "rb")
    stream.seek(0)
    return stream


def read_idx(path: PathLike, magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file, gzip compressed or not.

    Arguments:
        path: File to read.
        magic: Expected magic number, checked when given.

    Raises:
        DatasetError: Wrong magic, unsupported type, truncated or trailing
            payload.
    """

    path = Path(path)
    try:
        with _open(path) as stream:
            header = stream.read(4)
            if len(header) < 4:
                raise DatasetError("{}: truncated IDX header".format(path))
            (found,) = struct.unpack(">I", header)
            if magic is not None and found != magic:
                raise DatasetError(
                    "{}: magic number 0x{:08x} does not match expected 0x{:08x}".format(
                        path, found, magic
                    )
                )
            if found >> 16 != 0 or (found >> 8) & 0xFF != _UBYTE:
                raise DatasetError("{}: unsupported IDX type 0x{:08x}".format(path, found))

            ndim = found & 0xFF
            dims_raw = stream.read(4 * ndim)
            if len(dims_raw) < 4 * ndim:
                raise DatasetError("{}: truncated IDX header".format(path))
            dims = struct.unpack(">{}I".format(ndim), dims_raw)

            expected = int(np.prod(dims, dtype=np.int64))
            payload = stream.read(expected)
            if len(payload) < expected:
                raise DatasetError(
                    "{}: truncated payload, {} of {} bytes".format(path, len(payload), expected)
                )
            if stream.read(1):
                raise DatasetError("{}: trailing data after payload".format(path))
    except (OSError, EOFError) as err:
        raise DatasetError("Cannot read {}: {}".format(path, err)) from err

    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """Write an unsigned-byte array as IDX; ``.gz`` paths are compressed."""

    path = Path(path)
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", (_UBYTE << 8) | array.ndim)
    header += struct.pack(">{}I".format(array.ndim), *array.shape)

    try:
        if path.suffix == ".gz":
            stream = gzip.GzipFile(filename=str(path), mode="wb", mtime=0)
        else:
            stream = path.open("wb")
        with stream:
            stream.write(header)
            stream.write(array.tobytes())
    except OSError as err:
        raise DatasetError("Cannot write {}: {}".format(path, err)) from err
    return path


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Scale [0, 1] pixels back to raw byte values."""

    return np.rint(np.asarray(images, dtype=np.float64) * 255).astype(np.uint8)


def load_idx(
    images_path: PathLike,
    labels_path: PathLike,
    name: str = "mnist",
    split: str = "test",
) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled by 1/255.

    Raises:
        DatasetError: Either file is malformed or the counts differ.
    """

    raw_images = read_idx(images_path, IMAGE_MAGIC)
    raw_labels = read_idx(labels_path, LABEL_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DatasetError(
            "Image count {} does not match label count {}".format(
                raw_images.shape[0], raw_labels.shape[0]
            )
        )

    images = raw_images.reshape(raw_images.shape[0], -1).astype(np.float32) / np.float32(255)
    logger.info("Loaded %d %s/%s items from %s", len(raw_labels), name, split, images_path)
    return Dataset(images, raw_labels, name, split, raw_images.shape[1:])


def save_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write ``dataset`` as an image/label IDX pair (inverse of :func:`load_idx`)."""

    images = to_bytes(dataset.images).reshape((len(dataset), *dataset.image_shape))
    if images.ndim != 3:
        images = images.reshape(len(dataset), 1, -1)
    write_idx(images_path, images)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _locate(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.is_file():
            return candidate
    raise DatasetError("Missing dataset file {} in {}".format(stem, directory))


def load_split(directory: PathLike, split: str = "test", name: str = "mnist") -> Dataset:
    """Load the standard MNIST-style ``split`` stored in ``directory``."""

    try:
        images_stem, labels_stem = SPLIT_FILES[split]
    except KeyError as err:
        raise DatasetError("Unknown split: {!r}".format(split)) from err

    directory = Path(directory)
    return load_idx(_locate(directory, images_stem), _locate(directory, labels_stem), name, split)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian clusters in [0, 1]^dim, one per class.

    Cluster centers are drawn so that every pair lies at least
    ``6 * cluster_std`` apart.
    """

    n_classes: int = 3
    points_per_class: int = 50
    dim: int = 16
    cluster_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.points_per_class < 1 or self.dim < 1:
            raise DatasetError("Synthetic spec needs positive sizes")
        if self.cluster_std <= 0:
            raise DatasetError("cluster_std must be positive")


def make_synthetic(spec: SyntheticSpec, split: str = "train", attempts: int = 100) -> Dataset:
    """Generate a separable clustered dataset, deterministic under the seed.

    Both splits share the cluster centers and differ in their points.
    """

    centers_rng = np.random.default_rng(spec.seed)
    min_gap = 6 * spec.cluster_std
    for _ in range(attempts):
        centers = centers_rng.uniform(0.25, 0.75, size=(spec.n_classes, spec.dim))
        gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
        gaps[np.diag_indices(spec.n_classes)] = np.inf
        if gaps.min() >= min_gap:
            break
    else:
        raise DatasetError(
            "Cannot place {} centers {} apart in {} dimensions".format(
                spec.n_classes, min_gap, spec.dim
            )
        )

    points_rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(spec.n_classes), spec.points_per_class)
    noise = points_rng.normal(0.0, spec.cluster_std, size=(labels.size, spec.dim))
    images = np.clip(centers[labels] + noise, 0.0, 1.0)
    order = points_rng.permutation(labels.size)

    return Dataset(images[order], labels[order], "synthetic", split, (1, spec.dim))


def top_pool(index: RankingIndex, item: int, fraction: float = TOP_POOL_FRACTION) -> np.ndarray:
    """Corpus items whose normalized rank relative to ``item`` is within ``fraction``.

    The item itself is excluded; the pool holds the ``floor(fraction * |X|)``
    nearest items (at least one) in rank order.
    """

    size = max(1, int(np.floor(fraction * index.size)))
    return index.nearest(index.embeddings[item], size, exclude=[item])


def sample_attack_targets(
    index: RankingIndex,
    kind: Union[AttackKind, str],
    w_or_m: int,
    rng: np.random.Generator,
    item: int,
) -> np.ndarray:
    """Choose the counterparts (queries Q or candidates C) of one attack.

    Arguments:
        index: Corpus the attacked ``item`` belongs to.
        kind: Attack kind; universal and distance variants follow their base.
        w_or_m: Number of counterparts.
        rng: Source of randomness.
        item: Corpus position of the attacked candidate or query.

    Returns:
        Distinct corpus indices, never containing ``item``. "+" kinds draw
        uniformly from the corpus, "-" kinds from the top pool of ``item``.

    Raises:
        DatasetError: The eligible pool holds fewer than ``w_or_m`` items.
    """

    kind = AttackKind(kind)
    if w_or_m <= 0:
        raise DatasetError("Number of counterparts must be positive")

    if kind.raises:
        pool = np.delete(np.arange(index.size), item)
    else:
        pool = top_pool(index, item)

    if pool.size < w_or_m:
        raise DatasetError(
            "Pool of {} items cannot supply {} counterparts for {}; corpus too small".format(
                pool.size, w_or_m, kind.value
            )
        )
    return rng.choice(pool, size=w_or_m, replace=False)
