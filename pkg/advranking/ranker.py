"""Embedding networks, their training losses, training loop and checkpoints.

A model maps flattened images in [0, 1]^N to embedding vectors. It never
normalizes its outputs; the cosine metric handles scale inside the
distance. Models are immutable: training returns a new model.
"""

import enum
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import (
    Any,
    BinaryIO,
    Callable,
    Dict,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from . import AdvrankingError
from . import tensor as T
from .metrics import Metric, row_distance

logger = logging.getLogger(__name__)

#: Hidden and embedding widths of the built-in architectures
ARCHITECTURES: Mapping[str, Tuple[int, ...]] = MappingProxyType(
    {"mlp": (256, 32), "mlp-deep": (128, 64, 32)}
)

#: Default triplet margin per metric
DEFAULT_MARGIN: Mapping[Metric, float] = MappingProxyType(
    {Metric.COSINE: 0.2, Metric.EUCLIDEAN: 1.0}
)

MAGIC = b"ADVRANK\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")  # magic, version, header length
_ARRAY_HEAD = struct.Struct("<HB")  # name length, number of dimensions
_COUNT = struct.Struct("<I")


class TrainingError(AdvrankingError):
    """Training cannot proceed (bad data or numerical blow-up)."""


class CheckpointError(AdvrankingError):
    """A checkpoint file cannot be written or is not a valid checkpoint."""


class LossKind(str, enum.Enum):
    TRIPLET = "triplet"
    CONTRASTIVE = "contrastive"


@dataclass(frozen=True)
class Layer:
    """One stage of a model: ``linear`` (in_dim -> out_dim) or ``relu``."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in {"linear", "relu"}:
            raise ValueError("Unknown layer kind: {!r}".format(self.kind))
        if self.kind == "linear" and (self.in_dim <= 0 or self.out_dim <= 0):
            raise ValueError("Linear layer needs positive dimensions")

    def describe(self) -> List[Any]:
        if self.kind == "linear":
            return [self.kind, self.in_dim, self.out_dim]
        return [self.kind]

    @classmethod
    def parse(cls, description: Sequence[Any]) -> "Layer":
        kind, *dims = description
        return cls(str(kind), *(int(dim) for dim in dims))


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    """Differentiable mapping from image space to embedding space.

    Attributes:
        arch: Architecture name, informational.
        layers: Ordered layer descriptors.
        params: ``"<layer>.weight"`` (in x out) and ``"<layer>.bias"``
            arrays of every linear layer, stored read-only.
        meta: Free-form descriptive tags (metric, loss, defense, ...).
    """

    arch: str
    layers: Tuple[Layer, ...]
    params: Mapping[str, np.ndarray]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        linear = [(k, layer) for k, layer in enumerate(layers) if layer.kind == "linear"]
        if not linear:
            raise ValueError("A model needs at least one linear layer")
        for (_, prev), (_, nxt) in zip(linear, linear[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    "Layer dimensions do not chain: {} -> {}".format(prev.out_dim, nxt.in_dim)
                )

        params = {}
        for k, layer in linear:
            for name, shape in (
                ("{}.weight".format(k), (layer.in_dim, layer.out_dim)),
                ("{}.bias".format(k), (layer.out_dim,)),
            ):
                if name not in self.params:
                    raise ValueError("Missing parameter {}".format(name))
                array = np.array(self.params[name], dtype=T.DTYPE)
                if array.shape != shape:
                    raise ValueError(
                        "Parameter {} has shape {}, expected {}".format(name, array.shape, shape)
                    )
                array.setflags(write=False)
                params[name] = array

        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "params", MappingProxyType(params))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def input_dim(self) -> int:
        return next(layer.in_dim for layer in self.layers if layer.kind == "linear")

    @property
    def embed_dim(self) -> int:
        return [layer.out_dim for layer in self.layers if layer.kind == "linear"][-1]

    @property
    def metric(self) -> Metric:
        return Metric.coerce(self.meta.get("metric", Metric.COSINE.value))

    @property
    def tag(self) -> str:
        """Short variant name: CT, CC, ET, EC, with a D suffix when defended."""

        metric = "E" if self.metric is Metric.EUCLIDEAN else "C"
        loss = "C" if self.meta.get("loss_kind") == LossKind.CONTRASTIVE.value else "T"
        return metric + loss + ("D" if self.meta.get("defense") else "")

    def __reduce__(self):
        # mapping proxies do not pickle; worker processes receive plain dicts
        return type(self), (self.arch, self.layers, dict(self.params), dict(self.meta))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "EmbeddingModel":
        return replace(self, params=params)

    def with_meta(self, **meta) -> "EmbeddingModel":
        return replace(self, meta={**self.meta, **meta})

    def trainable(self) -> Dict[str, T.Tensor]:
        """Fresh parameter tensors requiring gradients."""

        return {name: T.Tensor(value, requires_grad=True) for name, value in self.params.items()}

    def embed(self, images: T.TensorLike, params: Optional[Mapping[str, T.Tensor]] = None) -> T.Tensor:
        return embed(self, images, params)


def build_model(
    arch: str = "mlp",
    input_dim: int = 784,
    seed: int = 0,
    widths: Optional[Sequence[int]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> EmbeddingModel:
    """Create a freshly initialized multi-layer perceptron.

    Arguments:
        arch: Name from :data:`ARCHITECTURES`, or any label when ``widths``
            is given.
        input_dim: Flattened image size N.
        seed: Seed of the He-normal weight initialization.
        widths: Hidden widths followed by the embedding width.
        meta: Descriptive tags stored with the model.
    """

    if widths is None:
        try:
            widths = ARCHITECTURES[arch]
        except KeyError as err:
            raise ValueError("Unknown architecture: {!r}".format(arch)) from err

    rng = np.random.default_rng(seed)
    dims = [input_dim, *widths]
    layers: List[Layer] = []
    params: Dict[str, np.ndarray] = {}
    for position, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        if layers:
            layers.append(Layer("relu"))
        k = len(layers)
        layers.append(Layer("linear", fan_in, fan_out))
        params["{}.weight".format(k)] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        params["{}.bias".format(k)] = np.zeros(fan_out)

    return EmbeddingModel(arch, tuple(layers), params, meta or {})


def embed(
    model: EmbeddingModel,
    images: T.TensorLike,
    params: Optional[Mapping[str, T.Tensor]] = None,
) -> T.Tensor:
    """Embed a ``batch x N`` image batch into ``batch x embed_dim``.

    ``params`` replaces the stored parameters, typically with tensors
    requiring gradients during training.

    Raises:
        ShapeError: The batch is not 2-D or N does not match the model.
    """

    x = T.as_tensor(images)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise T.ShapeError("embed", x.shape, (None, model.input_dim))

    source = params if params is not None else model.params
    for k, layer in enumerate(model.layers):
        if layer.kind == "relu":
            x = T.relu(x)
        else:
            x = T.add(
                T.matmul(x, source["{}.weight".format(k)]),
                source["{}.bias".format(k)],
            )
    return x


def embed_array(model: EmbeddingModel, images: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Embed a large image array in chunks, outside of any gradient tape."""

    images = np.asarray(images, dtype=T.DTYPE)
    chunks = [
        embed(model, images[start:start + batch]).data
        for start in range(0, images.shape[0], batch)
    ]
    if not chunks:
        return np.zeros((0, model.embed_dim), dtype=T.DTYPE)
    return np.concatenate(chunks)


# Losses


def triplet_loss(dq_p: T.TensorLike, dq_n: T.TensorLike, beta: float) -> T.Tensor:
    """Hinge ``[beta + d(q, positive) - d(q, negative)]_+``, elementwise."""

    return T.relu(T.sub(T.add(dq_p, beta), dq_n))


def contrastive_loss(d: T.TensorLike, same_class, margin: float = 1.0) -> T.Tensor:
    """``d^2 / 2`` for matching pairs, ``[margin - d]_+^2 / 2`` otherwise."""

    d = T.as_tensor(d)
    same = np.asarray(same_class, dtype=T.DTYPE)
    pull = T.mul(T.mul(d, d), 0.5)
    gap = T.relu(T.sub(margin, d))
    push = T.mul(T.mul(gap, gap), 0.5)
    return T.add(T.mul(pull, same), T.mul(push, 1.0 - same))


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of (defensive) metric learning.

    ``margin_beta`` defaults to 0.2 for cosine and 1.0 for Euclidean
    distance. ``steps_per_epoch`` defaults to ``len(dataset) // batch``.
    """

    loss_kind: LossKind = LossKind.TRIPLET
    metric: Metric = Metric.COSINE
    margin_beta: Optional[float] = None
    lr: float = 0.01
    batch: int = 32
    epochs: int = 5
    seed: int = 0
    contrastive_margin: float = 1.0
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "metric", Metric.coerce(self.metric))
        if self.margin_beta is None:
            object.__setattr__(self, "margin_beta", DEFAULT_MARGIN[self.metric])
        if self.margin_beta < 0:
            raise ValueError("margin_beta must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch <= 0:
            raise ValueError("batch must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must not be negative")
        if self.steps_per_epoch is not None and self.steps_per_epoch <= 0:
            raise ValueError("steps_per_epoch must be positive")

    def describe(self) -> Dict[str, Any]:
        return {
            "loss_kind": self.loss_kind.value,
            "metric": self.metric.value,
            "margin_beta": self.margin_beta,
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "seed": self.seed,
        }


class TripletBatch(NamedTuple):
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


class PairBatch(NamedTuple):
    left: np.ndarray
    right: np.ndarray
    same: np.ndarray


Batch = Union[TripletBatch, PairBatch]


class StepResult(NamedTuple):
    """Outcome of one optimization step.

    ``clean_loss`` is the loss on the unperturbed batch when the step
    trains on perturbed images, else ``None``.
    """

    loss: float
    grads: Mapping[str, np.ndarray]
    clean_loss: Optional[float] = None


StepFunction = Callable[[EmbeddingModel, Batch, TrainConfig], StepResult]


class LabelSampler:
    """Uniform triplet and pair sampling by class label."""

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        self.classes = np.unique(labels)
        self.members = {label: np.flatnonzero(labels == label) for label in self.classes}
        self.anchors = np.concatenate(
            [idx for idx in self.members.values() if idx.size >= 2] or [np.zeros(0, np.intp)]
        )
        if self.classes.size < 2 or self.anchors.size == 0:
            raise TrainingError(
                "Sampling needs two classes and a class with two members"
            )
        self.others = {label: np.flatnonzero(labels != label) for label in self.classes}
        self.labels = labels

    def _positive(self, anchor: int, rng: np.random.Generator) -> int:
        pool = self.members[self.labels[anchor]]
        position = rng.integers(pool.size - 1)
        if pool[position] >= anchor:  # step over the anchor
            position += 1
        return int(pool[position])

    def _negative(self, anchor: int, rng: np.random.Generator) -> int:
        pool = self.others[self.labels[anchor]]
        return int(pool[rng.integers(pool.size)])

    def triplets(self, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
        anchors = self.anchors[rng.integers(self.anchors.size, size=size)]
        positives = np.array([self._positive(a, rng) for a in anchors], dtype=np.intp)
        negatives = np.array([self._negative(a, rng) for a in anchors], dtype=np.intp)
        return anchors, positives, negatives

    def pairs(self, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
        left = self.anchors[rng.integers(self.anchors.size, size=size)]
        same = rng.random(size) < 0.5
        right = np.array(
            [
                self._positive(a, rng) if s else self._negative(a, rng)
                for a, s in zip(left, same)
            ],
            dtype=np.intp,
        )
        return left, right, same

    def batch(self, images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
        if cfg.loss_kind is LossKind.TRIPLET:
            a, p, n = self.triplets(cfg.batch, rng)
            return TripletBatch(images[a], images[p], images[n])
        left, right, same = self.pairs(cfg.batch, rng)
        return PairBatch(images[left], images[right], same)


def batch_triplet_loss(
    model: EmbeddingModel,
    q: T.TensorLike,
    c_p: T.TensorLike,
    c_n: T.TensorLike,
    cfg: TrainConfig,
    params: Optional[Mapping[str, T.Tensor]] = None,
) -> T.Tensor:
    """Mean triplet loss of a batch of (anchor, positive, negative) images."""

    eq, ep, en = (embed(model, x, params) for x in (q, c_p, c_n))
    return triplet_loss(
        row_distance(eq, ep, cfg.metric),
        row_distance(eq, en, cfg.metric),
        cfg.margin_beta,
    ).mean()


def batch_contrastive_loss(
    model: EmbeddingModel,
    left: T.TensorLike,
    right: T.TensorLike,
    same: np.ndarray,
    cfg: TrainConfig,
    params: Optional[Mapping[str, T.Tensor]] = None,
) -> T.Tensor:
    """Mean contrastive loss of a batch of image pairs."""

    d = row_distance(embed(model, left, params), embed(model, right, params), cfg.metric)
    return contrastive_loss(d, same, cfg.contrastive_margin).mean()


def batch_loss(
    model: EmbeddingModel,
    batch: Batch,
    cfg: TrainConfig,
    params: Optional[Mapping[str, T.Tensor]] = None,
) -> T.Tensor:
    if isinstance(batch, TripletBatch):
        return batch_triplet_loss(model, *batch, cfg, params=params)
    return batch_contrastive_loss(model, *batch, cfg, params=params)


def plain_step(model: EmbeddingModel, batch: Batch, cfg: TrainConfig) -> StepResult:
    """Loss and parameter gradients of ``batch`` on clean images."""

    params = model.trainable()
    with T.Tape() as tape:
        loss = batch_loss(model, batch, cfg, params)
        tape.backward(loss)
    return StepResult(loss.item(), {name: p.grad for name, p in params.items()})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    clean_loss: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.epochs]

    def __len__(self):
        return len(self.epochs)


def train(
    model: EmbeddingModel,
    dataset,
    cfg: TrainConfig,
    step: Optional[StepFunction] = None,
) -> Tuple[EmbeddingModel, TrainHistory]:
    """Fit ``model`` on a labelled dataset by plain SGD.

    Arguments:
        model: Initial model; not modified.
        dataset: Anything with ``images`` and ``labels`` arrays.
        cfg: Training hyper-parameters.
        step: Computes loss and gradients of one batch;
            :func:`plain_step` unless a defense supplies its own.

    Returns:
        The trained model (tagged with the training configuration) and
        its per-epoch history. With ``cfg.epochs == 0`` the input model is
        returned unchanged.

    Raises:
        TrainingError: The dataset cannot be sampled, or a loss or
            gradient became non-finite.
    """

    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history

    step = step or plain_step
    images = np.asarray(dataset.images, dtype=T.DTYPE)
    sampler = LabelSampler(dataset.labels)
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps_per_epoch or max(1, images.shape[0] // cfg.batch)
    params = {name: np.array(value) for name, value in model.params.items()}

    for epoch in range(cfg.epochs):
        losses, clean = [], []
        for position in range(steps):
            batch = sampler.batch(images, cfg, rng)
            result = step(model.with_params(params), batch, cfg)
            if not np.isfinite(result.loss):
                raise TrainingError(
                    "Non-finite loss {!r} at epoch {} step {}".format(result.loss, epoch, position)
                )
            for name, grad in result.grads.items():
                if not np.all(np.isfinite(grad)):
                    raise TrainingError(
                        "Non-finite gradient for {} at epoch {} step {}".format(name, epoch, position)
                    )
                params[name] = params[name] - np.float32(cfg.lr) * grad
            losses.append(result.loss)
            if result.clean_loss is not None:
                clean.append(result.clean_loss)

        record = EpochRecord(
            epoch, float(np.mean(losses)), float(np.mean(clean)) if clean else None
        )
        history.epochs.append(record)
        if record.clean_loss is None:
            logger.info("Epoch %d: loss %.6f", epoch, record.loss)
        else:
            logger.info(
                "Epoch %d: loss %.6f (clean %.6f)", epoch, record.loss, record.clean_loss
            )

    trained = model.with_params(params).with_meta(**cfg.describe())
    return trained, history


# Checkpoints


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError("Checkpoint is truncated")
    return data


def save_model(model: EmbeddingModel, path: Union[str, Path]) -> Path:
    """Write ``model`` as a self-describing little-endian checkpoint."""

    path = Path(path)
    header = json.dumps(
        {
            "arch": model.arch,
            "layers": [layer.describe() for layer in model.layers],
            "meta": dict(model.meta),
        },
        sort_keys=True,
    ).encode("utf-8")

    try:
        with path.open("wb") as stream:
            stream.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
            stream.write(header)
            stream.write(_COUNT.pack(len(model.params)))
            for name, value in model.params.items():
                encoded = name.encode("utf-8")
                stream.write(_ARRAY_HEAD.pack(len(encoded), value.ndim))
                stream.write(encoded)
                stream.write(struct.pack("<{}I".format(value.ndim), *value.shape))
                stream.write(value.astype("<f4").tobytes())
    except OSError as err:
        raise CheckpointError("Cannot write checkpoint {}: {}".format(path, err)) from err

    logger.debug("Saved %s model to %s", model.arch, path)
    return path


def load_model(path: Union[str, Path]) -> EmbeddingModel:
    """Read a checkpoint written by :func:`save_model`.

    Raises:
        CheckpointError: The file is unreadable, not a checkpoint, of an
            unsupported version, truncated or otherwise corrupt.
    """

    path = Path(path)
    try:
        with path.open("rb") as stream:
            magic, version, header_size = _PREAMBLE.unpack(_read_exact(stream, _PREAMBLE.size))
            if magic != MAGIC:
                raise CheckpointError("{} is not a model checkpoint".format(path))
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    "Unsupported checkpoint version {} (expected {})".format(version, FORMAT_VERSION)
                )
            try:
                header = json.loads(_read_exact(stream, header_size).decode("utf-8"))
                layers = tuple(Layer.parse(item) for item in header["layers"])
            except (ValueError, KeyError, TypeError) as err:
                raise CheckpointError("Corrupt checkpoint header: {}".format(err)) from err

            (count,) = _COUNT.unpack(_read_exact(stream, _COUNT.size))
            params = {}
            for _ in range(count):
                name_size, ndim = _ARRAY_HEAD.unpack(_read_exact(stream, _ARRAY_HEAD.size))
                name = _read_exact(stream, name_size).decode("utf-8", errors="replace")
                shape = struct.unpack("<{}I".format(ndim), _read_exact(stream, 4 * ndim))
                size = int(np.prod(shape, dtype=np.int64)) * 4
                params[name] = np.frombuffer(_read_exact(stream, size), dtype="<f4").reshape(shape)

            if stream.read(1):
                raise CheckpointError("Trailing data after checkpoint payload")
    except OSError as err:
        raise CheckpointError("Cannot read checkpoint {}: {}".format(path, err)) from err

    try:
        return EmbeddingModel(header.get("arch", "mlp"), layers, params, header.get("meta", {}))
    except ValueError as err:
        raise CheckpointError("Inconsistent checkpoint {}: {}".format(path, err)) from err
