"""Classification and two-branch segmentation networks.

Both networks share one trunk family: a stack of 3x3 conv + ReLU layers.
The classifier ends in global average pooling and a fully connected layer,
so its FC weights double as CAM weights. The segmentation network keeps
that head and adds a 1x1 conv to ``C + 1`` channels, upsampled to image
size and softmax-normalised per pixel.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid topology or training configuration."""


class DivergenceError(FloatingPointError):
    """Training loss became NaN or Inf."""


@dataclass(frozen=True)
class Topology:
    """Trunk layout plus head sizes.

    ``channels[i]`` and ``strides[i]`` describe conv layer ``i``; every conv
    is ``kernel x kernel`` with same-padding.
    """

    n_classes: int = 5
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32)
    strides: tuple[int, ...] = (2, 1)
    kernel: int = 3
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {self.n_classes}")
        if not self.channels or len(self.channels) != len(self.strides):
            raise ConfigError(f"channels {self.channels} and strides {self.strides} must be non-empty and equal length")
        if any(c < 1 for c in self.channels) or any(s < 1 for s in self.strides):
            raise ConfigError("channels and strides must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd size, got {self.kernel}")
        fh, fw = self.feature_size
        if fh < 4 or fw < 4:
            raise ConfigError(f"trunk output {fh}x{fw} is below 4x4; CAM would have no spatial structure")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.image_size
        pad = self.kernel // 2
        for s in self.strides:
            h = (h + 2 * pad - self.kernel) // s + 1
            w = (w + 2 * pad - self.kernel) // s + 1
        return h, w

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]


@dataclass
class TrainConfig:
    """Optimisation and mining hyperparameters."""

    learning_rate: float = 0.1
    lr_decay: float = 0.1
    lr_decay_epoch: int | None = None
    epochs: int = 24
    batch_size: int = 4
    momentum: float = 0.9
    seed: int = 0
    delta: float = 0.2
    delta_mode: str = "fraction_of_max"
    ae_steps: int = 3
    saliency_bg_threshold: float = 0.12
    saliency_low_threshold: float = 0.06
    prohibit_p: float = 0.1
    loss_converge_threshold: float | None = None
    flip: bool = False

    def __post_init__(self):
        for name in ("delta", "saliency_bg_threshold", "saliency_low_threshold", "lr_decay"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.prohibit_p < 1.0:
            raise ConfigError(f"prohibit_p must lie in [0, 1), got {self.prohibit_p}")
        if self.ae_steps < 1:
            raise ConfigError(f"ae_steps must be >= 1, got {self.ae_steps}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")
        if self.delta_mode not in ("fraction_of_max", "quantile"):
            raise ConfigError(f"delta_mode must be fraction_of_max or quantile, got {self.delta_mode!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.learning_rate * self.lr_decay
        return self.learning_rate


# --------------------------------------------------------------------------
# networks


class _Net:
    topology: Topology
    kind: str
    # per-channel input standardisation, fixed before training
    input_mean: np.ndarray
    input_std: np.ndarray

    def set_input_stats(self, images: np.ndarray) -> None:
        """Standardise inputs with the channel statistics of ``[N, H, W, 3]`` images."""
        flat = np.asarray(images, dtype=np.float64).reshape(-1, images.shape[-1])
        self.input_mean = flat.mean(axis=0)
        self.input_std = np.maximum(flat.std(axis=0), 1e-6)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(self.trunk):
            yield f"trunk.{i}.weight", w
            yield f"trunk.{i}.bias", b
        yield "fc.weight", self.fc_weights
        yield "fc.bias", self.fc_bias

    def features(self, x: Tensor) -> Tensor:
        pad = self.topology.kernel // 2
        shape = (-1, 1, 1) if x.data.ndim == 3 else (1, -1, 1, 1)
        x = T.mul(T.add(x, -self.input_mean.reshape(shape)), 1.0 / self.input_std.reshape(shape))
        for (w, b), s in zip(self.trunk, self.topology.strides):
            x = T.relu(T.conv2d(x, w, b, stride=s, pad=pad))
        return x

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self):
        other = init_model(self.topology, seed=0, kind=self.kind)
        for (_, dst), (_, src) in zip(other.named_parameters(), self.named_parameters()):
            dst.data[...] = src.data
        other.input_mean = self.input_mean.copy()
        other.input_std = self.input_std.copy()
        return other


class ClassifierModel(_Net):
    """Conv trunk -> global average pooling -> fully connected logits."""

    kind = "classifier"

    def __init__(self, topology: Topology, trunk: list[tuple[Tensor, Tensor]],
                 fc_weights: Tensor, fc_bias: Tensor):
        self.topology = topology
        self.trunk = trunk
        self.fc_weights = fc_weights
        self.fc_bias = fc_bias
        self.input_mean = np.zeros(topology.in_channels)
        self.input_std = np.ones(topology.in_channels)

    @property
    def num_classes(self) -> int:
        return self.topology.n_classes

    def logits(self, x: Tensor) -> Tensor:
        return T.linear(T.global_average_pool(self.features(x)), self.fc_weights, self.fc_bias)


class SegModel(_Net):
    """Shared trunk with a classification head and a segmentation head."""

    kind = "segmentation"

    def __init__(self, topology: Topology, trunk: list[tuple[Tensor, Tensor]],
                 fc_weights: Tensor, fc_bias: Tensor, seg_weights: Tensor, seg_bias: Tensor):
        self.topology = topology
        self.trunk = trunk
        self.fc_weights = fc_weights
        self.fc_bias = fc_bias
        self.seg_weights = seg_weights
        self.seg_bias = seg_bias
        self.input_mean = np.zeros(topology.in_channels)
        self.input_std = np.ones(topology.in_channels)

    @property
    def num_classes(self) -> int:
        return self.topology.n_classes

    def named_parameters(self):
        yield from super().named_parameters()
        yield "seg.weight", self.seg_weights
        yield "seg.bias", self.seg_bias

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(logits, scores)``; scores are per-pixel softmax over C+1 labels."""
        feats = self.features(x)
        logits = T.linear(T.global_average_pool(feats), self.fc_weights, self.fc_bias)
        h, w = self.topology.image_size
        raw = T.bilinear_upsample(T.conv2d(feats, self.seg_weights, self.seg_bias), h, w)
        axis = 0 if raw.data.ndim == 3 else 1
        return logits, T.softmax(raw, axis=axis)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_model(topology: Topology, seed: int, kind: str = "classifier") -> ClassifierModel | SegModel:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    if kind not in ("classifier", "segmentation"):
        raise ConfigError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    trunk = []
    cin = topology.in_channels
    k = topology.kernel
    for cout in topology.channels:
        w = _uniform(rng, (cout, cin, k, k), cin * k * k)
        trunk.append((w, Tensor(np.zeros(cout), requires_grad=True)))
        cin = cout
    c = topology.n_classes
    fc_w = _uniform(rng, (c, cin), cin)
    fc_b = Tensor(np.zeros(c), requires_grad=True)
    if kind == "classifier":
        return ClassifierModel(topology, trunk, fc_w, fc_b)
    seg_w = _uniform(rng, (c + 1, cin, 1, 1), cin)
    seg_b = Tensor(np.zeros(c + 1), requires_grad=True)
    return SegModel(topology, trunk, fc_w, fc_b, seg_w, seg_b)


# --------------------------------------------------------------------------
# losses and training


def label_indicator(labels: Sequence[Sequence[int]] | np.ndarray, n_classes: int) -> np.ndarray:
    """Turn label sets (or an existing 0/1 matrix) into an ``[N, C]`` float matrix."""
    if isinstance(labels, np.ndarray) and labels.ndim == 2 and labels.shape[1] == n_classes:
        return labels.astype(np.float64)
    y = np.zeros((len(labels), n_classes))
    for i, ls in enumerate(labels):
        for c in ls:
            if not 0 <= int(c) < n_classes:
                raise ValueError(f"label {c} outside 0..{n_classes - 1}")
            y[i, int(c)] = 1.0
    return y


def squared_label_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """``mean_batch (1/C) sum_c (sigmoid(logit_c) - y_c)^2``."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise T.ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    diff = T.add(T.sigmoid(logits), -y)
    return T.mean(T.mul(diff, diff))


class SGD:
    """SGD with heavy-ball momentum: ``v <- m v + g``, ``p <- p - lr v``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad


def to_chw(images: np.ndarray) -> np.ndarray:
    """``[N, H, W, 3]`` images to a contiguous ``[N, 3, H, W]`` batch."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2))


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _maybe_flip(x: np.ndarray, rng: np.random.Generator, enabled: bool) -> np.ndarray:
    if not enabled:
        return x
    flips = rng.random(len(x)) < 0.5
    x = x.copy()
    x[flips] = x[flips, ..., ::-1]
    return x


def train_classifier(images: np.ndarray, labels, config: TrainConfig, topology: Topology,
                     input_stats: np.ndarray | None = None) -> tuple[ClassifierModel, list[float]]:
    """Fit a classifier with momentum SGD on the squared label loss.

    ``images`` is ``[N, H, W, 3]``; ``labels`` are label sets or an indicator
    matrix. ``input_stats`` are the images whose channel statistics
    standardise the input (default: ``images`` themselves). Weights start
    from ``init_model(topology, config.seed)``, so repeated calls with one
    config restart from the same point. Returns the model and the
    per-epoch mean loss.
    """
    x = to_chw(images)
    y = label_indicator(labels, topology.n_classes)
    model = init_model(topology, config.seed, "classifier")
    model.set_input_stats(images if input_stats is None else input_stats)
    opt = SGD(model.parameters(), config.learning_rate, config.momentum)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    per_sample = np.zeros(len(x))
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        for idx in batch_order(len(x), config.batch_size, rng):
            model.zero_grad()
            xb = _maybe_flip(x[idx], rng, config.flip)
            try:
                logits = model.logits(Tensor(xb))
                loss = squared_label_loss(logits, y[idx])
                if not np.isfinite(loss.item()):
                    raise T.NonFiniteError("non-finite loss")
                loss.backward()
            except T.NonFiniteError as exc:
                raise DivergenceError(f"classifier loss diverged in epoch {epoch}: {exc}") from exc
            opt.step()
            # per-sample bookkeeping keeps the epoch mean independent of batch order
            per_sample[idx] = ((T._sigmoid(logits.data) - y[idx]) ** 2).mean(axis=1)
        mean_loss = float(per_sample.mean())
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"classifier loss diverged in epoch {epoch}")
        history.append(mean_loss)
        logger.debug("classifier epoch %d loss %.5f", epoch, mean_loss)
    return model, history


# --------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   magic   b"AESEGCK1"            8 bytes
#   version uint32                 currently 1
#   hlen    uint32                 length of the JSON topology descriptor
#   header  utf-8 JSON             {"kind", "topology", "params": [[name, shape], ...]}
#   payload float64 little-endian  parameters concatenated in header order

CHECKPOINT_MAGIC = b"AESEGCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ClassifierModel | SegModel, path: str | Path) -> None:
    named = list(model.named_parameters())
    header = {
        "kind": model.kind,
        "input_mean": [float(v) for v in model.input_mean],
        "input_std": [float(v) for v in model.input_std],
        "topology": asdict(model.topology),
        "params": [[name, list(t.shape)] for name, t in named],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ClassifierModel | SegModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    topo = header["topology"]
    topo = Topology(**{k: tuple(v) if isinstance(v, list) else v for k, v in topo.items()})
    model = init_model(topo, seed=0, kind=header["kind"])
    model.input_mean = np.array(header["input_mean"])
    model.input_std = np.array(header["input_std"])
    offset = 16 + hlen
    for (name, t), (hname, shape) in zip(model.named_parameters(), header["params"]):
        if name != hname or list(t.shape) != shape:
            raise ConfigError(f"{path}: parameter {hname}{shape} does not match {name}{list(t.shape)}")
        n = int(np.prod(shape))
        t.data[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise ConfigError(f"{path}: trailing bytes after parameter payload")
    return model


def parameter_digest(model) -> str:
    h = hashlib.sha256()
    for _, t in model.named_parameters():
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
