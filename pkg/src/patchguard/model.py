"""Patch-ensemble classifier with a small receptive field.

One shared base perceptron (input -> ReLU hidden -> class logits) is applied
to every ``rf x rf`` pixel patch at the geometry's stride. The per-patch
outputs form the local logits tensor; the insecure global prediction is the
argmax of their mean.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .geometry import RFGeometry
from .tensors import ContractError, FeatureTensor, ImageTensor, window_sums

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class PatchEnsembleModel:
    geom: RFGeometry
    classes: int
    channels: int
    w1: np.ndarray  # (rf_rows * rf_cols * channels, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, classes)
    b2: np.ndarray  # (classes,)
    final_loss: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        d_in = self.geom.rf_rows * self.geom.rf_cols * self.channels
        arrays = {}
        for name in ("w1", "b1", "w2", "b2"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ContractError(f"{name} has non-finite entries")
            a.setflags(write=False)
            arrays[name] = a
        hidden = arrays["b1"].shape[0]
        expected = {"w1": (d_in, hidden), "b1": (hidden,), "w2": (hidden, self.classes), "b2": (self.classes,)}
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ContractError(f"{name} has shape {arrays[name].shape}, expected {shape}")
            object.__setattr__(self, name, arrays[name])

    @property
    def hidden(self) -> int:
        return self.b1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def params(self) -> Tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def with_params(self, w1, b1, w2, b2, final_loss=None) -> "PatchEnsembleModel":
        return replace(self, w1=w1, b1=b1, w2=w2, b2=b2, final_loss=final_loss)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    hidden_units: int = 64
    adv_mask_shape: Optional[Tuple[int, int]] = None
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.batch_size < 1 or self.hidden_units < 1:
            raise ContractError("learning rate must be >= 0; epochs, batch size and hidden units positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.adv_mask_shape is not None and min(self.adv_mask_shape) < 1:
            raise ContractError("adversarial mask shape must be positive")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (count, rows, cols, channels) in [0, 1]
    labels: np.ndarray  # (count,)
    class_count: int

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim == 3:
            imgs = imgs[..., None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if imgs.ndim != 4 or len(imgs) != len(labels):
            raise ContractError("images must be (count, rows, cols, channels) with one label each")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ContractError("labels must lie in [0, class_count)")
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise ContractError("pixels must lie in [0, 1]")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> ImageTensor:
        return ImageTensor(self.images[i])

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.class_count)


# --- forward / backward ----------------------------------------------------


@functools.lru_cache(maxsize=32)
def patch_index(geom: RFGeometry, channels: int) -> np.ndarray:
    """Indices into a flattened (rows, cols, channels) image, one row per feature cell."""
    r = np.arange(geom.rf_rows)[:, None, None]
    c = np.arange(geom.rf_cols)[None, :, None]
    ch = np.arange(channels)[None, None, :]
    offsets = ((r * geom.image_cols + c) * channels + ch).reshape(-1)
    starts = [
        (i * geom.stride_rows * geom.image_cols + j * geom.stride_cols) * channels
        for i in range(geom.feature_rows)
        for j in range(geom.feature_cols)
    ]
    idx = np.asarray(starts)[:, None] + offsets[None, :]
    idx.setflags(write=False)
    return idx


def as_batch(model: PatchEnsembleModel, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    g = model.geom
    if x.ndim == 2:
        x = x[None, :, :, None]
    elif x.ndim == 3:
        # one (rows, cols, channels) image, or a stack of grayscale images
        x = x[None] if x.shape[-1] == model.channels and x.shape[:2] == (g.image_rows, g.image_cols) else x[..., None]
    if x.shape[1:] != (g.image_rows, g.image_cols, model.channels):
        raise ContractError(
            f"image shape {x.shape[1:]} does not match model input "
            f"{(g.image_rows, g.image_cols, model.channels)}"
        )
    return x


def forward(model: PatchEnsembleModel, x: np.ndarray):
    """Returns (patches, hidden, local logits) for a batch of images."""
    flat = x.reshape(len(x), -1)
    patches = flat[:, patch_index(model.geom, model.channels)]  # (B, cells, d)
    hidden = np.maximum(patches @ model.w1 + model.b1, 0.0)  # (B, cells, H)
    logits = hidden @ model.w2 + model.b2  # (B, cells, N)
    return patches, hidden, logits


def local_logits(model: PatchEnsembleModel, images: np.ndarray) -> np.ndarray:
    """Local logits for a batch, shape (B, feature_rows, feature_cols, classes)."""
    x = as_batch(model, images)
    _, _, z = forward(model, x)
    return z.reshape(len(x), model.geom.feature_rows, model.geom.feature_cols, model.classes)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def logits_to_kind(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "logits":
        return values
    if kind == "confidence":
        return softmax(values)
    if kind == "prediction":
        return np.eye(values.shape[-1])[np.argmax(values, axis=-1)]
    raise ContractError(f"unknown feature kind {kind!r}")


def extract_features(model: PatchEnsembleModel, image, kind: str = "logits") -> FeatureTensor:
    px = image.pixels if isinstance(image, ImageTensor) else image
    z = local_logits(model, px)[0]
    return FeatureTensor(logits_to_kind(z, kind), kind)


def predict_insecure(model: PatchEnsembleModel, image) -> int:
    px = image.pixels if isinstance(image, ImageTensor) else image
    z = local_logits(model, px)[0]
    return int(np.argmax(z.mean(axis=(0, 1))))


def softmax_minus_onehot(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of cross entropy w.r.t. logits; the true-class entry is minus the other
    probabilities' sum so it does not round to zero when the softmax saturates."""
    g = softmax(z)
    rows = np.arange(len(y))
    g[rows, y] = 0.0
    g[rows, y] = -g.sum(axis=1)
    return g


def cross_entropy(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row cross entropy of softmax(z) against integer labels.

    Written as log(sum exp(z - z_y)) so that confidently correct rows keep
    full relative precision through log1p.
    """
    rows = np.arange(len(y))
    d = z - z[rows, y][:, None]
    m = d.max(axis=1)
    general = m + np.log(np.exp(d - m[:, None]).sum(axis=1))
    others = d.copy()
    others[rows, y] = -np.inf
    with np.errstate(over="ignore"):
        confident = np.log1p(np.exp(others).sum(axis=1))
    return np.where(m <= 0.0, confident, general)


def backward(model: PatchEnsembleModel, x, patches, hidden, gz, input_grad: bool = False):
    """Push a local-logit gradient ``gz`` (B, cells, N) back to the weights and, optionally, the pixels."""
    B = len(x)
    gz2 = gz.reshape(-1, model.classes)
    h2 = hidden.reshape(-1, model.hidden)
    dw2 = h2.T @ gz2
    db2 = gz2.sum(axis=0)
    gh = (gz2 @ model.w2.T) * (h2 > 0)
    dw1 = patches.reshape(-1, model.input_dim).T @ gh
    db1 = gh.sum(axis=0)
    dx = None
    if input_grad:
        size = x[0].size
        gp = gh @ model.w1.T  # (B * cells, d)
        idx = patch_index(model.geom, model.channels)
        pos = (idx[None] + (np.arange(B) * size)[:, None, None]).reshape(-1)
        dx = np.bincount(pos, weights=gp.reshape(-1), minlength=B * size).reshape(x.shape)
    return (dw1, db1, dw2, db2), dx


def loss_and_grads(
    model: PatchEnsembleModel,
    images: np.ndarray,
    labels: np.ndarray,
    cell_keep: Optional[np.ndarray] = None,
    input_grad: bool = False,
):
    """Mean cross entropy of the aggregated logits and its gradients.

    The aggregate is ``sum(keep * local_logits) / cells``; ``cell_keep`` of
    shape (B, cells) zeroes masked cells (all ones gives the plain mean).
    Returns ``(loss, (dw1, db1, dw2, db2), dx)`` with ``dx`` None unless
    requested.
    """
    x = as_batch(model, images)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    B = len(x)
    patches, hidden, z = forward(model, x)
    cells = z.shape[1]
    keep = np.ones((B, cells)) if cell_keep is None else np.asarray(cell_keep, dtype=np.float64)
    agg = (z * keep[:, :, None]).sum(axis=1) / cells
    loss = float(cross_entropy(agg, y).mean())

    g_agg = softmax_minus_onehot(agg, y) / B
    gz = g_agg[:, None, :] * (keep[:, :, None] / cells)  # (B, cells, N)
    grads, dx = backward(model, x, patches, hidden, gz, input_grad)
    return loss, grads, dx


# --- training --------------------------------------------------------------


def init_model(geom: RFGeometry, channels: int, classes: int, hidden: int, seed: int) -> PatchEnsembleModel:
    rng = np.random.default_rng(seed)
    d_in = geom.rf_rows * geom.rf_cols * channels
    a1 = np.sqrt(6.0 / (d_in + hidden))
    a2 = np.sqrt(6.0 / (hidden + classes))
    return PatchEnsembleModel(
        geom,
        classes,
        channels,
        rng.uniform(-a1, a1, size=(d_in, hidden)),
        np.zeros(hidden),
        rng.uniform(-a2, a2, size=(hidden, classes)),
        np.zeros(classes),
    )


def best_window_keep(z: np.ndarray, labels: np.ndarray, geom: RFGeometry, shape: Tuple[int, int]) -> np.ndarray:
    """(B, cells) keep-mask zeroing the window with the most clipped true-class evidence."""
    fr, fc = geom.feature_rows, geom.feature_cols
    if shape[0] > fr or shape[1] > fc:
        raise ContractError(f"mask {shape} larger than feature grid {(fr, fc)}")
    B = len(labels)
    true_ev = np.maximum(z[np.arange(B), :, labels], 0.0).reshape(B, fr, fc)
    best = np.argmax(window_sums(true_ev, shape), axis=1)
    ncols = fc - shape[1] + 1
    keep = np.ones((B, fr, fc))
    for b, k in enumerate(best):
        i, j = divmod(int(k), ncols)
        keep[b, i : i + shape[0], j : j + shape[1]] = 0.0
    return keep.reshape(B, -1)


def _keep_for(model, x, y, mask_shape):
    if mask_shape is None:
        return None
    _, _, z = forward(model, x)
    return best_window_keep(z, y, model.geom, mask_shape)


def dataset_loss(model: PatchEnsembleModel, data: LabeledDataset, mask_shape=None, chunk: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), chunk):
        x, y = data.images[s : s + chunk], data.labels[s : s + chunk]
        keep = _keep_for(model, x, y, mask_shape)
        total += loss_and_grads(model, x, y, keep)[0] * len(y)
    return total / len(data)


def _sgd(
    model: PatchEnsembleModel,
    data: LabeledDataset,
    config: TrainConfig,
    mask_shape: Optional[Tuple[int, int]],
    history: Optional[List[float]],
    seed_offset: int,
) -> PatchEnsembleModel:
    rng = np.random.default_rng(config.seed + seed_offset)
    params = [p.copy() for p in model.params()]
    velocity = [np.zeros_like(p) for p in params]
    loss = float("nan")
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), config.batch_size):
            idx = np.sort(order[s : s + config.batch_size])
            x, y = data.images[idx], data.labels[idx]
            current = model.with_params(*params)
            keep = _keep_for(current, x, y, mask_shape)
            batch_loss, grads, _ = loss_and_grads(current, x, y, keep)
            if not np.isfinite(batch_loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch)
            for p, v, g in zip(params, velocity, grads):
                v *= config.momentum
                v -= config.learning_rate * g
                p += v
        model = model.with_params(*params)
        loss = dataset_loss(model, data, mask_shape)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch)
        if history is not None:
            history.append(loss)
        log.info("epoch %d loss %.4f", epoch, loss)
    return model.with_params(*params, final_loss=loss)


def _check_data(data: LabeledDataset, geom: RFGeometry) -> None:
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    if data.images.shape[1:3] != (geom.image_rows, geom.image_cols):
        raise ContractError("dataset image size does not match the geometry")


def train(
    dataset: LabeledDataset,
    geom: RFGeometry,
    config: TrainConfig,
    history: Optional[List[float]] = None,
) -> PatchEnsembleModel:
    """Minibatch SGD on cross entropy of the mean local logits. Deterministic given ``config.seed``."""
    _check_data(dataset, geom)
    model = init_model(geom, dataset.images.shape[3], dataset.class_count, config.hidden_units, config.seed)
    return _sgd(model, dataset, config, None, history, 0)


def train_provable_adv(
    dataset: LabeledDataset,
    geom: RFGeometry,
    config: TrainConfig,
    init: Optional[PatchEnsembleModel] = None,
    history: Optional[List[float]] = None,
) -> PatchEnsembleModel:
    """Fine-tune with the highest true-class-evidence window of each example masked out.

    Starts from ``init`` or, when absent, from a conventionally trained model
    using the same config.
    """
    if config.adv_mask_shape is None:
        raise ContractError("provable adversarial training needs adv_mask_shape")
    _check_data(dataset, geom)
    shape = tuple(config.adv_mask_shape)
    if shape[0] > geom.feature_rows or shape[1] > geom.feature_cols:
        raise ContractError(f"mask {shape} larger than feature grid {geom.feature_shape}")
    if init is None:
        init = train(dataset, geom, config)
    return _sgd(init, dataset, config, shape, history, 1)


def accuracy(model: PatchEnsembleModel, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    z = local_logits(model, data.images)
    pred = np.argmax(z.mean(axis=(1, 2)), axis=1)
    return float(np.mean(pred == data.labels))


# --- gradient verification ---------------------------------------------------


def gradient_check(
    model: PatchEnsembleModel,
    image,
    label: int,
    samples: int = 20,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``samples`` random entries of each parameter array and ``samples``
    random input pixels. A probe whose +/- step flips any ReLU is skipped and
    replaced by the next random entry, since the loss has a kink inside the
    difference interval there and the central difference is not a gradient.
    """
    px = image.pixels if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    y = np.array([label])
    rng = np.random.default_rng(seed)
    _, grads, dx = loss_and_grads(model, px[None], y, input_grad=True)

    def probe(m, x):
        pre = forward(m, x[None])[0] @ m.w1 + m.b1
        return loss_and_grads(m, x[None], y)[0], pre > 0

    def rel(a, n):
        den = max(abs(a), abs(n))
        return 0.0 if den == 0.0 else abs(a - n) / den

    def check(array, analytic, evaluate):
        out = 0.0
        used = 0
        for flat in rng.permutation(array.size):
            if used == samples:
                break
            pos = np.unravel_index(flat, array.shape)
            orig = array[pos]
            array[pos] = orig + step
            up, on_up = evaluate()
            array[pos] = orig - step
            down, on_down = evaluate()
            array[pos] = orig
            if not np.array_equal(on_up, on_down):
                continue
            used += 1
            out = max(out, rel(analytic[pos], (up - down) / (2 * step)))
        return out

    worst = 0.0
    params = [p.copy() for p in model.params()]
    for k, p in enumerate(params):
        worst = max(worst, check(p, grads[k], lambda: probe(model.with_params(*params), px)))
    x = px.copy()
    worst = max(worst, check(x, dx[0], lambda: probe(model, x)))
    return worst
