"""Small dense networks split into a feature extractor and a classifier head.

Everything is plain numpy float64. ``backward`` returns exact gradients of the
composite training loss

    CE(head(extractor(x) + bias), y) + kappa * MSE(running_feature_mean, global_mean)

where the personalized ``bias`` and the mean-regularization term are both
optional, so the same routine serves FedAvg, FedProx and DBE training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2:
            raise ShapeError(f"layer weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", key="activation")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> DenseLayer:
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


def _check_chain(layers: Sequence[DenseLayer], what: str) -> None:
    if not layers:
        raise ShapeError(f"{what} needs at least one layer")
    for i in range(1, len(layers)):
        if layers[i].in_dim != layers[i - 1].out_dim:
            raise ShapeError(
                f"{what} layer {i} expects width {layers[i].in_dim}, "
                f"previous layer emits {layers[i - 1].out_dim}"
            )


@dataclass
class FeatureExtractor:
    """Maps inputs of width ``input_dim`` to representations of width ``output_dim``."""

    layers: list[DenseLayer]

    def __post_init__(self):
        _check_chain(self.layers, "extractor")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> FeatureExtractor:
        return FeatureExtractor([layer.copy() for layer in self.layers])


@dataclass
class Classifier:
    """Head mapping representations to class logits.

    Usually a single affine layer; deeper heads appear when the representation
    boundary is placed earlier in the network. The final layer is always affine.
    """

    layers: list[DenseLayer]

    def __post_init__(self):
        _check_chain(self.layers, "classifier")
        if self.layers[-1].activation != "identity":
            raise ConfigError("final classifier layer must be affine", key="activation")
        if self.num_classes < 2:
            raise ShapeError("classifier needs at least 2 outputs")

    @classmethod
    def linear(cls, weight, bias) -> Classifier:
        return cls([DenseLayer(weight, bias, "identity")])

    @property
    def weight(self) -> np.ndarray:
        return self.layers[-1].weight

    @property
    def bias(self) -> np.ndarray:
        return self.layers[-1].bias

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> Classifier:
        return Classifier([layer.copy() for layer in self.layers])


@dataclass
class Model:
    """Global model parameters: extractor followed by classifier."""

    extractor: FeatureExtractor
    classifier: Classifier

    def __post_init__(self):
        if self.extractor.output_dim != self.classifier.input_dim:
            raise ShapeError(
                f"extractor emits {self.extractor.output_dim} features, "
                f"classifier expects {self.classifier.input_dim}"
            )

    @property
    def rep_dim(self) -> int:
        return self.extractor.output_dim

    def layers(self) -> list[DenseLayer]:
        return self.extractor.layers + self.classifier.layers

    def arrays(self) -> Iterator[np.ndarray]:
        for layer in self.layers():
            yield layer.weight
            yield layer.bias

    def copy(self) -> Model:
        return Model(self.extractor.copy(), self.classifier.copy())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for arr in self.arrays():
            arr[...] = flat[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size
        if offset != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, model has {offset}")

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in self.arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass
class GradientSet:
    """Per-array gradients in the same order as ``Model.arrays``."""

    extractor: list[tuple[np.ndarray, np.ndarray]]
    classifier: list[tuple[np.ndarray, np.ndarray]]
    prbm: np.ndarray | None = None

    def arrays(self) -> Iterator[np.ndarray]:
        for dw, db in self.extractor + self.classifier:
            yield dw
            yield db

    def flatten(self, include_prbm: bool = False) -> np.ndarray:
        parts = [a.ravel() for a in self.arrays()]
        if include_prbm and self.prbm is not None:
            parts.append(self.prbm.ravel())
        return np.concatenate(parts)


@dataclass
class MRContext:
    """Mean-regularization inputs for one batch.

    ``previous`` is the running feature mean from earlier batches of the
    current round, or None on the first batch (the batch mean is then used
    as-is). It is held constant during differentiation.
    """

    previous: np.ndarray | None
    global_mean: np.ndarray
    kappa: float
    momentum: float


@dataclass
class LossBreakdown:
    ce: float
    mr: float
    total: float
    feature_mean: np.ndarray = field(repr=False)


def init_model(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    split: int | None = None,
) -> Model:
    """Build an MLP ``input_dim -> hidden... -> num_classes``.

    The first ``split`` layers form the extractor (ReLU throughout); the rest
    form the classifier. ``split`` defaults to ``len(hidden)``, i.e. the
    representation is the last hidden layer. Weights are uniform in
    +-1/sqrt(fan_in).
    """
    hidden = list(hidden)
    if not hidden:
        raise ConfigError("need at least one hidden layer", key="hidden")
    if any(w < 1 for w in hidden):
        raise ConfigError("hidden widths must be >= 1", key="hidden")
    if split is None:
        split = len(hidden)
    if not 1 <= split <= len(hidden):
        raise ConfigError(f"split must be in [1, {len(hidden)}]", key="split")
    widths = [input_dim, *hidden, num_classes]
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = "identity" if i == len(widths) - 2 else "relu"
        layers.append(DenseLayer(w, b, act))
    return Model(FeatureExtractor(layers[:split]), Classifier(layers[split:]))


def _forward_stack(layers: Sequence[DenseLayer], x: np.ndarray, what: str):
    cache = []
    out = x
    for i, layer in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            pre = out @ layer.weight.T + layer.bias
        cache.append((out, pre))
        out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite activation in {what} layer {i}")
    return out, cache


def _backward_stack(layers: Sequence[DenseLayer], cache, grad_out: np.ndarray, what: str):
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        inp, pre = cache[i]
        if layer.activation == "relu":
            g = g * (pre > 0.0)
        dw = g.T @ inp
        db = g.sum(axis=0)
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NumericError(f"non-finite gradient in {what} layer {i}")
        grads[i] = (dw, db)
        g = g @ layer.weight
    return grads, g


def forward_features(extractor: FeatureExtractor, batch) -> np.ndarray:
    x = as_matrix(batch, "batch")
    if x.shape[1] != extractor.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, extractor expects {extractor.input_dim}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    out, _ = _forward_stack(extractor.layers, x, "extractor")
    return out


def forward_logits(classifier: Classifier, reps) -> np.ndarray:
    z = as_matrix(reps, "reps")
    if z.shape[1] != classifier.input_dim:
        raise ShapeError(f"reps have {z.shape[1]} columns, classifier expects {classifier.input_dim}")
    out, _ = _forward_stack(classifier.layers, z, "classifier")
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(labels, batch_size: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch_size,):
        raise ShapeError(f"expected {batch_size} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ConfigError("labels must be integers", key="labels")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})", key="labels")
    return y


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = _log_softmax(logits)
    return float(max(-logp[np.arange(len(y)), y].mean(), 0.0))


def backward(
    extractor: FeatureExtractor,
    classifier: Classifier,
    batch,
    labels,
    prbm: np.ndarray | None = None,
    mr: MRContext | None = None,
) -> tuple[GradientSet, LossBreakdown]:
    """Loss and exact gradients for one batch.

    With ``prbm`` the representation fed to the classifier is translated by
    that vector and its gradient is returned in ``GradientSet.prbm``. With
    ``mr`` the mean-regularization penalty is added; it requires ``prbm``.
    """
    if mr is not None and prbm is None:
        raise ConfigError("mean regularization requires a personalized bias", key="prbm")
    x = as_matrix(batch, "batch")
    if x.shape[1] != extractor.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, extractor expects {extractor.input_dim}")
    if extractor.output_dim != classifier.input_dim:
        raise ShapeError("extractor and classifier widths differ")
    n = x.shape[0]
    y = _check_labels(labels, n, classifier.num_classes)

    zg, ext_cache = _forward_stack(extractor.layers, x, "extractor")
    if prbm is not None:
        prbm = np.asarray(prbm, dtype=np.float64)
        if prbm.shape != (zg.shape[1],):
            raise ShapeError(f"bias has shape {prbm.shape}, representation width is {zg.shape[1]}")
        z = zg + prbm
    else:
        z = zg
    logits, head_cache = _forward_stack(classifier.layers, z, "classifier")

    logp = _log_softmax(logits)
    ce = float(max(-logp[np.arange(n), y].mean(), 0.0))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    head_grads, dz = _backward_stack(classifier.layers, head_cache, dlogits, "classifier")
    dprbm = dz.sum(axis=0) if prbm is not None else None

    feature_mean = zg.mean(axis=0)
    mr_value = 0.0
    dzg = dz
    if mr is not None:
        if mr.previous is None:
            running, weight = feature_mean, 1.0
        else:
            running = (1.0 - mr.momentum) * mr.previous + mr.momentum * feature_mean
            weight = mr.momentum
        diff = running - mr.global_mean
        k = diff.shape[0]
        mr_value = float(np.mean(diff**2))
        dzg = dz + (mr.kappa * 2.0 * diff / k) * (weight / n)
    ext_grads, _ = _backward_stack(extractor.layers, ext_cache, dzg, "extractor")

    kappa = mr.kappa if mr is not None else 0.0
    total = ce + kappa * mr_value
    if not np.isfinite(total):
        raise NumericError("non-finite loss")
    return (
        GradientSet(ext_grads, head_grads, dprbm),
        LossBreakdown(ce=ce, mr=mr_value, total=total, feature_mean=feature_mean),
    )


def sgd_update(model: Model, grads: GradientSet, lr: float, prbm: np.ndarray | None = None) -> Model:
    """In-place ``p -= lr * g`` over every model array (and ``prbm`` if given)."""
    if not lr >= 0:
        raise ConfigError("learning rate must be non-negative", key="learning_rate")
    params, grad_arrays = list(model.arrays()), list(grads.arrays())
    if len(params) != len(grad_arrays):
        raise ShapeError("gradient set does not match model structure")
    pairs = list(zip(params, grad_arrays))
    for p, g in pairs:
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    for p, g in pairs:
        p -= lr * g
    if prbm is not None:
        if grads.prbm is None or grads.prbm.shape != prbm.shape:
            raise ShapeError("missing or mis-shaped bias gradient")
        prbm -= lr * grads.prbm
    return model


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at the flat vector ``params``."""
    if not step > 0:
        raise ConfigError("step must be positive", key="step")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        hi = loss_fn(p)
        p[i] = orig - step
        lo = loss_fn(p)
        p[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(np.shape(params))


def predict(model: Model, features, prbm: np.ndarray | None = None) -> np.ndarray:
    z = forward_features(model.extractor, features)
    if prbm is not None:
        z = z + prbm
    return forward_logits(model.classifier, z).argmax(axis=1)
