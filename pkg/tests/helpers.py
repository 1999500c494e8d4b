import numpy as np

from fedbias.nn import (
    Classifier,
    DenseLayer,
    FeatureExtractor,
    Model,
    MRContext,
    cross_entropy,
    forward_features,
    forward_logits,
)


def random_case(seed: int, dbe: bool):
    """A small random network, batch and (optionally) DBE inputs."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 7))
    k = int(rng.integers(1, 9))
    c = int(rng.integers(2, 6))
    b = int(rng.integers(1, 5))
    depth = int(rng.integers(2, 4))  # total layers
    split = int(rng.integers(1, depth))
    widths = [d] + [int(rng.integers(1, 9)) for _ in range(depth - 1)] + [c]
    widths[split] = k
    layers = []
    for i in range(depth):
        act = "identity" if i == depth - 1 else str(rng.choice(["relu", "identity"]))
        layers.append(DenseLayer(rng.normal(size=(widths[i + 1], widths[i])), rng.normal(size=widths[i + 1]), act))
    model = Model(FeatureExtractor(layers[:split]), Classifier(layers[split:]))
    x = rng.normal(size=(b, d))
    y = rng.integers(0, c, size=b)
    prbm = mr = None
    if dbe:
        prbm = rng.normal(size=k)
        previous = rng.normal(size=k) if rng.random() < 0.5 else None
        mr = MRContext(previous, rng.normal(size=k), float(rng.uniform(0, 5)), float(rng.uniform(0, 1)))
    return model, x, y, prbm, mr


def reference_loss(model: Model, x, y, prbm=None, mr=None) -> float:
    """Forward-only loss, computed without touching ``backward``."""
    zg = forward_features(model.extractor, x)
    z = zg + prbm if prbm is not None else zg
    loss = cross_entropy(forward_logits(model.classifier, z), y)
    if mr is not None:
        batch_mean = zg.mean(axis=0)
        running = batch_mean if mr.previous is None else (1 - mr.momentum) * mr.previous + mr.momentum * batch_mean
        loss += mr.kappa * float(np.mean((running - mr.global_mean) ** 2))
    return loss


def gradient_pair(model: Model, x, y, prbm=None, mr=None, step=1e-5):
    """(analytic, finite-difference) gradients over model params then bias."""
    from fedbias.nn import backward, numeric_gradient

    grads, _ = backward(model.extractor, model.classifier, x, y, prbm, mr)
    analytic = grads.flatten(include_prbm=prbm is not None)
    n_model = model.flatten().size
    probe = model.copy()

    def loss_fn(flat):
        probe.load_flat(flat[:n_model])
        bias = flat[n_model:] if prbm is not None else None
        return reference_loss(probe, x, y, bias, mr)

    start = model.flatten() if prbm is None else np.concatenate([model.flatten(), prbm])
    return analytic, numeric_gradient(loss_fn, start, step)


def within_tolerance(analytic, numeric, rel=1e-4, abs_=1e-7) -> np.ndarray:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= np.maximum(rel * scale, abs_)
