"""Training of the fully connected binarized network on latent real weights.

Forward and backward passes use the sign of the latent weights; the latent
values themselves receive the updates (Adam) and are clipped to [-1, 1].
Gradients cross the sign nonlinearity through a straight-through estimator:
the activation gradient passes where the pre-sign input lies in [-1, 1] and
is zeroed outside, and the weight gradient passes where the latent weight
lies in [-1, 1].

Hidden layers apply per-neuron batch normalization before the sign, which at
export time folds into the integer popcount threshold of the inference
engine. The output layer is kept free of per-class normalization (fixed
1/sqrt(fan_in) temperature into softmax cross-entropy instead) so that the
exported integer scores reproduce the trained classifier exactly; its
exported thresholds are zero.

Reproducibility: a single seeded RNG stream is consumed in a fixed order --
weight init (layer order), then per epoch one shuffle, then per step the
dropout masks (layer order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitcore import BinarizedLinearLayer, BitTensor, BnnModel
from .faultsim import accuracy
from .mnist_io import Dataset, binarize_input

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # running = (1-m)*running + m*batch

MNIST_LAYER_SIZES = (784, 1024, 1024, 10)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0,1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0,1)")


@dataclass
class LatentDenseLayer:
    """Latent real weights plus batchnorm state for one dense layer."""

    weight: np.ndarray  # (out, in), clipped to [-1, 1]
    gamma: np.ndarray | None  # hidden layers only
    beta: np.ndarray | None
    run_mean: np.ndarray | None
    run_var: np.ndarray | None
    is_output: bool = False

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LatentModel:
    """Trainable shadow of a BnnModel: real weights and normalization stats."""

    layers: list[LatentDenseLayer]
    dropout: float

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.layers[0].in_features,) + tuple(l.out_features for l in self.layers)


def init_latent_model(
    layer_sizes: tuple[int, ...],
    dropout: float,
    rng: np.random.Generator,
    dtype=np.float32,
) -> LatentModel:
    """Glorot-uniform latent weights; batchnorm starts at identity."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for i in range(len(layer_sizes) - 1):
        n_in, n_out = layer_sizes[i], layer_sizes[i + 1]
        limit = math.sqrt(6.0 / (n_in + n_out))
        weight = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
        is_output = i == len(layer_sizes) - 2
        if is_output:
            layers.append(LatentDenseLayer(weight, None, None, None, None, True))
        else:
            layers.append(
                LatentDenseLayer(
                    weight,
                    np.ones(n_out, dtype=dtype),
                    np.zeros(n_out, dtype=dtype),
                    np.zeros(n_out, dtype=dtype),
                    np.ones(n_out, dtype=dtype),
                    False,
                )
            )
    return LatentModel(layers, dropout)


def _sign_pm1(arr: np.ndarray) -> np.ndarray:
    """Sign with the +1 tie convention, preserving dtype."""
    return np.where(arr >= 0, 1.0, -1.0).astype(arr.dtype, copy=False)


def binarize_weights(latent: np.ndarray) -> BitTensor:
    """Pack the entry-wise sign of a latent weight matrix (sign(0) = +1)."""
    return BitTensor.from_bool(np.asarray(latent) >= 0)


def forward_train(
    model: LatentModel,
    batch: np.ndarray,
    rng: np.random.Generator | None = None,
    training: bool = True,
    binarize: bool = True,
):
    """Forward pass over a (B, in) batch of +-1 inputs.

    Returns (logits, cache). With training=True, hidden layers normalize by
    batch statistics (updating the running estimates) and dropout masks are
    drawn from `rng`; otherwise running statistics are used and dropout is a
    no-op. binarize=False switches weight and activation binarization to the
    identity (full-precision mode, used by gradient checks).
    """
    x = np.asarray(batch)
    if x.ndim != 2:
        raise ValueError("batch must be 2-D (samples, features)")
    if training and model.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an RNG")

    cache = {"layers": [], "training": training, "binarize": binarize}
    act = x
    for layer in model.layers:
        wb = _sign_pm1(layer.weight) if binarize else layer.weight
        s = act @ wb.T
        entry = {"x": act, "wb": wb, "s": s}
        if layer.is_output:
            scale = 1.0 / math.sqrt(layer.in_features)
            logits = s * scale
            entry["scale"] = scale
            cache["layers"].append(entry)
            return logits, cache

        if training:
            mu = s.mean(axis=0)
            var = s.var(axis=0)
            layer.run_mean = (
                (1.0 - BN_MOMENTUM) * layer.run_mean + BN_MOMENTUM * mu
            ).astype(layer.run_mean.dtype)
            layer.run_var = (
                (1.0 - BN_MOMENTUM) * layer.run_var + BN_MOMENTUM * var
            ).astype(layer.run_var.dtype)
        else:
            mu = layer.run_mean
            var = layer.run_var
        istd = 1.0 / np.sqrt(var + BN_EPS)
        s_hat = (s - mu) * istd
        z = layer.gamma * s_hat + layer.beta
        a = _sign_pm1(z) if binarize else z
        entry.update({"s_hat": s_hat, "z": z, "istd": istd})

        if training and model.dropout > 0:
            keep = 1.0 - model.dropout
            mask = rng.random(a.shape) < keep
            a = a * mask / keep
            entry["mask"] = mask
            entry["keep"] = keep
        cache["layers"].append(entry)
        act = a
    raise AssertionError("model has no output layer")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward_ste(model: LatentModel, cache: dict, grad_logits: np.ndarray) -> list[dict]:
    """Backprop with straight-through sign gradients; returns per-layer grads."""
    binarize = cache["binarize"]
    grads: list[dict] = [None] * len(model.layers)

    entry = cache["layers"][-1]
    layer = model.layers[-1]
    ds = grad_logits * entry["scale"]
    dwb = ds.T @ entry["x"]
    dw = dwb * (np.abs(layer.weight) <= 1.0) if binarize else dwb
    grads[-1] = {"weight": dw}
    da = ds @ entry["wb"]

    for i in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[i]
        entry = cache["layers"][i]
        if "mask" in entry:
            da = da * entry["mask"] / entry["keep"]
        dz = da * (np.abs(entry["z"]) <= 1.0) if binarize else da

        dgamma = (dz * entry["s_hat"]).sum(axis=0)
        dbeta = dz.sum(axis=0)
        ds_hat = dz * layer.gamma
        if cache["training"]:
            # batch statistics participate in the graph
            b = ds_hat.shape[0]
            ds = (
                entry["istd"]
                / b
                * (
                    b * ds_hat
                    - ds_hat.sum(axis=0)
                    - entry["s_hat"] * (ds_hat * entry["s_hat"]).sum(axis=0)
                )
            )
        else:
            ds = ds_hat * entry["istd"]
        dwb = ds.T @ entry["x"]
        dw = dwb * (np.abs(layer.weight) <= 1.0) if binarize else dwb
        grads[i] = {"weight": dw, "gamma": dgamma, "beta": dbeta}
        if i > 0:
            da = ds @ entry["wb"]
    return grads


class AdamState:
    """First/second moment accumulators, keyed by (layer index, param name)."""

    def __init__(self):
        self.m: dict[tuple[int, str], np.ndarray] = {}
        self.v: dict[tuple[int, str], np.ndarray] = {}

    def slot(self, key, like: np.ndarray):
        if key not in self.m:
            self.m[key] = np.zeros_like(like)
            self.v[key] = np.zeros_like(like)
        return self.m[key], self.v[key]


def adam_step(
    model: LatentModel,
    grads: list[dict],
    state: AdamState,
    config: TrainConfig,
    t: int,
) -> LatentModel:
    """One bias-corrected Adam update; latent weights re-clipped to [-1, 1]."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = config.beta1, config.beta2
    lr, eps = config.learning_rate, config.adam_eps
    for i, (layer, layer_grads) in enumerate(zip(model.layers, grads)):
        for name, grad in layer_grads.items():
            param = getattr(layer, name)
            m, v = state.slot((i, name), param)
            m += (1.0 - b1) * (grad - m)
            v += (1.0 - b2) * (grad * grad - v)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)
            if name == "weight":
                np.clip(param, -1.0, 1.0, out=param)
    return model


# ---------------------------------------------------------------------------
# Export: fold batchnorm into integer popcount thresholds
# ---------------------------------------------------------------------------


def _fold_neuron(gamma: float, beta: float, mu: float, var: float, n: int):
    """(negate_row, threshold) for one hidden neuron.

    The neuron fires iff gamma*(s-mu)/sqrt(var+eps) + beta >= 0, where s is
    the +-1 dot product. The crossing is located from the closed form and
    then nudged by evaluating the same float expression at neighboring
    integers, so the integer decision agrees with the real-valued sign at
    every representable s, not just up to rounding of the crossing.
    """
    d = math.sqrt(var + BN_EPS)

    def fires(s: float) -> bool:
        return gamma * (s - mu) / d + beta >= 0.0

    if gamma == 0.0:
        return False, 0 if beta >= 0.0 else n + 1

    s_star = mu - beta * d / gamma
    if math.isnan(s_star):
        s_star = 0.0
    s_star = min(max(s_star, -(n + 1)), n + 1)

    if gamma > 0:
        s0 = math.ceil(s_star)
        while s0 > -(n + 1) and fires(s0 - 1):
            s0 -= 1
        while s0 <= n and not fires(s0):
            s0 += 1
        return False, (s0 + n + 1) // 2  # fire iff popcount >= T
    s0 = math.floor(s_star)
    while s0 < n + 1 and fires(s0 + 1):
        s0 += 1
    while s0 >= -n and not fires(s0):
        s0 -= 1
    # row is stored negated, flipping the comparison back to >=
    return True, (n - s0 + 1) // 2


def export_model(model: LatentModel) -> BnnModel:
    """Compile the latent model into the packed integer-threshold form."""
    layers = []
    for layer in model.layers:
        signs = np.where(layer.weight >= 0, np.int8(1), np.int8(-1))
        n = layer.in_features
        if layer.is_output:
            thresholds = np.zeros(layer.out_features, dtype=np.int32)
        else:
            if np.any(layer.run_var <= 0):
                raise ValueError("running variance must be positive to export")
            thresholds = np.empty(layer.out_features, dtype=np.int32)
            for j in range(layer.out_features):
                negate, t_j = _fold_neuron(
                    float(layer.gamma[j]),
                    float(layer.beta[j]),
                    float(layer.run_mean[j]),
                    float(layer.run_var[j]),
                    n,
                )
                thresholds[j] = t_j
                if negate:
                    signs[j] = -signs[j]
        layers.append(
            BinarizedLinearLayer(BitTensor.from_signs(signs), thresholds, layer.is_output)
        )
    sizes = model.layer_sizes
    return BnnModel(layers, input_shape=(sizes[0],), class_count=sizes[-1])


def latent_predict(model: LatentModel, inputs: np.ndarray) -> np.ndarray:
    """Inference-mode predictions of the latent model (binarized forward)."""
    logits, _ = forward_train(model, inputs, training=False, binarize=True)
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    data: Dataset,
    config: TrainConfig,
    layer_sizes: tuple[int, ...] = MNIST_LAYER_SIZES,
    test_data: Dataset | None = None,
    log_path=None,
    progress=None,
) -> tuple[LatentModel, list[tuple[int, float, float]]]:
    """Train on `data`; returns the latent model and per-epoch history.

    History rows are (epoch, mean train loss, test accuracy of the exported
    model). When log_path is given the history is also streamed to a CSV
    with header epoch,train_loss,test_accuracy.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    model = init_latent_model(layer_sizes, config.dropout, rng)
    state = AdamState()

    inputs = binarize_input(data.images).unpack().astype(np.float32)
    if inputs.shape[1] != layer_sizes[0]:
        raise ValueError(
            f"data has {inputs.shape[1]} features but the model expects {layer_sizes[0]}"
        )
    labels = np.asarray(data.labels)

    history: list[tuple[int, float, float]] = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        if log:
            log.write("epoch,train_loss,test_accuracy\n")
        t = 0
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(inputs))
            losses = []
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo : lo + config.batch_size]
                logits, cache = forward_train(model, inputs[idx], rng, training=True)
                loss, grad = softmax_cross_entropy(logits, labels[idx])
                grads = backward_ste(model, cache, grad)
                t += 1
                adam_step(model, grads, state, config, t)
                losses.append(loss)
            train_loss = float(np.mean(losses))
            test_acc = (
                accuracy(export_model(model), test_data) if test_data is not None else float("nan")
            )
            history.append((epoch, train_loss, test_acc))
            if log:
                log.write(f"{epoch},{train_loss!r},{test_acc!r}\n")
                log.flush()
            if progress:
                progress(epoch, train_loss, test_acc)
    finally:
        if log:
            log.close()
    return model, history
