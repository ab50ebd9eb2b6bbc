"""Small fully-connected classifier with per-layer tap points and exact gradients.

The network is a plain ReLU MLP. Designated hidden layers ("tap points")
expose their post-activation outputs; the ordered list of those outputs is
the feature path consumed by the rest of the pipeline. Everything runs in
float64 so gradients can be checked against finite differences tightly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


@dataclass
class TapNet:
    """Fully-connected ReLU network with tapped hidden layers.

    layer_dims is input -> hidden... -> classes. Layer i maps
    layer_dims[i] to layer_dims[i+1]; weights[i] has shape (out, in).
    Hidden layers (all but the last) apply ReLU. tap_points index hidden
    layers (0-based); their post-activation outputs form the feature path.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)
    tap_points: tuple[int, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >=2 positive entries, got {dims}")
        self.layer_dims = dims
        if len(self.weights) != self.n_layers or len(self.biases) != self.n_layers:
            raise ValueError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (dims[i + 1], dims[i])
            if w.shape != want:
                raise ValueError(f"layer {i}: weight shape {w.shape}, expected {want}")
            if b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape}, expected ({dims[i + 1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        taps = tuple(int(t) for t in self.tap_points)
        if not taps:
            taps = tuple(range(self.n_hidden))
        if any(t < 0 or t >= self.n_hidden for t in taps):
            raise ValueError(f"tap_points {taps} must index hidden layers 0..{self.n_hidden - 1}")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"tap_points must be strictly increasing, got {taps}")
        self.tap_points = taps

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_hidden(self) -> int:
        return self.n_layers - 1

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def path_length(self) -> int:
        return len(self.tap_points)

    @property
    def tap_dims(self) -> tuple[int, ...]:
        return tuple(self.layer_dims[t + 1] for t in self.tap_points)

    def copy(self) -> "TapNet":
        return TapNet(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            tap_points=self.tap_points,
        )


def init_net(layer_dims, tap_points=(), seed: int = 0) -> TapNet:
    """Build a TapNet with uniform +-sqrt(6/(fan_in+fan_out)) init, seeded."""
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return TapNet(layer_dims=dims, weights=weights, biases=biases, tap_points=tuple(tap_points))


@dataclass
class ForwardTrace:
    """Result of one forward pass: logits, probabilities, tapped features,
    plus the cached pre/post-activations backprop needs."""

    logits: np.ndarray
    probabilities: np.ndarray
    tapped_features: list[np.ndarray]
    activations: list[np.ndarray] = field(repr=False)  # input + post-activation per hidden layer
    pre_activations: list[np.ndarray] = field(repr=False)


@dataclass
class Gradients:
    """Exact derivatives of the loss: one array per parameter plus d(loss)/d(input)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 1
    lr_drop_epochs: tuple[int, ...] = ()
    lr_drop_factor: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr_drop_factor <= 0:
            raise ValueError("lr_drop_factor must be positive")
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError("lr_drop_epochs must be strictly increasing")
        if any(e < 1 or e > self.epochs for e in drops):
            raise ValueError("lr_drop_epochs must lie within [1, epochs]")
        self.lr_drop_epochs = drops


def _check_input(net: TapNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise ValueError(f"input shape {x.shape}, expected ({net.input_dim},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def forward(net: TapNet, x: np.ndarray) -> ForwardTrace:
    """Run one example through the network, capturing tapped features."""
    x = _check_input(net, x)
    activations = [x]
    pre_activations = []
    h = x
    for i in range(net.n_hidden):
        z = net.weights[i] @ h + net.biases[i]
        pre_activations.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    logits = net.weights[-1] @ h + net.biases[-1]
    probs = softmax(logits)
    tapped = [activations[t + 1] for t in net.tap_points]
    return ForwardTrace(
        logits=logits,
        probabilities=probs,
        tapped_features=tapped,
        activations=activations,
        pre_activations=pre_activations,
    )


def loss_and_grad(net: TapNet, x: np.ndarray, label: int):
    """Cross-entropy loss of one example and its exact gradients.

    Returns (loss, Gradients). The input gradient is included because the
    attack module needs it. Loss uses a log-sum-exp formulation so it stays
    finite even when the true class probability underflows.
    """
    label = int(label)
    if not 0 <= label < net.n_classes:
        raise ValueError(f"label {label} outside [0, {net.n_classes})")
    trace = forward(net, x)
    loss = -float(log_softmax(trace.logits)[label])

    # d(loss)/d(logits) = p - onehot(y)
    delta = trace.probabilities.copy()
    delta[label] -= 1.0

    grad_w = [np.empty(0)] * net.n_layers
    grad_b = [np.empty(0)] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        grad_w[i] = np.outer(delta, trace.activations[i])
        grad_b[i] = delta.copy()
        upstream = net.weights[i].T @ delta
        if i > 0:
            delta = upstream * (trace.pre_activations[i - 1] > 0)
        else:
            grad_input = upstream
    return loss, Gradients(weights=grad_w, biases=grad_b, input=grad_input)


def _forward_batch(net: TapNet, X: np.ndarray):
    """Batched forward: returns (logits, activations, pre_activations).

    X has shape (n, input_dim). Used internally by training and feature
    extraction; the per-example `forward` is the contract surface.
    """
    activations = [X]
    pre_activations = []
    h = X
    for i in range(net.n_hidden):
        z = h @ net.weights[i].T + net.biases[i]
        pre_activations.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    logits = h @ net.weights[-1].T + net.biases[-1]
    return logits, activations, pre_activations


def _batch_loss_and_param_grads(net: TapNet, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a batch and mean parameter gradients."""
    n = X.shape[0]
    logits, activations, pre_activations = _forward_batch(net, X)
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), y]))
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad_w = [np.empty(0)] * net.n_layers
    grad_b = [np.empty(0)] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        grad_w[i] = delta.T @ activations[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (pre_activations[i - 1] > 0)
    return loss, grad_w, grad_b


def predict_batch(net: TapNet, X: np.ndarray) -> np.ndarray:
    """Model predictions (argmax of logits) for an (n, input_dim) array."""
    logits, _, _ = _forward_batch(net, np.asarray(X, dtype=np.float64))
    return np.argmax(logits, axis=1)


def tapped_features_batch(net: TapNet, X: np.ndarray) -> list[np.ndarray]:
    """Per-tap feature matrices, each (n, tap_dim), for a batch of inputs."""
    _, activations, _ = _forward_batch(net, np.asarray(X, dtype=np.float64))
    return [activations[t + 1] for t in net.tap_points]


def train(net: TapNet, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, batch_transform=None) -> TapNet:
    """SGD with momentum and decoupled weight decay; deterministic per seed.

    Shuffling uses a seeded PCG64 permutation per epoch and updates run in
    batch order, so identical seed and data give bit-identical parameters.
    The learning rate is divided by lr_drop_factor at each epoch listed in
    lr_drop_epochs. A non-finite batch loss aborts with epoch/batch info.

    batch_transform(net, Xb, yb) -> Xb, when given, replaces each batch's
    inputs before the gradient step (adversarial training plugs in here);
    it must not mutate the network.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, input_dim) array")
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and labels disagree on example count")
    if y.min() < 0 or y.max() >= net.n_classes:
        raise ValueError(f"labels must lie in [0, {net.n_classes})")

    net = net.copy()
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    rng = np.random.default_rng(cfg.rng_seed)
    lr = cfg.learning_rate
    n = X.shape[0]

    for epoch in range(1, cfg.epochs + 1):
        if epoch in cfg.lr_drop_epochs:
            lr /= cfg.lr_drop_factor
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb = X[idx]
            if batch_transform is not None:
                Xb = batch_transform(net, Xb, y[idx])
            loss, grad_w, grad_b = _batch_loss_and_param_grads(net, Xb, y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            for i in range(net.n_layers):
                vel_w[i] = cfg.momentum * vel_w[i] + grad_w[i]
                vel_b[i] = cfg.momentum * vel_b[i] + grad_b[i]
                # weight decay is decoupled from the learning rate: lr=0
                # leaves only the shrinkage term
                net.weights[i] -= lr * vel_w[i] + cfg.weight_decay * net.weights[i]
                net.biases[i] -= lr * vel_b[i]
    return net


def accuracy(net: TapNet, X: np.ndarray, y: np.ndarray) -> float:
    preds = predict_batch(net, X)
    return float(np.mean(preds == np.asarray(y)))
