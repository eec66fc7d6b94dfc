"""Small feed-forward classifier: feature extractor F and classifier head C.

Layout: input -> hidden layers (tanh) -> linear bottleneck z -> linear head.
The hidden layers form the backbone parameter group; bottleneck and head form
the head group, which gets its own learning rate.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from fuzzyadapt.errors import DivergedError, InvalidInputError, ParseError, UnsupportedVersionError
from fuzzyadapt.losses import get_loss
from fuzzyadapt.mathcore import make_rng, softmax
from fuzzyadapt.util import atomic_write_text

CHECKPOINT_FORMAT = "fuzzyadapt-model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple = (32,)
    bottleneck_dim: int = 16
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.bottleneck_dim, self.n_classes)
        if any(int(d) != d or d < 1 for d in dims):
            raise InvalidInputError(f"layer sizes must be positive integers, got {dims}")
        if self.n_classes < 2:
            raise InvalidInputError("need at least 2 classes")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.bottleneck_dim, self.n_classes)

    @property
    def n_backbone(self):
        return len(self.hidden_dims)


@dataclass
class ModelParams:
    arch: Architecture
    weights: list
    biases: list

    def __post_init__(self):
        dims = self.arch.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise InvalidInputError("parameter list does not match the architecture")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise InvalidInputError(f"layer {i} has shapes {W.shape}, {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {i} has non-finite parameters")

    @property
    def n_layers(self):
        return len(self.weights)

    def copy(self):
        return ModelParams(self.arch, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flat(self):
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def equals(self, other):
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.flat_list(), other.flat_list())
        )

    def flat_list(self):
        return [a for W, b in zip(self.weights, self.biases) for a in (W, b)]


@dataclass(frozen=True)
class TrainConfig:
    lr_backbone: float = 0.01
    lr_head: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr_backbone < 0 or self.lr_head < 0:
            raise InvalidInputError("learning rates must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidInputError("batch_size and max_epochs must be positive")


def init_model(arch, rng):
    """Uniform(-a, a) init with a = 1/sqrt(fan_in), for weights and biases."""
    weights, biases = [], []
    dims = arch.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-a, a, size=fan_out))
    return ModelParams(arch, weights, biases)


def zero_model(arch):
    dims = arch.layer_dims
    return ModelParams(
        arch,
        [np.zeros((i, o)) for i, o in zip(dims[:-1], dims[1:])],
        [np.zeros(o) for o in dims[1:]],
    )


def _as_batch(model, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.ndim != 2 or X2.shape[1] != model.arch.input_dim:
        raise InvalidInputError(f"expected inputs of dimension {model.arch.input_dim}, got shape {X.shape}")
    return X2, single


def _forward_cache(model, X):
    acts = [X]
    h = X
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ W + b
        h = np.tanh(a) if i < model.arch.n_backbone else a
        acts.append(h)
    # acts[-2] is the bottleneck, acts[-1] the logits
    return acts


def forward(model, x):
    """Return (bottleneck features z, logits) for one input or a batch."""
    X, single = _as_batch(model, x)
    acts = _forward_cache(model, X)
    z, logits = acts[-2], acts[-1]
    return (z[0], logits[0]) if single else (z, logits)


def backward(model, acts, grad_logits):
    """Backpropagate d(loss)/d(logits) to parameter gradients."""
    gW = [None] * model.n_layers
    gb = [None] * model.n_layers
    delta = grad_logits
    for i in range(model.n_layers - 1, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            if i - 1 < model.arch.n_backbone:
                delta = delta * (1.0 - acts[i] ** 2)
    return gW, gb


def batch_loss_and_grads(model, X, y, loss_fn):
    """Mean loss over the batch and its parameter gradients.

    ``loss_fn(P, Y)`` must return a batched LossEval.
    """
    acts = _forward_cache(model, X)
    if not np.all(np.isfinite(acts[-1])):
        raise DivergedError("logits became non-finite", epoch=None)
    res = loss_fn(softmax(acts[-1]), y)
    n = X.shape[0]
    gW, gb = backward(model, acts, res.grad_logits / n)
    return float(np.mean(res.value)), gW, gb


def predict_all(model, X, batch_size=None):
    """Softmax outputs for every row of X, in order."""
    X, _ = _as_batch(model, X)
    if X.shape[0] == 0:
        raise InvalidInputError("empty dataset")
    if batch_size is None:
        return softmax(_forward_cache(model, X)[-1])
    parts = [softmax(_forward_cache(model, X[i : i + batch_size])[-1]) for i in range(0, X.shape[0], batch_size)]
    return np.concatenate(parts)


def layer_lrs(model, cfg, freeze_head=False):
    lrs = [cfg.lr_backbone if i < model.arch.n_backbone else cfg.lr_head for i in range(model.n_layers)]
    if freeze_head:
        lrs[-1] = 0.0
    return lrs


@dataclass
class SGDMomentum:
    """v <- m v - lr g ; theta <- theta + v, one learning rate per layer."""

    lrs: list
    momentum: float
    velocity: list = field(default=None)

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v, lr in zip(params, grads, self.velocity, self.lrs):
            v *= self.momentum
            v -= lr * g
            p += v


def make_optimizer(model, cfg, freeze_head=False):
    lrs = layer_lrs(model, cfg, freeze_head)
    return SGDMomentum(lrs=lrs + lrs, momentum=cfg.momentum)


def sgd_epoch(model, opt, X, y, loss_fn, batch_size, rng, epoch):
    """One shuffled minibatch pass; mutates ``model`` in place and returns the mean loss."""
    order = rng.permutation(X.shape[0])
    total = 0.0
    for start in range(0, X.shape[0], batch_size):
        idx = order[start : start + batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                loss, gW, gb = batch_loss_and_grads(model, X[idx], y[idx], loss_fn)
            except DivergedError as exc:
                raise DivergedError(str(exc), epoch=epoch) from None
        if not np.isfinite(loss):
            raise DivergedError("loss became non-finite", epoch=epoch)
        opt.step(model.weights + model.biases, gW + gb)
        total += loss * len(idx)
    mean = total / X.shape[0]
    if not all(np.all(np.isfinite(a)) for a in model.flat_list()):
        raise DivergedError("parameters became non-finite", epoch=epoch)
    return mean


def _check_labeled(model, X, y):
    X, _ = _as_batch(model, X)
    if X.shape[0] == 0:
        raise InvalidInputError("empty dataset")
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise InvalidInputError("need one label per sample")
    if np.any(y < 0) or np.any(y >= model.arch.n_classes):
        raise InvalidInputError(f"labels must lie in [0, {model.arch.n_classes})")
    return X, y


def train_supervised(model, X, y, cfg, loss="ce", loss_params=None):
    """Train a copy of ``model`` on labelled data.

    Returns ``(trained_model, epoch_mean_losses)``.
    """
    X, y = _check_labeled(model, X, y)
    fn = get_loss(loss)
    params = dict(loss_params or {})

    def loss_fn(P, Y):
        return fn(P, Y, **params)

    model = model.copy()
    opt = make_optimizer(model, cfg)
    rng = make_rng(cfg.seed)
    history = []
    for epoch in range(cfg.max_epochs):
        history.append(sgd_epoch(model, opt, X, y, loss_fn, cfg.batch_size, rng, epoch))
    return model, history


def accuracy(model, X, y):
    return float(np.mean(np.argmax(predict_all(model, X), axis=1) == np.asarray(y)))


def model_to_dict(model):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": {**asdict(model.arch), "hidden_dims": list(model.arch.hidden_dims)},
        "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in zip(model.weights, model.biases)],
    }


def model_from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a model checkpoint", 0)
    if d.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {d.get('version')!r} is not supported")
    arch = Architecture(**d["arch"])
    dims = arch.layer_dims
    weights = [np.array(layer["W"], dtype=np.float64).reshape(dims[i], dims[i + 1]) for i, layer in enumerate(d["layers"])]
    biases = [np.array(layer["b"], dtype=np.float64).reshape(dims[i + 1]) for i, layer in enumerate(d["layers"])]
    return ModelParams(arch, weights, biases)


def save_model(model, path):
    # json writes floats via repr, which round-trips float64 exactly
    atomic_write_text(path, json.dumps(model_to_dict(model)))


def load_model(path):
    text = open(path, encoding="utf-8").read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed checkpoint: {exc.msg}", exc.pos) from None
    return model_from_dict(d)
