"""Dense math and a small feed-forward network trained with plain SGD.

Everything here is a pure function of its arguments: ``train_step`` and
``fit`` hand back a new :class:`MlpModel` and never touch the one passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .rng import XorShift64Star, derive_seed

EPS = 1e-12

CHECKPOINT_MAGIC = "effserve-mlp"
CHECKPOINT_VERSION = 1


def _as_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidInputError("empty logit vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("non-finite logits")
    return z


def softmax(z):
    """Row-wise softmax with max subtraction; accepts a vector or a 2-D batch."""
    z = _as_logits(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(p, target):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("probability vector must be 1-D and nonempty")
    if not 0 <= int(target) < p.size:
        raise InvalidInputError(f"target {target} out of range for {p.size} classes")
    return float(-math.log(max(float(p[int(target)]), EPS)))


def binary_cross_entropy(p, y):
    p = min(max(float(p), EPS), 1.0 - EPS)
    return float(-(y * math.log(p) + (1 - y) * math.log(1.0 - p)))


def kl_divergence(p, q):
    """KL(p || q) with 0 ln 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"length mismatch: {p.shape} vs {q.shape}")
    if np.any(q <= 0):
        raise InvalidInputError("q must be strictly positive")
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / q[nz])), 0.0))


def cosine_lr(t, T, base_lr, min_lr):
    """Single-cycle cosine annealing from ``base_lr`` (t=0) to ``min_lr`` (t=T)."""
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    if t < 0 or t > T:
        raise InvalidInputError(f"step {t} outside [0, {T}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / T))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 2e-3
    min_lr: float = 0.0
    weight_decay: float = 5e-4
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise InvalidInputError("need 0 <= min_lr <= base_lr and base_lr > 0")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be nonnegative")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be nonnegative")


@dataclass(frozen=True)
class Head:
    """One output block of the network.

    ``softmax`` heads own ``size`` columns and are trained with cross-entropy;
    ``sigmoid`` heads own a single column trained with binary cross-entropy.
    ``labels`` names the columns (for a sigmoid head: the positive label).
    """

    kind: str
    size: int
    name: str = ""
    labels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("softmax", "sigmoid"):
            raise InvalidInputError(f"unknown head kind {self.kind!r}")
        if self.kind == "sigmoid" and self.size != 1:
            raise InvalidInputError("sigmoid heads have width 1")
        if self.size < 1:
            raise InvalidInputError("head size must be positive")


@dataclass(frozen=True)
class MlpModel:
    weights: tuple
    biases: tuple
    heads: tuple
    activation: str = "tanh"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("weights and biases must pair up")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise InvalidInputError("incompatible layer dimensions")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise InvalidInputError("bias shape mismatch")
        if sum(h.size for h in self.heads) != self.weights[-1].shape[1]:
            raise InvalidInputError("head sizes must sum to the output width")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def head_slices(self):
        out, start = [], 0
        for h in self.heads:
            out.append(slice(start, start + h.size))
            start += h.size
        return out

    def params(self):
        return list(self.weights) + list(self.biases)

    def equals(self, other):
        """Bit-exact comparison of architecture and parameters."""
        if self.heads != other.heads or self.activation != other.activation:
            return False
        if len(self.weights) != len(other.weights):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.params(), other.params())
        )


def _tanh_grad(h, a):
    return 1.0 - a * a


def _relu(h):
    return np.maximum(h, 0.0)


def _relu_grad(h, a):
    return (h > 0).astype(np.float64)


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def make_model(weights, biases, heads, activation="tanh", meta=None):
    return MlpModel(
        tuple(_frozen(w) for w in weights),
        tuple(_frozen(b) for b in biases),
        tuple(heads),
        activation,
        dict(meta or {}),
    )


def init_model(input_dim, hidden, heads, activation="tanh", seed=0):
    """Glorot-uniform weights and zero biases from the package RNG."""
    if isinstance(hidden, int):
        hidden = [hidden]
    out_dim = sum(h.size for h in heads)
    sizes = [input_dim, *hidden, out_dim]
    rng = XorShift64Star(derive_seed(seed, "init"))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniforms((fan_in, fan_out), -a, a))
        biases.append(np.zeros(fan_out))
    return make_model(weights, biases, heads, activation)


def forward(model, X, return_cache=False):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise InvalidInputError(
            f"feature width {X.shape[1]} does not match model input {model.input_dim}"
        )
    act, _ = _ACTIVATIONS[model.activation]
    pre, post = [], [X]
    a = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = a @ w + b
        pre.append(h)
        a = h if i == last else act(h)
        post.append(a)
    if return_cache:
        return a, (pre, post)
    return a


def head_losses(model, logits, targets):
    """Per-head mean losses and the gradient of their sum w.r.t. the logits.

    ``targets`` holds one array per head: class indices for softmax heads
    (-1 means "no target, skip this sample") and 0/1 values for sigmoid heads.
    All means divide by the full batch size, so the head losses add up to the
    batch loss exactly.
    """
    n = logits.shape[0]
    if len(targets) != len(model.heads):
        raise InvalidInputError("need one target array per head")
    dlogits = np.zeros_like(logits)
    losses = []
    for head, sl, t in zip(model.heads, model.head_slices(), targets):
        z = logits[:, sl]
        t = np.asarray(t)
        if t.shape[0] != n:
            raise InvalidInputError("target length does not match batch")
        if head.kind == "softmax":
            t = t.astype(np.int64)
            if np.any(t >= head.size) or np.any(t < -1):
                raise InvalidInputError("class index out of range")
            mask = t >= 0
            p = softmax(z)
            rows = np.nonzero(mask)[0]
            pt = np.maximum(p[rows, t[rows]], EPS)
            losses.append(float(-np.log(pt).sum() / n))
            g = p.copy()
            g[rows, t[rows]] -= 1.0
            g[~mask] = 0.0
            dlogits[:, sl] = g / n
        else:
            y = t.astype(np.float64).reshape(n, 1)
            p = sigmoid(z)
            pc = np.clip(p, EPS, 1.0 - EPS)
            losses.append(float(-(y * np.log(pc) + (1 - y) * np.log(1 - pc)).sum() / n))
            dlogits[:, sl] = (p - y) / n
    return losses, dlogits


def loss_and_grads(model, X, targets):
    """Mean batch loss (sum over heads) and gradients for every parameter.

    Gradients come back as ``(weight_grads, bias_grads)`` lists aligned with
    ``model.weights`` / ``model.biases``; weight decay is not included.
    """
    logits, (pre, post) = forward(model, X, return_cache=True)
    losses, delta = head_losses(model, logits, targets)
    _, act_grad = _ACTIVATIONS[model.activation]
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gw[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * act_grad(pre[i - 1], post[i])
    return sum(losses), gw, gb


def train_step(model, X, targets, cfg, lr):
    """One SGD update ``w <- w - lr * (grad + weight_decay * w)``.

    Returns ``(new_model, mean_batch_loss)``; the loss is measured before the
    update.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError("batch must be a nonempty 2-D array")
    loss, gw, gb = loss_and_grads(model, X, targets)
    wd = cfg.weight_decay
    weights = [w - lr * (g + wd * w) for w, g in zip(model.weights, gw)]
    biases = [b - lr * (g + wd * b) for b, g in zip(model.biases, gb)]
    return make_model(weights, biases, model.heads, model.activation, model.meta), loss


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)


def fit(model, X, targets, cfg, history=None, on_batch=None):
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD.

    The learning rate follows ``cosine_lr`` per step with ``T = steps - 1``,
    so the first step uses ``base_lr`` and the last uses ``min_lr``.
    ``on_batch(epoch, indices)`` is called before each update.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if cfg.epochs == 0:
        return model
    if n == 0:
        raise InvalidInputError("no training samples")
    targets = [np.asarray(t) for t in targets]
    per_epoch = -(-n // cfg.batch_size)
    total = per_epoch * cfg.epochs
    T = max(total - 1, 1)
    rng = XorShift64Star(derive_seed(cfg.seed, "shuffle"))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if on_batch is not None:
                on_batch(epoch, idx)
            lr = cosine_lr(min(step, T), T, cfg.base_lr, cfg.min_lr)
            model, loss = train_step(model, X[idx], [t[idx] for t in targets], cfg, lr)
            running += loss * len(idx)
            if history is not None:
                history.lr_trace.append(lr)
            step += 1
        if history is not None:
            history.epoch_loss.append(running / n)
    return model


def save_checkpoint(model, path, comments=()):
    """Write a text checkpoint.

    Layout, one item per line::

        effserve-mlp 1
        # free-form comment lines (config hash, seed, ...)
        activation <name>
        sizes <d0> <d1> ... <dk>
        head <kind> <size> <name> <label1|label2|...>     (one line per head)
        meta <key> <value>                                  (optional)
        W<i> <rows> <cols> <row-major float.hex values>
        b<i> <len> <float.hex values>

    ``float.hex`` makes the round trip bit-exact.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines += [f"# {c}" for c in comments]
    lines.append(f"activation {model.activation}")
    lines.append("sizes " + " ".join(str(s) for s in model.sizes))
    for h in model.heads:
        lines.append(f"head {h.kind} {h.size} {h.name or '-'} {'|'.join(h.labels) or '-'}")
    for k in sorted(model.meta):
        lines.append(f"meta {k} {model.meta[k]}")
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{i} {w.shape[0]} {w.shape[1]} " + " ".join(float(v).hex() for v in w.ravel()))
        lines.append(f"b{i} {b.shape[0]} " + " ".join(float(v).hex() for v in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise InvalidInputError(f"{path}: not an {CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} file")
    activation, heads, meta, weights, biases = "tanh", [], {}, [], []
    for ln in lines[1:]:
        if not ln or ln.startswith("#"):
            continue
        key, _, rest = ln.partition(" ")
        parts = rest.split()
        if key == "activation":
            activation = parts[0]
        elif key == "sizes":
            pass
        elif key == "head":
            name = "" if parts[2] == "-" else parts[2]
            labels = () if parts[3] == "-" else tuple(parts[3].split("|"))
            heads.append(Head(parts[0], int(parts[1]), name, labels))
        elif key == "meta":
            meta[parts[0]] = " ".join(parts[1:])
        elif key.startswith("W"):
            r, c = int(parts[0]), int(parts[1])
            weights.append(np.array([float.fromhex(v) for v in parts[2:]]).reshape(r, c))
        elif key.startswith("b"):
            biases.append(np.array([float.fromhex(v) for v in parts[1:]]))
        else:
            raise InvalidInputError(f"{path}: unknown checkpoint line {key!r}")
    return make_model(weights, biases, heads, activation, meta)
