"""Datasets, the unified and per-task classifiers, and the multi-head baseline."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import InvalidInputError
from .numkit import Head

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass(frozen=True)
class LabelScheme:
    labels: tuple
    shared_label: str

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise InvalidInputError("label names must be unique")
        for name in self.labels:
            if not _NAME_RE.match(name):
                raise InvalidInputError(f"label name {name!r} must match {_NAME_RE.pattern}")
        if self.shared_label not in self.labels:
            raise InvalidInputError(f"shared label {self.shared_label!r} not in scheme")

    def index(self, name):
        try:
            return self.labels.index(name)
        except ValueError:
            raise InvalidInputError(f"unknown label {name!r}") from None

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    positive_label: str
    negative_label: str

    def __post_init__(self):
        if self.positive_label == self.negative_label:
            raise InvalidInputError("task labels must differ")

    def check(self, scheme):
        scheme.index(self.positive_label)
        scheme.index(self.negative_label)


@dataclass(frozen=True)
class MultiTaskHeadSpec:
    binary_heads: tuple
    residual_labels: tuple

    def validate(self, scheme):
        positives = set()
        covered = set()
        for t in self.binary_heads:
            t.check(scheme)
            positives.add(t.positive_label)
            covered.update((t.positive_label, t.negative_label))
        for name in self.residual_labels:
            scheme.index(name)
        if positives & set(self.residual_labels):
            raise InvalidInputError("residual head overlaps a binary head's positive label")
        missing = set(scheme.labels) - covered - set(self.residual_labels)
        if missing:
            raise InvalidInputError(f"heads do not cover labels {sorted(missing)}")
        if len(self.residual_labels) == 1:
            raise InvalidInputError("a residual head needs at least two labels")


def default_multitask_heads(scheme, binary_positives):
    """Binary heads ``<label> v <shared>`` plus a residual head over the rest."""
    heads = tuple(TaskSpec(p, p, scheme.shared_label) for p in binary_positives)
    used = set(binary_positives) | {scheme.shared_label}
    residual = tuple(lbl for lbl in scheme.labels if lbl not in used)
    spec = MultiTaskHeadSpec(heads, residual)
    spec.validate(scheme)
    return spec


class LabeledDataset:
    """Feature matrix, integer labels into ``scheme`` and one id per sample."""

    def __init__(self, X, y, scheme, ids=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if X.shape[0] != y.shape[0]:
            raise InvalidInputError("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= len(scheme)):
            raise InvalidInputError("label index out of range")
        if ids is None:
            ids = [f"s{i:06d}" for i in range(len(y))]
        if len(ids) != len(y):
            raise InvalidInputError("ids and labels differ in length")
        self.X, self.y, self.scheme, self.ids = X, y, scheme, tuple(ids)

    @property
    def d(self):
        return self.X.shape[1]

    def __len__(self):
        return len(self.y)

    def label_names(self):
        return [self.scheme.labels[i] for i in self.y]

    def counts(self):
        return {name: int(np.sum(self.y == i)) for i, name in enumerate(self.scheme.labels)}

    def subset(self, mask):
        mask = np.asarray(mask)
        idx = np.nonzero(mask)[0] if mask.dtype == bool else mask
        return LabeledDataset(self.X[idx], self.y[idx], self.scheme, [self.ids[i] for i in idx])

    def with_labels(self, names):
        wanted = [self.scheme.index(n) for n in names]
        return self.subset(np.isin(self.y, wanted))

    def relabel(self, scheme):
        """Same samples, indices remapped into ``scheme`` by label name."""
        y = [scheme.index(self.scheme.labels[i]) for i in self.y]
        return LabeledDataset(self.X, y, scheme, self.ids)


def concat_datasets(parts):
    """Merge datasets whose labels are reconciled by name.

    Labels keep their first-seen order; the shared label is the first part's.
    Exact duplicate (features, label) pairs of the shared label are kept once;
    every other sample is kept. Colliding ids get a ``#k`` suffix.
    """
    parts = list(parts)
    if not parts:
        raise InvalidInputError("nothing to concatenate")
    d = parts[0].d
    for p in parts:
        if p.d != d:
            raise InvalidInputError(f"feature dimension mismatch: {p.d} vs {d}")
    labels = []
    for p in parts:
        for name in p.scheme.labels:
            if name not in labels:
                labels.append(name)
    scheme = LabelScheme(tuple(labels), parts[0].scheme.shared_label)
    shared = scheme.index(scheme.shared_label)
    X, y, ids = [], [], []
    seen_shared, seen_ids = set(), set()
    for k, p in enumerate(parts):
        for x, lbl, sid in zip(p.X, p.y, p.ids):
            new = scheme.index(p.scheme.labels[lbl])
            if new == shared:
                key = x.tobytes()
                if key in seen_shared:
                    continue
                seen_shared.add(key)
            if sid in seen_ids:
                sid = f"{sid}#{k}"
            seen_ids.add(sid)
            X.append(x)
            y.append(new)
            ids.append(sid)
    return LabeledDataset(np.array(X).reshape(len(y), d), y, scheme, ids)


def _check_all_labels(data):
    counts = data.counts()
    if len(counts) < 2:
        raise InvalidInputError("need at least two labels")
    empty = [k for k, v in counts.items() if v == 0]
    if empty:
        raise InvalidInputError(f"labels without samples: {empty}")


def train_unified(data, cfg, hidden=256, activation="tanh", history=None, on_batch=None):
    """One softmax head over every label of ``data.scheme``."""
    _check_all_labels(data)
    labels = data.scheme.labels
    head = Head("softmax", len(labels), "unified", labels)
    model = numkit.init_model(data.d, hidden, [head], activation, cfg.seed)
    return numkit.fit(model, data.X, [data.y], cfg, history, on_batch)


def task_dataset(data, task):
    """The two-label slice a dedicated task classifier is trained on."""
    task.check(data.scheme)
    sub = data.with_labels([task.negative_label, task.positive_label])
    names = tuple(n for n in data.scheme.labels if n in (task.negative_label, task.positive_label))
    return sub.relabel(LabelScheme(names, task.negative_label))


def train_task(data, task, cfg, hidden=256, activation="tanh", history=None):
    """Task-centric classifier: a two-class softmax model for ``task`` only."""
    sub = task_dataset(data, task)
    model = train_unified(sub, cfg, hidden, activation, history)
    head = Head("softmax", 2, task.name, sub.scheme.labels)
    return numkit.make_model(model.weights, model.biases, [head], model.activation)


def multitask_heads(spec):
    heads = [Head("sigmoid", 1, t.name, (t.positive_label,)) for t in spec.binary_heads]
    if spec.residual_labels:
        heads.append(Head("softmax", len(spec.residual_labels), "residual", spec.residual_labels))
    return heads


def multitask_targets(data, spec):
    """Per-head targets: every binary head sees every sample (1 iff the sample
    carries its positive label); the residual head only scores samples whose
    label is in its subset, others get -1."""
    names = data.label_names()
    targets = [
        np.array([1.0 if n == t.positive_label else 0.0 for n in names])
        for t in spec.binary_heads
    ]
    if spec.residual_labels:
        pos = {n: i for i, n in enumerate(spec.residual_labels)}
        targets.append(np.array([pos.get(n, -1) for n in names], dtype=np.int64))
    return targets


def train_multitask(data, spec, cfg, hidden=256, activation="tanh", history=None):
    _check_all_labels(data)
    spec.validate(data.scheme)
    model = numkit.init_model(data.d, hidden, multitask_heads(spec), activation, cfg.seed)
    return numkit.fit(model, data.X, multitask_targets(data, spec), cfg, history)


def is_multitask(model):
    return any(h.kind == "sigmoid" for h in model.heads)


def head_outputs(model, X):
    """Per-head probability arrays: sigmoid p for binary heads, softmax rows otherwise."""
    logits = numkit.forward(model, X)
    out = []
    for head, sl in zip(model.heads, model.head_slices()):
        z = logits[:, sl]
        out.append(numkit.sigmoid(z)[:, 0] if head.kind == "sigmoid" else numkit.softmax(z))
    return out


def masked_argmax(logits, labels, allowed):
    """Index into ``allowed`` of the largest logit among those labels (lowest index wins ties)."""
    cols = sorted(labels.index(a) for a in allowed)
    sub = np.asarray(logits)[..., cols]
    best = np.argmax(sub, axis=-1)
    return np.asarray(cols)[best]


def predict_task(model, task, X, masked=True):
    """Boolean array: is each sample predicted as ``task.positive_label``?"""
    if is_multitask(model):
        for head, sl in zip(model.heads, model.head_slices()):
            if head.kind == "sigmoid" and head.labels[0] == task.positive_label:
                return numkit.forward(model, X)[:, sl.start] > 0.0
        raise InvalidInputError(f"model has no head for {task.positive_label!r}")
    labels = list(model.heads[0].labels)
    logits = numkit.forward(model, X)
    if masked:
        pred = masked_argmax(logits, labels, [task.negative_label, task.positive_label])
    else:
        pred = np.argmax(logits, axis=1)
    return pred == labels.index(task.positive_label)


def binary_metrics(truth, pred):
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    acc = float(np.mean(truth == pred))
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    f1 = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return acc, float(f1)


def task_accuracy(model, task, data, masked=True):
    """(accuracy, F1) on a set holding only the task's two labels.

    F1 treats ``task.positive_label`` as the positive class. ``masked=False``
    switches a unified model to full argmax, where an off-task prediction
    counts as a negative (and so as an error on positive samples).
    """
    if len(data) == 0:
        raise InvalidInputError("empty evaluation set")
    names = set(data.label_names())
    extra = names - {task.positive_label, task.negative_label}
    if extra:
        raise InvalidInputError(f"evaluation set has off-task labels {sorted(extra)}")
    truth = np.array([n == task.positive_label for n in data.label_names()])
    pred = predict_task(model, task, data.X, masked)
    if not masked and not is_multitask(model):
        # negatives predicted as a third label are also wrong
        labels = list(model.heads[0].labels)
        full = np.argmax(numkit.forward(model, data.X), axis=1)
        off = ~np.isin(full, [labels.index(task.positive_label), labels.index(task.negative_label)])
        acc = float(np.mean((truth == pred) & ~off))
        _, f1 = binary_metrics(truth, pred)
        return acc, f1
    return binary_metrics(truth, pred)


def rank_labels(logits, n):
    """Indices of the ``n`` largest logits, descending, lowest index first on ties."""
    order = np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")
    return order[:n]


def predict_topn(model, sample, n):
    """Top-``n`` (label, softmax probability) pairs for one sample."""
    head = model.heads[0]
    if is_multitask(model) or len(model.heads) != 1:
        raise InvalidInputError("top-n ranking needs a single softmax head")
    if not 1 <= n <= head.size:
        raise InvalidInputError(f"n={n} outside [1, {head.size}]")
    logits = numkit.forward(model, sample)[0]
    probs = numkit.softmax(logits)
    return [(head.labels[i], float(probs[i])) for i in rank_labels(logits, n)]


# dataset files -------------------------------------------------------------

def write_dataset(path, data, comments=()):
    """Text format::

        # free comment lines
        #shared=<label>
        <d>,<label0>,<label1>,...
        <id>,<f0>,...,<f(d-1)>,<label name>

    Features are written with ``repr`` so reading them back is exact.
    """
    lines = [f"# {c}" for c in comments]
    lines.append(f"#shared={data.scheme.shared_label}")
    lines.append(",".join([str(data.d), *data.scheme.labels]))
    for sid, x, lbl in zip(data.ids, data.X, data.y):
        lines.append(",".join([sid, *(repr(float(v)) for v in x), data.scheme.labels[lbl]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path):
    shared, header = None, None
    ids, X, y = [], [], []
    with open(path) as fh:
        for ln in fh:
            ln = ln.rstrip("\n")
            if not ln:
                continue
            if ln.startswith("#"):
                if ln.startswith("#shared="):
                    shared = ln[len("#shared="):]
                continue
            fields = ln.split(",")
            if header is None:
                header = (int(fields[0]), tuple(fields[1:]))
                scheme = LabelScheme(header[1], shared or header[1][0])
                continue
            d = header[0]
            if len(fields) != d + 2:
                raise InvalidInputError(f"{path}: expected {d} features, got {len(fields) - 2}")
            ids.append(fields[0])
            X.append([float(v) for v in fields[1:-1]])
            y.append(scheme.index(fields[-1]))
    if header is None:
        raise InvalidInputError(f"{path}: missing header")
    return LabeledDataset(np.array(X, dtype=np.float64).reshape(len(y), header[0]), y, scheme, ids)
