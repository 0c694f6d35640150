"""Confidence scores for rejecting out-of-distribution inputs, and ROC evaluation.

Every score follows one orientation: higher means more in-distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit
from .classifiers import head_outputs, is_multitask
from .errors import InvalidInputError, UndefinedMetricError


def max_logit_score(z):
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("empty logit vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("non-finite logits")
    return float(z.max())


def _expand(head):
    h = np.asarray(head, dtype=np.float64)
    if h.ndim == 0:
        p = float(h)
        return np.array([p, 1.0 - p])
    return h


def kl_uniform_score(heads_output):
    """KL divergence of the concatenated head distribution from the all-uncertain one.

    Binary heads arrive as a scalar sigmoid output ``p`` (expanded to
    ``[p, 1-p]``), multi-class heads as a probability vector. Each head is
    weighted ``1/H``, so the concatenation is a distribution; the reference
    puts ``1/(H*width)`` on each entry of a head, which is exactly what the
    concatenation looks like when every head is maximally uncertain.
    """
    heads = [_expand(h) for h in heads_output]
    if not heads:
        raise InvalidInputError("no heads")
    H = len(heads)
    q = np.concatenate([h / H for h in heads])
    ref = np.concatenate([np.full(h.size, 1.0 / (H * h.size)) for h in heads])
    return numkit.kl_divergence(q, ref)


def kl_uniform_scores(model, X):
    """Vectorised :func:`kl_uniform_score` for every row of ``X``."""
    outs = head_outputs(model, X)
    H = len(outs)
    total = np.zeros(np.asarray(X).shape[0] if np.ndim(X) == 2 else 1)
    for o in outs:
        probs = np.stack([o, 1.0 - o], axis=1) if o.ndim == 1 else o
        width = probs.shape[1]
        q = probs / H
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(q > 0, q * np.log(q * H * width), 0.0)
        total += terms.sum(axis=1)
    return np.maximum(total, 0.0)


def max_logit_scores(model, X):
    return numkit.forward(model, X).max(axis=1)


def detector_scores(model, X):
    """Default detector for a model: KL for multi-head models, max logit otherwise."""
    return kl_uniform_scores(model, X) if is_multitask(model) else max_logit_scores(model, X)


def detector_name(model):
    return "kl-uniform" if is_multitask(model) else "max-logit"


@dataclass
class RocResult:
    auroc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def curve(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def trapezoid_area(self):
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _midranks(values):
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(values)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def auroc(scores, is_positive):
    """Rank-statistic AUROC (ties count one half) plus the threshold-sweep curve.

    The curve starts at (0, 0) and adds one point per distinct score, walking
    thresholds from high to low with "positive iff score >= threshold".
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(is_positive, dtype=bool).ravel()
    if s.shape != pos.shape:
        raise InvalidInputError("scores and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("non-finite scores")
    ranks = _midranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    area = u / (n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    s_sorted, p_sorted = s[order], pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    tps = np.cumsum(p_sorted)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_group]]
    return RocResult(float(area), fpr, tpr, thresholds)


def select_threshold(scores, target_rate):
    """Largest tau keeping at least ``target_rate`` of ``scores`` at or above it."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())[::-1]
    if s.size == 0:
        raise InvalidInputError("no validation scores")
    if not 0 < target_rate <= 1:
        raise InvalidInputError("target rate must be in (0, 1]")
    k = max(1, math.ceil(round(target_rate * s.size, 9)))
    return float(s[k - 1])


def reject(scores, tau):
    """Boolean mask of rejected samples (score strictly below tau)."""
    return np.asarray(scores, dtype=np.float64) < tau


def one_class_scores(model, target, X, score="auto"):
    """Per-sample statistic for recognising ``target`` against every other label.

    ``auto`` picks the target logit for single-head models and the KL score
    for multi-head ones; ``logit``, ``prob`` and ``kl`` force a choice.
    """
    if score == "auto":
        score = "kl" if is_multitask(model) else "logit"
    if score == "kl":
        return kl_uniform_scores(model, X)
    if is_multitask(model):
        for head, sl in zip(model.heads, model.head_slices()):
            if head.kind == "sigmoid" and head.labels[0] == target:
                z = numkit.forward(model, X)[:, sl.start]
                return z if score == "logit" else numkit.sigmoid(z)
        raise InvalidInputError(f"no head for {target!r}")
    labels = list(model.heads[0].labels)
    if target not in labels:
        raise InvalidInputError(f"model does not know label {target!r}")
    logits = numkit.forward(model, X)
    col = labels.index(target)
    if score == "logit":
        return logits[:, col]
    if score == "prob":
        return numkit.softmax(logits)[:, col]
    raise InvalidInputError(f"unknown one-class score {score!r}")


def one_class_eval(model, target, data, score="auto"):
    truth = np.array([n == target for n in data.label_names()])
    if not truth.any():
        raise UndefinedMetricError(f"no {target!r} samples in evaluation set")
    return auroc(one_class_scores(model, target, data.X, score), truth)


def rejection_eval(model, in_X, ood_X):
    in_X = np.asarray(in_X, dtype=np.float64)
    ood_X = np.asarray(ood_X, dtype=np.float64)
    if len(in_X) == 0 or len(ood_X) == 0:
        raise UndefinedMetricError("both in-distribution and OOD sets must be nonempty")
    scores = np.concatenate([detector_scores(model, in_X), detector_scores(model, ood_X)])
    truth = np.r_[np.ones(len(in_X), bool), np.zeros(len(ood_X), bool)]
    return auroc(scores, truth)


def write_scores(path, ids, scores, flags, comments=()):
    """Score dump: ``sample_id,score,in_distribution`` per line (flag is 1/0)."""
    lines = [f"# {c}" for c in comments]
    lines.append("sample_id,score,in_distribution")
    for sid, sc, fl in zip(ids, scores, flags):
        lines.append(f"{sid},{float(sc)!r},{int(bool(fl))}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scores(path):
    ids, scores, flags = [], [], []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln or ln.startswith("#") or ln.startswith("sample_id,"):
                continue
            sid, sc, fl = ln.split(",")
            ids.append(sid)
            scores.append(float(sc))
            flags.append(fl == "1")
    return ids, np.array(scores), np.array(flags, dtype=bool)
