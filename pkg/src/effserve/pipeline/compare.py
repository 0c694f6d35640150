"""Run both topologies on the same inference set and put the numbers side by side."""

from __future__ import annotations

from ..classifiers import task_accuracy
from ..oodkit import rejection_eval
from .consumer import Topology
from .records import PREDICTED
from .sim import SimConfig, run


def co_prediction_rate(tables, samples):
    """Share of multi-label samples whose predicted labels cover all true labels.

    Predicted labels are pooled over every table, so for a task-centric run a
    sample counts only if each task's table names its label.
    """
    if not samples:
        return float("nan")
    hits = 0
    for s in samples:
        predicted = set()
        for table in tables:
            for rec in table.query(s.id):
                if rec.verdict == PREDICTED:
                    predicted.update(rec.labels())
        hits += set(s.true_labels) <= predicted
    return hits / len(samples)


def compare_topologies(items, tasks, n, unified, task_models, policy, sim=SimConfig(),
                       tau=float("-inf"), task_taus=None, multilabel=(), eval_data=None,
                       ood_groups=None, route=None):
    """Both topologies over ``items`` (``(sample_id, features)`` pairs) plus
    ``multilabel`` samples, published in one batch at tick 0.

    ``task_models`` and ``task_taus`` align with ``tasks``. With ``eval_data``
    the report adds per-task accuracy/F1 for both sides; with ``ood_groups``
    ({name: feature matrix}) it adds rejection AUROCs against ``eval_data``.
    """
    task_taus = list(task_taus) if task_taus is not None else [float("-inf")] * len(tasks)
    batch = list(items) + [(s.id, s.features) for s in multilabel]
    eff = Topology.efficiency_centric(unified, tau, n)
    tc = Topology.task_centric(zip(tasks, task_models, task_taus), route)
    m_eff, t_eff = run(eff, [(0, batch)], policy, sim)
    m_tc, t_tc = run(tc, [(0, batch)], policy, sim)

    distinct = len(batch)
    shared = sum(1 for sid, _ in batch if route is None or len(route(sid)) >= 2)
    report = {
        "n": n,
        "tasks": [t.name for t in tasks],
        "samples": distinct,
        "shared_samples": shared,
        "efficiency": dict(m_eff.summary(), tables=len(t_eff)),
        "task": dict(m_tc.summary(), tables=len(t_tc)),
        "duplicates_expected": m_tc.messages - distinct,
        "duplicates_closed_form": (len(tasks) - 1) * shared if route is None else None,
        "co_prediction": {
            "efficiency": co_prediction_rate(list(t_eff.values()), list(multilabel)),
            "task": co_prediction_rate(list(t_tc.values()), list(multilabel)),
        },
    }
    if eval_data is not None:
        rows = []
        for task, model in zip(tasks, task_models):
            sub = eval_data.with_labels([task.negative_label, task.positive_label])
            ea, ef = task_accuracy(unified, task, sub)
            ta, tf = task_accuracy(model, task, sub)
            rows.append({"task": task.name, "efficiency_accuracy": ea, "efficiency_f1": ef,
                         "task_accuracy": ta, "task_f1": tf})
        report["task_metrics"] = rows
        if ood_groups:
            aur = {}
            for name, X in sorted(ood_groups.items()):
                aur[name] = {"efficiency": rejection_eval(unified, eval_data.X, X).auroc}
                for task, model in zip(tasks, task_models):
                    aur[name][f"task:{task.name}"] = rejection_eval(model, eval_data.X, X).auroc
            report["rejection_auroc"] = aur
    return report, (m_eff, t_eff), (m_tc, t_tc)
