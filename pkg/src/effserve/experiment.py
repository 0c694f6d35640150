"""Config-driven experiment steps behind the command line.

An experiment config is one JSON object. Every key is optional; anything
missing takes the value in :data:`DEFAULTS`. ``paths`` locate the artifacts
and are left out of the config hash, so moving an experiment directory does
not change its outputs.

Each ``cmd_*`` function writes its artifacts and returns a small summary
dict. Inputs that are missing or malformed raise :class:`ConfigError`;
anything that goes wrong while running raises something else.
"""

from __future__ import annotations

import copy
import json
import math
import os

import numpy as np

from . import classifiers as cl
from . import numkit, oodkit
from . import synthdomain as sd
from .errors import InvalidInputError
from .pipeline import ScalingPolicy, SimConfig, Topology, run
from .pipeline.compare import compare_topologies
from .pipeline.sim import write_manifest, write_tables

DEFAULTS = {
    "seed": 0,
    "paths": {"data": "out/data", "models": "out/models", "reports": "out/reports"},
    "domain": {"d": 16, "spread": 8.0, "scale": 1.0, "ood_height": 3.0},
    # a full generator description; when set it replaces "domain"
    "generator": None,
    "train": {
        "batch_size": 16, "base_lr": 2e-3, "min_lr": 0.0, "weight_decay": 5e-4,
        "epochs": 30, "hidden": 256, "activation": "tanh",
    },
    "tasks": [
        {"name": "dirt", "positive": "Dirt", "negative": "Normal"},
        {"name": "defect", "positive": "Defect", "negative": "Normal"},
    ],
    "multitask_binary": ["Dirt", "Defect", "BubbleWash"],
    "scaling": {
        "target_backlog_per_replica": 10, "min_replicas": 1, "max_replicas": 20,
        "cooldown": 10, "poll_interval": 1,
    },
    "sim": {
        "service_time": 1, "visibility_timeout": 30, "max_deliveries": 3,
        "crash_rate": 0.0, "max_ticks": 100000,
    },
    "topology": "efficiency-centric",
    "n": 2,
    # fraction of training samples the detector threshold lets through
    "keep_rate": 0.95,
    # compare runs with the detector gates open unless this is set
    "gate_compare": False,
    "trigger": 0,
    "live": False,
    "figures": True,
}

MODES = ("unified", "multitask", "task", "all")
SUITES = ("task", "ood", "calibration", "all")


class ConfigError(InvalidInputError):
    pass


# config ------------------------------------------------------------------

def _merge(base, raw, where=""):
    out = copy.deepcopy(base)
    for key, value in raw.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text):
    """``a.b=value`` -> (["a", "b"], value); the value is JSON when it parses."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_override(cfg, keys, value):
    node = cfg
    for i, k in enumerate(keys):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys[:i + 1])!r}")
        if i == len(keys) - 1:
            node[k] = value
        else:
            node = node[k]
    return cfg


def load_config(path=None, overrides=()):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, raw)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    try:
        generator_config(cfg)
        train_config(cfg)
        scaling_policy(cfg)
        sim_config(cfg)
        tasks(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["topology"] not in ("efficiency-centric", "task-centric"):
        raise ConfigError(f"topology must be efficiency-centric or task-centric, got {cfg['topology']!r}")
    if not isinstance(cfg["n"], int) or cfg["n"] < 1:
        raise ConfigError("n must be a positive integer")
    if not 0 < cfg["keep_rate"] <= 1:
        raise ConfigError("keep_rate must be in (0, 1]")
    if cfg["train"]["activation"] not in ("tanh", "relu"):
        raise ConfigError("train.activation must be tanh or relu")


def config_hash(cfg):
    return sd.config_hash({k: v for k, v in cfg.items() if k != "paths"})


def stamp(cfg):
    """Comment lines every artifact carries."""
    return [f"config_sha256={config_hash(cfg)}", f"seed={cfg['seed']}"]


def generator_config(cfg):
    if cfg["generator"] is not None:
        raw = dict(cfg["generator"])
        raw.setdefault("seed", cfg["seed"])
        return sd.GeneratorConfig.from_dict(raw)
    gen = sd.default_config(seed=cfg["seed"], **cfg["domain"])
    gen.validate()
    return gen


def train_config(cfg):
    t = cfg["train"]
    return numkit.TrainConfig(t["batch_size"], t["base_lr"], t["min_lr"], t["weight_decay"],
                              t["epochs"], cfg["seed"])


def scaling_policy(cfg):
    return ScalingPolicy(**cfg["scaling"])


def sim_config(cfg):
    return SimConfig(seed=cfg["seed"], **cfg["sim"])


def tasks(cfg):
    return [cl.TaskSpec(t["name"], t["positive"], t["negative"]) for t in cfg["tasks"]]


# artifact helpers ----------------------------------------------------------

def _path(cfg, kind, *parts):
    return os.path.join(cfg["paths"][kind], *parts)


def _need(path, what):
    if not os.path.exists(path):
        raise ConfigError(f"missing {what}: {path}")
    return path


def _write_text(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else (f"{v:.4f}" if isinstance(v, float) else str(v))


def _text_table(header, rows):
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]


def _csv(path, cfg, header, rows, extra=()):
    lines = [f"# {c}" for c in stamp(cfg)] + [f"# {c}" for c in extra]
    lines.append(",".join(header))
    lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in r) for r in rows]
    return _write_text(path, lines)


def _report(path, cfg, title, header, rows, notes=()):
    lines = [title, *(f"# {c}" for c in stamp(cfg)), ""] + _text_table(header, rows)
    if notes:
        lines += [""] + list(notes)
    return _write_text(path, lines)


def load_domain(cfg):
    _need(_path(cfg, "data", "manifest.json"), "dataset (run synth first)")
    domain, manifest = sd.read_domain(cfg["paths"]["data"])
    return domain, manifest


def model_path(cfg, name):
    return _path(cfg, "models", f"{name}.ckpt")


def load_model(cfg, name):
    return numkit.load_checkpoint(_need(model_path(cfg, name), f"checkpoint {name!r} (run train first)"))


def task_model_name(task):
    return f"task-{task.name}"


# commands ------------------------------------------------------------------

def cmd_synth(cfg):
    gen = generator_config(cfg)
    domain = sd.generate(gen)
    manifest = sd.write_domain(cfg["paths"]["data"], gen, domain, stamp(cfg),
                               extra={"experiment_sha256": config_hash(cfg)})
    return {"seed": manifest["seed"], "counts": manifest["counts"], "files": manifest["files"]}


def _train_one(cfg, name, fit):
    t = cfg["train"]
    history = numkit.TrainHistory()
    model = fit(train_config(cfg), t["hidden"], t["activation"], history)
    os.makedirs(cfg["paths"]["models"], exist_ok=True)
    numkit.save_checkpoint(model, model_path(cfg, name), stamp(cfg))
    _csv(_path(cfg, "models", f"{name}.loss.csv"), cfg, ["epoch", "loss"],
         [(i + 1, v) for i, v in enumerate(history.epoch_loss)])
    _csv(_path(cfg, "models", f"{name}.lr.csv"), cfg, ["step", "lr"],
         [(i, v) for i, v in enumerate(history.lr_trace)])
    if cfg["figures"] and history.epoch_loss:
        from .plotting import loss_figure

        loss_figure(history, _path(cfg, "models", f"{name}.loss.png"), " ".join(stamp(cfg)))
    return {"checkpoint": model_path(cfg, name), "epoch_loss": history.epoch_loss,
            "first_lr": history.lr_trace[0] if history.lr_trace else None,
            "last_lr": history.lr_trace[-1] if history.lr_trace else None}


def cmd_train(cfg, mode, task=None):
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    domain, _ = load_domain(cfg)
    data = domain.train
    out = {}
    if mode in ("unified", "all"):
        out["unified"] = _train_one(
            cfg, "unified", lambda tc, h, a, hist: cl.train_unified(data, tc, h, a, hist))
    if mode in ("multitask", "all"):
        try:
            spec = cl.default_multitask_heads(data.scheme, cfg["multitask_binary"])
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None
        out["multitask"] = _train_one(
            cfg, "multitask", lambda tc, h, a, hist: cl.train_multitask(data, spec, tc, h, a, hist))
    if mode in ("task", "all"):
        chosen = tasks(cfg)
        if task is not None:
            chosen = [t for t in chosen if t.name == task]
            if not chosen:
                raise ConfigError(f"no task named {task!r} in config")
        for t in chosen:
            try:
                t.check(data.scheme)
            except InvalidInputError as exc:
                raise ConfigError(str(exc)) from None
            out[task_model_name(t)] = _train_one(
                cfg, task_model_name(t),
                lambda tc, h, a, hist, t=t: cl.train_task(data, t, tc, h, a, hist))
    return out


def _task_rows(cfg, models, suites):
    rows = []
    for suite_name, data in suites:
        for t in tasks(cfg):
            sub = data.with_labels([t.negative_label, t.positive_label])
            if len(sub) == 0:
                continue
            for method, model in (("efficiency-centric", models["unified"]),
                                  ("multi-task", models["multitask"]),
                                  ("task-centric", models[task_model_name(t)])):
                acc, f1 = cl.task_accuracy(model, t, sub)
                rows.append([suite_name, t.name, method, acc, f1, len(sub)])
    return rows


def _eval_task(cfg, domain, models):
    suites = [("test", domain.test)] + ([("shifted", domain.shifted)] if domain.shifted is not None else [])
    rows = _task_rows(cfg, models, suites)
    header = ["suite", "task", "method", "accuracy", "f1", "n"]
    out = _path(cfg, "reports", "eval_task")
    _csv(out + ".csv", cfg, header, rows)
    _report(out + ".txt", cfg, "Binary task accuracy and F1", header, rows)
    return {"rows": rows}


def _eval_ood(cfg, domain, models):
    uni, mt = models["unified"], models["multitask"]
    rows, curves = [], {}
    for t in tasks(cfg):
        for det, model in (("max-logit", uni), ("kl-uniform", mt)):
            roc = oodkit.one_class_eval(model, t.positive_label, domain.test)
            rows.append(["one-class", t.positive_label, det, roc.auroc])
            curves.setdefault(f"one-class {t.positive_label}", {})[det] = roc
    for group, samples in sorted(domain.ood_groups().items()):
        X = np.array([s.features for s in samples])
        for det, model in (("max-logit", uni), ("kl-uniform", mt)):
            roc = oodkit.rejection_eval(model, domain.test.X, X)
            rows.append(["rejection", group, det, roc.auroc])
            curves.setdefault(f"rejection {group}", {})[det] = roc
            ids = list(domain.test.ids) + [s.id for s in samples]
            scores = np.concatenate([oodkit.detector_scores(model, domain.test.X),
                                     oodkit.detector_scores(model, X)])
            flags = [True] * len(domain.test) + [False] * len(samples)
            oodkit.write_scores(_path(cfg, "reports", f"scores_{det}_{group}.csv"),
                                ids, scores, flags, stamp(cfg))
    header = ["kind", "target", "detector", "auroc"]
    out = _path(cfg, "reports", "eval_ood")
    _csv(out + ".csv", cfg, header, rows)
    _report(out + ".txt", cfg, "Detector AUROC", header, rows)
    if cfg["figures"]:
        from .plotting import roc_figure

        for title, group in curves.items():
            fname = "roc_" + title.replace(" ", "_") + ".png"
            roc_figure(group, _path(cfg, "reports", fname), title, " ".join(stamp(cfg)))
    return {"rows": rows}


def calibration_histogram(model, samples, n=2):
    """Counts of each ordered top-``n`` label tuple over ``samples``, plus the
    share whose top-``n`` holds every true label."""
    counts, covered = {}, 0
    for s in samples:
        top = tuple(lbl for lbl, _ in cl.predict_topn(model, s.features, n))
        counts[top] = counts.get(top, 0) + 1
        covered += set(s.true_labels) <= set(top)
    rows = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rate = covered / len(samples) if samples else float("nan")
    return [("|".join(k), c) for k, c in rows], rate


def _eval_calibration(cfg, domain, models):
    n = cfg["n"]
    rows, rate = calibration_histogram(models["unified"], domain.multilabel, n)
    header = [f"top{n}", "count"]
    out = _path(cfg, "reports", "eval_calibration")
    note = f"covered={rate!r}"
    _csv(out + ".csv", cfg, header, rows, extra=[note, f"total={len(domain.multilabel)}"])
    _report(out + ".txt", cfg, f"Top-{n} predictions on multi-label samples", header, rows,
            [f"top-{n} holds every true label: {rate:.4f} of {len(domain.multilabel)}"])
    if cfg["figures"]:
        from .plotting import calibration_figure

        calibration_figure(rows, out + ".png", " ".join(stamp(cfg)))
    return {"rows": rows, "covered": rate, "total": len(domain.multilabel)}


def cmd_eval(cfg, suite):
    if suite not in SUITES:
        raise ConfigError(f"unknown evaluation suite {suite!r}")
    domain, _ = load_domain(cfg)
    need = ["unified"]
    if suite in ("task", "ood", "all"):
        need.append("multitask")
    if suite in ("task", "all"):
        need += [task_model_name(t) for t in tasks(cfg)]
    models = {name: load_model(cfg, name) for name in need}
    os.makedirs(cfg["paths"]["reports"], exist_ok=True)
    out = {}
    if suite in ("task", "all"):
        out["task"] = _eval_task(cfg, domain, models)
    if suite in ("ood", "all"):
        out["ood"] = _eval_ood(cfg, domain, models)
    if suite in ("calibration", "all"):
        out["calibration"] = _eval_calibration(cfg, domain, models)
    return out


def _threshold(cfg, model, X):
    return oodkit.select_threshold(oodkit.detector_scores(model, X), cfg["keep_rate"])


def inference_set(domain):
    """Everything the deployed system would see: test, multi-label and OOD samples."""
    items = list(zip(domain.test.ids, domain.test.X))
    items += [(s.id, s.features) for s in domain.multilabel]
    items += [(s.id, s.features) for s in domain.ood]
    return items


def build_topology(cfg, domain):
    if cfg["topology"] == "efficiency-centric":
        model = load_model(cfg, "unified")
        return Topology.efficiency_centric(model, _threshold(cfg, model, domain.train.X), cfg["n"])
    entries = []
    for t in tasks(cfg):
        model = load_model(cfg, task_model_name(t))
        tau = _threshold(cfg, model, cl.task_dataset(domain.train, t).X)
        entries.append((t, model, tau))
    return Topology.task_centric(entries)


def cmd_simulate(cfg, live=None):
    """Run the configured topology over the inference set; returns the summary.

    ``ok`` in the result is True iff every message was processed.
    """
    domain, _ = load_domain(cfg)
    topology = build_topology(cfg, domain)
    policy, sim = scaling_policy(cfg), sim_config(cfg)
    items = inference_set(domain)
    live = cfg["live"] if live is None else live
    if live:
        from .pipeline.live import LiveRunner

        metrics, tables = LiveRunner(topology, policy).run(items)
    else:
        metrics, tables = run(topology, [(cfg["trigger"], items)], policy, sim)
    outdir = _path(cfg, "reports", "simulate")
    os.makedirs(outdir, exist_ok=True)
    metrics.write(os.path.join(outdir, "metrics.csv"), stamp(cfg))
    write_tables(tables, outdir, stamp(cfg))
    write_manifest(os.path.join(outdir, "manifest.json"), topology, policy, sim,
                   {"config_sha256": config_hash(cfg), "seed": cfg["seed"], "live": bool(live),
                    "trigger": cfg["trigger"], "samples": len(items)})
    if cfg["figures"]:
        from .plotting import trace_figure

        trace_figure(metrics, os.path.join(outdir, "trace.png"), " ".join(stamp(cfg)))
    summary = metrics.summary()
    summary["ok"] = metrics.failed == 0 and metrics.processed == metrics.messages
    return summary


def cmd_compare(cfg):
    domain, _ = load_domain(cfg)
    ts = tasks(cfg)
    unified = load_model(cfg, "unified")
    task_models = [load_model(cfg, task_model_name(t)) for t in ts]
    labels = sorted({lbl for t in ts for lbl in (t.positive_label, t.negative_label)})
    shared = domain.test.with_labels(labels)
    items = list(zip(shared.ids, shared.X))
    if cfg["gate_compare"]:
        tau = _threshold(cfg, unified, domain.train.X)
        taus = [_threshold(cfg, m, cl.task_dataset(domain.train, t).X) for t, m in zip(ts, task_models)]
    else:
        tau, taus = float("-inf"), [float("-inf")] * len(ts)
    ood = {g: np.array([s.features for s in v]) for g, v in domain.ood_groups().items()}
    report, (m_eff, t_eff), (m_tc, t_tc) = compare_topologies(
        items, ts, cfg["n"], unified, task_models, scaling_policy(cfg), sim_config(cfg),
        tau=tau, task_taus=taus,
        multilabel=domain.multilabel, eval_data=shared, ood_groups=ood)
    report["config_sha256"] = config_hash(cfg)
    report["seed"] = cfg["seed"]
    outdir = _path(cfg, "reports", "compare")
    for kind, m, tables in (("efficiency", m_eff, t_eff), ("task", m_tc, t_tc)):
        sub = os.path.join(outdir, kind)
        os.makedirs(sub, exist_ok=True)
        m.write(os.path.join(sub, "metrics.csv"), stamp(cfg))
        write_tables(tables, sub, stamp(cfg))
    _write_json(os.path.join(outdir, "compare.json"), report)
    rows = [
        ["model invocations", report["efficiency"]["total_inferences"] + report["efficiency"]["rejected"],
         report["task"]["total_inferences"] + report["task"]["rejected"]],
        ["classifier inferences", report["efficiency"]["total_inferences"], report["task"]["total_inferences"]],
        ["duplicate inferences", report["efficiency"]["duplicate_inferences"], report["task"]["duplicate_inferences"]],
        ["result tables", report["efficiency"]["tables"], report["task"]["tables"]],
        ["top-2 co-prediction", report["co_prediction"]["efficiency"], report["co_prediction"]["task"]],
    ]
    for r in report["task_metrics"]:
        rows.append([f"{r['task']} accuracy", r["efficiency_accuracy"], r["task_accuracy"]])
        rows.append([f"{r['task']} f1", r["efficiency_f1"], r["task_f1"]])
    for group, vals in sorted(report["rejection_auroc"].items()):
        task_vals = [vals[f"task:{t.name}"] for t in ts]
        rows.append([f"rejection auroc {group}", vals["efficiency"],
                     " / ".join(f"{v:.4f}" for v in task_vals)])
    _report(os.path.join(outdir, "compare.txt"), cfg, "Efficiency-centric vs task-centric",
            ["measure", "efficiency-centric", "task-centric"], rows,
            [f"shared samples: {report['shared_samples']}; closed-form duplicates (K-1)*S = "
             f"{report['duplicates_closed_form']}"])
    report["ok"] = (m_eff.failed == 0 and m_tc.failed == 0
                    and m_eff.processed == m_eff.messages and m_tc.processed == m_tc.messages)
    return report


__all__ = [
    "DEFAULTS", "ConfigError", "apply_override", "build_topology",
    "calibration_histogram", "cmd_compare", "cmd_eval", "cmd_simulate", "cmd_synth",
    "cmd_train", "config_hash", "generator_config", "inference_set", "load_config",
    "parse_override", "scaling_policy", "sim_config", "stamp", "tasks", "train_config",
]
