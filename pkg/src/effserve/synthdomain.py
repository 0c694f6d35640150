"""Seeded Gaussian-cluster stand-in for a multi-label image domain.

Draw order is fixed so a config always yields the same bytes: every
in-domain cluster in config order (``samples_per_label`` rows of ``d``
normals each), then multi-label pairs in order, then OOD clusters in order,
then one stratified shuffle per label for the train/test split.  All draws
come from :class:`effserve.rng.XorShift64Star`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import LabeledDataset, LabelScheme
from .errors import InvalidInputError
from .rng import XorShift64Star, derive_seed

DEFAULT_LABELS = (
    "Normal", "Dirt", "Defect", "BubbleWash", "CarWashMachine",
    "Dashboard", "CupHolder", "Glovebox", "WasherLiquid", "Seats",
)
DEFAULT_OOD = ("Receipts", "Documents")


@dataclass(frozen=True)
class ClusterSpec:
    label: str
    mean: tuple
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        if not all(math.isfinite(v) for v in self.mean):
            raise InvalidInputError(f"{self.label}: non-finite mean")
        if not self.scale > 0:
            raise InvalidInputError(f"{self.label}: scale must be positive")


@dataclass(frozen=True)
class SyntheticSample:
    id: str
    features: np.ndarray
    true_labels: tuple = ()
    is_ood: bool = False
    source: str = ""

    def __post_init__(self):
        if self.is_ood and self.true_labels:
            raise InvalidInputError("OOD samples carry no labels")


@dataclass
class GeneratorConfig:
    d: int = 16
    clusters: list = field(default_factory=list)
    samples_per_label: int = 250
    test_fraction: float = 0.2
    shared_label: str = "Normal"
    # (label_a, label_b, count)
    multilabel: list = field(default_factory=list)
    # (ClusterSpec, count)
    ood: list = field(default_factory=list)
    # (offset vector, noise multiplier) or None
    shift: tuple = None
    seed: int = 0

    def validate(self):
        names = [c.label for c in self.clusters]
        if len(set(names)) != len(names) or not names:
            raise InvalidInputError("cluster labels must be unique and nonempty")
        for c in self.clusters + [spec for spec, _ in self.ood]:
            if len(c.mean) != self.d:
                raise InvalidInputError(f"{c.label}: mean has {len(c.mean)} dims, want {self.d}")
        for a, b, count in self.multilabel:
            for name in (a, b):
                if name not in names:
                    raise InvalidInputError(f"unknown label {name!r} in multi-label pair")
            if count < 0:
                raise InvalidInputError("counts must be nonnegative")
        if self.samples_per_label < 0 or any(n < 0 for _, n in self.ood):
            raise InvalidInputError("counts must be nonnegative")
        if not 0 <= self.test_fraction < 1:
            raise InvalidInputError("test_fraction must be in [0, 1)")
        if self.shared_label not in names:
            raise InvalidInputError(f"shared label {self.shared_label!r} is not a cluster")
        if self.shift is not None and len(self.shift[0]) != self.d:
            raise InvalidInputError("shift offset dimension mismatch")

    def scheme(self):
        return LabelScheme(tuple(c.label for c in self.clusters), self.shared_label)

    def to_dict(self):
        return {
            "d": self.d,
            "clusters": [asdict(c) | {"mean": list(c.mean)} for c in self.clusters],
            "samples_per_label": self.samples_per_label,
            "test_fraction": self.test_fraction,
            "shared_label": self.shared_label,
            "multilabel": [list(p) for p in self.multilabel],
            "ood": [asdict(c) | {"mean": list(c.mean), "count": n} for c, n in self.ood],
            "shift": None if self.shift is None else {
                "offset": list(map(float, self.shift[0])), "noise": float(self.shift[1])},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = {"d", "clusters", "samples_per_label", "test_fraction", "shared_label",
                 "multilabel", "ood", "shift", "seed"}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InvalidInputError(f"unknown generator key(s): {', '.join(unknown)}")
        # missing keys come from the default layout, unless the clusters are
        # spelled out, in which case there are no extras unless asked for
        if "clusters" in raw:
            first = raw["clusters"][0]["label"] if raw["clusters"] else ""
            base = cls(d=raw.get("d", 16), shared_label=first)
        else:
            base = default_config(seed=raw.get("seed", 0), d=raw.get("d", 16))
        cfg = cls(
            d=raw.get("d", base.d),
            clusters=[_cluster(c) for c in raw["clusters"]] if "clusters" in raw else base.clusters,
            samples_per_label=raw.get("samples_per_label", base.samples_per_label),
            test_fraction=raw.get("test_fraction", base.test_fraction),
            shared_label=raw.get("shared_label", base.shared_label),
            multilabel=[tuple(p) for p in raw["multilabel"]] if "multilabel" in raw else base.multilabel,
            ood=[(_cluster(c), int(c["count"])) for c in raw["ood"]] if "ood" in raw else base.ood,
            seed=raw.get("seed", base.seed),
        )
        if "shift" in raw:
            s = raw["shift"]
            cfg.shift = None if s is None else (tuple(s["offset"]), float(s["noise"]))
        else:
            cfg.shift = base.shift
        cfg.validate()
        return cfg


def _cluster(raw):
    unknown = set(raw) - {"label", "mean", "scale", "count"}
    if unknown:
        raise InvalidInputError(f"unknown cluster key(s): {', '.join(sorted(unknown))}")
    return ClusterSpec(raw["label"], tuple(raw["mean"]), float(raw.get("scale", 1.0)))


def default_config(seed=0, d=16, spread=8.0, scale=1.0, ood_height=3.0):
    """Ten axis-aligned clusters at ``spread`` from the origin plus two OOD clusters.

    Cluster k sits at ``spread * e_k``; the OOD clusters sit ``ood_height`` up
    two otherwise unused axes, which puts them ``sqrt(spread**2 + ood_height**2)``
    from every in-domain mean (8.5 sigma with the defaults).
    """
    n_labels = len(DEFAULT_LABELS)
    if d < n_labels + len(DEFAULT_OOD):
        raise InvalidInputError(f"default layout needs d >= {n_labels + len(DEFAULT_OOD)}")
    clusters = []
    for k, name in enumerate(DEFAULT_LABELS):
        mean = np.zeros(d)
        mean[k] = spread * scale
        clusters.append(ClusterSpec(name, tuple(mean), scale))
    ood = []
    for j, name in enumerate(DEFAULT_OOD):
        mean = np.zeros(d)
        mean[n_labels + j] = ood_height * scale
        ood.append((ClusterSpec(name, tuple(mean), scale), 100))
    offset = np.full(d, 1.0 * scale)
    return GeneratorConfig(
        d=d,
        clusters=clusters,
        samples_per_label=250,
        test_fraction=0.2,
        shared_label="Normal",
        multilabel=[("Dirt", "Defect", 100)],
        ood=ood,
        shift=(tuple(offset), 0.5),
        seed=seed,
    )


@dataclass
class Domain:
    train: LabeledDataset
    test: LabeledDataset
    multilabel: list
    ood: list
    shifted: LabeledDataset = None

    def ood_groups(self):
        groups = {}
        for s in self.ood:
            groups.setdefault(s.source, []).append(s)
        return groups


def _draw(rng, mean, scale, n):
    return np.asarray(mean) + scale * rng.normals((n, len(mean)))


def generate(cfg):
    cfg.validate()
    rng = XorShift64Star(derive_seed(cfg.seed, "generate"))
    scheme = cfg.scheme()
    per_label = []
    for c in cfg.clusters:
        per_label.append(_draw(rng, c.mean, c.scale, cfg.samples_per_label))
    means = {c.label: np.asarray(c.mean) for c in cfg.clusters}
    scales = {c.label: c.scale for c in cfg.clusters}
    multilabel = []
    for a, b, count in cfg.multilabel:
        mid = 0.5 * (means[a] + means[b])
        sc = 0.5 * (scales[a] + scales[b])
        feats = _draw(rng, mid, sc, count)
        for i, x in enumerate(feats):
            multilabel.append(SyntheticSample(f"ml-{a}+{b}-{i:04d}", x, (a, b)))
    ood = []
    for spec, count in cfg.ood:
        feats = _draw(rng, spec.mean, spec.scale, count)
        for i, x in enumerate(feats):
            ood.append(SyntheticSample(f"ood-{spec.label}-{i:04d}", x, (), True, spec.label))

    n_test = int(round(cfg.samples_per_label * cfg.test_fraction))
    train_parts, test_parts = [], []
    for k, (c, feats) in enumerate(zip(cfg.clusters, per_label)):
        split_rng = XorShift64Star(derive_seed(cfg.seed, "split", c.label))
        order = split_rng.permutation(len(feats))
        ids = [f"{c.label}-{i:04d}" for i in range(len(feats))]
        test_idx, train_idx = sorted(order[:n_test]), sorted(order[n_test:])
        train_parts.append((feats[train_idx], [k] * len(train_idx), [ids[i] for i in train_idx]))
        test_parts.append((feats[test_idx], [k] * len(test_idx), [ids[i] for i in test_idx]))

    def assemble(parts):
        X = np.concatenate([p[0] for p in parts]).reshape(-1, cfg.d)
        y = sum((p[1] for p in parts), [])
        ids = sum((p[2] for p in parts), [])
        return LabeledDataset(X, y, scheme, ids)

    train, test = assemble(train_parts), assemble(test_parts)
    shifted = None
    if cfg.shift is not None:
        shifted = apply_shift(test, cfg.shift[0], cfg.shift[1],
                              seed=derive_seed(cfg.seed, "shift"), scale=_mean_scale(cfg))
    return Domain(train, test, multilabel, ood, shifted)


def _mean_scale(cfg):
    return float(np.mean([c.scale for c in cfg.clusters]))


def apply_shift(data, offset, noise_multiplier, seed=0, scale=1.0):
    """Translate every sample by ``offset`` and add N(0, (noise_multiplier*scale)^2 I)."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (data.d,):
        raise InvalidInputError(f"offset has shape {offset.shape}, want ({data.d},)")
    X = data.X + offset
    if noise_multiplier:
        rng = XorShift64Star(derive_seed(seed, "shift-noise"))
        X = X + noise_multiplier * scale * rng.normals(X.shape)
    return LabeledDataset(X, data.y.copy(), data.scheme, [f"{i}~shift" for i in data.ids])


def nearest_mean_predict(cfg, X):
    """Index of the closest cluster mean for each row; the reference classifier."""
    means = np.array([c.mean for c in cfg.clusters])
    d2 = ((np.asarray(X)[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


# sample files ---------------------------------------------------------------

def write_samples(path, samples, comments=()):
    """``id,f0,...,f(d-1),labels`` with labels joined by ``|`` (OOD rows: ``!<source>``)."""
    lines = [f"# {c}" for c in comments]
    for s in samples:
        tag = f"!{s.source}" if s.is_ood else "|".join(s.true_labels)
        lines.append(",".join([s.id, *(repr(float(v)) for v in s.features), tag]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_samples(path):
    out = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.rstrip("\n")
            if not ln or ln.startswith("#"):
                continue
            fields = ln.split(",")
            feats = np.array([float(v) for v in fields[1:-1]])
            tag = fields[-1]
            if tag.startswith("!"):
                out.append(SyntheticSample(fields[0], feats, (), True, tag[1:]))
            else:
                out.append(SyntheticSample(fields[0], feats, tuple(tag.split("|"))))
    return out


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_domain(outdir, cfg, domain, comments=(), extra=None):
    """Write train/test/shifted datasets, multi-label and OOD sample files, and a manifest.

    ``extra`` keys are merged into the manifest.
    """
    import os

    from .classifiers import write_dataset

    os.makedirs(outdir, exist_ok=True)
    files = {
        "train": "train.csv", "test": "test.csv",
        "multilabel": "multilabel.csv", "ood": "ood.csv",
    }
    write_dataset(os.path.join(outdir, files["train"]), domain.train, comments)
    write_dataset(os.path.join(outdir, files["test"]), domain.test, comments)
    write_samples(os.path.join(outdir, files["multilabel"]), domain.multilabel, comments)
    write_samples(os.path.join(outdir, files["ood"]), domain.ood, comments)
    if domain.shifted is not None:
        files["shifted"] = "shifted.csv"
        write_dataset(os.path.join(outdir, files["shifted"]), domain.shifted, comments)
    digests = {}
    for key, name in sorted(files.items()):
        with open(os.path.join(outdir, name), "rb") as fh:
            digests[name] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": config_hash(cfg.to_dict()),
        "files": files,
        "sha256": digests,
        "counts": {
            "train": domain.train.counts(),
            "test": domain.test.counts(),
            "multilabel": len(domain.multilabel),
            "ood": {k: len(v) for k, v in domain.ood_groups().items()},
        },
    }
    manifest.update(extra or {})
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_domain(outdir):
    import os

    from .classifiers import read_dataset

    with open(os.path.join(outdir, "manifest.json")) as fh:
        manifest = json.load(fh)
    files = manifest["files"]
    domain = Domain(
        read_dataset(os.path.join(outdir, files["train"])),
        read_dataset(os.path.join(outdir, files["test"])),
        read_samples(os.path.join(outdir, files["multilabel"])),
        read_samples(os.path.join(outdir, files["ood"])),
        read_dataset(os.path.join(outdir, files["shifted"])) if "shifted" in files else None,
    )
    return domain, manifest
