"""Synthetic multi-domain benchmark generator.

Each domain is an affine view (random rotation, per-axis scaling,
translation) of shared Gaussian class clusters. Source domains carry
overlapping subsets of the known classes; the target domain is shifted
harder and also contains open classes drawn from held-out cluster means.
A pretext set with extra auxiliary classes over several affine styles
stands in for large-scale pretraining data.

Everything is driven by named substreams of one root seed, so
regeneration is bitwise identical.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .rng import substream

ROLE_TRAIN = "train"
ROLE_VAL = "val"
ROLE_TEST = "test"
ROLE_PRETEXT = "pretext"
ROLE_FULL = "full"

# roles that must never reach probing, fine-tuning, prototype pooling or
# model selection
EVAL_ONLY_ROLES = frozenset({ROLE_TEST})


@dataclass(frozen=True)
class ClassSplit:
    """Which class ids each source carries, which are known, which are open.

    Known classes are the union of the source label sets; open classes are
    target-only and all collapse to one sentinel head label len(known).
    """

    source_label_sets: tuple[tuple[int, ...], ...]
    target_known: tuple[int, ...]
    open_class_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.source_label_sets or any(not s for s in self.source_label_sets):
            raise ValueError("every source needs a nonempty label set")
        known = self.known
        if set(self.target_known) - set(known):
            raise ValueError("target_known must be a subset of the source union")
        if set(self.open_class_ids) & set(known):
            raise ValueError("open classes must not appear in any source label set")

    @property
    def known(self) -> tuple[int, ...]:
        out: set[int] = set()
        for s in self.source_label_sets:
            out |= set(s)
        return tuple(sorted(out))

    @property
    def num_known(self) -> int:
        return len(self.known)

    @property
    def open_sentinel(self) -> int:
        return self.num_known

    def to_head_label(self, y: np.ndarray) -> np.ndarray:
        """Map raw class ids to head space: known -> 0..C-1, open -> C."""
        known = self.known
        lut = {c: i for i, c in enumerate(known)}
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        out = np.empty_like(y)
        open_set = set(self.open_class_ids)
        for i, v in enumerate(y):
            v = int(v)
            if v in lut:
                out[i] = lut[v]
            elif v in open_set:
                out[i] = self.open_sentinel
            else:
                raise ValueError(f"class id {v} is neither known nor open")
        return out


def build_class_split(preset: str | None = "pacs-like", *,
                      source_label_sets=None, target_known=None,
                      open_class_ids=None) -> ClassSplit:
    """The bundled preset mirrors a 3-source / 6-known / 1-open shape;
    pass explicit sets instead of a preset for anything else."""
    if preset is not None:
        if preset != "pacs-like":
            raise ValueError(f"unknown preset {preset!r}")
        return ClassSplit(((3, 0, 1), (4, 0, 2), (5, 1, 2)),
                          tuple(range(6)), (6,))
    return ClassSplit(tuple(tuple(s) for s in source_label_sets),
                      tuple(target_known), tuple(open_class_ids))


@dataclass
class DomainSpec:
    """Affine view of the shared clusters: x = A @ (mu_c + eps) + t."""

    domain_id: int
    A: np.ndarray
    t: np.ndarray
    noise_scale: float
    samples_per_class: int
    labels: tuple[int, ...]

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("transform must be square")
        if self.t.shape != (self.A.shape[0],):
            raise ValueError("translation width must match transform")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if np.linalg.cond(self.A) >= 1e6:
            raise ValueError("transform is singular or near-singular")


@dataclass
class DomainDataset:
    domain_id: int
    role: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ValueError("X and y length mismatch")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class SplitDomain:
    train: DomainDataset
    val: DomainDataset


@dataclass(frozen=True)
class BenchmarkConfig:
    """Knobs for the generator. Domain transforms are rotations (strength
    sets how far from the identity) plus per-axis scaling and translation.
    Sources carry the heavy style distortion while the target stays near
    the canonical class layout, so source-overfit features transfer worse
    than pretrained ones (think sketch/cartoon sources, photo target)."""

    preset: str = "pacs-like"
    input_dim: int = 16
    samples_per_class: int = 300
    noise_scale: float = 0.2
    val_fraction: float = 0.1
    scale_low: float = 0.85
    scale_high: float = 1.15
    translation_scale: float = 0.7
    rotation_strength: float = 0.4
    target_scale_low: float = 0.9
    target_scale_high: float = 1.1
    target_translation_scale: float = 0.2
    target_rotation_strength: float = 0.1
    pretext_styles: int = 4
    pretext_aux_factor: int = 3
    pretext_samples_per_class: int = 30
    min_separation_factor: float = 4.0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.input_dim < 2 or self.samples_per_class < 1:
            raise ValueError("degenerate benchmark size")
        if self.scale_low <= 0 or self.scale_high < self.scale_low:
            raise ValueError("bad scale range")


@dataclass
class BenchmarkBundle:
    sources: list[SplitDomain]
    target: DomainDataset
    pretext: DomainDataset
    class_split: ClassSplit
    class_means: np.ndarray      # [n_benchmark_classes x D], generative latents
    domain_specs: list[DomainSpec]
    pretext_specs: list[DomainSpec]
    config: BenchmarkConfig
    seed: int

    @property
    def num_head_classes(self) -> int:
        return self.class_split.num_known


# ---------------------------------------------------------------- drawing

def _random_rotation(rng: np.random.Generator, d: int,
                     strength: float) -> np.ndarray:
    """Exactly orthogonal rotation near the identity via the Cayley
    transform of a small skew-symmetric matrix; strength 0 is the
    identity, larger values rotate further."""
    m = rng.normal(size=(d, d)) / np.sqrt(d)
    s = strength * (m - m.T) / 2.0
    eye = np.eye(d)
    return np.linalg.solve(eye + s, eye - s)


def _draw_transform(rng: np.random.Generator, d: int, scale_low: float,
                    scale_high: float, translation_scale: float,
                    rotation_strength: float):
    rot = _random_rotation(rng, d, rotation_strength)
    scales = rng.uniform(scale_low, scale_high, size=d)
    t = rng.normal(size=d) * translation_scale
    return rot * scales[None, :], t


def draw_class_means(rng: np.random.Generator, n_classes: int, d: int,
                     min_separation: float, max_tries: int = 1000) -> np.ndarray:
    """Standard-normal cluster centers, redrawn until pairwise distances
    clear the floor."""
    for _ in range(max_tries):
        means = rng.normal(size=(n_classes, d))
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        dist[np.diag_indices(n_classes)] = np.inf
        if dist.min() >= min_separation:
            return means
    raise RuntimeError("could not separate class means; lower the floor")


def generate_domain(spec: DomainSpec, role: str, class_means: np.ndarray,
                    seed: int) -> DomainDataset:
    """Sample every class the domain carries through its affine view.
    Per-(domain, class) streams keep the draw independent of class order."""
    xs, ys = [], []
    for c in spec.labels:
        if c >= len(class_means):
            raise ValueError(f"no class mean for class {c}")
        rng = substream(seed, "domain", spec.domain_id, "class", c)
        eps = rng.normal(size=(spec.samples_per_class, class_means.shape[1]))
        pts = class_means[c] + spec.noise_scale * eps
        xs.append(pts @ spec.A.T + spec.t)
        ys.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return DomainDataset(spec.domain_id, role, np.concatenate(xs),
                         np.concatenate(ys))


def split_train_val(dataset: DomainDataset, fraction: float,
                    seed: int) -> SplitDomain:
    """Stratified split: each class gives round(fraction * N_c) samples to
    val, at least 1 when it has >= 2 samples. Singleton classes stay whole
    in train with a warning."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    val_mask = np.zeros(len(dataset), dtype=bool)
    for c in np.unique(dataset.y):
        idx = np.nonzero(dataset.y == c)[0]
        n = len(idx)
        if n == 1:
            warnings.warn(f"class {int(c)} has a single sample; "
                          "it contributes nothing to val")
            continue
        n_val = int(np.floor(fraction * n + 0.5))
        n_val = min(max(n_val, 1), n - 1)
        rng = substream(seed, "split", dataset.domain_id, int(c))
        chosen = rng.permutation(n)[:n_val]
        val_mask[idx[np.sort(chosen)]] = True
    tr = np.nonzero(~val_mask)[0]
    va = np.nonzero(val_mask)[0]
    return SplitDomain(
        DomainDataset(dataset.domain_id, ROLE_TRAIN, dataset.X[tr], dataset.y[tr]),
        DomainDataset(dataset.domain_id, ROLE_VAL, dataset.X[va], dataset.y[va]))


def generate_benchmark(config: BenchmarkConfig, seed: int) -> BenchmarkBundle:
    split = build_class_split(config.preset)
    known = split.known
    benchmark_ids = sorted(set(known) | set(split.open_class_ids))
    n_benchmark = max(benchmark_ids) + 1
    n_aux = config.pretext_aux_factor * n_benchmark
    d = config.input_dim

    # one mean table covers benchmark classes and the pretext-only extras
    all_means = draw_class_means(
        substream(seed, "means"), n_benchmark + n_aux, d,
        config.min_separation_factor * config.noise_scale)
    class_means = all_means[:n_benchmark]

    domain_specs: list[DomainSpec] = []
    sources: list[SplitDomain] = []
    for i, labels in enumerate(split.source_label_sets):
        a, t = _draw_transform(substream(seed, "transform", "source", i), d,
                               config.scale_low, config.scale_high,
                               config.translation_scale,
                               config.rotation_strength)
        spec = DomainSpec(i, a, t, config.noise_scale,
                          config.samples_per_class, tuple(labels))
        domain_specs.append(spec)
        full = generate_domain(spec, ROLE_FULL, class_means, seed)
        sources.append(split_train_val(full, config.val_fraction, seed))

    target_labels = tuple(sorted(set(split.target_known) | set(split.open_class_ids)))
    a, t = _draw_transform(substream(seed, "transform", "target"), d,
                           config.target_scale_low, config.target_scale_high,
                           config.target_translation_scale,
                           config.target_rotation_strength)
    target_spec = DomainSpec(len(split.source_label_sets), a, t,
                             config.noise_scale, config.samples_per_class,
                             target_labels)
    domain_specs.append(target_spec)
    target = generate_domain(target_spec, ROLE_TEST, class_means, seed)

    pretext_labels = tuple(range(n_benchmark + n_aux))
    pretext_specs: list[DomainSpec] = []
    parts_x, parts_y = [], []
    for s in range(config.pretext_styles):
        a, t = _draw_transform(substream(seed, "transform", "pretext", s), d,
                               config.scale_low, config.scale_high,
                               config.translation_scale,
                               config.rotation_strength)
        spec = DomainSpec(-1 - s, a, t, config.noise_scale,
                          config.pretext_samples_per_class, pretext_labels)
        pretext_specs.append(spec)
        ds = generate_domain(spec, ROLE_PRETEXT, all_means, seed)
        parts_x.append(ds.X)
        parts_y.append(ds.y)
    pretext = DomainDataset(-1, ROLE_PRETEXT, np.concatenate(parts_x),
                            np.concatenate(parts_y))

    return BenchmarkBundle(sources, target, pretext, split, class_means,
                           domain_specs, pretext_specs, config, seed)


# ------------------------------------------------------------------- disk

def _fmt(v: float) -> str:
    return repr(float(v))


def dump_dataset_csv(path: Path, datasets: list[DomainDataset]) -> None:
    d = datasets[0].X.shape[1]
    header = "domain_id,role,y," + ",".join(f"x{i}" for i in range(d))
    lines = [header]
    for ds in datasets:
        for i in range(len(ds)):
            row = [str(ds.domain_id), ds.role, str(int(ds.y[i]))]
            row.extend(_fmt(v) for v in ds.X[i])
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset_csv(path: Path) -> list[DomainDataset]:
    lines = Path(path).read_text().strip().split("\n")
    groups: dict[tuple[int, str], tuple[list, list]] = {}
    order: list[tuple[int, str]] = []
    for line in lines[1:]:
        cells = line.split(",")
        key = (int(cells[0]), cells[1])
        if key not in groups:
            groups[key] = ([], [])
            order.append(key)
        groups[key][0].append([float(v) for v in cells[3:]])
        groups[key][1].append(int(cells[2]))
    return [DomainDataset(dom, role, np.array(groups[(dom, role)][0]),
                          np.array(groups[(dom, role)][1], dtype=np.int64))
            for dom, role in order]


def _spec_to_json(spec: DomainSpec) -> dict:
    return {"domain_id": spec.domain_id, "A": spec.A.tolist(),
            "t": spec.t.tolist(), "noise_scale": spec.noise_scale,
            "samples_per_class": spec.samples_per_class,
            "labels": list(spec.labels)}


def _spec_from_json(obj: dict) -> DomainSpec:
    return DomainSpec(obj["domain_id"], np.array(obj["A"]), np.array(obj["t"]),
                      obj["noise_scale"], obj["samples_per_class"],
                      tuple(obj["labels"]))


def save_benchmark(bundle: BenchmarkBundle, out_dir: Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, sd in enumerate(bundle.sources):
        dump_dataset_csv(out / f"source_{i}.csv", [sd.train, sd.val])
    dump_dataset_csv(out / "target.csv", [bundle.target])
    dump_dataset_csv(out / "pretext.csv", [bundle.pretext])
    manifest = {
        "seed": bundle.seed,
        "config": asdict(bundle.config),
        "class_split": {
            "source_label_sets": [list(s) for s in
                                  bundle.class_split.source_label_sets],
            "target_known": list(bundle.class_split.target_known),
            "open_class_ids": list(bundle.class_split.open_class_ids),
        },
        "class_means": bundle.class_means.tolist(),
        "domains": [_spec_to_json(s) for s in bundle.domain_specs],
        "pretext": [_spec_to_json(s) for s in bundle.pretext_specs],
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_benchmark(in_dir: Path) -> BenchmarkBundle:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    cs = manifest["class_split"]
    split = ClassSplit(tuple(tuple(s) for s in cs["source_label_sets"]),
                       tuple(cs["target_known"]), tuple(cs["open_class_ids"]))
    config = BenchmarkConfig(**manifest["config"])
    sources = []
    for i in range(len(split.source_label_sets)):
        parts = load_dataset_csv(src / f"source_{i}.csv")
        by_role = {p.role: p for p in parts}
        sources.append(SplitDomain(by_role[ROLE_TRAIN], by_role[ROLE_VAL]))
    target = load_dataset_csv(src / "target.csv")[0]
    pretext = load_dataset_csv(src / "pretext.csv")[0]
    return BenchmarkBundle(
        sources, target, pretext, split,
        np.array(manifest["class_means"]),
        [_spec_from_json(s) for s in manifest["domains"]],
        [_spec_from_json(s) for s in manifest["pretext"]],
        config, manifest["seed"])


def require_trainable(*datasets: DomainDataset) -> None:
    """Hard stop if an evaluation-only dataset leaks into a training path."""
    for ds in datasets:
        if ds.role in EVAL_ONLY_ROLES:
            raise ValueError(
                f"dataset with role {ds.role!r} (domain {ds.domain_id}) "
                "must not be used for training or model selection")
