"""Diagnostics: feature-space distances, confidence statistics, head
movement, improvement ratios, rank correlation, histograms, loss curves.

Distance conventions differ on purpose and are never mixed: centroid
gaps and intra-class spread are per-dimension mean squared error, while
feature drift is the summed squared L2 distance. Head distance is the
unsquared per-class L2 of the concatenated weight-and-bias rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .losses import per_sample_neg_entropy

HISTOGRAM_BINS = 20
EMA_FACTOR = 0.9


# -------------------------------------------------------------- centroids

def class_centroids(extractor: nn.MlpParams, datasets) -> dict:
    """Mean feature per (domain_id, class) cell over the given datasets."""
    cells: dict[tuple[int, int], np.ndarray] = {}
    for ds in datasets:
        feats = nn.mlp_forward(extractor, ds.X)
        for c in np.unique(ds.y):
            cells[(ds.domain_id, int(c))] = feats[ds.y == c].mean(axis=0)
    return cells


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float((diff * diff).mean())


def domain_gap(centroids: dict, scope: str, target_domain: int | None = None):
    """Unweighted mean of per-dimension MSE between same-class centroids
    of different domains.

    scope "target_vs_sources" pairs the target domain with every source,
    "source_pairs" pairs sources among themselves, "per_pair" returns the
    full table keyed by (domain_a, domain_b).
    """
    domains = sorted({d for d, _ in centroids})
    if scope == "target_vs_sources":
        if target_domain is None:
            raise ValueError("target_vs_sources needs target_domain")
        pairs = [(d, target_domain) for d in domains if d != target_domain]
    elif scope in ("source_pairs", "per_pair"):
        pool = [d for d in domains if d != target_domain]
        pairs = [(a, b) for i, a in enumerate(pool) for b in pool[i + 1:]]
        if scope == "per_pair" and target_domain is not None:
            pairs += [(d, target_domain) for d in pool]
    else:
        raise ValueError(f"unknown scope {scope!r}")

    table: dict[tuple[int, int], float] = {}
    cells = []
    for a, b in pairs:
        shared = [c for d, c in centroids if d == a and (b, c) in centroids]
        vals = [_mse(centroids[(a, c)], centroids[(b, c)]) for c in sorted(shared)]
        if vals:
            table[(a, b)] = float(np.mean(vals))
            cells.extend(vals)
    if not cells:
        raise ValueError("no class shared between the requested domains")
    if scope == "per_pair":
        return table
    return float(np.mean(cells))


def intra_class_distance(extractor: nn.MlpParams, dataset) -> float:
    """Mean per-dimension MSE of each feature to its class centroid,
    averaged unweighted over the classes present."""
    feats = nn.mlp_forward(extractor, dataset.X)
    per_class = []
    for c in np.unique(dataset.y):
        sub = feats[dataset.y == c]
        centroid = sub.mean(axis=0)
        diff = sub - centroid
        per_class.append(float((diff * diff).mean(axis=1).mean()))
    if not per_class:
        raise ValueError("dataset has no samples")
    return float(np.mean(per_class))


def feature_drift(f: nn.MlpParams, f0: nn.MlpParams, X: np.ndarray) -> float:
    """Mean summed squared L2 distance between current and pretrained
    features of the same inputs."""
    diff = nn.mlp_forward(f, X) - nn.mlp_forward(f0, X)
    return float((diff * diff).sum(axis=1).mean())


# ------------------------------------------------------------- confidence

def confidence_entropy_stats(state: nn.ModelState, x: np.ndarray,
                             y_head: np.ndarray) -> dict:
    """Mean max softmax confidence and mean softmax entropy of the live
    model, split by known vs open ground truth."""
    y_head = np.asarray(y_head, dtype=np.int64).reshape(-1)
    probs = nn.softmax(nn.head_forward(state.h, nn.mlp_forward(state.f, x)))
    conf = probs.max(axis=1)
    ent = -per_sample_neg_entropy(np.log(np.maximum(probs, 1e-300)))
    sentinel = state.h.num_classes
    out = {}
    for name, mask in (("known", y_head < sentinel), ("unknown", y_head == sentinel)):
        if mask.any():
            out[name] = {"mean_max_confidence": float(conf[mask].mean()),
                         "mean_entropy": float(ent[mask].mean()),
                         "count": int(mask.sum())}
        else:
            out[name] = {"mean_max_confidence": None, "mean_entropy": None,
                         "count": 0, "missing": True}
    return out


def per_sample_confidence(state: nn.ModelState, x: np.ndarray) -> np.ndarray:
    probs = nn.softmax(nn.head_forward(state.h, nn.mlp_forward(state.f, x)))
    return probs.max(axis=1)


# ------------------------------------------------------------------- head

def head_euclidean_distance(h_a: nn.HeadParams, h_b: nn.HeadParams) -> float:
    """Mean over classes of the L2 norm of the difference between the
    heads' concatenated [W | b] rows."""
    if h_a.weight.shape != h_b.weight.shape:
        raise nn.ShapeError("head shapes differ")
    wa = np.concatenate([h_a.weight, h_a.bias[:, None]], axis=1)
    wb = np.concatenate([h_b.weight, h_b.bias[:, None]], axis=1)
    return float(np.sqrt(((wa - wb) ** 2).sum(axis=1)).mean())


def improvement_ratios(model_acc: float, lp_acc: float,
                       frozen_feat_acc_with_trained_head: float,
                       frozen_feat_acc_with_lp_head: float) -> dict:
    if lp_acc <= 0 or frozen_feat_acc_with_lp_head <= 0:
        raise ValueError("improvement ratio denominator must be positive")
    return {"imp1": (model_acc / lp_acc - 1.0) * 100.0,
            "imp2": (frozen_feat_acc_with_trained_head /
                     frozen_feat_acc_with_lp_head - 1.0) * 100.0}


# ---------------------------------------------------------------- spearman

def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    if (xs == xs[0]).all() or (ys == ys[0]).all():
        raise ValueError("rank correlation undefined for a constant sequence")
    ra, rb = average_ranks(xs), average_ranks(ys)
    da, db = ra - ra.mean(), rb - rb.mean()
    return float((da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum()))


# --------------------------------------------------------------- histogram

def histogram(values, bins: int = HISTOGRAM_BINS,
              value_range: tuple[float, float] = (0.0, 1.0)):
    """Fixed-width counts with a right-closed last bin. Values outside the
    range are clamped into the edge bins and counted in the returned flag."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = value_range
    v = np.asarray(values, dtype=np.float64)
    clamped = int(((v < lo) | (v > hi)).sum())
    v = np.clip(v, lo, hi)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.minimum(idx, bins - 1)  # v == hi belongs to the last bin
    counts = np.bincount(idx, minlength=bins)
    return counts, clamped


# --------------------------------------------------------------------- ema

def ema(series, factor: float = EMA_FACTOR) -> np.ndarray:
    """Exponential moving average: s[0] = x[0], s[i] = factor * s[i-1] +
    (1 - factor) * x[i]."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    out = np.empty_like(x)
    out[0] = x[0]
    for i in range(1, len(x)):
        out[i] = factor * out[i - 1] + (1.0 - factor) * x[i]
    return out


# --------------------------------------------------------------- reporting

@dataclass
class AnalysisReport:
    domain_gap_target_vs_sources: float
    domain_gap_source_pairs: float
    domain_gap_per_pair: dict
    intra_class_distance: dict      # domain_id -> value (current features)
    feature_drift: dict             # domain_id -> value
    confidence_entropy: dict
    head_distance: float
    accuracies: dict
    improvements: dict
    histograms: dict

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["domain_gap_per_pair"] = {f"{a}-{b}": v for (a, b), v in
                                      self.domain_gap_per_pair.items()}
        out["intra_class_distance"] = {str(k): v for k, v in
                                       self.intra_class_distance.items()}
        out["feature_drift"] = {str(k): v for k, v in self.feature_drift.items()}
        return out


def _closed_set_acc(h: nn.HeadParams, f: nn.MlpParams, x: np.ndarray,
                    y: np.ndarray) -> float:
    logits = nn.head_forward(h, nn.mlp_forward(f, x))
    return float((logits.argmax(axis=1) == y).mean())


def analyze_run(state: nn.ModelState, bundle) -> AnalysisReport:
    """Full diagnostic pass over source validation sets plus the target."""
    if state.h_lp is None:
        raise ValueError("analysis needs the probed head snapshot")
    split = bundle.class_split
    eval_sets = []
    for sd in bundle.sources:
        eval_sets.append(_HeadLabeled(sd.val.domain_id, sd.val.X,
                                      split.to_head_label(sd.val.y)))
    target = _HeadLabeled(bundle.target.domain_id, bundle.target.X,
                          split.to_head_label(bundle.target.y))
    eval_sets.append(target)
    target_id = target.domain_id

    cents = class_centroids(state.f, eval_sets)
    gap_t = domain_gap(cents, "target_vs_sources", target_id)
    gap_s = domain_gap(cents, "source_pairs", target_id)
    gap_table = domain_gap(cents, "per_pair", target_id)

    intra = {ds.domain_id: intra_class_distance(state.f, ds) for ds in eval_sets}
    drift = {ds.domain_id: feature_drift(state.f, state.f0, ds.X)
             for ds in eval_sets}

    stats = confidence_entropy_stats(state, target.X, target.y)
    head_dist = head_euclidean_distance(state.h, state.h_lp)

    known_mask = target.y < split.open_sentinel
    kx, ky = target.X[known_mask], target.y[known_mask]
    accs = {
        "model_target_known": _closed_set_acc(state.h, state.f, kx, ky),
        "lp_target_known": _closed_set_acc(state.h_lp, state.f0, kx, ky),
        "trained_head_frozen_features": _closed_set_acc(state.h, state.f0, kx, ky),
        "lp_head_frozen_features": _closed_set_acc(state.h_lp, state.f0, kx, ky),
    }
    if accs["lp_target_known"] > 0 and accs["lp_head_frozen_features"] > 0:
        imps = improvement_ratios(accs["model_target_known"],
                                  accs["lp_target_known"],
                                  accs["trained_head_frozen_features"],
                                  accs["lp_head_frozen_features"])
    else:  # probe never gets the target right: ratios undefined
        imps = {"imp1": None, "imp2": None}

    conf = per_sample_confidence(state, target.X)
    hist_known, clamp_k = histogram(conf[known_mask])
    hist_open, clamp_o = histogram(conf[~known_mask])
    hists = {"bins": HISTOGRAM_BINS, "range": [0.0, 1.0],
             "known": hist_known.tolist(), "unknown": hist_open.tolist(),
             "clamped_known": clamp_k, "clamped_unknown": clamp_o}

    return AnalysisReport(gap_t, gap_s, gap_table, intra, drift, stats,
                          head_dist, accs, imps, hists)


@dataclass
class _HeadLabeled:
    domain_id: int
    X: np.ndarray
    y: np.ndarray


def save_analysis(report: AnalysisReport, out_dir: Path) -> None:
    out = Path(out_dir)
    (out / "analysis.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    h = report.histograms
    width = (h["range"][1] - h["range"][0]) / h["bins"]
    lines = ["bin_low,bin_high,known_count,unknown_count"]
    for i in range(h["bins"]):
        lines.append(f"{h['range'][0] + i * width!r},"
                     f"{h['range'][0] + (i + 1) * width!r},"
                     f"{h['known'][i]},{h['unknown'][i]}")
    (out / "histograms.csv").write_text("\n".join(lines) + "\n")


def export_loss_curves(per_domain_lpft: dict, out_dir: Path,
                       variant: str = "run") -> None:
    """CSV plus an SVG of raw and EMA-smoothed per-source-domain probe-CE
    curves. per_domain_lpft maps domain_id -> per-epoch list."""
    out = Path(out_dir)
    lines = ["variant,domain_id,epoch,l_lpft,l_lpft_ema"]
    for dom in sorted(per_domain_lpft):
        raw = np.asarray(per_domain_lpft[dom], dtype=np.float64)
        smooth = ema(raw)
        for e in range(len(raw)):
            lines.append(f"{variant},{dom},{e},{raw[e]!r},{smooth[e]!r}")
    (out / "loss_curves.csv").write_text("\n".join(lines) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for dom in sorted(per_domain_lpft):
        raw = np.asarray(per_domain_lpft[dom], dtype=np.float64)
        epochs = np.arange(len(raw))
        ax.plot(epochs, raw, alpha=0.3)
        ax.plot(epochs, ema(raw), label=f"domain {dom}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.set_title(f"per-domain training loss ({variant})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curves.svg")
    plt.close(fig)
