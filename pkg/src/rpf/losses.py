"""Objective terms and ablation variants.

The total objective is plain cross-entropy on the live network plus two
optional regularizers: a feature pull toward fixed per-class prototypes
(gradient reaches the extractor only) and a head entropy term (gradient
reaches the head only, never the extractor). Variants toggle terms, flip
the entropy sign, or swap which extractor feeds the entropy term.

Term-skip rule: a term whose coefficient is zero is never computed, so a
run with both regularizers off is bitwise identical to the plain probe
then fine-tune baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import nn


class Variant(str, Enum):
    LPFT = "lpft"
    NO_HR = "no_hr"
    NO_FR = "no_fr"
    NO_PRETRAINED_HEAD = "no_pretrained_head"
    HR_F = "hr_f"
    ENT_MIN_HR = "ent_min_hr"
    RPF = "rpf"


@dataclass(frozen=True)
class LossSpec:
    variant: Variant
    lambda_hr: float = 0.1
    lambda_fr: float = 1.0

    def __post_init__(self):
        if self.lambda_hr < 0:
            raise ValueError("lambda_hr must be >= 0")
        if self.lambda_fr < 0:
            raise ValueError("lambda_fr must be >= 0")


@dataclass(frozen=True)
class TermWeights:
    """Resolved per-term multipliers for one variant.

    hr_sign is +1 when the entropy term enters as negative entropy (so
    minimizing it spreads probability mass) and -1 for the sharpening
    variant. hr_on_current picks live-extractor features for the entropy
    term instead of the frozen ones; either way its gradient stops at the
    head. reinit_head tells the trainer to discard the probed head before
    fine-tuning.
    """

    ce: float = 1.0
    fr: float = 0.0
    hr: float = 0.0
    hr_sign: float = 1.0
    hr_on_current: bool = False
    reinit_head: bool = False


def resolve_terms(spec: LossSpec) -> TermWeights:
    v, lhr, lfr = spec.variant, spec.lambda_hr, spec.lambda_fr
    if v is Variant.LPFT:
        return TermWeights()
    if v is Variant.NO_HR:
        return TermWeights(fr=lfr)
    if v is Variant.NO_FR:
        return TermWeights(hr=lhr)
    if v is Variant.NO_PRETRAINED_HEAD:
        return TermWeights(fr=lfr, hr=lhr, reinit_head=True)
    if v is Variant.HR_F:
        return TermWeights(fr=lfr, hr=lhr, hr_on_current=True)
    if v is Variant.ENT_MIN_HR:
        return TermWeights(fr=lfr, hr=lhr, hr_sign=-1.0)
    if v is Variant.RPF:
        return TermWeights(fr=lfr, hr=lhr)
    raise ValueError(f"unsupported variant {v!r}")


# ---------------------------------------------------------------- prototypes

@dataclass
class PrototypeBank:
    """One frozen feature-space anchor per known class."""

    P: np.ndarray       # [C x d], read-only
    counts: np.ndarray  # [C] samples pooled into each row

    def __post_init__(self):
        if self.P.ndim != 2 or self.counts.shape != (self.P.shape[0],):
            raise nn.ShapeError("bank needs [C x d] rows and C counts")
        self.P.flags.writeable = False
        self.counts.flags.writeable = False

    @property
    def num_classes(self) -> int:
        return self.P.shape[0]

    def checksum(self) -> str:
        return nn.array_checksum(self.P)


def compute_prototypes(f0: nn.MlpParams, sources, num_classes: int) -> PrototypeBank:
    """Pooled per-class mean of frozen-extractor features over the given
    (X, y) training splits. Every class must appear somewhere."""
    d = f0.feature_dim
    sums = np.zeros((num_classes, d))
    counts = np.zeros(num_classes, dtype=np.int64)
    for X, y in sources:
        feats = nn.mlp_forward(f0, X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"label outside [0, {num_classes})")
        for c in np.unique(y):
            mask = y == c
            sums[c] += feats[mask].sum(axis=0)
            counts[c] += int(mask.sum())
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"no training samples for class {int(missing[0])}")
    return PrototypeBank(sums / counts[:, None], counts)


# ---------------------------------------------------------------- raw terms

def loss_fr(features: np.ndarray, labels: np.ndarray, bank: PrototypeBank) -> float:
    """Mean squared distance (summed over feature dims) to the class anchor."""
    return float(per_sample_fr(features, labels, bank).mean())


def per_sample_fr(features: np.ndarray, labels: np.ndarray,
                  bank: PrototypeBank) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= bank.num_classes:
        raise ValueError("batch label has no prototype row")
    diff = np.asarray(features, dtype=np.float64) - bank.P[labels]
    return (diff * diff).sum(axis=1)


def _plogp(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0.0, p, 1.0)
    return np.where(p > 0.0, p * np.log(safe), 0.0)


def per_sample_neg_entropy(logits: np.ndarray) -> np.ndarray:
    """Row-wise sum of p*log(p); in [-ln C, 0] with 0*log 0 := 0."""
    return _plogp(nn.softmax(logits)).sum(axis=-1)


def loss_hr(h: nn.HeadParams, f0_features: np.ndarray) -> float:
    """Mean negative softmax entropy of the head on frozen features."""
    return float(per_sample_neg_entropy(nn.head_forward(h, f0_features)).mean())


def loss_hr_variant(variant: Variant, state: nn.ModelState, x: np.ndarray) -> float:
    """Entropy-term value for the two variants that reroute or negate it."""
    if variant is Variant.HR_F:
        return loss_hr(state.h, nn.mlp_forward(state.f, x))
    if variant is Variant.ENT_MIN_HR:
        return -loss_hr(state.h, nn.mlp_forward(state.f0, x))
    raise ValueError(f"variant {variant!r} has no rerouted entropy term")


def neg_entropy_grad(logits: np.ndarray) -> np.ndarray:
    """d(mean row-sum of p*log p)/d(logits): p_k*(log p_k + H(p))/B."""
    p = nn.softmax(logits)
    log_p = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    ent = -_plogp(p).sum(axis=-1, keepdims=True)
    return p * (log_p + ent) / logits.shape[0]


# ---------------------------------------------------------------- engine

@dataclass
class LossParts:
    """Scalar breakdown for logging. fr and hr are the raw term values
    before their multipliers (hr already carries the variant sign);
    skipped terms are reported as 0.0."""

    total: float
    ce: float
    fr: float
    hr: float


@dataclass
class BatchAux:
    """Per-sample values accumulated by the trainer for epoch means."""

    ce: np.ndarray
    fr: np.ndarray
    hr: np.ndarray
    logits: np.ndarray  # live-network logits, for train accuracy


def loss_and_grads(state: nn.ModelState, x: np.ndarray, y: np.ndarray,
                   weights: TermWeights, bank: PrototypeBank | None = None,
                   hr_features_override: np.ndarray | None = None):
    """Evaluate the composite objective and its exact gradients.

    Gradient routing: CE reaches everything, the feature term reaches the
    extractor only, the entropy term reaches the head only. The returned
    GradSet buffers on the unused routes are exact zeros because nothing
    ever writes them.

    hr_features_override pins the entropy-term features to a caller-fixed
    array; the finite-difference harness uses it to express the
    stop-gradient in that term.
    """
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    feats, cache = nn.mlp_forward_cached(state.f, x)
    logits = nn.head_forward(state.h, feats)
    b = len(y)

    ce = 0.0
    ce_vec = np.zeros(b)
    d_feats = np.zeros_like(feats)
    d_hw = np.zeros_like(state.h.weight)
    d_hb = np.zeros_like(state.h.bias)
    if weights.ce != 0.0:
        ce_vec = nn.per_sample_cross_entropy(logits, y)
        ce = float(ce_vec.mean())
        d_logits = weights.ce * nn.softmax_ce_grad(logits, y)
        d_hw, d_hb, d_feats = nn.head_backward(state.h, feats, d_logits)

    fr = 0.0
    fr_vec = np.zeros(b)
    if weights.fr != 0.0:
        if bank is None:
            raise ValueError("feature regularizer needs a prototype bank")
        fr_vec = per_sample_fr(feats, y, bank)
        fr = float(fr_vec.mean())
        d_feats = d_feats + weights.fr * 2.0 * (feats - bank.P[y]) / b

    hr = 0.0
    hr_vec = np.zeros(b)
    if weights.hr != 0.0:
        if hr_features_override is not None:
            hr_feats = hr_features_override
        elif weights.hr_on_current:
            hr_feats = feats
        else:
            hr_feats = nn.mlp_forward(state.f0, x)
        hr_logits = nn.head_forward(state.h, hr_feats)
        hr_vec = weights.hr_sign * per_sample_neg_entropy(hr_logits)
        hr = float(hr_vec.mean())
        d_hr_logits = weights.hr * weights.hr_sign * neg_entropy_grad(hr_logits)
        d_hw = d_hw + d_hr_logits.T @ hr_feats
        d_hb = d_hb + d_hr_logits.sum(axis=0)

    d_ws, d_bs = nn.mlp_backward(state.f, cache, d_feats)
    total = weights.ce * ce + weights.fr * fr + weights.hr * hr
    parts = LossParts(total=total, ce=ce, fr=fr, hr=hr)
    grads = nn.GradSet(d_ws, d_bs, d_hw, d_hb)
    return parts, grads, BatchAux(ce=ce_vec, fr=fr_vec, hr=hr_vec, logits=logits)


def loss_total(state: nn.ModelState, x: np.ndarray, y: np.ndarray,
               spec: LossSpec, bank: PrototypeBank | None = None) -> LossParts:
    parts, _, _ = loss_and_grads(state, x, y, resolve_terms(spec), bank)
    return parts


# ---------------------------------------------------- finite differences

def relative_error(a: float, n: float, tiny: float = 1e-10) -> float:
    denom = max(abs(a), abs(n))
    return 0.0 if denom < tiny else abs(a - n) / denom


def finite_difference_check(state: nn.ModelState, x: np.ndarray, y: np.ndarray,
                            weights: TermWeights,
                            bank: PrototypeBank | None = None,
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central
    differences over every trainable entry.

    When the entropy term reads live features, those features are pinned
    at their unperturbed values so the numeric derivative respects the
    same stop-gradient the analytic path implements.
    """
    pinned = None
    if weights.hr != 0.0 and weights.hr_on_current:
        pinned = nn.mlp_forward(state.f, x)

    _, grads, _ = loss_and_grads(state, x, y, weights, bank,
                                 hr_features_override=pinned)

    def scalar_loss() -> float:
        parts, _, _ = loss_and_grads(state, x, y, weights, bank,
                                     hr_features_override=pinned)
        return parts.total

    worst = 0.0
    params = [*state.f.weights, *state.f.biases, state.h.weight, state.h.bias]
    for p, g in zip(params, grads.buffers()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_p.size):
            orig = flat_p[k]
            flat_p[k] = orig + eps
            up = scalar_loss()
            flat_p[k] = orig - eps
            dn = scalar_loss()
            flat_p[k] = orig
            worst = max(worst, relative_error(flat_g[k], (up - dn) / (2 * eps)))
    return worst
