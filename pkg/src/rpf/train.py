"""Training pipeline: pretraining the frozen extractor, linear probing,
fine-tuning under any ablation variant, and the suite/sweep runners.

Stage order mirrors the probe-then-finetune recipe: a pretext
classification task produces the frozen extractor f0; the head is then
probed on frozen features; fine-tuning starts from (f0 copy, probed
head) and minimizes the configured objective with exact gradient
routing. Model selection is the epoch with the best pooled source
validation accuracy, earliest epoch on ties. Target data never enters
any of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import analysis, data, evaluate, nn
from . import checkpoint as ckpt
from .losses import (LossSpec, PrototypeBank, TermWeights, Variant,
                     compute_prototypes, loss_and_grads, resolve_terms)
from .rng import substream


class DivergenceError(RuntimeError):
    """Loss went non-finite or exploded; training aborted."""


LOSS_CEILING = 1e6


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.001
    decay_epoch: int = 24
    decay_factor: float = 0.1
    lambda_hr: float = 0.1
    lambda_fr: float = 1.0
    variant: Variant = Variant.RPF
    seed: int = 0
    lp_epochs: int = 10
    lp_lr: float = 0.01
    pretrain_epochs: int = 8
    pretrain_lr: float = 0.01
    hidden_dims: tuple[int, ...] = (32, 8)
    activation: str = "relu"

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = Variant(self.variant)
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.decay_epoch <= self.epochs:
            raise ValueError("decay_epoch must be in [1, epochs]")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("bad batch_size or lr")

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.variant, self.lambda_hr, self.lambda_fr)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variant"] = self.variant.value
        out["hidden_dims"] = list(self.hidden_dims)
        return out


@dataclass
class EpochLog:
    epoch: int
    l_lpft: float
    l_fr: float
    l_hr: float
    train_acc: float
    val_acc: float
    per_domain_lpft: dict


@dataclass
class RunRecord:
    epochs: list
    selected_epoch: int
    seed: int
    config_hash: str
    probe_l_lp: list
    probe_val_acc: float
    pretext_val_acc: float

    @property
    def selected(self) -> EpochLog:
        return self.epochs[self.selected_epoch]

    def per_domain_curves(self) -> dict:
        out: dict[int, list[float]] = {}
        for log in self.epochs:
            for dom, v in log.per_domain_lpft.items():
                out.setdefault(dom, []).append(v)
        return out


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value) or abs(value) > LOSS_CEILING:
        raise DivergenceError(f"loss diverged during {where}: {value!r}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _closed_set_acc(h: nn.HeadParams, feats: np.ndarray, y: np.ndarray) -> float:
    return float((nn.head_forward(h, feats).argmax(axis=1) == y).mean())


# --------------------------------------------------------------- pretrain

def pretrain_f0(pretext: data.DomainDataset, config: TrainConfig):
    """Train a fresh extractor plus a throwaway head on the pretext task;
    return (frozen extractor, pretext val accuracy)."""
    data.require_trainable(pretext)
    classes = np.unique(pretext.y)
    if len(classes) < 2:
        raise ValueError("pretext task needs at least 2 classes")
    sd = data.split_train_val(pretext, 0.1, config.seed)
    x_tr, y_tr = sd.train.X, sd.train.y
    n_classes = int(pretext.y.max()) + 1

    f = nn.init_mlp(x_tr.shape[1], config.hidden_dims, config.seed,
                    activation=config.activation, stream=("pretrain", "mlp"))
    h = nn.init_head(n_classes, f.feature_dim, config.seed,
                     stream=("pretrain", "head"))
    state = nn.ModelState(f=f, h=h, f0=f.frozen_copy())
    opt = nn.OptimizerState(config.pretrain_lr, decay_epoch=10**9)
    shuffle = substream(config.seed, "pretrain", "shuffle")
    weights = TermWeights()
    for epoch in range(config.pretrain_epochs):
        for idx in _batches(len(y_tr), config.batch_size, shuffle):
            parts, grads, _ = loss_and_grads(state, x_tr[idx], y_tr[idx], weights)
            _check_finite(parts.total, f"pretraining epoch {epoch}")
            nn.sgd_step(state, grads, opt)
    val_feats = nn.mlp_forward(state.f, sd.val.X)
    val_acc = _closed_set_acc(state.h, val_feats, sd.val.y)
    return state.f.frozen_copy(), val_acc


# ------------------------------------------------------------------ probe

def linear_probe(state: nn.ModelState, sources, split: data.ClassSplit,
                 config: TrainConfig):
    """Train only the head on frozen-extractor features of the pooled
    source training splits. Stores the result as the live head and the
    frozen probe snapshot; the extractor is untouched by construction.

    Returns (h_lp, probe log dict) where the log carries the full-set
    probe CE before training and after each epoch, plus val accuracy.
    """
    for sd in sources:
        data.require_trainable(sd.train, sd.val)
    x_tr = np.concatenate([sd.train.X for sd in sources])
    y_tr = split.to_head_label(np.concatenate([sd.train.y for sd in sources]))
    x_va = np.concatenate([sd.val.X for sd in sources])
    y_va = split.to_head_label(np.concatenate([sd.val.y for sd in sources]))

    feats_tr = nn.mlp_forward(state.f0, x_tr)   # frozen: compute once
    feats_va = nn.mlp_forward(state.f0, x_va)
    h = nn.init_head(split.num_known, state.f0.feature_dim, config.seed,
                     stream=("probe", "head"))
    shuffle = substream(config.seed, "probe", "shuffle")

    def full_ce() -> float:
        return nn.cross_entropy(nn.head_forward(h, feats_tr), y_tr)

    curve = [full_ce()]
    for epoch in range(config.lp_epochs):
        for idx in _batches(len(y_tr), config.batch_size, shuffle):
            logits = nn.head_forward(h, feats_tr[idx])
            d_logits = nn.softmax_ce_grad(logits, y_tr[idx])
            d_w, d_b, _ = nn.head_backward(h, feats_tr[idx], d_logits)
            ce = nn.cross_entropy(logits, y_tr[idx])
            _check_finite(ce, f"probing epoch {epoch}")
            h.weight -= config.lp_lr * d_w
            h.bias -= config.lp_lr * d_b
        curve.append(full_ce())

    state.h = h
    state.set_probe_snapshot(h)
    val_acc = _closed_set_acc(h, feats_va, y_va)
    return state.h_lp, {"l_lp": curve, "val_acc": val_acc}


# -------------------------------------------------------------- fine-tune

def fine_tune(state: nn.ModelState, sources, split: data.ClassSplit,
              bank: PrototypeBank | None, config: TrainConfig,
              probe_log: dict | None = None,
              pretext_val_acc: float = 0.0) -> RunRecord:
    """Mini-batch SGD on the configured objective with routing, epoch
    logging, and best-val model selection."""
    for sd in sources:
        data.require_trainable(sd.train, sd.val)
    weights = resolve_terms(config.loss_spec())
    if weights.fr != 0.0 and bank is None:
        raise ValueError("feature regularizer active but no prototype bank")
    if state.h_lp is None and not weights.reinit_head:
        raise ValueError("fine-tuning needs the probed head first")
    if weights.reinit_head:
        state.h = nn.init_head(split.num_known, state.f.feature_dim,
                               config.seed, stream=("finetune", "head_reinit"))

    x_tr = np.concatenate([sd.train.X for sd in sources])
    y_raw = np.concatenate([sd.train.y for sd in sources])
    y_tr = split.to_head_label(y_raw)
    dom_tr = np.concatenate([np.full(len(sd.train), sd.train.domain_id)
                             for sd in sources])
    x_va = np.concatenate([sd.val.X for sd in sources])
    y_va = split.to_head_label(np.concatenate([sd.val.y for sd in sources]))
    domains = sorted({sd.train.domain_id for sd in sources})

    opt = nn.OptimizerState(config.lr, config.decay_epoch, config.decay_factor)
    shuffle = substream(config.seed, "finetune", "shuffle")
    bank_sum_before = bank.checksum() if bank is not None else None

    logs: list[EpochLog] = []
    best = None  # (val_acc, epoch, f copy, h copy)
    n = len(y_tr)
    for epoch in range(config.epochs):
        opt.epoch = epoch
        ce_sum = fr_sum = hr_sum = 0.0
        correct = 0
        dom_ce = {d: 0.0 for d in domains}
        dom_n = {d: 0 for d in domains}
        for idx in _batches(n, config.batch_size, shuffle):
            parts, grads, aux = loss_and_grads(
                state, x_tr[idx], y_tr[idx], weights, bank)
            try:
                _check_finite(parts.total, f"fine-tuning epoch {epoch}")
            except DivergenceError as err:
                err.logs = logs  # let callers report the last finite epoch
                raise
            ce_sum += float(aux.ce.sum())
            fr_sum += float(aux.fr.sum())
            hr_sum += float(aux.hr.sum())
            correct += int((aux.logits.argmax(axis=1) == y_tr[idx]).sum())
            for d in domains:
                mask = dom_tr[idx] == d
                if mask.any():
                    dom_ce[d] += float(aux.ce[mask].sum())
                    dom_n[d] += int(mask.sum())
            nn.sgd_step(state, grads, opt)

        val_acc = _closed_set_acc(state.h, nn.mlp_forward(state.f, x_va), y_va)
        logs.append(EpochLog(
            epoch=epoch, l_lpft=ce_sum / n, l_fr=fr_sum / n, l_hr=hr_sum / n,
            train_acc=correct / n, val_acc=val_acc,
            per_domain_lpft={d: dom_ce[d] / dom_n[d] for d in domains}))
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, state.f.copy(), state.h.copy())

    if bank is not None and bank.checksum() != bank_sum_before:
        raise RuntimeError("prototype bank changed during fine-tuning")

    state.f = best[2]
    state.h = best[3]
    probe_log = probe_log or {"l_lp": [], "val_acc": 0.0}
    return RunRecord(
        epochs=logs, selected_epoch=best[1], seed=config.seed,
        config_hash=ckpt.config_hash(config.to_dict()),
        probe_l_lp=probe_log["l_lp"], probe_val_acc=probe_log["val_acc"],
        pretext_val_acc=pretext_val_acc)


# ----------------------------------------------------------- orchestration

def metrics_csv_text(record: RunRecord) -> str:
    lines = ["epoch,l_lpft,l_fr,l_hr,train_acc,val_acc"]
    for log in record.epochs:
        lines.append(f"{log.epoch},{log.l_lpft!r},{log.l_fr!r},{log.l_hr!r},"
                     f"{log.train_acc!r},{log.val_acc!r}")
    return "\n".join(lines) + "\n"


def run_experiment(bundle: data.BenchmarkBundle, config: TrainConfig,
                   out_dir: Path | None = None):
    """Pretrain, probe, build prototypes, fine-tune, evaluate, analyze;
    write all artifacts when out_dir is given."""
    split = bundle.class_split
    f0, pretext_val_acc = pretrain_f0(bundle.pretext, config)
    state = nn.ModelState(f=f0.copy(), h=nn.init_head(
        split.num_known, f0.feature_dim, config.seed), f0=f0)
    _, probe_log = linear_probe(state, bundle.sources, split, config)

    train_pairs = [(sd.train.X, split.to_head_label(sd.train.y))
                   for sd in bundle.sources]
    bank = compute_prototypes(f0, train_pairs, split.num_known)

    record = fine_tune(state, bundle.sources, split, bank, config,
                       probe_log, pretext_val_acc)

    y_target = split.to_head_label(bundle.target.y)
    report = evaluate.threshold_sweep(state, bundle.target.X, y_target)
    diag = analysis.analyze_run(state, bundle)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg_blob = {"train": config.to_dict(), "bundle_seed": bundle.seed,
                    "selected_epoch": record.selected_epoch,
                    "probe_val_acc": record.probe_val_acc,
                    "pretext_val_acc": record.pretext_val_acc}
        (out / "config.json").write_text(
            json.dumps(cfg_blob, indent=2, sort_keys=True) + "\n")
        (out / "metrics.csv").write_text(metrics_csv_text(record))
        ckpt.save_checkpoint(out / "checkpoint.rpfckpt", state, bank,
                             config.to_dict(), config.seed)
        evaluate.save_report(report, out)
        analysis.save_analysis(diag, out)
        analysis.export_loss_curves(record.per_domain_curves(), out,
                                    variant=config.variant.value)
    return record, report, diag


ABLATION_ORDER = (Variant.LPFT, Variant.NO_HR, Variant.NO_FR,
                  Variant.NO_PRETRAINED_HEAD, Variant.HR_F,
                  Variant.ENT_MIN_HR, Variant.RPF)


def _replace_config(config: TrainConfig, **kw) -> TrainConfig:
    blob = config.to_dict()
    blob.update(kw)
    blob["hidden_dims"] = tuple(blob["hidden_dims"])
    return TrainConfig(**blob)


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def run_ablation_suite(bundle: data.BenchmarkBundle, config: TrainConfig,
                       seeds=(0, 1, 2), out_dir: Path | None = None) -> dict:
    """All seven variants over shared seeds; per-variant mean and std of
    closed-set accuracy and best H-score, plus rank correlations between
    head movement and the improvement ratios across all runs."""
    rows = []
    head_dists, imp1s, imp2s = [], [], []
    for variant in ABLATION_ORDER:
        accs, hs = [], []
        for seed in seeds:
            cfg = _replace_config(config, variant=variant.value, seed=seed)
            run_out = (Path(out_dir) / f"{variant.value}_seed{seed}"
                       if out_dir is not None else None)
            _, report, diag = run_experiment(bundle, cfg, run_out)
            accs.append(report.acc_known)
            hs.append(report.best_h_score)
            head_dists.append(diag.head_distance)
            imp1s.append(diag.improvements["imp1"])
            imp2s.append(diag.improvements["imp2"])
        acc_m, acc_s = _mean_std(accs)
        h_m, h_s = _mean_std(hs)
        rows.append({"variant": variant.value, "acc_mean": acc_m,
                     "acc_std": acc_s, "h_mean": h_m, "h_std": h_s,
                     "acc_runs": accs, "h_runs": hs})

    def _rho(ys):
        if any(v is None for v in ys):
            return None
        try:
            return analysis.spearman_rho(head_dists, ys)
        except ValueError:
            return None

    table = {"rows": rows, "seeds": list(seeds),
             "spearman": {"head_distance_vs_imp1": _rho(imp1s),
                          "head_distance_vs_imp2": _rho(imp2s),
                          "head_distances": head_dists,
                          "imp1": imp1s, "imp2": imp2s}}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["variant,acc_mean,acc_std,h_mean,h_std,n_seeds"]
        for r in rows:
            lines.append(f"{r['variant']},{r['acc_mean']!r},{r['acc_std']!r},"
                         f"{r['h_mean']!r},{r['h_std']!r},{len(seeds)}")
        (out / "ablation.csv").write_text("\n".join(lines) + "\n")
        (out / "suite.json").write_text(
            json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def run_lambda_sweep(bundle: data.BenchmarkBundle, config: TrainConfig,
                     lambdas=(1.0, 0.5, 0.1), seeds=(0, 1, 2),
                     out_dir: Path | None = None) -> dict:
    """Full-method runs at each entropy-term weight."""
    if any(l < 0 for l in lambdas):
        raise ValueError("lambda values must be >= 0")
    rows = []
    for lam in lambdas:
        accs, hs = [], []
        for seed in seeds:
            cfg = _replace_config(config, variant=Variant.RPF.value,
                                  lambda_hr=lam, seed=seed)
            run_out = (Path(out_dir) / f"lambda{lam}_seed{seed}"
                       if out_dir is not None else None)
            _, report, _ = run_experiment(bundle, cfg, run_out)
            accs.append(report.acc_known)
            hs.append(report.best_h_score)
        acc_m, acc_s = _mean_std(accs)
        h_m, h_s = _mean_std(hs)
        rows.append({"lambda_hr": lam, "acc_mean": acc_m, "acc_std": acc_s,
                     "h_mean": h_m, "h_std": h_s, "acc_runs": accs,
                     "h_runs": hs})
    table = {"rows": rows, "seeds": list(seeds)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["lambda_hr,acc_mean,acc_std,h_mean,h_std,n_seeds"]
        for r in rows:
            lines.append(f"{r['lambda_hr']!r},{r['acc_mean']!r},"
                         f"{r['acc_std']!r},{r['h_mean']!r},{r['h_std']!r},"
                         f"{len(seeds)}")
        (out / "lambda_sweep.csv").write_text("\n".join(lines) + "\n")
        (out / "lambda_sweep.json").write_text(
            json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table
