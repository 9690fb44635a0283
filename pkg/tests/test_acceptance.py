"""Acceptance gate: every shipped guarantee, one printed line each.

Criteria 1-6 are hard property checks (gradients, routing, freezing,
oracles, bounds, equivalence). Criteria 7-8 are directional reproductions
on the default synthetic benchmark over seeds 0-2; 9-10 pin the protocol
and determinism. Result lines are replayed by a terminal-summary hook so
they stay visible under output capture.
"""

import time

import numpy as np
import pytest

from rpf import analysis, cli, data, evaluate, nn, train
from rpf.losses import (TermWeights, compute_prototypes,
                        finite_difference_check, loss_and_grads, loss_hr,
                        resolve_terms)
from rpf.rng import substream

from oracles import (brute_domain_gap_mean, brute_h_score, brute_head_distance,
                     brute_intra_class, brute_spearman)

SEEDS = (0, 1, 2)

EMITTED: list = []  # drained by the terminal-summary hook in conftest


def emit(num: int, name: str, ok: bool, detail: str = "") -> None:
    tail = f" ({detail})" if detail else ""
    line = f"ACCEPTANCE {num:>2} {name}: {'PASS' if ok else 'FAIL'}{tail}"
    EMITTED.append(line)
    print(line, flush=True)  # also inline when capture is off


# ------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def bundles():
    cfg = data.BenchmarkConfig()
    return {seed: data.generate_benchmark(cfg, seed=seed) for seed in SEEDS}


@pytest.fixture(scope="session")
def runs(bundles):
    """Default-config runs shared by criteria 7 and 8."""
    out = {}
    for seed in SEEDS:
        for variant in ("lpft", "no_hr", "no_fr", "rpf"):
            cfg = train.TrainConfig(variant=variant, seed=seed)
            out[(variant, seed)] = train.run_experiment(bundles[seed], cfg)
        lam = train.TrainConfig(variant="rpf", seed=seed, lambda_hr=1.0)
        out[("rpf_lam1", seed)] = train.run_experiment(bundles[seed], lam)
    return out


def small_state(seed=0, n_classes=6, in_dim=6, hidden=(8, 6)):
    f = nn.init_mlp(in_dim, hidden, seed, activation="tanh")
    f0 = nn.init_mlp(in_dim, hidden, seed + 100, activation="tanh")
    h = nn.init_head(n_classes, f.feature_dim, seed)
    state = nn.ModelState(f=f, h=h, f0=f0.frozen_copy())
    rng = substream(seed, "acceptance", "batch")
    x = rng.normal(size=(12, in_dim))
    y = np.arange(12) % n_classes
    pairs = [(x, y)]
    bank = compute_prototypes(state.f0, pairs, n_classes)
    return state, x, y, bank


# ------------------------------------------------------------ criterion 1

def test_criterion_01_gradient_correctness():
    t0 = time.time()
    state, x, y, bank = small_state()
    n_params = state.f.num_params + state.h.weight.size + state.h.bias.size
    assert n_params <= 1000

    worst = 0.0
    # probe loss: head-only CE on frozen features
    feats = nn.mlp_forward(state.f0, x)
    logits = nn.head_forward(state.h, feats)
    d_w, d_b, _ = nn.head_backward(state.h, feats,
                                   nn.softmax_ce_grad(logits, y))
    step = 1e-5
    for arr, grad in ((state.h.weight, d_w), (state.h.bias, d_b)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = nn.cross_entropy(nn.head_forward(state.h, feats), y)
            arr[idx] = orig - step
            lo = nn.cross_entropy(nn.head_forward(state.h, feats), y)
            arr[idx] = orig
            fd = (hi - lo) / (2 * step)
            worst = max(worst, losses_rel_err(float(grad[idx]), fd))

    cases = {
        "lpft": TermWeights(),
        "fr": TermWeights(ce=0.0, fr=1.0),
        "hr": TermWeights(ce=0.0, hr=1.0),
        "hr_f": TermWeights(ce=0.0, hr=1.0, hr_on_current=True),
        "ent_min": TermWeights(ce=0.0, hr=1.0, hr_sign=-1.0),
        "total": resolve_terms(train.TrainConfig(variant="rpf").loss_spec()),
    }
    for weights in cases.values():
        worst = max(worst, finite_difference_check(state, x, y, weights, bank))
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    emit(1, "gradient-correctness", ok,
         f"max_rel_err={worst:.3e}, {elapsed:.2f}s")
    assert worst < 1e-4
    assert elapsed < 10.0


def losses_rel_err(a: float, b: float) -> float:
    from rpf.losses import relative_error
    return relative_error(a, b)


# ------------------------------------------------------------ criterion 2

def test_criterion_02_routing_exactness():
    state, x, y, bank = small_state()
    _, hr_only, _ = loss_and_grads(state, x, y,
                                   TermWeights(ce=0.0, hr=1.0), bank)
    _, fr_only, _ = loss_and_grads(state, x, y,
                                   TermWeights(ce=0.0, fr=1.0), bank)
    hr_to_f = max(float(np.abs(g).max()) for g in
                  hr_only.f_weights + hr_only.f_biases)
    fr_to_h = max(float(np.abs(fr_only.h_weight).max()),
                  float(np.abs(fr_only.h_bias).max()))
    ok = hr_to_f == 0.0 and fr_to_h == 0.0
    emit(2, "routing-exactness", ok,
         f"hr->f={hr_to_f!r}, fr->h={fr_to_h!r}")
    assert hr_to_f == 0.0
    assert fr_to_h == 0.0


# ------------------------------------------------------------ criterion 3

def test_criterion_03_frozen_state_integrity():
    bundle = data.generate_benchmark(data.BenchmarkConfig(
        samples_per_class=30, input_dim=8, pretext_styles=2,
        pretext_aux_factor=1, pretext_samples_per_class=10), seed=5)
    cfg = train.TrainConfig(variant="rpf", epochs=5, decay_epoch=4,
                            hidden_dims=(12, 6), pretrain_epochs=3,
                            lp_epochs=3, seed=5)
    split = bundle.class_split
    f0, _ = train.pretrain_f0(bundle.pretext, cfg)
    state = nn.ModelState(f=f0.copy(), h=nn.init_head(
        split.num_known, f0.feature_dim, cfg.seed), f0=f0)
    _, probe_log = train.linear_probe(state, bundle.sources, split, cfg)
    pairs = [(sd.train.X, split.to_head_label(sd.train.y))
             for sd in bundle.sources]
    bank = compute_prototypes(f0, pairs, split.num_known)
    before = (state.f0.checksum(), nn.array_checksum(state.h_lp.weight),
              nn.array_checksum(state.h_lp.bias), bank.checksum())
    train.fine_tune(state, bundle.sources, split, bank, cfg, probe_log)
    after = (state.f0.checksum(), nn.array_checksum(state.h_lp.weight),
             nn.array_checksum(state.h_lp.bias), bank.checksum())
    ok = before == after
    emit(3, "frozen-state-integrity", ok, "f0, probe head, prototype bank")
    assert before == after


# ------------------------------------------------------------ criterion 4

class _FeatureSet:
    def __init__(self, X, y):
        self.X, self.y = X, y


def test_criterion_04_metric_oracles():
    rng = substream(0, "acceptance", "oracles")
    worst = 0.0
    for i in range(100):
        # h-score (include the all-zero corner once)
        a, b = (0.0, 0.0) if i == 0 else tuple(rng.uniform(size=2))
        worst = max(worst, abs(evaluate.h_score(a, b) - brute_h_score(a, b)))

        # spearman (continuous draws, plus an explicitly tied instance)
        n = int(rng.integers(5, 30))
        xs, ys = rng.normal(size=n), rng.normal(size=n)
        if i % 10 == 0:
            xs[1] = xs[0]
            ys[2] = ys[0]
        worst = max(worst, abs(analysis.spearman_rho(xs, ys)
                               - brute_spearman(xs, ys)))

        # domain gap over all source pairs
        cents = {(dom, c): rng.normal(size=5)
                 for dom in range(3) for c in range(4)}
        got = analysis.domain_gap(cents, "source_pairs", target_domain=99)
        expect = brute_domain_gap_mean(cents, [(0, 1), (0, 2), (1, 2)])
        worst = max(worst, abs(got - expect))

        # intra-class distance via an identity extractor
        dim = int(rng.integers(2, 6))
        ident = nn.MlpParams([np.eye(dim)], [np.zeros(dim)], "relu")
        X = rng.normal(size=(20, dim))
        labels = rng.integers(0, 3, size=20)
        got = analysis.intra_class_distance(ident, _FeatureSet(X, labels))
        worst = max(worst, abs(got - brute_intra_class(X.tolist(),
                                                       labels.tolist())))

        # head distance
        ha = nn.HeadParams(rng.normal(size=(4, 6)), rng.normal(size=4))
        hb = nn.HeadParams(rng.normal(size=(4, 6)), rng.normal(size=4))
        got = analysis.head_euclidean_distance(ha, hb)
        worst = max(worst, abs(got - brute_head_distance(
            ha.weight, ha.bias, hb.weight, hb.bias)))
    ok = worst < 1e-10
    emit(4, "metric-oracles", ok, f"max_abs_err={worst:.3e} over 100x5")
    assert worst < 1e-10


# ------------------------------------------------------------ criterion 5

def test_criterion_05_entropy_bounds():
    rng = substream(0, "acceptance", "entropy")
    lo_bound_ok = True
    for _ in range(1000):
        c = int(rng.integers(2, 9))
        b = int(rng.integers(1, 17))
        d = int(rng.integers(2, 7))
        head = nn.HeadParams(rng.normal(scale=rng.uniform(0.1, 8.0),
                                        size=(c, d)),
                             rng.normal(size=c))
        feats = rng.normal(scale=rng.uniform(0.1, 4.0), size=(b, d))
        val = loss_hr(head, feats)
        if not (-np.log(c) - 1e-12 <= val <= 0.0):
            lo_bound_ok = False
            break

    state, x, y, bank = small_state()
    weights = TermWeights(ce=0.0, hr=0.1)
    opt = nn.OptimizerState(learning_rate=0.5, decay_epoch=10 ** 9)

    def mean_entropy() -> float:
        logits = nn.head_forward(state.h, nn.mlp_forward(state.f, x))
        p = nn.softmax(logits)
        return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())

    ents = [mean_entropy()]
    for _ in range(10):
        _, grads, _ = loss_and_grads(state, x, y, weights, bank)
        nn.sgd_step(state, grads, opt)
        ents.append(mean_entropy())
    increasing = all(b > a for a, b in zip(ents, ents[1:]))
    ok = lo_bound_ok and increasing
    emit(5, "entropy-bounds", ok,
         f"1000 draws in [-lnC,0]={lo_bound_ok}, 10 steps rising={increasing}")
    assert lo_bound_ok
    assert increasing


# ------------------------------------------------------------ criterion 6

def test_criterion_06_lpft_equivalence():
    bundle = data.generate_benchmark(data.BenchmarkConfig(
        samples_per_class=30, input_dim=8, pretext_styles=2,
        pretext_aux_factor=1, pretext_samples_per_class=10), seed=6)
    finals = {}
    for key, kwargs in (("lpft", {"variant": "lpft"}),
                        ("zeroed", {"variant": "rpf", "lambda_hr": 0.0,
                                    "lambda_fr": 0.0})):
        cfg = train.TrainConfig(epochs=5, decay_epoch=4, hidden_dims=(12, 6),
                                pretrain_epochs=3, lp_epochs=3, seed=6,
                                **kwargs)
        split = bundle.class_split
        f0, _ = train.pretrain_f0(bundle.pretext, cfg)
        state = nn.ModelState(f=f0.copy(), h=nn.init_head(
            split.num_known, f0.feature_dim, cfg.seed), f0=f0)
        _, probe_log = train.linear_probe(state, bundle.sources, split, cfg)
        pairs = [(sd.train.X, split.to_head_label(sd.train.y))
                 for sd in bundle.sources]
        bank = compute_prototypes(f0, pairs, split.num_known)
        rec = train.fine_tune(state, bundle.sources, split, bank, cfg,
                              probe_log)
        finals[key] = (state.f.checksum(),
                       nn.array_checksum(state.h.weight),
                       nn.array_checksum(state.h.bias),
                       train.metrics_csv_text(rec))
    ok = finals["lpft"] == finals["zeroed"]
    emit(6, "lpft-equivalence", ok, "params and metrics bitwise equal")
    assert finals["lpft"] == finals["zeroed"]


# ------------------------------------------------------------ criterion 7

def test_criterion_07_directional_reproduction(runs):
    t0 = time.time()
    counts = {k: 0 for k in "abcde"}
    for seed in SEEDS:
        _, _, ld = runs[("lpft", seed)]
        lrec = runs[("lpft", seed)][0]
        rrec, _, rd = runs[("rpf", seed)]
        lsel, rsel = lrec.selected, rrec.selected
        counts["a"] += (rsel.l_lpft > lsel.l_lpft
                        and min(lsel.train_acc, rsel.train_acc) >= 0.99)
        counts["b"] += (np.mean(list(rd.feature_drift.values()))
                        < np.mean(list(ld.feature_drift.values())))
        counts["c"] += (np.mean(list(rd.intra_class_distance.values()))
                        < np.mean(list(ld.intra_class_distance.values())))
        counts["d"] += (rd.confidence_entropy["unknown"]["mean_entropy"]
                        > ld.confidence_entropy["unknown"]["mean_entropy"]
                        and rd.confidence_entropy["unknown"]["mean_max_confidence"]
                        < ld.confidence_entropy["unknown"]["mean_max_confidence"])
        counts["e"] += rd.head_distance > ld.head_distance
    ok = all(v >= 2 for v in counts.values())
    detail = " ".join(f"{k}={v}/3" for k, v in counts.items())
    emit(7, "directional-reproduction", ok,
         f"{detail}, {time.time() - t0:.1f}s")
    assert ok, counts


# ------------------------------------------------------------ criterion 8

def test_criterion_08_ablation_ranking(runs):
    means = {}
    for key in ("lpft", "no_hr", "no_fr", "rpf", "rpf_lam1"):
        means[key] = float(np.mean(
            [runs[(key, seed)][1].best_h_score for seed in SEEDS]))
    rivals = max(means["no_hr"], means["no_fr"], means["lpft"])
    rank_ok = means["rpf"] >= rivals - 0.01
    lam_ok = means["rpf_lam1"] < means["rpf"]
    ok = rank_ok and lam_ok
    emit(8, "ablation-ranking", ok,
         f"rpf={means['rpf']:.3f} vs max(others)={rivals:.3f}, "
         f"lam1.0={means['rpf_lam1']:.3f} < lam0.1={means['rpf']:.3f}")
    assert rank_ok, means
    assert lam_ok, means


# ------------------------------------------------------------ criterion 9

def test_criterion_09_protocol_fidelity(runs, bundles):
    # exactly 8 equal-interval thresholds; headline H = best over the sweep
    report = runs[("rpf", 0)][1]
    thresholds = [row.threshold for row in report.rows]
    sweep_ok = (len(thresholds) == 8
                and np.allclose(thresholds, [k / 9 for k in range(1, 9)])
                and report.best_h_score == max(r.h_score for r in report.rows))

    # 10% stratified validation split
    bundle = bundles[0]
    strat_ok = True
    for sd in bundle.sources:
        for c in set(sd.train.y.tolist()) | set(sd.val.y.tolist()):
            n_tr = int((sd.train.y == c).sum())
            n_va = int((sd.val.y == c).sum())
            if n_tr + n_va < 2:
                continue
            want = int(np.floor(0.1 * (n_tr + n_va) + 0.5))
            if n_va != max(1, min(want, n_tr + n_va - 1)):
                strat_ok = False

    # selection: best source-val accuracy, earliest on ties
    select_ok = True
    for seed in SEEDS:
        for variant in ("lpft", "rpf"):
            rec = runs[(variant, seed)][0]
            vals = [log.val_acc for log in rec.epochs]
            if rec.selected_epoch != int(np.argmax(vals)):
                select_ok = False
    ok = sweep_ok and strat_ok and select_ok
    emit(9, "protocol-fidelity", ok,
         f"sweep={sweep_ok} stratified={strat_ok} selection={select_ok}")
    assert sweep_ok
    assert strat_ok
    assert select_ok


# ----------------------------------------------------------- criterion 10

def test_criterion_10_determinism(tmp_path):
    bench = tmp_path / "bench"
    rc = cli.main(["generate", "--seed", "7", "--out", str(bench),
                   "--set", "samples_per_class=20", "--set", "input_dim=6",
                   "--set", "pretext_styles=2", "--set",
                   "pretext_aux_factor=1", "--set",
                   "pretext_samples_per_class=10"])
    assert rc == 0
    fast = ["--set", "epochs=4", "--set", "decay_epoch=3", "--set",
            "hidden_dims=8,4", "--set", "pretrain_epochs=2", "--set",
            "lp_epochs=2"]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["train", "--bench", str(bench), "--variant", "rpf",
                       "--seed", "7", "--out", str(out)] + fast)
        assert rc == 0
        outs.append(out)
    a, b = outs
    same_metrics = ((a / "metrics.csv").read_bytes()
                    == (b / "metrics.csv").read_bytes())
    same_ckpt = ((a / "checkpoint.rpfckpt").read_bytes()
                 == (b / "checkpoint.rpfckpt").read_bytes())
    same_sidecar = ((a / "checkpoint.rpfckpt.json").read_bytes()
                    == (b / "checkpoint.rpfckpt.json").read_bytes())
    ok = same_metrics and same_ckpt and same_sidecar
    emit(10, "determinism", ok,
         f"metrics={same_metrics} checkpoint={same_ckpt} "
         f"sidecar={same_sidecar}")
    assert same_metrics
    assert same_ckpt
    assert same_sidecar
