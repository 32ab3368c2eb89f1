"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with  pytest tests/test_acceptance.py -v -s  to see the lines. Expected
values come from independent oracles computed in place: the SVD route for
the spectral penalty, central finite differences for gradients, the
truncated Neumann series for the propagation solve, and hand-computed
constants elsewhere. The end-to-end criterion drives the real CLI for
dataset generation and runs the full BSR+LP+ENT ensemble protocol.
"""

import math
import time

import numpy as np
import pytest

from ftensemble import network as nw
from ftensemble import pipeline as pl
from ftensemble.augment import (
    AugmentParams,
    expand_support,
    flip_h,
    parse_compound_mode,
    resize_bilinear,
    rotate,
    tta_predict,
)
from ftensemble.cli import main as cli_main
from ftensemble.config import ExperimentConfig
from ftensemble.data_io import load_dataset
from ftensemble.ensemble import branch_features, ensemble_predict, make_projection
from ftensemble.episodes import Dataset, evaluate, sample_episode
from ftensemble.labelprop import LPConfig, knn_graph, lp_predict, normalized_laplacian, propagate
from ftensemble.linalg import RngStream, singular_values
from ftensemble.network import loss_bsr, loss_entropy
from ftensemble.synth import SynthSpec, generate


def report(num: int, name: str, elapsed: float, detail: str = "") -> None:
    extra = f"; {detail}" if detail else ""
    print(f"\n[acceptance] criterion {num} ({name}): PASS in {elapsed:.2f}s{extra}")


def fd_gradients(params, cfg, x, y, spec, h=1e-5):
    out = []
    for arr, _ in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = nw.composite_loss(params, cfg, x, y, spec)["total"]
            arr[idx] = orig - h
            down = nw.composite_loss(params, cfg, x, y, spec)["total"]
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def test_criterion_1_frobenius_svd_identity():
    started = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        g = RngStream(1000, trial).generator()
        b = int(g.integers(1, 17))
        m = int(g.integers(2, 17))
        feats = g.normal(size=(b, m)) * float(g.uniform(0.1, 3.0))
        direct = loss_bsr(feats)
        via_svd = float(np.sum(singular_values(feats.T) ** 2))
        worst = max(worst, abs(direct - via_svd) / max(abs(via_svd), 1e-300))
    elapsed = time.perf_counter() - started
    assert worst <= 1e-8
    assert elapsed < 5.0
    report(1, "spectral penalty equals the SVD route on 100 matrices", elapsed,
           f"max relative gap {worst:.2e}")


def test_criterion_2_gradient_oracle():
    started = time.perf_counter()
    worst = 0.0
    n_configs = 0
    # pre-training composite: cross-entropy + lambda * spectral penalty
    for trial, lam in enumerate([0.0, 0.001, 0.1] * 4):
        g = RngStream(2000, trial).generator()
        cfg = nw.BackboneConfig(input_shape=(5,), hidden_widths=(6,), feature_dim=4)
        params = nw.init_params(cfg, 3, g, clf_in_dim=3)
        proj = make_projection(4, RngStream(2001, trial)).matrix
        x = g.normal(size=(4, 5))
        y = g.integers(0, 3, size=4)
        spec = nw.LossSpec(bsr_weight=lam, projection=proj)
        analytic, _ = nw.backward(params, cfg, x, y, spec)
        numeric = fd_gradients(params, cfg, x, y, spec)
        for (a, _), n in zip(analytic.arrays(), numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
        n_configs += 1
    # transductive fine-tuning composite: cross-entropy + beta * entropy
    for trial, beta in enumerate([0.1, 0.0, 0.1, 0.1] * 2):
        g = RngStream(2100, trial).generator()
        cfg = nw.BackboneConfig(input_shape=(6,), hidden_widths=(5,), feature_dim=4)
        params = nw.init_params(cfg, 4, g, clf_in_dim=3)
        proj = make_projection(4, RngStream(2101, trial)).matrix
        x = g.normal(size=(5, 6))
        y = g.integers(0, 4, size=5)
        xq = g.normal(size=(4, 6))
        spec = nw.LossSpec(ent_weight=beta, projection=proj, query_inputs=xq)
        analytic, _ = nw.backward(params, cfg, x, y, spec)
        numeric = fd_gradients(params, cfg, x, y, spec)
        for (a, _), n in zip(analytic.arrays(), numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            worst = max(worst, float((np.abs(a - n) / denom).max()))
        n_configs += 1
    elapsed = time.perf_counter() - started
    assert n_configs >= 20
    assert worst <= 1e-4
    assert elapsed < 60.0
    report(2, f"gradients match finite differences over {n_configs} configs", elapsed,
           f"max relative error {worst:.2e}")


def test_criterion_3_projection_suite():
    started = time.perf_counter()
    worst = 0.0
    by_size: dict[int, list[np.ndarray]] = {}
    count = 0
    for m in (8, 16, 24, 32, 48, 64):
        for trial in range(10 if m == 64 else 8):
            stream = RngStream(3000 + m, trial)
            proj = make_projection(m, stream)
            again = make_projection(m, stream)
            assert np.array_equal(proj.matrix, again.matrix), "not deterministic"
            worst = max(worst, float(np.abs(proj.matrix @ proj.matrix.T - np.eye(m - 1)).max()))
            by_size.setdefault(m, []).append(proj.matrix)
            count += 1
    for mats in by_size.values():
        for i in range(len(mats)):
            for j in range(i + 1, len(mats)):
                assert float(np.abs(mats[i] - mats[j]).max()) > 1e-6, "projections coincide"
    elapsed = time.perf_counter() - started
    assert count >= 50
    assert worst <= 1e-8
    assert elapsed < 10.0
    report(3, f"{count} projections orthonormal, deterministic, distinct", elapsed,
           f"max |EE^T - I| {worst:.2e}")


def test_criterion_4_label_propagation_oracle():
    started = time.perf_counter()
    hand = propagate(
        np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 0.0]]), 0.5
    )
    hand_gap = float(np.abs(hand - np.array([[4.0 / 3.0, 0.0], [2.0 / 3.0, 0.0]])).max())
    assert hand_gap <= 1e-12
    worst = 0.0
    for trial in range(20):
        g = RngStream(4000, trial).generator()
        n = int(g.integers(10, 51))
        feats = g.normal(size=(n, 4))
        laplacian = normalized_laplacian(knn_graph(feats, LPConfig(k=4)))
        scores = g.uniform(size=(n, 5))
        closed = propagate(laplacian, scores, 0.5)
        series = scores.copy()
        term = scores.copy()
        for _ in range(200):
            term = 0.5 * (laplacian @ term)
            series = series + term
        worst = max(worst, float(np.abs(closed - series).max()))
        assert np.array_equal(propagate(laplacian, scores, 0.0), scores), "alpha=0 not exact"
    elapsed = time.perf_counter() - started
    assert worst <= 1e-6
    assert elapsed < 10.0
    report(4, "closed-form propagation matches 200-term Neumann series", elapsed,
           f"hand case {hand_gap:.1e}, max series gap {worst:.2e}")


def test_criterion_5_label_propagation_efficacy():
    started = time.perf_counter()
    g = RngStream(5000, 0).generator()
    cluster_a = g.normal(size=(10, 2)) * 0.1
    cluster_b = g.normal(size=(10, 2)) * 0.1 + 8.0
    feats = np.vstack([cluster_a, cluster_b])
    scores = np.zeros((20, 2))
    scores[0, 0] = 1.0
    scores[10, 1] = 1.0
    preds, fell_back = lp_predict(feats, scores, LPConfig(k=3, conf_fraction=1.0, alpha=0.5))
    truth = np.repeat([0, 1], 10)
    accuracy = float((preds == truth).mean())
    elapsed = time.perf_counter() - started
    assert not fell_back
    assert accuracy >= 0.95
    assert elapsed < 5.0
    report(5, "two-cluster propagation labels the clusters", elapsed,
           f"accuracy {accuracy:.2f} from two seeds")


def test_criterion_6_protocol_arithmetic():
    started = time.perf_counter()
    mean, ci95 = evaluate([0.0, 1.0])
    assert mean == 0.5
    assert abs(ci95 - 1.96 * math.sqrt(0.5) / math.sqrt(2.0)) <= 1e-12  # ~0.98
    cmean, cci = evaluate([0.37] * 600)
    assert abs(cmean - 0.37) <= 1e-12 and cci == 0.0
    g = RngStream(6000, 0).generator()
    target = Dataset(g.normal(size=(250, 4)), np.repeat(np.arange(10), 25), "target")
    episode = sample_episode(target, 5, 5, 15, RngStream(6000, 1).generator())
    assert episode.support_x.shape[0] == 25
    assert episode.query_x.shape[0] == 75
    support_rows = {tuple(row) for row in episode.support_x}
    assert all(tuple(row) not in support_rows for row in episode.query_x)
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0
    report(6, "protocol arithmetic and episode counting", elapsed,
           f"ci95([0,1]) = {ci95:.5f}")


@pytest.fixture(scope="module")
def constructed_experiment(tmp_path_factory):
    """Criterion-7 artifacts: datasets from the CLI generator plus the three
    full BSR+LP+ENT ensemble runs (main, chance control, identical rerun)."""
    root = tmp_path_factory.mktemp("acceptance")
    spec_path = root / "synth.txt"
    spec_path.write_text(
        "\n".join(
            [
                "kind = vector",
                "dim = 16",
                "source_classes = 8",
                "target_classes = 5",
                "source_per_class = 100",
                "target_per_class = 25",
                "noise = 0.85",
                "class_sep = 2.0",
                "shift_scale = 1.1",
                "shift_offset = 0.6",
                "seed = 77",
            ]
        )
    )
    data_dir = root / "data"
    assert cli_main(["gen-synthetic", "--spec", str(spec_path), "--out", str(data_dir)]) == 0
    source = load_dataset(data_dir / "source.fte1", role="source")
    target = load_dataset(data_dir / "target.fte1", role="target")
    cfg = ExperimentConfig(
        bsr=True, lp=True, ent=True, da=False, ensemble=True,
        branches=4, episodes=100, seed=123,
    ).validate()

    started = time.perf_counter()
    main_report = pl.run_experiment(cfg, source, target).report
    main_seconds = time.perf_counter() - started

    g = RngStream(9090, 0).generator()
    shuffled_source = Dataset(source.inputs.copy(), source.labels[g.permutation(source.n_items)], "source")
    shuffled_target = Dataset(target.inputs.copy(), target.labels[g.permutation(target.n_items)], "target")
    control_report = pl.run_experiment(cfg, shuffled_source, shuffled_target).report

    rerun_report = pl.run_experiment(cfg, source, target).report
    return {
        "main": main_report,
        "main_seconds": main_seconds,
        "control": control_report,
        "rerun": rerun_report,
    }


def test_criterion_7_end_to_end_constructed_experiment(constructed_experiment):
    started = time.perf_counter()
    main_report = constructed_experiment["main"]
    main_seconds = constructed_experiment["main_seconds"]

    # (a) the full pipeline fits the desk-scale budget
    assert main_seconds < 600.0

    # (b) mean accuracy beats 5-way chance by at least 10 standard errors
    sigma = main_report.ci95 / 1.96
    assert main_report.mean - 0.2 >= 10.0 * sigma
    assert main_report.mean >= 0.70

    # (c) randomized labels land at chance within 3 standard errors
    control = constructed_experiment["control"]
    control_sigma = max(control.ci95 / 1.96, 1e-9)
    assert abs(control.mean - 0.2) <= 3.0 * control_sigma

    # (d) identical seeds reproduce the report bit for bit
    assert constructed_experiment["rerun"].to_json() == main_report.to_json()

    elapsed = time.perf_counter() - started
    report(
        7,
        "end-to-end BSR+LP+ENT ensemble on constructed cross-domain task",
        main_seconds,
        f"mean {main_report.mean:.3f} +- {main_report.ci95:.3f} over 100 episodes, "
        f"control {control.mean:.3f}, rerun identical",
    )


def test_criterion_8_regularization_effect():
    started = time.perf_counter()
    spec = SynthSpec(dim=12, source_classes=4, target_classes=2,
                     source_per_class=50, target_per_class=21,
                     noise=0.4, class_sep=2.0, seed=31)
    source, _ = generate(spec)
    wins = 0
    for seed in range(5):
        base = dict(branches=1, ensemble=False, pretrain_epochs=25,
                    feature_dim=16, hidden_widths=(32,), seed=seed)
        with_reg, _ = pl.pretrain(source, ExperimentConfig(bsr=True, **base).validate())
        without, _ = pl.pretrain(source, ExperimentConfig(bsr=False, **base).validate())
        probe = source.inputs[:16]
        val_with = loss_bsr(branch_features(with_reg, with_reg.branches[0], probe))
        val_without = loss_bsr(branch_features(without, without.branches[0], probe))
        if val_with < val_without:
            wins += 1
    elapsed = time.perf_counter() - started
    assert wins >= 4
    assert elapsed < 120.0
    report(8, "spectral penalty shrinks the probe-batch penalty", elapsed,
           f"{wins}/5 seeds strictly lower")


def test_criterion_9_entropy_effect():
    started = time.perf_counter()
    spec = SynthSpec(dim=12, source_classes=6, target_classes=5,
                     source_per_class=40, target_per_class=25,
                     noise=0.6, class_sep=2.0, seed=32)
    source, target = generate(spec)
    base = dict(branches=1, ensemble=False, pretrain_epochs=15,
                finetune_epochs=60, feature_dim=16, hidden_widths=(32,), seed=3)
    cfg_ent = ExperimentConfig(ent=True, **base).validate()
    cfg_off = ExperimentConfig(ent=False, **base).validate()
    model, _ = pl.pretrain(source, cfg_off)
    entropies = {"ent": [], "off": []}
    for index in range(10):
        episode = sample_episode(
            target, 5, 5, 15,
            pl.stream_for(base["seed"], pl.PURPOSE_EPISODE, a=index).generator(),
        )
        for key, cfg in (("ent", cfg_ent), ("off", cfg_off)):
            tuned = pl.finetune(model, episode, cfg, index)
            probs = ensemble_predict(tuned, episode.query_x)
            entropies[key].append(loss_entropy(probs))
    mean_ent = float(np.mean(entropies["ent"]))
    mean_off = float(np.mean(entropies["off"]))
    elapsed = time.perf_counter() - started
    assert mean_ent <= mean_off
    assert elapsed < 120.0
    report(9, "entropy term lowers mean query entropy over 10 episodes", elapsed,
           f"{mean_ent:.4f} vs {mean_off:.4f}")


def test_criterion_10_augmentation_suite():
    started = time.perf_counter()
    g = RngStream(10_000, 0).generator()
    img = g.uniform(size=(3, 12, 14))
    assert np.array_equal(flip_h(flip_h(img)), img)
    assert np.array_equal(rotate(img, 0.0), img)
    assert np.abs(resize_bilinear(img, 12, 14) - img).max() <= 1e-6
    imgs = g.uniform(size=(25, 3, 12, 12))
    labels = np.repeat(np.arange(5), 5)
    mode = parse_compound_mode("S+SJHR+SR+SJ+SH")
    expanded, expanded_labels = expand_support(
        imgs, labels, mode, g, AugmentParams(out_size=10)
    )
    assert expanded.shape[0] == 125
    assert np.array_equal(expanded_labels, np.tile(labels, 5))
    outs = iter([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    avg = tta_predict(lambda _: next(outs), img, ("S", "SH"), g, AugmentParams(out_size=10))
    assert np.array_equal(avg, [0.5, 0.5])
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0
    report(10, "augmentation identities, counts, and TTA averaging", elapsed)
