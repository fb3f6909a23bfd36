"""Acceptance suite: one test per shipped guarantee, one pass/fail line each.

Each test prints `CRITERION <k>: PASS (<headline numbers>)` on success; the
pytest -v line carries the same verdict. Budgets: criterion 1 < 60 s,
criterion 2 < 2 min, criterion 5 < 10 min, criterion 6 < 30 min.
"""
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import fldkit.tensor as T
from fldkit.analysis import (
    SelectionConfig,
    pearson,
    select_indicators,
    shapley_exact,
    shapley_sampled,
    stage1_augmented_names,
    ttest,
)
from fldkit.cli import main as cli_main
from fldkit.cohort import (
    SHIFT_PRESETS,
    GenerationConfig,
    IndicatorSpec,
    RenderConfig,
    generate_cohort,
    read_cohort,
    shift_cohort,
    write_cohort,
)
from fldkit.network import Model, ModelConfig, joint_loss, load_model, save_model
from fldkit.train import (
    Hyperparams,
    auc,
    crossval,
    evaluate,
    metrics_from_counts,
    migrate_eval,
    train,
)

PANEL8 = ("BMI", "TG", "HPT", "HLP", "HDL", "WEIGHT", "DRINK", "MALE")
PANEL3 = ("BMI", "WEIGHT", "MALE")


def _report(k: int, detail: str) -> None:
    print(f"CRITERION {k}: PASS ({detail})")


# --------------------------------------------------------------------------
# 1. Gradient fidelity
# --------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity():
    """Central differences at eps=1e-5 against backprop, sampling coordinates
    of every parameter tensor on a 5-sample joint-loss batch.

    ReLU makes the loss piecewise smooth: a coordinate whose +/-eps stencil
    straddles a kink yields a finite difference that says nothing about the
    gradient. Such coordinates are detected by disagreement between the
    eps and 2*eps estimates and resampled — a genuinely wrong analytic
    gradient gives stable finite differences and cannot hide behind the
    filter."""
    t0 = time.time()
    rng = np.random.default_rng(101)
    config = ModelConfig(
        mode="multimodal", indicators=PANEL3, dropout=0.0, image_size=16
    )
    model = Model.init(config, seed=7)
    model.fit_standardization(
        rng.normal(size=(32, 3)), rng.normal(size=(32, 3))
    )

    images = rng.random((5, 16, 16, 3))
    meta = rng.normal(size=(5, 3))
    labels = rng.integers(0, 2, size=5).astype(np.float64)
    aux = rng.normal(size=(5, 3))

    def loss_value() -> float:
        out = model.forward(images=images, meta_rows=meta, train=False)
        return float(
            joint_loss(out.y_fat, labels, out.y_aux, aux, alpha=0.7).data
        )

    out = model.forward(images=images, meta_rows=meta, train=False)
    loss = joint_loss(out.y_fat, labels, out.y_aux, aux, alpha=0.7)
    for p in model.params.values():
        p.zero_grad()
    loss.backward()

    eps = 1e-5

    def central_diff(flat: np.ndarray, c: int, step: float) -> float:
        keep = flat[c]
        flat[c] = keep + step
        up = loss_value()
        flat[c] = keep - step
        down = loss_value()
        flat[c] = keep
        return (up - down) / (2 * step)

    worst = 0.0
    checked = 0
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        accepted = 0
        need = min(8, flat.size)
        for c in rng.permutation(flat.size)[:40]:
            f1 = central_diff(flat, c, eps)
            f2 = central_diff(flat, c, 2 * eps)
            if abs(f1 - f2) / max(1e-8, abs(f1) + abs(f2)) > 1e-5:
                continue  # stencil straddles a ReLU kink
            rel = abs(grad[c] - f1) / max(1e-8, abs(grad[c]) + abs(f1))
            worst = max(worst, rel)
            accepted += 1
            if accepted >= need:
                break
        assert accepted >= min(4, flat.size), (
            f"{name}: only {accepted} smooth coordinates found"
        )
        checked += accepted
    elapsed = time.time() - t0
    assert worst < 1e-4, f"max relative error {worst:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _report(1, f"max rel err {worst:.2e} over {checked} coords of "
               f"{len(model.params)} tensors, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. Shapley axioms
# --------------------------------------------------------------------------


def _random_value_fn(rng, p):
    """Set function with linear + pairwise terms, a planted symmetric pair,
    and a planted dummy. Accepts a (rows, p) boolean mask matrix."""
    w = rng.normal(size=p)
    M = rng.normal(size=(p, p)) * 0.5
    M = (M + M.T) / 2.0
    np.fill_diagonal(M, 0.0)
    i, j, d = rng.choice(p, size=3, replace=False)
    # make i and j exchangeable
    w[j] = w[i]
    M[[i, j], :] = (M[i, :] + M[j, :]) / 2.0
    M[:, [i, j]] = M[[i, j], :].T
    M[i, j] = M[j, i] = rng.normal()
    # make d irrelevant
    w[d] = 0.0
    M[d, :] = 0.0
    M[:, d] = 0.0
    base = rng.normal()

    def value(masks: np.ndarray) -> np.ndarray:
        m = masks.astype(np.float64)
        return base + m @ w + 0.5 * np.einsum("ri,ij,rj->r", m, M, m)

    return value, (int(i), int(j), int(d))


def _brute_force_shapley(value_fn, p):
    phi = np.zeros(p)
    for perm in itertools.permutations(range(p)):
        mask = np.zeros((1, p), dtype=bool)
        prev = value_fn(mask)[0]
        for f in perm:
            mask[0, f] = True
            cur = value_fn(mask)[0]
            phi[f] += cur - prev
            prev = cur
    return phi / math.factorial(p)


def test_criterion_2_shapley_axioms():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst_sym = worst_eff = worst_dummy = worst_brute = worst_z = 0.0
    for case in range(50):
        p = int(rng.integers(3, 9))
        value, (i, j, d) = _random_value_fn(rng, p)
        phi = shapley_exact(value, p)

        full = value(np.ones((1, p), dtype=bool))[0]
        empty = value(np.zeros((1, p), dtype=bool))[0]
        worst_eff = max(worst_eff, abs(phi.sum() - (full - empty)))
        worst_sym = max(worst_sym, abs(phi[i] - phi[j]))
        worst_dummy = max(worst_dummy, abs(phi[d]))
        if p <= 6:
            worst_brute = max(
                worst_brute, np.max(np.abs(phi - _brute_force_shapley(value, p)))
            )
        sampled, se = shapley_sampled(value, p, n_perm=20_000, seed=case)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(sampled - phi) / se
        worst_z = max(worst_z, float(np.nanmax(z)))

    elapsed = time.time() - t0
    assert worst_eff < 1e-9, f"efficiency residual {worst_eff:.3e}"
    assert worst_sym < 1e-9, f"symmetry residual {worst_sym:.3e}"
    assert worst_dummy < 1e-12, f"dummy residual {worst_dummy:.3e}"
    assert worst_brute < 1e-12, f"brute-force mismatch {worst_brute:.3e}"
    assert worst_z <= 3.0, f"sampled estimate at {worst_z:.2f} standard errors"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    _report(2, f"eff {worst_eff:.1e}, sym {worst_sym:.1e}, dummy {worst_dummy:.1e}, "
               f"brute {worst_brute:.1e}, max {worst_z:.2f} SE, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. Metric oracles
# --------------------------------------------------------------------------


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(8, 120))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = (
            np.sum(pos[:, None] > neg[None, :])
            + 0.5 * np.sum(pos[:, None] == neg[None, :])
        ) / (len(pos) * len(neg))
        worst = max(worst, abs(auc(labels, scores) - pairs))
    assert worst < 1e-12, f"AUC vs pair counting {worst:.3e}"

    r = metrics_from_counts(3, 1, 4, 2, None, 0.5)
    assert r.accuracy == (3 + 4) / 10
    assert r.sensitivity == 3 / (3 + 2)
    assert r.specificity == 4 / (4 + 1)
    assert r.ppv == 3 / (3 + 1)
    assert r.npv == 4 / (4 + 2)

    labels = (rng.random(200) < 0.5).astype(int)
    scores = rng.random(200)
    base = auc(labels, scores)
    for transform in (np.exp, lambda s: s**3 + 5 * s, lambda s: 7 * s - 2):
        assert auc(labels, transform(scores)) == base
    _report(3, f"1000 pair-count instances, worst {worst:.1e}; "
               "count formulas exact; monotone-invariant")


# --------------------------------------------------------------------------
# 4. Pearson / t-test oracles
# --------------------------------------------------------------------------


def test_criterion_4_pearson_ttest_oracles():
    mpmath = pytest.importorskip("mpmath")
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 300))
        x, y = rng.normal(size=n), rng.normal(size=n)
        mx, my = x.mean(), y.mean()
        cov = np.sum((x - mx) * (y - my))
        oracle = cov / np.sqrt(np.sum((x - mx) ** 2) * np.sum((y - my) ** 2))
        worst = max(worst, abs(pearson(x, y) - oracle))
    assert worst < 1e-12, f"pearson vs two-pass oracle {worst:.3e}"

    x, y = rng.normal(size=40), rng.normal(size=40)
    r = pearson(x, y)
    assert pearson(2.5 * x + 1.0, y) == pytest.approx(r, abs=1e-12)
    assert pearson(-2.5 * x + 1.0, y) == pytest.approx(-r, abs=1e-12)

    worst_p = 0.0
    for _ in range(5):
        a = rng.normal(size=int(rng.integers(5, 40)))
        b = rng.normal(loc=0.3, size=int(rng.integers(5, 40)))
        t, p = ttest(a, b)
        # Welch-Satterthwaite df from the definition, then integrate the
        # Student density tail at high precision
        sa, sb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
        df = (sa + sb) ** 2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1))
        density = lambda u: (
            mpmath.gamma((df + 1) / 2)
            / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / 2))
            * (1 + u**2 / df) ** (-(df + 1) / 2)
        )
        tail = mpmath.quad(density, [abs(t), mpmath.inf])
        worst_p = max(worst_p, abs(p - float(2 * tail)))
    assert worst_p < 1e-6, f"t-test p vs integration oracle {worst_p:.3e}"

    same = rng.normal(size=25)
    t, p = ttest(same, same.copy())
    assert t == 0.0 and p == 1.0
    _report(4, f"pearson worst {worst:.1e}; t-test p worst {worst_p:.1e}; "
               "identical groups p=1")


# --------------------------------------------------------------------------
# 5. Selection recovery
# --------------------------------------------------------------------------

PLANTED7 = {"BMI", "WEIGHT", "TG", "HPT", "HLP", "HDL", "MALE"}

PANEL23 = (
    IndicatorSpec(name="BMI", kind="continuous", loading=1.5709, offset=24.0, scale=2.0),
    IndicatorSpec(name="WEIGHT", kind="continuous", loading=1.1934, offset=65.0, scale=8.0),
    IndicatorSpec(name="TG", kind="continuous", loading=0.9, offset=1.7, scale=0.8),
    IndicatorSpec(name="HPT", kind="binary", loading=0.8),
    IndicatorSpec(name="HLP", kind="binary", loading=0.85),
    IndicatorSpec(name="HDL", kind="continuous", loading=-0.8, offset=1.35, scale=0.3),
    IndicatorSpec(name="MALE", kind="binary", loading=0.6040),
    IndicatorSpec(name="SMOKE", kind="binary", loading=0.0),
    IndicatorSpec(name="DRINK", kind="binary", loading=0.0),
) + tuple(
    IndicatorSpec(name=f"N{i:02d}", kind="continuous", loading=0.0) for i in range(14)
)


def test_criterion_5_selection_recovery():
    t0 = time.time()
    hits = 0
    for seed in range(5):
        cohort = generate_cohort(
            GenerationConfig(n=5000, indicators=PANEL23, with_images=False), seed=seed
        )
        names = tuple(stage1_augmented_names(cohort))
        config = ModelConfig(mode="indicator", indicators=names, use_aux=False)
        model, _ = train(cohort, config, Hyperparams(epochs=4, batch_size=32, seed=seed))
        result = select_indicators(cohort, model, SelectionConfig(seed=seed))
        hits += PLANTED7 <= set(result.final8)
    elapsed = time.time() - t0
    assert hits >= 4, f"recovered planted panel in only {hits}/5 seeds"
    assert elapsed < 600.0, f"took {elapsed:.1f}s"
    _report(5, f"{hits}/5 seeds recovered all 7 planted indicators, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 6. End-to-end synthetic learning
# --------------------------------------------------------------------------


def test_criterion_6_end_to_end_learning():
    t0 = time.time()
    cohort = generate_cohort(GenerationConfig(n=676), seed=20210)
    hyper = Hyperparams(epochs=6, batch_size=16, seed=0)
    means = {}
    for key, config in (
        ("multimodal8", ModelConfig(mode="multimodal", indicators=PANEL8)),
        ("metadata8", ModelConfig(mode="metadata", indicators=PANEL8)),
        ("image", ModelConfig(mode="image")),
    ):
        means[key] = crossval(cohort, config, hyper, k=7).mean_metrics["auc"]
    elapsed = time.time() - t0
    assert means["multimodal8"] >= 0.85, f"multimodal8 {means['multimodal8']:.4f}"
    assert means["metadata8"] >= 0.80, f"metadata8 {means['metadata8']:.4f}"
    assert means["image"] >= 0.75, f"image {means['image']:.4f}"
    assert means["multimodal8"] >= means["metadata8"] - 0.01, (
        f"multimodal {means['multimodal8']:.4f} vs metadata {means['metadata8']:.4f}"
    )
    assert elapsed < 1800.0, f"took {elapsed:.1f}s"
    _report(6, f"7-fold AUC mm {means['multimodal8']:.4f} / meta {means['metadata8']:.4f}"
               f" / image {means['image']:.4f}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 7. Auxiliary-task ablation
# --------------------------------------------------------------------------


def test_criterion_7_auxiliary_task_ablation():
    # Reduced image signal: severity-driven skin cues are disabled entirely, so
    # the only label information in a face is the BMI-driven ellipse width,
    # buried under strong pixel noise. In this regime the dense regression
    # supervision of the auxiliary head is what pulls the face coder toward the
    # geometric cue within the short epoch budget.
    t0 = time.time()
    reduced = RenderConfig(
        yellow_shift=0.0, luminance_drop=0.0, melasma_rate=0.0, noise_sd=0.15
    )
    gaps = []
    for seed in (0, 1, 2):
        cohort = generate_cohort(
            GenerationConfig(n=210, image_size=32, render=reduced), seed=700 + seed
        )
        hyper = Hyperparams(epochs=5, batch_size=16, seed=seed)
        with_aux = crossval(
            cohort, ModelConfig(mode="image", image_size=32), hyper, k=7
        ).mean_metrics["auc"]
        without = crossval(
            cohort, ModelConfig(mode="image", image_size=32, use_aux=False), hyper, k=7
        ).mean_metrics["auc"]
        gaps.append(with_aux - without)
    mean_gap = float(np.mean(gaps))
    elapsed = time.time() - t0
    assert min(gaps) > 0.0, f"aux lost at some seed: {[f'{g:+.4f}' for g in gaps]}"
    assert mean_gap >= 0.03, f"aux advantage {mean_gap:+.4f} over 3 seeds"
    _report(7, f"aux - no-aux 7-fold AUC gap {mean_gap:+.4f} over 3 seeds, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 8. Migration
# --------------------------------------------------------------------------


def test_criterion_8_migration(tmp_path):
    t0 = time.time()
    cohort_a = generate_cohort(GenerationConfig(n=676), seed=820)
    train_idx, test_idx = cohort_a.kfold(k=5, seed=0)[0]
    hyper = Hyperparams(epochs=6, batch_size=16, seed=0)

    cohort_b = generate_cohort(GenerationConfig(n=600), seed=822)
    shifted = {}
    for preset in ("year2020", "severe"):
        b = shift_cohort(cohort_b, SHIFT_PRESETS[preset], year_tag=preset)
        write_cohort(b, tmp_path / preset)
        shifted[preset] = read_cohort(tmp_path / preset)

    mm, _ = train(cohort_a, ModelConfig(mode="multimodal", indicators=PANEL8),
                  hyper, train_idx=train_idx)
    held = evaluate(mm, cohort_a, indices=test_idx).auc
    migrated = migrate_eval(mm, shifted["year2020"]).auc
    assert migrated < held, f"migrated {migrated:.4f} vs held-out {held:.4f}"
    assert migrated >= 0.70, f"migrated {migrated:.4f}"

    image, _ = train(cohort_a, ModelConfig(mode="image"), hyper, train_idx=train_idx)
    severe_auc = migrate_eval(image, shifted["severe"]).auc
    assert 0.45 <= severe_auc <= 0.65, f"image-only severe {severe_auc:.4f}"

    meta, _ = train(cohort_a, ModelConfig(mode="metadata", indicators=PANEL8),
                    hyper, train_idx=train_idx)
    on_b = migrate_eval(meta, cohort_b).auc
    on_severe = migrate_eval(meta, shifted["severe"]).auc
    assert abs(on_b - on_severe) <= 0.01, f"metadata moved {abs(on_b - on_severe):.4f}"
    elapsed = time.time() - t0
    _report(8, f"held {held:.4f} -> migrated {migrated:.4f} (>=0.70); "
               f"severe image {severe_auc:.2f}; metadata delta "
               f"{abs(on_b - on_severe):.4f}, {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 9. Determinism & formats
# --------------------------------------------------------------------------


def _tree_bytes(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


def test_criterion_9_determinism_and_formats(tmp_path):
    t0 = time.time()
    # byte-identical cohorts
    for d in ("a", "b"):
        assert cli_main(["generate", "--out", str(tmp_path / d),
                         "--n", "20", "--seed", "11"]) == 0
    tree_a = {k: v for k, v in _tree_bytes(tmp_path / "a").items() if k != "run.json"}
    tree_b = {k: v for k, v in _tree_bytes(tmp_path / "b").items() if k != "run.json"}
    assert tree_a == tree_b

    # byte-identical checkpoints and crossval reports
    fast = tmp_path / "fast.json"
    fast.write_text(json.dumps({"epochs": 2, "batch_size": 8}))
    for d in ("t1", "t2"):
        assert cli_main(["train", "--out", str(tmp_path / d),
                         "--cohort", str(tmp_path / "a"), "--mode", "metadata3",
                         "--seed", "3", "--config", str(fast)]) == 0
    assert ((tmp_path / "t1" / "model.bin").read_bytes()
            == (tmp_path / "t2" / "model.bin").read_bytes())
    for d in ("c1", "c2"):
        assert cli_main(["crossval", "--out", str(tmp_path / d),
                         "--cohort", str(tmp_path / "a"), "--mode", "metadata3",
                         "--k", "3", "--seed", "3", "--config", str(fast)]) == 0
    assert ((tmp_path / "c1" / "crossval.json").read_bytes()
            == (tmp_path / "c2" / "crossval.json").read_bytes())

    # lossless round-trips
    cohort = read_cohort(tmp_path / "a")
    write_cohort(cohort, tmp_path / "rt")
    assert _tree_bytes(tmp_path / "rt") == tree_a
    model = load_model(tmp_path / "t1" / "model.bin")
    save_model(model, tmp_path / "rt.bin")
    assert ((tmp_path / "rt.bin").read_bytes()
            == (tmp_path / "t1" / "model.bin").read_bytes())
    reloaded = load_model(tmp_path / "rt.bin")
    for name in model.params:
        assert np.array_equal(model.params[name].data, reloaded.params[name].data)

    # corrupted inputs fail with the documented exit codes
    bad_ckpt = tmp_path / "bad.bin"
    bad_ckpt.write_bytes(b"not a checkpoint")
    Path(f"{bad_ckpt}.json").write_text("{}")
    assert cli_main(["eval", "--out", str(tmp_path / "x1"),
                     "--cohort", str(tmp_path / "a"),
                     "--checkpoint", str(bad_ckpt)]) == 3
    assert cli_main(["eval", "--out", str(tmp_path / "x2"),
                     "--cohort", str(tmp_path / "a"),
                     "--checkpoint", str(tmp_path / "ghost.bin")]) == 2
    broken = tmp_path / "broken"
    write_cohort(cohort, broken)
    (broken / "metadata.csv").write_text("pid,label\nS1,2\n")
    assert cli_main(["analyze", "--out", str(tmp_path / "x3"),
                     "--cohort", str(broken)]) == 3
    assert cli_main(["generate", "--out", str(tmp_path / "x4"), "--n", "0"]) == 2
    elapsed = time.time() - t0
    _report(9, f"byte-identical artifacts, lossless codecs, exit codes 2/3, "
               f"{elapsed:.1f}s")
