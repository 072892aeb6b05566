"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

The reference synthetic dataset is the generator's default configuration
(4 classes, 2 modes per class, 60 samples per mode, 8x7x7 feature blocks,
seed 0); the comparison variant underrepresents the second mode (60/20).
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mbrbf.cli import resolve_settings, run_cli
from mbrbf.config import read_flat
from mbrbf.data import DataBundle, SynthConfig, gen_bimodal_synth
from mbrbf.layers import (
    DenseReLU,
    RBFBranch,
    ReduceConv,
    SoftmaxClassifier,
    dense_relu_backward,
    dense_relu_forward,
    grad_check,
    rbf_backward,
    rbf_forward,
    reduce_conv_backward,
    reduce_conv_forward,
    softmax_cross_entropy,
)
from mbrbf.model import (
    ModelConfig,
    load_checkpoint,
    model_backward_batch,
    model_build,
    model_forward_batch,
    model_loss_batch,
    save_checkpoint,
)
from mbrbf.pgm import export_centers
from mbrbf.tensorio import flatten
from mbrbf.train import (
    TrainConfig,
    ablation_grid,
    aggregate_grid,
    compare_heads,
    compare_medians,
    evaluate,
    train,
)

REPO = Path(__file__).resolve().parent.parent
REFERENCE_CFG = REPO / "configs" / "reference-train.cfg"

REF_MODEL = ModelConfig(
    head_kind="rbf",
    branches=8,
    units_per_branch=4,
    classes=4,
    sigma_init=0.0528,
    train_sigma=True,
    center_low=-0.035,
    center_high=0.035,
    seed=0,
)
REF_TRAIN = TrainConfig(epochs=100, batch_size=32, optimizer="adam", lr=2e-3, seed=0)


def report(criterion: int, ok: bool, detail: str):
    print(f"[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def reference_bundle(tmp_path_factory):
    manifest = gen_bimodal_synth(SynthConfig(), tmp_path_factory.mktemp("ref_data"))
    return DataBundle.from_manifest(manifest)


@pytest.fixture(scope="module")
def minority_bundle(tmp_path_factory):
    cfg = SynthConfig(samples_per_mode=(60, 20))
    manifest = gen_bimodal_synth(cfg, tmp_path_factory.mktemp("cmp_data"))
    return DataBundle.from_manifest(manifest)


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory, reference_bundle):
    """One CLI training run on the reference dataset with the shipped config."""
    out = tmp_path_factory.mktemp("ref_run")
    start = time.perf_counter()
    code = run_cli(
        [
            "train",
            "--data",
            str(reference_bundle.manifest.base_dir),
            "--out",
            str(out),
            "--config",
            str(REFERENCE_CFG),
            "report_every=0",
        ]
    )
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed


def test_criterion_1_gradient_fidelity():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)

        # RBF branch
        br = RBFBranch(
            centers=rng.standard_normal((3, 5)),
            log_radii=np.log(rng.uniform(0.5, 2.0, size=3)),
        )
        x = rng.standard_normal(5)
        coeff = rng.standard_normal(3)
        gx, gc, gr = rbf_backward(br, x, coeff)
        worst = max(
            worst,
            grad_check(
                lambda: float(coeff @ rbf_forward(br, x)),
                [x, br.centers, br.log_radii],
                [gx, gc, gr],
                eps=1e-6,
            ),
        )

        # reduce conv
        rc = ReduceConv(weights=rng.standard_normal((2, 4)), bias=rng.standard_normal(2))
        fmap = rng.standard_normal((4, 3, 3))
        co = rng.standard_normal((2, 3, 3))
        gf, gw, gb = reduce_conv_backward(rc, fmap, co)
        worst = max(
            worst,
            grad_check(
                lambda: float((co * reduce_conv_forward(rc, fmap)).sum()),
                [fmap, rc.weights, rc.bias],
                [gf, gw, gb],
                eps=1e-6,
            ),
        )

        # dense + ReLU, nudged off its kinks
        dl = DenseReLU(weights=rng.standard_normal((3, 4)), bias=rng.standard_normal(3))
        xd = rng.standard_normal(4)
        pre = dl.weights @ xd + dl.bias
        dl.bias = dl.bias + np.where(np.abs(pre) < 1e-3, 0.01 * np.sign(pre + 0.5), 0.0)
        cd = rng.standard_normal(3)
        gxd, gwd, gbd = dense_relu_backward(dl, xd, cd)
        worst = max(
            worst,
            grad_check(
                lambda: float(cd @ dense_relu_forward(dl, xd)),
                [xd, dl.weights, dl.bias],
                [gxd, gwd, gbd],
                eps=1e-6,
            ),
        )

        # softmax cross-entropy through an identity classifier
        logits = rng.standard_normal(5)
        label = int(rng.integers(5))
        clf = SoftmaxClassifier(weights=np.eye(5), bias=np.zeros(5))
        _, _, gl = softmax_cross_entropy(clf, logits, label)
        worst = max(
            worst,
            grad_check(
                lambda: softmax_cross_entropy(clf, logits, label)[0],
                [logits],
                [gl],
                eps=1e-6,
            ),
        )

        # composed MB-RBF head at tiny sizes (C=4, H=W=3, B=2, U=2, K=3);
        # fresh stream so the instance stays in the well-conditioned regime
        rng_head = np.random.default_rng(seed)
        cfg = ModelConfig(
            head_kind="rbf",
            branches=2,
            units_per_branch=2,
            classes=3,
            sigma_init=1.2,
            center_low=-0.6,
            center_high=0.6,
            seed=seed,
        )
        m = model_build(cfg, (4, 3, 3))
        xin = rng_head.standard_normal((1, 4, 3, 3)) * 0.6
        lab = np.asarray([int(rng_head.integers(3))])

        def loss():
            _, c = model_forward_batch(m, xin)
            return float(model_loss_batch(c, lab)[0])

        _, cache = model_forward_batch(m, xin)
        grads = model_backward_batch(m, cache, lab)
        params = m.named_parameters()
        names = sorted(grads)
        worst = max(
            worst,
            grad_check(loss, [params[n] for n in names], [grads[n] for n in names], eps=1e-6),
        )
    report(1, worst < 1e-5, f"max relative gradient error {worst:.2e} < 1e-5 over 10 seeds")


def test_criterion_2_rbf_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        units = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 9))
        centers = rng.standard_normal((units, dim))
        log_radii = np.log(rng.uniform(0.4, 2.5, size=units))
        x = rng.standard_normal(dim)
        br = RBFBranch(centers=centers, log_radii=log_radii)
        fast = rbf_forward(br, x)
        naive = np.empty(units)
        for i in range(units):
            sq = 0.0
            for j in range(dim):
                diff = x[j] - centers[i, j]
                sq += diff * diff
            sigma = math.exp(log_radii[i])
            naive[i] = math.exp(-sq / (2.0 * sigma * sigma))
        worst = max(worst, float(np.max(np.abs(fast - naive))))
    report(2, worst <= 1e-12, f"max |vectorized - naive| = {worst:.2e} <= 1e-12 on 1000 instances")


def test_criterion_3_topology_shapes():
    cfg = ModelConfig(branches=16, units_per_branch=4, classes=7, seed=0)
    m = model_build(cfg, (512, 7, 7))
    rng = np.random.default_rng(0)
    block = rng.standard_normal((512, 7, 7))
    raw_len = flatten(block).shape[0]
    _, cache = model_forward_batch(m, block[None])
    branch_len = cache.branch_inputs[0].shape[1]
    width = cache.concat.shape[1]
    ok = raw_len == 25088 and branch_len == 49 and width == 16 * 4
    report(
        3,
        ok,
        f"raw block flattens to {raw_len} (=25088), per-branch length {branch_len} (=49), "
        f"concat width {width} (=B*U)",
    )


def test_criterion_4_branch_permutation_equivariance():
    cfg = ModelConfig(
        branches=4, units_per_branch=3, classes=5, sigma_init=0.7,
        center_low=-1.0, center_high=1.0, seed=4,
    )
    m = model_build(cfg, (6, 3, 3))
    perm = [2, 0, 3, 1]
    u = cfg.units_per_branch
    m2 = model_build(cfg, (6, 3, 3))
    m2.branches = [m.branches[p] for p in perm]
    m2.set_parameter("reduce.weights", m.reduce.weights[perm])
    m2.set_parameter("reduce.bias", m.reduce.bias[perm])
    w = m.classifier.weights.reshape(cfg.classes, cfg.branches, u)
    m2.set_parameter("classifier.weights", w[:, perm, :].reshape(cfg.classes, -1))
    m2.set_parameter("classifier.bias", m.classifier.bias.copy())
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((1, 6, 3, 3))
        p1, _ = model_forward_batch(m, x)
        p2, _ = model_forward_batch(m2, x)
        worst = max(worst, float(np.max(np.abs(p1 - p2))))
    report(4, worst <= 1e-12, f"max probability shift under branch permutation {worst:.2e} <= 1e-12")


def test_criterion_5_frozen_backbone_invariant(tmp_path):
    from mbrbf.backbone import BackboneConfig, backbone_init

    cfg = SynthConfig(
        classes=2, modes_per_class=2, samples_per_mode=10, feature_shape=(1, 8, 8),
        mode_separation=2.0, noise_scale=0.05, seed=5,
    )
    bundle = DataBundle.from_manifest(gen_bimodal_synth(cfg, tmp_path / "imgs"))
    bcfg = BackboneConfig(input_shape=(1, 8, 8), conv_blocks=((3, 3, 2), (4, 3, 2)), frozen=True, seed=0)
    bb = backbone_init(bcfg)
    mc = ModelConfig(
        branches=2, units_per_branch=2, classes=2, sigma_init=0.5,
        center_low=-0.5, center_high=0.5, feature_source="backbone", seed=0,
    )
    model = model_build(mc, bcfg.output_shape(), backbone=bb)
    before = {k: v.copy() for k, v in bb.named_parameters().items()}
    train(model, bundle, TrainConfig(epochs=5, batch_size=8, seed=0))
    changed = [k for k, v in bb.named_parameters().items() if not np.array_equal(before[k], v)]
    report(5, not changed, f"5-epoch run left all {len(before)} backbone tensors bitwise unchanged")


def test_criterion_6_protocol_fidelity(reference_run):
    out, _ = reference_run
    defaults = resolve_settings(None, [])
    record = read_flat(out / "provenance.txt")
    ok = (
        defaults["optimizer"] == "adam"
        and defaults["batch_size"] == 32
        and defaults["epochs"] == 100
        and defaults["sigma_init"] == 0.0528
        and record["optimizer"] == "adam"
        and record["batch_size"] == "32"
        and record["epochs"] == "100"
        and record["sigma_init"] == "0.0528"
    )
    report(6, ok, "defaults and run provenance record adam / batch 32 / 100 epochs / sigma 0.0528")


def test_criterion_7_desk_scale_learning(reference_run):
    out, elapsed = reference_run
    record = read_flat(out / "provenance.txt")
    with open(out / "history.csv") as f:
        n_epochs = sum(1 for _ in f) - 1
    # final test accuracy comes from the best-validation checkpoint
    import csv as _csv

    with open(out / "confusion.csv", newline="") as f:
        rows = list(_csv.reader(f))
    counts = np.asarray([[int(v) for v in row] for row in rows[1:]])
    acc = np.trace(counts) / counts.sum()
    ok = acc >= 0.90 and n_epochs <= 100 and elapsed < 300.0
    report(
        7,
        ok,
        f"MB-RBF (8 branches, 4 units) reached test accuracy {acc:.3f} >= 0.90 "
        f"in {n_epochs} epochs, {elapsed:.1f}s < 300s",
    )
    assert record["branches"] == "8" and record["units"] == "4"


def test_criterion_8_locality_benefit(minority_bundle):
    rows = compare_heads(minority_bundle, REF_MODEL, REF_TRAIN, seeds=list(range(10)))
    med = {m["head"]: m for m in compare_medians(rows)}
    acc_ok = med["rbf"]["test_acc"] >= med["dense"]["test_acc"]
    minority_ok = med["rbf"]["acc_mode1"] >= med["dense"]["acc_mode1"]
    report(
        8,
        acc_ok and minority_ok,
        f"median test acc rbf {med['rbf']['test_acc']:.3f} >= dense {med['dense']['test_acc']:.3f}; "
        f"minority-mode acc rbf {med['rbf']['acc_mode1']:.3f} >= dense {med['dense']['acc_mode1']:.3f}",
    )


def test_criterion_9_confusion_accounting(reference_bundle):
    model = model_build(REF_MODEL, reference_bundle.feature_shape())
    train(model, reference_bundle, replace(REF_TRAIN, epochs=15))
    acc, cm = evaluate(model, reference_bundle, "test")
    _, y, _ = reference_bundle.split_arrays("test")
    rows_ok = all(cm.row_sums()[k] == int((y == k).sum()) for k in range(4))
    trace_ok = acc == np.trace(cm.counts) / cm.total()
    acc2, cm2 = evaluate(model, reference_bundle, "test")
    repeat_ok = acc == acc2 and np.array_equal(cm.counts, cm2.counts)
    report(
        9,
        rows_ok and trace_ok and repeat_ok,
        "row sums match class counts, trace/total equals accuracy, re-evaluation bit-identical",
    )


def test_criterion_10_ablation_harness(reference_bundle):
    tc = replace(REF_TRAIN, epochs=60)
    rows = ablation_grid(
        reference_bundle, [1, 2, 4, 8, 16], [1, 2, 4, 8, 16], [0, 1], REF_MODEL, tc
    )
    agg = aggregate_grid(rows)
    finished = [r for r in agg if not math.isnan(r["mean"])]
    base = next(r for r in agg if r["branches"] == 1 and r["units"] == 1)
    best = max(finished, key=lambda r: r["mean"])
    ok = len(agg) == 25 and len(finished) == 25 and best["mean"] >= base["mean"]
    report(
        10,
        ok,
        f"5x5 grid completed with {len(agg)} aggregate rows; best cell "
        f"({best['branches']},{best['units']})={best['mean']:.3f} >= (1,1)={base['mean']:.3f}",
    )


def test_criterion_11_export_fidelity(tmp_path):
    cfg = ModelConfig(
        branches=4, units_per_branch=8, classes=7, sigma_init=0.0528, seed=11
    )
    model = model_build(cfg, (16, 7, 7))
    ckpt = tmp_path / "ckpt"
    save_checkpoint(model, ckpt)
    out = tmp_path / "centers"
    written = export_centers(ckpt, out)
    files = sorted(out.glob("*.pgm"))
    header = b"P5\n7 7\n255\n"
    pgm_ok = (
        len(written) == 32
        and len(files) == 32
        and all(f.read_bytes().startswith(header) for f in files)
        and all(len(f.read_bytes()) == len(header) + 49 for f in files)
    )
    back = load_checkpoint(ckpt)
    rng = np.random.default_rng(111)
    forward_ok = True
    for _ in range(100):
        x = rng.standard_normal((1, 16, 7, 7))
        p1, _ = model_forward_batch(model, x)
        p2, _ = model_forward_batch(back, x)
        if not np.array_equal(p1, p2):
            forward_ok = False
            break
    report(
        11,
        pgm_ok and forward_ok,
        "32 PGM files of 7x7 pixels; reloaded checkpoint forward bit-identical on 100 inputs",
    )
