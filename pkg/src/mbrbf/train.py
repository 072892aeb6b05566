"""Training loop, evaluation, ablation grid, and head comparison.

Gradients are averaged over each batch in a fixed sample order, the
optimizer steps once per batch, and the checkpoint kept is the epoch with
the best validation accuracy (ties to the earliest epoch).  Everything is
deterministic given (config, seed, data).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Backbone, backbone_backward_batch, backbone_forward_batch
from .data import (
    DataBundle,
    DatasetManifest,
    batch_index_iter,
    split_dataset,
)
from .errors import ConfigError, DivergenceError, EmptySplitError
from .layers import SoftmaxClassifier, linear_backward, softmax_cross_entropy
from .model import (
    MBModel,
    ModelConfig,
    model_backward_batch,
    model_forward_batch,
    model_loss_batch,
    model_build,
)
from .optim import AdamHyper, AdamState, adam_step, init_adam, sgd_step

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    report_every: int = 0  # progress cadence in epochs; 0 = silent

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")

    def adam_hyper(self) -> AdamHyper:
        return AdamHyper(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64; rows true, columns predicted

    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total()

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class RunHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    test_acc: float = math.nan
    best_epoch: int = -1
    wall_time_s: float = 0.0


def _as_bundle(data) -> DataBundle:
    if isinstance(data, DataBundle):
        return data
    if isinstance(data, DatasetManifest):
        return DataBundle.from_manifest(data)
    raise ConfigError(f"expected a DatasetManifest or DataBundle, got {type(data)!r}")


def _predict_batched(model: MBModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        probs, _ = model_forward_batch(model, x[start : start + chunk])
        preds[start : start + chunk] = probs.argmax(axis=1)
    return preds


def _split_accuracy(model: MBModel, x: np.ndarray, y: np.ndarray) -> float:
    return float((_predict_batched(model, x) == y).mean())


def train(model: MBModel, data, tc: TrainConfig, log=None) -> RunHistory:
    """Train in place; the model ends at the best-validation-epoch parameters.

    ``data`` is a manifest or a preloaded :class:`DataBundle`.  If the val
    split is empty, training accuracy is used to pick the best epoch.
    """
    bundle = _as_bundle(data)
    x_train, y_train, _ = bundle.split_arrays("train")
    try:
        x_val, y_val, _ = bundle.split_arrays("val")
    except EmptySplitError:
        x_val = y_val = None
    start = time.perf_counter()
    hist = RunHistory()
    state: AdamState | None = None
    if tc.optimizer == "adam":
        state = init_adam(model.trainable_parameters(), tc.adam_hyper())
    best_acc = -math.inf
    best_params: dict[str, np.ndarray] | None = None
    n = x_train.shape[0]
    for epoch in range(tc.epochs):
        loss_sum = 0.0
        correct = 0
        for bi, idx in enumerate(
            batch_index_iter(n, tc.batch_size, [tc.seed, epoch], shuffle=True)
        ):
            xb, yb = x_train[idx], y_train[idx]
            # divergence is detected by the explicit finite checks below
            with np.errstate(over="ignore", invalid="ignore"):
                probs, cache = model_forward_batch(model, xb)
                losses = model_loss_batch(cache, yb)
            if not np.all(np.isfinite(losses)):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {bi}",
                    epoch=epoch,
                    batch=bi,
                )
            grads = model_backward_batch(model, cache, yb)
            params = model.trainable_parameters()
            try:
                if state is not None:
                    updated = adam_step(params, grads, state)
                else:
                    updated = sgd_step(params, grads, tc.lr)
            except DivergenceError as e:
                raise DivergenceError(str(e), epoch=epoch, batch=bi) from e
            model.set_parameters(updated)
            loss_sum += float(losses.sum())
            correct += int((probs.argmax(axis=1) == yb).sum())
        train_loss = loss_sum / n
        train_acc = correct / n
        val_acc = _split_accuracy(model, x_val, y_val) if x_val is not None else train_acc
        hist.train_loss.append(train_loss)
        hist.train_acc.append(train_acc)
        hist.val_acc.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            hist.best_epoch = epoch
            best_params = model.snapshot(model.trainable_names())
        if log and tc.report_every and (epoch + 1) % tc.report_every == 0:
            log(
                f"epoch {epoch + 1}/{tc.epochs}: loss {train_loss:.4f} "
                f"train_acc {train_acc:.3f} val_acc {val_acc:.3f}"
            )
    if best_params is not None:
        model.set_parameters(best_params)
    hist.test_acc = evaluate(model, bundle, "test")[0]
    hist.wall_time_s = time.perf_counter() - start
    return hist


def evaluate(model: MBModel, data, split: str) -> tuple[float, ConfusionMatrix]:
    """Top-1 accuracy and confusion matrix (rows true, columns predicted)."""
    bundle = _as_bundle(data)
    x, y, _ = bundle.split_arrays(split)
    preds = _predict_batched(model, x)
    k = model.config.classes
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, preds), 1)
    cm = ConfusionMatrix(counts=counts)
    return cm.accuracy(), cm


def accuracy_by_source(model: MBModel, data, split: str) -> dict[str, float]:
    """Per-sub-population accuracy on one split, keyed by source tag."""
    bundle = _as_bundle(data)
    x, y, sources = bundle.split_arrays(split)
    preds = _predict_batched(model, x)
    out: dict[str, float] = {}
    for tag in sorted(set(sources)):
        mask = np.asarray([s == tag for s in sources])
        out[tag] = float((preds[mask] == y[mask]).mean())
    return out


def _resplit(bundle: DataBundle, seed: int, pin_splits: bool) -> DataBundle:
    if pin_splits:
        return bundle
    manifest = split_dataset(bundle.manifest.records, seed)
    manifest.base_dir = bundle.manifest.base_dir
    return bundle.with_manifest(manifest)


def ablation_grid(
    data,
    branch_values: list[int],
    unit_values: list[int],
    seeds: list[int],
    base_cfg: ModelConfig,
    tc: TrainConfig,
    pin_splits: bool = False,
    log=None,
) -> list[dict]:
    """Train every (branches, units, seed) cell; a diverged cell records NaN.

    Returns rows ``{branches, units, seed, test_acc}`` in deterministic cell
    order.
    """
    if not branch_values or not unit_values or not seeds:
        raise ConfigError("branch_values, unit_values, and seeds must be nonempty")
    bundle = _as_bundle(data)
    rows = []
    for b in branch_values:
        for u in unit_values:
            for seed in seeds:
                run = _resplit(bundle, seed, pin_splits)
                cfg = replace(
                    base_cfg,
                    branches=b,
                    units_per_branch=u,
                    seed=seed,
                    classes=run.manifest.classes,
                )
                model = model_build(cfg, run.feature_shape())
                try:
                    hist = train(model, run, replace(tc, seed=seed))
                    acc = hist.test_acc
                except DivergenceError as e:
                    if log:
                        log(f"cell ({b},{u}) seed {seed} diverged: {e}")
                    acc = math.nan
                rows.append({"branches": b, "units": u, "seed": seed, "test_acc": acc})
                if log:
                    shown = "failed" if math.isnan(acc) else f"{acc:.3f}"
                    log(f"grid cell branches={b} units={u} seed={seed}: {shown}")
    return rows


def aggregate_grid(rows: list[dict]) -> list[dict]:
    """Mean/std of test accuracy per (branches, units) over finished seeds."""
    cells: dict[tuple[int, int], list[float]] = {}
    order: list[tuple[int, int]] = []
    for r in rows:
        key = (r["branches"], r["units"])
        if key not in cells:
            cells[key] = []
            order.append(key)
        if not math.isnan(r["test_acc"]):
            cells[key].append(r["test_acc"])
    agg = []
    for key in order:
        accs = cells[key]
        agg.append(
            {
                "branches": key[0],
                "units": key[1],
                "mean": float(np.mean(accs)) if accs else math.nan,
                "std": float(np.std(accs)) if accs else math.nan,
            }
        )
    return agg


def compare_heads(
    data,
    base_cfg: ModelConfig,
    tc: TrainConfig,
    seeds: list[int],
    pin_splits: bool = False,
    log=None,
) -> list[dict]:
    """Train matched RBF and dense heads per seed and report test accuracy.

    Both heads share the seed, so they start from identical reduction and
    classifier parameters; per-source accuracies expose how each head
    treats every sub-population.  Rows:
    ``{head, seed, test_acc, source accuracies...}``.
    """
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    bundle = _as_bundle(data)
    rows = []
    for seed in seeds:
        run = _resplit(bundle, seed, pin_splits)
        for head in ("rbf", "dense"):
            cfg = replace(base_cfg, head_kind=head, seed=seed, classes=run.manifest.classes)
            model = model_build(cfg, run.feature_shape())
            hist = train(model, run, replace(tc, seed=seed))
            row = {"head": head, "seed": seed, "test_acc": hist.test_acc}
            for tag, acc in accuracy_by_source(model, run, "test").items():
                row[f"acc_{tag}"] = acc
            rows.append(row)
            if log:
                log(f"head={head} seed={seed}: test_acc {hist.test_acc:.3f}")
    return rows


def compare_medians(rows: list[dict]) -> list[dict]:
    """Per-head medians of every accuracy column in the comparison rows."""
    heads = []
    for r in rows:
        if r["head"] not in heads:
            heads.append(r["head"])
    out = []
    for head in heads:
        hrows = [r for r in rows if r["head"] == head]
        keys = [k for k in hrows[0] if k not in ("head", "seed")]
        med = {"head": head, "seed": "median"}
        for k in keys:
            med[k] = float(np.median([r[k] for r in hrows]))
        out.append(med)
    return out


# ---------------------------------------------------------------------------
# Backbone pretraining: backbone + plain softmax head, then freeze
# ---------------------------------------------------------------------------


def pretrain_backbone(bb: Backbone, data, tc: TrainConfig, log=None) -> list[float]:
    """Fit backbone + flat softmax head on the train split; returns epoch losses.

    This mimics the pretrained-then-frozen regime: the returned backbone
    weights are meant to be saved and reused frozen under the multi-branch
    head.  The temporary softmax head is discarded.
    """
    bundle = _as_bundle(data)
    x_train, y_train, _ = bundle.split_arrays("train")
    c, h, w = bb.config.output_shape()
    feat_dim = c * h * w
    classes = bundle.manifest.classes
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 17]))
    limit = 1.0 / np.sqrt(feat_dim)
    clf = SoftmaxClassifier(
        weights=rng.uniform(-limit, limit, size=(classes, feat_dim)),
        bias=np.zeros(classes),
    )
    params = dict(bb.named_parameters())
    params["pretrain.weights"] = clf.weights
    params["pretrain.bias"] = clf.bias
    state = init_adam(params, tc.adam_hyper()) if tc.optimizer == "adam" else None
    n = x_train.shape[0]
    epoch_losses = []
    for epoch in range(tc.epochs):
        loss_sum = 0.0
        for bi, idx in enumerate(
            batch_index_iter(n, tc.batch_size, [tc.seed, epoch], shuffle=True)
        ):
            xb, yb = x_train[idx], y_train[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                feats, cache = backbone_forward_batch(bb, xb, want_cache=True)
                flat = feats.reshape(len(idx), -1)
                losses, _, grad_logits = softmax_cross_entropy(clf, flat, yb)
            if not np.all(np.isfinite(losses)):
                raise DivergenceError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {bi}",
                    epoch=epoch,
                    batch=bi,
                )
            grad_logits = grad_logits / len(idx)
            grad_flat, gw, gb = linear_backward(clf.weights, flat, grad_logits)
            grads = backbone_backward_batch(bb, cache, grad_flat.reshape(feats.shape))
            grads["pretrain.weights"] = gw
            grads["pretrain.bias"] = gb
            params = dict(bb.named_parameters())
            params["pretrain.weights"] = clf.weights
            params["pretrain.bias"] = clf.bias
            updated = (
                adam_step(params, grads, state) if state is not None else sgd_step(params, grads, tc.lr)
            )
            clf.weights = updated.pop("pretrain.weights")
            clf.bias = updated.pop("pretrain.bias")
            for name, value in updated.items():
                bb.set_parameter(name, value)
            loss_sum += float(losses.sum())
        epoch_losses.append(loss_sum / n)
        if log and tc.report_every and (epoch + 1) % tc.report_every == 0:
            log(f"pretrain epoch {epoch + 1}/{tc.epochs}: loss {epoch_losses[-1]:.4f}")
    return epoch_losses


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_history_csv(hist: RunHistory, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for e, (loss, tacc, vacc) in enumerate(
            zip(hist.train_loss, hist.train_acc, hist.val_acc)
        ):
            writer.writerow([e, f"{loss:.6f}", f"{tacc:.6f}", f"{vacc:.6f}"])


def write_confusion_csv(cm: ConfusionMatrix, path, class_names=None) -> None:
    k = cm.counts.shape[0]
    names = class_names or [f"class_{i}" for i in range(k)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for row in cm.counts:
            writer.writerow([int(v) for v in row])


def write_grid_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["branches", "units", "seed", "test_acc"])
        for r in rows:
            acc = r["test_acc"]
            writer.writerow(
                [r["branches"], r["units"], r["seed"], "nan" if math.isnan(acc) else f"{acc:.6f}"]
            )


def write_grid_agg_csv(agg: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["branches", "units", "mean", "std"])
        for r in agg:
            mean = "nan" if math.isnan(r["mean"]) else f"{r['mean']:.6f}"
            std = "nan" if math.isnan(r["std"]) else f"{r['std']:.6f}"
            writer.writerow([r["branches"], r["units"], mean, std])


def write_compare_csv(rows: list[dict], path) -> None:
    cols = ["head", "seed", "test_acc"]
    extra = sorted({k for r in rows for k in r if k not in cols})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols + extra)
        for r in rows + compare_medians(rows):
            out = [r["head"], r["seed"], _fmt(r.get("test_acc"))]
            out += [_fmt(r.get(k)) for k in extra]
            writer.writerow(out)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)
