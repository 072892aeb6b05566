"""Assembly of the full multi-branch network.

Topology: feature block (from the backbone or ingested from disk) ->
1x1 reduction conv (one filter per branch) -> per-branch flatten ->
branch activation (RBF or dense+ReLU) -> fixed branch-major concatenation
-> softmax classifier.

Parameters and gradients are exchanged as ``{name: array}`` dicts using a
stable naming scheme (``reduce.weights``, ``branch3.centers``,
``classifier.bias``, ``backbone.conv0.weights`` ...) shared with the
optimizer and the checkpoint format.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import (
    Backbone,
    BackboneConfig,
    FeatureBlock,
    backbone_backward_batch,
    backbone_forward_batch,
    backbone_init,
    blocks_from_text,
    blocks_to_text,
)
from .config import parse_bool, read_flat, write_flat
from .errors import ConfigError, FormatError, ShapeError
from .layers import (
    DenseReLU,
    RBFBranch,
    ReduceConv,
    SoftmaxClassifier,
    linear_backward,
    dense_relu_backward,
    dense_relu_forward,
    rbf_backward,
    rbf_forward,
    reduce_conv_backward,
    reduce_conv_forward,
)
from .tensorio import as_tensor, read_tensor, write_tensor

HEAD_KINDS = ("rbf", "dense")
FEATURE_SOURCES = ("ingested", "backbone")


@dataclass(frozen=True)
class ModelConfig:
    head_kind: str = "rbf"
    branches: int = 8
    units_per_branch: int = 4
    classes: int = 7
    sigma_init: float = 0.0528
    train_sigma: bool = True
    feature_source: str = "ingested"
    seed: int = 0
    center_low: float = 0.0
    center_high: float = 1.0
    reduce_relu: bool = False

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ConfigError(
                f"feature_source must be one of {FEATURE_SOURCES}, got {self.feature_source!r}"
            )
        if self.branches < 1 or self.units_per_branch < 1:
            raise ConfigError("branches and units_per_branch must be >= 1")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if not (self.sigma_init > 0):
            raise ConfigError("sigma_init must be positive")
        if not (self.center_high > self.center_low):
            raise ConfigError("center_high must exceed center_low")


@dataclass
class MBModel:
    config: ModelConfig
    feature_shape: tuple[int, int, int]
    reduce: ReduceConv
    branches: list
    classifier: SoftmaxClassifier
    backbone: Backbone | None = None
    initial_centers: list[np.ndarray] | None = None

    @property
    def concat_width(self) -> int:
        return self.config.branches * self.config.units_per_branch

    def named_parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.backbone is not None:
            out.update(self.backbone.named_parameters())
        out["reduce.weights"] = self.reduce.weights
        out["reduce.bias"] = self.reduce.bias
        for i, br in enumerate(self.branches):
            if isinstance(br, RBFBranch):
                out[f"branch{i}.centers"] = br.centers
                out[f"branch{i}.log_radii"] = br.log_radii
            else:
                out[f"branch{i}.weights"] = br.weights
                out[f"branch{i}.bias"] = br.bias
        out["classifier.weights"] = self.classifier.weights
        out["classifier.bias"] = self.classifier.bias
        return out

    def trainable_names(self) -> list[str]:
        names = []
        for name in self.named_parameters():
            if name.startswith("backbone."):
                if self.backbone is not None and not self.backbone.config.frozen:
                    names.append(name)
            elif name.endswith(".log_radii") and not self.config.train_sigma:
                continue
            else:
                names.append(name)
        return names

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        params = self.named_parameters()
        return {n: params[n] for n in self.trainable_names()}

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        value = as_tensor(value)
        if name.startswith("backbone."):
            if self.backbone is None:
                raise ConfigError(f"model has no backbone for parameter {name}")
            self.backbone.set_parameter(name, value)
            return
        m = re.fullmatch(r"branch(\d+)\.(centers|log_radii|weights|bias)", name)
        if m:
            br = self.branches[int(m.group(1))]
            attr = m.group(2)
            current = getattr(br, attr)
            if value.shape != current.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {current.shape}")
            setattr(br, attr, value)
            return
        targets = {
            "reduce.weights": (self.reduce, "weights"),
            "reduce.bias": (self.reduce, "bias"),
            "classifier.weights": (self.classifier, "weights"),
            "classifier.bias": (self.classifier, "bias"),
        }
        if name not in targets:
            raise ConfigError(f"unknown parameter {name!r}")
        obj, attr = targets[name]
        current = getattr(obj, attr)
        if value.shape != current.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {current.shape}")
        setattr(obj, attr, value)

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.set_parameter(name, value)

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        params = self.named_parameters()
        names = list(params) if names is None else names
        return {n: params[n].copy() for n in names}


def model_build(
    cfg: ModelConfig, feature_shape: tuple[int, int, int], backbone: Backbone | None = None
) -> MBModel:
    """Deterministically initialize the head for the given feature geometry.

    Reduction filters, branches, and classifier draw from three independent
    seed streams so RBF and dense heads built from the same seed share
    identical reduction and classifier initializations.
    """
    c, h, w = (int(d) for d in feature_shape)
    if c < 1 or h < 1 or w < 1:
        raise ConfigError(f"invalid feature shape {feature_shape}")
    if cfg.feature_source == "backbone":
        if backbone is None:
            raise ConfigError("feature_source=backbone requires a backbone")
        if backbone.config.output_shape() != (c, h, w):
            raise ConfigError(
                f"backbone output {backbone.config.output_shape()} != feature shape {(c, h, w)}"
            )
    elif backbone is not None:
        raise ConfigError("feature_source=ingested does not take a backbone")

    d = h * w
    rng_reduce, rng_branch, rng_clf = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    limit_r = 1.0 / np.sqrt(c)
    reduce = ReduceConv(
        weights=rng_reduce.uniform(-limit_r, limit_r, size=(cfg.branches, c)),
        bias=np.zeros(cfg.branches),
    )
    branches = []
    for _ in range(cfg.branches):
        if cfg.head_kind == "rbf":
            centers = rng_branch.uniform(
                cfg.center_low, cfg.center_high, size=(cfg.units_per_branch, d)
            )
            branches.append(
                RBFBranch(centers=centers, log_radii=np.full(cfg.units_per_branch, np.log(cfg.sigma_init)))
            )
        else:
            limit_b = 1.0 / np.sqrt(d)
            branches.append(
                DenseReLU(
                    weights=rng_branch.uniform(-limit_b, limit_b, size=(cfg.units_per_branch, d)),
                    bias=np.zeros(cfg.units_per_branch),
                )
            )
    width = cfg.branches * cfg.units_per_branch
    limit_c = 1.0 / np.sqrt(width)
    classifier = SoftmaxClassifier(
        weights=rng_clf.uniform(-limit_c, limit_c, size=(cfg.classes, width)),
        bias=np.zeros(cfg.classes),
    )
    initial = [br.centers.copy() for br in branches] if cfg.head_kind == "rbf" else None
    return MBModel(
        config=cfg,
        feature_shape=(c, h, w),
        reduce=reduce,
        branches=branches,
        classifier=classifier,
        backbone=backbone,
        initial_centers=initial,
    )


@dataclass
class ForwardCache:
    """Intermediates retained by a forward pass for the matching backward."""

    single: bool
    fmap: np.ndarray  # (N, C, H, W) head input
    reduce_pre: np.ndarray  # (N, B, H, W) before the optional ReLU
    branch_inputs: list  # per branch (N, d)
    concat: np.ndarray  # (N, B*U)
    logits: np.ndarray  # (N, K)
    probs: np.ndarray  # (N, K)
    backbone_cache: list | None = None


def _head_input_batch(m: MBModel, inputs: np.ndarray, want_backbone_cache: bool):
    x = as_tensor(inputs)
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 batch, got rank {x.ndim}")
    if m.config.feature_source == "backbone":
        if x.shape[1:] != m.backbone.config.input_shape:
            raise ShapeError(
                f"expected images (N, {m.backbone.config.input_shape}), got {x.shape}"
            )
        if want_backbone_cache:
            return backbone_forward_batch(m.backbone, x, want_cache=True)
        return backbone_forward_batch(m.backbone, x), None
    if x.shape[1:] != m.feature_shape:
        raise ShapeError(f"expected feature blocks (N, {m.feature_shape}), got {x.shape}")
    return x, None


def model_forward_batch(m: MBModel, inputs: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward an (N, ...) batch of images or feature blocks to class probabilities."""
    train_backbone = (
        m.config.feature_source == "backbone" and m.backbone is not None and not m.backbone.config.frozen
    )
    fmap, bb_cache = _head_input_batch(m, inputs, want_backbone_cache=train_backbone)
    n = fmap.shape[0]
    reduce_pre = reduce_conv_forward(m.reduce, fmap)
    reduced = np.maximum(0.0, reduce_pre) if m.config.reduce_relu else reduce_pre
    branch_inputs = []
    branch_outs = []
    for i, br in enumerate(m.branches):
        xb = reduced[:, i].reshape(n, -1)
        branch_inputs.append(xb)
        if isinstance(br, RBFBranch):
            branch_outs.append(rbf_forward(br, xb))
        else:
            branch_outs.append(dense_relu_forward(br, xb))
    concat = np.concatenate(branch_outs, axis=1)
    logits = concat @ m.classifier.weights.T + m.classifier.bias[None, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    cache = ForwardCache(
        single=False,
        fmap=fmap,
        reduce_pre=reduce_pre,
        branch_inputs=branch_inputs,
        concat=concat,
        logits=logits,
        probs=probs,
        backbone_cache=bb_cache,
    )
    return probs, cache


def model_loss_batch(cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy losses from a cached forward pass."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (cache.logits.shape[0],):
        raise ShapeError(f"labels: expected shape ({cache.logits.shape[0]},), got {labels.shape}")
    shifted = cache.logits - cache.logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    return lse - shifted[rows, labels]


def model_backward_batch(m: MBModel, cache: ForwardCache, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Mean gradients over the batch for every trainable parameter group.

    The backbone contributes entries only when present and not frozen.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = cache.probs.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels: expected shape ({n},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= m.config.classes):
        raise ConfigError(f"label out of range 0..{m.config.classes - 1}")
    grad_logits = cache.probs.copy()
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n

    grads: dict[str, np.ndarray] = {}
    grad_concat, gw_clf, gb_clf = linear_backward(m.classifier.weights, cache.concat, grad_logits)
    grads["classifier.weights"] = gw_clf
    grads["classifier.bias"] = gb_clf

    u = m.config.units_per_branch
    _, h, w = m.feature_shape
    grad_reduced = np.empty_like(cache.reduce_pre)
    for i, br in enumerate(m.branches):
        gout = grad_concat[:, i * u : (i + 1) * u]
        xb = cache.branch_inputs[i]
        if isinstance(br, RBFBranch):
            gx, gc, gr = rbf_backward(br, xb, gout)
            grads[f"branch{i}.centers"] = gc
            if m.config.train_sigma:
                grads[f"branch{i}.log_radii"] = gr
        else:
            gx, gw, gb = dense_relu_backward(br, xb, gout)
            grads[f"branch{i}.weights"] = gw
            grads[f"branch{i}.bias"] = gb
        grad_reduced[:, i] = gx.reshape(n, h, w)
    if m.config.reduce_relu:
        grad_reduced = grad_reduced * (cache.reduce_pre > 0.0)
    grad_fmap, gw_red, gb_red = reduce_conv_backward(m.reduce, cache.fmap, grad_reduced)
    grads["reduce.weights"] = gw_red
    grads["reduce.bias"] = gb_red

    if cache.backbone_cache is not None:
        grads.update(backbone_backward_batch(m.backbone, cache.backbone_cache, grad_fmap))
    return grads


def model_forward(m: MBModel, fb: FeatureBlock) -> tuple[np.ndarray, ForwardCache]:
    """Forward one feature block; returns (probs, cache)."""
    probs, cache = model_forward_batch(m, fb.tensor[None])
    cache.single = True
    return probs[0], cache


def model_backward(m: MBModel, cache: ForwardCache, label: int) -> dict[str, np.ndarray]:
    """Per-sample gradients from a cached single-sample forward."""
    if not cache.single or cache.probs.shape[0] != 1:
        raise ShapeError("model_backward expects the cache of a single-sample forward")
    return model_backward_batch(m, cache, np.asarray([label]))


def predict(m: MBModel, fb: FeatureBlock) -> int:
    """Top-1 class; ties break to the lowest class index."""
    probs, _ = model_forward(m, fb)
    return int(np.argmax(probs))


# ---------------------------------------------------------------------------
# Checkpoints: one .mbrt file per parameter plus a plain-text manifest
# ---------------------------------------------------------------------------


def save_checkpoint(m: MBModel, out_dir, include_initial: bool = False) -> None:
    """Write parameters, a name->file->shape manifest, and the model config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = dict(m.named_parameters())
    if include_initial and m.initial_centers is not None:
        for i, centers in enumerate(m.initial_centers):
            entries[f"initial.branch{i}.centers"] = centers
    lines = []
    for name, arr in entries.items():
        fname = f"{name}.mbrt"
        write_tensor(arr, out_dir / fname)
        lines.append(f"{name}\t{fname}\t{'x'.join(str(d) for d in arr.shape)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")

    cfg = m.config
    meta: dict = {
        "head_kind": cfg.head_kind,
        "branches": cfg.branches,
        "units_per_branch": cfg.units_per_branch,
        "classes": cfg.classes,
        "sigma_init": cfg.sigma_init,
        "train_sigma": cfg.train_sigma,
        "feature_source": cfg.feature_source,
        "seed": cfg.seed,
        "center_low": cfg.center_low,
        "center_high": cfg.center_high,
        "reduce_relu": cfg.reduce_relu,
        "feature_shape": ",".join(str(d) for d in m.feature_shape),
    }
    if m.backbone is not None:
        bc = m.backbone.config
        meta["backbone_input"] = ",".join(str(d) for d in bc.input_shape)
        meta["backbone_blocks"] = blocks_to_text(bc.conv_blocks)
        meta["backbone_frozen"] = bc.frozen
        meta["backbone_seed"] = bc.seed
    write_flat(meta, out_dir / "config.txt")


def load_checkpoint(in_dir) -> MBModel:
    """Rebuild a model from a checkpoint directory, bit-exactly."""
    in_dir = Path(in_dir)
    cfg_path = in_dir / "config.txt"
    manifest_path = in_dir / "manifest.txt"
    if not cfg_path.exists() or not manifest_path.exists():
        raise FormatError(f"{in_dir}: not a checkpoint (missing config.txt or manifest.txt)")
    meta = read_flat(cfg_path)
    cfg = ModelConfig(
        head_kind=meta["head_kind"],
        branches=int(meta["branches"]),
        units_per_branch=int(meta["units_per_branch"]),
        classes=int(meta["classes"]),
        sigma_init=float(meta["sigma_init"]),
        train_sigma=parse_bool(meta["train_sigma"], "train_sigma"),
        feature_source=meta["feature_source"],
        seed=int(meta["seed"]),
        center_low=float(meta["center_low"]),
        center_high=float(meta["center_high"]),
        reduce_relu=parse_bool(meta["reduce_relu"], "reduce_relu"),
    )
    feature_shape = tuple(int(d) for d in meta["feature_shape"].split(","))
    backbone = None
    if cfg.feature_source == "backbone":
        bcfg = BackboneConfig(
            input_shape=tuple(int(d) for d in meta["backbone_input"].split(",")),
            conv_blocks=blocks_from_text(meta["backbone_blocks"]),
            frozen=parse_bool(meta["backbone_frozen"], "backbone_frozen"),
            seed=int(meta["backbone_seed"]),
        )
        backbone = backbone_init(bcfg)
    m = model_build(cfg, feature_shape, backbone=backbone)
    initial: dict[int, np.ndarray] = {}
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{manifest_path}: bad manifest line {line!r}")
        name, fname, shape_txt = parts
        arr = read_tensor(in_dir / fname)
        shape = tuple(int(d) for d in shape_txt.split("x"))
        if arr.shape != shape:
            raise FormatError(f"{name}: file shape {arr.shape} != manifest shape {shape}")
        if name.startswith("initial.branch"):
            idx = int(re.fullmatch(r"initial\.branch(\d+)\.centers", name).group(1))
            initial[idx] = arr
        else:
            m.set_parameter(name, arr)
    # only checkpoints that saved initial centers retain them
    m.initial_centers = [initial[i] for i in sorted(initial)] if initial else None
    return m
