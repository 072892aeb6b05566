"""Small convolutional feature extractor and the feature-ingestion path.

The backbone is a stack of conv(same padding, stride 1) + ReLU + max-pool
blocks.  It stands in for a large pretrained face network: the head only
needs *some* C x H x W feature block, and anyone holding externally computed
activations can bypass the CNN entirely via :func:`load_feature_block`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_bool, read_flat, write_flat
from .errors import ConfigError, FormatError, ShapeError
from .tensorio import as_tensor, read_tensor, write_tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: tuple[int, int, int]  # (channels, height, width)
    conv_blocks: tuple[tuple[int, int, int], ...]  # (out_channels, kernel, pool)
    frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.conv_blocks) < 1:
            raise ConfigError("backbone needs at least one conv block")
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        for out_ch, kernel, pool in self.conv_blocks:
            if out_ch < 1:
                raise ConfigError(f"out_channels must be >= 1, got {out_ch}")
            if kernel < 1 or kernel % 2 == 0:
                raise ConfigError(f"kernel size must be odd and >= 1, got {kernel}")
            if pool < 1:
                raise ConfigError(f"pool factor must be >= 1, got {pool}")
            h, w = h // pool, w // pool
            if h < 1 or w < 1:
                raise ConfigError(
                    f"conv blocks reduce spatial dims below 1 (got {h}x{w})"
                )

    def output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for out_ch, _, pool in self.conv_blocks:
            c, h, w = out_ch, h // pool, w // pool
        return c, h, w


@dataclass
class FeatureBlock:
    """A C x H x W activation block tagged with its sample id."""

    tensor: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)
        if self.tensor.ndim != 3:
            raise ShapeError(f"feature block must be rank 3, got rank {self.tensor.ndim}")


@dataclass
class Backbone:
    config: BackboneConfig
    weights: list[np.ndarray] = field(default_factory=list)  # (O, C, k, k) per block
    biases: list[np.ndarray] = field(default_factory=list)  # (O,) per block

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"backbone.conv{i}.weights"] = w
            out[f"backbone.conv{i}.bias"] = b
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        kind = name.split(".")[-1]
        idx = int(name.split(".")[-2].removeprefix("conv"))
        target = self.weights if kind == "weights" else self.biases
        if value.shape != target[idx].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {target[idx].shape}")
        target[idx] = as_tensor(value)


def backbone_init(cfg: BackboneConfig) -> Backbone:
    """Deterministic He-style scaled-uniform initialization from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    bb = Backbone(config=cfg)
    in_ch = cfg.input_shape[0]
    for out_ch, kernel, _ in cfg.conv_blocks:
        limit = np.sqrt(6.0 / (in_ch * kernel * kernel))
        bb.weights.append(rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel, kernel)))
        bb.biases.append(np.zeros(out_ch))
        in_ch = out_ch
    return bb


def _conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # x (N,C,H,W), w (O,C,k,k); stride 1, zero padding k//2
    k = w.shape[2]
    p = k // 2
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, w.shape[0], h, wd))
    for di in range(k):
        for dj in range(k):
            out += np.einsum("oc,nchw->nohw", w[:, :, di, dj], xp[:, :, di : di + h, dj : dj + wd])
    return out + b[None, :, None, None]


def _conv2d_same_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = w.shape[2]
    p = k // 2
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    grad_w = np.zeros_like(w)
    grad_xp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            grad_w[:, :, di, dj] = np.einsum(
                "nohw,nchw->oc", grad_out, xp[:, :, di : di + h, dj : dj + wd]
            )
            grad_xp[:, :, di : di + h, dj : dj + wd] += np.einsum(
                "oc,nohw->nchw", w[:, :, di, dj], grad_out
            )
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_xp[:, :, p : p + h, p : p + wd], grad_w, grad_b


def _maxpool(x: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    # truncating non-overlapping pooling; returns (pooled, argmax within block)
    n, c, h, w = x.shape
    ho, wo = h // factor, w // factor
    view = (
        x[:, :, : ho * factor, : wo * factor]
        .reshape(n, c, ho, factor, wo, factor)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, factor * factor)
    )
    idx = view.argmax(axis=-1)
    out = np.take_along_axis(view, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(
    grad_out: np.ndarray, idx: np.ndarray, in_shape: tuple, factor: int
) -> np.ndarray:
    n, c, h, w = in_shape
    ho, wo = h // factor, w // factor
    scatter = np.zeros((n, c, ho, wo, factor * factor))
    np.put_along_axis(scatter, idx[..., None], grad_out[..., None], axis=-1)
    grad_x = np.zeros(in_shape)
    grad_x[:, :, : ho * factor, : wo * factor] = (
        scatter.reshape(n, c, ho, wo, factor, factor)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * factor, wo * factor)
    )
    return grad_x


def backbone_forward_batch(bb: Backbone, images: np.ndarray, want_cache: bool = False):
    """Forward an (N, C, H, W) image batch through conv+ReLU+pool blocks."""
    x = as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != bb.config.input_shape:
        raise ShapeError(
            f"expected images (N, {bb.config.input_shape}), got {x.shape}"
        )
    cache = []
    for (out_ch, kernel, pool), w, b in zip(bb.config.conv_blocks, bb.weights, bb.biases):
        pre = _conv2d_same(x, w, b)
        act = np.maximum(0.0, pre)
        pooled, idx = _maxpool(act, pool)
        if want_cache:
            cache.append((x, pre, act.shape, idx, pool))
        x = pooled
    return (x, cache) if want_cache else x


def backbone_backward_batch(bb: Backbone, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of all backbone parameters given the output gradient."""
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    for i in range(len(bb.weights) - 1, -1, -1):
        x, pre, act_shape, idx, pool = cache[i]
        g = _maxpool_backward(g, idx, act_shape, pool)
        g = g * (pre > 0.0)
        g, gw, gb = _conv2d_same_backward(x, bb.weights[i], g)
        grads[f"backbone.conv{i}.weights"] = gw
        grads[f"backbone.conv{i}.bias"] = gb
    return grads


def backbone_forward(bb: Backbone, image: np.ndarray, sample_id: str = "") -> FeatureBlock:
    """Forward a single C x H x W image to its feature block."""
    img = as_tensor(image)
    if img.ndim != 3:
        raise ShapeError(f"expected a rank-3 image, got rank {img.ndim}")
    out = backbone_forward_batch(bb, img[None])
    return FeatureBlock(tensor=out[0], sample_id=sample_id)


def load_feature_block(path) -> FeatureBlock:
    """Read a rank-3 ``.mbrt`` tensor as a feature block."""
    t = read_tensor(path)
    if t.ndim != 3:
        raise FormatError(f"{path}: feature block must be rank 3, got rank {t.ndim}")
    return FeatureBlock(tensor=t, sample_id=Path(path).stem)


def save_backbone(bb: Backbone, out_dir) -> None:
    """Write backbone weights as ``.mbrt`` files plus manifest and config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in bb.named_parameters().items():
        fname = f"{name}.mbrt"
        write_tensor(arr, out_dir / fname)
        lines.append(f"{name}\t{fname}\t{'x'.join(str(d) for d in arr.shape)}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    cfg = bb.config
    write_flat(
        {
            "backbone_input": ",".join(str(d) for d in cfg.input_shape),
            "backbone_blocks": blocks_to_text(cfg.conv_blocks),
            "backbone_frozen": cfg.frozen,
            "backbone_seed": cfg.seed,
        },
        out_dir / "config.txt",
    )


def load_backbone(in_dir, frozen: bool | None = None) -> Backbone:
    """Rebuild a backbone from a checkpoint; ``frozen`` overrides the saved flag."""
    in_dir = Path(in_dir)
    if not (in_dir / "config.txt").exists() or not (in_dir / "manifest.txt").exists():
        raise FormatError(f"{in_dir}: not a backbone checkpoint")
    meta = read_flat(in_dir / "config.txt")
    cfg = BackboneConfig(
        input_shape=tuple(int(d) for d in meta["backbone_input"].split(",")),
        conv_blocks=blocks_from_text(meta["backbone_blocks"]),
        frozen=parse_bool(meta["backbone_frozen"], "backbone_frozen") if frozen is None else frozen,
        seed=int(meta["backbone_seed"]),
    )
    bb = backbone_init(cfg)
    for line in (in_dir / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, fname, _ = line.split("\t")
        bb.set_parameter(name, read_tensor(in_dir / fname))
    return bb


def blocks_to_text(blocks) -> str:
    return ",".join(f"{o}:{k}:{p}" for o, k, p in blocks)


def blocks_from_text(text: str) -> tuple[tuple[int, int, int], ...]:
    try:
        return tuple(tuple(int(v) for v in blk.split(":")) for blk in text.split(",") if blk)
    except ValueError as e:
        raise ConfigError(f"bad conv block spec {text!r} (want 'out:kernel:pool,...')") from e
