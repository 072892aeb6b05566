"""Command-line entry point.

Subcommands: gen-synth, train, eval, ablate, compare, export-centers,
pretrain-backbone.  Settings resolve as defaults < ``--config`` file <
``key=value`` overrides on the command line; every run writes a flat
provenance record into the output directory.  Exit codes: 0 success,
1 configuration/validation problem, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backbone import BackboneConfig, backbone_init, blocks_from_text, load_backbone, save_backbone
from .config import (
    parse_bool,
    parse_flat,
    parse_int_list,
    read_flat,
    sha256_file,
    write_provenance,
)
from .data import DataBundle, SynthConfig, gen_bimodal_synth, load_manifest
from .errors import ConfigError, DivergenceError, MBRBFError
from .model import ModelConfig, load_checkpoint, model_build, save_checkpoint
from .pgm import export_centers
from .report import write_report
from .train import (
    TrainConfig,
    aggregate_grid,
    ablation_grid,
    compare_heads,
    evaluate,
    pretrain_backbone,
    train,
    write_compare_csv,
    write_confusion_csv,
    write_grid_agg_csv,
    write_grid_csv,
    write_history_csv,
)

# key -> (parser, default); the single source of truth for run settings
SCHEMA: dict[str, tuple] = {
    # model
    "head_kind": (str, "rbf"),
    "branches": (int, 8),
    "units": (int, 4),
    "sigma_init": (float, 0.0528),
    "train_sigma": (parse_bool, True),
    "feature_source": (str, "ingested"),
    "center_low": (float, 0.0),
    "center_high": (float, 1.0),
    "reduce_relu": (parse_bool, False),
    # training protocol
    "epochs": (int, 100),
    "batch_size": (int, 32),
    "optimizer": (str, "adam"),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "seed": (int, 0),
    "seeds": (str, "0,1,2,3,4,5,6,7,8,9"),
    "pin_splits": (parse_bool, False),
    "keep_initial_centers": (parse_bool, False),
    "report_every": (int, 10),
    # ablation grid
    "grid_branches": (str, "1,2,4,8,16"),
    "grid_units": (str, "1,2,4,8,16"),
    # backbone
    "backbone_input": (str, "1,48,48"),
    "backbone_blocks": (str, "16:3:2,32:3:2,64:3:2"),
    "backbone_frozen": (parse_bool, True),
    "backbone_seed": (int, 0),
    "backbone_checkpoint": (str, ""),
    "pretrain_epochs": (int, 5),
    # synthetic generator
    "classes": (int, 4),
    "modes_per_class": (int, 2),
    "samples_per_mode": (str, "60"),
    "feature_shape": (str, "8,7,7"),
    "mode_separation": (float, 1.2),
    "noise_scale": (float, 0.012),
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit(2)."""

    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


def resolve_settings(config_path: str | None, overrides: list[str], seed: int | None = None) -> dict:
    """Merge defaults, config file, and key=value overrides; validate keys.

    An explicit ``--seed`` wins over everything: it is the single root of
    all randomness in a run.
    """
    values = {k: default for k, (_, default) in SCHEMA.items()}
    layers = []
    if config_path:
        layers.append(read_flat(config_path))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        parsed = parse_flat(item)
        pairs.update(parsed)
    layers.append(pairs)
    for layer in layers:
        for key, raw in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(raw) if isinstance(raw, str) else raw
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from e
    if seed is not None:
        values["seed"] = seed
    return values


def _model_config(values: dict, classes: int) -> ModelConfig:
    return ModelConfig(
        head_kind=values["head_kind"],
        branches=values["branches"],
        units_per_branch=values["units"],
        classes=classes,
        sigma_init=values["sigma_init"],
        train_sigma=values["train_sigma"],
        feature_source=values["feature_source"],
        seed=values["seed"],
        center_low=values["center_low"],
        center_high=values["center_high"],
        reduce_relu=values["reduce_relu"],
    )


def _train_config(values: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        optimizer=values["optimizer"],
        lr=values["lr"],
        beta1=values["beta1"],
        beta2=values["beta2"],
        eps=values["eps"],
        seed=values["seed"] if seed is None else seed,
        report_every=values["report_every"],
    )


def _backbone_for(values: dict):
    if values["feature_source"] != "backbone":
        return None
    if values["backbone_checkpoint"]:
        return load_backbone(values["backbone_checkpoint"], frozen=values["backbone_frozen"])
    cfg = BackboneConfig(
        input_shape=tuple(int(d) for d in values["backbone_input"].split(",")),
        conv_blocks=blocks_from_text(values["backbone_blocks"]),
        frozen=values["backbone_frozen"],
        seed=values["backbone_seed"],
    )
    return backbone_init(cfg)


def _load_bundle(data_dir: str) -> DataBundle:
    manifest = load_manifest(Path(data_dir) / "manifest.csv")
    return DataBundle.from_manifest(manifest)


def _provenance(out_dir, command: str, values: dict, inputs: dict[str, str]) -> None:
    hashes = {name: sha256_file(p) for name, p in inputs.items() if p and Path(p).exists()}
    record = dict(values)
    record["package_version"] = __version__
    for name, p in inputs.items():
        record[f"input_{name}"] = str(p)
    write_provenance(out_dir, command, record, hashes)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    counts = parse_int_list(values["samples_per_mode"], "samples_per_mode")
    cfg = SynthConfig(
        classes=values["classes"],
        modes_per_class=values["modes_per_class"],
        samples_per_mode=counts[0] if len(counts) == 1 else tuple(counts),
        feature_shape=tuple(int(d) for d in values["feature_shape"].split(",")),
        mode_separation=values["mode_separation"],
        noise_scale=values["noise_scale"],
        seed=values["seed"],
    )
    manifest = gen_bimodal_synth(cfg, out)
    _provenance(out, "gen-synth", values, {})
    print(
        f"generated {len(manifest.records)} samples, {manifest.classes} classes "
        f"-> {out / 'manifest.csv'}"
    )
    return 0


def cmd_train(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    bundle = _load_bundle(args.data)
    backbone = _backbone_for(values)
    feature_shape = backbone.config.output_shape() if backbone else bundle.feature_shape()
    cfg = _model_config(values, bundle.manifest.classes)
    model = model_build(cfg, feature_shape, backbone=backbone)
    tc = _train_config(values)
    hist = train(model, bundle, tc, log=print)
    acc, cm = evaluate(model, bundle, "test")
    write_history_csv(hist, out / "history.csv")
    write_confusion_csv(cm, out / "confusion.csv")
    save_checkpoint(model, out / "checkpoint", include_initial=values["keep_initial_centers"])
    write_report(out, history=hist, confusion=cm, config_echo=values)
    _provenance(out, "train", values, {"manifest": Path(args.data) / "manifest.csv", "config": args.config or ""})
    print(f"test top-1 accuracy: {acc:.4f} (best epoch {hist.best_epoch + 1})")
    return 0


def cmd_eval(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    bundle = _load_bundle(args.data)
    model = load_checkpoint(args.checkpoint)
    acc, cm = evaluate(model, bundle, args.split)
    write_confusion_csv(cm, out / "confusion.csv")
    write_report(out, confusion=cm, config_echo={"checkpoint": args.checkpoint, "split": args.split})
    _provenance(out, "eval", values, {"manifest": Path(args.data) / "manifest.csv"})
    print(f"{args.split} top-1 accuracy: {acc:.4f} over {cm.total()} samples")
    return 0


def cmd_ablate(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    bundle = _load_bundle(args.data)
    cfg = _model_config(values, bundle.manifest.classes)
    tc = _train_config(values)
    rows = ablation_grid(
        bundle,
        parse_int_list(values["grid_branches"], "grid_branches"),
        parse_int_list(values["grid_units"], "grid_units"),
        parse_int_list(values["seeds"], "seeds"),
        cfg,
        tc,
        pin_splits=values["pin_splits"],
        log=print,
    )
    agg = aggregate_grid(rows)
    write_grid_csv(rows, out / "grid.csv")
    write_grid_agg_csv(agg, out / "grid_agg.csv")
    write_report(out, grid_agg=agg, config_echo=values)
    _provenance(out, "ablate", values, {"manifest": Path(args.data) / "manifest.csv", "config": args.config or ""})
    best = max((r for r in agg if r["mean"] == r["mean"]), key=lambda r: r["mean"])
    print(
        f"grid done: {len(agg)} cells; best mean accuracy {best['mean']:.4f} "
        f"at branches={best['branches']} units={best['units']}"
    )
    return 0


def cmd_compare(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    bundle = _load_bundle(args.data)
    cfg = _model_config(values, bundle.manifest.classes)
    tc = _train_config(values)
    rows = compare_heads(
        bundle,
        cfg,
        tc,
        parse_int_list(values["seeds"], "seeds"),
        pin_splits=values["pin_splits"],
        log=print,
    )
    write_compare_csv(rows, out / "compare.csv")
    write_report(out, compare_rows=rows, config_echo=values)
    _provenance(out, "compare", values, {"manifest": Path(args.data) / "manifest.csv", "config": args.config or ""})
    return 0


def cmd_export_centers(args) -> int:
    out = _out_dir(args)
    written = export_centers(args.checkpoint, out)
    _provenance(out, "export-centers", {"checkpoint": args.checkpoint}, {})
    print(f"wrote {len(written)} PGM files to {out}")
    return 0


def cmd_pretrain_backbone(args) -> int:
    values = resolve_settings(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    bundle = _load_bundle(args.data)
    cfg = BackboneConfig(
        input_shape=tuple(int(d) for d in values["backbone_input"].split(",")),
        conv_blocks=blocks_from_text(values["backbone_blocks"]),
        frozen=False,
        seed=values["backbone_seed"],
    )
    if bundle.feature_shape() != cfg.input_shape:
        raise ConfigError(
            f"data blocks {bundle.feature_shape()} do not match backbone input {cfg.input_shape}"
        )
    bb = backbone_init(cfg)
    tc = replace(_train_config(values), epochs=values["pretrain_epochs"])
    losses = pretrain_backbone(bb, bundle, tc, log=print)
    bb.config = replace(bb.config, frozen=True)
    save_backbone(bb, out / "backbone")
    _provenance(out, "pretrain-backbone", values, {"manifest": Path(args.data) / "manifest.csv"})
    print(f"pretrained {tc.epochs} epochs (final loss {losses[-1]:.4f}) -> {out / 'backbone'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mbrbf", description="Multi-branch RBF head experiments")
    parser.add_argument("--version", action="version", version=f"mbrbf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_txt, data=False, checkpoint=False, split=False):
        p = sub.add_parser(name, help=help_txt)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="root seed for all randomness")
        if data:
            p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        if split:
            p.add_argument("--split", default="test", choices=["train", "val", "test"])
        p.add_argument("overrides", nargs="*", help="key=value settings overriding the config")
        p.set_defaults(fn=fn)
        return p

    add("gen-synth", cmd_gen_synth, "generate the bimodal synthetic dataset")
    add("train", cmd_train, "train one model and checkpoint the best epoch", data=True)
    add("eval", cmd_eval, "evaluate a checkpoint on a split", data=True, checkpoint=True, split=True)
    add("ablate", cmd_ablate, "run the branches x units ablation grid", data=True)
    add("compare", cmd_compare, "train matched RBF and dense heads over seeds", data=True)
    add("export-centers", cmd_export_centers, "export RBF centers as PGM images", checkpoint=True)
    add("pretrain-backbone", cmd_pretrain_backbone, "pretrain and save a frozen backbone", data=True)
    return parser


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 2
    except MBRBFError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
