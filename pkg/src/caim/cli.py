"""Command-line pipeline: synth | pretrain | train | eval | ablate.

Every command is a pure function of (config file, flag overrides, seed):
outputs carry no timestamps, JSON is written with sorted keys, and every
stage seed derives from the single config seed. The resolved config is
persisted as config.json next to each command's outputs.

Overrides use flat dotted keys, e.g. ``--train.margin=2.0``. The CAIM_SEED
environment variable overrides the config seed (flags still win).

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .backbone import (
    BackboneConfig,
    build_backbone,
    insert_caim,
    load_checkpoint,
    save_checkpoint,
)
from .data import DatasetFormatError, load_dataset, make_dataset, save_dataset
from .metrics import FAR_TARGETS, embed_records, evaluate, similarity_matrix
from .seeding import hash64, make_rng
from .training import DivergenceError, TrainConfig, pretrain_backbone, train_caim

__all__ = ["ConfigError", "DEFAULT_CONFIG", "resolve_config", "main"]


class ConfigError(ValueError):
    """Configuration file or flag overrides are invalid."""


DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "num_identities": 40,
        "samples_per_identity": 10,
        "gap_strength": 0.7,
        "image_hw": 32,
        "latent_dim": 16,
        "train_fraction": 0.5,
    },
    "backbone": {
        "num_blocks": 5,
        "channels": [16, 32, 64, 64, 64],
        "embedding_dim": 64,
    },
    "pretrain": {
        "epochs": 4,
        "learning_rate": 1e-3,
        "batch_pairs": 32,
        "margin": 1.0,
    },
    "train": {
        "caim_blocks": 3,
        "epochs": 20,
        "learning_rate": 1e-4,
        "batch_pairs": 32,
        "margin": 2.0,
        "variant": "conditional",
    },
    "eval": {
        "batch_size": 64,
        "folds": 1,
    },
}


def _merge_strict(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a section")
            _merge_strict(base[key], value, where + ".")
        else:
            base[key] = value


def _apply_override(cfg: dict, token: str) -> None:
    if not token.startswith("--") or "=" not in token:
        raise ConfigError(f"unrecognized argument: {token} (overrides look like --a.b=value)")
    key_path, raw = token[2:].split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = key_path.split(".")
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {key_path}")
        node = node[key]
    if keys[-1] not in node or isinstance(node[keys[-1]], dict):
        raise ConfigError(f"unknown config key: {key_path}")
    node[keys[-1]] = value


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    """Defaults <- file <- CAIM_SEED <- flag overrides, strictly validated."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge_strict(cfg, file_cfg)
    env_seed = os.environ.get("CAIM_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"CAIM_SEED must be an integer, got {env_seed!r}") from exc
    for token in overrides:
        _apply_override(cfg, token)
    return cfg


def _write_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _write_history(path: Path, history) -> None:
    _write_csv(
        path,
        ["epoch", "mean_loss", "holdout_eer"],
        [[h.epoch, h.mean_loss, h.holdout_eer] for h in history],
    )


def _backbone_config(cfg: dict) -> BackboneConfig:
    section = cfg["backbone"]
    return BackboneConfig(
        num_blocks=section["num_blocks"],
        channels=tuple(section["channels"]),
        input_hw=cfg["dataset"]["image_hw"],
        embedding_dim=section["embedding_dim"],
    )


def _train_config(section: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        margin=section["margin"],
        learning_rate=section["learning_rate"],
        epochs=section["epochs"],
        batch_pairs=section["batch_pairs"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    ds = cfg["dataset"]
    bundle = make_dataset(
        num_identities=ds["num_identities"],
        samples_per_identity=ds["samples_per_identity"],
        gap_strength=ds["gap_strength"],
        seed=cfg["seed"],
        image_hw=ds["image_hw"],
        latent_dim=ds["latent_dim"],
        train_fraction=ds["train_fraction"],
    )
    save_dataset(bundle, out)
    _write_config(cfg, out)
    train_ids = {r.identity for r in bundle.train_records}
    eval_ids = {r.identity for r in bundle.eval_records}
    print(
        f"dataset: {len(train_ids)} train / {len(eval_ids)} eval identities, "
        f"{len(bundle.train_records) + len(bundle.eval_records)} images, "
        f"gap strength {ds['gap_strength']}"
    )
    return out


def cmd_pretrain(cfg: dict, data_dir: str | Path, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    bundle = load_dataset(data_dir)
    model = build_backbone(_backbone_config(cfg), seed=hash64(cfg["seed"], "backbone"))
    history = pretrain_backbone(
        model, bundle, _train_config(cfg["pretrain"], hash64(cfg["seed"], "pretrain"))
    )
    save_checkpoint(out, model)
    _write_history(out / "pretrain_history.csv", history)
    _write_config(cfg, out)
    if history:
        print(f"pretrain: holdout source-source EER {history[-1].holdout_eer:.4f}")
    return out


def cmd_train(
    cfg: dict, data_dir: str | Path, backbone_dir: str | Path, out_dir: str | Path
) -> Path:
    out = Path(out_dir)
    bundle = load_dataset(data_dir)
    model = load_checkpoint(backbone_dir)
    if model.caim_params:
        raise ConfigError("backbone checkpoint already contains modulation blocks")
    variant = cfg["train"]["variant"]
    insert_caim(model, count=cfg["train"]["caim_blocks"], seed=hash64(cfg["seed"], "caim"))
    model.variant = variant
    history = train_caim(model, bundle, _train_config(cfg["train"], hash64(cfg["seed"], "train")))
    save_checkpoint(out, model)
    _write_history(out / "history.csv", history)
    _write_config(cfg, out)
    if history:
        print(f"train[{variant}]: holdout cross-modal EER {history[-1].holdout_eer:.4f}")
    return out


def _fold_partitions(records, folds: int, seed: int) -> list[list]:
    ids = sorted({r.identity for r in records})
    if folds > len(ids):
        raise ConfigError(f"cannot split {len(ids)} eval identities into {folds} folds")
    order = make_rng(seed, "folds").permutation(len(ids))
    groups = [[ids[i] for i in order[k::folds]] for k in range(folds)]
    return [[r for r in records if r.identity in set(group)] for group in groups]


def _aggregate_folds(fold_dicts: list[dict]) -> dict:
    out: dict = {}
    for metric in ("auc", "eer", "rank1"):
        values = [d[metric] for d in fold_dicts]
        out[metric] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
    for far in FAR_TARGETS:
        key = f"{far:g}"
        values = [d["vr_at_far"][key] for d in fold_dicts]
        out[f"vr_at_far_{key}"] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
    return out


def cmd_eval(
    cfg: dict,
    data_dir: str | Path,
    ckpt_dir: str | Path,
    out_dir: str | Path,
    baseline: bool = False,
) -> Path:
    out = Path(out_dir)
    bundle = load_dataset(data_dir)
    model = load_checkpoint(ckpt_dir)
    if baseline:
        model.caim_positions = []
        model.caim_params = {}
        model.variant = "conditional"
    batch_size = cfg["eval"]["batch_size"]
    result = evaluate(model, bundle.eval_records, batch_size=batch_size)
    payload = result.to_dict()

    folds = cfg["eval"]["folds"]
    if folds > 1:
        fold_dicts = []
        for fold_records in _fold_partitions(bundle.eval_records, folds, cfg["seed"]):
            fold_dicts.append(
                evaluate(model, fold_records, batch_size=batch_size).cross_modal.to_dict()
            )
        payload["folds"] = fold_dicts
        payload["aggregate"] = _aggregate_folds(fold_dicts)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    sources = [r for r in bundle.eval_records if r.modality == "source"]
    targets = [r for r in bundle.eval_records if r.modality == "target"]
    gal_emb = embed_records(model, sources, gate=0, batch_size=batch_size)
    probe_emb = embed_records(model, targets, gate=1, batch_size=batch_size)
    sim = similarity_matrix(gal_emb, probe_emb)
    rows = []
    for p, probe in enumerate(targets):
        for g, gal in enumerate(sources):
            rows.append(
                [probe.identity, gal.identity, float(sim[p, g]), int(probe.identity == gal.identity)]
            )
    _write_csv(out / "scores.csv", ["probe_id", "gallery_id", "score", "genuine_flag"], rows)
    _write_config(cfg, out)
    cm = result.cross_modal
    print(
        f"eval{'[baseline]' if baseline else ''}: AUC {cm.auc:.4f} EER {cm.eer:.4f} "
        f"Rank-1 {cm.rank1:.4f}"
    )
    return out


ABLATION_VARIANTS = [
    ("k1", 1, "conditional"),
    ("k2", 2, "conditional"),
    ("k3", 3, "conditional"),
    ("k4", 4, "conditional"),
    ("k5", 5, "conditional"),
    ("aim", None, "aim"),
    ("in", None, "in"),
]


def cmd_ablate(
    cfg: dict, data_dir: str | Path, backbone_dir: str | Path, out_dir: str | Path
) -> Path:
    """Train and evaluate block-count and unconditional variants.

    Each variant runs cmd_train/cmd_eval with a derived seed, so rows are
    reproducible by invoking those commands directly. The unconditional
    variants modulate the source branch too, which is expected to violate
    the source-embedding-preservation check.
    """
    out = Path(out_dir)
    bundle = load_dataset(data_dir)
    base_model = load_checkpoint(backbone_dir)
    if base_model.caim_params:
        raise ConfigError("ablation expects a block-free backbone checkpoint")
    eval_sources = [r for r in bundle.eval_records if r.modality == "source"]
    baseline_emb = embed_records(base_model, eval_sources, gate=0)

    rows = []
    for name, blocks, variant in ABLATION_VARIANTS:
        vcfg = copy.deepcopy(cfg)
        vcfg["seed"] = hash64(cfg["seed"], "ablate", name)
        vcfg["train"]["variant"] = variant
        if blocks is not None:
            vcfg["train"]["caim_blocks"] = blocks
        ckpt = cmd_train(vcfg, data_dir, backbone_dir, out / name / "ckpt")
        cmd_eval(vcfg, data_dir, ckpt, out / name)
        with open(out / name / "metrics.json") as fh:
            metrics = json.load(fh)["cross_modal"]

        trained = load_checkpoint(ckpt)
        variant_emb = embed_records(trained, eval_sources, gate=0)
        preserved = variant_emb.tobytes() == baseline_emb.tobytes()
        expected_preserved = variant == "conditional"
        if preserved != expected_preserved:
            note = "UNEXPECTED"
        elif preserved:
            note = ""
        else:
            note = "EXPECTED"  # unconditional variants modulate the source branch by design
        rows.append(
            [
                name,
                vcfg["train"]["caim_blocks"],
                metrics["auc"],
                metrics["eer"],
                metrics["rank1"],
                *[metrics["vr_at_far"][f"{far:g}"] for far in FAR_TARGETS],
                preserved,
                note,
            ]
        )

    header = (
        ["variant", "blocks", "auc", "eer", "rank1"]
        + [f"vr_at_far_{far:g}" for far in FAR_TARGETS]
        + ["source_preserved", "preservation_note"]
    )
    _write_csv(out / "ablation.csv", header, rows)
    _write_config(cfg, out)
    print(f"ablation: {len(rows)} variants -> {out / 'ablation.csv'}")
    return out


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic paired-modality dataset")
    synth.add_argument("--config")
    synth.add_argument("--out", required=True)

    pretrain = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    pretrain.add_argument("--config")
    pretrain.add_argument("--data", required=True)
    pretrain.add_argument("--out", required=True)

    train = sub.add_parser("train", help="insert modulation blocks and adapt them")
    train.add_argument("--config")
    train.add_argument("--data", required=True)
    train.add_argument("--backbone", required=True)
    train.add_argument("--out", required=True)

    evaluate_p = sub.add_parser("eval", help="compute verification metrics")
    evaluate_p.add_argument("--config")
    evaluate_p.add_argument("--data", required=True)
    evaluate_p.add_argument("--ckpt", required=True)
    evaluate_p.add_argument("--out", required=True)
    evaluate_p.add_argument("--baseline", action="store_true")

    ablate = sub.add_parser("ablate", help="block-count and unconditional ablations")
    ablate.add_argument("--config")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--backbone", required=True)
    ablate.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        cfg = resolve_config(args.config, extras)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.data, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.backbone, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.data, args.ckpt, args.out, baseline=args.baseline)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.data, args.backbone, args.out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DatasetFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
