"""Command-line entry point: synth, curate, train, eval, infer, transfer.

Config resolution: dataclass defaults, then a flat JSON config file, then
repeatable ``--set key=value`` overrides, then direct flags. Unknown keys
exit with code 2 naming the offender; missing inputs exit 3; a numeric
training failure exits 4 with the last periodic checkpoint retained.
Every run writes ``resolved_config.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .arrays import denormalize_hu, normalize_hu, read_array, read_image, write_array, write_image
from .curation import ClinicalClass, ImageRef, classify_clinical, split_unsupervised
from .errors import NumericError
from .evaluation import (
    EvalPair,
    artifact_transfer,
    evaluate_dataset,
    evaluate_pairs,
    render_montage,
)
from .networks import infer_correction_image
from .synthesis import (
    MaterialModel,
    ProjectionGeometry,
    Spectrum,
    make_metal_mask,
    make_phantom,
    synthesize_pair,
)
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class MissingInputError(Exception):
    pass


@dataclass
class SynthConfig:
    n: int = 8
    size: int = 64
    seed: int = 0
    n_angles: int = 180
    photons: float = 0.0  # 0 disables Poisson noise; 2e5 is a sensible count
    metal_hu: float = 3000.0
    mu_water_per_px: float = 0.019
    metal_mu_per_px: float = 0.12
    metal_exponent: float = 3.0
    tissue_exponent: float = 0.45


@dataclass
class CurateConfig:
    input_dir: str = ""
    seed: int = 0


@dataclass
class TrainCliConfig:
    data_dir: str = ""
    learning_rate: float = 1e-4
    iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 500
    image_size: int = 64
    gan_mode: str = "nonsaturating"
    lambda_adv_clean: float = 1.0
    lambda_adv_artifact: float = 1.0
    lambda_recon: float = 20.0
    lambda_cycle: float = 20.0
    lambda_art: float = 20.0
    base_channels: int = 64
    n_res_blocks: int = 4
    disc_layers: int = 3
    padding_mode: str = "reflection"
    resume: str = ""

    def to_train_config(self) -> TrainConfig:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "data_dir"}
        return TrainConfig.from_flat_dict(flat)


@dataclass
class EvalConfig:
    checkpoint: str = ""
    data_dir: str = ""
    seed: int = 0
    exclude_metal: bool = True
    montage_rows: int = 4
    write_csv: bool = True


@dataclass
class InferConfig:
    checkpoint: str = ""
    input_dir: str = ""
    seed: int = 0


@dataclass
class TransferConfig:
    checkpoint: str = ""
    artifact_image: str = ""
    clean_image: str = ""
    seed: int = 0


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def resolve_config(config_cls, config_path: str | None, overrides: list[str], direct: dict):
    """defaults < JSON file < --set overrides < direct flags."""
    values = {f.name: f.default for f in fields(config_cls)}
    types = {f.name: f.type for f in fields(config_cls)}
    type_map = {"int": int, "float": float, "str": str, "bool": bool}

    def typed(name):
        t = types[name]
        return type_map.get(t, t) if isinstance(t, str) else t

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}")
        with open(path) as fh:
            file_values = json.load(fh)
        for key, val in file_values.items():
            if key not in values:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = typed(key)(val)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in values:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(raw, typed(key))
    for key, val in direct.items():
        if val is not None:
            if key not in values:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = val
    return config_cls(**values)


def _write_resolved(out_dir: Path, config) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_synth(config: SynthConfig, out_dir: Path) -> int:
    """Generate N phantom pairs with metal artifacts plus a manifest."""
    _write_resolved(out_dir, config)
    material = MaterialModel(
        mu_water_per_px=config.mu_water_per_px,
        metal_mu_per_px=config.metal_mu_per_px,
        metal_exponent=config.metal_exponent,
        tissue_exponent=config.tissue_exponent,
    )
    geometry = ProjectionGeometry(image_size=config.size, n_angles=config.n_angles)
    spectrum = Spectrum()
    photons = config.photons if config.photons > 0 else None
    entries = []
    for i in range(config.n):
        phantom_rng = np.random.default_rng([config.seed, i, 0])
        mask_rng = np.random.default_rng([config.seed, i, 1])
        clean = make_phantom(phantom_rng, size=config.size)
        mask = make_metal_mask((config.size, config.size), mask_rng, metal_hu=config.metal_hu)
        noise_seed = config.seed * 1_000_003 + i
        artifact, clean, mask = synthesize_pair(
            clean, mask, spectrum, geometry, noise_seed=noise_seed,
            material=material, photons=photons,
        )
        stem = f"pair_{i:05d}"
        write_image(out_dir / f"{stem}_clean.adnarr", clean)
        write_image(out_dir / f"{stem}_artifact.adnarr", artifact)
        write_array(out_dir / f"{stem}_mask.adnarr", mask.mask.astype(np.float32))
        entries.append(
            {
                "pair_id": i,
                "clean": f"{stem}_clean.adnarr",
                "artifact": f"{stem}_artifact.adnarr",
                "mask": f"{stem}_mask.adnarr",
                "seeds": {"phantom": [config.seed, i, 0], "mask": [config.seed, i, 1], "noise": noise_seed},
            }
        )
    manifest = {"config": dataclasses.asdict(config), "pairs": entries}
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"synthesized {config.n} pairs into {out_dir}")
    return EXIT_OK


def _load_pair_manifest(data_dir: Path) -> list[dict]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise MissingInputError(f"no manifest.json in {data_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    return manifest["pairs"]


def _pairs_as_refs(data_dir: Path, entries: list[dict]) -> list[tuple[ImageRef, ImageRef]]:
    pairs = []
    for e in entries:
        art = ImageRef(ref_id=e["artifact"], pair_id=e["pair_id"], path=data_dir / e["artifact"])
        clean = ImageRef(ref_id=e["clean"], pair_id=e["pair_id"], path=data_dir / e["clean"])
        pairs.append((art, clean))
    return pairs


def run_curate(config: CurateConfig, out_dir: Path) -> int:
    """Classify a directory of ADNARR1 images into the two clinical groups."""
    _write_resolved(out_dir, config)
    input_dir = Path(config.input_dir)
    if not config.input_dir or not input_dir.is_dir():
        raise MissingInputError(f"input_dir not found: {config.input_dir!r}")
    groups: dict[str, list[str]] = {"artifact": [], "clean": [], "discarded": []}
    names = sorted(p.name for p in input_dir.glob("*.adnarr"))
    if not names:
        raise MissingInputError(f"no .adnarr images in {input_dir}")
    for name in names:
        image = read_image(input_dir / name)
        outcome = classify_clinical(image)
        if outcome is ClinicalClass.ARTIFACT_AFFECTED:
            groups["artifact"].append(name)
        elif outcome is ClinicalClass.ARTIFACT_FREE:
            groups["clean"].append(name)
        else:
            groups["discarded"].append(name)
    with open(out_dir / "grouping.json", "w") as fh:
        json.dump(groups, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"curated {len(names)} images: {len(groups['artifact'])} artifact, "
        f"{len(groups['clean'])} clean, {len(groups['discarded'])} discarded"
    )
    return EXIT_OK


def run_train(config: TrainCliConfig, out_dir: Path) -> int:
    _write_resolved(out_dir, config)
    data_dir = Path(config.data_dir)
    if not config.data_dir or not data_dir.is_dir():
        raise MissingInputError(f"data_dir not found: {config.data_dir!r}")
    entries = _load_pair_manifest(data_dir)
    pairs = _pairs_as_refs(data_dir, entries)
    rng = np.random.default_rng(config.seed)
    dataset = split_unsupervised(pairs, rng)
    result = train(config.to_train_config(), dataset, out_dir)
    print(f"trained to step {result.state.step}; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def _load_eval_pairs(data_dir: Path) -> list[EvalPair]:
    entries = _load_pair_manifest(data_dir)
    pairs = []
    for e in entries:
        mask_arr, _ = read_array(data_dir / e["mask"])
        pairs.append(
            EvalPair(
                artifact=ImageRef(ref_id=e["artifact"], pair_id=e["pair_id"], path=data_dir / e["artifact"]),
                clean=ImageRef(ref_id=e["clean"], pair_id=e["pair_id"], path=data_dir / e["clean"]),
                mask=mask_arr > 0.5,
            )
        )
    return pairs


def _load_model(checkpoint: str):
    from .checkpoint import load_checkpoint, restore_model

    path = Path(checkpoint)
    if not checkpoint or not path.exists():
        raise MissingInputError(f"checkpoint not found: {checkpoint!r}")
    return restore_model(load_checkpoint(path))


def run_eval(config: EvalConfig, out_dir: Path) -> int:
    _write_resolved(out_dir, config)
    data_dir = Path(config.data_dir)
    if not config.data_dir or not data_dir.is_dir():
        raise MissingInputError(f"data_dir not found: {config.data_dir!r}")
    model = _load_model(config.checkpoint)
    pairs = _load_eval_pairs(data_dir)

    corrected = evaluate_dataset(model, pairs, exclude_metal=config.exclude_metal)
    uncorrected = evaluate_pairs(
        lambda img: img, pairs, exclude_metal=config.exclude_metal, method="uncorrected"
    )
    rows = [dataclasses.asdict(uncorrected), dataclasses.asdict(corrected)]
    report = {"exclude_metal": config.exclude_metal, "rows": rows}
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if config.write_csv:
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "psnr_db", "ssim_percent", "n_images"])
            writer.writeheader()
            writer.writerows(rows)

    n_show = min(config.montage_rows, len(pairs))
    montage_rows = []
    row_masks = []
    for pair in pairs[:n_show]:
        x_a = normalize_hu(pair.artifact.load())
        y = normalize_hu(pair.clean.load())
        out = infer_correction_image(model, x_a)
        montage_rows.append([x_a, out, y])
        row_masks.append(pair.mask)
    render_montage(montage_rows, metal_mask=row_masks, path=out_dir / "montage.png")
    print(
        f"eval over {corrected.n_images} pairs: uncorrected "
        f"{uncorrected.psnr_db:.2f} dB / {uncorrected.ssim_percent:.1f}, corrected "
        f"{corrected.psnr_db:.2f} dB / {corrected.ssim_percent:.1f}"
    )
    return EXIT_OK


def run_infer(config: InferConfig, out_dir: Path) -> int:
    _write_resolved(out_dir, config)
    input_dir = Path(config.input_dir)
    if not config.input_dir or not input_dir.is_dir():
        raise MissingInputError(f"input_dir not found: {config.input_dir!r}")
    model = _load_model(config.checkpoint)
    names = sorted(p.name for p in input_dir.glob("*.adnarr"))
    if not names:
        raise MissingInputError(f"no .adnarr images in {input_dir}")
    for name in names:
        image = read_image(input_dir / name)
        x_a = normalize_hu(image)
        out = infer_correction_image(model, x_a)
        corrected = denormalize_hu(out, pixel_spacing_mm=image.pixel_spacing_mm)
        stem = Path(name).stem
        write_image(out_dir / f"{stem}_corrected.adnarr", corrected)
        render_montage([[x_a, out]], path=out_dir / f"{stem}_montage.png")
    print(f"corrected {len(names)} images into {out_dir}")
    return EXIT_OK


def run_transfer(config: TransferConfig, out_dir: Path) -> int:
    _write_resolved(out_dir, config)
    for label, p in (("artifact_image", config.artifact_image), ("clean_image", config.clean_image)):
        if not p or not Path(p).exists():
            raise MissingInputError(f"{label} not found: {p!r}")
    model = _load_model(config.checkpoint)
    x_img = read_image(config.artifact_image)
    y_img = read_image(config.clean_image)
    x_a = normalize_hu(x_img)
    y = normalize_hu(y_img)
    transferred = artifact_transfer(model, x_a, y)
    write_image(out_dir / "transfer.adnarr", denormalize_hu(transferred))
    render_montage([[x_a, y, transferred]], path=out_dir / "transfer_montage.png")
    print(f"artifact transfer written to {out_dir}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adnmar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="synthesize phantom pairs with metal artifacts")
    _add_common(p_synth)
    p_synth.add_argument("--n", type=int, default=None, help="number of pairs")
    p_synth.add_argument("--size", type=int, default=None, help="image side length")

    p_curate = sub.add_parser("curate", help="group a directory of images by the clinical rules")
    _add_common(p_curate)
    p_curate.add_argument("--input", default=None, help="directory of .adnarr images")

    p_train = sub.add_parser("train", help="train on a synthesized dataset directory")
    _add_common(p_train)
    p_train.add_argument("--data", default=None, help="synth output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on withheld pairs")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--data", default=None, help="synth output directory with test pairs")

    p_infer = sub.add_parser("infer", help="correct a directory of artifact images")
    _add_common(p_infer)
    p_infer.add_argument("--checkpoint", default=None)
    p_infer.add_argument("--input", default=None, help="directory of .adnarr images")

    p_transfer = sub.add_parser("transfer", help="transplant an artifact onto a clean image")
    _add_common(p_transfer)
    p_transfer.add_argument("--checkpoint", default=None)
    p_transfer.add_argument("--artifact", default=None, help="artifact-affected .adnarr image")
    p_transfer.add_argument("--clean", default=None, help="artifact-free .adnarr image")

    return parser


_COMMANDS = {
    "synth": (SynthConfig, run_synth),
    "curate": (CurateConfig, run_curate),
    "train": (TrainCliConfig, run_train),
    "eval": (EvalConfig, run_eval),
    "infer": (InferConfig, run_infer),
    "transfer": (TransferConfig, run_transfer),
}

_DIRECT_KEYS = {
    "synth": {"n": "n", "size": "size", "seed": "seed"},
    "curate": {"input": "input_dir", "seed": "seed"},
    "train": {"data": "data_dir", "seed": "seed"},
    "eval": {"checkpoint": "checkpoint", "data": "data_dir", "seed": "seed"},
    "infer": {"checkpoint": "checkpoint", "input": "input_dir", "seed": "seed"},
    "transfer": {
        "checkpoint": "checkpoint",
        "artifact": "artifact_image",
        "clean": "clean_image",
        "seed": "seed",
    },
}


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("ADN_NUM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    args = parser.parse_args(argv)
    config_cls, runner = _COMMANDS[args.command]
    direct = {
        cfg_key: getattr(args, arg_name)
        for arg_name, cfg_key in _DIRECT_KEYS[args.command].items()
        if hasattr(args, arg_name)
    }
    try:
        config = resolve_config(config_cls, args.config, args.set, direct)
        return runner(config, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.last_report is not None:
            print(f"last finite report: {exc.last_report.as_dict()}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
