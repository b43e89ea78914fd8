"""Unsupervised training loop over unpaired artifact/clean draws.

Each iteration runs one discriminator update followed by one
generator/encoder update on a freshly sampled unpaired batch; losses are
logged as JSON lines and checkpoints are written periodically in the
``adn-ckpt-1`` format. Given a seed, a config and a dataset, the run is
bit-for-bit reproducible on a fixed backend, and resuming from a
checkpoint continues the exact same trajectory.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .arrays import HUWindow
from .checkpoint import (
    load_checkpoint,
    restore_model,
    restore_optimizer,
    restore_torch_rng,
    save_checkpoint,
)
from .curation import GroupedDataset, sample_unpaired
from .errors import NumericError
from .losses import (
    LossReport,
    LossWeights,
    adv_loss_artifact,
    adv_loss_clean,
    artifact_consistency_loss,
    cycle_loss,
    recon_loss,
    total_loss,
)
from .networks import AdnModel, NetworkConfig, build_model

ADAM_BETAS = (0.5, 0.999)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 500
    image_size: int = 64
    gan_mode: str = "nonsaturating"
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    resume: str = ""

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")

    def to_flat_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "image_size": self.image_size,
            "gan_mode": self.gan_mode,
            "lambda_adv_clean": self.weights.adv_clean,
            "lambda_adv_artifact": self.weights.adv_artifact,
            "lambda_recon": self.weights.recon,
            "lambda_cycle": self.weights.cycle,
            "lambda_art": self.weights.art,
            "base_channels": self.network.base_channels,
            "n_res_blocks": self.network.n_res_blocks,
            "disc_layers": self.network.disc_layers,
            "padding_mode": self.network.padding_mode,
            "resume": self.resume,
        }

    @staticmethod
    def from_flat_dict(d: dict) -> "TrainConfig":
        known = {
            "learning_rate",
            "iterations",
            "batch_size",
            "seed",
            "checkpoint_every",
            "image_size",
            "gan_mode",
            "lambda_adv_clean",
            "lambda_adv_artifact",
            "lambda_recon",
            "lambda_cycle",
            "lambda_art",
            "base_channels",
            "n_res_blocks",
            "disc_layers",
            "padding_mode",
            "resume",
        }
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config key: {sorted(unknown)[0]}")
        base = TrainConfig()
        weights = LossWeights(
            adv_clean=float(d.get("lambda_adv_clean", base.weights.adv_clean)),
            adv_artifact=float(d.get("lambda_adv_artifact", base.weights.adv_artifact)),
            recon=float(d.get("lambda_recon", base.weights.recon)),
            cycle=float(d.get("lambda_cycle", base.weights.cycle)),
            art=float(d.get("lambda_art", base.weights.art)),
        )
        network = NetworkConfig(
            base_channels=int(d.get("base_channels", base.network.base_channels)),
            n_res_blocks=int(d.get("n_res_blocks", base.network.n_res_blocks)),
            disc_layers=int(d.get("disc_layers", base.network.disc_layers)),
            padding_mode=str(d.get("padding_mode", base.network.padding_mode)),
        )
        return TrainConfig(
            learning_rate=float(d.get("learning_rate", base.learning_rate)),
            iterations=int(d.get("iterations", base.iterations)),
            batch_size=int(d.get("batch_size", base.batch_size)),
            seed=int(d.get("seed", base.seed)),
            checkpoint_every=int(d.get("checkpoint_every", base.checkpoint_every)),
            image_size=int(d.get("image_size", base.image_size)),
            gan_mode=str(d.get("gan_mode", base.gan_mode)),
            weights=weights,
            network=network,
            resume=str(d.get("resume", "")),
        )


@dataclass
class ForwardOutputs:
    """All tensors produced by one pass of the translation graph."""

    x_corrected: torch.Tensor  # clean decode of the artifact image's content
    xa_recon: torch.Tensor  # artifact image rebuilt from its own content + artifact
    y_recon: torch.Tensor  # clean image rebuilt from its own content
    ya_transfer: torch.Tensor  # artifact transplanted onto the clean image
    y_cycled: torch.Tensor  # correction of the transfer output
    content_artifact: torch.Tensor
    content_clean: torch.Tensor
    artifact_code: tuple[torch.Tensor, ...]


def forward_graph(model: AdnModel, x_a: torch.Tensor, y: torch.Tensor) -> ForwardOutputs:
    """Run the full translation graph on one unpaired batch."""
    if x_a.shape != y.shape:
        raise ValueError(f"unpaired batch shapes differ: {tuple(x_a.shape)} vs {tuple(y.shape)}")
    z_x = model.encode_content_artifact(x_a)
    z_y = model.encode_content_clean(y)
    z_a = model.encode_artifact(x_a)
    x_corrected = model.decode_clean(z_x)
    xa_recon = model.decode_artifact(z_x, z_a)
    y_recon = model.decode_clean(z_y)
    ya_transfer = model.decode_artifact(z_y, z_a)
    y_cycled = model.decode_clean(model.encode_content_artifact(ya_transfer))
    return ForwardOutputs(
        x_corrected=x_corrected,
        xa_recon=xa_recon,
        y_recon=y_recon,
        ya_transfer=ya_transfer,
        y_cycled=y_cycled,
        content_artifact=z_x,
        content_clean=z_y,
        artifact_code=z_a,
    )


@dataclass
class TrainState:
    model: AdnModel
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    step: int
    rng: np.random.Generator
    config: TrainConfig
    last_report: LossReport | None = None


def init_train_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = build_model(config.network)
    gen_opt = torch.optim.Adam(
        list(model.generator_parameters()), lr=config.learning_rate, betas=ADAM_BETAS
    )
    disc_opt = torch.optim.Adam(
        list(model.discriminator_parameters()), lr=config.learning_rate, betas=ADAM_BETAS
    )
    rng = np.random.default_rng(config.seed)
    return TrainState(model=model, gen_opt=gen_opt, disc_opt=disc_opt, step=0, rng=rng, config=config)


def resume_train_state(config: TrainConfig, checkpoint_path) -> TrainState:
    ckpt = load_checkpoint(checkpoint_path)
    config = replace(config, network=ckpt.network_config)
    model = restore_model(ckpt)
    gen_opt = torch.optim.Adam(
        list(model.generator_parameters()), lr=config.learning_rate, betas=ADAM_BETAS
    )
    disc_opt = torch.optim.Adam(
        list(model.discriminator_parameters()), lr=config.learning_rate, betas=ADAM_BETAS
    )
    restore_optimizer(gen_opt, ckpt, "generator")
    restore_optimizer(disc_opt, ckpt, "discriminator")
    restore_torch_rng(ckpt)
    rng = np.random.default_rng(config.seed)
    if ckpt.numpy_rng_state is not None:
        rng.bit_generator.state = ckpt.numpy_rng_state
    return TrainState(
        model=model, gen_opt=gen_opt, disc_opt=disc_opt, step=ckpt.step, rng=rng, config=config
    )


def save_train_state(state: TrainState, path) -> None:
    # `resume` is invocation plumbing, not state: keeping it would make
    # otherwise-identical trajectories produce different archives.
    flat = state.config.to_flat_dict()
    flat.pop("resume", None)
    save_checkpoint(
        path,
        state.model,
        optimizers={"generator": state.gen_opt, "discriminator": state.disc_opt},
        step=state.step,
        numpy_rng_state=state.rng.bit_generator.state,
        extra_config=flat,
        seeds={"seed": state.config.seed},
    )


def discriminator_substep(
    state: TrainState, x_a: torch.Tensor, y: torch.Tensor, outputs: ForwardOutputs
) -> tuple[torch.Tensor, torch.Tensor]:
    """Update both discriminators on detached fakes."""
    model = state.model
    cfg = state.config
    state.disc_opt.zero_grad(set_to_none=True)
    d_loss_clean = adv_loss_clean(
        model.clean_discriminator(y),
        model.clean_discriminator(outputs.x_corrected.detach()),
        role="discriminator",
        gan_mode=cfg.gan_mode,
    )
    d_loss_artifact = adv_loss_artifact(
        model.artifact_discriminator(x_a),
        model.artifact_discriminator(outputs.ya_transfer.detach()),
        role="discriminator",
        gan_mode=cfg.gan_mode,
    )
    (d_loss_clean + d_loss_artifact).backward()
    state.disc_opt.step()
    return d_loss_clean, d_loss_artifact


def generator_substep(
    state: TrainState, x_a: torch.Tensor, y: torch.Tensor, outputs: ForwardOutputs
) -> dict[str, torch.Tensor]:
    """Update all five encoder/generator networks against the current discriminators."""
    model = state.model
    cfg = state.config
    state.gen_opt.zero_grad(set_to_none=True)
    adv_clean_term = adv_loss_clean(
        None, model.clean_discriminator(outputs.x_corrected), role="generator", gan_mode=cfg.gan_mode
    )
    adv_artifact_term = adv_loss_artifact(
        None, model.artifact_discriminator(outputs.ya_transfer), role="generator", gan_mode=cfg.gan_mode
    )
    recon_term = recon_loss(outputs.xa_recon, x_a, outputs.y_recon, y)
    cycle_term = cycle_loss(outputs.y_cycled, y)
    art_term = artifact_consistency_loss(x_a, outputs.x_corrected, outputs.ya_transfer, y)
    gen_total = total_loss(
        adv_clean_term, adv_artifact_term, recon_term, cycle_term, art_term, cfg.weights
    )
    gen_total.backward()
    state.gen_opt.step()
    return {
        "adv_clean": adv_clean_term,
        "adv_artifact": adv_artifact_term,
        "recon": recon_term,
        "cycle": cycle_term,
        "art": art_term,
        "total": gen_total,
    }


def train_step(state: TrainState, x_a: torch.Tensor, y: torch.Tensor) -> LossReport:
    """One discriminator update, then one generator/encoder update."""
    model = state.model
    model.train()

    outputs = forward_graph(model, x_a, y)
    d_loss_clean, d_loss_artifact = discriminator_substep(state, x_a, y, outputs)
    terms = generator_substep(state, x_a, y, outputs)
    adv_clean_term = terms["adv_clean"]
    adv_artifact_term = terms["adv_artifact"]
    recon_term = terms["recon"]
    cycle_term = terms["cycle"]
    art_term = terms["art"]
    gen_total = terms["total"]

    report = LossReport(
        adv_clean=adv_clean_term.detach().item(),
        adv_artifact=adv_artifact_term.detach().item(),
        recon=recon_term.detach().item(),
        cycle=cycle_term.detach().item(),
        art=art_term.detach().item(),
        total=gen_total.detach().item(),
        d_clean=d_loss_clean.detach().item(),
        d_artifact=d_loss_artifact.detach().item(),
    )
    state.step += 1
    if not report.is_finite():
        raise NumericError(
            f"non-finite loss at step {state.step}", last_report=state.last_report
        )
    state.last_report = report
    return report


def _prepare_batch(state: TrainState, dataset: GroupedDataset, window: HUWindow) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    size = state.config.image_size
    for _ in range(state.config.batch_size):
        batch = sample_unpaired(dataset, state.rng, window)
        xs.append(_fit_image(batch.x_a.pixels, size))
        ys.append(_fit_image(batch.y.pixels, size))
    x = torch.from_numpy(np.stack(xs)[:, None, :, :])
    y = torch.from_numpy(np.stack(ys)[:, None, :, :])
    return x, y


def _fit_image(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than configured size {size}")
    if h == size and w == size:
        return pixels
    top = (h - size) // 2
    left = (w - size) // 2
    return pixels[top : top + size, left : left + size]


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: Path
    log_path: Path


def train(
    config: TrainConfig,
    dataset: GroupedDataset,
    out_dir,
    window: HUWindow | None = None,
) -> TrainResult:
    """Run (or resume) training; writes checkpoints and a JSON-lines loss log."""
    if not dataset.artifact_group or not dataset.clean_group:
        raise RuntimeError("dataset has an empty group; nothing to train on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    if window is None:
        window = HUWindow()

    if config.resume:
        state = resume_train_state(config, config.resume)
    else:
        state = init_train_state(config)

    log_path = out_dir / "loss_log.jsonl"
    ckpt_path = out_dir / "checkpoint_final.zip"
    with open(log_path, "a" if config.resume else "w") as log:
        while state.step < config.iterations:
            x, y = _prepare_batch(state, dataset, window)
            report = train_step(state, x, y)
            record = {"step": state.step, "wall_time": time.time(), **report.as_dict()}
            log.write(json.dumps(record) + "\n")
            if config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
                save_train_state(state, out_dir / f"checkpoint_{state.step:07d}.zip")
    save_train_state(state, ckpt_path)
    return TrainResult(state=state, checkpoint_path=ckpt_path, log_path=log_path)
