"""Adversarial training core: gradient penalty, loss terms, and the GAN loop.

The discriminator maximizes log-probability of real windows under their true
label, of generated windows under FAKE, and of real windows NOT matching a
deliberately wrong label, regularized by a gradient penalty on real/generated
interpolates. The generator trains on the non-saturating form (maximize
log D(G(z|y)|y)), which shares fixed points with the saturating objective but
keeps early gradients alive. ``bsdgan_value`` reports the literal saturating
terms so tests can pin them independently of the training path.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch

from .arrayfile import read_array_file, write_array_file
from .data import LabeledDataset
from .errors import CheckpointError, PenaltyError, TrainingDiverged
from .networks import (
    ArchitectureDescriptor,
    Decoder,
    Discriminator,
    Encoder,
    Generator,
    build_discriminator,
    build_generator,
    class_probability,
)

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
LOSS_CURVE_COLUMNS = ("step", "epoch", "d_loss", "g_loss", "real_term", "fake_term", "wrong_term", "gp_term")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 128
    epochs: int = 100
    lambda_gp: float = 10.0
    critic_steps: int = 1
    generator_steps: int = 1  # generator updates per optimization round
    fake_loss: str = "fake_index"  # or "literal": -log(1 - D(x_g|y_g)) without a FAKE push
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be non-negative")
        if self.critic_steps < 1:
            raise ValueError("critic_steps must be at least 1")
        if self.generator_steps < 1:
            raise ValueError("generator_steps must be at least 1")
        if self.fake_loss not in ("fake_index", "literal"):
            raise ValueError("fake_loss must be 'fake_index' or 'literal'")


@dataclass
class LossBreakdown:
    """Literal loss terms: three expectation-of-log terms plus the penalty.

    ``total_d = real_term + fake_term + wrong_label_term + lambda_gp * gp_term``
    and ``total_g`` is the generator-side (saturating) term.
    """

    real_term: float
    fake_term: float
    wrong_label_term: float
    gp_term: float
    lambda_gp: float

    @property
    def total_d(self) -> float:
        return self.real_term + self.fake_term + self.wrong_label_term + self.lambda_gp * self.gp_term

    @property
    def total_g(self) -> float:
        return self.fake_term


class StepDraws(NamedTuple):
    """Random draws one optimization step consumes (injectable for tests)."""

    z: torch.Tensor
    y_g: torch.Tensor
    y_wrong: Optional[torch.Tensor]
    alpha: Optional[torch.Tensor]


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP))


def sample_balanced_labels(n: int, class_count: int, gen: torch.Generator) -> torch.Tensor:
    """Labels for generated data: uniform over the balanced class set."""
    return torch.randint(0, class_count, (n,), generator=gen)


def sample_wrong_labels(y_r: torch.Tensor, class_count: int, gen: torch.Generator) -> torch.Tensor:
    """Per-sample uniform draw over the classes other than the true one."""
    if class_count < 2:
        raise ValueError("wrong-label sampling needs at least 2 classes")
    shift = torch.randint(1, class_count, y_r.shape, generator=gen)
    return (y_r + shift) % class_count


def interpolate(x_r: torch.Tensor, x_g: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """Per-sample convex combination ``alpha * x_r + (1 - alpha) * x_g``."""
    if x_r.shape != x_g.shape:
        raise ValueError(f"real/generated batch shapes differ: {tuple(x_r.shape)} vs {tuple(x_g.shape)}")
    a = alpha.view(-1, *([1] * (x_r.dim() - 1))).to(x_r.dtype)
    return a * x_r.detach() + (1.0 - a) * x_g.detach()


def input_gradient_norms(
    score_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    y: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Per-sample L2 norm of the analytic gradient of score_fn w.r.t. its input.

    ``score_fn(x, y)`` must return one scalar per sample and treat samples
    independently, which holds for every network in this package.
    """
    x = x.detach().requires_grad_(True)
    scores = score_fn(x, y)
    if scores.requires_grad:
        grads = torch.autograd.grad(
            scores.sum(), x, create_graph=create_graph, allow_unused=True
        )[0]
        if grads is None:
            grads = torch.zeros_like(x)
    else:
        # constant score functions have an identically zero gradient
        grads = torch.zeros_like(x)
    norms = grads.flatten(1).norm(2, dim=1)
    if not torch.isfinite(norms).all():
        raise PenaltyError("non-finite interpolate gradient")
    return norms


def gradient_penalty(
    score_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x_r: torch.Tensor,
    x_g: torch.Tensor,
    y_r: torch.Tensor,
    alpha: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Mean squared deviation of interpolate-gradient norms from 1.

    For the BSDGAN discriminator the per-sample scalar is the softmax
    probability at the conditioning label.
    """
    x_hat = interpolate(x_r, x_g, alpha)
    norms = input_gradient_norms(score_fn, x_hat, y_r, create_graph=create_graph)
    return ((norms - 1.0) ** 2).mean()


def bsdgan_value(
    discriminate_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    generate_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    z: torch.Tensor,
    y_g: torch.Tensor,
    y_wrong: torch.Tensor,
    lambda_gp: float,
    alpha: torch.Tensor,
) -> LossBreakdown:
    """Evaluate the literal objective terms on one batch (reporting only).

    ``discriminate_fn`` returns a (K+1)-simplex row per sample; log arguments
    are clamped to [1e-7, 1 - 1e-7].
    """
    if bool((y_wrong == y_r).any()):
        raise ValueError("y_wrong must differ from y_r everywhere")
    with torch.no_grad():
        x_g = generate_fn(z, y_g)
        p_real = class_probability(discriminate_fn(x_r, y_r), y_r)
        real_term = float(_clamped_log(p_real).mean())
        p_gen = class_probability(discriminate_fn(x_g, y_g), y_g)
        fake_term = float(_clamped_log(1.0 - p_gen).mean())
        p_wrong = class_probability(discriminate_fn(x_r, y_wrong), y_wrong)
        wrong_term = float(_clamped_log(1.0 - p_wrong).mean())
    gp = float(
        gradient_penalty(
            lambda x, y: class_probability(discriminate_fn(x, y), y), x_r, x_g, y_r, alpha
        )
    )
    return LossBreakdown(
        real_term=real_term,
        fake_term=fake_term,
        wrong_label_term=wrong_term,
        gp_term=gp,
        lambda_gp=float(lambda_gp),
    )


def discriminator_training_loss(
    generator: Generator,
    discriminator: Discriminator,
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    draws: StepDraws,
    lambda_gp: float,
    fake_loss: str = "fake_index",
) -> tuple[torch.Tensor, LossBreakdown]:
    """Discriminator minimization objective plus the literal term breakdown.

    ``fake_loss='fake_index'`` trains the generated-data term as cross-entropy
    to the FAKE index; ``'literal'`` trains the stated ``-log(1 - D(x_g|y_g))``
    form, which suppresses the conditioning class without boosting FAKE. The
    breakdown always reports the literal value.
    """
    fake_index = discriminator.fake_index
    with torch.no_grad():
        x_g = generator(draws.z, draws.y_g)
    probs_real = discriminator(x_r, y_r)
    p_real = class_probability(probs_real, y_r)
    probs_gen = discriminator(x_g, draws.y_g)
    p_gen_literal = class_probability(probs_gen, draws.y_g)
    probs_wrong = discriminator(x_r, draws.y_wrong)
    p_wrong = class_probability(probs_wrong, draws.y_wrong)

    gp = gradient_penalty(
        lambda x, y: class_probability(discriminator(x, y), y),
        x_r,
        x_g,
        y_r,
        draws.alpha,
        create_graph=True,
    )
    if fake_loss == "fake_index":
        fake_term_loss = -_clamped_log(probs_gen[:, fake_index]).mean()
    else:
        fake_term_loss = -_clamped_log(1.0 - p_gen_literal).mean()
    loss = (
        -_clamped_log(p_real).mean()
        + fake_term_loss
        - _clamped_log(1.0 - p_wrong).mean()
        + lambda_gp * gp
    )
    breakdown = LossBreakdown(
        real_term=float(_clamped_log(p_real).mean().detach()),
        fake_term=float(_clamped_log(1.0 - p_gen_literal).mean().detach()),
        wrong_label_term=float(_clamped_log(1.0 - p_wrong).mean().detach()),
        gp_term=float(gp.detach()),
        lambda_gp=float(lambda_gp),
    )
    return loss, breakdown


def generator_training_loss(
    generator: Generator,
    discriminator: Discriminator,
    z: torch.Tensor,
    y_g: torch.Tensor,
) -> torch.Tensor:
    """Non-saturating generator objective: -mean log D(G(z|y)|y)."""
    probs = discriminator(generator(z, y_g), y_g)
    return -_clamped_log(class_probability(probs, y_g)).mean()


@dataclass
class GanTrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    torch_gen: torch.Generator
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def init_train_state(
    encoder: Encoder,
    decoder: Decoder,
    prior,
    config: TrainConfig,
) -> GanTrainState:
    """Build generator/discriminator from the pretrained autoencoder and prior."""
    class_count = encoder.descriptor.class_count
    generator = build_generator(decoder, prior, seed=config.seed)
    discriminator = build_discriminator(encoder, class_count, seed=config.seed + 1)
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    torch_gen = torch.Generator().manual_seed(config.seed)
    return GanTrainState(
        generator=generator,
        discriminator=discriminator,
        opt_g=opt_g,
        opt_d=opt_d,
        torch_gen=torch_gen,
        config=config,
    )


def _draw(state: GanTrainState, n: int, with_wrong: Optional[torch.Tensor]) -> StepDraws:
    latent = state.generator.descriptor.latent_dim
    class_count = state.generator.descriptor.class_count
    z = torch.randn(n, latent, generator=state.torch_gen)
    y_g = sample_balanced_labels(n, class_count, state.torch_gen)
    y_wrong = None
    alpha = None
    if with_wrong is not None:
        y_wrong = sample_wrong_labels(with_wrong, class_count, state.torch_gen)
        alpha = torch.rand(n, generator=state.torch_gen)
    return StepDraws(z=z, y_g=y_g, y_wrong=y_wrong, alpha=alpha)


def discriminator_step(
    state: GanTrainState,
    x_r: torch.Tensor,
    y_r: torch.Tensor,
    draws: Optional[StepDraws] = None,
) -> tuple[float, LossBreakdown]:
    """One Adam update of the discriminator; generator parameters untouched.

    Returns (training loss, literal term breakdown) for the consumed batch.
    """
    if len(x_r) < 2:
        raise ValueError("discriminator step needs a batch of at least 2")
    if draws is None:
        draws = _draw(state, len(x_r), with_wrong=y_r)
    loss, breakdown = discriminator_training_loss(
        state.generator,
        state.discriminator,
        x_r,
        y_r,
        draws,
        state.config.lambda_gp,
        fake_loss=state.config.fake_loss,
    )
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"discriminator loss non-finite at step {state.step}")
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()
    return float(loss.detach()), breakdown


def generator_step(state: GanTrainState, draws: Optional[StepDraws] = None) -> float:
    """One Adam update of the generator; discriminator parameters untouched."""
    if draws is None:
        draws = _draw(state, state.config.batch_size, with_wrong=None)
    loss = generator_training_loss(state.generator, state.discriminator, draws.z, draws.y_g)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"generator loss non-finite at step {state.step}")
    state.opt_g.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_g.step()
    return float(loss.detach())


def train_gan(
    train: LabeledDataset,
    encoder: Encoder,
    decoder: Decoder,
    prior,
    config: TrainConfig,
    epoch_callback: Optional[Callable[[GanTrainState], None]] = None,
    state: Optional[GanTrainState] = None,
) -> GanTrainState:
    """Alternate critic/generator updates over the train split.

    One optimization round = one discriminator step plus (every
    ``critic_steps`` rounds) one generator step; each round appends one loss
    row to the state's history. Pass ``state`` to resume.
    """
    if state is None:
        state = init_train_state(encoder, decoder, prior, config)
    state.config = config
    values = torch.from_numpy(train.values)
    labels = torch.from_numpy(train.labels)
    last_g_loss = float("nan")

    while state.epoch < config.epochs:
        # batch order is a pure function of (seed, epoch) so resumed runs
        # replay exactly what an uninterrupted run would have done
        rng = np.random.default_rng((config.seed, state.epoch))
        order = rng.permutation(len(values))
        round_in_epoch = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            x_r = values[idx]
            y_r = labels[idx]
            d_loss, breakdown = discriminator_step(state, x_r, y_r)
            if round_in_epoch % config.critic_steps == config.critic_steps - 1:
                for _ in range(config.generator_steps):
                    last_g_loss = generator_step(state)
            state.step += 1
            round_in_epoch += 1
            state.history.append(
                {
                    "step": state.step,
                    "epoch": state.epoch,
                    "d_loss": d_loss,
                    "g_loss": last_g_loss,
                    "real_term": breakdown.real_term,
                    "fake_term": breakdown.fake_term,
                    "wrong_term": breakdown.wrong_label_term,
                    "gp_term": breakdown.gp_term,
                }
            )
        state.epoch += 1
        if epoch_callback is not None:
            epoch_callback(state)
    return state


def write_loss_curve(history: list[dict], path: str | os.PathLike) -> Path:
    """Write the per-round loss table as plain text (tab separated)."""
    path = Path(path)
    lines = ["\t".join(LOSS_CURVE_COLUMNS)]
    for row in history:
        lines.append(
            "\t".join(
                str(row[c]) if c in ("step", "epoch") else f"{row[c]:.6e}" for c in LOSS_CURVE_COLUMNS
            )
        )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# Full train-state persistence (modules + optimizer moments + counters)
# ---------------------------------------------------------------------------

def save_train_state(state: GanTrainState, path: str | os.PathLike) -> Path:
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in (("gen", state.generator), ("disc", state.discriminator)):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    opt_meta = {}
    for prefix, opt in (("optg", state.opt_g), ("optd", state.opt_d)):
        sd = opt.state_dict()
        opt_meta[prefix] = {"param_groups": sd["param_groups"], "ids": sorted(sd["state"])}
        for pid, slots in sd["state"].items():
            for slot, tensor in slots.items():
                arrays[f"{prefix}.{pid}.{slot}"] = tensor.detach().cpu().numpy()
    # byte tensors survive the float32 array format exactly (values 0..255)
    arrays["rng_state"] = state.torch_gen.get_state().numpy().astype(np.float32)
    if state.history:
        arrays["history"] = np.asarray(
            [[row[c] for c in LOSS_CURVE_COLUMNS] for row in state.history], dtype=np.float32
        )
    meta = {
        "descriptor": state.generator.descriptor.to_dict(),
        "config": {
            "lr": state.config.lr,
            "beta1": state.config.beta1,
            "beta2": state.config.beta2,
            "batch_size": state.config.batch_size,
            "epochs": state.config.epochs,
            "lambda_gp": state.config.lambda_gp,
            "critic_steps": state.config.critic_steps,
            "generator_steps": state.config.generator_steps,
            "fake_loss": state.config.fake_loss,
            "seed": state.config.seed,
        },
        "step": state.step,
        "epoch": state.epoch,
        "optimizers": opt_meta,
    }
    return write_array_file(path, "gan_train_state", meta, arrays)


def load_train_state(path: str | os.PathLike) -> GanTrainState:
    header, arrays = read_array_file(path)
    if header.get("kind") != "gan_train_state":
        raise CheckpointError(f"{Path(path).name}: not a GAN train state file")
    descriptor = ArchitectureDescriptor.from_dict(header["descriptor"])
    config = TrainConfig(**header["config"])
    generator = Generator(descriptor)
    discriminator = Discriminator(descriptor)
    for prefix, module in (("gen", generator), ("disc", discriminator)):
        sd = module.state_dict()
        for name in sd:
            key = f"{prefix}.{name}"
            if key not in arrays or tuple(arrays[key].shape) != tuple(sd[name].shape):
                raise CheckpointError(f"{Path(path).name}: bad or missing array {key}")
        module.load_state_dict({n: torch.from_numpy(arrays[f"{prefix}.{n}"].copy()) for n in sd})
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    for prefix, opt in (("optg", opt_g), ("optd", opt_d)):
        meta = header["optimizers"][prefix]
        opt_state: dict = {}
        for pid in meta["ids"]:
            slots = {}
            for key, arr in arrays.items():
                lead = f"{prefix}.{pid}."
                if key.startswith(lead):
                    slots[key[len(lead):]] = torch.from_numpy(arr.copy())
            opt_state[int(pid)] = slots
        opt.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    torch_gen = torch.Generator()
    torch_gen.set_state(torch.from_numpy(arrays["rng_state"].astype(np.uint8)))
    history = []
    if "history" in arrays:
        for row in arrays["history"]:
            entry = {c: float(v) for c, v in zip(LOSS_CURVE_COLUMNS, row)}
            entry["step"] = int(entry["step"])
            entry["epoch"] = int(entry["epoch"])
            history.append(entry)
    return GanTrainState(
        generator=generator,
        discriminator=discriminator,
        opt_g=opt_g,
        opt_d=opt_d,
        torch_gen=torch_gen,
        config=config,
        step=int(header["step"]),
        epoch=int(header["epoch"]),
        history=history,
    )
