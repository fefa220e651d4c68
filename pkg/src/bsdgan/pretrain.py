"""Autoencoder pretraining on all real windows and per-class latent prior fitting."""
from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .arrayfile import read_array_file, write_array_file
from .data import LabeledDataset
from .errors import PriorError, TrainingDiverged
from .networks import ArchitectureDescriptor, Decoder, Encoder, build_autoencoder

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-4


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    patience: int = 10  # early stop on val MAE; <= 0 disables


@dataclass
class PretrainReport:
    train_mae: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    seed: int = 0


@dataclass
class LatentPrior:
    """Per-class diagonal Gaussian over the latent space, fitted from encodings."""

    means: np.ndarray  # [K, latent_dim] float32
    stds: np.ndarray  # [K, latent_dim] float32, >= STD_FLOOR

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float32)
        self.stds = np.asarray(self.stds, dtype=np.float32)
        if self.means.shape != self.stds.shape or self.means.ndim != 2:
            raise PriorError(f"means {self.means.shape} and stds {self.stds.shape} must both be [K, latent]")
        if not (np.isfinite(self.means).all() and np.isfinite(self.stds).all()):
            raise PriorError("prior contains non-finite entries")
        if (self.stds < STD_FLOOR).any():
            raise PriorError(f"prior stds below the {STD_FLOOR} clamp floor")

    @property
    def class_count(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def save(self, path: str | os.PathLike) -> Path:
        return write_array_file(
            path,
            "latent_prior",
            {"class_count": self.class_count, "latent_dim": self.latent_dim},
            {"means": self.means, "stds": self.stds},
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LatentPrior":
        header, arrays = read_array_file(path)
        if header.get("kind") != "latent_prior":
            raise PriorError(f"{Path(path).name}: not a latent prior file")
        return cls(means=arrays["means"], stds=arrays["stds"])


def mae_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if not (torch.isfinite(x).all() and torch.isfinite(x_hat).all()):
        raise ValueError("non-finite input to mae_loss")
    return (x - x_hat).abs().mean()


def _dataset_mae(encoder: Encoder, decoder: Decoder, values: torch.Tensor, batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(values), batch_size):
            batch = values[start : start + batch_size]
            total += float((batch - decoder(encoder(batch))).abs().sum())
    return total / values.numel() if values.numel() else 0.0


def train_autoencoder(
    train: LabeledDataset,
    val: Optional[LabeledDataset],
    descriptor: ArchitectureDescriptor,
    config: PretrainConfig,
    seed: int = 0,
) -> tuple[Encoder, Decoder, PretrainReport]:
    """Train the autoencoder on every class jointly, minimizing MAE.

    Returns the checkpoint with the best validation MAE (train MAE when no val
    split is given). Deterministic for a fixed seed on CPU.
    """
    if len(train) == 0:
        raise ValueError("train split is empty")
    encoder, decoder = build_autoencoder(descriptor, seed)
    report = PretrainReport(seed=seed)
    if config.epochs <= 0:
        return encoder, decoder, report

    train_values = torch.from_numpy(train.values)
    val_values = torch.from_numpy(val.values) if val is not None and len(val) else None
    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr, betas=(config.beta1, config.beta2))
    rng = np.random.default_rng(seed)

    best_metric = float("inf")
    best_state: Optional[tuple[dict, dict]] = None
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_values))
        epoch_abs = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = train_values[order[start : start + config.batch_size]]
            recon = decoder(encoder(batch))
            loss = (batch - recon).abs().mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"autoencoder loss became non-finite at epoch {epoch}", report=report)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_abs += float(loss.detach()) * batch.numel()
        train_mae = epoch_abs / train_values.numel()
        report.train_mae.append(train_mae)
        report.epochs_run = epoch + 1

        if val_values is not None:
            val_mae = _dataset_mae(encoder, decoder, val_values, config.batch_size)
            report.val_mae.append(val_mae)
            metric = val_mae
        else:
            metric = train_mae

        if metric < best_metric:
            best_metric = metric
            best_state = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(decoder.state_dict()))
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if config.patience > 0 and stale >= config.patience:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, report.best_epoch)
                break

    if best_state is not None:
        encoder.load_state_dict(best_state[0])
        decoder.load_state_dict(best_state[1])
    return encoder, decoder, report


def fit_latent_prior(encoder: Encoder, train: LabeledDataset, batch_size: int = 256) -> LatentPrior:
    """Fit per-class latent mean/std from encodings of the train split.

    Stds are population (ddof=0) and clamped at 1e-4, so single-window and
    duplicate-window classes land exactly on the clamp floor.
    """
    class_count = train.num_classes
    latent_dim = encoder.descriptor.latent_dim
    present = set(np.unique(train.labels).tolist())
    missing = [c for c in range(class_count) if c not in present]
    if missing:
        names = ", ".join(train.class_names[c] for c in missing)
        raise PriorError(f"no training windows for class(es): {names}")

    sums = np.zeros((class_count, latent_dim), dtype=np.float64)
    sq_sums = np.zeros((class_count, latent_dim), dtype=np.float64)
    counts = np.zeros(class_count, dtype=np.int64)
    values = torch.from_numpy(train.values)
    with torch.no_grad():
        for start in range(0, len(values), batch_size):
            latents = encoder(values[start : start + batch_size]).numpy().astype(np.float64)
            labels = train.labels[start : start + batch_size]
            np.add.at(sums, labels, latents)
            np.add.at(sq_sums, labels, latents**2)
            np.add.at(counts, labels, 1)

    means = sums / counts[:, None]
    variances = np.maximum(sq_sums / counts[:, None] - means**2, 0.0)
    stds = np.maximum(np.sqrt(variances), STD_FLOOR)
    return LatentPrior(means=means.astype(np.float32), stds=stds.astype(np.float32))
