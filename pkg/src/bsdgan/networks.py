"""Network architectures: 1D-conv autoencoder, conditional generator, discriminator.

The generator is an embedding layer feeding a transplanted copy of the
pretrained decoder; the discriminator reuses the pretrained encoder's conv
trunk (the final latent projection dropped), fuses a label embedding into the
flattened feature map, and ends in a (K+1)-way softmax whose last index means
"generated". Transplants copy parameters by name and shape, exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .arrayfile import read_array_file, write_array_file
from .errors import CheckpointError, DescriptorError

FAKE_OFFSET = 1  # softmax head width is class_count + FAKE_OFFSET

_ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "tanh": nn.Tanh,
    "elu": nn.ELU,
}


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Hyperparameters that fully determine every network's layer shapes."""

    input_shape: tuple[int, int]  # (channels, T)
    latent_dim: int = 100
    conv_blocks: tuple[tuple[int, int, int], ...] = ((32, 5, 2), (64, 5, 2), (128, 5, 2))
    activations: tuple[str, ...] = ("leaky_relu", "leaky_relu", "leaky_relu")
    class_count: int = 2
    label_embed_dim: int = 32
    fusion_width: int = 128
    paddings: Optional[tuple[int, ...]] = None  # default: kernel // 2 per block

    @property
    def channels(self) -> int:
        return int(self.input_shape[0])

    @property
    def length(self) -> int:
        return int(self.input_shape[1])

    def padding(self, i: int) -> int:
        if self.paddings is not None:
            return int(self.paddings[i])
        return self.conv_blocks[i][1] // 2

    def plan(self) -> "LayerPlan":
        """Validate the descriptor and derive the exact per-layer geometry."""
        if self.latent_dim <= 0:
            raise DescriptorError("latent_dim must be positive")
        if self.class_count < 2:
            raise DescriptorError("class_count must be at least 2")
        if self.channels < 1 or self.length < 1:
            raise DescriptorError(f"invalid input shape {self.input_shape}")
        if not self.conv_blocks:
            raise DescriptorError("at least one conv block is required")
        if len(self.activations) != len(self.conv_blocks):
            raise DescriptorError("one activation name per conv block is required")
        for name in self.activations:
            if name not in _ACTIVATIONS:
                raise DescriptorError(f"unknown activation {name!r} (choices: {sorted(_ACTIVATIONS)})")
        if self.paddings is not None and len(self.paddings) != len(self.conv_blocks):
            raise DescriptorError("one padding per conv block is required")

        geometry = self._geometry(self.length)
        if geometry is None:
            raise DescriptorError(
                f"conv/transposed-conv stack cannot restore length {self.length}; "
                f"feasible T near this one: {self._feasible_lengths()}"
            )
        lengths, out_paddings = geometry
        flat_dim = self.conv_blocks[-1][0] * lengths[-1]
        return LayerPlan(lengths=lengths, output_paddings=out_paddings, flat_dim=flat_dim)

    def _geometry(self, length: int) -> Optional[tuple[list[int], list[int]]]:
        """Encoder lengths plus decoder output paddings for one input length, or None."""
        lengths = [length]
        for i, (_, kernel, stride) in enumerate(self.conv_blocks):
            if kernel < 1 or stride < 1:
                raise DescriptorError(f"block {i}: kernel and stride must be >= 1")
            nxt = (lengths[-1] + 2 * self.padding(i) - kernel) // stride + 1
            if nxt < 1:
                return None
            lengths.append(nxt)
        out_paddings = []
        for i in reversed(range(len(self.conv_blocks))):
            _, kernel, stride = self.conv_blocks[i]
            l_in, target = lengths[i + 1], lengths[i]
            op = target - ((l_in - 1) * stride - 2 * self.padding(i) + kernel)
            if not 0 <= op < max(stride, 1):
                return None
            out_paddings.append(op)
        out_paddings.reverse()
        return lengths, out_paddings

    def _feasible_lengths(self, limit: int = 8) -> list[int]:
        feasible = []
        for t in range(1, max(4 * self.length, 64)):
            if self._geometry(t) is not None:
                feasible.append(t)
                if len(feasible) >= limit:
                    break
        return feasible

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "latent_dim": self.latent_dim,
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "activations": list(self.activations),
            "class_count": self.class_count,
            "label_embed_dim": self.label_embed_dim,
            "fusion_width": self.fusion_width,
            "paddings": None if self.paddings is None else list(self.paddings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureDescriptor":
        return cls(
            input_shape=tuple(d["input_shape"]),
            latent_dim=int(d["latent_dim"]),
            conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
            activations=tuple(d["activations"]),
            class_count=int(d["class_count"]),
            label_embed_dim=int(d["label_embed_dim"]),
            fusion_width=int(d["fusion_width"]),
            paddings=None if d.get("paddings") is None else tuple(d["paddings"]),
        )


@dataclass
class LayerPlan:
    lengths: list[int]  # feature-map length after each conv block (index 0 = T)
    output_paddings: list[int]
    flat_dim: int


def _conv_trunk(desc: ArchitectureDescriptor) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = desc.channels
    for i, (filters, kernel, stride) in enumerate(desc.conv_blocks):
        layers.append(nn.Conv1d(in_ch, filters, kernel, stride=stride, padding=desc.padding(i)))
        layers.append(_ACTIVATIONS[desc.activations[i]]())
        in_ch = filters
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Conv trunk + dense projection onto the latent space."""

    role = "encoder"

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        plan = descriptor.plan()
        self.blocks = _conv_trunk(descriptor)
        self.to_latent = nn.Linear(plan.flat_dim, descriptor.latent_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.blocks(x).flatten(1))


class Decoder(nn.Module):
    """Dense expansion + mirrored transposed-conv stack restoring (channels, T)."""

    role = "decoder"

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        plan = descriptor.plan()
        self._bottom_len = plan.lengths[-1]
        self._bottom_ch = descriptor.conv_blocks[-1][0]
        self.from_latent = nn.Linear(descriptor.latent_dim, plan.flat_dim)
        layers: list[nn.Module] = []
        n = len(descriptor.conv_blocks)
        for i in reversed(range(n)):
            filters, kernel, stride = descriptor.conv_blocks[i]
            out_ch = descriptor.channels if i == 0 else descriptor.conv_blocks[i - 1][0]
            layers.append(
                nn.ConvTranspose1d(
                    filters,
                    out_ch,
                    kernel,
                    stride=stride,
                    padding=descriptor.padding(i),
                    output_padding=plan.output_paddings[i],
                )
            )
            if i > 0:
                layers.append(_ACTIVATIONS[descriptor.activations[i - 1]]())
        self.blocks = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(z).view(-1, self._bottom_ch, self._bottom_len)
        return self.blocks(h)


class Generator(nn.Module):
    """Label embedding (initialized to per-class latent means) + pretrained decoder.

    The decoder input for class ``c`` is ``embed(c) + scale[c] * z`` with z the
    caller's noise; ``scale`` holds the latent prior's per-class std and is a
    fixed buffer, while the embedding and decoder train adversarially.
    """

    role = "generator"

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        self.label_embed = nn.Embedding(descriptor.class_count, descriptor.latent_dim)
        self.register_buffer(
            "latent_scale", torch.ones(descriptor.class_count, descriptor.latent_dim)
        )
        self.decoder = Decoder(descriptor)

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        base = self.label_embed(labels) + self.latent_scale[labels] * z
        return self.decoder(base)


class Discriminator(nn.Module):
    """Encoder trunk + label-conditioned dense fusion + (K+1)-way softmax head."""

    role = "discriminator"

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        plan = descriptor.plan()
        self.blocks = _conv_trunk(descriptor)
        self.label_embed = nn.Embedding(descriptor.class_count, descriptor.label_embed_dim)
        self.fusion = nn.Linear(plan.flat_dim + descriptor.label_embed_dim, descriptor.fusion_width)
        self.fusion_act = _ACTIVATIONS[descriptor.activations[-1]]()
        self.head = nn.Linear(descriptor.fusion_width, descriptor.class_count + FAKE_OFFSET)

    @property
    def fake_index(self) -> int:
        return self.descriptor.class_count

    def forward(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        feats = self.blocks(x).flatten(1)
        h = torch.cat([feats, self.label_embed(labels)], dim=1)
        h = self.fusion_act(self.fusion(h))
        return torch.softmax(self.head(h), dim=1)


def class_probability(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """D(x|y): the softmax probability at each sample's conditioning label."""
    return probs.gather(1, labels.view(-1, 1)).squeeze(1)


def build_autoencoder(
    descriptor: ArchitectureDescriptor, seed: int
) -> tuple[Encoder, Decoder]:
    """Construct a matched encoder/decoder pair with seed-deterministic init."""
    descriptor.plan()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = Encoder(descriptor)
        decoder = Decoder(descriptor)
    return encoder, decoder


def build_generator(decoder: Decoder, prior, seed: int) -> Generator:
    """Assemble the generator from a pretrained decoder and a fitted latent prior.

    Embedding rows start at the prior's per-class means, the noise scale buffer
    holds the prior's stds, and every decoder parameter is copied by name.
    """
    descriptor = decoder.descriptor
    if prior.latent_dim != descriptor.latent_dim:
        raise DescriptorError(
            f"prior latent_dim {prior.latent_dim} != descriptor latent_dim {descriptor.latent_dim}"
        )
    if prior.class_count != descriptor.class_count:
        raise DescriptorError(
            f"prior has {prior.class_count} classes, descriptor {descriptor.class_count}"
        )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = Generator(descriptor)
    with torch.no_grad():
        gen.label_embed.weight.copy_(torch.from_numpy(np.asarray(prior.means, dtype=np.float32)))
        gen.latent_scale.copy_(torch.from_numpy(np.asarray(prior.stds, dtype=np.float32)))
    gen.decoder.load_state_dict(decoder.state_dict())
    return gen


def build_discriminator(encoder: Encoder, class_count: int, seed: int) -> Discriminator:
    """Assemble the discriminator around the pretrained encoder trunk."""
    descriptor = encoder.descriptor
    if class_count != descriptor.class_count:
        raise DescriptorError(
            f"requested {class_count} classes but descriptor declares {descriptor.class_count}"
        )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        disc = Discriminator(descriptor)
    disc.blocks.load_state_dict(encoder.blocks.state_dict())
    return disc


_ROLES = {"encoder": Encoder, "decoder": Decoder, "generator": Generator, "discriminator": Discriminator}


def save_checkpoint(
    module: nn.Module,
    path: str | os.PathLike,
    seed: Optional[int] = None,
    step: int = 0,
    meta: Optional[dict] = None,
) -> Path:
    """Write a network checkpoint (manifest + named float32 arrays)."""
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    header = {
        "role": module.role,
        "descriptor": module.descriptor.to_dict(),
        "seed": seed,
        "step": int(step),
    }
    if meta:
        header["meta"] = meta
    return write_array_file(path, "checkpoint", header, arrays)


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    """Reconstruct a network from a checkpoint, validating every name and shape."""
    header, arrays = read_array_file(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{Path(path).name}: not a checkpoint (kind={header.get('kind')!r})")
    role = header.get("role")
    if role not in _ROLES:
        raise CheckpointError(f"{Path(path).name}: unknown role {role!r}")
    descriptor = ArchitectureDescriptor.from_dict(header["descriptor"])
    module = _ROLES[role](descriptor)
    expected = module.state_dict()
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"{Path(path).name}: parameter names mismatch (missing {missing}, extra {extra})")
    state = {}
    for name, arr in arrays.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"{Path(path).name}: {name} has shape {tuple(arr.shape)}, expected {tuple(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)
    return module, header
