"""Synthetic three-class waveform dataset for desk-scale runs.

Classes: a smooth sine, a tanh-sharpened "square-ish" wave on the same carrier
family, and a localized high-frequency noise burst riding a weak carrier. The
shared carrier keeps the classes confusable enough that imbalance visibly
hurts minority recall, which is what the balancing pipeline is supposed to
fix; the burst content is itself low-dimensional (center, width, frequency,
phase) so a generator has something learnable to imitate.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import LabeledDataset

TOY_CLASS_NAMES = ["burst", "sine", "square"]  # alphabetical, frozen


def make_toy_dataset(
    counts: Sequence[int] = (20, 500, 100),
    length: int = 64,
    seed: int = 0,
    noise: float = 0.4,
) -> LabeledDataset:
    """Generate labeled windows; ``counts`` aligns with TOY_CLASS_NAMES order.

    Class manifolds are kept low-dimensional and convex (no phase or sign
    randomness) so a per-class diagonal Gaussian over an autoencoder latent
    space is a faithful sampler for them.
    """
    if len(counts) != 3:
        raise ValueError("toy dataset has exactly three classes")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / length
    values, labels = [], []
    for cls, count in enumerate(counts):
        for _ in range(int(count)):
            freq = rng.uniform(1.5, 3.5)
            amp = rng.uniform(0.8, 1.4)
            name = TOY_CLASS_NAMES[cls]
            if name == "sine":
                base = amp * np.sin(2 * np.pi * freq * t)
            elif name == "square":
                base = amp * np.tanh(3.0 * np.sin(2 * np.pi * freq * t))
            else:
                # burst: fixed slow carrier + one low-contrast smooth bump; kept
                # intrinsically low-dimensional (center and amplitude only) so a
                # handful of examples pins the class manifold, while the noise
                # floor keeps tiny real sample counts uninformative
                center = rng.uniform(0.38, 0.62)
                envelope = np.exp(-0.5 * ((t - center) / 0.09) ** 2)
                base = 0.5 * amp * np.sin(2 * np.pi * 2.2 * t) + 0.7 * envelope
            mix = rng.uniform(0.6, 1.0, size=3)
            window = mix[:, None] * base[None, :] + rng.normal(0.0, noise, size=(3, length))
            values.append(window)
            labels.append(cls)
    order = rng.permutation(len(values))
    return LabeledDataset(
        values=np.asarray(values, dtype=np.float32)[order],
        labels=np.asarray(labels, dtype=np.int64)[order],
        class_names=list(TOY_CLASS_NAMES),
    )
