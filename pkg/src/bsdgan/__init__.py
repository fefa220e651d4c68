"""Class balancing for multichannel sensor-activity datasets.

Trains an autoencoder-initialized conditional GAN on imbalanced activity
windows, oversamples minority classes with discriminator-verified synthetic
windows, and quantifies the result with Frechet-distance scores and
before/after classifier benchmarks.
"""

__version__ = "0.1.0"
