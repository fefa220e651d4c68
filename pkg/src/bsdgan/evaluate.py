"""Generated-data quality scoring (Frechet distance) and classifier benchmarks.

FID is computed between Gaussian fits of feature embeddings; the feature
network is the pretrained encoder trunk under global average pooling, frozen
for the lifetime of a report. Each report brackets the generator between a
best reference (train-real vs val-real) and a worst reference (autoencoder
reconstructions vs val-real).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.ensemble import RandomForestClassifier
from sklearn.neighbors import KNeighborsClassifier
from sklearn.tree import DecisionTreeClassifier

from .data import LabeledDataset
from .networks import Decoder, Encoder

logger = logging.getLogger(__name__)

CLAMP_MASS_WARN = 0.01
KNN_GRID = (1, 3, 5, 7, 9)
DT_DEPTH_GRID = (5, 10, 20, None)
RF_TREES_GRID = (50, 100, 200)
RF_DEPTH_GRID = (10, 20, None)
DEEP_MODELS = ("cnn", "lstm", "cnn_lstm")
ALL_MODELS = ("knn", "rf", "dt") + DEEP_MODELS


class FeatureExtractor:
    """Frozen encoder trunk + global average pooling over time."""

    def __init__(self, encoder: Encoder):
        self._trunk = copy.deepcopy(encoder.blocks).eval()
        for p in self._trunk.parameters():
            p.requires_grad_(False)
        self.dim = encoder.descriptor.conv_blocks[-1][0]

    def extract(self, values: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Map windows [N, C, T] to feature vectors [N, dim] (float64)."""
        out = []
        tensor = torch.as_tensor(np.asarray(values, dtype=np.float32))
        with torch.no_grad():
            for start in range(0, len(tensor), batch_size):
                feats = self._trunk(tensor[start : start + batch_size]).mean(dim=2)
                out.append(feats.numpy().astype(np.float64))
        if not out:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.concatenate(out)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`` with sample
    (1/(n-1)) covariances. The cross term uses the eigendecomposition of the
    symmetrized product ``S_a^{1/2} S_b S_a^{1/2}``; negative eigenvalues are
    clamped to zero (warning when the clamped mass exceeds 1%), and the result
    is clamped to be non-negative.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be [n, d] with matching d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 feature vectors per side")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite features")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    negative_mass = float(-w[w < 0].sum())
    total_mass = float(np.abs(w).sum())
    if total_mass > 0 and negative_mass / total_mass > CLAMP_MASS_WARN:
        logger.warning(
            "matrix sqrt clamped %.2f%% of eigenvalue mass; FID may be unreliable",
            100.0 * negative_mass / total_mass,
        )
    trace_cross = 2.0 * float(np.sqrt(np.clip(w, 0.0, None)).sum())
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - trace_cross)
    return max(value, 0.0)


@dataclass
class FidClassEntry:
    class_index: int
    class_name: str
    generated_vs_val: float
    best_reference: float  # train-real vs val-real
    worst_reference: float  # autoencoder-generated (decoded prior draws) vs val-real
    n_generated: int
    n_train: int
    n_val: int


@dataclass
class FidReport:
    feature_dim: int
    per_class: list[FidClassEntry] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "per_class": [vars(e) for e in self.per_class],
            "skipped": [list(s) for s in self.skipped],
        }


def fid_protocol(
    generated: dict[int, np.ndarray],
    train: LabeledDataset,
    val: LabeledDataset,
    encoder: Encoder,
    decoder: Decoder,
    prior,
    extractor: Optional[FeatureExtractor] = None,
    seed: int = 0,
) -> FidReport:
    """Per-class FID of generated windows against val-real, bracketed by two
    references: best = train-real vs val-real, worst = the autoencoder used as
    a generator (decoded per-class prior draws) vs val-real. The worst
    reference is exactly the adversarially-untrained starting point, so a
    healthy run lands between the two.

    All inputs must share one normalized space. Classes absent from val or
    from ``generated``, or with fewer than 2 samples anywhere, are skipped
    with a note.
    """
    if extractor is None:
        extractor = FeatureExtractor(encoder)
    report = FidReport(feature_dim=extractor.dim)
    decoder = decoder.eval()
    rng = np.random.default_rng((seed, 0xAE))

    for cls in range(val.num_classes):
        val_windows = val.values[val.labels == cls]
        train_windows = train.values[train.labels == cls]
        if len(val_windows) < 2:
            report.skipped.append((cls, "fewer than 2 val windows"))
            continue
        if len(train_windows) < 2:
            report.skipped.append((cls, "fewer than 2 train windows"))
            continue
        gen_windows = generated.get(cls)
        if gen_windows is None or len(gen_windows) < 2:
            report.skipped.append((cls, "fewer than 2 generated windows"))
            continue
        if min(len(val_windows), len(train_windows), len(gen_windows)) < extractor.dim:
            logger.warning(
                "class %s: sample count below feature dim %d; FID estimate is noisy",
                val.class_names[cls],
                extractor.dim,
            )
        n_ae = max(len(gen_windows), 2)
        z = rng.standard_normal((n_ae, prior.latent_dim)).astype(np.float32)
        base = torch.from_numpy(prior.means[cls] + prior.stds[cls] * z)
        with torch.no_grad():
            ae_generated = decoder(base).numpy()
        val_feats = extractor.extract(val_windows)
        entry = FidClassEntry(
            class_index=cls,
            class_name=val.class_names[cls],
            generated_vs_val=fid(extractor.extract(gen_windows), val_feats),
            best_reference=fid(extractor.extract(train_windows), val_feats),
            worst_reference=fid(extractor.extract(ae_generated), val_feats),
            n_generated=len(gen_windows),
            n_train=len(train_windows),
            n_val=len(val_windows),
        )
        if entry.best_reference > entry.worst_reference:
            logger.warning(
                "class %s: best reference %.3f exceeds worst %.3f; autoencoder may be undertrained",
                entry.class_name,
                entry.best_reference,
                entry.worst_reference,
            )
        report.per_class.append(entry)
    return report


# ---------------------------------------------------------------------------
# Classifier benchmark harness
# ---------------------------------------------------------------------------


@dataclass
class ModelResult:
    model: str
    hyperparams: dict
    confusion: np.ndarray  # [K, K], rows = true class, cols = predicted
    error: Optional[str] = None

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def per_class_recall(self) -> np.ndarray:
        totals = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            recall = np.where(totals > 0, np.diag(self.confusion) / totals, 0.0)
        return recall

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "hyperparams": self.hyperparams,
            "confusion": self.confusion.astype(int).tolist(),
            "error": self.error,
            "accuracy": self.accuracy,
            "per_class_recall": self.per_class_recall.tolist(),
        }


@dataclass
class BenchmarkReport:
    variant: str  # "imbalanced" or "balanced"
    class_names: list[str]
    results: list[ModelResult]
    split_sizes: dict[str, int]
    seed: int

    def result(self, model: str) -> ModelResult:
        for r in self.results:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "class_names": self.class_names,
            "split_sizes": self.split_sizes,
            "seed": self.seed,
            "results": [r.to_dict() for r in self.results],
        }


def _flatten(ds: LabeledDataset) -> np.ndarray:
    return ds.values.reshape(len(ds), -1).astype(np.float64)


def _confusion(y_true: np.ndarray, y_pred: np.ndarray, K: int) -> np.ndarray:
    matrix = np.zeros((K, K), dtype=np.int64)
    np.add.at(matrix, (y_true, y_pred), 1)
    return matrix


def _grid_search_sklearn(kind: str, train: LabeledDataset, val: LabeledDataset, seed: int):
    x_train, y_train = _flatten(train), train.labels
    x_val, y_val = _flatten(val), val.labels

    def candidates():
        if kind == "knn":
            for k in KNN_GRID:
                if k <= len(x_train):
                    yield {"n_neighbors": k}, KNeighborsClassifier(n_neighbors=k)
        elif kind == "dt":
            for depth in DT_DEPTH_GRID:
                yield {"max_depth": depth}, DecisionTreeClassifier(max_depth=depth, random_state=seed)
        elif kind == "rf":
            for trees in RF_TREES_GRID:
                for depth in RF_DEPTH_GRID:
                    yield (
                        {"n_estimators": trees, "max_depth": depth},
                        RandomForestClassifier(n_estimators=trees, max_depth=depth, random_state=seed),
                    )
        else:
            raise ValueError(kind)

    best = None
    for params, model in candidates():
        model.fit(x_train, y_train)
        score = float((model.predict(x_val) == y_val).mean()) if len(y_val) else 0.0
        if best is None or score > best[0]:
            best = (score, params, model)
    return best[1], best[2]


class _Cnn(torch.nn.Module):
    def __init__(self, channels: int, length: int, K: int):
        super().__init__()
        self.conv = torch.nn.Conv1d(channels, 64, kernel_size=3, padding=1)
        self.pool = torch.nn.MaxPool1d(2)
        self.out = torch.nn.Linear(64 * (length // 2), K)

    def forward(self, x):
        h = self.pool(torch.relu(self.conv(x)))
        return self.out(h.flatten(1))


class _Lstm(torch.nn.Module):
    def __init__(self, channels: int, length: int, K: int):
        super().__init__()
        self.lstm = torch.nn.LSTM(channels, 100, batch_first=True)
        self.out = torch.nn.Linear(100, K)

    def forward(self, x):
        seq = x.permute(0, 2, 1)  # [B, T, C]
        h, _ = self.lstm(seq)
        return self.out(h[:, -1])


class _CnnLstm(torch.nn.Module):
    def __init__(self, channels: int, length: int, K: int):
        super().__init__()
        self.conv = torch.nn.Conv1d(channels, 64, kernel_size=3, padding=1)
        self.pool = torch.nn.MaxPool1d(2)
        self.lstm = torch.nn.LSTM(64, 100, batch_first=True)
        self.out = torch.nn.Linear(100, K)

    def forward(self, x):
        h = self.pool(torch.relu(self.conv(x)))
        h, _ = self.lstm(h.permute(0, 2, 1))
        return self.out(h[:, -1])


_DEEP_CLASSES = {"cnn": _Cnn, "lstm": _Lstm, "cnn_lstm": _CnnLstm}


def _train_deep(
    kind: str,
    train: LabeledDataset,
    val: LabeledDataset,
    seed: int,
    epochs: int,
    lr: float,
    batch_size: int,
    patience: int,
) -> tuple[dict, torch.nn.Module]:
    K = train.num_classes
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = _DEEP_CLASSES[kind](train.channels, train.length, K)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = torch.nn.CrossEntropyLoss()
    x_train = torch.from_numpy(train.values)
    y_train = torch.from_numpy(train.labels)
    x_val = torch.from_numpy(val.values)
    y_val = torch.from_numpy(val.labels)
    rng = np.random.default_rng(seed)

    best_acc, best_state, stale = -1.0, None, 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            optimizer.zero_grad()
            loss = criterion(model(x_train[idx]), y_train[idx])
            loss.backward()
            optimizer.step()
        model.eval()
        with torch.no_grad():
            acc = float((model(x_val).argmax(dim=1) == y_val).float().mean()) if len(y_val) else 0.0
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if patience > 0 and stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return {"epochs": epochs, "lr": lr, "val_accuracy": best_acc}, model


def benchmark(
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    models: Sequence[str] = ALL_MODELS,
    seed: int = 0,
    variant: str = "imbalanced",
    deep_epochs: int = 30,
    deep_lr: float = 1e-3,
    deep_batch: int = 64,
    deep_patience: int = 5,
) -> BenchmarkReport:
    """Train each requested classifier on ``train`` and score it on real test data.

    Evaluation splits must be real-only; a synthetic window in val or test is a
    hard error. Traditional models pick hyperparameters by grid search on val;
    deep models early-stop on val accuracy. A model that fails to train gets a
    failure entry and the run continues.
    """
    for name, split in (("val", val), ("test", test)):
        if split.synthetic is not None and split.synthetic.any():
            raise ValueError(f"{name} split contains synthetic windows; evaluation must be real-only")
    unknown = set(models) - set(ALL_MODELS)
    if unknown:
        raise ValueError(f"unknown model(s): {sorted(unknown)}")

    K = train.num_classes
    report = BenchmarkReport(
        variant=variant,
        class_names=list(train.class_names),
        results=[],
        split_sizes={"train": len(train), "val": len(val), "test": len(test)},
        seed=seed,
    )
    x_test_flat = _flatten(test)
    x_test = torch.from_numpy(test.values)

    for kind in models:
        try:
            if kind in ("knn", "rf", "dt"):
                params, model = _grid_search_sklearn(kind, train, val, seed)
                pred = model.predict(x_test_flat).astype(np.int64)
            else:
                params, model = _train_deep(
                    kind, train, val, seed, deep_epochs, deep_lr, deep_batch, deep_patience
                )
                with torch.no_grad():
                    pred = model(x_test).argmax(dim=1).numpy()
            result = ModelResult(
                model=kind,
                hyperparams=params,
                confusion=_confusion(test.labels, pred, K),
            )
        except Exception as exc:  # keep the run alive per-model
            logger.warning("model %s failed: %s", kind, exc)
            result = ModelResult(
                model=kind,
                hyperparams={},
                confusion=np.zeros((K, K), dtype=np.int64),
                error=str(exc),
            )
        report.results.append(result)
    return report
