"""Pipeline stages over a shared output directory, with hashed run manifests.

Each stage writes its artifacts plus a ``manifest.json`` recording the
effective config, input artifact hashes, output artifact hashes, seed, and
wall time. Stages refuse to run when an upstream artifact is missing or its
bytes no longer match the upstream manifest. Timing lives only in manifests,
so artifact bytes are reproducible for identical (config, seed).
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from . import balance as balance_mod
from . import data as data_mod
from .config import PipelineConfig
from .errors import ConfigError, MissingArtifactError
from .evaluate import FeatureExtractor, benchmark, fid_protocol
from .gan import TrainConfig, load_train_state, save_train_state, train_gan, write_loss_curve
from .networks import load_checkpoint, save_checkpoint
from .pretrain import LatentPrior, PretrainConfig, fit_latent_prior, train_autoencoder
from .toy import make_toy_dataset

logger = logging.getLogger(__name__)

STAGES = ("prepare", "pretrain", "train", "balance", "evaluate-fid", "benchmark", "report")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextmanager
def output_lock(out_dir: Path):
    """Reject concurrent invocations on one output directory via a lock file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out_dir} is locked by another invocation ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class StageWriter:
    """Collects a stage's outputs and writes the manifest last."""

    def __init__(self, config: PipelineConfig, stage: str, sections: Iterable[str]):
        self.config = config
        self.stage = stage
        self.dir = Path(config.run.out_dir) / stage
        self.dir.mkdir(parents=True, exist_ok=True)
        self._sections = tuple(sections)
        self._inputs: dict[str, str] = {}
        self._outputs: list[Path] = []
        self._start = time.monotonic()

    def add_input(self, path: Path) -> None:
        self._inputs[str(path)] = sha256_file(path)

    def add_output(self, path: Path | Iterable[Path]) -> None:
        if isinstance(path, (str, Path)):
            self._outputs.append(Path(path))
        else:
            self._outputs.extend(Path(p) for p in path)

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.dir / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        self.add_output(path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.dir / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, path)
        self.add_output(path)
        return path

    def finish(self) -> Path:
        manifest = {
            "stage": self.stage,
            "config": self.config.section_dict("run", *self._sections),
            "config_hash": self.config.config_hash(),
            "seed": self.config.run.seed,
            "inputs": dict(sorted(self._inputs.items())),
            "outputs": {
                str(p.relative_to(self.dir)): sha256_file(p) for p in sorted(set(self._outputs))
            },
            "wall_time_s": round(time.monotonic() - self._start, 3),
        }
        path = self.dir / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def read_manifest(out_dir: Path, stage: str) -> dict:
    path = Path(out_dir) / stage / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"stage {stage!r} has not produced artifacts; run `bsdgan {stage}` first")
    return json.loads(path.read_text())


def require_artifacts(config: PipelineConfig, stage: str, names: Iterable[str]) -> dict[str, Path]:
    """Resolve upstream artifact paths and verify their recorded hashes."""
    out_dir = Path(config.run.out_dir)
    manifest = read_manifest(out_dir, stage)
    resolved: dict[str, Path] = {}
    for name in names:
        if name not in manifest["outputs"]:
            raise MissingArtifactError(
                f"stage {stage!r} did not produce {name!r}; rerun `bsdgan {stage}`"
            )
        path = out_dir / stage / name
        if not path.exists():
            raise MissingArtifactError(f"artifact {path} is missing; rerun `bsdgan {stage}`")
        if sha256_file(path) != manifest["outputs"][name]:
            raise MissingArtifactError(
                f"artifact {path} does not match the hash recorded by stage {stage!r}; rerun `bsdgan {stage}`"
            )
        resolved[name] = path
    return resolved


def _set_threads(config: PipelineConfig) -> None:
    torch.set_num_threads(max(1, config.run.threads))


def _container_artifact_names(container_dir: Path, splits: Optional[Iterable[str]] = None) -> list[str]:
    manifest = json.loads((container_dir / "manifest.json").read_text())
    names = ["container/manifest.json"]
    for split, entry in manifest["splits"].items():
        if splits is not None and split not in splits:
            continue
        for key in ("values", "labels", "sources", "provenance"):
            if key in entry:
                names.append(f"container/{entry[key]}")
    return names


def _save_distribution_plot(path: Path, histogram: dict[int, int], class_names: list[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = [histogram.get(i, 0) for i in range(len(class_names))]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.pie(counts, labels=class_names, autopct="%1.1f%%")
    left.set_title("class share")
    right.bar(range(len(counts)), counts)
    right.set_xticks(range(len(counts)), class_names, rotation=45, ha="right")
    right.set_title("window count")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _save_loss_plot(path: Path, history: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [row["step"] for row in history]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(steps, [row["d_loss"] for row in history], label="discriminator")
    g = [(s, row["g_loss"]) for s, row in zip(steps, history) if np.isfinite(row["g_loss"])]
    if g:
        ax.plot([p[0] for p in g], [p[1] for p in g], label="generator")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _save_sample_plot(path: Path, windows: np.ndarray, labels: np.ndarray, class_names: list[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    K = len(class_names)
    fig, axes = plt.subplots(K, 1, figsize=(8, 2.2 * K), squeeze=False)
    for cls in range(K):
        ax = axes[cls][0]
        rows = np.flatnonzero(labels == cls)[:3]
        for r in rows:
            for ch in range(windows.shape[1]):
                ax.plot(windows[r, ch], linewidth=0.8)
        ax.set_title(class_names[cls])
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_prepare(config: PipelineConfig) -> Path:
    """Ingest raw data, split, fit normalization, and write the dataset container."""
    _set_threads(config)
    writer = StageWriter(config, "prepare", ["dataset"])
    ds_cfg = config.dataset
    seed = config.run.seed

    if ds_cfg.kind == "toy":
        full = make_toy_dataset(ds_cfg.toy_counts, length=ds_cfg.toy_length, seed=seed, noise=ds_cfg.toy_noise)
        parse_info: dict = {"kind": "toy", "counts": list(ds_cfg.toy_counts)}
    elif ds_cfg.kind == "wisdm":
        raw_path = Path(ds_cfg.path)
        if not raw_path.exists():
            raise MissingArtifactError(f"raw WISDM file not found: {raw_path}")
        writer.add_input(raw_path)
        rows = data_mod.parse_wisdm_raw(raw_path)
        full = data_mod.window(rows, ds_cfg.window_length, ds_cfg.window_stride)
        parse_info = {
            "kind": "wisdm",
            "rows": len(rows),
            "skipped_lines": rows.skipped,
            "malformed_warning": rows.malformed_warning,
        }
    else:  # unimib
        raw_path = Path(ds_cfg.path)
        if not raw_path.exists():
            raise MissingArtifactError(f"UniMiB CSV not found: {raw_path}")
        writer.add_input(raw_path)
        full = data_mod.parse_unimib(raw_path)
        parse_info = {"kind": "unimib", "instances": len(full)}

    if len(full) == 0:
        raise ConfigError("ingestion produced an empty dataset")

    fractions = (ds_cfg.train_fraction, ds_cfg.val_fraction, ds_cfg.test_fraction)
    train, val, test = data_mod.stratified_split(full, fractions, seed=seed)
    stats = data_mod.fit_normalization(train)

    container = writer.dir / "container"
    data_mod.save_dataset_container(
        container, {"train": train, "val": val, "test": test}, stats=stats, seed=seed
    )
    writer.add_output([container / name.split("/", 1)[1] for name in _container_artifact_names(container)])

    histogram = data_mod.class_histogram(full)
    writer.write_json(
        "class_distribution.json",
        {
            "class_names": full.class_names,
            "total": len(full),
            "counts": {full.class_names[c]: n for c, n in sorted(histogram.items())},
            "split_sizes": {"train": len(train), "val": len(val), "test": len(test)},
            "parse": parse_info,
        },
    )
    plot = writer.dir / "class_distribution.png"
    _save_distribution_plot(plot, histogram, full.class_names)
    writer.add_output(plot)
    return writer.finish()


def _load_container(config: PipelineConfig, splits=None):
    """Load (and hash-verify) only the requested splits from the prepare stage."""
    container_dir = Path(config.run.out_dir) / "prepare" / "container"
    require_artifacts(
        config,
        "prepare",
        _container_artifact_names(container_dir, splits) if container_dir.exists() else ["container/manifest.json"],
    )
    loaded, stats, manifest = data_mod.load_dataset_container(container_dir, splits=splits)
    return loaded, stats, manifest


def stage_pretrain(config: PipelineConfig) -> Path:
    """Train the autoencoder on normalized train windows and fit the latent prior."""
    _set_threads(config)
    splits, stats, _ = _load_container(config, splits=["train", "val"])
    writer = StageWriter(config, "pretrain", ["dataset", "architecture", "pretrain"])
    train = data_mod.normalize_dataset(splits["train"], stats)
    val = data_mod.normalize_dataset(splits["val"], stats)

    descriptor = config.descriptor(train.channels, train.length, train.num_classes)
    pre_cfg = PretrainConfig(
        epochs=config.pretrain.epochs,
        batch_size=config.pretrain.batch_size,
        lr=config.pretrain.lr,
        beta1=config.pretrain.beta1,
        beta2=config.pretrain.beta2,
        patience=config.pretrain.patience,
    )
    encoder, decoder, report = train_autoencoder(train, val, descriptor, pre_cfg, seed=config.run.seed)
    prior = fit_latent_prior(encoder, train)

    writer.add_output(save_checkpoint(encoder, writer.dir / "encoder.ckpt", seed=config.run.seed))
    writer.add_output(save_checkpoint(decoder, writer.dir / "decoder.ckpt", seed=config.run.seed))
    writer.add_output(prior.save(writer.dir / "prior.bsd"))
    writer.write_json(
        "pretrain_report.json",
        {
            "train_mae": report.train_mae,
            "val_mae": report.val_mae,
            "epochs_run": report.epochs_run,
            "best_epoch": report.best_epoch,
            "seed": report.seed,
        },
    )
    return writer.finish()


def stage_train(config: PipelineConfig, resume: bool = False) -> Path:
    """Adversarial training, initialized from the pretrained autoencoder."""
    _set_threads(config)
    pre = require_artifacts(config, "pretrain", ["encoder.ckpt", "decoder.ckpt", "prior.bsd"])
    splits, stats, _ = _load_container(config, splits=["train"])
    writer = StageWriter(config, "train", ["dataset", "architecture", "gan"])
    for path in pre.values():
        writer.add_input(path)
    train = data_mod.normalize_dataset(splits["train"], stats)

    encoder, _ = load_checkpoint(pre["encoder.ckpt"])
    decoder, _ = load_checkpoint(pre["decoder.ckpt"])
    prior = LatentPrior.load(pre["prior.bsd"])
    gan_cfg = TrainConfig(
        lr=config.gan.lr,
        beta1=config.gan.beta1,
        beta2=config.gan.beta2,
        batch_size=config.gan.batch_size,
        epochs=config.gan.epochs,
        lambda_gp=config.gan.lambda_gp,
        critic_steps=config.gan.critic_steps,
        generator_steps=config.gan.generator_steps,
        fake_loss=config.gan.fake_loss,
        seed=config.run.seed,
    )

    state = None
    state_path = writer.dir / "train_state.bsd"
    if resume and state_path.exists():
        state = load_train_state(state_path)
        logger.info("resuming from epoch %d (step %d)", state.epoch, state.step)

    checkpoints: list[Path] = []

    def on_epoch(s):
        save_train_state(s, state_path)
        g = save_checkpoint(s.generator, writer.dir / "generator.ckpt", seed=gan_cfg.seed, step=s.step)
        d = save_checkpoint(s.discriminator, writer.dir / "discriminator.ckpt", seed=gan_cfg.seed, step=s.step)
        checkpoints.extend([g, d])
        if config.gan.checkpoint_every > 0 and s.epoch % config.gan.checkpoint_every == 0:
            checkpoints.append(
                save_checkpoint(
                    s.generator, writer.dir / f"generator_epoch{s.epoch:04d}.ckpt", seed=gan_cfg.seed, step=s.step
                )
            )

    state = train_gan(train, encoder, decoder, prior, gan_cfg, epoch_callback=on_epoch, state=state)
    if not checkpoints:  # epochs == 0 or nothing left to train: still emit checkpoints
        on_epoch(state)

    writer.add_output(sorted(set(checkpoints)))
    writer.add_output(save_train_state(state, state_path))
    curve = write_loss_curve(state.history, writer.dir / "loss_curve.tsv")
    writer.add_output(curve)
    plot = writer.dir / "loss_curve.png"
    _save_loss_plot(plot, state.history or [{"step": 0, "epoch": 0, "d_loss": 0.0, "g_loss": float("nan")}])
    writer.add_output(plot)
    return writer.finish()


def stage_balance(config: PipelineConfig) -> Path:
    """Oversample minority classes with verified generator output; export container."""
    _set_threads(config)
    trained = require_artifacts(config, "train", ["generator.ckpt", "discriminator.ckpt"])
    splits, stats, _ = _load_container(config, splits=["train"])
    writer = StageWriter(config, "balance", ["dataset", "balance"])
    for path in trained.values():
        writer.add_input(path)

    generator, _ = load_checkpoint(trained["generator.ckpt"])
    discriminator, _ = load_checkpoint(trained["discriminator.ckpt"])
    train_norm = data_mod.normalize_dataset(splits["train"], stats)

    balanced_norm, synthetic_norm, report = balance_mod.balance(
        train_norm,
        generator,
        discriminator,
        gen_batch=config.balance.gen_batch,
        seed=config.run.seed,
        acceptance_floor=config.balance.acceptance_floor,
        attempt_factor=config.balance.max_attempts_factor,
        noise_scale=config.balance.noise_scale,
        verification=config.balance.verification,
    )

    # synthetic windows leave normalized space for export; real windows are reused as-is
    synth_raw = data_mod.invert_normalization(synthetic_norm.values, stats).astype(np.float32)
    real = splits["train"]
    real_flags = np.zeros(len(real), dtype=bool)
    balanced_raw = data_mod.LabeledDataset(
        values=np.concatenate([real.values, synth_raw]) if len(synth_raw) else real.values.copy(),
        labels=np.concatenate([real.labels, synthetic_norm.labels]),
        class_names=list(real.class_names),
        split="train",
        source_ids=None
        if real.source_ids is None
        else np.concatenate([real.source_ids, np.full(len(synth_raw), -1, dtype=np.int32)]),
        synthetic=np.concatenate([real_flags, np.ones(len(synth_raw), dtype=bool)]),
    )

    # evaluation splits stay real-only in the prepare container; the balanced
    # container carries just the oversampled train split
    container = writer.dir / "container"
    data_mod.save_dataset_container(
        container, {"train": balanced_raw}, stats=stats, seed=config.run.seed
    )
    writer.add_output([container / n.split("/", 1)[1] for n in _container_artifact_names(container)])

    writer.write_json(
        "balance_report.json",
        {
            "target": report.target,
            "generation_batch": report.generation_batch,
            "seed": report.seed,
            "per_class": [
                {
                    "class_index": e.class_index,
                    "class_name": e.class_name,
                    "requested": e.requested,
                    "generated": e.generated,
                    "attempts": e.attempts,
                    "acceptance_rate": e.acceptance_rate,
                    "satisfied": e.satisfied,
                    "below_floor": e.below_floor,
                }
                for e in report.per_class
            ],
            "final_histogram": {real.class_names[c]: n for c, n in sorted(report.final_histogram.items())},
            "failed_classes": report.failed_classes,
        },
    )
    writer.write_text(
        "balance_report.txt", "\n".join(balance_mod.report_lines(report, real.class_names)) + "\n"
    )
    if len(synthetic_norm):
        plot = writer.dir / "generated_samples.png"
        _save_sample_plot(plot, synthetic_norm.values, synthetic_norm.labels, real.class_names)
        writer.add_output(plot)
    return writer.finish()


def stage_evaluate_fid(config: PipelineConfig) -> Path:
    """Score generator output per class against the best/worst references."""
    _set_threads(config)
    pre = require_artifacts(config, "pretrain", ["encoder.ckpt", "decoder.ckpt", "prior.bsd"])
    trained = require_artifacts(config, "train", ["generator.ckpt"])
    splits, stats, _ = _load_container(config, splits=["train", "val"])
    writer = StageWriter(config, "evaluate-fid", ["dataset", "evaluate"])
    for path in (*pre.values(), *trained.values()):
        writer.add_input(path)

    encoder, _ = load_checkpoint(pre["encoder.ckpt"])
    decoder, _ = load_checkpoint(pre["decoder.ckpt"])
    prior = LatentPrior.load(pre["prior.bsd"])
    generator, _ = load_checkpoint(trained["generator.ckpt"])
    train = data_mod.normalize_dataset(splits["train"], stats)
    val = data_mod.normalize_dataset(splits["val"], stats)

    rng = np.random.default_rng((config.run.seed, 0xF1D))
    generated: dict[int, np.ndarray] = {}
    per_class = max(2, config.evaluate.fid_per_class)
    with torch.no_grad():
        for cls in range(train.num_classes):
            z = torch.from_numpy(
                rng.standard_normal((per_class, generator.descriptor.latent_dim)).astype(np.float32)
            )
            labels = torch.full((per_class,), cls, dtype=torch.long)
            generated[cls] = generator(z, labels).numpy()

    report = fid_protocol(
        generated, train, val, encoder, decoder, prior, FeatureExtractor(encoder), seed=config.run.seed
    )
    writer.write_json("fid_report.json", report.to_dict())

    lines = [f"{'class':<16} {'bsdgan':>10} {'best(real)':>11} {'worst(ae)':>10}"]
    for e in report.per_class:
        lines.append(
            f"{e.class_name:<16} {e.generated_vs_val:>10.3f} {e.best_reference:>11.3f} {e.worst_reference:>10.3f}"
        )
    for cls, reason in report.skipped:
        lines.append(f"{val.class_names[cls]:<16} skipped: {reason}")
    writer.write_text("fid_report.txt", "\n".join(lines) + "\n")
    return writer.finish()


def stage_benchmark(config: PipelineConfig) -> Path:
    """Classifier accuracy before/after balancing, on real evaluation splits."""
    _set_threads(config)
    real_splits, stats, _ = _load_container(config)
    balanced_dir = Path(config.run.out_dir) / "balance" / "container"
    require_artifacts(
        config,
        "balance",
        _container_artifact_names(balanced_dir) if balanced_dir.exists() else ["container/manifest.json"],
    )
    balanced_splits, _, _ = data_mod.load_dataset_container(balanced_dir, splits=["train"])
    writer = StageWriter(config, "benchmark", ["dataset", "evaluate"])

    val = data_mod.normalize_dataset(real_splits["val"], stats)
    test = data_mod.normalize_dataset(real_splits["test"], stats)
    variants = {
        "imbalanced": data_mod.normalize_dataset(real_splits["train"], stats),
        "balanced": data_mod.normalize_dataset(balanced_splits["train"], stats),
    }

    results = []
    for variant, train in variants.items():
        for seed in config.evaluate.seeds:
            report = benchmark(
                train,
                val,
                test,
                models=config.evaluate.models,
                seed=seed,
                variant=variant,
                deep_epochs=config.evaluate.deep_epochs,
                deep_lr=config.evaluate.deep_lr,
                deep_batch=config.evaluate.deep_batch,
                deep_patience=config.evaluate.deep_patience,
            )
            results.append(report.to_dict())
    writer.write_json("benchmark_results.json", {"runs": results})
    writer.write_text("benchmark_results.txt", _benchmark_table(results) + "\n")
    return writer.finish()


def _benchmark_table(results: list[dict]) -> str:
    lines = []
    by_variant: dict[str, list[dict]] = {}
    for run in results:
        by_variant.setdefault(run["variant"], []).append(run)
    for variant, runs in by_variant.items():
        class_names = runs[0]["class_names"]
        lines.append(f"== {variant} (median over {len(runs)} seed(s)) ==")
        header = f"{'model':<10} " + " ".join(f"{n[:10]:>10}" for n in class_names) + f" {'accuracy':>9}"
        lines.append(header)
        models = [r["model"] for r in runs[0]["results"]]
        for model in models:
            recalls = []
            accs = []
            for run in runs:
                entry = next(r for r in run["results"] if r["model"] == model)
                if entry["error"] is None:
                    recalls.append(entry["per_class_recall"])
                    accs.append(entry["accuracy"])
            if not accs:
                lines.append(f"{model:<10} all seeds failed")
                continue
            med = np.median(np.asarray(recalls), axis=0)
            lines.append(
                f"{model:<10} " + " ".join(f"{v:>10.4f}" for v in med) + f" {float(np.median(accs)):>9.4f}"
            )
        lines.append("")
    return "\n".join(lines).rstrip()


def stage_report(config: PipelineConfig) -> Path:
    """Merge all stage outputs into one before/after document.

    Numbers are recomputed from the stored machine-readable artifacts
    (confusion matrices, FID entries), never parsed back out of rendered text.
    """
    out_dir = Path(config.run.out_dir)
    missing = [s for s in ("prepare", "pretrain", "train", "balance", "evaluate-fid", "benchmark")
               if not (out_dir / s / "manifest.json").exists()]
    if missing:
        raise MissingArtifactError(f"cannot assemble report; missing stage(s): {', '.join(missing)}")

    writer = StageWriter(config, "report", ["dataset", "evaluate"])
    dist = json.loads((out_dir / "prepare" / "class_distribution.json").read_text())
    balance_report = json.loads((out_dir / "balance" / "balance_report.json").read_text())
    fid_report = json.loads((out_dir / "evaluate-fid" / "fid_report.json").read_text())
    bench = json.loads((out_dir / "benchmark" / "benchmark_results.json").read_text())

    lines = ["# dataset", ""]
    lines.append(f"classes: {', '.join(dist['class_names'])}")
    lines.append(f"windows: {dist['total']}  splits: {dist['split_sizes']}")
    lines.append("imbalanced counts: " + ", ".join(f"{k}={v}" for k, v in dist["counts"].items()))
    lines.append("balanced counts:   " + ", ".join(f"{k}={v}" for k, v in balance_report["final_histogram"].items()))
    lines.append("")
    lines.append("# generated data quality (lower FID is better)")
    lines.append("")
    lines.append(f"{'class':<16} {'bsdgan':>10} {'best(real)':>11} {'worst(ae)':>10}")
    for e in fid_report["per_class"]:
        lines.append(
            f"{e['class_name']:<16} {e['generated_vs_val']:>10.3f} {e['best_reference']:>11.3f} {e['worst_reference']:>10.3f}"
        )
    lines.append("")
    lines.append("# classifier benchmark (recomputed from stored confusion matrices)")
    lines.append("")

    summary: dict[str, dict] = {}
    runs = bench["runs"]
    class_names = runs[0]["class_names"]
    for variant in ("imbalanced", "balanced"):
        variant_runs = [r for r in runs if r["variant"] == variant]
        per_model: dict[str, dict] = {}
        for model in [res["model"] for res in variant_runs[0]["results"]]:
            recalls, accs = [], []
            for run in variant_runs:
                entry = next(res for res in run["results"] if res["model"] == model)
                if entry["error"] is not None:
                    continue
                confusion = np.asarray(entry["confusion"], dtype=np.float64)
                totals = confusion.sum(axis=1)
                recall = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), 0.0)
                recalls.append(recall)
                accs.append(float(np.trace(confusion) / confusion.sum()))
            if accs:
                per_model[model] = {
                    "median_accuracy": float(np.median(accs)),
                    "median_recall": np.median(np.asarray(recalls), axis=0).tolist(),
                }
        summary[variant] = per_model

    lines.append(_benchmark_table(runs))
    lines.append("")
    lines.append("# before -> after (median accuracy)")
    lines.append("")
    for model in summary.get("imbalanced", {}):
        if model in summary.get("balanced", {}):
            before = summary["imbalanced"][model]["median_accuracy"]
            after = summary["balanced"][model]["median_accuracy"]
            lines.append(f"{model:<10} {before:.4f} -> {after:.4f}  ({(after - before) * 100:+.2f} points)")

    writer.write_text("report.txt", "\n".join(lines) + "\n")
    writer.write_json(
        "report.json",
        {
            "dataset": dist,
            "balance": balance_report,
            "fid": fid_report,
            "benchmark_summary": summary,
            "class_names": class_names,
        },
    )
    return writer.finish()
