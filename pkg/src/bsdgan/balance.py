"""Dataset balancing: oversample every class to the majority count with
discriminator-verified generator output, then merge with the real data.

Generation proceeds in batches rather than one window at a time, so a class
may overshoot its target by up to one batch; the real windows are never
touched. Verification keeps a window only when the discriminator's strict
argmax lands on the requested class (the FAKE index, or any tie, rejects).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .data import LabeledDataset, class_histogram

logger = logging.getLogger(__name__)

DEFAULT_ATTEMPT_FACTOR = 50  # max attempts per class = factor * deficit
DEFAULT_ACCEPTANCE_FLOOR = 0.01


@dataclass
class ClassBalanceEntry:
    class_index: int
    class_name: str
    requested: int  # deficit at entry (target - initial count)
    generated: int  # verified windows kept
    attempts: int  # generator invocations
    satisfied: bool
    below_floor: bool = False

    @property
    def acceptance_rate(self) -> float:
        return self.generated / self.attempts if self.attempts else 0.0


@dataclass
class BalanceReport:
    target: int  # majority class count (the balancing criterion)
    per_class: list[ClassBalanceEntry] = field(default_factory=list)
    final_histogram: dict[int, int] = field(default_factory=dict)
    wall_time_s: float = 0.0
    generation_batch: int = 0
    seed: int = 0

    @property
    def failed_classes(self) -> list[int]:
        return [e.class_index for e in self.per_class if not e.satisfied]


def verify(
    discriminator,
    windows: torch.Tensor,
    target_class: int,
) -> torch.Tensor:
    """Boolean mask: strict argmax of discriminate(x, target) equals target.

    Any tie (including with FAKE) rejects, so only windows the discriminator
    unambiguously assigns to the requested class survive.
    """
    labels = torch.full((len(windows),), target_class, dtype=torch.long)
    with torch.no_grad():
        probs = discriminator(windows, labels)
    target_p = probs[:, target_class]
    others = torch.cat([probs[:, :target_class], probs[:, target_class + 1 :]], dim=1)
    return (target_p > others.max(dim=1).values).cpu()


def assigned_verify(
    discriminator,
    windows: torch.Tensor,
    target_class: int,
) -> torch.Tensor:
    """Boolean mask: the discriminator's assigned label equals the target.

    The assigned label pools class-index evidence across every conditioning
    query. The wrong-label training term suppresses mismatched conditionings
    on real-looking windows, so the pooled mass concentrates on the class the
    window actually resembles even when the self-conditioned probability has
    been driven down by adversarial pressure on generated data. Rare classes
    stay verifiable this way; the strict self-conditioned argmax starves them.
    """
    class_count = discriminator.descriptor.class_count
    scores = torch.zeros(len(windows), class_count)
    with torch.no_grad():
        for cond in range(class_count):
            labels = torch.full((len(windows),), cond, dtype=torch.long)
            scores += discriminator(windows, labels)[:, :class_count]
    target_scores = scores[:, target_class]
    others = torch.cat([scores[:, :target_class], scores[:, target_class + 1 :]], dim=1)
    return (target_scores > others.max(dim=1).values).cpu()


VERIFICATION_MODES = {"conditional": verify, "assigned": assigned_verify}


def balance(
    real: LabeledDataset,
    generator,
    discriminator,
    gen_batch: int = 128,
    max_attempts_per_class: Optional[int] = None,
    seed: int = 0,
    acceptance_floor: float = DEFAULT_ACCEPTANCE_FLOOR,
    attempt_factor: int = DEFAULT_ATTEMPT_FACTOR,
    noise_scale: float = 1.0,
    verification: str = "conditional",
    verifier: Optional[Callable[[torch.Tensor, int], torch.Tensor]] = None,
) -> tuple[LabeledDataset, LabeledDataset, BalanceReport]:
    """Oversample each minority class to the majority count.

    Returns (balanced dataset, synthetic-only dataset, report). Windows are
    generated in batches of ``gen_batch`` and kept only when verified, so
    final counts satisfy ``max - min <= gen_batch``. The attempt budget per
    class is ``max_attempts_per_class`` when given, else ``attempt_factor``
    times the class deficit. Per-class noise streams derive from ``seed`` and
    the class index, independent of iteration order; ``noise_scale`` widens
    (>1) or truncates (<1) the latent draws relative to training.

    ``verification`` selects the discriminator check: ``conditional`` (strict
    self-conditioned argmax) or ``assigned`` (pooled label assignment, which
    keeps rare classes fillable). ``verifier`` overrides both (stubs in tests).
    """
    if len(real) == 0:
        raise ValueError("cannot balance an empty dataset")
    if gen_batch < 1:
        raise ValueError("gen_batch must be >= 1")
    if verification not in VERIFICATION_MODES:
        raise ValueError(f"verification must be one of {sorted(VERIFICATION_MODES)}")
    start = time.monotonic()
    mode = VERIFICATION_MODES[verification]
    check = verifier if verifier is not None else (lambda w, c: mode(discriminator, w, c))
    latent_dim = generator.descriptor.latent_dim

    hist = class_histogram(real)
    target = max(hist.values())
    counts = {c: hist.get(c, 0) for c in range(real.num_classes)}

    kept_values: list[np.ndarray] = []
    kept_labels: list[int] = []
    report = BalanceReport(target=target, generation_batch=gen_batch, seed=seed)

    for cls in range(real.num_classes):
        deficit = target - counts[cls]
        if deficit <= 0:
            continue
        budget = max_attempts_per_class
        if budget is None:
            budget = attempt_factor * deficit
        rng = np.random.default_rng((seed, cls))
        produced = 0
        attempts = 0
        while counts[cls] < target and attempts < budget:
            batch = min(gen_batch, budget - attempts)
            z = torch.from_numpy(
                (noise_scale * rng.standard_normal((batch, latent_dim))).astype(np.float32)
            )
            labels = torch.full((batch,), cls, dtype=torch.long)
            with torch.no_grad():
                windows = generator(z, labels)
            mask = torch.as_tensor(np.asarray(check(windows, cls)), dtype=torch.bool)
            accepted = windows[mask].cpu().numpy()
            attempts += batch
            if len(accepted):
                kept_values.append(accepted)
                kept_labels.extend([cls] * len(accepted))
                produced += len(accepted)
                counts[cls] += len(accepted)
        entry = ClassBalanceEntry(
            class_index=cls,
            class_name=real.class_names[cls],
            requested=deficit,
            generated=produced,
            attempts=attempts,
            satisfied=counts[cls] >= target,
        )
        if not entry.satisfied:
            entry.below_floor = entry.acceptance_rate < acceptance_floor
            logger.warning(
                "class %s: %d/%d generated after %d attempts (acceptance %.3f)",
                entry.class_name,
                produced,
                deficit,
                attempts,
                entry.acceptance_rate,
            )
        report.per_class.append(entry)

    if kept_values:
        synth_values = np.concatenate(kept_values).astype(np.float32)
    else:
        synth_values = np.zeros((0, real.channels, real.length), dtype=np.float32)
    synthetic = LabeledDataset(
        values=synth_values,
        labels=np.asarray(kept_labels, dtype=np.int64),
        class_names=list(real.class_names),
        split=real.split,
        synthetic=np.ones(len(kept_labels), dtype=bool),
    )

    real_flags = real.synthetic if real.synthetic is not None else np.zeros(len(real), dtype=bool)
    balanced = LabeledDataset(
        values=np.concatenate([real.values, synthetic.values]),
        labels=np.concatenate([real.labels, synthetic.labels]),
        class_names=list(real.class_names),
        split=real.split,
        source_ids=None
        if real.source_ids is None
        else np.concatenate([real.source_ids, np.full(len(synthetic), -1, dtype=np.int32)]),
        synthetic=np.concatenate([real_flags, synthetic.synthetic]),
    )
    report.final_histogram = class_histogram(balanced)
    report.wall_time_s = time.monotonic() - start
    return balanced, synthetic, report


def report_lines(report: BalanceReport, class_names: list[str]) -> list[str]:
    """Human-readable balance summary (timing lives in the run manifest)."""
    lines = [
        f"balancing target (majority count): {report.target}",
        f"generation batch: {report.generation_batch}  seed: {report.seed}",
        f"{'class':<16} {'requested':>9} {'generated':>9} {'attempts':>9} {'acceptance':>10} ok",
    ]
    for e in report.per_class:
        lines.append(
            f"{e.class_name:<16} {e.requested:>9} {e.generated:>9} {e.attempts:>9} "
            f"{e.acceptance_rate:>10.4f} {'yes' if e.satisfied else 'NO' + (' (below floor)' if e.below_floor else '')}"
        )
    lines.append("final counts: " + ", ".join(f"{class_names[c]}={n}" for c, n in sorted(report.final_histogram.items())))
    return lines
