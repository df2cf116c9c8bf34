"""Registration-based peak augmentation.

The one labeled subject ``{x, l}`` is registered onto every unlabeled subject
``y_i``; the resulting field deforms both the peaks and the labels, giving a
pseudo subject ``x o phi_i`` with pseudo labels ``l o phi_i``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .registration import RegistrationConfig, optimize_registration, warp, warp_labels
from .volume import ShapeMismatchError, as_labels, as_peaks, check_same_grid

__all__ = ["LabeledSubject", "PseudoSubject", "synthesize_pseudo_pair", "build_pseudo_dataset"]

log = logging.getLogger(__name__)


@dataclass
class LabeledSubject:
    peaks: np.ndarray
    labels: np.ndarray
    id: str = "labeled"

    def __post_init__(self):
        self.peaks = as_peaks(self.peaks)
        self.labels = as_labels(self.labels)
        check_same_grid(self.peaks, self.labels, "peaks and labels")


@dataclass
class PseudoSubject:
    peaks: np.ndarray
    labels: np.ndarray
    source_unlabeled_id: str
    field: np.ndarray
    trace: list[float] = dc_field(default_factory=list)
    sim_trace: list[float] = dc_field(default_factory=list)
    field_path: str = ""


def synthesize_pseudo_pair(
    labeled: LabeledSubject, unlabeled, cfg: RegistrationConfig, source_id: str = "unlabeled"
) -> PseudoSubject:
    """Register the labeled subject onto ``unlabeled`` and deform its peaks and labels."""
    y = as_peaks(unlabeled)
    if y.shape != labeled.peaks.shape:
        raise ShapeMismatchError(f"unlabeled subject {source_id} has shape {y.shape}, expected {labeled.peaks.shape}")
    result = optimize_registration(labeled.peaks, y, cfg)
    log.debug(
        "registered %s -> %s: loss %.6g -> %.6g in %d iterations",
        labeled.id, source_id, result.trace[0], result.trace[-1], result.iterations,
    )
    return PseudoSubject(
        peaks=warp(labeled.peaks, result.field),
        labels=warp_labels(labeled.labels, result.field),
        source_unlabeled_id=source_id,
        field=result.field,
        trace=result.trace,
        sim_trace=result.sim_trace,
    )


def _job(args):
    return synthesize_pseudo_pair(*args)


def build_pseudo_dataset(
    labeled: LabeledSubject, unlabeled_set, cfg: RegistrationConfig, ids=None, jobs: int = 1
) -> list[PseudoSubject]:
    """One pseudo subject per unlabeled subject, in input order."""
    unlabeled_set = list(unlabeled_set)
    if not unlabeled_set:
        raise ValueError("the unlabeled set is empty; nothing to register against")
    if ids is None:
        ids = [f"unlabeled_{i:03d}" for i in range(len(unlabeled_set))]
    if len(ids) != len(unlabeled_set):
        raise ValueError("ids and unlabeled_set differ in length")
    tasks = [(labeled, y, cfg, sid) for y, sid in zip(unlabeled_set, ids)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_job, tasks))
    return [_job(t) for t in tasks]
