"""Cosine-similarity traces between per-objective update terms and between
EMA-smoothed gradient streams."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numkit import as_buffer, check_same_shape, cosine_similarity

DEFAULT_BURN_IN = 200


@dataclass
class SimilarityTrace:
    label: str
    steps: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)

    def append(self, step: int, value: float) -> None:
        self.steps.append(int(step))
        self.values.append(float(value))

    def mean_after(self, burn_in: int = DEFAULT_BURN_IN) -> float:
        vals = [v for s, v in zip(self.steps, self.values) if s > burn_in]
        return float(np.mean(vals)) if vals else float("nan")

    def __len__(self):
        return len(self.values)


@dataclass
class StepRecord:
    """What one optimizer step exposes to the diagnostics."""

    step: int
    objective: int
    direction: np.ndarray
    update: Optional[np.ndarray] = None


def update_similarity(records: Sequence[StepRecord], label: str = "update", use: str = "direction") -> SimilarityTrace:
    """Cosine between the update terms of adjacent steps on different objectives.

    One value per transition between objectives (e.g. a forget step followed
    by a retain step), stamped with the later step. ``use`` picks the
    momentum reconstruction (``direction``) or the applied update (``update``).
    """
    if use not in ("direction", "update"):
        raise ValueError(f"use must be 'direction' or 'update', got {use!r}")
    if len({r.objective for r in records}) < 2:
        raise ValueError("update_similarity needs a run that visits at least two objectives")
    trace = SimilarityTrace(label)
    for prev, cur in zip(records, records[1:]):
        if prev.objective == cur.objective:
            continue
        a = getattr(prev, use)
        b = getattr(cur, use)
        trace.append(cur.step, cosine_similarity(a, b))
    return trace


def gradient_ema_similarity(g_stream_f, g_stream_r, ema_factor: float = 0.9, label: str = "gradient_ema") -> SimilarityTrace:
    """Cosine between EMAs (factor ``ema_factor``) of two gradient streams, per step."""
    trace = SimilarityTrace(label)
    ema_f = ema_r = None
    for t, (gf, gr) in enumerate(zip(g_stream_f, g_stream_r), start=1):
        gf = as_buffer(gf)
        gr = as_buffer(gr)
        check_same_shape(gf, gr, "gradient streams")
        if ema_f is None:
            ema_f = np.zeros_like(gf)
            ema_r = np.zeros_like(gr)
        ema_f = ema_factor * ema_f + (1 - ema_factor) * gf
        ema_r = ema_factor * ema_r + (1 - ema_factor) * gr
        trace.append(t, cosine_similarity(ema_f, ema_r))
    return trace


def traces_csv(traces: Sequence[SimilarityTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "series", "cosine"))
    for tr in traces:
        for s, v in zip(tr.steps, tr.values):
            w.writerow((s, tr.label, f"{v:.17g}"))
    return buf.getvalue()
