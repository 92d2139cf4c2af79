"""Gaze traces and the gaze -> attention-level tiling rule."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class GazeParseError(ValueError):
    pass


@dataclass(frozen=True)
class GazeTrace:
    frames: np.ndarray  # int64, strictly increasing
    xy: np.ndarray  # (n, 2) in [0, 1]
    clamped: int = 0

    def __post_init__(self):
        if len(self.frames) != len(self.xy):
            raise ValueError("frames and xy length differ")
        if len(self.frames) > 1 and np.any(np.diff(self.frames) <= 0):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class AttentionMap:
    """Tile counts per attention level (peripheral=1, paracentral=2, central=3)."""

    n1: int
    n2: int
    n3: int

    @property
    def counts(self) -> np.ndarray:
        return np.array([self.n1, self.n2, self.n3], dtype=np.float64)

    @property
    def total(self) -> int:
        return self.n1 + self.n2 + self.n3


def ingest_gaze_csv(path: str | Path) -> GazeTrace:
    """Read a ``frame,x,y`` CSV. Out-of-range coordinates are clamped and tallied."""
    path = Path(path)
    frames, xy = [], []
    clamped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return GazeTrace(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), 0)
        if [h.strip().lower() for h in header] != ["frame", "x", "y"]:
            raise GazeParseError(f"{path}:1: expected header 'frame,x,y', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise GazeParseError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                fr, x, y = int(row[0]), float(row[1]), float(row[2])
            except ValueError as exc:
                raise GazeParseError(f"{path}:{lineno}: {exc}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise GazeParseError(f"{path}:{lineno}: non-finite coordinate")
            if frames and fr <= frames[-1]:
                raise GazeParseError(f"{path}:{lineno}: frame index {fr} not increasing")
            cx, cy = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
            if (cx, cy) != (x, y):
                clamped += 1
            frames.append(fr)
            xy.append((cx, cy))
    if clamped:
        log.warning("%s: clamped %d out-of-range gaze rows", path, clamped)
    return GazeTrace(
        np.asarray(frames, dtype=np.int64),
        np.asarray(xy, dtype=np.float64).reshape(-1, 2),
        clamped,
    )


def synth_gaze(seed: int, length: int, step_sigma: float = 0.02) -> GazeTrace:
    """Reflected Gaussian random walk on the unit square, one point per frame."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0.0, 1.0, size=2)
    steps = rng.normal(0.0, step_sigma, size=(length - 1, 2))
    pos = start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    # reflect into [0, 1]: fold with period 2
    pos = np.mod(pos, 2.0)
    pos = np.where(pos > 1.0, 2.0 - pos, pos)
    return GazeTrace(np.arange(length, dtype=np.int64), pos)


def gaze_tile(x: float, y: float, I: int, J: int) -> tuple[int, int]:
    row = min(int(y * I), I - 1)
    col = min(int(x * J), J - 1)
    return row, col


def attention_map(trace: GazeTrace, t: int, I: int, J: int, F: int) -> AttentionMap:
    """Attention map of GoP ``t``.

    The majority gaze tile over frames ``[t*F, (t+1)*F)`` is the central
    (level 3) tile, its clipped 8-neighbourhood is level 2 and the rest
    level 1. Frame indices wrap around the trace. Ties in the majority vote
    go to the lowest flattened tile index.
    """
    n = len(trace)
    if n == 0:
        raise ValueError("empty gaze trace")
    idx = (np.arange(t * F, (t + 1) * F) % n)
    xy = trace.xy[idx]
    rows = np.minimum((xy[:, 1] * I).astype(np.int64), I - 1)
    cols = np.minimum((xy[:, 0] * J).astype(np.int64), J - 1)
    votes = np.bincount(rows * J + cols, minlength=I * J)
    r, c = divmod(int(np.argmax(votes)), J)
    n_rows = min(r + 1, I - 1) - max(r - 1, 0) + 1
    n_cols = min(c + 1, J - 1) - max(c - 1, 0) + 1
    n2 = n_rows * n_cols - 1
    return AttentionMap(I * J - n2 - 1, n2, 1)
