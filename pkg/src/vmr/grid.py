"""Temporal geometry: the 2D moment candidate grid, IoU, and scaled-IoU labels."""

import math
from dataclasses import dataclass, field

import numpy as np

# value stored at invalid grid cells of a supervision map
INVALID_LABEL = -1.0


@dataclass(frozen=True)
class TemporalInterval:
    """A moment location in seconds, half-open [start, end)."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"interval endpoints must be finite, got ({self.start}, {self.end})")
        if self.start < 0:
            raise ValueError(f"interval start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"interval end must exceed start, got ({self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


def iou(a: TemporalInterval, b: TemporalInterval) -> float:
    """Intersection over union of two intervals; 0 when disjoint."""
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


@dataclass(frozen=True, eq=False)
class MomentGrid:
    """All candidate moments of a T-clip video, indexed by (start, end) clip coordinates.

    Cell (a, b) with a <= b covers the half-open span [a*clip_duration, (b+1)*clip_duration).
    candidate_list enumerates valid cells row-major; its order is the canonical
    candidate index used everywhere (location banks, flattened score maps).
    """

    num_clips: int
    clip_duration: float = 1.0
    valid_mask: np.ndarray = field(init=False, repr=False)
    candidate_list: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_clips < 1:
            raise ValueError(f"num_clips must be >= 1, got {self.num_clips}")
        if not (math.isfinite(self.clip_duration) and self.clip_duration > 0):
            raise ValueError(f"clip_duration must be positive, got {self.clip_duration}")
        T = self.num_clips
        mask = np.triu(np.ones((T, T), dtype=bool))
        cands = tuple((a, b) for a in range(T) for b in range(a, T))
        object.__setattr__(self, "valid_mask", mask)
        object.__setattr__(self, "candidate_list", cands)

    @property
    def num_candidates(self) -> int:
        return len(self.candidate_list)

    @property
    def duration(self) -> float:
        return self.num_clips * self.clip_duration

    def cell_interval(self, a: int, b: int) -> TemporalInterval:
        if not (0 <= a <= b < self.num_clips):
            raise ValueError(f"invalid cell ({a}, {b}) for T={self.num_clips}")
        return TemporalInterval(a * self.clip_duration, (b + 1) * self.clip_duration)

    def candidate_intervals(self) -> list:
        return [self.cell_interval(a, b) for a, b in self.candidate_list]

    def candidate_indices(self):
        """(ai, bi) integer arrays over candidate_list, for tensor gather/scatter."""
        ab = np.asarray(self.candidate_list, dtype=np.int64)
        return ab[:, 0], ab[:, 1]

    def best_cell(self, interval: TemporalInterval) -> tuple:
        """The valid cell with highest IoU against `interval` (first wins on ties)."""
        ious = self.candidate_ious(interval)
        return self.candidate_list[int(np.argmax(ious))]

    def candidate_ious(self, interval: TemporalInterval) -> np.ndarray:
        """IoU of every candidate against `interval`, in candidate_list order."""
        ai, bi = self.candidate_indices()
        starts = ai * self.clip_duration
        ends = (bi + 1) * self.clip_duration
        inter = np.minimum(ends, interval.end) - np.maximum(starts, interval.start)
        union = np.maximum(ends, interval.end) - np.minimum(starts, interval.start)
        return np.clip(inter, 0.0, None) / union


def enumerate_candidates(num_clips: int, clip_duration: float = 1.0) -> MomentGrid:
    """Dense enumeration of all a <= b moment candidates of a T-clip video."""
    return MomentGrid(num_clips=num_clips, clip_duration=clip_duration)


def grid_for_video(num_clips: int, duration: float) -> MomentGrid:
    return MomentGrid(num_clips=num_clips, clip_duration=duration / num_clips)


def scaled_labels(gt: TemporalInterval, grid: MomentGrid,
                  t_min: float = 0.5, t_max: float = 1.0) -> np.ndarray:
    """Per-cell supervision y = clamp((IoU - t_min) / (t_max - t_min), 0, 1).

    Returns a (T, T) float64 map; invalid cells hold INVALID_LABEL. Cells with
    y >= 0.5 form the positive candidate set.
    """
    if not 0.0 <= t_min < t_max <= 1.0:
        raise ValueError(f"require 0 <= t_min < t_max <= 1, got ({t_min}, {t_max})")
    T = grid.num_clips
    labels = np.full((T, T), INVALID_LABEL, dtype=np.float64)
    ious = grid.candidate_ious(gt)
    ai, bi = grid.candidate_indices()
    labels[ai, bi] = np.clip((ious - t_min) / (t_max - t_min), 0.0, 1.0)
    return labels
