"""Cross-entropy band diversity and unsupervised band grouping.

For two aligned bands ``p`` and ``q`` the diversity is
``H(p, q) = sum_x p(x) * log(1 / max(q(x), 1))`` on raw digital numbers.
Bands whose mean absolute row value is an order of magnitude away from the
rest are isolated as singleton groups; the remaining bands are packed into
triples with the smallest (most negative) summed cross entropy.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Q_FLOOR = 1.0


@dataclass
class BandChannel:
    name: str
    pixels: np.ndarray
    tiles: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1)
        if self.pixels.size == 0:
            raise ValueError(f"band {self.name!r} is empty")
        if np.any(self.pixels < 0):
            raise ValueError(f"band {self.name!r} has negative values")


@dataclass
class CrossEntropyMatrix:
    band_names: list[str]
    values: np.ndarray  # diagonal is NaN and never used
    log_base: float | None = None  # None means natural log
    pixel_count: int = 0
    seed: int | None = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        k = len(self.band_names)
        if self.values.shape != (k, k):
            raise ValueError(f"matrix shape {self.values.shape} does not match {k} bands")
        np.fill_diagonal(self.values, np.nan)
        off = self.values[~np.eye(k, dtype=bool)]
        if not np.all(np.isfinite(off)):
            raise ValueError("off-diagonal cross-entropy entries must be finite")

    def h(self, p: str, q: str) -> float:
        i, j = self.band_names.index(p), self.band_names.index(q)
        if i == j:
            raise ValueError("diagonal entries are undefined")
        return float(self.values[i, j])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([""] + self.band_names)
        for i, name in enumerate(self.band_names):
            row = ["" if i == j else f"{self.values[i, j]:.6e}" for j in range(len(self.band_names))]
            writer.writerow([name] + row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, log_base: float | None = None) -> "CrossEntropyMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        values = np.full((len(names), len(names)), np.nan)
        for i, row in enumerate(rows[1:]):
            for j, cell in enumerate(row[1:]):
                if i != j:
                    values[i, j] = float(cell)
        return cls(names, values, log_base=log_base)


@dataclass
class GroupingResult:
    outlier_groups: list[list[str]]
    spectral_groups: list[list[str]]
    triple_scores: list[tuple[tuple[str, ...], float]]
    log_base: float | None = None
    pixel_count: int = 0
    seed: int | None = None

    @property
    def outliers(self) -> list[str]:
        return [g[0] for g in self.outlier_groups]

    @property
    def groups(self) -> list[list[str]]:
        """All groups in pipeline order: outlier singletons first, then spectral triples."""
        return [list(g) for g in self.outlier_groups] + [list(g) for g in self.spectral_groups]

    def to_json(self) -> str:
        payload = {
            "outliers": self.outliers,
            "groups": self.groups,
            "scores": [{"bands": list(t), "score": s} for t, s in self.triple_scores],
            "log_base": "e" if self.log_base is None else self.log_base,
            "pixel_count": self.pixel_count,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroupingResult":
        d = json.loads(text)
        outliers = list(d["outliers"])
        groups = [list(g) for g in d["groups"]]
        singletons = [[b] for b in outliers]
        spectral = [g for g in groups if not (len(g) == 1 and g[0] in outliers)]
        scores = [(tuple(s["bands"]), float(s["score"])) for s in d.get("scores", [])]
        base = d.get("log_base", "e")
        return cls(singletons, spectral, scores, None if base == "e" else float(base),
                   int(d.get("pixel_count", 0)), d.get("seed"))


def _log(values: np.ndarray, log_base: float | None) -> np.ndarray:
    out = np.log(np.maximum(values, Q_FLOOR))
    if log_base is not None:
        if log_base <= 1:
            raise ValueError("log base must be > 1")
        out = out / math.log(log_base)
    return out


def pairwise_cross_entropy(p: BandChannel, q: BandChannel, log_base: float | None = None) -> float:
    """``sum_x p(x) * log(1 / max(q(x), 1))``; asymmetric in general."""
    if p.pixels.size != q.pixels.size:
        raise ValueError(f"bands {p.name!r} and {q.name!r} differ in pixel count")
    return float(-np.dot(p.pixels, _log(q.pixels, log_base)))


def cross_entropy_matrix(bands: Sequence[BandChannel], sample_budget: int | None = None,
                         seed: int = 0, log_base: float | None = None) -> CrossEntropyMatrix:
    """All ordered off-diagonal ``H(p, q)`` over one shared set of pixel positions.

    When the pixel count exceeds ``sample_budget`` a seeded uniform subsample
    of positions (without replacement) is used for every pair.
    """
    bands = list(bands)
    if len(bands) < 2:
        raise ValueError("need at least two bands")
    n = bands[0].pixels.size
    for b in bands[1:]:
        if b.pixels.size != n:
            raise ValueError(f"band {b.name!r} is misaligned: {b.pixels.size} vs {n} pixels")
    if sample_budget is not None and n > sample_budget:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=sample_budget, replace=False))
    else:
        idx = slice(None)
    pix = [b.pixels[idx] for b in bands]
    logs = [_log(p, log_base) for p in pix]
    k = len(bands)
    values = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            if i != j:
                values[i, j] = -float(np.dot(pix[i], logs[j]))
    return CrossEntropyMatrix([b.name for b in bands], values, log_base=log_base,
                              pixel_count=int(pix[0].size), seed=seed)


def row_magnitudes(matrix: CrossEntropyMatrix) -> np.ndarray:
    """Mean of ``|H(b, .)|`` over each row, diagonal excluded."""
    k = len(matrix.band_names)
    off = ~np.eye(k, dtype=bool)
    return np.array([np.abs(matrix.values[i][off[i]]).mean() for i in range(k)])


def detect_outlier_bands(matrix: CrossEntropyMatrix, ratio_threshold: float = 0.6) -> set[str]:
    """Bands whose row magnitude differs from the median row by more than the threshold ratio.

    A band is an outlier when its row magnitude is below ``ratio_threshold``
    times the median, or above ``1 / ratio_threshold`` times the median.
    """
    if len(matrix.band_names) < 3:
        raise ValueError("outlier detection needs at least three bands")
    m = row_magnitudes(matrix)
    med = float(np.median(m))
    if med == 0:
        return set()
    ratio = m / med
    flagged = (ratio < ratio_threshold) | (ratio > 1.0 / ratio_threshold)
    return {name for name, f in zip(matrix.band_names, flagged) if f}


def triple_score(matrix: CrossEntropyMatrix, triple: Sequence[str]) -> float:
    return sum(matrix.h(p, q) for p, q in itertools.permutations(triple, 2))


def form_groups(matrix: CrossEntropyMatrix, n_spectral_groups: int = 2,
                outliers: set[str] | None = None, ratio_threshold: float = 0.6) -> GroupingResult:
    """Singleton groups for outliers, then the lowest-scoring band triples.

    Triples are ranked by ascending summed cross entropy; ties break on the
    band-name tuple. Fewer than three remaining bands form a single group.
    """
    names = matrix.band_names
    if not names:
        raise ValueError("no bands to group")
    if outliers is None:
        outliers = detect_outlier_bands(matrix, ratio_threshold) if len(names) >= 3 else set()
    outlier_groups = [[b] for b in names if b in outliers]
    rest = [b for b in names if b not in outliers]
    if not rest:
        raise ValueError("every band was flagged as an outlier")
    if len(rest) < 3:
        spectral, scores = [rest], []
    else:
        scored = [(t, triple_score(matrix, t)) for t in itertools.combinations(rest, 3)]
        scores = sorted(scored, key=lambda ts: (ts[1], ts[0]))
        spectral = [list(t) for t, _ in scores[:max(1, n_spectral_groups)]]
    return GroupingResult(outlier_groups, spectral, scores, log_base=matrix.log_base,
                          pixel_count=matrix.pixel_count, seed=matrix.seed)


def group_bands(bands: Sequence[BandChannel], n_spectral_groups: int = 2,
                sample_budget: int | None = None, seed: int = 0, log_base: float | None = None,
                ratio_threshold: float = 0.6) -> tuple[CrossEntropyMatrix, GroupingResult]:
    matrix = cross_entropy_matrix(bands, sample_budget=sample_budget, seed=seed, log_base=log_base)
    return matrix, form_groups(matrix, n_spectral_groups, ratio_threshold=ratio_threshold)


# Published five-band cross-entropy matrix for ISPRS Potsdam (8-bit DNs), in units of 1e10.
POTSDAM_BANDS = ["IR", "R", "G", "B", "DSM"]
POTSDAM_TABLE = np.array([
    [np.nan, -1.75, -1.77, -1.73, -1.46],
    [-1.54, np.nan, -1.56, -1.53, -1.27],
    [-1.68, -1.65, np.nan, -1.64, -1.36],
    [-1.55, -1.51, -1.54, np.nan, -1.25],
    [-0.75, -0.73, -0.74, -0.72, np.nan],
]) * 1e10


def potsdam_matrix() -> CrossEntropyMatrix:
    return CrossEntropyMatrix(list(POTSDAM_BANDS), POTSDAM_TABLE.copy())
