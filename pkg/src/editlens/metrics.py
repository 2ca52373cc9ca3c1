"""Meta-evaluation and diversity metrics.

Implements rank correlation, chance-corrected multi-rater agreement on an
ordinal scale, mean-vote aggregation, delta text-image similarity over
ingested embeddings, and the Vendi diversity score. All functions are pure
and reentrant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import eigh
from scipy.stats import rankdata

from .model import EditLensError

logger = logging.getLogger(__name__)

__all__ = [
    "FeatureMatrix",
    "MetricError",
    "RatingsMatrix",
    "delta_similarity",
    "diversity_experiment",
    "load_features",
    "load_ratings_csv",
    "mean_vote",
    "spearman_rho",
    "vendi_score",
    "weighted_fleiss_kappa",
]

EIGENVALUE_FLOOR = 1e-12

KAPPA_FORMULA = (
    "kappa = 1 - O/E; d(i,j) = (i-j)^2/(k-1)^2; "
    "O = mean over items of mean pairwise rater disagreement d; "
    "E = sum_{a,b} p_a p_b d(a,b) with p the pooled marginal rating distribution"
)


class MetricError(EditLensError):
    """Domain violation in a metric input (sizes, ranges, degeneracy)."""


# ---------------------------------------------------------------------------
# Input containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RatingsMatrix:
    """items x raters ordinal ratings on [1..k]; NaN marks a missing cell."""

    values: np.ndarray
    k: int

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise MetricError(f"ratings must be 2-D (items x raters), got shape {v.shape}")
        if self.k < 2:
            raise MetricError("scale size k must be >= 2")
        present = v[~np.isnan(v)]
        if present.size and (present.min() < 1 or present.max() > self.k):
            raise MetricError(f"ratings must lie in [1,{self.k}]")
        if present.size and not np.allclose(present, np.round(present)):
            raise MetricError("ratings must be integers (or NaN for missing)")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int | None]], k: int) -> "RatingsMatrix":
        width = max((len(r) for r in rows), default=0)
        values = np.full((len(rows), width), np.nan)
        for i, row in enumerate(rows):
            for j, cell in enumerate(row):
                if cell is not None:
                    values[i, j] = float(cell)
        return cls(values=values, k=k)

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_raters(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureMatrix:
    """n rows of d-dimensional real feature vectors."""

    rows: np.ndarray
    normalize: bool = True

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=float)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise MetricError(f"features must be a non-empty 2-D array, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise MetricError("features contain non-finite entries")

    @property
    def n(self) -> int:
        return self.rows.shape[0]


# ---------------------------------------------------------------------------
# Rank correlation
# ---------------------------------------------------------------------------


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    rho = Pearson correlation of the rank vectors. For tie-free inputs this
    equals 1 - 6*sum(d^2)/(n(n^2-1)).
    """
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.ndim != 1 or ya.ndim != 1 or xa.size != ya.size:
        raise MetricError(f"length mismatch: {xa.shape} vs {ya.shape}")
    n = xa.size
    if n < 3:
        raise MetricError(f"need at least 3 paired observations, got {n}")
    rx = rankdata(xa)
    ry = rankdata(ya)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    vx = float(np.dot(sx, sx))
    vy = float(np.dot(sy, sy))
    if vx == 0.0 or vy == 0.0:
        raise MetricError("zero rank variance: one input is constant")
    return float(np.dot(sx, sy) / math.sqrt(vx * vy))


# ---------------------------------------------------------------------------
# Multi-rater agreement
# ---------------------------------------------------------------------------


def weighted_fleiss_kappa(ratings: RatingsMatrix, weighting: str = "quadratic") -> float:
    """Chance-corrected multi-rater agreement with quadratic weights.

    kappa = 1 - O/E with disagreement d(i,j) = (i-j)^2 / (k-1)^2 (the
    complement of the agreement weights w = 1 - d). O averages the mean
    pairwise rater disagreement over items (missing cells masked; items with
    fewer than two ratings skipped); E is the expected disagreement of two
    raters drawing independently from the pooled marginal distribution.
    Full agreement gives 1.0; chance-level agreement gives approximately 0.
    """
    if weighting != "quadratic":
        raise MetricError(f"unsupported weighting {weighting!r}")
    v = ratings.values
    k = ratings.k
    scale = float((k - 1) ** 2)

    observed_terms: list[float] = []
    for row in v:
        present = row[~np.isnan(row)]
        m = present.size
        if m < 2:
            continue
        diffs = present[:, None] - present[None, :]
        # mean over the m*(m-1) ordered off-diagonal pairs
        total = float((diffs**2).sum()) / scale
        observed_terms.append(total / (m * (m - 1)))
    if not observed_terms:
        raise MetricError("agreement needs at least one item with >= 2 ratings")
    observed = float(np.mean(observed_terms))

    present = v[~np.isnan(v)].astype(int)
    counts = np.bincount(present, minlength=k + 1)[1 : k + 1].astype(float)
    p = counts / counts.sum()
    cats = np.arange(1, k + 1, dtype=float)
    d = (cats[:, None] - cats[None, :]) ** 2 / scale
    expected = float(p @ d @ p)
    if expected == 0.0:
        raise MetricError("degenerate marginals: expected disagreement is zero")
    return 1.0 - observed / expected


def mean_vote(ratings: Sequence[float | None]) -> float:
    """Arithmetic mean of the present ratings for one item."""
    present = [float(r) for r in ratings if r is not None and not (isinstance(r, float) and math.isnan(r))]
    if not present:
        raise MetricError("mean vote over an empty item")
    return sum(present) / len(present)


# ---------------------------------------------------------------------------
# Embedding-space deltas
# ---------------------------------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def delta_similarity(
    e_ctx: Sequence[float], e_edit: Sequence[float], e_text: Sequence[float]
) -> float:
    """cos(e_edit, e_text) - cos(e_ctx, e_text) over ingested embeddings."""
    ctx = np.asarray(e_ctx, dtype=float)
    edit = np.asarray(e_edit, dtype=float)
    text = np.asarray(e_text, dtype=float)
    if not (ctx.shape == edit.shape == text.shape) or ctx.ndim != 1:
        raise MetricError(
            f"embedding dimension mismatch: {ctx.shape}, {edit.shape}, {text.shape}"
        )
    return _cosine(edit, text) - _cosine(ctx, text)


# ---------------------------------------------------------------------------
# Vendi diversity
# ---------------------------------------------------------------------------


def vendi_score(features: FeatureMatrix, kernel: str = "cosine") -> float:
    """Effective number of distinct items: VS = exp(-sum_i lam_i log lam_i).

    lam_i are the eigenvalues of K/n where K is the similarity kernel of the
    n rows. Both supported kernels L2-normalize rows first, so k(x,x) = 1 and
    the eigenvalues sum to 1; eigenvalues below 1e-12 are clamped to 0 and
    0*log 0 := 0. Bounds: 1 <= VS <= n; identical rows give 1, mutually
    orthonormal rows give n.
    """
    if kernel not in ("cosine", "linear-normalized"):
        raise MetricError(f"unknown kernel {kernel!r}")
    rows = features.rows
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise MetricError("zero-norm feature row; cannot normalize")
    unit = rows / norms[:, None]
    n = unit.shape[0]
    gram = unit @ unit.T / n
    eigenvalues = eigh(gram, eigvals_only=True)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_FLOOR, 0.0, eigenvalues)
    positive = eigenvalues[eigenvalues > 0.0]
    entropy = float(-(positive * np.log(positive)).sum())
    return float(np.exp(entropy))


@dataclass(frozen=True)
class DiversityReport:
    kernel: str
    per_group: dict
    summaries: dict
    skipped: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "per_group": self.per_group,
            "summaries": self.summaries,
            "skipped": list(self.skipped),
        }


def diversity_experiment(
    groups: Mapping[tuple[str, str], FeatureMatrix], kernel: str = "cosine"
) -> DiversityReport:
    """One Vendi value per (prompt_kind, sample) group of per-seed features.

    Groups with a single row carry no diversity signal and are skipped with a
    warning. Summaries per prompt kind report mean and quartiles.
    """
    per_group: dict[str, float] = {}
    by_kind: dict[str, list[float]] = {}
    skipped: list[str] = []
    for (kind, sample_id), matrix in sorted(groups.items()):
        label = f"{kind}/{sample_id}"
        if matrix.n < 2:
            skipped.append(label)
            logger.warning("diversity group %s has a single row; skipped", label)
            continue
        value = vendi_score(matrix, kernel=kernel)
        per_group[label] = value
        by_kind.setdefault(kind, []).append(value)
    summaries = {}
    for kind, values in sorted(by_kind.items()):
        arr = np.asarray(values)
        summaries[kind] = {
            "n": int(arr.size),
            "mean": float(arr.mean()),
            "q1": float(np.percentile(arr, 25)),
            "median": float(np.percentile(arr, 50)),
            "q3": float(np.percentile(arr, 75)),
        }
    return DiversityReport(
        kernel=kernel, per_group=per_group, summaries=summaries, skipped=tuple(skipped)
    )


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------


def load_features(path: Path | str) -> tuple[list[str], FeatureMatrix, str]:
    """Feature file: header line `n d <id scheme>` then `<id> v1 ... vd` rows."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise MetricError(f"empty feature file: {path}")
    header = lines[0].split(maxsplit=2)
    if len(header) < 2:
        raise MetricError(f"feature header must be 'n d [id scheme]', got {lines[0]!r}")
    n, d = int(header[0]), int(header[1])
    scheme = header[2] if len(header) > 2 else ""
    ids: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != d + 1:
            raise MetricError(f"{path}:{lineno}: expected id + {d} values, got {len(parts)} fields")
        ids.append(parts[0])
        rows.append([float(x) for x in parts[1:]])
    if len(rows) != n:
        raise MetricError(f"{path}: header declares {n} rows, found {len(rows)}")
    return ids, FeatureMatrix(rows=np.asarray(rows)), scheme


def load_ratings_csv(path: Path | str, k: int) -> tuple[list[str], RatingsMatrix]:
    """Ratings CSV: one row per item, first column item id, blank cells missing."""
    ids: list[str] = []
    rows: list[list[int | None]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            ids.append(row[0])
            rows.append([int(cell) if cell.strip() else None for cell in row[1:]])
    return ids, RatingsMatrix.from_rows(rows, k=k)
