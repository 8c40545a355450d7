"""Histograms, summary statistics and corpus-versus-corpus divergence reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BinMismatch, EmptySampleSet, ZeroVector
from .geometry import ANGLE_FEATURES, BOND_FEATURES, FeatureTable, wrap_angle

logger = logging.getLogger(__name__)

KL_EPSILON = 1e-10
FEATURES = ANGLE_FEATURES + BOND_FEATURES
METRICS = ("kl", "wasserstein", "euclidean", "cosine")


@dataclass(frozen=True)
class BinSpec:
    """Uniform bins over [low, high].

    Periodic specs wrap samples into (low, high] and use right-closed bins,
    so an angle of exactly -pi lands in the last bin next to +pi.  Other
    specs use left-closed bins, with ``high`` itself kept in the last bin.
    """

    low: float
    high: float
    bins: int
    periodic: bool = False

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.bins + 1)

    def assign(self, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bin index of each sample and the in-range mask."""
        x = np.asarray(samples, dtype=np.float64)
        edges = self.edges
        if self.periodic:
            span = self.high - self.low
            x = self.high - np.mod(self.high - x, span)
            idx = np.searchsorted(edges, x, side="left") - 1
            idx = np.clip(idx, 0, self.bins - 1)
            return idx, np.isfinite(x)
        inside = np.isfinite(x) & (x >= self.low) & (x <= self.high)
        idx = np.searchsorted(edges, x, side="right") - 1
        idx = np.clip(idx, 0, self.bins - 1)
        return idx, inside


ANGLE_BINS = BinSpec(-math.pi, math.pi, 360, periodic=True)
BOND_BINS = BinSpec(1.1, 1.6, 250)


def default_bins(feature: str) -> BinSpec:
    return ANGLE_BINS if feature in ANGLE_FEATURES else BOND_BINS


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    out_of_range: int = 0

    @property
    def count(self) -> int:
        return int(self.counts.sum())

    @property
    def density(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @classmethod
    def from_counts(cls, bin_edges, counts) -> "Histogram":
        counts = np.asarray(counts, dtype=np.float64)
        if counts.sum() <= 0:
            raise EmptySampleSet("histogram has no mass")
        return cls(np.asarray(bin_edges, dtype=np.float64), counts)


def build_histogram(samples, spec: BinSpec) -> Histogram:
    """Bin finite samples; out-of-range ones are counted but not binned."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    idx, inside = spec.assign(x)
    counts = np.bincount(idx[inside], minlength=spec.bins).astype(np.float64)
    if counts.sum() == 0:
        raise EmptySampleSet(f"no in-range samples among {x.size}")
    return Histogram(spec.edges, counts, out_of_range=int((~inside).sum()))


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    variance: float
    n: int


def summarize(samples) -> SummaryStats:
    """Mean and population variance of the finite samples."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise EmptySampleSet("no finite samples")
    mean = float(x.mean())
    return SummaryStats(mean, float(np.mean((x - mean) ** 2)), int(x.size))


def _check_bins(p: Histogram, q: Histogram) -> None:
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise BinMismatch("histograms have different bin edges")


def kl_divergence(p: Histogram, q: Histogram, eps: float = KL_EPSILON) -> float:
    """KL(p || q) in nats after adding ``eps`` to every bin and renormalising."""
    _check_bins(p, q)
    ps = p.density + eps
    qs = q.density + eps
    ps /= ps.sum()
    qs /= qs.sum()
    return max(float(np.sum(ps * np.log(ps / qs))), 0.0)


def wasserstein_1d(p: Histogram, q: Histogram) -> float:
    _check_bins(p, q)
    cdf_gap = np.abs(np.cumsum(p.density) - np.cumsum(q.density))
    return float(np.sum(cdf_gap * p.widths))


def euclidean_distance(p: Histogram, q: Histogram) -> float:
    """Distance between the raw count vectors."""
    _check_bins(p, q)
    return float(np.linalg.norm(p.counts - q.counts))


def cosine_similarity(p: Histogram, q: Histogram) -> float:
    _check_bins(p, q)
    na, nb = np.linalg.norm(p.counts), np.linalg.norm(q.counts)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero count vector")
    return float(np.clip(np.dot(p.counts, q.counts) / (na * nb), -1.0, 1.0))


def compare_histograms(p: Histogram, q: Histogram) -> dict[str, float]:
    return {
        "kl": kl_divergence(p, q),
        "wasserstein": wasserstein_1d(p, q),
        "euclidean": euclidean_distance(p, q),
        "cosine": cosine_similarity(p, q),
    }


def ramachandran_counts(phi, psi, spec: BinSpec = ANGLE_BINS) -> np.ndarray:
    """Joint (phi, psi) counts; row index is the phi bin, column the psi bin."""
    i, ok_i = spec.assign(phi)
    j, ok_j = spec.assign(psi)
    ok = ok_i & ok_j
    grid = np.zeros((spec.bins, spec.bins), dtype=np.int64)
    np.add.at(grid, (i[ok], j[ok]), 1)
    return grid


# ---------------------------------------------------------------- corpus level


@dataclass
class FeatureComparison:
    feature: str
    hist_a: Histogram
    hist_b: Histogram
    stats_a: SummaryStats
    stats_b: SummaryStats
    metrics: dict[str, float]


@dataclass
class CorpusReport:
    features: dict[str, FeatureComparison]
    rama_a: np.ndarray
    rama_b: np.ndarray
    skipped: list[str] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for name, fc in self.features.items():
            for metric in METRICS:
                out.append({
                    "feature": name,
                    "metric": metric,
                    "value": fc.metrics[metric],
                    "mean_a": fc.stats_a.mean,
                    "var_a": fc.stats_a.variance,
                    "n_a": fc.stats_a.n,
                    "mean_b": fc.stats_b.mean,
                    "var_b": fc.stats_b.variance,
                    "n_b": fc.stats_b.n,
                })
        return out

    def write_csv(self, path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["feature", "metric", "value"])
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def write_json(self, path) -> None:
        doc = {"records": self.rows(), "skipped": self.skipped}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_histograms(self, path) -> None:
        """Long table of per-bin counts for both corpora."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "bin", "left", "right", "count_a", "count_b"])
            for name, fc in self.features.items():
                edges = fc.hist_a.bin_edges
                for b in range(len(edges) - 1):
                    writer.writerow([name, b, repr(float(edges[b])), repr(float(edges[b + 1])),
                                     int(fc.hist_a.counts[b]), int(fc.hist_b.counts[b])])


def write_grid(grid: np.ndarray, path, spec: BinSpec = ANGLE_BINS) -> None:
    """Dense row-major grid: one line per phi bin, one comma-separated column per psi bin."""
    with open(path, "w") as fh:
        fh.write(f"# rows=phi cols=psi bins={spec.bins} low={spec.low!r} high={spec.high!r}\n")
        np.savetxt(fh, grid, fmt="%d", delimiter=",")


def read_grid(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", dtype=np.int64, ndmin=2)


def pooled(tables: list[FeatureTable], feature: str) -> np.ndarray:
    """Valid values of ``feature`` across tables, in structure-id order."""
    ordered = sorted(tables, key=lambda t: t.structure_id)
    parts = [t.values(feature) for t in ordered]
    return np.concatenate(parts) if parts else np.zeros(0)


def _pooled_pairs(tables: list[FeatureTable]) -> tuple[np.ndarray, np.ndarray]:
    phi, psi = [], []
    for t in sorted(tables, key=lambda t: t.structure_id):
        ok = t.angle_masks["phi"] & t.angle_masks["psi"]
        phi.append(t.angles["phi"][ok])
        psi.append(t.angles["psi"][ok])
    if not phi:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(phi), np.concatenate(psi)


def corpus_compare(a: list[FeatureTable], b: list[FeatureTable], bins=None) -> CorpusReport:
    """Compare every backbone feature between two corpora of feature tables.

    ``bins`` optionally maps feature name to a :class:`BinSpec`.  Features with
    no valid sample in either corpus are skipped with a warning.
    """
    if not a or not b:
        raise EmptySampleSet("both corpora must be non-empty")
    bins = bins or {}
    features, skipped = {}, []
    for name in FEATURES:
        spec = bins.get(name, default_bins(name))
        xa, xb = pooled(a, name), pooled(b, name)
        try:
            ha, hb = build_histogram(xa, spec), build_histogram(xb, spec)
        except EmptySampleSet:
            logger.warning("feature %s has no valid samples; skipped", name)
            skipped.append(name)
            continue
        features[name] = FeatureComparison(name, ha, hb, summarize(xa), summarize(xb), compare_histograms(ha, hb))
    return CorpusReport(features, ramachandran_counts(*_pooled_pairs(a)),
                        ramachandran_counts(*_pooled_pairs(b)), skipped)


def jitter_tables(tables: list[FeatureTable], sigma: float, seed: int) -> list[FeatureTable]:
    """Copies with Gaussian noise of ``sigma`` radians on every angle (wrapped)."""
    rng = np.random.default_rng(seed)
    out = []
    for t in tables:
        angles = {}
        for name in ANGLE_FEATURES:
            noise = rng.normal(scale=sigma, size=t.angles[name].shape)
            angles[name] = np.where(t.angle_masks[name], wrap_angle(t.angles[name] + noise), 0.0)
        out.append(FeatureTable(t.structure_id, angles, dict(t.angle_masks), dict(t.bonds), dict(t.bond_masks)))
    return out
