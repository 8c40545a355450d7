"""Downstream metrics: paired RMSD, sequence recovery, perplexity and the bias report."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone_io import AMINO_ACIDS, BackboneStructure, PairManifest, ensure_dir, load_pair
from .errors import EmptySampleSet, InvalidDistribution, LengthMismatch
from .geometry import CA, extract_features, kabsch_align
from .model import Checkpoint, load_checkpoint, reconstruct
from .stats import BinSpec, Histogram, build_histogram, corpus_compare, write_grid

logger = logging.getLogger(__name__)

RMSD_BINS = BinSpec(0.0, 20.0, 80)
UNKNOWN = "X"

REPORT_FILES = {
    "features.csv": "one row per (feature, metric): value plus mean/variance/n of both corpora",
    "features.json": "the same records as a JSON document, with the list of skipped features",
    "histograms.csv": "per-bin counts of every feature for corpus a and b",
    "ramachandran_a.csv": "360x360 (phi, psi) counts of corpus a, rows = phi bins",
    "ramachandran_b.csv": "360x360 (phi, psi) counts of corpus b, rows = phi bins",
    "ramachandran_overlay.csv": "counts of b minus counts of a on the same grid",
    "paired_rmsd.csv": "CA RMSD of structures present in both corpora under the same id",
    "MANIFEST.json": "this file inventory",
}


@dataclass
class RmsdReport:
    pair_ids: list[str]
    rmsd: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_ids)

    def histogram(self, spec: BinSpec = RMSD_BINS) -> Histogram | None:
        if len(self.rmsd) == 0:
            return None
        return build_histogram(self.rmsd, spec)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "rmsd"])
            for pid, value in zip(self.pair_ids, self.rmsd):
                writer.writerow([pid, repr(float(value))])


def structure_rmsd(a: BackboneStructure, b: BackboneStructure, full_backbone: bool = False) -> float:
    """Kabsch RMSD between two equal-length structures, CA only unless ``full_backbone``."""
    if len(a) != len(b):
        raise LengthMismatch(f"{a.id} has {len(a)} residues, {b.id} has {len(b)}")
    if full_backbone:
        mask = a.atom_mask & b.atom_mask
        return kabsch_align(a.coords.reshape(-1, 3), b.coords.reshape(-1, 3), mask.reshape(-1))[2]
    return kabsch_align(a.coords[:, CA], b.coords[:, CA])[2]


def _as_checkpoint(transform) -> Checkpoint | None:
    if transform is None or isinstance(transform, Checkpoint):
        return transform
    return load_checkpoint(transform)


def paired_rmsd(manifest: PairManifest, transform=None, full_backbone: bool = False,
                split: str | None = None) -> RmsdReport:
    """RMSD of every (optionally debiased) predicted structure to its experimental partner."""
    ck = _as_checkpoint(transform)
    rows = manifest.rows if split is None else manifest.split(split)
    ids, values = [], []
    for row in sorted(rows, key=lambda r: r.pair_id):
        pred, exp = load_pair(row)
        if ck is not None:
            pred = reconstruct(pred, ck.config, ck.params)
        ids.append(row.pair_id)
        values.append(structure_rmsd(pred, exp, full_backbone))
    return RmsdReport(ids, np.asarray(values, dtype=np.float64))


def _known_positions(true_seq: str) -> np.ndarray:
    return np.array([c != UNKNOWN for c in true_seq], dtype=bool)


def recovery_rate(pred_seq: str, true_seq: str) -> float:
    """Fraction of positions where the designed residue equals the native one.

    Positions whose native residue is unknown ('X') are left out.
    """
    if len(pred_seq) != len(true_seq):
        raise LengthMismatch(f"sequences of length {len(pred_seq)} and {len(true_seq)}")
    known = _known_positions(true_seq)
    if not known.any():
        raise EmptySampleSet("no known native residues")
    hits = np.array([p == t for p, t in zip(pred_seq, true_seq)], dtype=bool)
    return float(hits[known].mean())


def perplexity(log_probs, true_seq: str, tol: float = 1e-6) -> float:
    """exp of the mean negative log-likelihood of the native residues.

    ``log_probs`` is (L, 20) natural-log probabilities in ``AMINO_ACIDS``
    order; every row must normalise within ``tol``.  'X' positions are left
    out.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] != len(AMINO_ACIDS):
        raise InvalidDistribution(f"log_probs must be (L, {len(AMINO_ACIDS)}), got {lp.shape}")
    if lp.shape[0] != len(true_seq):
        raise LengthMismatch(f"{lp.shape[0]} rows for a sequence of length {len(true_seq)}")
    if np.any(np.isnan(lp)) or np.any(lp == np.inf):
        raise InvalidDistribution("log_probs contain NaN or +inf")
    peak = lp.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(peak)):
        raise InvalidDistribution("a row has zero total probability")
    lse = peak[:, 0] + np.log(np.sum(np.exp(lp - peak), axis=1))
    if np.any(np.abs(lse) > tol):
        bad = int(np.argmax(np.abs(lse)))
        raise InvalidDistribution(f"row {bad} log-sum-exp is {lse[bad]:.3g}, not 0")
    known = _known_positions(true_seq)
    if not known.any():
        raise EmptySampleSet("no known native residues")
    idx = np.array([AMINO_ACIDS.index(c) if c != UNKNOWN else 0 for c in true_seq])
    nll = -lp[np.arange(len(true_seq)), idx][known]
    return float(np.exp(nll.mean()))


def bias_report(corpus_a: list[BackboneStructure], corpus_b: list[BackboneStructure], out_dir) -> dict[str, Path]:
    """Write feature comparisons, Ramachandran grids and paired RMSD for two corpora.

    Returns the written paths keyed by file name; see ``REPORT_FILES``.
    """
    out = ensure_dir(out_dir)
    report = corpus_compare([extract_features(s) for s in corpus_a], [extract_features(s) for s in corpus_b])
    paths = {name: out / name for name in REPORT_FILES}
    report.write_csv(paths["features.csv"])
    report.write_json(paths["features.json"])
    report.write_histograms(paths["histograms.csv"])
    write_grid(report.rama_a, paths["ramachandran_a.csv"])
    write_grid(report.rama_b, paths["ramachandran_b.csv"])
    write_grid(report.rama_b - report.rama_a, paths["ramachandran_overlay.csv"])

    by_id = {s.id: s for s in corpus_b}
    ids, values = [], []
    for s in sorted(corpus_a, key=lambda s: s.id):
        other = by_id.get(s.id)
        if other is not None and len(other) == len(s) and len(s) >= 3:
            ids.append(s.id)
            values.append(structure_rmsd(s, other))
    RmsdReport(ids, np.asarray(values)).write_csv(paths["paired_rmsd.csv"])

    paths["MANIFEST.json"].write_text(json.dumps(REPORT_FILES, indent=2, sort_keys=True) + "\n")
    logger.info("bias report written to %s (%d paired structures)", out, len(ids))
    return paths
