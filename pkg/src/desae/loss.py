"""Structure-consistency loss: five aligned-RMSD and distance terms averaged over decoder layers.

The Kabsch rotation inside every aligned RMSD is computed from the current
values and then held constant during backpropagation.  Because the rotation
minimises the deviation, its derivative does not contribute to the gradient
of the minimum, so this is exact rather than an approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone_io import BackboneStructure
from .errors import ShapeMismatch, TooFewPoints
from .geometry import CA, kabsch_rotation, knn_indices

FRAGMENT_SIZE = 7
PAIR_NEIGHBORS = 30
TERMS = ("global_", "fragment", "pair", "neighbor", "distance")


def aligned_rmsd(pred, target, weights=None) -> Tensor:
    """Per-problem RMSD after superposing ``pred`` onto ``target``.

    pred: (..., P, 3) tensor; target: (..., P, 3) array; weights: optional
    (..., P) array of 0/1 atom weights.  Returns a tensor of shape (...).
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"aligned_rmsd: {pred.shape} vs {target.shape}")
    w = np.ones(target.shape[:-1]) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum(axis=-1)
    if np.any(np.sum(w > 0, axis=-1) < 3):
        raise TooFewPoints("aligned RMSD needs at least 3 weighted points")
    rot, _, ct = kabsch_rotation(pred.data, target, w)
    wt = Tensor(w[..., None])
    cm = ad.sum(pred * wt, axis=-2, keepdims=True) / wsum[..., None, None]
    aligned = ad.matmul(pred - cm, np.swapaxes(rot, -1, -2)) + ct[..., None, :]
    sq = ad.sum(ad.square(aligned - target) * wt, axis=(-2, -1))
    return ad.sqrt(sq / wsum)


@dataclass
class LossTargets:
    """Ground truth plus the neighbour index sets, all derived from target geometry."""

    coords: np.ndarray        # (n, 4, 3)
    weights: np.ndarray       # (n, 4)
    fragments: np.ndarray     # (n, c) residues closest to i, self included
    neighbors: np.ndarray     # (n, K) nearest residues, self excluded
    ca_dist: np.ndarray       # (n, n)

    @property
    def n(self) -> int:
        return len(self.coords)


def prepare_targets(target, c: int = FRAGMENT_SIZE, k: int = PAIR_NEIGHBORS, weights=None) -> LossTargets:
    if isinstance(target, BackboneStructure):
        weights = target.atom_mask if weights is None else weights
        target = target.coords
    coords = np.asarray(target, dtype=np.float64)
    w = np.ones(coords.shape[:2]) if weights is None else np.asarray(weights, dtype=np.float64)
    coords = np.where(w[..., None] > 0, coords, 0.0)
    ca = coords[:, CA]
    dist = np.sqrt(np.sum((ca[:, None] - ca[None]) ** 2, axis=-1))
    return LossTargets(coords, w, knn_indices(ca, c, include_self=True), knn_indices(ca, k), dist)


def _as_targets(target) -> LossTargets:
    return target if isinstance(target, LossTargets) else prepare_targets(target)


def loss_global(pred, target) -> Tensor:
    t = _as_targets(target)
    pred = ad.as_tensor(pred)
    return aligned_rmsd(pred.reshape(t.n * 4, 3), t.coords.reshape(-1, 3), t.weights.reshape(-1))


def _residue_sets(pred: Tensor, t: LossTargets, residues: np.ndarray) -> Tensor:
    """Mean aligned RMSD over groups of residues; ``residues`` is (..., r)."""
    r = residues.shape[-1]
    groups = int(np.prod(residues.shape[:-1]))
    p = ad.gather(pred, residues, axis=0).reshape(groups, 4 * r, 3)
    x = t.coords[residues].reshape(groups, 4 * r, 3)
    w = t.weights[residues].reshape(groups, 4 * r)
    return ad.mean(aligned_rmsd(p, x, w))


def loss_fragment(pred, target) -> Tensor:
    t = _as_targets(target)
    return _residue_sets(ad.as_tensor(pred), t, t.fragments)


def loss_pair(pred, target) -> Tensor:
    t = _as_targets(target)
    if t.neighbors.shape[1] == 0:
        return Tensor(0.0)
    n, k = t.neighbors.shape
    own = np.broadcast_to(t.fragments[:, None, :], (n, k, t.fragments.shape[1]))
    other = t.fragments[t.neighbors]
    return _residue_sets(ad.as_tensor(pred), t, np.concatenate([own, other], axis=-1))


def loss_neighbor(pred, target) -> Tensor:
    t = _as_targets(target)
    if t.neighbors.shape[1] == 0:
        return Tensor(0.0)
    return _residue_sets(ad.as_tensor(pred), t, t.neighbors)


def loss_distance(pred, target) -> Tensor:
    """Mean squared error of off-diagonal CA-CA distances."""
    t = _as_targets(target)
    if t.n < 2:
        return Tensor(0.0)
    ca = ad.as_tensor(pred)[:, CA, :]
    diff = ca.reshape(t.n, 1, 3) - ca.reshape(1, t.n, 3)
    dist = ad.sqrt(ad.sum(ad.square(diff), axis=-1))
    off = ~np.eye(t.n, dtype=bool)
    err = ad.square(dist - t.ca_dist) * off.astype(np.float64)
    return ad.sum(err) / float(off.sum())


_TERM_FUNCS = {
    "global_": loss_global,
    "fragment": loss_fragment,
    "pair": loss_pair,
    "neighbor": loss_neighbor,
    "distance": loss_distance,
}


@dataclass
class LossBreakdown:
    global_: float
    fragment: float
    pair: float
    neighbor: float
    distance: float
    total: float
    tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {"global": self.global_, "fragment": self.fragment, "pair": self.pair,
                "neighbor": self.neighbor, "distance": self.distance, "total": self.total}


def composite_loss(per_layer_preds, target) -> LossBreakdown:
    """Each term averaged over the decoder layers; total is their plain sum."""
    t = _as_targets(target)
    preds = [ad.as_tensor(p) for p in per_layer_preds]
    if not preds:
        raise ShapeMismatch("composite_loss needs at least one layer output")
    terms = {}
    for name, fn in _TERM_FUNCS.items():
        terms[name] = ad.sum(ad.stack([fn(p, t) for p in preds])) / float(len(preds))
    total = terms["global_"] + terms["fragment"] + terms["pair"] + terms["neighbor"] + terms["distance"]
    values = {k: float(v.data) for k, v in terms.items()}
    return LossBreakdown(total=float(total.data), tensor=total, **values)
