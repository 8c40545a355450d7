"""Deterministic backbone geometry.

Residue frames, backbone dihedrals/bond angles/bond lengths, the Calpha kNN
graph, Kabsch superposition and the centroid corruption operator.  All angles
are radians in (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone_io import BackboneStructure
from .errors import DegenerateGeometry, NoEligibleResidues, TooFewPoints

N, CA, C, O = 0, 1, 2, 3

DEGENERATE_ANGLE = 1e-3
PEPTIDE_BREAK = 2.0  # C(i)-N(i+1) distance above which the chain is considered broken

ANGLE_FEATURES = ("phi", "psi", "omega", "alpha", "beta", "gamma")
BOND_FEATURES = ("ca_n", "c_ca", "o_c", "n_c")


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


# ---------------------------------------------------------------- frames


@dataclass
class ResidueFrame:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "ResidueFrame":
        rt = self.rotation.T
        return ResidueFrame(rt, -rt @ self.translation)

    def compose(self, other: "ResidueFrame") -> "ResidueFrame":
        return ResidueFrame(self.rotation @ other.rotation,
                            self.rotation @ other.translation + self.translation)


@dataclass
class Frames:
    """Stacked residue frames: rotations (L, 3, 3), translations (L, 3)."""

    rotations: np.ndarray
    translations: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.translations)

    def __getitem__(self, i: int) -> ResidueFrame:
        return ResidueFrame(self.rotations[i], self.translations[i])


def frames_from_points(n_xyz, ca_xyz, c_xyz):
    """Gram-Schmidt frames from N, CA, C positions (each (..., 3)).

    Columns are e1 = unit(C - CA), e2 = unit component of (N - CA) orthogonal
    to e1, e3 = e1 x e2.  Near-collinear inputs get the identity rotation.
    """
    n_xyz, ca_xyz, c_xyz = (np.asarray(a, dtype=np.float64) for a in (n_xyz, ca_xyz, c_xyz))
    u = c_xyz - ca_xyz
    v = n_xyz - ca_xyz
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    safe_u = np.where(nu > 0, nu, 1.0)[..., None]
    safe_v = np.where(nv > 0, nv, 1.0)[..., None]
    cos = np.clip(np.sum(u * v, axis=-1) / (safe_u[..., 0] * safe_v[..., 0]), -1.0, 1.0)
    angle = np.arccos(cos)
    degenerate = (nu < 1e-8) | (nv < 1e-8) | (angle < DEGENERATE_ANGLE) | (angle > np.pi - DEGENERATE_ANGLE)

    e1 = u / safe_u
    w = v - np.sum(v * e1, axis=-1, keepdims=True) * e1
    nw = np.linalg.norm(w, axis=-1, keepdims=True)
    e2 = w / np.where(nw > 0, nw, 1.0)
    e3 = np.cross(e1, e2)
    rot = np.stack([e1, e2, e3], axis=-1)
    rot = np.where(degenerate[..., None, None], np.eye(3), rot)
    return rot, degenerate


def build_frames(s: BackboneStructure) -> Frames:
    """One frame per residue, anchored at CA.

    Residues missing N or C (or with collinear N, CA, C) are flagged
    degenerate and receive the identity rotation.
    """
    x = s.coords
    rot, degenerate = frames_from_points(x[:, N], x[:, CA], x[:, C])
    missing = ~(s.atom_mask[:, N] & s.atom_mask[:, CA] & s.atom_mask[:, C])
    rot = np.where(missing[:, None, None], np.eye(3), rot)
    return Frames(rot, x[:, CA].copy(), degenerate | missing)


# ---------------------------------------------------------------- angles


def dihedrals(p1, p2, p3, p4) -> np.ndarray:
    """Vectorised signed dihedral; degenerate inputs give NaN."""
    p1, p2, p3, p4 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3, p4))
    b1 = p2 - p1
    b2 = p3 - p2
    b3 = p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2, axis=-1, keepdims=True)
    b2hat = b2 / np.where(nb2 > 0, nb2, 1.0)
    y = np.sum(np.cross(n1, n2) * b2hat, axis=-1)
    x = np.sum(n1 * n2, axis=-1)
    out = wrap_angle(np.arctan2(y, x))
    bad = ((np.linalg.norm(b1, axis=-1) < 1e-8) | (nb2[..., 0] < 1e-8)
           | (np.linalg.norm(b3, axis=-1) < 1e-8)
           | (np.linalg.norm(n1, axis=-1) < 1e-8) | (np.linalg.norm(n2, axis=-1) < 1e-8))
    return np.where(bad, np.nan, out)


def dihedral(p1, p2, p3, p4) -> float:
    """Signed dihedral angle of four points, in (-pi, pi]."""
    value = float(dihedrals(p1, p2, p3, p4))
    if math.isnan(value):
        raise DegenerateGeometry("coincident points or collinear triple in dihedral")
    return value


def bond_angles(p1, p2, p3) -> np.ndarray:
    """Angle at p2 between p1 and p3, in [0, pi]; NaN if a bond has zero length."""
    u = np.asarray(p1, dtype=np.float64) - p2
    v = np.asarray(p3, dtype=np.float64) - p2
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    denom = nu * nv
    cos = np.sum(u * v, axis=-1) / np.where(denom > 0, denom, 1.0)
    out = np.arccos(np.clip(cos, -1.0, 1.0))
    return np.where(denom > 1e-16, out, np.nan)


@dataclass
class FeatureTable:
    """Per-residue backbone internal coordinates.

    ``angles`` maps phi/psi/omega/alpha/beta/gamma to (L,) arrays and
    ``bonds`` maps ca_n/c_ca/o_c/n_c to (L,) arrays; each has a boolean mask
    of the same name in ``angle_masks`` / ``bond_masks``.  Invalid entries
    hold 0.
    """

    structure_id: str
    angles: dict[str, np.ndarray]
    angle_masks: dict[str, np.ndarray]
    bonds: dict[str, np.ndarray]
    bond_masks: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.angles["phi"])

    def values(self, name: str) -> np.ndarray:
        """Valid values of one feature."""
        if name in self.angles:
            return self.angles[name][self.angle_masks[name]]
        return self.bonds[name][self.bond_masks[name]]

    def mask(self, name: str) -> np.ndarray:
        return self.angle_masks[name] if name in self.angle_masks else self.bond_masks[name]

    def __getattr__(self, name):
        # phi, psi, ... as attributes
        if name in ANGLE_FEATURES:
            return self.__dict__["angles"][name]
        if name in BOND_FEATURES:
            return self.__dict__["bonds"][name]
        raise AttributeError(name)


def extract_features(s: BackboneStructure, break_cutoff: float | None = PEPTIDE_BREAK) -> FeatureTable:
    """Dihedrals, bond angles and bond lengths of every residue.

    phi_i = C(i-1)-N-CA-C, psi_i = N-CA-C-N(i+1), omega_i = CA-C-N(i+1)-CA(i+1);
    alpha = N-CA-C, beta = C(i-1)-N-CA, gamma = CA-C-N(i+1).  Bond lengths
    are CA-N, C-CA, O-C and the peptide bond N(i+1)-C.  Inter-residue
    features are invalid at the chain ends and, when ``break_cutoff`` is set,
    across gaps whose C(i)-N(i+1) distance exceeds it.
    """
    x = s.coords
    m = s.atom_mask
    L = len(s)
    nan = np.full(L, np.nan)

    def shifted(arr, k):
        out = np.full_like(arr, np.nan, dtype=np.float64)
        if k > 0:
            out[:-k] = arr[k:]
        else:
            out[-k:] = arr[:k]
        return out

    def shifted_mask(mask, k):
        out = np.zeros_like(mask)
        if k > 0:
            out[:-k] = mask[k:]
        else:
            out[-k:] = mask[:k]
        return out

    n_, ca, c, o = x[:, N], x[:, CA], x[:, C], x[:, O]
    c_prev = shifted(c, -1)
    n_next = shifted(n_, 1)
    ca_next = shifted(ca, 1)
    mN, mCA, mC, mO = m[:, N], m[:, CA], m[:, C], m[:, O]
    mC_prev = shifted_mask(mC, -1)
    mN_next = shifted_mask(mN, 1)
    mCA_next = shifted_mask(mCA, 1)

    peptide = np.linalg.norm(n_next - c, axis=-1)
    linked_next = mC & mN_next
    if break_cutoff is not None:
        linked_next &= np.nan_to_num(peptide, nan=np.inf) <= break_cutoff
    linked_prev = np.zeros(L, dtype=bool)
    linked_prev[1:] = linked_next[:-1]

    with np.errstate(invalid="ignore"):
        raw = {
            "phi": dihedrals(c_prev, n_, ca, c),
            "psi": dihedrals(n_, ca, c, n_next),
            "omega": dihedrals(ca, c, n_next, ca_next),
            "alpha": bond_angles(n_, ca, c),
            "beta": bond_angles(c_prev, n_, ca),
            "gamma": bond_angles(ca, c, n_next),
        }
    masks = {
        "phi": linked_prev & mN & mCA & mC,
        "psi": linked_next & mN & mCA,
        "omega": linked_next & mCA & mCA_next,
        "alpha": mN & mCA & mC,
        "beta": linked_prev & mN & mCA,
        "gamma": linked_next & mCA,
    }
    bonds_raw = {
        "ca_n": np.linalg.norm(ca - n_, axis=-1),
        "c_ca": np.linalg.norm(c - ca, axis=-1),
        "o_c": np.linalg.norm(o - c, axis=-1),
        "n_c": np.where(linked_next, peptide, nan),
    }
    bond_masks = {
        "ca_n": mCA & mN,
        "c_ca": mC & mCA,
        "o_c": mO & mC,
        "n_c": linked_next.copy(),
    }
    angles, angle_masks = {}, {}
    for name in ANGLE_FEATURES:
        valid = masks[name] & np.isfinite(raw[name])
        angles[name] = np.where(valid, raw[name], 0.0)
        angle_masks[name] = valid
    bonds, bmasks = {}, {}
    for name in BOND_FEATURES:
        valid = bond_masks[name] & np.isfinite(bonds_raw[name])
        bonds[name] = np.where(valid, bonds_raw[name], 0.0)
        bmasks[name] = valid
    return FeatureTable(s.id, angles, angle_masks, bonds, bmasks)


# ---------------------------------------------------------------- graph


def knn_indices(points: np.ndarray, k: int, include_self: bool = False) -> np.ndarray:
    """Indices of the k nearest points per row, ascending distance, ties by index.

    k is clamped to the number of available candidates.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    if not include_self:
        d2[np.arange(n), np.arange(n)] = np.inf
    available = n if include_self else n - 1
    k = max(0, min(int(k), available))
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


@dataclass
class GraphTopology:
    neighbors: np.ndarray  # (L, k) int

    def __len__(self) -> int:
        return len(self.neighbors)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def knn_graph(s: BackboneStructure | np.ndarray, k: int) -> GraphTopology:
    """k nearest neighbours on CA (self excluded); k clamps to L - 1."""
    if k < 1:
        raise ValueError("k must be positive")
    ca = s.ca if isinstance(s, BackboneStructure) else np.asarray(s)
    return GraphTopology(knn_indices(ca, k))


# ---------------------------------------------------------------- superposition


def kabsch_rotation(moving: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None):
    """Optimal proper rotations for batched point sets.

    ``moving`` and ``target`` have shape (..., P, 3).  Returns rotations
    (..., 3, 3) and the weighted centroids of both sets, such that
    ``(moving - cm) @ R.T + ct`` is the best superposition onto ``target``.
    """
    moving = np.asarray(moving, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if weights is None:
        weights = np.ones(moving.shape[:-1])
    w = np.asarray(weights, dtype=np.float64)
    wsum = np.sum(w, axis=-1, keepdims=True)
    cm = np.sum(w[..., None] * moving, axis=-2) / wsum
    ct = np.sum(w[..., None] * target, axis=-2) / wsum
    pm = moving - cm[..., None, :]
    pt = target - ct[..., None, :]
    h = np.einsum("...pi,...pj->...ij", w[..., None] * pm, pt)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.swapaxes(vt, -1, -2) @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    diag = np.ones(h.shape[:-2] + (3,))
    diag[..., 2] = d
    rot = np.swapaxes(vt, -1, -2) @ (diag[..., :, None] * np.swapaxes(u, -1, -2))
    return rot, cm, ct


def kabsch_align(moving, target, mask=None):
    """Superpose ``moving`` (n, 3) onto ``target`` (n, 3).

    Returns ``(rotation, translation, rmsd)`` where ``moving @ rotation.T +
    translation`` is the aligned set and rmsd is measured over unmasked points.
    """
    moving = np.asarray(moving, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if moving.shape != target.shape:
        raise ValueError(f"shape mismatch {moving.shape} vs {target.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        moving, target = moving[mask], target[mask]
    if len(moving) < 3:
        raise TooFewPoints(f"kabsch needs at least 3 points, got {len(moving)}")
    rot, cm, ct = kabsch_rotation(moving, target)
    trans = ct - rot @ cm
    aligned = moving @ rot.T + trans
    rmsd = float(np.sqrt(np.mean(np.sum((aligned - target) ** 2, axis=-1))))
    return rot, trans, rmsd


def rmsd_after_alignment(moving, target, mask=None) -> float:
    return kabsch_align(moving, target, mask)[2]


# ---------------------------------------------------------------- corruption


def corruption_count(fraction: float, n_eligible: int) -> int:
    """ceil(fraction * n) with a guard against float round-up (0.1 * 30)."""
    x = fraction * n_eligible
    return min(n_eligible, int(math.ceil(x - 1e-9 * max(1.0, x))))


def corrupt_structure(s: BackboneStructure, fraction: float, seed):
    """Replace one atom in a random subset of residues by the centroid of the other three.

    ``ceil(fraction * L_eligible)`` residues with all four atoms observed are
    drawn without replacement; in each, one of N, CA, C, O is chosen
    uniformly.  Returns the corrupted copy and the sorted (residue, atom)
    sites.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    eligible = np.flatnonzero(np.all(s.atom_mask, axis=1))
    if len(eligible) == 0:
        raise NoEligibleResidues(f"{s.id}: no residue has all four backbone atoms")
    rng = np.random.default_rng(seed)
    count = corruption_count(fraction, len(eligible))
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    atoms = rng.integers(0, 4, size=count)
    coords = s.coords.copy()
    sites = []
    for i, a in zip(chosen.tolist(), atoms.tolist()):
        others = [b for b in range(4) if b != a]
        coords[i, a] = (s.coords[i, others[0]] + s.coords[i, others[1]] + s.coords[i, others[2]]) / 3.0
        sites.append((i, a))
    return s.with_coords(coords), sites


# ---------------------------------------------------------------- rigid motions & builders


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalised Gaussian quaternion."""
    from .model import quat_to_rot_np

    return quat_to_rot_np(rng.normal(size=4))


def apply_rigid(coords: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    return np.asarray(coords) @ np.asarray(rotation).T + np.asarray(translation)


IDEAL = {
    "n_ca": 1.458,
    "ca_c": 1.525,
    "c_n": 1.329,
    "c_o": 1.231,
    "n_ca_c": math.radians(111.2),
    "ca_c_n": math.radians(116.2),
    "c_n_ca": math.radians(121.7),
    "ca_c_o": math.radians(120.5),
}


def _place(a, b, c, bond, angle, torsion):
    """NeRF: position of d given a, b, c, |cd|, angle bcd and torsion abcd."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * math.cos(angle),
                   bond * math.sin(angle) * math.cos(torsion),
                   bond * math.sin(angle) * math.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def build_backbone(phi, psi, omega, sequence: str | None = None, structure_id: str = "built",
                   bond_lengths: np.ndarray | None = None, bond_angles_: np.ndarray | None = None
                   ) -> BackboneStructure:
    """Cartesian backbone from internal coordinates.

    ``phi[0]`` is unused; ``psi[i]`` and ``omega[i]`` place residue i+1.
    Optional per-residue arrays override the ideal geometry:
    ``bond_lengths`` (L, 4) as (N-CA, CA-C, C-N(next), C-O) and
    ``bond_angles_`` (L, 3) as (N-CA-C, CA-C-N(next), C(prev)-N-CA).
    """
    phi, psi, omega = (np.asarray(a, dtype=np.float64) for a in (phi, psi, omega))
    L = len(phi)
    if bond_lengths is None:
        bond_lengths = np.tile([IDEAL["n_ca"], IDEAL["ca_c"], IDEAL["c_n"], IDEAL["c_o"]], (L, 1))
    if bond_angles_ is None:
        bond_angles_ = np.tile([IDEAL["n_ca_c"], IDEAL["ca_c_n"], IDEAL["c_n_ca"]], (L, 1))
    x = np.zeros((L, 4, 3))
    x[0, N] = [0.0, 0.0, 0.0]
    x[0, CA] = [bond_lengths[0, 0], 0.0, 0.0]
    ang = bond_angles_[0, 0]
    x[0, C] = x[0, CA] + bond_lengths[0, 1] * np.array([-math.cos(ang), math.sin(ang), 0.0])
    for i in range(1, L):
        x[i, N] = _place(x[i - 1, N], x[i - 1, CA], x[i - 1, C], bond_lengths[i - 1, 2], bond_angles_[i - 1, 1], psi[i - 1])
        x[i, CA] = _place(x[i - 1, CA], x[i - 1, C], x[i, N], bond_lengths[i, 0], bond_angles_[i, 2], omega[i - 1])
        x[i, C] = _place(x[i - 1, C], x[i, N], x[i, CA], bond_lengths[i, 1], bond_angles_[i, 0], phi[i])
    for i in range(L):
        # O lies in the peptide plane, trans to N(i+1) about CA-C
        x[i, O] = _place(x[i, N], x[i, CA], x[i, C], bond_lengths[i, 3], IDEAL["ca_c_o"], psi[i] + math.pi)
    seq = sequence if sequence is not None else "G" * L
    return BackboneStructure(structure_id, seq, x, np.ones((L, 4), dtype=bool))


def random_backbone(rng: np.random.Generator, length: int, structure_id: str = "random",
                    noise: float = 0.0) -> BackboneStructure:
    """Protein-like backbone with helix/strand/loop segments.

    ``noise`` scales Gaussian perturbations of bond lengths (x0.02 A) and
    angles (x0.03 rad) to mimic experimental spread.
    """
    phi = np.empty(length)
    psi = np.empty(length)
    i = 0
    while i < length:
        kind = rng.choice(3, p=[0.45, 0.35, 0.2])
        run = int(rng.integers(4, 12))
        centre = [(-1.10, -0.82), (-2.09, 2.27), (-1.4, 0.3)][kind]
        spread = [0.12, 0.2, 0.6][kind]
        for _ in range(run):
            if i >= length:
                break
            phi[i] = centre[0] + spread * rng.normal()
            psi[i] = centre[1] + spread * rng.normal()
            i += 1
    omega = np.pi + 0.05 * rng.normal(size=length)
    bl = np.tile([IDEAL["n_ca"], IDEAL["ca_c"], IDEAL["c_n"], IDEAL["c_o"]], (length, 1))
    ba = np.tile([IDEAL["n_ca_c"], IDEAL["ca_c_n"], IDEAL["c_n_ca"]], (length, 1))
    if noise:
        bl = bl + noise * 0.02 * rng.normal(size=bl.shape)
        ba = ba + noise * 0.03 * rng.normal(size=ba.shape)
    aa = "ACDEFGHIKLMNPQRSTVWY"
    seq = "".join(aa[j] for j in rng.integers(0, 20, size=length))
    s = build_backbone(wrap_angle(phi), wrap_angle(psi), wrap_angle(omega), seq, structure_id, bl, ba)
    # place the chain at a random pose so nothing depends on the builder's frame
    rot = random_rotation(rng)
    s.coords = apply_rigid(s.coords, rot, rng.normal(scale=10.0, size=3))
    return s
