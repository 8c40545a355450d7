"""The debiasing structure autoencoder.

An SE(3)-invariant encoder of frame-aggregation layers followed by a decoder
that alternates frame aggregation with frame updating and reads out backbone
coordinates after every decoder layer.

Units: coordinates are in Angstrom; relative translations and distances are
divided by ``LENGTH_SCALE`` before they enter a network so that the MLP
inputs stay O(1).
"""

from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone_io import BackboneStructure
from .errors import CheckpointError, ConfigError, IoFailure
from .geometry import ANGLE_FEATURES, BOND_FEATURES, build_frames, extract_features, knn_indices

logger = logging.getLogger(__name__)

LENGTH_SCALE = 10.0
MAX_FEATURE_BOND = 4.0
NODE_FEATURES = 2 * len(ANGLE_FEATURES) + len(BOND_FEATURES)


@dataclass(frozen=True)
class DesaeConfig:
    encoder_layers: int = 8
    decoder_layers: int = 6
    hidden_dim: int = 128
    virtual_points: int = 8
    neighbors: int = 30
    ffn_dim: int = 640
    offset_bound: float = 3.0
    atom_offsets_head: bool = True

    def __post_init__(self):
        for f in ("encoder_layers", "decoder_layers", "hidden_dim", "virtual_points", "neighbors", "ffn_dim"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4")
        if self.offset_bound <= 0:
            raise ConfigError("offset_bound must be positive")
        if not self.atom_offsets_head:
            raise ConfigError("atom_offsets_head is fixed to true")

    @property
    def edge_inputs(self) -> int:
        m = self.virtual_points
        return 6 * m + m * m + 9 + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DesaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


class ModelParams:
    """Ordered collection of named parameter tensors."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors.values()]

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, Tensor(v.data.copy(), requires_grad=True))
                                       for k, v in self.tensors.items()))


def _init_specs(cfg: DesaeConfig):
    """(name, shape, init) in declaration order."""
    D, F, m, E = cfg.hidden_dim, cfg.ffn_dim, cfg.virtual_points, cfg.edge_inputs
    specs = []

    def linear(name, fan_in, fan_out, init="he"):
        specs.append((f"{name}.w", (fan_in, fan_out), init))
        specs.append((f"{name}.b", (fan_out,), "zeros"))

    def norm(name):
        specs.append((f"{name}.g", (D,), "ones"))
        specs.append((f"{name}.b", (D,), "zeros"))

    def aggregation(prefix):
        linear(f"{prefix}.z", D, 3 * m, "xavier")
        linear(f"{prefix}.edge1", E, F)
        linear(f"{prefix}.edge2", F, D, "small")
        norm(f"{prefix}.edge_ln")
        linear(f"{prefix}.score1", 2 * D, D)
        linear(f"{prefix}.score2", D, 1, "small")
        linear(f"{prefix}.node1", D, F)
        linear(f"{prefix}.node2", F, D, "small")
        norm(f"{prefix}.node_ln")

    linear("embed", NODE_FEATURES, D, "xavier")
    linear("edge_init1", E, F)
    linear("edge_init2", F, D, "xavier")
    for layer in range(cfg.encoder_layers):
        aggregation(f"enc{layer}")
    for layer in range(cfg.decoder_layers):
        aggregation(f"dec{layer}.agg")
        linear(f"dec{layer}.score_r1", 2 * D, D)
        linear(f"dec{layer}.score_r2", D, 1, "small")
        linear(f"dec{layer}.score_t1", 2 * D, D)
        linear(f"dec{layer}.score_t2", D, 1, "small")
        specs.append((f"dec{layer}.w_r", (4, 9), "tiny"))
        linear(f"dec{layer}.trans", D, 3, "tiny")
    linear("offset", D, 12, "small")
    return specs


def init_params(cfg: DesaeConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape, init in _init_specs(cfg):
        fan_in = shape[0]
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "he":
            data = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)
        elif init == "xavier":
            data = rng.normal(scale=np.sqrt(1.0 / fan_in), size=shape)
        elif init == "small":
            data = rng.normal(scale=0.1 * np.sqrt(1.0 / fan_in), size=shape)
        elif init == "tiny":
            data = rng.normal(scale=1e-3, size=shape)
        else:  # pragma: no cover
            raise ValueError(init)
        tensors[name] = Tensor(data, requires_grad=True)
    tensors["offset.b"].data = _ideal_offset_bias(cfg.offset_bound)
    return ModelParams(tensors)


# ideal N, CA, C, O positions in the residue frame (e1 along C-CA, N in the e1-e2 plane)
IDEAL_LOCAL_ATOMS = np.array([
    [-0.5225, 1.3612, 0.0],
    [0.0, 0.0, 0.0],
    [1.5250, 0.0, 0.0],
    [2.1492, -1.0598, 0.0],
])


def _ideal_offset_bias(bound: float) -> np.ndarray:
    """Pre-activation bias whose squashed value is ``IDEAL_LOCAL_ATOMS``."""
    r = np.linalg.norm(IDEAL_LOCAL_ATOMS, axis=-1, keepdims=True)
    scale = np.where(r > 0, np.arctanh(np.minimum(r / bound, 0.99)) / np.where(r > 0, r, 1.0), 0.0)
    return (IDEAL_LOCAL_ATOMS * scale).reshape(12)


def parameter_count(cfg: DesaeConfig) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in _init_specs(cfg)))


# ---------------------------------------------------------------- building blocks


def _linear(x, p: ModelParams, name: str) -> Tensor:
    return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def _mlp(x, p: ModelParams, first: str, second: str) -> Tensor:
    return _linear(ad.relu(_linear(x, p, first)), p, second)


def _norm(x, p: ModelParams, name: str) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _edge_scores(h: Tensor, e: Tensor, p: ModelParams, first: str, second: str) -> Tensor:
    """Softmax over neighbours of a scalar score from (h_i, h_ij); shape (L, K, 1).

    The first layer acts on the concatenation [h_i, h_ij]; its weight is
    applied blockwise so h_i need not be tiled across neighbours.
    """
    L, K, D = e.shape
    w = p[f"{first}.w"]
    hi = ad.matmul(h, w[:D]).reshape(L, 1, -1)
    hij = ad.matmul(e, w[D:])
    hidden = ad.relu(hi + hij + p[f"{first}.b"])
    return ad.softmax(_linear(hidden, p, second), axis=1)


def quat_to_rot_np(q) -> np.ndarray:
    """Rotation matrix of a quaternion (w, x, y, z), normalised first.

    Works on (..., 4) arrays; quaternions with norm below 1e-8 map to the
    identity.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    small = n < 1e-8
    q = np.where(small, np.array([1.0, 0.0, 0.0, 0.0]), q / np.where(small, 1.0, n))
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = w * w + x * x - y * y - z * z
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = w * w - x * x + y * y - z * z
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = w * w - x * x - y * y + z * z
    return r


def quat_to_rot(q) -> Tensor:
    """Differentiable counterpart of :func:`quat_to_rot_np` for (N, 4) tensors."""
    q = ad.as_tensor(q)
    n = ad.norm(q, axis=-1, keepdims=True)
    small = n.data < 1e-8
    unit = ad.where(small, np.array([1.0, 0.0, 0.0, 0.0]), q / ad.where(small, 1.0, n))
    w, x, y, z = unit[..., 0], unit[..., 1], unit[..., 2], unit[..., 3]
    ww, xx, yy, zz = w * w, x * x, y * y, z * z
    entries = [
        ww + xx - yy - zz, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), ww - xx + yy - zz, 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), ww - xx - yy + zz,
    ]
    return ad.stack(entries, axis=-1).reshape(q.shape[:-1] + (3, 3))


# ---------------------------------------------------------------- state


@dataclass
class NodeState:
    h: Tensor             # (L, D)
    e: Tensor             # (L, K, D)
    rotations: Tensor     # (L, 3, 3)
    translations: Tensor  # (L, 3)
    neighbors: np.ndarray  # (L, K) int

    @property
    def num_neighbors(self) -> int:
        return self.neighbors.shape[1]


def node_features(s: BackboneStructure) -> np.ndarray:
    """(L, 16) invariant residue features: sin/cos of six angles and four bond lengths.

    Chain-break detection is off so that corrupted bonds stay visible to the
    network; bond lengths are clipped at ``MAX_FEATURE_BOND``.
    """
    ft = extract_features(s, break_cutoff=None)
    cols = []
    for name in ANGLE_FEATURES:
        mask = ft.angle_masks[name]
        cols.append(np.where(mask, np.sin(ft.angles[name]), 0.0))
        cols.append(np.where(mask, np.cos(ft.angles[name]), 0.0))
    for name in BOND_FEATURES:
        cols.append(np.where(ft.bond_masks[name], np.minimum(ft.bonds[name], MAX_FEATURE_BOND), 0.0))
    return np.stack(cols, axis=-1)


def _relative_geometry(rotations: Tensor, translations: Tensor, neighbors: np.ndarray):
    """R_ij = R_i^T R_j, t_ij = R_i^T (t_j - t_i) and the raw offsets t_j - t_i."""
    L, K = neighbors.shape
    rt = ad.transpose(rotations).reshape(L, 1, 3, 3)
    r_j = ad.gather(rotations, neighbors, axis=0)
    r_ij = ad.matmul(rt, r_j)
    d = ad.gather(translations, neighbors, axis=0) - translations.reshape(L, 1, 3)
    t_ij = ad.matmul(rt, d.reshape(L, K, 3, 1)).reshape(L, K, 3)
    return r_ij, t_ij, d, r_j


def init_node_state(s: BackboneStructure, cfg: DesaeConfig, params: ModelParams) -> NodeState:
    """Embed a structure: invariant node features, zero-latent edge features, CA frames."""
    s.validate()
    frames = build_frames(s)
    neighbors = knn_indices(s.ca, cfg.neighbors)
    L, K = neighbors.shape
    m = cfg.virtual_points
    h = ad.layer_norm(_linear(Tensor(node_features(s)), params, "embed"))
    rotations = Tensor(frames.rotations)
    translations = Tensor(frames.translations)
    if K == 0:
        e = Tensor(np.zeros((L, 0, cfg.hidden_dim)))
        return NodeState(h, e, rotations, translations, neighbors)
    r_ij, t_ij, d, _ = _relative_geometry(rotations, translations, neighbors)
    t_scaled = t_ij.data / LENGTH_SCALE
    # T_ij applied to all-zero latent points is just t_ij
    p = np.concatenate([np.repeat(t_scaled[:, :, None, :], m, axis=2), np.zeros((L, K, m, 3))], axis=2)
    edge_in = np.concatenate([
        p.reshape(L, K, 6 * m),
        np.zeros((L, K, m * m)),
        r_ij.data.reshape(L, K, 9),
        np.linalg.norm(d.data, axis=-1, keepdims=True) / LENGTH_SCALE,
    ], axis=-1)
    e = ad.layer_norm(_mlp(Tensor(edge_in), params, "edge_init1", "edge_init2"))
    return NodeState(h, e, rotations, translations, neighbors)


# ---------------------------------------------------------------- layers


def frame_aggregation(state: NodeState, params: ModelParams, prefix: str, cfg: DesaeConfig) -> NodeState:
    """Invariant message passing: update edge then node embeddings; frames untouched."""
    h, e = state.h, state.e
    L, K = state.neighbors.shape
    m = cfg.virtual_points
    if K == 0:
        h_new = _norm(h + _mlp(h, params, f"{prefix}.node1", f"{prefix}.node2"), params, f"{prefix}.node_ln")
        return NodeState(h_new, e, state.rotations, state.translations, state.neighbors)

    z_i = _linear(h, params, f"{prefix}.z").reshape(L, m, 3)
    z_ij = _linear(e, params, f"{prefix}.z").reshape(L, K, m, 3)
    r_ij, t_ij, d, _ = _relative_geometry(state.rotations, state.translations, state.neighbors)
    r_ij_t = ad.transpose(r_ij)

    # edge latent points moved by the relative pose, next to the raw points
    moved = ad.matmul(z_ij, r_ij_t) + (t_ij / LENGTH_SCALE).reshape(L, K, 1, 3)
    p = ad.concat([moved, z_ij], axis=2).reshape(L, K, 6 * m)
    # node latent points of j rotated into i's frame, dotted with i's
    z_j = ad.matmul(ad.gather(z_i, state.neighbors, axis=0), r_ij_t)
    q = ad.matmul(z_i.reshape(L, 1, m, 3), ad.transpose(z_j)).reshape(L, K, m * m)
    dist = ad.norm(d, axis=-1, keepdims=True) / LENGTH_SCALE
    edge_in = ad.concat([p, q, r_ij.reshape(L, K, 9), dist], axis=-1)

    e_new = _norm(e + _mlp(edge_in, params, f"{prefix}.edge1", f"{prefix}.edge2"), params, f"{prefix}.edge_ln")
    a = _edge_scores(h, e_new, params, f"{prefix}.score1", f"{prefix}.score2")
    message = ad.sum(a * e_new, axis=1)
    h_new = _norm(h + _mlp(h + message, params, f"{prefix}.node1", f"{prefix}.node2"),
                  params, f"{prefix}.node_ln")
    return NodeState(h_new, e_new, state.rotations, state.translations, state.neighbors)


_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def frame_updating(state: NodeState, params: ModelParams, prefix: str, cfg: DesaeConfig) -> NodeState:
    """Refine frames from attention over neighbours.

    Rotation: the attention-averaged vec(R_ij) is projected by W_r to a
    quaternion offset from the identity and applied on the right,
    R_i <- R_i Quat2Rot(q_i).  Translation: each neighbour j proposes
    t_j + R_j (rho_ij + v_ij) with rho_ij = R_j^T (t_i - t_j) and a learned
    correction v_ij; the proposals are averaged with attention weights.
    """
    L, K = state.neighbors.shape
    if K == 0:
        return state
    h, e = state.h, state.e
    r_ij, _, _, r_j = _relative_geometry(state.rotations, state.translations, state.neighbors)

    a_r = _edge_scores(h, e, params, f"{prefix}.score_r1", f"{prefix}.score_r2")
    vec_r = ad.sum(a_r * r_ij.reshape(L, K, 9), axis=1)
    quat = ad.matmul(vec_r, ad.transpose(params[f"{prefix}.w_r"])) + _IDENTITY_QUAT
    rotations = ad.matmul(state.rotations, quat_to_rot(quat))

    a_t = _edge_scores(h, e, params, f"{prefix}.score_t1", f"{prefix}.score_t2")
    v = _linear(e, params, f"{prefix}.trans")
    # sum_j a_ij (t_j + R_j rho_ij + R_j v_ij) = t_i + sum_j a_ij R_j v_ij
    shift = ad.sum(a_t * ad.matmul(r_j, v.reshape(L, K, 3, 1)).reshape(L, K, 3), axis=1)
    translations = state.translations + shift
    return NodeState(h, e, rotations, translations, state.neighbors)


def decode_coordinates(state: NodeState, params: ModelParams, cfg: DesaeConfig) -> Tensor:
    """(L, 4, 3) coordinates: bounded local atom offsets placed by each residue frame."""
    L = state.h.shape[0]
    raw = _linear(state.h, params, "offset").reshape(L, 4, 3)
    # radial tanh squash: direction kept, length bounded by offset_bound
    r = ad.sqrt(ad.sum(ad.square(raw), axis=-1, keepdims=True) + 1e-12)
    offsets = raw * (cfg.offset_bound * ad.tanh(r) / r)
    return ad.matmul(offsets, ad.transpose(state.rotations)) + state.translations.reshape(L, 1, 3)


# ---------------------------------------------------------------- forward


def encode(s: BackboneStructure, cfg: DesaeConfig, params: ModelParams) -> NodeState:
    state = init_node_state(s, cfg, params)
    for layer in range(cfg.encoder_layers):
        state = frame_aggregation(state, params, f"enc{layer}", cfg)
    return state


@dataclass
class ForwardResult:
    coords_per_layer: list[Tensor]
    final: BackboneStructure
    state: NodeState


def forward(s: BackboneStructure, cfg: DesaeConfig, params: ModelParams) -> ForwardResult:
    """Encode, then decode with one coordinate read-out per decoder layer."""
    state = encode(s, cfg, params)
    outputs = []
    for layer in range(cfg.decoder_layers):
        state = frame_aggregation(state, params, f"dec{layer}.agg", cfg)
        state = frame_updating(state, params, f"dec{layer}", cfg)
        outputs.append(decode_coordinates(state, params, cfg))
    final = s.with_coords(outputs[-1].data.copy())
    return ForwardResult(outputs, final, state)


def reconstruct(s: BackboneStructure, cfg: DesaeConfig, params: ModelParams) -> BackboneStructure:
    """Final-layer reconstruction without recording gradients."""
    frozen = ModelParams(OrderedDict((k, Tensor(v.data)) for k, v in params.tensors.items()))
    return forward(s, cfg, frozen).final


# ---------------------------------------------------------------- checkpoints

MAGIC = b"DESAECK\x00"
VERSION = 1


@dataclass
class Checkpoint:
    config: DesaeConfig
    params: ModelParams
    optimizer: ad.AdamState | None = None
    extra: dict | None = None


def save_checkpoint(path, cfg: DesaeConfig, params: ModelParams,
                    optimizer: ad.AdamState | None = None, extra: dict | None = None) -> None:
    """Write the binary checkpoint.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header (config, parameter names and shapes, optimizer step, extra), then
    every parameter as little-endian float64 in declaration order, followed
    (when an optimizer state is stored) by all first moments and then all
    second moments in the same order.
    """
    header = {
        "config": cfg.to_dict(),
        "params": [[name, list(t.shape)] for name, t in params.tensors.items()],
        "optimizer": None if optimizer is None else {"step": optimizer.step},
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arrays = list(params.arrays())
    if optimizer is not None:
        m = optimizer.m or [np.zeros_like(a) for a in arrays]
        v = optimizer.v or [np.zeros_like(a) for a in arrays]
        arrays = arrays + list(m) + list(v)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, len(blob)))
            fh.write(blob)
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected: DesaeConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cfg = DesaeConfig.from_dict(header["config"])
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: config {cfg} differs from expected {expected}")
    names = [spec[0] for spec in _init_specs(cfg)]
    stored = [name for name, _ in header["params"]]
    if names != stored:
        raise CheckpointError(f"{path}: parameter layout does not match config")
    offset = 16 + hlen
    shapes = [tuple(shape) for _, shape in header["params"]]

    def read(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
        return arr

    tensors = OrderedDict((name, Tensor(read(shape), requires_grad=True)) for name, shape in zip(stored, shapes))
    optimizer = None
    if header.get("optimizer") is not None:
        m = [read(shape) for shape in shapes]
        v = [read(shape) for shape in shapes]
        optimizer = ad.AdamState(int(header["optimizer"]["step"]), m, v)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(cfg, ModelParams(tensors), optimizer, header.get("extra") or {})
