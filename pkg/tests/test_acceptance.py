"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are echoed
live and repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import random_rotation_matrix
from desae import autodiff as ad
from desae.autodiff import Tensor
from desae.backbone_io import BackboneStructure, format_structure, parse_pdb_lines
from desae.geometry import (
    corrupt_structure,
    extract_features,
    kabsch_align,
    random_backbone,
    wrap_angle,
)
from desae.loss import composite_loss, loss_distance, loss_fragment, loss_neighbor, loss_pair, prepare_targets
from desae.model import (
    DesaeConfig,
    NodeState,
    decode_coordinates,
    encode,
    forward,
    frame_aggregation,
    frame_updating,
    init_node_state,
    init_params,
    load_checkpoint,
    parameter_count,
    quat_to_rot,
    quat_to_rot_np,
    reconstruct,
    save_checkpoint,
)
from desae.stats import corpus_compare, jitter_tables
from desae.training import TrainConfig, TrainItem, train_items
from test_autodiff import OPS, SHAPES_PER_OP
from test_loss import oracle_distance, oracle_fragment, oracle_neighbor, oracle_pair

MINI = DesaeConfig(encoder_layers=1, decoder_layers=1, hidden_dim=16, virtual_points=2, neighbors=2, ffn_dim=32)
FD_STEP = 1e-6


def _randomise_update_heads(params, rng, scale=0.3):
    # the near-identity initialisation would hide any equivariance defect in the frame updates
    for name in params.names():
        if name.endswith(("w_r", "trans.w")):
            params[name].data[:] = rng.normal(size=params[name].shape) * scale


# ---------------------------------------------------------------- 1


def test_criterion_01_equivariance(acceptance):
    rng = np.random.default_rng(101)
    cfg = DesaeConfig()
    params = init_params(cfg, seed=1)
    _randomise_update_heads(params, rng)
    t0 = time.perf_counter()
    worst_inv = worst_eq = 0.0
    for i in range(25):
        s = random_backbone(rng, 20, f"eq{i}", noise=1.0)
        g, shift = random_rotation_matrix(rng), rng.normal(size=3) * 20
        moved = s.with_coords(s.coords @ g.T + shift)
        a, b = encode(s, cfg, params), encode(moved, cfg, params)
        worst_inv = max(worst_inv, np.abs(a.h.data - b.h.data).max(), np.abs(a.e.data - b.e.data).max())
        x, y = reconstruct(s, cfg, params).coords, reconstruct(moved, cfg, params).coords
        worst_eq = max(worst_eq, np.abs(y - (x @ g.T + shift)).max())
    elapsed = time.perf_counter() - t0
    ok = worst_inv <= 1e-6 and worst_eq <= 1e-4 and elapsed < 120
    acceptance(1, ok, f"encoder max-abs {worst_inv:.2e} (<=1e-6), decoder max-abs {worst_eq:.2e} (<=1e-4), "
                      f"{elapsed:.1f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- 2


def _weighted(fn, rng):
    probe = fn()
    weights = [rng.normal(size=t.shape) for t in probe]
    return lambda: ad.sum(ad.stack([ad.sum(t * w) for t, w in zip(fn(), weights)]))


def test_criterion_02_gradients(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    op_worst = 0.0
    for name in sorted(OPS):
        for _ in range(SHAPES_PER_OP):
            fn, arrays = OPS[name](rng)
            inputs = [Tensor(a.copy()) for a in arrays]
            w = rng.normal(size=fn(*inputs).shape)
            op_worst = max(op_worst, ad.gradcheck(lambda: ad.sum(fn(*inputs) * w), inputs))

    params = init_params(MINI, seed=2)
    params["dec0.w_r"].data[:] = rng.normal(size=(4, 9)) * 0.3
    s = random_backbone(rng, 5, "g", noise=1.0)
    state = init_node_state(s, MINI, params)
    leaves = [Tensor(state.h.data.copy()), Tensor(state.e.data.copy()),
              Tensor(state.rotations.data.copy()), Tensor(state.translations.data.copy())]
    nb = state.neighbors
    prefixed = lambda *p: [t for n, t in params.tensors.items() if n.startswith(p)]
    layers = {
        "embedding": (lambda: (lambda st: [st.h, st.e])(init_node_state(s, MINI, params)),
                      prefixed("embed", "edge_init")),
        "frame_aggregation": (lambda: (lambda st: [st.h, st.e])(frame_aggregation(NodeState(*leaves, nb), params,
                                                                                  "enc0", MINI)),
                              leaves + prefixed("enc0.")),
        "frame_updating": (lambda: (lambda st: [st.rotations, st.translations])(
            frame_updating(NodeState(*leaves, nb), params, "dec0", MINI)),
            leaves + [t for n, t in params.tensors.items() if n.startswith("dec0.") and ".agg." not in n]),
        "decode_coordinates": (lambda: [decode_coordinates(NodeState(*leaves, nb), params, MINI)],
                               [leaves[0], leaves[2], leaves[3], params["offset.w"], params["offset.b"]]),
        "quat_to_rot": None,
    }
    layer_errs = {}
    for name, spec in layers.items():
        if spec is None:
            q = Tensor(rng.normal(size=(5, 4)))
            layer_errs[name] = ad.gradcheck(_weighted(lambda: [quat_to_rot(q)], rng), [q], h=FD_STEP)
            continue
        fn, tensors = spec
        layer_errs[name] = ad.gradcheck(_weighted(fn, rng), tensors, h=FD_STEP)

    target = prepare_targets(s, c=7, k=2)
    corrupted, _ = corrupt_structure(s, 0.4, 3)
    layer_errs["end_to_end"] = ad.gradcheck(
        lambda: composite_loss(forward(corrupted, MINI, params).coords_per_layer, target).tensor,
        list(params), h=FD_STEP)
    preds = [Tensor(s.coords + rng.normal(size=s.coords.shape) * 0.5) for _ in range(2)]
    layer_errs["composite_loss"] = ad.gradcheck(lambda: composite_loss(preds, target).tensor, preds, h=FD_STEP)

    elapsed = time.perf_counter() - t0
    worst_layer = max(layer_errs.values())
    ok = op_worst <= 1e-4 and worst_layer <= 1e-3 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in layer_errs.items())
    acceptance(2, ok, f"{len(OPS)} ops x {SHAPES_PER_OP} shapes max rel {op_worst:.1e} (<=1e-4); layers max rel "
                      f"{worst_layer:.1e} (<=1e-3) [{detail}]; {elapsed:.0f}s (<300s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_loss_oracles(acceptance):
    rng = np.random.default_rng(303)
    pairs = {"fragment": (loss_fragment, oracle_fragment), "pair": (loss_pair, oracle_pair),
             "neighbor": (loss_neighbor, oracle_neighbor), "distance": (loss_distance, oracle_distance)}
    worst = dict.fromkeys(pairs, 0.0)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        target = rng.normal(size=(n, 4, 3)) * 3
        pred = target + rng.normal(size=target.shape) * 0.7
        for name, (fn, oracle) in pairs.items():
            worst[name] = max(worst[name], abs(float(fn(pred, target).data) - oracle(pred, target)))
    ok = max(worst.values()) <= 1e-9
    acceptance(3, ok, "max abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<=1e-9, 50 instances)")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_04_quaternions(acceptance):
    cases = [
        ([1.0, 0, 0, 0], np.eye(3)),
        ([0.0, 1, 0, 0], np.diag([1.0, -1.0, -1.0])),
        ([math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])),
    ]
    case_err = max(np.abs(quat_to_rot_np(q) - r).max() for q, r in cases)
    q = np.random.default_rng(404).normal(size=(1000, 4))
    r = quat_to_rot_np(q)
    ortho = np.abs(r @ np.swapaxes(r, -1, -2) - np.eye(3)).max()
    det = np.abs(np.linalg.det(r) - 1).max()
    double_cover = np.array_equal(quat_to_rot_np(-q), r) and np.array_equal(
        quat_to_rot(Tensor(-q)).data, quat_to_rot(Tensor(q)).data)
    ok = case_err <= 1e-12 and ortho <= 1e-10 and det <= 1e-10 and double_cover
    acceptance(4, ok, f"substitution cases {case_err:.1e} (<=1e-12), orthonormality {ortho:.1e}, det {det:.1e} "
                      f"(<=1e-10), q == -q exact: {double_cover}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_corruption(acceptance):
    rng = np.random.default_rng(505)
    count_ok, centroid_err, untouched_ok = True, 0.0, True
    for i in range(100):
        s = random_backbone(rng, int(rng.integers(5, 120)), f"c{i}", noise=1.0)
        for _ in range(int(rng.integers(0, 4))):  # some residues lose an atom and become ineligible
            s.atom_mask[rng.integers(len(s)), rng.integers(4)] = False
        eligible = int(np.all(s.atom_mask, axis=1).sum())
        out, _ = corrupt_structure(s, 0.10, int(rng.integers(2**31)))
        changed = np.any(out.coords != s.coords, axis=-1)  # (L, 4)
        residues = np.flatnonzero(changed.any(axis=1))
        count_ok &= len(residues) == -(-eligible // 10) and bool(np.all(changed.sum(axis=1) <= 1))
        count_ok &= bool(np.all(np.all(s.atom_mask[residues], axis=1)))
        for r in residues:
            a = int(np.flatnonzero(changed[r])[0])
            centroid = np.mean([s.coords[r, b] for b in range(4) if b != a], axis=0)
            centroid_err = max(centroid_err, np.abs(out.coords[r, a] - centroid).max())
        keep = ~changed
        untouched_ok &= out.coords[keep].tobytes() == s.coords[keep].tobytes()
    ok = count_ok and centroid_err <= 1e-12 and untouched_ok
    acceptance(5, ok, f"100 structures: counts == ceil(0.1 L_eligible): {count_ok}, centroid err "
                      f"{centroid_err:.1e} (<=1e-12), untouched bitwise: {untouched_ok}")
    assert ok


# ---------------------------------------------------------------- 6


def _crop(s: BackboneStructure, length: int) -> BackboneStructure:
    return BackboneStructure(s.id, s.sequence[:length], s.coords[:length].copy(), s.atom_mask[:length].copy())


@pytest.mark.slow
def test_criterion_06_overfit(acceptance, experimental_structures):
    structures = [_crop(s, 60) for s in experimental_structures[:5]]
    items = [TrainItem.from_structure(s.id, s) for s in structures]
    cfg = DesaeConfig(encoder_layers=2, decoder_layers=2, hidden_dim=32, ffn_dim=160)
    steps = 300
    totals = []
    t0 = time.perf_counter()
    result = train_items(items, TrainConfig(epochs=steps, batch_size=5, lr_init=2e-3, seed=0), cfg,
                         log_every_step=lambda step, lbs: totals.append(float(np.mean([b.total for b in lbs]))))
    elapsed = time.perf_counter() - t0

    def ca_rmsd(params):
        values = []
        for i, s in enumerate(structures):
            corrupted, _ = corrupt_structure(s, 0.10, 9000 + i)
            values.append(kabsch_align(reconstruct(corrupted, cfg, params).ca, s.ca)[2])
        return values

    trained = ca_rmsd(result.params)
    untrained = ca_rmsd(init_params(cfg, 0))
    drop = 1 - totals[-1] / totals[0]
    ok = len(totals) <= 2000 and max(trained) < 1.0 and drop >= 0.5 and elapsed < 1800
    acceptance(6, ok, f"{len(totals)} steps, loss {totals[0]:.3f} -> {totals[-1]:.3f} ({drop:.0%} drop, >=50%), "
                      f"corrupted-input CA RMSD max {max(trained):.3f} A (<1.0; untrained {min(untrained):.2f}-"
                      f"{max(untrained):.2f}), {elapsed:.0f}s (<1800s)")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_07_stats(acceptance, experimental_structures):
    real = [extract_features(s) for s in experimental_structures]
    rng = np.random.default_rng(0)
    synthetic = [extract_features(random_backbone(rng, 60, f"syn{i}", noise=1.0)) for i in range(800)]
    identity_ok = True
    for corpus in (real, synthetic):
        report = corpus_compare(corpus, corpus)
        for fc in report.features.values():
            m = fc.metrics
            identity_ok &= m["kl"] <= 1e-12 and m["wasserstein"] == 0 and m["euclidean"] == 0
            identity_ok &= abs(m["cosine"] - 1) <= 1e-12
    sigmas = (0.01, 0.05, 0.1)
    reports = [corpus_compare(synthetic, jitter_tables(synthetic, s, seed=0)) for s in sigmas]
    angle_names = [n for n in reports[0].features if n in ("phi", "psi", "omega", "alpha", "beta", "gamma")]
    kls = {n: [r.features[n].metrics["kl"] for r in reports] for n in angle_names}
    monotone = {n: v[0] < v[1] < v[2] for n, v in kls.items()}
    ok = identity_ok and all(monotone.values()) and len(angle_names) == 6
    detail = ", ".join(f"{n} {'<'.join(f'{x:.4f}' for x in v)}" for n, v in kls.items())
    acceptance(7, ok, f"self-compare identities: {identity_ok}; KL monotone in sigma on 800x60 corpus: [{detail}]")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_08_geometry_anchors(acceptance, experimental_structures):
    tables = [extract_features(s) for s in experimental_structures]
    c_ca = np.concatenate([t.bonds["c_ca"][t.bond_masks["c_ca"]] for t in tables])
    ca_n = np.concatenate([t.bonds["ca_n"][t.bond_masks["ca_n"]] for t in tables])
    omega = np.concatenate([t.angles["omega"][t.angle_masks["omega"]] for t in tables])
    near_pi = float(np.mean(np.abs(wrap_angle(omega - math.pi)) <= 0.5))
    ok = (len(tables) >= 20 and 1.50 <= c_ca.mean() <= 1.55 and 1.43 <= ca_n.mean() <= 1.49 and near_pi > 0.90)
    acceptance(8, ok, f"{len(tables)} structures: mean C-CA {c_ca.mean():.4f} A [1.50,1.55], mean CA-N "
                      f"{ca_n.mean():.4f} A [1.43,1.49], omega within 0.5 rad of pi {near_pi:.1%} (>90%)")
    assert ok


# ---------------------------------------------------------------- 9


def test_criterion_09_round_trips(acceptance, tmp_path):
    rng = np.random.default_rng(909)
    worst = 0.0
    for i in range(100):
        s = random_backbone(rng, int(rng.integers(2, 80)), f"rt{i}", noise=1.0)
        s = s.with_coords(s.coords + rng.uniform(-500, 500, size=3))
        back = parse_pdb_lines(format_structure(s).splitlines())
        worst = max(worst, np.abs(back.coords - s.coords).max())
    cfg = DesaeConfig()
    params = init_params(cfg, seed=9)
    save_checkpoint(tmp_path / "default.ckpt", cfg, params)
    loaded = load_checkpoint(tmp_path / "default.ckpt", cfg)
    s = random_backbone(rng, 20, "ck")
    bitwise = all(a.data.tobytes() == b.data.tobytes() for a, b in
                  zip(forward(s, cfg, params).coords_per_layer, forward(s, cfg, loaded.params).coords_per_layer))
    ok = worst <= 5e-4 and bitwise
    acceptance(9, ok, f"PDB round trip max {worst:.1e} A over 100 structures (<=5e-4); checkpoint forward "
                      f"bitwise identical: {bitwise}")
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_parameter_budget(acceptance):
    count = parameter_count(DesaeConfig())
    deviation = count / 5.9e6 - 1
    ok = abs(deviation) <= 0.15
    acceptance(10, ok, f"default DesaeConfig has {count:,} parameters ({deviation:+.1%} vs 5.9M, within +-15%)")
    assert ok
