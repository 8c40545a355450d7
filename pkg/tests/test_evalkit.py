import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation_matrix
from desae.backbone_io import AMINO_ACIDS, load_pair, load_pair_manifest, write_structure
from desae.errors import EmptySampleSet, InvalidDistribution, LengthMismatch
from desae.evalkit import REPORT_FILES, bias_report, paired_rmsd, perplexity, recovery_rate, structure_rmsd
from desae.geometry import random_backbone
from desae.model import DesaeConfig, init_params, reconstruct, save_checkpoint
from desae.stats import read_grid

# ---------------------------------------------------------------- recovery


def test_recovery_examples():
    assert recovery_rate("ACDE", "ACDE") == 1.0
    assert recovery_rate("AAAA", "CCCC") == 0.0
    assert recovery_rate("ACDF", "ACDE") == 0.75


def test_recovery_skips_unknown_native():
    assert recovery_rate("ACDW", "ACDX") == 1.0
    with pytest.raises(EmptySampleSet):
        recovery_rate("A", "X")


def test_recovery_length_mismatch():
    with pytest.raises(LengthMismatch):
        recovery_rate("ACD", "AC")


# ---------------------------------------------------------------- perplexity


def log_rows(probs):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(probs, dtype=float))


def test_perplexity_uniform_any_length():
    for n in (1, 7, 250):
        seq = "".join(AMINO_ACIDS[i % 20] for i in range(n))
        assert abs(perplexity(np.full((n, 20), -math.log(20)), seq) - 20.0) <= 1e-9


def test_perplexity_certain_and_half():
    seq = "ACDEFG"
    certain = np.zeros((6, 20))
    half = np.full((6, 20), 0.5 / 19)
    for i, c in enumerate(seq):
        certain[i, AMINO_ACIDS.index(c)] = 1.0
        half[i, AMINO_ACIDS.index(c)] = 0.5
    assert perplexity(log_rows(certain), seq) == pytest.approx(1.0, abs=1e-12)
    assert perplexity(log_rows(half), seq) == pytest.approx(2.0, abs=1e-12)


def test_perplexity_matches_direct_formula(rng):
    logits = rng.normal(size=(30, 20))
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    seq = "".join(rng.choice(list(AMINO_ACIDS), 30))
    want = math.exp(-np.mean([lp[i, AMINO_ACIDS.index(c)] for i, c in enumerate(seq)]))
    assert perplexity(lp, seq) == pytest.approx(want, rel=1e-12)


def test_perplexity_excludes_unknown():
    lp = np.full((2, 20), -math.log(20))
    lp[1] = log_rows(np.eye(20)[0])
    assert perplexity(lp, "AX") == pytest.approx(20.0, abs=1e-9)


def test_perplexity_invalid_rows():
    with pytest.raises(InvalidDistribution):
        perplexity(np.zeros((2, 20)), "AA")
    with pytest.raises(InvalidDistribution):
        perplexity(np.full((1, 20), -np.inf), "A")
    with pytest.raises(InvalidDistribution):
        perplexity(np.full((1, 19), -math.log(19)), "A")
    bad = np.full((1, 20), -math.log(20))
    bad[0, 0] = np.nan
    with pytest.raises(InvalidDistribution):
        perplexity(bad, "A")
    with pytest.raises(LengthMismatch):
        perplexity(np.full((2, 20), -math.log(20)), "A")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_metrics_permutation_consistent(n, seed):
    rng = np.random.default_rng(seed)
    true = "".join(rng.choice(list(AMINO_ACIDS + "X"), n))
    if set(true) == {"X"}:
        true = "A" + true[1:]
    pred = "".join(rng.choice(list(AMINO_ACIDS), n))
    logits = rng.normal(size=(n, 20))
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    perm = rng.permutation(n)
    shuffle = lambda s: "".join(s[i] for i in perm)
    assert recovery_rate(shuffle(pred), shuffle(true)) == pytest.approx(recovery_rate(pred, true), abs=1e-12)
    assert perplexity(lp[perm], shuffle(true)) == pytest.approx(perplexity(lp, true), rel=1e-12)


# ---------------------------------------------------------------- paired RMSD


def _pairs(tmp_path, rng):
    base = random_backbone(rng, 20, "b")
    g = random_rotation_matrix(rng)
    noisy = base.with_coords(base.coords + rng.normal(size=base.coords.shape) * 0.5)
    pairs = {
        "same": (base, base),
        "rigid": (base.with_coords(base.coords @ g.T + 12.0), base),
        "noisy": (noisy, base),
    }
    lines = ["pair_id,predicted_path,experimental_path,split"]
    for pid, (pred, exp) in pairs.items():
        write_structure(pred, tmp_path / f"{pid}_pred.pdb")
        write_structure(exp, tmp_path / f"{pid}_exp.pdb")
        lines.append(f"{pid},{pid}_pred.pdb,{pid}_exp.pdb,test")
    (tmp_path / "m.csv").write_text("\n".join(lines) + "\n")
    return load_pair_manifest(tmp_path / "m.csv"), pairs


def test_paired_rmsd(tmp_path, rng):
    manifest, pairs = _pairs(tmp_path, rng)
    report = paired_rmsd(manifest)
    assert report.pair_ids == ["noisy", "rigid", "same"] and len(report) == 3
    values = dict(zip(report.pair_ids, report.rmsd))
    assert values["same"] <= 1e-9
    # coordinates pass through 3-decimal PDB text, so the rigid pair carries rounding noise
    assert values["rigid"] <= 1e-3
    assert values["noisy"] > 0.2
    assert np.all(report.rmsd >= 0)
    assert report.histogram().count == 3


def test_structure_rmsd_rigid_exact(rng):
    s = random_backbone(rng, 15, "r")
    moved = s.with_coords(s.coords @ random_rotation_matrix(rng).T - 4.0)
    assert structure_rmsd(moved, s) <= 1e-6
    assert structure_rmsd(moved, s, full_backbone=True) <= 1e-6
    with pytest.raises(LengthMismatch):
        structure_rmsd(s, random_backbone(rng, 14, "x"))


def test_paired_rmsd_with_transform(tmp_path, rng):
    manifest, _ = _pairs(tmp_path, rng)
    cfg = DesaeConfig(encoder_layers=1, decoder_layers=1, hidden_dim=16, virtual_points=2, neighbors=4, ffn_dim=16)
    params = init_params(cfg, 0)
    save_checkpoint(tmp_path / "m.ckpt", cfg, params)
    report = paired_rmsd(manifest, tmp_path / "m.ckpt", split="test")
    for row in manifest.split("test"):
        pred, exp = load_pair(row)
        want = structure_rmsd(reconstruct(pred, cfg, params), exp)
        assert report.rmsd[report.pair_ids.index(row.pair_id)] == pytest.approx(want, abs=1e-12)


def test_paired_rmsd_csv(tmp_path, rng):
    manifest, _ = _pairs(tmp_path, rng)
    paired_rmsd(manifest).write_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["pair_id"] for r in rows] == ["noisy", "rigid", "same"]


# ---------------------------------------------------------------- bias report


def test_bias_report_self_compare(tmp_path, rng):
    corpus = [random_backbone(rng, 30, f"c{i}", noise=1.0) for i in range(4)]
    out = tmp_path / "new" / "report"
    paths = bias_report(corpus, corpus, out)
    assert sorted(p.name for p in out.iterdir()) == sorted(REPORT_FILES)
    assert set(paths) == set(REPORT_FILES)
    assert json.loads((out / "MANIFEST.json").read_text()) == REPORT_FILES
    records = json.loads((out / "features.json").read_text())["records"]
    for r in records:
        if r["metric"] == "cosine":
            assert r["value"] == pytest.approx(1.0, abs=1e-12)
        elif r["metric"] == "kl":
            assert r["value"] <= 1e-12
        else:
            assert r["value"] == 0.0
    assert not np.any(read_grid(out / "ramachandran_overlay.csv"))
    with open(out / "paired_rmsd.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(float(r["rmsd"]) <= 1e-9 for r in rows)


def test_bias_report_overlay_is_difference(tmp_path, rng):
    a = [random_backbone(rng, 25, f"a{i}") for i in range(3)]
    b = [random_backbone(rng, 25, f"b{i}") for i in range(3)]
    bias_report(a, b, tmp_path)
    grid_a, grid_b = read_grid(tmp_path / "ramachandran_a.csv"), read_grid(tmp_path / "ramachandran_b.csv")
    np.testing.assert_array_equal(read_grid(tmp_path / "ramachandran_overlay.csv"), grid_b - grid_a)
    assert grid_a.sum() == 3 * 23
