"""Command line entry point: ``desae <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error (one ``E_CODE: message``
line on stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .backbone_io import (BackboneStructure, ensure_dir, list_structure_files, load_pair_manifest,
                          parse_structure, write_structure)
from .errors import DesaeError, EmptySampleSet, LengthMismatch
from .evalkit import bias_report, paired_rmsd, recovery_rate
from .geometry import ANGLE_FEATURES, BOND_FEATURES, corrupt_structure, extract_features, kabsch_align
from .model import DesaeConfig, load_checkpoint
from .training import TrainConfig, debias, load_config, train

logger = logging.getLogger("desae")

DEFAULT_SEED = 0


def _announce(command: str, seed: int | None, **config) -> None:
    resolved = {"command": command, "seed": seed}
    resolved.update({k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()})
    print("config: " + json.dumps(resolved, sort_keys=True, default=str), flush=True)


def _parse_many(paths: list[Path], threads: int, predicted: bool = False) -> list[BackboneStructure]:
    if threads <= 1:
        return [parse_structure(p, predicted=predicted) for p in paths]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda p: parse_structure(p, predicted=predicted), paths))


def _inputs(path: Path) -> list[Path]:
    return list_structure_files(path) if path.is_dir() else [path]


# ---------------------------------------------------------------- subcommands


def cmd_features(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    _announce("features", seed, input=args.input, out=args.out, chain=args.chain)
    s = parse_structure(args.input, chain=args.chain, predicted=args.predicted)
    ft = extract_features(s)
    residue_numbers = s.residue_numbers if s.residue_numbers is not None else list(range(1, len(s) + 1))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "residue_number", "aa", *(f"{n}_deg" for n in ANGLE_FEATURES), *BOND_FEATURES])
        for i in range(len(s)):
            row = [i, residue_numbers[i], s.sequence[i]]
            row += [f"{math.degrees(ft.angles[n][i]):.4f}" if ft.angle_masks[n][i] else "" for n in ANGLE_FEATURES]
            row += [f"{ft.bonds[n][i]:.4f}" if ft.bond_masks[n][i] else "" for n in BOND_FEATURES]
            writer.writerow(row)


def cmd_compare(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    _announce("compare", seed, a=args.a, b=args.b, out=args.out, threads=args.threads)
    a = _parse_many(_inputs(args.a), args.threads)
    b = _parse_many(_inputs(args.b), args.threads)
    if not a or not b:
        raise EmptySampleSet("both corpora need at least one structure file")
    paths = bias_report(a, b, args.out)
    for name in sorted(paths):
        print(f"wrote {paths[name]}")


def cmd_corrupt(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    _announce("corrupt", seed, input=args.input, out=args.out, fraction=args.fraction)
    s = parse_structure(args.input, chain=args.chain)
    corrupted, sites = corrupt_structure(s, args.fraction, seed)
    write_structure(corrupted, args.out)
    atom_names = ("N", "CA", "C", "O")
    for residue, atom in sites:
        print(f"site {residue} {atom_names[atom]}")


def cmd_train(args) -> None:
    train_cfg, model_cfg = load_config(args.config) if args.config else (TrainConfig(), DesaeConfig())
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    _announce("train", train_cfg.seed, manifest=args.manifest, out=args.out, resume=args.resume,
              train=dataclasses.asdict(train_cfg), model=model_cfg.to_dict())
    manifest = load_pair_manifest(args.manifest)
    result = train(manifest, train_cfg, model_cfg, args.out, resume=args.resume)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last['epoch']} step {last['step']} total {last['total']:.6f}")
    print(f"checkpoints in {args.out}")


def cmd_debias(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    ck = load_checkpoint(args.checkpoint)
    _announce("debias", seed, checkpoint=args.checkpoint, input=args.input, out=args.out,
              model=ck.config.to_dict())
    structures = _parse_many(_inputs(args.input), args.threads, predicted=args.predicted)
    if not structures:
        raise EmptySampleSet(f"no structure files under {args.input}")
    written = debias(ck, structures, args.out)
    print(f"debiased {len(written)} structures into {args.out}")


def cmd_align(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    _announce("align", seed, moving=args.moving, target=args.target, out=args.out,
              full_backbone=args.full_backbone)
    moving = parse_structure(args.moving)
    target = parse_structure(args.target)
    if len(moving) != len(target):
        raise LengthMismatch(f"{len(moving)} vs {len(target)} residues")
    if args.full_backbone:
        mask = (moving.atom_mask & target.atom_mask).reshape(-1)
        rot, trans, rmsd = kabsch_align(moving.coords.reshape(-1, 3), target.coords.reshape(-1, 3), mask)
    else:
        rot, trans, rmsd = kabsch_align(moving.ca, target.ca)
    print(f"rmsd {rmsd:.6f}")
    print("rotation " + " ".join(f"{v:.8f}" for v in rot.ravel()))
    print("translation " + " ".join(f"{v:.6f}" for v in trans))
    if args.out:
        coords = moving.coords @ rot.T + trans
        write_structure(moving.with_coords(coords), args.out)


def cmd_eval(args) -> None:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    _announce("eval", seed, manifest=args.manifest, sequences=args.sequences, checkpoint=args.checkpoint,
              full_backbone=args.full_backbone, split=args.split, out=args.out)
    if args.sequences:
        with open(args.sequences, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ensure_dir(Path(args.out).parent)
        rates = []
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "recovery"])
            for row in rows:
                rate = recovery_rate(row["designed"], row["native"])
                rates.append(rate)
                writer.writerow([row["id"], repr(rate)])
        if rates:
            print(f"mean recovery {np.mean(rates):.6f} over {len(rates)} sequences")
        return
    manifest = load_pair_manifest(args.manifest)
    report = paired_rmsd(manifest, args.checkpoint, args.full_backbone, args.split)
    ensure_dir(Path(args.out).parent)
    report.write_csv(args.out)
    if len(report):
        print(f"mean rmsd {float(np.mean(report.rmsd)):.6f} over {len(report)} pairs")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default {DEFAULT_SEED}; for train, the config's seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for file parsing (default 1)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="desae", description="Backbone geometry and structure debiasing tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="per-residue angles and bond lengths as CSV")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--chain")
    p.add_argument("--predicted", action="store_true", help="read the B-factor column as pLDDT")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("compare", parents=[common], help="bias report between two structure directories")
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("corrupt", parents=[common], help="centroid-corrupt a fraction of residues")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--chain")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", parents=[common], help="pretrain the autoencoder")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path, help="INI file with [train] and [model] sections")
    p.add_argument("--out", type=Path, default=Path("run"))
    p.add_argument("--resume", type=Path)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("debias", parents=[common], help="rewrite structures with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--predicted", action="store_true")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("align", parents=[common], help="Kabsch superposition of two structures")
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--full-backbone", action="store_true")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", parents=[common], help="paired RMSD or sequence recovery")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", type=Path)
    src.add_argument("--sequences", type=Path, help="CSV with id,designed,native columns")
    p.add_argument("--checkpoint", type=Path, help="debias predicted structures first")
    p.add_argument("--full-backbone", action="store_true")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("desae: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except DesaeError as exc:
        print(f"{exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI never shows a traceback
        print(f"E_INTERNAL: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
