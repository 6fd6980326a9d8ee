"""Command-line orchestrator: generate, register, codes, train, evaluate, ablate.

Exit codes: 0 success, 2 config/schema error, 3 refusing to overwrite,
4 registration missing for a Reg* variant, 5 labels unavailable for a split.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .engine import VARIANT_FLAGS, TrainConfig, load_checkpoint, load_labels, predict_volume, run_training
from .errors import ConfigError, QuarantineError
from .fourier import DEFAULT_ALPHA, extract_codes, style_energy_fraction
from .metrics import build_report, format_table, report_to_csv, report_to_json
from .phantom import CohortConfig, generate_cohort
from .registration import complete_longitudinal
from .volume import Volume, load_volume, read_manifest, save_volume, write_manifest

logger = logging.getLogger("c2da")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EXISTS = 3
EXIT_NO_REGISTRATION = 4
EXIT_NO_LABELS = 5

ABLATION_VARIANTS = ("WoDA", "Reg", "Reg_FCC", "Reg_G", "Reg_FCC_G", "Full")
ALPHA_SWEEP = (0.02, 0.05, 0.1, 0.2)
REGISTRATION_SIDECAR = "registration.json"


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path, what="config"):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CommandError(EXIT_CONFIG, f"{what}: file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CommandError(EXIT_CONFIG, f"{what}: invalid JSON ({exc})")


def cohort_root(explicit=None, config=None) -> Path:
    """Cohort root: ``C2DA_DATA_ROOT`` beats ``--cohort`` beats the config's ``cohort`` key."""
    env = os.environ.get("C2DA_DATA_ROOT")
    if env:
        return Path(env)
    if explicit:
        return Path(explicit)
    if config and config.get("cohort"):
        return Path(config["cohort"])
    raise CommandError(EXIT_CONFIG, "cohort: no cohort root given (use --cohort, a 'cohort' config key "
                                    "or C2DA_DATA_ROOT)")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(config: dict, out_dir, force=False, seed=None) -> list:
    out_dir = Path(out_dir)
    if (out_dir / "manifest.json").exists() and not force:
        raise CommandError(EXIT_EXISTS, f"{out_dir} already holds a cohort; pass --force to regenerate")
    config = dict(config)
    if seed is not None:
        config["master_seed"] = seed
    cfg = CohortConfig.from_dict(config)
    records = generate_cohort(cfg, out_dir)
    counts = {}
    for r in records:
        counts[r.split] = counts.get(r.split, 0) + 1
    _write_json(out_dir / "generate_result.json", {"counts": counts, "n_subjects": len(records)})
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" total={len(records)}")
    return records


def cmd_register(root, force=False, levels=3, iters_per_level=60, external_exe=None,
                 per_target_subject=False) -> list:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CommandError(EXIT_CONFIG, f"manifest: not found under {root}")
    if (root / REGISTRATION_SIDECAR).exists() and not force:
        raise CommandError(EXIT_EXISTS, "registration already done for this cohort; pass --force to redo")
    records = [r for r in read_manifest(manifest_path) if r.split != "deformed_source"]
    source = [r for r in records if r.split == "source"]
    target = [r for r in records if r.split == "target_train"]
    deformed = complete_longitudinal(source, target, root, root / "deformed_source",
                                     levels=levels, iters_per_level=iters_per_level, external_exe=external_exe,
                                     per_target_subject=per_target_subject)
    write_manifest(records + deformed, manifest_path)
    covered = sorted({r.gw for r in source} | {r.gw for r in deformed})
    _write_json(root / REGISTRATION_SIDECAR, {
        "n_deformed": len(deformed),
        "deformed_gws": sorted(r.gw for r in deformed),
        "covered_gws": covered,
    })
    print(f"{len(deformed)} deformed records; covered GWs: {covered}")
    return records + deformed


def cmd_codes(root, subject_id, out_dir, alpha=DEFAULT_ALPHA, force=False, slice_index=None) -> dict:
    """Dump FCC/FSC of a subject (all slices, or one with ``slice_index``) plus style energy fractions."""
    root = Path(root)
    out_dir = Path(out_dir)
    recs = {r.subject_id: r for r in read_manifest(root / "manifest.json")}
    if subject_id not in recs:
        raise CommandError(EXIT_CONFIG, f"subject: unknown id {subject_id!r}")
    result_path = out_dir / f"{subject_id}_codes.json"
    if result_path.exists() and not force:
        raise CommandError(EXIT_EXISTS, f"{result_path} exists; pass --force to overwrite")
    v = load_volume(root / recs[subject_id].volume_path)
    stack = np.moveaxis(v.data, -1, 0)  # slices first, codes over the in-plane axes
    if slice_index is not None:
        if not 0 <= slice_index < len(stack):
            raise CommandError(EXIT_CONFIG, f"slice: {slice_index} outside 0..{len(stack) - 1}")
        stack = stack[slice_index:slice_index + 1]
    codes = extract_codes(stack, alpha)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(np.moveaxis(codes.fcc, 0, -1), v.spacing), out_dir / f"{subject_id}_fcc.mvol")
    save_volume(Volume(np.moveaxis(codes.fsc, 0, -1), v.spacing), out_dir / f"{subject_id}_fsc.mvol")
    fractions = [style_energy_fraction(s, alpha) if np.any(s) else None for s in stack]
    valid = [f for f in fractions if f is not None]
    result = {
        "subject_id": subject_id,
        "alpha": alpha,
        "slice": slice_index,
        "style_energy_fraction": fractions,
        "mean_style_energy_fraction": float(np.mean(valid)) if valid else None,
    }
    _write_json(result_path, result)
    print(f"{subject_id}: mean style energy fraction {result['mean_style_energy_fraction']}")
    return result


def _train_config(config: dict, variant=None, alpha=None, seed=None) -> TrainConfig:
    d = {k: v for k, v in config.items() if k not in ("cohort", "seeds", "variants", "alphas", "extra_variants")}
    if variant is not None:
        d["variant"] = variant
    if alpha is not None:
        d["alpha"] = alpha
    if seed is not None:
        d["seed"] = seed
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"<root>: {exc}") from exc


def cmd_train(cfg: TrainConfig, root, run_dir, force=False) -> dict:
    root = Path(root)
    run_dir = Path(run_dir)
    result_path = run_dir / "train_result.json"
    if result_path.exists() and not force:
        raise CommandError(EXIT_EXISTS, f"{run_dir} holds a completed run; pass --force to retrain")
    if cfg.flags["use_registration"] and not (root / REGISTRATION_SIDECAR).exists():
        raise CommandError(EXIT_NO_REGISTRATION,
                           f"variant {cfg.variant} needs deformed source data; run `c2da register` first")
    manifest = read_manifest(root / "manifest.json")
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", {**cfg.to_dict(), "cohort": str(root.resolve())})
    rec = run_training(cfg, manifest, root, run_dir)
    result = {"checkpoint": rec.path, "epoch": rec.epoch, "val_dice": rec.val_dice,
              "log": rec.log_path, "variant": cfg.variant, "seed": cfg.seed}
    _write_json(result_path, result)
    print(f"checkpoint: {rec.path}")
    return result


def cmd_evaluate(run_dir, split="target_test", root=None, force=True) -> dict:
    run_dir = Path(run_dir)
    if not (run_dir / "checkpoint" / "metadata.json").exists():
        raise CommandError(EXIT_CONFIG, f"{run_dir}: no checkpoint found")
    models, cfg, _ = load_checkpoint(run_dir / "checkpoint")
    snap = _read_json(run_dir / "config.json", "config")
    root = Path(root) if root else cohort_root(None, snap)
    records = [r for r in read_manifest(root / "manifest.json") if r.split == split]
    if not records:
        raise CommandError(EXIT_CONFIG, f"split: {split!r} has no subjects")
    if split == "target_train" and not cfg.reads_target_labels:
        raise CommandError(EXIT_NO_LABELS, "target_train labels are quarantined for unsupervised variants")
    if split != "target_train" and any(r.label_path is None for r in records):
        raise CommandError(EXIT_NO_LABELS, f"split {split!r} lacks ground-truth labels")
    pairs = []
    for r in records:
        v = load_volume(root / r.volume_path)
        gt = load_labels(r, root, allow_quarantine=cfg.reads_target_labels)
        pairs.append((predict_volume(models.segmentor, v, cfg), gt, r))
    report = build_report(pairs)
    report["variant"] = cfg.variant
    report["split"] = split
    (run_dir / f"report_{split}.json").write_text(report_to_json(report), encoding="utf-8")
    (run_dir / f"report_{split}.txt").write_text(format_table(report), encoding="utf-8")
    (run_dir / f"report_{split}.csv").write_text(report_to_csv(report), encoding="utf-8")
    m = report["mean"]
    print(f"{cfg.variant} {split}: mean Dice {100 * m['dice_mean']:.1f}±{100 * m['dice_std']:.1f} %, "
          f"mean ASSD {m['assd_mean']:.2f}±{m['assd_std']:.2f} mm")
    return report


def _ablation_job(args):
    name, cfg_dict, root, run_dir = args
    cfg = TrainConfig.from_dict(cfg_dict)
    run_dir = Path(run_dir)
    if not (run_dir / "train_result.json").exists():
        cmd_train(cfg, root, run_dir, force=True)
    if not (run_dir / "report_target_test.json").exists():
        cmd_evaluate(run_dir, "target_test", root)
    with open(run_dir / "report_target_test.json", encoding="utf-8") as fh:
        rep = json.load(fh)
    return name, cfg.seed, rep["mean"]["dice_mean"]


def ablation_jobs(config: dict, root, out_dir) -> list:
    """Enumerate ``(row_name, config_dict, root, run_dir)`` for every row and seed."""
    seeds = list(config.get("seeds", [0, 1, 2]))
    variants = list(config.get("variants", ABLATION_VARIANTS)) + list(config.get("extra_variants", []))
    alphas = list(config.get("alphas", ALPHA_SWEEP))
    jobs = []
    for v in variants:
        for s in seeds:
            cfg = _train_config(config, variant=v, seed=s)
            jobs.append((v, cfg.to_dict(), str(root), str(Path(out_dir) / "runs" / f"{v}_s{s}")))
    for a in alphas:
        for s in seeds:
            cfg = _train_config(config, variant="Full", alpha=a, seed=s)
            name = f"Full_alpha{a:g}"
            jobs.append((name, cfg.to_dict(), str(root), str(Path(out_dir) / "runs" / f"{name}_s{s}")))
    return jobs


def cmd_ablate(config: dict, root, out_dir, jobs=1, force=False) -> dict:
    """Train and evaluate every ablation row over paired seeds; write a summary table.

    Finished runs inside ``out_dir/runs`` are reused, so an interrupted
    ablation resumes where it stopped.
    """
    root = Path(root)
    out_dir = Path(out_dir)
    if (out_dir / "summary.json").exists() and not force:
        raise CommandError(EXIT_EXISTS, f"{out_dir} holds a finished ablation; pass --force to redo")
    if not (root / REGISTRATION_SIDECAR).exists():
        raise CommandError(EXIT_NO_REGISTRATION, "ablation needs deformed source data; run `c2da register` first")
    todo = ablation_jobs(config, root, out_dir)
    # the default-alpha sweep row coincides with the Full row; train it once
    unique = {}
    for name, cfg_d, r, run_dir in todo:
        key = json.dumps(cfg_d, sort_keys=True)
        unique.setdefault(key, (name, cfg_d, r, run_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_ablation_job, unique.values()))
    else:
        done = [_ablation_job(j) for j in unique.values()]
    by_key = {k: d[2] for k, d in zip(unique, done)}

    rows = {}
    seeds_by_row = {}
    for name, cfg_d, _, _ in todo:
        rows.setdefault(name, []).append(by_key[json.dumps(cfg_d, sort_keys=True)])
        seeds_by_row.setdefault(name, []).append(cfg_d["seed"])
    table = []
    for name, vals in rows.items():
        arr = np.asarray(vals, dtype=np.float64)
        table.append({"row": name, "dice_mean": float(arr.mean()), "dice_std": float(arr.std()),
                      "per_seed": [float(v) for v in arr], "seeds": seeds_by_row[name]})
    summary = {
        "rows": table,
        "metadata": {"cohort": str(root.resolve()), "seeds": list(config.get("seeds", [0, 1, 2])),
                     "shared_seeds": True, "split": "target_test"},
    }
    _write_json(out_dir / "summary.json", summary)
    lines = ["row,dice_mean,dice_std"] + [f"{r['row']},{r['dice_mean']:.6f},{r['dice_std']:.6f}" for r in table]
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    text = [f"{'row':<18}{'mean Dice [%]':>16}"]
    text += [f"{r['row']:<18}{100 * r['dice_mean']:>10.1f}±{100 * r['dice_std']:.1f}" for r in table]
    (out_dir / "summary.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    print("\n".join(text))
    return summary


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--run-dir", type=Path, help="output / run directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--force", action="store_true", help="allow overwriting existing results")
    common.add_argument("--jobs", type=int, default=1, help="parallel processes (ablate only)")
    common.add_argument("--cohort", type=Path, help="cohort root (C2DA_DATA_ROOT overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="c2da", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic phantom cohort")
    reg = sub.add_parser("register", parents=[common], help="complete the source GW range by registration")
    reg.add_argument("--levels", type=int, default=3)
    reg.add_argument("--iters", type=int, default=60)
    reg.add_argument("--external", help="external registration executable")
    reg.add_argument("--per-subject", action="store_true",
                     help="one deformed copy per target subject at a missing GW (default: one per GW)")
    codes = sub.add_parser("codes", parents=[common], help="dump Fourier content/style codes of a subject")
    codes.add_argument("--subject", required=True)
    codes.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    codes.add_argument("--slice", type=int, help="only this slice index (default: every slice)")
    tr = sub.add_parser("train", parents=[common], help="train one variant")
    tr.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    tr.add_argument("--alpha", type=float)
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a trained run")
    ev.add_argument("--split", default="target_test")
    sub.add_parser("ablate", parents=[common], help="variant ablation plus alpha sweep over paired seeds")
    return p


def _require(value, flag):
    if value is None:
        raise CommandError(EXIT_CONFIG, f"{flag}: required for this command")
    return value


def _dispatch(args) -> int:
    config = _read_json(args.config) if args.config else {}
    if not isinstance(config, dict):
        raise CommandError(EXIT_CONFIG, "<root>: config must be a JSON object")
    if args.command == "generate":
        out = args.run_dir or os.environ.get("C2DA_DATA_ROOT") or args.cohort
        out = _require(out, "--run-dir")
        cmd_generate(config, out, args.force, args.seed)
    elif args.command == "register":
        per_subject = args.per_subject or bool(config.get("deform_per_target_subject", False))
        cmd_register(cohort_root(args.cohort or args.run_dir, config), args.force, args.levels, args.iters,
                     args.external, per_subject)
    elif args.command == "codes":
        cmd_codes(cohort_root(args.cohort, config), args.subject, _require(args.run_dir, "--run-dir"),
                  args.alpha, args.force, args.slice)
    elif args.command == "train":
        cfg = _train_config(config, args.variant, args.alpha, args.seed)
        cmd_train(cfg, cohort_root(args.cohort, config), _require(args.run_dir, "--run-dir"), args.force)
    elif args.command == "evaluate":
        root = None
        if os.environ.get("C2DA_DATA_ROOT") or args.cohort:
            root = cohort_root(args.cohort)
        cmd_evaluate(_require(args.run_dir, "--run-dir"), args.split, root)
    elif args.command == "ablate":
        if args.seed is not None:
            config = {**config, "seeds": [args.seed + i for i in range(3)]}
        cmd_ablate(config, cohort_root(args.cohort, config), _require(args.run_dir, "--run-dir"),
                   args.jobs, args.force)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QuarantineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_LABELS


if __name__ == "__main__":
    sys.exit(main())
