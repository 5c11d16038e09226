"""Command-line experiment harness: generate, train, evaluate, ablate.

Every run writes a machine-readable manifest (config hash, package
version, seeds) into its output directory so it can be reproduced
bit-exactly.  Exit codes: 0 ok, 2 bad config/arguments, 3 data problem,
4 training aborted, 1 anything else.
"""

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__, config as cfgmod, evaluation, networks, phantoms, trainer

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4

COMPONENT_VARIANTS = (
    ("baseline", {"disable_contrast": True, "disable_pd": True, "disable_consistency": True}),
    ("wo_sdm", {"disable_sdm": True}),
    ("wo_contrast_pd", {"disable_contrast": True, "disable_pd": True}),
    ("wo_contrast", {"disable_contrast": True}),
    ("wo_pd", {"disable_pd": True}),
    ("wo_sdm_loss", {"disable_sdm_loss": True}),
    ("full", {}),
)

DROPOUT_SWEEP = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)


def _load_experiment(args):
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        cfg = cfgmod.from_json(cfgmod.ExperimentConfig, text)
    else:
        cfg = cfgmod.ExperimentConfig()
    for name in (
        "data_dir", "out_dir", "disable_contrast", "disable_pd",
        "disable_sdm_loss", "disable_consistency", "disable_sdm",
        "dropout_p", "pool_hw",
    ):
        value = getattr(args, name, None)
        if value not in (None, False):
            setattr(cfg, name, value)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.dataset.seed = args.seed
    if getattr(args, "t_max", None) is not None:
        cfg.train.t_max = args.t_max
    return cfg


def _write_run_manifest(out_dir, cfg, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfgmod.to_json(cfg))
    manifest = {
        "config_hash": cfgmod.config_hash(cfg),
        "code_version": __version__,
        "seeds": {"train": cfg.train.seed, "dataset": cfg.dataset.seed},
    }
    manifest.update(extra or {})
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args):
    cfg = _load_experiment(args)
    ds = cfg.dataset
    for name in ("n_cases", "n_labeled", "n_unlabeled", "n_test"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(ds, name, value)
    if ds.n_labeled < 1:
        print("error: n_labeled must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if ds.n_labeled + ds.n_unlabeled + ds.n_test > ds.n_cases:
        print(
            f"error: split {ds.n_labeled}+{ds.n_unlabeled}+{ds.n_test} "
            f"exceeds n_cases={ds.n_cases}",
            file=sys.stderr,
        )
        return EXIT_CONFIG

    out = Path(cfg.data_dir)
    # canonicalize through JSON so tuples compare equal to round-tripped lists
    meta = json.loads(json.dumps({"dataset": asdict(ds)}))
    if (out / phantoms.MANIFEST_NAME).exists():
        manifest = phantoms.load_manifest(out)
        if manifest.get("generator") == meta and not args.force:
            bad = phantoms.verify_checksums(out)
            if bad:
                print(f"error: checksum mismatch in {out}: {bad}", file=sys.stderr)
                return EXIT_DATA
            print(f"dataset already present and verified: {out}")
            return EXIT_OK
        if not args.force:
            print(
                f"error: {out} holds a dataset generated with a different "
                "config; pass --force to regenerate",
                file=sys.stderr,
            )
            return EXIT_DATA

    spec = phantoms.ObjectSpec(
        n_objects=tuple(ds.n_objects),
        radius=tuple(ds.radius),
        intensity=ds.intensity,
        noise_sigma=ds.noise_sigma,
    )
    cases = phantoms.generate_dataset(ds.n_cases, tuple(ds.shape), ds.seed, spec)
    split = phantoms.make_split(cases, ds.n_labeled, ds.n_unlabeled, ds.n_test, ds.seed)
    phantoms.save_split(split, out, generator_meta=meta)
    print(
        f"wrote {ds.n_labeled} labeled / {ds.n_unlabeled} unlabeled / "
        f"{ds.n_test} test cases to {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    cfg = _load_experiment(args)
    train_cfg = cfgmod.resolve_train_config(cfg)
    data_dir = Path(cfg.data_dir)
    if not (data_dir / phantoms.MANIFEST_NAME).exists():
        print(f"error: no dataset at {data_dir}", file=sys.stderr)
        return EXIT_DATA
    split = phantoms.load_split(data_dir)
    out = Path(cfg.out_dir)
    _write_run_manifest(out, cfg)
    try:
        trainer.run_training(train_cfg, split, out_dir=out, resume_from=args.resume)
    except trainer.TrainingAborted as err:
        print(f"error: {err} (run directory kept: {out})", file=sys.stderr)
        return EXIT_TRAINING
    print(f"trained {train_cfg.t_max} iterations -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _eval_window_stride(cfg, window, stride):
    win = tuple(window or cfg.eval_window or cfg.train.crop_shape)
    if stride:
        stp = tuple(stride)
    elif cfg.eval_stride:
        stp = tuple(cfg.eval_stride)
    else:
        stp = tuple(max(1, w // 2) for w in win)
    return win, stp


def cmd_evaluate(args):
    run_dir = Path(args.run)
    cfg_path = run_dir / "config.json"
    cfg = (
        cfgmod.from_json(cfgmod.ExperimentConfig, cfg_path.read_text())
        if cfg_path.exists()
        else cfgmod.ExperimentConfig()
    )
    data_dir = Path(args.data_dir or cfg.data_dir)
    ckpt_path = run_dir / (args.checkpoint or "ckpt_final.pt")
    if not ckpt_path.exists():
        print(f"error: missing checkpoint {ckpt_path}", file=sys.stderr)
        return EXIT_DATA
    if not (data_dir / phantoms.MANIFEST_NAME).exists():
        print(f"error: no dataset at {data_dir}", file=sys.stderr)
        return EXIT_DATA

    # only the student network is used at test time
    data = networks.load_checkpoint(ckpt_path)
    student, _ = networks.restore_model_pair(data)
    split = phantoms.load_split(data_dir)
    cases = split.labeled if args.split == "labeled" else split.test
    ids = split.labeled_ids if args.split == "labeled" else split.test_ids
    if not cases:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return EXIT_DATA
    window, stride = _eval_window_stride(cfg, args.window, args.stride)
    report = evaluation.evaluate_cases(student, cases, window, stride)
    summary = evaluation.write_report(report, run_dir / "eval", case_ids=ids)
    print(json.dumps({k: summary[k] for k in evaluation.REPORT_COLUMNS}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _variant_list(args):
    if args.variants:
        spec = json.loads(Path(args.variants).read_text())
        return [(v["name"], v.get("flags", {})) for v in spec]
    if args.preset == "dropout":
        return [(f"p{p:g}", {"dropout_p": p}) for p in DROPOUT_SWEEP]
    return list(COMPONENT_VARIANTS)


def run_ablation(cfg, variants, out_dir):
    """Trains and evaluates each variant; returns the result rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = phantoms.load_split(cfg.data_dir)
    window, stride = _eval_window_stride(cfg, None, None)
    rows = []
    for name, flags in variants:
        variant_cfg = replace(cfg, out_dir=str(out / name))
        for key, value in flags.items():
            setattr(variant_cfg, key, value)
        train_cfg = cfgmod.resolve_train_config(variant_cfg)
        run_dir = out / name
        _write_run_manifest(run_dir, variant_cfg, extra={"variant": name})
        try:
            state, _ = trainer.run_training(train_cfg, split, out_dir=run_dir)
            report = evaluation.evaluate_cases(state.student, split.test, window, stride)
            evaluation.write_report(report, run_dir / "eval", case_ids=split.test_ids)
            rows.append({"name": name, "failed": False, "report": report})
        except Exception as err:  # noqa: BLE001 - a failed variant is a table row
            rows.append({"name": name, "failed": True, "error": str(err)})
    return rows


def _render_table(rows, p_values):
    header = ["variant", *evaluation.REPORT_COLUMNS, "p-value vs full"]
    lines = ["  ".join(f"{h:>16}" for h in header)]
    for row in rows:
        if row["failed"]:
            cells = [row["name"], "failed", "-", "-", "-", "-"]
        else:
            r = row["report"]
            cells = [
                row["name"],
                f"{r.dice:.2f}", f"{r.jaccard:.2f}", f"{r.asd:.3f}", f"{r.hd95:.3f}",
                p_values.get(row["name"], "-"),
            ]
        lines.append("  ".join(f"{str(c):>16}" for c in cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    cfg = _load_experiment(args)
    variants = _variant_list(args)
    out = Path(cfg.out_dir)
    rows = run_ablation(cfg, variants, out)

    p_values = {}
    full = next((r for r in rows if r["name"] == "full" and not r["failed"]), None)
    if full is not None and len(rows) > 1:
        full_dice = [m.dice for m in full["report"].per_case]
        for row in rows:
            if row["failed"] or row["name"] == "full":
                continue
            try:
                p = evaluation.paired_t_test(
                    full_dice, [m.dice for m in row["report"].per_case]
                )
                p_values[row["name"]] = f"{p:.4g}"
            except ValueError:
                p_values[row["name"]] = "n/a"

    with open(out / "ablation.csv", "w", newline="") as fh:
        fh.write("variant,Dice[%],Jaccard[%],ASD[voxel],95HD[voxel],p_value_vs_full,failed\n")
        for row in rows:
            if row["failed"]:
                fh.write(f"{row['name']},,,,,,failed\n")
            else:
                r = row["report"]
                fh.write(
                    f"{row['name']},{r.dice},{r.jaccard},{r.asd},{r.hd95},"
                    f"{p_values.get(row['name'], '')},ok\n"
                )
    table = _render_table(rows, p_values)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK if all(not r["failed"] for r in rows) else EXIT_TRAINING


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="cdseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def _common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)

    gen = sub.add_parser("generate", help="write a phantom dataset directory")
    _common(gen)
    gen.add_argument("--n-cases", type=int, dest="n_cases")
    gen.add_argument("--n-labeled", type=int, dest="n_labeled")
    gen.add_argument("--n-unlabeled", type=int, dest="n_unlabeled")
    gen.add_argument("--n-test", type=int, dest="n_test")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train one configuration")
    _common(tr)
    tr.add_argument("--t-max", type=int, dest="t_max")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--disable-contrast", action="store_true", dest="disable_contrast")
    tr.add_argument("--disable-pd", action="store_true", dest="disable_pd")
    tr.add_argument("--disable-sdm-loss", action="store_true", dest="disable_sdm_loss")
    tr.add_argument("--disable-consistency", action="store_true", dest="disable_consistency")
    tr.add_argument("--disable-sdm", action="store_true", dest="disable_sdm")
    tr.add_argument("--dropout-p", type=float, dest="dropout_p")
    tr.add_argument("--pool-hw", type=int, dest="pool_hw")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="run sliding-window inference and metrics")
    ev.add_argument("--run", required=True, help="training run directory")
    ev.add_argument("--data-dir", dest="data_dir")
    ev.add_argument("--split", choices=("test", "labeled"), default="test")
    ev.add_argument("--checkpoint", help="checkpoint filename inside the run dir")
    ev.add_argument("--window", type=int, nargs=3)
    ev.add_argument("--stride", type=int, nargs=3)
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="train/evaluate a variant matrix")
    _common(ab)
    ab.add_argument("--t-max", type=int, dest="t_max")
    ab.add_argument("--preset", choices=("components", "dropout"), default="components")
    ab.add_argument("--variants", help="JSON file with [{name, flags}] entries")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.TrainingAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
