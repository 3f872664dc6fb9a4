"""Command-line entry point: one subcommand per pipeline stage.

Paths default to files inside ``--out``; environment variables
``SPIROEMBED_<NAME>`` override those defaults and explicit flags override
both. Failures exit nonzero with a one-line JSON record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import artifacts
from .byol import EncoderCheckpoint, embed, pretrain
from .cohort import SubjectRecord, cohort_rows, read_cohort_csv
from .config import RunConfig, dump_config, load_config
from .evaluation import characteristics_csv_rows, characteristics_table
from .exceptions import ValidationError
from .gbdt import tree_shap
from .pipeline import (
    ABLATIONS,
    EnsembleBundle,
    SealedTest,
    evaluate_ensemble,
    fit_experiment,
    run_ablation,
    split_for,
)
from .spiro import blows_to_rows, curves_to_rows, read_blows_csv, read_curves_csv, select_first_valid
from .synth import generate_cohort

log = logging.getLogger("spiroembed")

# subcommand input name -> default file inside --out
DEFAULT_FILES = {
    "blows": "blows.csv",
    "cohort": "cohort.csv",
    "curves": "curves.csv",
    "encoder": "encoder.ckpt",
    "ensemble": "ensemble",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message, self.prog)
        sys.exit(2)


def _emit_error(kind: str, message: str, command: str | None) -> None:
    record = {"error": kind, "message": message, "command": command}
    sys.stderr.write(json.dumps(record) + "\n")


def _path(args, name: str) -> Path:
    explicit = getattr(args, name, None)
    if explicit:
        return Path(explicit)
    env = os.environ.get(f"SPIROEMBED_{name.upper()}")
    if env:
        return Path(env)
    return args.out_dir / DEFAULT_FILES[name]


def _meta(cfg: RunConfig, kind: str, **extra) -> dict:
    return artifacts.artifact_meta(cfg.config_hash(), cfg.seed, kind, **extra)


def _load_records(args, cfg: RunConfig) -> list[SubjectRecord]:
    curves_path = _path(args, "curves")
    artifacts.read_csv_meta(curves_path, kind="curves")
    curves = {c.subject_id: c for c in read_curves_csv(curves_path)}
    cohort_path = _path(args, "cohort")
    artifacts.read_csv_meta(cohort_path, required=False)
    records = read_cohort_csv(cohort_path, curves, cfg.thresholds.rvef, cfg.thresholds.lvef)
    if not records:
        raise ValidationError("no cohort subjects have a curve")
    log.info("loaded %d subjects with curves", len(records))
    return records


# --- subcommands -----------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> dict:
    records = generate_cohort(cfg.cohort_config())
    header, rows = cohort_rows(records)
    cohort = artifacts.write_csv(_path(args, "cohort"), header, rows, _meta(cfg, "cohort"))
    header, rows = blows_to_rows([r.blow for r in records])
    blows = artifacts.write_csv(_path(args, "blows"), header, rows, _meta(cfg, "blows"))
    return {"cohort": str(cohort), "blows": str(blows), "n_subjects": len(records)}


def cmd_preprocess(args, cfg: RunConfig) -> dict:
    blows_path = _path(args, "blows")
    artifacts.read_csv_meta(blows_path, required=False)
    curves, rejected = select_first_valid(read_blows_csv(blows_path), cfg.blow_criteria())
    header, rows = curves_to_rows(curves)
    out = artifacts.write_csv(_path(args, "curves"), header, rows, _meta(cfg, "curves"))
    rej = artifacts.write_csv(
        args.out_dir / "rejected.csv",
        ["subject_id", "reason"],
        sorted(rejected.items()),
        _meta(cfg, "rejected"),
    )
    return {"curves": str(out), "n_curves": len(curves), "rejected": str(rej), "n_rejected": len(rejected)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    pcfg = cfg.pipeline_config()
    records = _load_records(args, cfg)
    train, val, _ = split_for(records, pcfg)
    ckpt = pretrain([r.curve for r in list(train) + list(val)], pcfg.slse)
    path = _path(args, "encoder")
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, {"config_hash": cfg.config_hash(), "run_seed": cfg.seed})
    log_path = artifacts.write_csv(
        args.out_dir / "pretrain_log.csv",
        ["step", "loss"],
        [[i, repr(loss)] for i, loss in enumerate(ckpt.losses)],
        _meta(cfg, "pretrain_log"),
    )
    return {"encoder": str(path), "log": str(log_path), "final_loss": ckpt.losses[-1]}


def cmd_embed(args, cfg: RunConfig) -> dict:
    ckpt = EncoderCheckpoint.load(_path(args, "encoder"))
    curves_path = _path(args, "curves")
    artifacts.read_csv_meta(curves_path, kind="curves")
    curves = read_curves_csv(curves_path)
    z = embed(ckpt, curves)
    header = ["subject_id"] + [f"z_{i}" for i in range(z.shape[1])]
    rows = [[c.subject_id] + [repr(float(v)) for v in row] for c, row in zip(curves, z)]
    out = artifacts.write_csv(args.out_dir / "embeddings.csv", header, rows, _meta(cfg, "embeddings"))
    return {"embeddings": str(out), "n": len(curves), "dim": int(z.shape[1])}


def _save_ensemble(cfg, ensemble: EnsembleBundle, test: SealedTest, path: Path) -> None:
    ensemble.save(
        path,
        {"config_hash": cfg.config_hash(), "seed": cfg.seed, "test_subject_ids": test.subject_ids},
    )


def cmd_train(args, cfg: RunConfig) -> dict:
    pcfg = cfg.pipeline_config()
    records = _load_records(args, cfg)
    train, val, test = split_for(records, pcfg)
    encoder = EncoderCheckpoint.load(_path(args, "encoder"))
    ensemble = fit_experiment("full", train, val, pcfg, encoder)
    path = _path(args, "ensemble")
    _save_ensemble(cfg, ensemble, test, path)
    return {"ensemble": str(path), "val_auroc": [b.val_auroc for b in ensemble.bundles]}


def _manifest(path: Path) -> dict:
    return json.loads((path / "manifest.json").read_text())


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    path = _path(args, "ensemble")
    ensemble = EnsembleBundle.load(path)
    manifest = _manifest(path)
    records = {r.subject_id: r for r in _load_records(args, cfg)}
    missing = [s for s in manifest["test_subject_ids"] if s not in records]
    if missing:
        raise ValidationError(f"{len(missing)} test subjects are absent from the cohort, e.g. {missing[0]}")
    test = [records[s] for s in manifest["test_subject_ids"]]
    meta = _meta(cfg, "eval_report", model_config_hash=manifest.get("config_hash"), model_seed=manifest.get("seed"))
    report = evaluate_ensemble(ensemble, SealedTest(test), metadata={"model_config_hash": manifest.get("config_hash"), "model_seed": manifest.get("seed")})
    out_json = artifacts.write_json(args.out_dir / "report.json", report.to_dict(), meta)
    header, rows = report.to_rows()
    out_csv = artifacts.write_csv(args.out_dir / "report.csv", header, [[_cell(v) for v in r] for r in rows], meta)
    table = characteristics_table(list(records.values()))
    labels = [r.label_rhf for r in records.values()]
    header, rows = characteristics_csv_rows(table, sum(labels), len(labels) - sum(labels))
    out_tab = artifacts.write_csv(args.out_dir / "characteristics.csv", header, rows, _meta(cfg, "characteristics"))
    return {"auroc": report.auroc, "report": str(out_json), "csv": str(out_csv), "characteristics": str(out_tab)}


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def cmd_explain(args, cfg: RunConfig) -> dict:
    path = _path(args, "ensemble")
    ensemble = EnsembleBundle.load(path)
    if not 0 <= args.bundle < len(ensemble.bundles):
        raise ValidationError(f"bundle index {args.bundle} out of range")
    bundle = ensemble.bundles[args.bundle]
    if bundle.model is None:
        raise ValidationError("the selected bundle has no tree model to explain")
    records = _load_records(args, cfg)
    if args.subjects:
        wanted = set(args.subjects.split(","))
        records = [r for r in records if r.subject_id in wanted]
    emb = ensemble.embeddings(records)
    X = bundle.features(emb, [r.demo for r in records])
    rows = []
    for rec, x in zip(records, X):
        att = tree_shap(bundle.model, x)
        rows.append([rec.subject_id, "base_value", repr(att.base_value)])
        rows.extend([rec.subject_id, name, repr(float(p))] for name, p in zip(att.feature_names, att.phi))
    meta = _meta(cfg, "attributions", bundle=args.bundle)
    out = artifacts.write_csv(args.out_dir / "attributions.csv", ["subject_id", "feature", "phi"], rows, meta)
    return {"attributions": str(out), "n_subjects": len(records)}


def cmd_ablate(args, cfg: RunConfig) -> dict:
    pcfg = cfg.pipeline_config()
    records = _load_records(args, cfg)
    encoder_path = _path(args, "encoder")
    encoder = EncoderCheckpoint.load(encoder_path) if encoder_path.exists() else None
    names = args.only.split(",") if args.only else list(ABLATIONS)
    summary = []
    for name in names:
        result = run_ablation(name, records, pcfg, encoder)
        artifacts.write_json(args.out_dir / "ablations" / f"{name}.json", result, _meta(cfg, "ablation"))
        summary.append([name, repr(result["test_auroc"]), result["n_bundles"]])
        log.info("%s test AUROC %.4f", name, result["test_auroc"])
    out = artifacts.write_csv(
        args.out_dir / "ablations" / "summary.csv", ["config", "test_auroc", "n_bundles"], summary, _meta(cfg, "ablations")
    )
    return {"summary": str(out), "aurocs": {row[0]: float(row[1]) for row in summary}}


def cmd_config(args, cfg: RunConfig) -> dict:
    sys.stdout.write(dump_config(cfg))
    return {}


COMMANDS = {
    "synth": (cmd_synth, [], "generate a synthetic cohort and its blows"),
    "preprocess": (cmd_preprocess, ["blows", "curves"], "blows CSV to flow-volume curve CSV"),
    "pretrain": (cmd_pretrain, ["cohort", "curves", "encoder"], "self-supervised encoder pretraining"),
    "embed": (cmd_embed, ["curves", "encoder"], "embed curves with a pretrained encoder"),
    "train": (cmd_train, ["cohort", "curves", "encoder", "ensemble"], "train the downstream ensemble"),
    "evaluate": (cmd_evaluate, ["cohort", "curves", "ensemble"], "evaluate on the held-out split"),
    "explain": (cmd_explain, ["cohort", "curves", "ensemble"], "per-subject Shapley attributions"),
    "ablate": (cmd_ablate, ["cohort", "curves", "encoder"], "run the four ablation configurations"),
    "config": (cmd_config, [], "print the effective configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spiroembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, inputs, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--out", help="output directory (default: paths.out from the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        for item in inputs:
            p.add_argument(f"--{item}", help=f"{item} path (default: <out>/{DEFAULT_FILES[item]})")
        if name == "explain":
            p.add_argument("--bundle", type=int, default=0, help="ensemble member to explain (0 = best)")
            p.add_argument("--subjects", help="comma-separated subject ids (default: all)")
        if name == "ablate":
            p.add_argument("--only", help="comma-separated subset of " + ",".join(ABLATIONS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = load_config(args.config, overrides)
        out = args.out or os.environ.get("SPIROEMBED_OUT") or cfg.paths.out
        args.out_dir = Path(out)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command][0](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON record
        _emit_error(type(exc).__name__, str(exc), args.command)
        if getattr(args, "verbose", False):
            raise
        return 1
    if result:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
