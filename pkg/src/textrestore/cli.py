"""Single entry-point command surface.

Subcommands: ``datagen`` (synthetic corpus), ``train`` (stages 0/1/2),
``restore`` (guided restoration), ``eval`` (metric reports with figures),
and ``rerun`` (re-execute any run from its manifest).

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every run directory gets the fixed layout config.json / manifest.json /
trace/ / outputs/ / reports/; manifests carry the resolved config, seeds,
and checkpoint hashes, so any command is reproducible from its manifest
alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, file_sha256
from .config import ConfigError, RunConfig, config_from_dict, config_hash, config_to_dict, load_config
from .datagen import DatagenConfig, build_corpus, load_manifest
from .evaluation import (EvalReport, MissingOutputsError, build_lexicon, evaluate_corpus,
                         oracle_predictions)
from .imutil import load_image, save_image
from .instances import AnnotationError, load_annotations
from .parallel import parallel_map
from .pipeline import (load_bundle, restore, restore_with_fixed_guidance, spot_image,
                       train_stage0, train_stage1, train_stage2)
from .report import (render_markdown_table, save_comparison_grid, save_loss_figure,
                     save_metrics_figure, write_csv_table, write_loss_csv)
from .vlm import RemoteVlmBackend, ScriptedVlmBackend, VlmAdapter

RUN_FORMAT = "textrestore-run"


class UsageError(ValueError):
    """Bad invocation that argparse cannot catch on its own."""


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_manifest(run_dir: Path, command: str, params: dict, cfg: RunConfig,
                    checkpoints: dict[str, str | None] | None = None) -> None:
    _write_json(run_dir / "config.json", config_to_dict(cfg))
    _write_json(run_dir / "manifest.json", {
        "format": RUN_FORMAT,
        "version": 1,
        "command": command,
        "params": params,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "checkpoints": checkpoints or {},
    })


def _resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# ---------------------------------------------------------------------------
# datagen


def run_datagen(params: dict, cfg: RunConfig) -> int:
    dg = DatagenConfig(**{**config_to_dict(cfg)["datagen"]})
    manifest = build_corpus(
        n=params["n"], levels=params["levels"], out_dir=params["out"],
        config=dg, seed=params["seed"], jobs=params.get("jobs", 1),
    )
    run_dir = Path(params["out"])
    _write_manifest(run_dir, "datagen", params, cfg)
    print(manifest)
    return 0


def cmd_datagen(args) -> int:
    cfg = _resolve_config(args)
    levels = [int(x) for x in args.levels.split(",") if x]
    if not levels or any(lv not in (1, 2, 3) for lv in levels):
        raise UsageError(f"--levels must be a subset of 1,2,3, got {args.levels!r}")
    params = {
        "n": args.n, "levels": levels, "out": str(Path(args.out).resolve()),
        "seed": args.seed if args.seed is not None else cfg.datagen.seed,
        "jobs": args.jobs,
    }
    return run_datagen(params, cfg)


# ---------------------------------------------------------------------------
# train


def run_train(params: dict, cfg: RunConfig) -> int:
    run_dir = Path(params["run_dir"])
    stage = params["stage"]
    ckpt_dir = run_dir / "checkpoints"
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    corpus = params["corpus"]
    if stage == 0:
        out = ckpt_dir / "codec.pt"
        curve = train_stage0(corpus, cfg, out)
    elif stage == 1:
        codec = params["codec"] or str(ckpt_dir / "codec.pt")
        if not Path(codec).exists():
            raise UsageError(f"stage 1 requires the stage-0 codec checkpoint (missing: {codec})")
        out = ckpt_dir / "backbone.pt"
        curve = train_stage1(corpus, cfg, codec, out)
    else:
        codec = params["codec"] or str(ckpt_dir / "codec.pt")
        backbone = params["backbone"] or str(ckpt_dir / "backbone.pt")
        for name, path in (("stage-0 codec", codec), ("stage-1 backbone", backbone)):
            if not Path(path).exists():
                raise UsageError(f"stage 2 requires the {name} checkpoint (missing: {path})")
        out = ckpt_dir / "tsm.pt"
        curve = train_stage2(corpus, cfg, codec, backbone, out)
    write_loss_csv(curve, reports / f"loss_stage{stage}.csv")
    save_loss_figure(curve, reports / f"loss_stage{stage}.png", title=f"stage {stage} loss")
    hashes = {p.stem: file_sha256(p) for p in sorted(ckpt_dir.glob("*.pt"))}
    _write_manifest(run_dir, "train", params, cfg, checkpoints=hashes)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None:
        setattr(cfg.train, f"stage{args.stage}_epochs", args.epochs)
    params = {
        "stage": args.stage, "corpus": str(Path(args.corpus).resolve()),
        "run_dir": str(Path(args.run_dir).resolve()),
        "codec": str(Path(args.codec).resolve()) if args.codec else None,
        "backbone": str(Path(args.backbone).resolve()) if args.backbone else None,
    }
    return run_train(params, cfg)


# ---------------------------------------------------------------------------
# restore


def _vlm_adapter(params: dict, cfg: RunConfig) -> VlmAdapter:
    fixture = params.get("vlm_fixture")
    endpoint = params.get("vlm_endpoint") or os.environ.get("TEXTRESTORE_VLM_ENDPOINT", "")
    if fixture:
        backend = ScriptedVlmBackend.from_file(fixture)
    elif endpoint:
        backend = RemoteVlmBackend(endpoint, timeout_s=cfg.vlm.timeout_s)
    else:
        raise UsageError("guidance mode needs --vlm-fixture or --vlm-endpoint "
                         "(or TEXTRESTORE_VLM_ENDPOINT)")
    return VlmAdapter(backend, cfg.vlm)


def _restore_inputs(params: dict) -> list[tuple[str, Path, Path | None]]:
    """(image_id, lq_path, hq_path or None) triples."""
    if params.get("input"):
        p = Path(params["input"])
        return [(p.stem, p, None)]
    manifest_path = Path(params["corpus"])
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    level = str(params["level"])
    triples = []
    for rec in manifest["records"]:
        triples.append((rec["id"], root / rec["lq"][level], root / rec["hq"]))
    limit = params.get("limit")
    return triples[: limit] if limit else triples


def run_restore(params: dict, cfg: RunConfig) -> int:
    run_dir = Path(params["run_dir"])
    outputs = run_dir / "outputs"
    trace_dir = run_dir / "trace"
    reports = run_dir / "reports"
    outputs.mkdir(parents=True, exist_ok=True)
    guidance = params["guidance"]
    bundle = load_bundle(params["codec"], backbone_path=params["backbone"],
                         tsm_path=params.get("tsm"))
    triples = _restore_inputs(params)
    corr = params.get("correct_at")
    if corr is None:
        corr = list(cfg.vlm.correction_steps)

    def one(triple) -> None:
        image_id, lq_path, hq_path = triple
        lq = load_image(lq_path)
        if guidance.startswith("fixed:") or guidance == "null":
            text = "" if guidance == "null" else guidance[len("fixed:"):]
            restored = restore_with_fixed_guidance(lq, text, bundle,
                                                   image_id=image_id, seed=cfg.seed)
        else:
            adapter = _vlm_adapter(params, cfg)
            steps = corr if guidance == "vlm+tsm" else []
            ocr_provider = None
            if bundle.spotter is None:
                ocr_provider = lambda state, k: ""  # noqa: E731 - no spotting head loaded
            restored, trace = restore(
                lq, bundle, adapter, image_id=image_id, seed=cfg.seed,
                correction_steps=steps, ocr_provider=ocr_provider,
                tsm_every_step=params.get("tsm_every_step", True),
            )
            trace_dir.mkdir(parents=True, exist_ok=True)
            trace.save(trace_dir / f"{image_id}.json")
            (trace_dir / f"{image_id}.txt").write_text("\n".join(trace.render_lines()) + "\n")
        save_image(outputs / f"{image_id}.png", restored)
        if params.get("grid"):
            reports.mkdir(parents=True, exist_ok=True)
            hq = load_image(hq_path) if hq_path else None
            save_comparison_grid(reports / f"grid_{image_id}.png", lq, restored, hq,
                                 title=image_id)

    parallel_map(one, triples, params.get("jobs", 1))
    hashes = {k: (file_sha256(params[k]) if params.get(k) else None)
              for k in ("codec", "backbone", "tsm")}
    _write_manifest(run_dir, "restore", params, cfg, checkpoints=hashes)
    print(outputs)
    return 0


def cmd_restore(args) -> int:
    cfg = _resolve_config(args)
    if bool(args.input) == bool(args.corpus):
        raise UsageError("exactly one of --input or --corpus is required")
    if args.corpus and args.level is None:
        raise UsageError("--corpus needs --level")
    mode = args.guidance
    if mode not in ("vlm", "vlm+tsm", "null") and not mode.startswith("fixed:"):
        raise UsageError(f"unknown guidance mode {mode!r}")
    correct_at = None
    if args.correct_at is not None:
        correct_at = [int(x) for x in args.correct_at.split(",") if x]
    params = {
        "input": str(Path(args.input).resolve()) if args.input else None,
        "corpus": str(Path(args.corpus).resolve()) if args.corpus else None,
        "level": args.level, "limit": args.limit,
        "run_dir": str(Path(args.run_dir).resolve()),
        "codec": str(Path(args.codec).resolve()),
        "backbone": str(Path(args.backbone).resolve()),
        "tsm": str(Path(args.tsm).resolve()) if args.tsm else None,
        "guidance": mode, "correct_at": correct_at,
        "vlm_fixture": str(Path(args.vlm_fixture).resolve()) if args.vlm_fixture else None,
        "vlm_endpoint": args.vlm_endpoint,
        "grid": args.grid, "jobs": args.jobs,
    }
    return run_restore(params, cfg)


# ---------------------------------------------------------------------------
# eval


def run_eval(params: dict, cfg: RunConfig) -> int:
    manifest_path = Path(params["corpus"])
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    level = str(params["level"])
    annotations = load_annotations(root / "annotations.json")
    by_id = {rec["id"]: rec for rec in manifest["records"]}
    lexicon = None
    if params.get("lexicon"):
        lexicon = [w.strip() for w in Path(params["lexicon"]).read_text().splitlines() if w.strip()]
    else:
        lexicon = build_lexicon(annotations)

    scorer_kind = params.get("scorer", "oracle")
    bundle = None
    if scorer_kind == "tsm":
        for key in ("codec", "backbone", "tsm"):
            if not params.get(key):
                raise UsageError(f"--scorer tsm requires --{key}")
        bundle = load_bundle(params["codec"], backbone_path=params["backbone"],
                             tsm_path=params["tsm"])

    def score(image: np.ndarray, gts) -> list:
        if scorer_kind == "oracle":
            return oracle_predictions(image, gts)
        return spot_image(image, bundle).instances

    rows: dict[str, EvalReport] = {}
    jobs = params.get("jobs", 1)

    def eval_row(images_for: dict[str, Path]) -> EvalReport:
        missing = [rid for rid in by_id if rid not in images_for or not images_for[rid].exists()]
        if missing:
            raise MissingOutputsError(missing)
        gts_by_image = {r.image: r.instances for r in annotations}

        def load_one(rid):
            rec = by_id[rid]
            img = load_image(images_for[rid])
            ref = load_image(root / rec["hq"])
            preds = score(img, gts_by_image[rec["hq"]])
            return rec["hq"], preds, (img, ref)

        loaded = parallel_map(load_one, sorted(by_id), jobs)
        outputs = {key: preds for key, preds, _ in loaded}
        images = {key: pair for key, _, pair in loaded}
        return evaluate_corpus(outputs, annotations, lexicon=lexicon, images=images,
                               vlm_cfg=cfg.vlm)

    if params.get("baseline_hq"):
        rows["HQ (GT)"] = eval_row({rid: root / rec["hq"] for rid, rec in by_id.items()})
    if params.get("baseline_lq"):
        rows[f"LQ (Lv{level})"] = eval_row(
            {rid: root / rec["lq"][level] for rid, rec in by_id.items()})
    for name, out_dir in params.get("restored", []):
        rows[name] = eval_row({rid: Path(out_dir) / f"{rid}.png" for rid in by_id})
    if not rows:
        raise UsageError("nothing to evaluate: pass --restored and/or --baseline-lq/--baseline-hq")

    run_dir = Path(params["run_dir"])
    reports = run_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    _write_json(reports / "report.json", {name: rep.to_dict() for name, rep in rows.items()})
    md = render_markdown_table(rows)
    (reports / "report.md").write_text(md)
    write_csv_table(rows, reports / "report.csv")
    save_metrics_figure(rows, reports / "metrics.png")
    _write_manifest(run_dir, "eval", params, cfg)
    if params.get("table"):
        print(md, end="")
    else:
        print(reports / "report.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    restored = []
    for item in args.restored or []:
        if "=" in item:
            name, d = item.split("=", 1)
        else:
            name, d = Path(item).parent.name or "restored", item
        restored.append([name, str(Path(d).resolve())])
    params = {
        "corpus": str(Path(args.corpus).resolve()), "level": args.level,
        "restored": restored, "baseline_lq": args.baseline_lq,
        "baseline_hq": args.baseline_hq,
        "scorer": args.scorer,
        "codec": str(Path(args.codec).resolve()) if args.codec else None,
        "backbone": str(Path(args.backbone).resolve()) if args.backbone else None,
        "tsm": str(Path(args.tsm).resolve()) if args.tsm else None,
        "lexicon": str(Path(args.lexicon).resolve()) if args.lexicon else None,
        "run_dir": str(Path(args.run_dir).resolve()),
        "table": args.table, "jobs": args.jobs,
    }
    return run_eval(params, cfg)


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("format") != RUN_FORMAT:
        raise UsageError(f"{args.manifest} is not a {RUN_FORMAT} manifest")
    cfg = config_from_dict(manifest["config"])
    command = manifest["command"]
    params = manifest["params"]
    runner = {"datagen": run_datagen, "train": run_train,
              "restore": run_restore, "eval": run_eval}.get(command)
    if runner is None:
        raise UsageError(f"manifest command {command!r} is not rerunnable")
    if command == "datagen":
        out = Path(params["out"])
        if args.out:
            params = {**params, "out": str(Path(args.out).resolve())}
        elif out.exists():
            raise UsageError(f"datagen output {out} exists; pass --out to rerun elsewhere")
    elif args.out:
        params = {**params, "run_dir": str(Path(args.out).resolve())}
    return runner(params, cfg)


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON/YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (flags win over the file)")
    p.add_argument("--seed", type=int, help="run seed override")
    p.add_argument("--jobs", type=int, default=1, help="parallel per-image workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textrestore", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="build a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--levels", default="1,2,3")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--corpus", required=True, help="corpus manifest.json")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--codec", help="stage-0 checkpoint (stages 1-2)")
    p.add_argument("--backbone", help="stage-1 checkpoint (stage 2)")
    p.add_argument("--epochs", type=int, help="override the stage's epoch count")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore LQ images")
    p.add_argument("--input", help="single LQ image file")
    p.add_argument("--corpus", help="corpus manifest.json")
    p.add_argument("--level", type=int, choices=(1, 2, 3))
    p.add_argument("--limit", type=int)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--tsm")
    p.add_argument("--guidance", default="vlm+tsm",
                   help="vlm | vlm+tsm | fixed:<text> | null")
    p.add_argument("--correct-at", help="comma-separated correction iterations")
    p.add_argument("--vlm-fixture", help="scripted VLM fixture JSON")
    p.add_argument("--vlm-endpoint", help="remote VLM endpoint URL")
    p.add_argument("--grid", action="store_true",
                   help="emit side-by-side LQ/restored/GT grids")
    _add_common(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="score outputs against annotations")
    p.add_argument("--corpus", required=True)
    p.add_argument("--level", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--restored", action="append", metavar="NAME=DIR")
    p.add_argument("--baseline-lq", action="store_true")
    p.add_argument("--baseline-hq", action="store_true")
    p.add_argument("--scorer", choices=("oracle", "tsm"), default="oracle")
    p.add_argument("--codec")
    p.add_argument("--backbone")
    p.add_argument("--tsm")
    p.add_argument("--lexicon", help="lexicon file (default: built from GT)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--table", action="store_true", help="print the Markdown row block")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="redirect the run directory")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, AnnotationError, CheckpointError, FileExistsError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MissingOutputsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failure boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
