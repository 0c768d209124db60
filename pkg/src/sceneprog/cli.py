"""Command-line entry point for datasets, training, and reports.

Thread environment variables are exported before numpy is imported
anywhere, so every command handler imports the heavy modules lazily.
Each command writes its artifacts into a fresh directory named by the
resolved config hash and seed; reruns get an -rN suffix instead of
touching an existing directory.  Failures print one machine-readable
JSON object to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

_ENV_PREFIX = "SCENEPROG_"

_COMMANDS = (
    "gen-data",
    "exec",
    "train-pg",
    "train-ee",
    "finetune-joint",
    "pipeline",
    "eval",
    "gradcheck",
    "saliency",
    "report",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneprog",
        description="Question-to-program inference and neural program execution.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override; repeatable",
    )
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--threads", type=int, help="numpy thread cap")
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded numerics and zeroed wall times in logs",
    )
    common.add_argument("--out-dir", help="parent directory for run artifacts")

    sub.add_parser("gen-data", parents=[common], help="sample scenes and questions")

    p = sub.add_parser("exec", parents=[common], help="run a program on a scene")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--program", required=True, help="prefix tokens, space separated")

    sub.add_parser("train-pg", parents=[common], help="supervised program generator")
    sub.add_parser("train-ee", parents=[common], help="engine on ground-truth programs")

    p = sub.add_parser("finetune-joint", parents=[common], help="policy-gradient finetune")
    p.add_argument("--pg", required=True, help="generator checkpoint")
    p.add_argument("--ee", required=True, help="engine checkpoint")

    sub.add_parser("pipeline", parents=[common], help="three-phase schedule")

    p = sub.add_parser("eval", parents=[common], help="accuracy tables")
    p.add_argument("--pg", help="generator checkpoint; omit to use stored programs")
    p.add_argument("--ee", help="engine checkpoint")
    p.add_argument(
        "--oracle", action="store_true", help="execute symbolically instead of an engine"
    )
    p.add_argument("--split", default="val", choices=("train", "val", "test"))

    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")

    p = sub.add_parser("saliency", parents=[common], help="per-cell influence map")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--program", required=True, help="prefix tokens, space separated")
    p.add_argument("--ee", help="engine checkpoint; omit for a fresh engine")
    p.add_argument("--format", default="json", choices=("json", "pgm"))

    p = sub.add_parser("report", parents=[common], help="render run metrics as tables")
    p.add_argument("--run", required=True, help="run directory holding metrics.json")
    return parser


def _env_default(name: str):
    return os.environ.get(_ENV_PREFIX + name)


def _apply_env_defaults(args) -> None:
    if args.config is None:
        args.config = _env_default("CONFIG")
    if args.seed is None and _env_default("SEED") is not None:
        args.seed = int(_env_default("SEED"))
    if args.threads is None and _env_default("THREADS") is not None:
        args.threads = int(_env_default("THREADS"))
    if args.out_dir is None:
        args.out_dir = _env_default("OUT_DIR")
    if not args.deterministic and _env_default("DETERMINISTIC") in ("1", "true"):
        args.deterministic = True


def _set_thread_env(threads: int) -> None:
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(threads)


def _resolve_config(args):
    from .config import apply_override, default_config, load_config

    cfg = load_config(args.config) if args.config else default_config()
    for assignment in args.overrides:
        cfg = apply_override(cfg, assignment)
    if args.seed is not None:
        cfg = apply_override(cfg, f"seed={args.seed}")
    if args.threads is not None:
        cfg = apply_override(cfg, f"threads={args.threads}")
    if args.deterministic:
        cfg = apply_override(cfg, "deterministic=true")
    if args.out_dir is not None:
        cfg = apply_override(cfg, f"out_dir={args.out_dir}")
    if cfg.deterministic:
        cfg = apply_override(cfg, "threads=1")
    return cfg


def _run_dir(cfg, command: str) -> Path:
    from .config import config_hash

    base = Path(cfg.out_dir)
    base.mkdir(parents=True, exist_ok=True)
    stem = f"{command}-{config_hash(cfg)}-s{cfg.seed}"
    path = base / stem
    attempt = 1
    while path.exists():
        attempt += 1
        path = base / f"{stem}-r{attempt}"
    path.mkdir(parents=True)
    return path


def _write_config(cfg, run_dir: Path) -> None:
    from .config import config_to_dict

    with open(run_dir / "config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _dataset(cfg):
    import numpy as np

    from .templates import DatasetConfig, generate_dataset

    dcfg = DatasetConfig(
        n_scenes=cfg.data.n_scenes,
        questions_per_scene=cfg.data.questions_per_scene,
        condition=cfg.data.condition,
        train_frac=cfg.data.train_frac,
        val_frac=cfg.data.val_frac,
        answer_cap=cfg.data.answer_cap,
    )
    return generate_dataset(dcfg, np.random.default_rng(cfg.seed))


def _grid(cfg):
    from .executor import GridConfig

    return GridConfig(
        cells_x=cfg.model.cells,
        cells_y=cfg.model.cells,
        channels=cfg.model.channels,
        classifier_hidden=cfg.model.classifier_hidden,
    )


def _fresh_pg(cfg, dataset):
    import numpy as np

    from .seq2seq import ProgramGenerator, Seq2SeqConfig, Vocab

    questions = [list(r.question) for r in dataset.splits["train"]]
    scfg = Seq2SeqConfig(
        d_embed=cfg.model.d_embed,
        d_hidden=cfg.model.d_hidden,
        n_layers=cfg.model.n_layers,
        max_len=cfg.model.max_len,
    )
    return ProgramGenerator(
        Vocab.for_questions(questions), scfg, np.random.default_rng(cfg.seed)
    )


def _pg_hyper(cfg):
    from .seq2seq import SupervisedConfig

    return SupervisedConfig(
        lr=cfg.schedule.pg.lr,
        batch_size=cfg.schedule.pg.batch_size,
        max_epochs=cfg.schedule.pg.max_epochs,
        patience=cfg.schedule.pg.patience,
        seed=cfg.seed,
    )


def _ee_hyper(cfg):
    from .executor import EETrainConfig

    return EETrainConfig(
        lr=cfg.schedule.ee.lr,
        batch_size=cfg.schedule.ee.batch_size,
        max_epochs=cfg.schedule.ee.max_epochs,
        patience=cfg.schedule.ee.patience,
        seed=cfg.seed,
        weight_decay=cfg.schedule.ee.weight_decay,
        augment=cfg.schedule.ee.augment,
    )


def _joint_cfg(cfg):
    from .training import ReinforceConfig

    joint = cfg.schedule.joint
    return ReinforceConfig(
        steps=joint.steps,
        batch_size=joint.batch_size,
        lr=joint.lr,
        ee_lr=joint.ee_lr,
        baseline_decay=joint.baseline_decay,
        freeze_ee=joint.freeze_ee,
        clip_norm=joint.clip_norm or None,
        seed=cfg.seed,
    )


def _write_metrics(run_dir: Path, payload: dict) -> None:
    with open(run_dir / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_scene(path: str):
    from .scenes import scene_from_json

    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                return scene_from_json(line, config=None)
    raise ValueError(f"{path} holds no scene JSON")


# -- command handlers -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    from .scenes import save_scenes_jsonl
    from .templates import save_records_jsonl
    from .training import RunLog

    cfg = _resolve_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "gen-data")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    scenes = [dataset.scenes[k] for k in sorted(dataset.scenes)]
    save_scenes_jsonl(run_dir / "scenes.jsonl", scenes)
    counts = {}
    for name, records in dataset.splits.items():
        save_records_jsonl(run_dir / f"{name}.jsonl", records)
        counts[name] = len(records)
        log("gen_data", 0, name, "records", len(records))
    log.close()
    _write_metrics(run_dir, {"counts": counts, "n_scenes": len(scenes)})
    print(json.dumps({"run_dir": str(run_dir), "counts": counts}))
    return 0


def _cmd_exec(args) -> int:
    from .dsl import parse_prefix
    from .interpreter import execute

    scene = _load_scene(args.scene)
    print(execute(parse_prefix(args.program.split()), scene))
    return 0


def _cmd_train_pg(args) -> int:
    from .training import RunLog, supervision_pairs

    cfg = _resolve_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "train-pg")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    pg = _fresh_pg(cfg, dataset)
    train = supervision_pairs(dataset.splits["train"][: cfg.schedule.n_supervised])
    val = supervision_pairs(dataset.splits["val"])
    pg.train_supervised(train, val, _pg_hyper(cfg), log=log)
    em = pg.exact_match(val)
    log("train_pg", 0, "val", "exact_match", em)
    log.close()
    pg.save(run_dir / "pg.npz")
    _write_metrics(run_dir, {"val_exact_match": em, "n_supervised": len(train)})
    print(json.dumps({"run_dir": str(run_dir), "val_exact_match": em}))
    return 0


def _cmd_train_ee(args) -> int:
    import numpy as np

    from .executor import ExecutionEngine
    from .training import RunLog, gt_triples, qtype_mode_baseline

    cfg = _resolve_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "train-ee")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    ee = ExecutionEngine(_grid(cfg), rng=np.random.default_rng(cfg.seed))
    history = ee.train(
        gt_triples(dataset.splits["train"], dataset.scenes),
        gt_triples(dataset.splits["val"], dataset.scenes),
        _ee_hyper(cfg),
        log=log,
    )
    mode = qtype_mode_baseline(dataset.splits["val"], dataset.splits["val"])
    log.close()
    ee.save(run_dir / "ee.npz")
    payload = {
        "val_accuracy": history["best_acc"],
        "qtype_mode": mode.overall,
        "margin": history["best_acc"] - mode.overall,
    }
    _write_metrics(run_dir, payload)
    print(json.dumps({"run_dir": str(run_dir), **payload}))
    return 0


def _cmd_finetune_joint(args) -> int:
    from .executor import ExecutionEngine
    from .seq2seq import ProgramGenerator
    from .training import RunLog, evaluate, guard_programs, reinforce_finetune

    cfg = _resolve_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "finetune-joint")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    pg = ProgramGenerator.load(args.pg)
    ee = ExecutionEngine.load(args.ee)
    val = dataset.splits["val"]
    pre = evaluate(pg, ee, val, dataset.scenes)
    guarded, counter = guard_programs(dataset.splits["train"])
    reinforce_finetune(pg, ee, guarded, dataset.scenes, _joint_cfg(cfg), val_records=val, log=log)
    assert counter.count == 0, "finetuning read a ground-truth program"
    post = evaluate(pg, ee, val, dataset.scenes)
    log("finetune", cfg.schedule.joint.steps, "val", "accuracy", post.overall)
    log.close()
    pg.save(run_dir / "pg.npz")
    ee.save(run_dir / "ee.npz")
    payload = {"answer_acc_pre": pre.overall, "answer_acc_post": post.overall}
    _write_metrics(run_dir, payload)
    print(json.dumps({"run_dir": str(run_dir), **payload}))
    return 0


def _cmd_pipeline(args) -> int:
    import numpy as np

    from .executor import ExecutionEngine
    from .training import RunLog, ScheduleConfig, semi_supervised_pipeline

    cfg = _resolve_config(args)
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "pipeline")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    pg = _fresh_pg(cfg, dataset)
    ee = ExecutionEngine(_grid(cfg), rng=np.random.default_rng(cfg.seed))
    schedule = ScheduleConfig(
        n_supervised=cfg.schedule.n_supervised,
        pg_hyper=_pg_hyper(cfg),
        ee_hyper=_ee_hyper(cfg),
        joint=_joint_cfg(cfg),
    )
    result = semi_supervised_pipeline(pg, ee, dataset, schedule, log=log)
    log.close()
    pg.save(run_dir / "pg.npz")
    ee.save(run_dir / "ee.npz")
    payload = {
        "program_em": result["program_em"],
        "answer_acc_pre": result["answer_acc_pre"],
        "answer_acc_post": result["answer_acc_post"],
    }
    _write_metrics(run_dir, payload)
    print(json.dumps({"run_dir": str(run_dir), **payload}))
    return 0


def _cmd_eval(args) -> int:
    from .executor import ExecutionEngine
    from .seq2seq import ProgramGenerator
    from .training import RunLog, evaluate, qtype_mode_baseline

    cfg = _resolve_config(args)
    if not args.oracle and not args.ee:
        raise ValueError("eval needs --ee CHECKPOINT or --oracle")
    dataset = _dataset(cfg)
    run_dir = _run_dir(cfg, "eval")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    records = dataset.splits[args.split]
    pg = ProgramGenerator.load(args.pg) if args.pg else None
    executor = "oracle" if args.oracle else ExecutionEngine.load(args.ee)
    report = evaluate(pg, executor, records, dataset.scenes)
    mode = qtype_mode_baseline(records, records)
    for qtype, acc in report.by_qtype.items():
        log("eval", 0, args.split, f"accuracy/{qtype}", acc)
    log("eval", 0, args.split, "accuracy", report.overall)
    log.close()
    payload = {
        "split": args.split,
        "overall": report.overall,
        "by_qtype": report.by_qtype,
        "counts": report.counts,
        "qtype_mode": mode.overall,
    }
    if report.program_em is not None:
        payload["program_em"] = report.program_em
    _write_metrics(run_dir, payload)
    print(json.dumps({"run_dir": str(run_dir), "overall": report.overall}))
    return 0


def _cmd_gradcheck(args) -> int:
    from .diagnostics import gradcheck_suite

    results = gradcheck_suite()
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:24s} {r.worst:.3e}  tol {r.tol:g}  {status}")
    if failed:
        print(
            json.dumps({"error": "GradCheckError", "failed": [r.name for r in failed]}),
            file=sys.stderr,
        )
        return 1
    return 0


def _cmd_saliency(args) -> int:
    import numpy as np

    from .dsl import parse_prefix
    from .executor import ExecutionEngine
    from .training import RunLog

    cfg = _resolve_config(args)
    scene = _load_scene(args.scene)
    program = parse_prefix(args.program.split())
    if args.ee:
        ee = ExecutionEngine.load(args.ee)
    else:
        ee = ExecutionEngine(_grid(cfg), rng=np.random.default_rng(cfg.seed))
    grid_map = ee.saliency(scene, program)
    run_dir = _run_dir(cfg, "saliency")
    _write_config(cfg, run_dir)
    log = RunLog(run_dir / "log.jsonl", deterministic=cfg.deterministic)
    log("saliency", 0, "n/a", "max", float(grid_map.max()))
    log.close()
    if args.format == "json":
        out = run_dir / "saliency.json"
        with open(out, "w") as fh:
            json.dump([[float(v) for v in row] for row in grid_map], fh)
            fh.write("\n")
    else:
        out = run_dir / "saliency.pgm"
        top = float(grid_map.max()) or 1.0
        scaled = np.round(grid_map / top * 255).astype(int)
        lines = [f"P2 {grid_map.shape[1]} {grid_map.shape[0]} 255"]
        lines += [" ".join(str(v) for v in row) for row in scaled]
        with open(out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(json.dumps({"run_dir": str(run_dir), "out": str(out)}))
    return 0


# -- report rendering -------------------------------------------------------


def _table_md(headers: list[str], rows: list[list]) -> str:
    out = ["| " + " | ".join(headers) + " |"]
    out.append("|" + "|".join(" --- " for _ in headers) + "|")
    for row in rows:
        out.append("| " + " | ".join(str(c) for c in row) + " |")
    return "\n".join(out)


def _fmt(x) -> str:
    return f"{x:.3f}" if isinstance(x, float) else str(x)


def _report_tables(metrics: dict) -> list[tuple[str, list[str], list[list]]]:
    tables = []
    if "by_qtype" in metrics:
        rows = [
            [q, _fmt(metrics["by_qtype"][q]), metrics.get("counts", {}).get(q, "")]
            for q in metrics["by_qtype"]
        ]
        rows.append(["overall", _fmt(metrics["overall"]), sum(metrics.get("counts", {}).values())])
        tables.append(("per_type", ["question_type", "accuracy", "n"], rows))
    if "ladder" in metrics:
        headers = ["n_programs", "program_acc", "answer_acc_pre", "answer_acc_post"]
        rows = [[_fmt(row.get(h, "")) for h in headers] for row in metrics["ladder"]]
        tables.append(("ladder", headers, rows))
    if "train_a_eval_a" in metrics:
        rows = [
            ["train A", _fmt(metrics["train_a_eval_a"]), _fmt(metrics["train_a_eval_b"])],
            ["finetune B", _fmt(metrics["finetune_b_eval_a"]), _fmt(metrics["finetune_b_eval_b"])],
        ]
        tables.append(("cogent", ["phase", "eval A", "eval B"], rows))
    if "short_eval_short" in metrics:
        rows = [
            ["train short", _fmt(metrics["short_eval_short"]), _fmt(metrics["short_eval_long"])],
            ["finetune both", _fmt(metrics["mixed_eval_short"]), _fmt(metrics["mixed_eval_long"])],
        ]
        tables.append(("short_long", ["phase", "eval short", "eval long"], rows))
    return tables


def _cmd_report(args) -> int:
    cfg = _resolve_config(args)
    source = Path(args.run) / "metrics.json"
    if not source.exists():
        raise FileNotFoundError(f"{source} not found")
    with open(source) as fh:
        metrics = json.load(fh)
    tables = _report_tables(metrics)
    if not tables:
        raise ValueError(f"{source} holds no reportable tables")
    run_dir = _run_dir(cfg, "report")
    _write_config(cfg, run_dir)
    chunks = []
    for name, headers, rows in tables:
        with open(run_dir / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            writer.writerows(rows)
        chunks.append(f"## {name}\n\n" + _table_md(headers, rows))
    text = "\n\n".join(chunks) + "\n"
    with open(run_dir / "report.md", "w") as fh:
        fh.write(text)
    print(text)
    print(json.dumps({"run_dir": str(run_dir)}))
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "exec": _cmd_exec,
    "train-pg": _cmd_train_pg,
    "train-ee": _cmd_train_ee,
    "finetune-joint": _cmd_finetune_joint,
    "pipeline": _cmd_pipeline,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "saliency": _cmd_saliency,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_env_defaults(args)
    threads = 1 if args.deterministic else (args.threads or 1)
    _set_thread_env(threads)
    from .config import ConfigError

    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFoundError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
