"""Command-line entry point: ``skd-cil <subcommand> [options]``.

Subcommands communicate only through files in the output directory:
``config.toml``, ``base.pt``, ``delegator*.pt``, ``model_task*.pt``, trace CSVs
and ``report.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .cil import CilTrainConfig, gamma_for_task, run_sequence, train_cil_task, train_classifier
from .config import FLAG_NAMES, PRESETS, ExperimentConfig
from .data import DataSource, DatasetError, build_task_sequence
from .delegate import TrainingDiverged, evaluate_student_with_teacher_head, train_skd, write_trace_csv
from .evalkit import (
    RunReport,
    as_eval_set,
    class_coverage,
    export_embeddings,
    top1_accuracy,
)
from .networks import (
    build_classifier,
    load_classifier,
    load_delegator,
    save_classifier,
    save_delegator,
)

logger = logging.getLogger("skd_cil")


class CommandError(RuntimeError):
    pass


def _setup(config: ExperimentConfig):
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)
    spec = config.dataset_spec()
    source = DataSource(spec, seed=config.seed)
    seq = build_task_sequence(spec, config.num_incremental, config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.toml")
    return spec, source, seq, out


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def cmd_pretrain(config: ExperimentConfig) -> Path:
    """Train the base model on the base classes; writes base.pt and pretrain.json."""
    spec, source, seq, out = _setup(config)
    source.context = "task0/train"
    train = source.load_task_data(seq.base_classes, "train")
    model = build_classifier(config.arch, len(seq.base_classes), spec.input_shape, seed=config.seed)
    torch.manual_seed(config.seed)
    train_classifier(model, train, config.pretrain_epochs, lr=config.pretrain_lr,
                     batch_size=config.pretrain_batch_size, seed=config.seed)
    source.context = "task0/eval"
    val = as_eval_set(source.load_task_data(seq.base_classes, "val"), seq.output_index())
    acc = top1_accuracy(model, val)
    path = save_classifier(model, out / "base.pt")
    _write_json(out / "pretrain.json", {"base_top1": acc, "base_classes": list(seq.base_classes),
                                        "task_sequence": seq.to_dict(), "config_hash": config.config_hash()})
    logger.info("base model: %d classes, top-1 %.2f%%", len(seq.base_classes), acc)
    return path


def _base_model(out: Path, config: ExperimentConfig):
    base = out / "base.pt"
    if not base.exists():
        raise CommandError(f"no base checkpoint at {base}; run `skd-cil pretrain` first")
    return load_classifier(base)


def cmd_distill(config: ExperimentConfig, model_path: Optional[str] = None,
                delegator_path: Optional[str] = None, task: int = 0) -> dict:
    """Stage 1 only: train a delegator for the model that finished task ``task``."""
    spec, source, seq, out = _setup(config)
    teacher = load_classifier(model_path) if model_path else _base_model(out, config)
    init = load_delegator(delegator_path) if delegator_path else None
    result = train_skd(teacher, init, config.resolved_skd())
    source.context = f"task{task}/eval"
    val = as_eval_set(source.load_task_data(seq.seen_classes(task), "val"), seq.output_index())
    t_acc = top1_accuracy(teacher, val)
    s_acc = evaluate_student_with_teacher_head(result.student, teacher, val)
    with torch.no_grad():
        result.delegator.eval()
        gen = torch.Generator().manual_seed(config.seed)
        z = torch.randn(10 * teacher.num_classes, result.delegator.latent_dim, generator=gen)
        labels = teacher(result.delegator(z)).argmax(dim=1)
    metrics = {"teacher_top1": t_acc, "student_top1": s_acc, "gap": t_acc - s_acc,
               "pseudo_label_coverage": class_coverage(labels, teacher.num_classes),
               "teacher_unchanged": result.teacher_unchanged}
    save_delegator(result.delegator, out / f"delegator_task{task + 1}.pt")
    save_classifier(result.student, out / f"student_task{task}.pt")
    write_trace_csv(result.loss_trace, out / f"skd_trace_task{task + 1}.csv")
    _write_json(out / f"distill_task{task}.json", metrics)
    return metrics


def cmd_cil(config: ExperimentConfig, task: int, model_path: Optional[str] = None,
            delegator_path: Optional[str] = None) -> Path:
    """Stage 2 only: learn incremental task ``task`` (1-based)."""
    spec, source, seq, out = _setup(config)
    if not 1 <= task <= seq.num_incremental:
        raise CommandError(f"task must be in 1..{seq.num_incremental}")
    old = load_classifier(model_path) if model_path else (
        _base_model(out, config) if task == 1 else load_classifier(out / f"model_task{task - 1}.pt"))
    delegator = None
    if not config.flags.no_skd:
        dpath = Path(delegator_path) if delegator_path else out / f"delegator_task{task}.pt"
        if not dpath.exists():
            raise CommandError(f"no delegator at {dpath}; run `skd-cil distill` first or pass --no-skd")
        delegator = load_delegator(dpath)
    cil_cfg = CilTrainConfig(**config.cil.to_dict())
    flags = config.run_flags()
    cil_cfg.use_pseudo = not flags.no_skd
    cil_cfg.adaptive = not flags.no_alw
    cil_cfg.consolidate = not flags.no_fc
    source.context = f"task{task}/train"
    data = source.load_task_data(seq.incremental_tasks[task - 1], "train")
    model = train_cil_task(old, delegator, data, cil_cfg, task, gamma_for_task(cil_cfg, seq, task))
    return save_classifier(model, out / f"model_task{task}.pt")


def cmd_run(config: ExperimentConfig, base_path: Optional[str] = None) -> RunReport:
    """Full sequence from an existing base checkpoint; writes report.json."""
    spec, source, seq, out = _setup(config)
    base = load_classifier(base_path) if base_path else _base_model(out, config)
    if base.num_classes != len(seq.base_classes):
        raise CommandError("base checkpoint does not match the configured task sequence")
    report = RunReport(config=config.snapshot(), config_hash=config.config_hash(), name=config.name)
    report.extras["task_sequence"] = seq.to_dict()
    return run_sequence(base, seq, source, config.resolved_skd(), config.cil, config.run_flags(),
                        out_dir=out, report=report)


def cmd_eval(config: ExperimentConfig, model_path: str, task: int) -> float:
    spec = config.dataset_spec()
    source = DataSource(spec, seed=config.seed)
    seq = build_task_sequence(spec, config.num_incremental, config.seed)
    model = load_classifier(model_path)
    source.context = f"task{task}/eval"
    val = as_eval_set(source.load_task_data(seq.seen_classes(task), "val"), seq.output_index())
    return top1_accuracy(model, val)


def cmd_export_embeddings(config: ExperimentConfig, model_path: str, output: str, count: int,
                          delegator_path: Optional[str] = None, task: int = 0) -> Path:
    """Real (training split of the model's seen classes) and optional pseudo features to CSV."""
    spec = config.dataset_spec()
    source = DataSource(spec, seed=config.seed)
    seq = build_task_sequence(spec, config.num_incremental, config.seed)
    model = load_classifier(model_path)
    column_of = seq.output_index()
    source.context = f"task{task}/export"
    real = source.load_task_data(seq.seen_classes(task), "train")
    real_labels = torch.tensor([column_of[int(c)] for c in real.class_ids])
    gen = torch.Generator().manual_seed(config.seed)
    perm = torch.randperm(len(real), generator=gen)
    sources = [("real", real.images[perm], real_labels[perm])]
    if delegator_path:
        from .cil import make_pseudo_batch

        pseudo = make_pseudo_batch(load_delegator(delegator_path), model, count, gen)
        sources.append(("pseudo", pseudo.images, pseudo.labels))
    export_embeddings(model, sources, count, output)
    return Path(output)


def cmd_plot(report_paths: Sequence[str], output_dir: str) -> List[Path]:
    """Accuracy-vs-task curves (one line per report) and per-report loss traces."""
    if not report_paths:
        raise CommandError("no reports given")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .delegate import read_trace_csv

    reports = [(Path(p), RunReport.load(p)) for p in report_paths]
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig, ax = plt.subplots(figsize=(5, 4))
    for path, r in reports:
        label = r.name or path.parent.name
        ax.plot(range(len(r.per_task_top1)), r.per_task_top1, marker="o",
                label=f"{label} (avg {r.average_top1:.2f})")
    ax.set_xlabel("incremental task")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    written.append(out / "accuracy.png")
    fig.savefig(written[-1])
    plt.close(fig)
    for path, r in reports:
        for trace in r.trace_files:
            tpath = Path(trace)
            if not tpath.is_absolute() and not tpath.exists():
                tpath = path.parent / tpath.name
            if not tpath.exists() or not tpath.name.startswith("skd_trace"):
                continue
            rows = read_trace_csv(tpath)
            fig, ax = plt.subplots(figsize=(6, 4))
            for key in ("l_imi", "l_cat", "l_div", "r_feature"):
                pts = [(row["step"], row[key]) for row in rows if row[key] == row[key]]
                if pts:
                    ax.plot(*zip(*pts), label=key, linewidth=0.8)
            ax.set_xlabel("step")
            ax.legend()
            fig.tight_layout()
            written.append(out / f"{r.name or path.parent.name}_{tpath.stem}.png")
            fig.savefig(written[-1])
            plt.close(fig)
    return written


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------


def _config_from_args(args) -> ExperimentConfig:
    config = PRESETS[args.preset]()
    if args.config:
        config = ExperimentConfig.load(args.config, base=config)
    if args.set:
        config = config.with_overrides(args.set)
    flat = {f"flags.{name}": True for name in FLAG_NAMES if getattr(args, name, False)}
    if args.out:
        flat["out_dir"] = args.out
    if args.seed is not None:
        # one seed drives the class order, pretraining and both stages
        flat.update({"seed": args.seed, "skd.seed": args.seed, "cil.seed": args.seed})
    return ExperimentConfig.from_flat(flat, config) if flat else config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    for name in FLAG_NAMES:
        common.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="skd-cil", description="Exemplar-free class-incremental learning")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the base model")
    p = sub.add_parser("distill", parents=[common], help="stage 1: train the delegator")
    p.add_argument("--model")
    p.add_argument("--delegator")
    p.add_argument("--task", type=int, default=0)
    p = sub.add_parser("cil", parents=[common], help="stage 2: learn one incremental task")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--model")
    p.add_argument("--delegator")
    p = sub.add_parser("run", parents=[common], help="full sequence from the base checkpoint")
    p.add_argument("--base")
    p = sub.add_parser("eval", parents=[common], help="top-1 on all classes seen after a task")
    p.add_argument("--model", required=True)
    p.add_argument("--task", type=int, default=0)
    p = sub.add_parser("export-embeddings", parents=[common], help="write feature CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--delegator")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--output", required=True)
    p = sub.add_parser("plot", help="plot reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", default="plots")
    sub.add_parser("defaults", parents=[common], help="print the resolved configuration")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            for p in cmd_plot(args.reports, args.out):
                print(p)
            return 0
        config = _config_from_args(args)
        if args.command == "defaults":
            sys.stdout.write(config.dumps())
        elif args.command == "pretrain":
            print(cmd_pretrain(config))
        elif args.command == "distill":
            print(json.dumps(cmd_distill(config, args.model, args.delegator, args.task), indent=2))
        elif args.command == "cil":
            print(cmd_cil(config, args.task, args.model, args.delegator))
        elif args.command == "run":
            report = cmd_run(config, args.base)
            print(json.dumps({"per_task_top1": report.per_task_top1, "average_top1": report.average_top1,
                              "complete": report.complete}, indent=2))
            if not report.complete:
                print(f"run incomplete: {report.error}", file=sys.stderr)
                return 3
        elif args.command == "eval":
            print(f"{cmd_eval(config, args.model, args.task):.4f}")
        elif args.command == "export-embeddings":
            print(cmd_export_embeddings(config, args.model, args.output, args.count, args.delegator, args.task))
    except (CommandError, DatasetError, KeyError, ValueError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"skd-cil: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
