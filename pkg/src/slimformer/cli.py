"""``slimformer`` command-line driver.

Subcommands chain into the compression recipe::

    gen-data -> gen -> train -> distill -> prune -> eval / bench

Exit codes: 0 success, 1 usage error, 2 data or format error,
3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from slimformer import __version__
from slimformer.compress import (
    DEFAULT_GRID,
    ImportanceScores,
    KDConfig,
    PruneSpec,
    compute_importance,
    distill,
    finetune,
    prune,
    sweep_prune_tradeoff,
)
from slimformer.compress import write_sweep_csv as write_prune_csv
from slimformer.data import Dataset, toy_task
from slimformer.encoder import ACTIVATIONS, F32, ExecPlan, InputError, Model, ModelConfig, compare_plans, init_model
from slimformer.io import FormatError, load_dataset, load_model, save_dataset, save_model
from slimformer.qgemm import IntegrityError
from slimformer.runtime import (
    BATCH_MODES,
    InstancePlan,
    PlanError,
    Stage,
    accuracy,
    count_macs_batches,
    instance_sweep,
    make_batches,
    run_ablation,
    run_multi_instance,
    write_sweep_csv,
)

logger = logging.getLogger("slimformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ratio(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"ratio must be in (0, 1], got {text}")
    return value


def _geometry(text: str) -> tuple[int, int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 4 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected four positive integers L,H,A,F, got {text!r}")
    return parts  # type: ignore[return-value]


def _default_cores() -> int:
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def _config(**kw) -> ModelConfig:
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise CLIError(f"invalid geometry: {exc}") from None


def _load_model(path: str) -> Model:
    if not Path(path).is_file():
        raise CLIError(f"model file not found: {path}", EXIT_DATA)
    return load_model(path)


def _load_data(path: Optional[str], model: Model, what: str = "--data") -> Dataset:
    if path is None:
        raise CLIError(f"{what} is required")
    if not Path(path).is_file():
        raise CLIError(f"data file not found: {path}", EXIT_DATA)
    return load_dataset(path, model.config.vocab_size, model.config.num_classes)


def _exec_plan(precision: str, fused: bool) -> ExecPlan:
    if precision == "f32":
        return ExecPlan("f32", fused, fused, fused)
    return ExecPlan("i8-dynamic", fused, fused, fused)


def _write_losses(losses: Sequence[float], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss))])


def loss_csv_path(out: str) -> Path:
    """Where ``train`` and ``distill`` put the loss curve for model file ``out``."""
    return Path(out).with_suffix(".loss.csv")


def _fmt_acc(acc: float) -> str:
    return "n/a" if math.isnan(acc) else f"{acc:.4f}"


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _config(
        num_layers=args.layers, hidden=args.hidden, num_heads=args.heads, ffn_size=args.ffn,
        vocab_size=args.vocab, max_seq_len=args.max_seq_len, num_classes=args.classes,
        activation=args.activation,
    )
    save_model(init_model(cfg, seed=args.seed, std=args.std), args.out)
    print(f"wrote {args.out}: {cfg}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        ds = toy_task(args.n, args.vocab, args.classes, args.min_len, args.max_len, seed=args.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data, model)
    if data.labels is None:
        raise CLIError("training needs labelled data", EXIT_DATA)
    cfg = KDConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    res = finetune(model, data, cfg)
    save_model(res.model, args.out)
    _write_losses(res.losses, loss_csv_path(args.out))
    final = f"{res.losses[-1]:.6f}" if res.losses else "n/a"
    print(f"wrote {args.out} after {args.steps} steps (final loss {final})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data, model)
    try:
        plan = InstancePlan(args.instances, args.threads, args.cores or _default_cores())
    except PlanError as exc:
        raise CLIError(str(exc)) from None
    exec_plan = _exec_plan(args.precision, args.fused)
    pad_to = args.pad_to or model.config.max_seq_len
    seqs = data.sequences
    if len(seqs):
        batches = make_batches(seqs, args.batch_size, args.batch_mode, pad_to, model.config.max_seq_len)
        macs = count_macs_batches(model.config, batches)
        res = run_multi_instance(model, seqs, plan, exec_plan, args.batch_size, args.batch_mode, pad_to)
        acc, seconds = accuracy(res.logits, data.labels), res.seconds
    else:
        macs, acc, seconds = 0, float("nan"), 0.0
    print(f"examples  {len(seqs)}")
    print(f"accuracy  {_fmt_acc(acc)}")
    print(f"seconds   {seconds:.6f}")
    print(f"macs      {macs}")
    agreement = float("nan")
    if args.compare:
        if len(seqs):
            report = compare_plans(model, seqs, _exec_plan("f32", args.fused), _exec_plan("i8", args.fused))
            agreement = report.agreement
            print(f"f32 vs i8 argmax agreement {agreement:.4f}  mean cosine {report.cosine.mean():.6f}")
        else:
            print("f32 vs i8 argmax agreement n/a")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["examples", "precision", "batch_mode", "batch_size", "instances",
                        "threads_per_instance", "accuracy", "seconds", "macs", "agreement"])
            w.writerow([len(seqs), args.precision, args.batch_mode, args.batch_size, args.instances,
                        args.threads, "" if math.isnan(acc) else f"{acc:.4f}", f"{seconds:.6f}", macs,
                        "" if math.isnan(agreement) else f"{agreement:.4f}"])
    return EXIT_OK


def _load_scores(path: Path, model: Model) -> ImportanceScores:
    with np.load(path) as z:
        scores = ImportanceScores(z["heads"], z["ffn_units"], int(z["examples_seen"]))
    cfg = model.config
    if scores.heads.shape != (cfg.num_layers, cfg.num_heads) or scores.ffn_units.shape != (cfg.num_layers, cfg.ffn_size):
        raise CLIError(f"scores in {path} do not match the model geometry", EXIT_DATA)
    return scores


def cmd_prune(args) -> int:
    model = _load_model(args.model)
    scores_path = Path(args.scores) if args.scores else None
    data = None
    if args.data is not None or args.redistill or args.rescore or not (scores_path and scores_path.is_file()):
        data = _load_data(args.data, model)
    if scores_path is not None and scores_path.is_file() and not args.rescore:
        scores = _load_scores(scores_path, model)
        logger.info("loaded importance scores from %s", scores_path)
    else:
        if data.labels is None:
            raise CLIError("importance scoring needs labelled data", EXIT_DATA)
        if len(data) == 0:
            raise CLIError("importance scoring needs a non-empty dataset", EXIT_DATA)
        scores = compute_importance(model, data, batch_size=args.batch_size)
        if scores_path is not None:
            with open(scores_path, "wb") as fh:
                np.savez(fh, heads=scores.heads, ffn_units=scores.ffn_units, examples_seen=scores.examples_seen)
    pruned = prune(model, scores, PruneSpec(args.keep_heads, args.keep_ffn))
    if args.redistill:
        cfg = KDConfig(steps=args.steps, lr=args.lr, temperature=args.temp, batch_size=args.batch_size, seed=args.seed)
        res = distill(model, pruned, data, cfg)
        pruned = res.model
        _write_losses(res.losses, loss_csv_path(args.out))
    save_model(pruned, args.out)
    c0, c1 = model.config, pruned.config
    print(f"heads {c0.num_heads} -> {c1.num_heads}, ffn {c0.ffn_size} -> {c1.ffn_size}")
    if data is not None and len(data):
        batches = make_batches(data.sequences, 1, "dynamic")
        ratio = count_macs_batches(c1, batches) / count_macs_batches(c0, batches)
        print(f"mac_ratio {ratio:.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    teacher = _load_model(args.teacher)
    layers, hidden, heads, ffn = args.student_geometry
    tc = teacher.config
    scfg = _config(
        num_layers=layers, hidden=hidden, num_heads=heads, ffn_size=ffn, vocab_size=tc.vocab_size,
        max_seq_len=tc.max_seq_len, num_classes=tc.num_classes, activation=args.activation or tc.activation,
    )
    data = _load_data(args.data, teacher)
    if len(data) == 0:
        raise CLIError("distillation needs a non-empty dataset", EXIT_DATA)
    student = init_model(scfg, seed=args.seed, std=args.init_std)
    cfg = KDConfig(steps=args.steps, lr=args.lr, temperature=args.temp, batch_size=args.batch_size, seed=args.seed)
    res = distill(teacher, student, data, cfg)
    save_model(res.model, args.out)
    loss_path = loss_csv_path(args.out)
    _write_losses(res.losses, loss_path)
    if data.labels is not None:
        acc = accuracy(run_multi_instance(res.model, data.sequences, InstancePlan(1, 1, 1)).logits, data.labels)
        print(f"student accuracy {_fmt_acc(acc)}")
    print(f"wrote {args.out} and {loss_path}")
    return EXIT_OK


def _ablation_stages(model: Model, student: Optional[Model], data: Dataset, cores: int, pad_to: int,
                     batch_size: int) -> list[Stage]:
    full = InstancePlan(1, cores, cores)
    multi = InstancePlan(cores, 1, cores)
    opt = ExecPlan.optimized()
    stages = [
        Stage("baseline (fixed pad, f32)", model, F32, "fixed_pad", pad_to, full, batch_size),
        Stage("+ dynamic sequence length", model, F32, "dynamic", None, full, batch_size),
    ]
    small = model
    if student is not None:
        small = student
        stages.append(Stage("+ distilled student", student, F32, "dynamic", None, full, batch_size))
    else:
        logger.info("no --student given; skipping the distillation stage")
    stages.append(Stage("+ i8 quantization and fusion", small, opt, "dynamic", None, full, batch_size))
    stages.append(Stage(f"+ multi-instance ({cores}x1)", small, opt, "dynamic", None, multi, batch_size))
    if data.labels is not None:
        scores = compute_importance(small, data)
        for heads, units, label in ((0.75, 0.75, "25% heads, 25% ffn pruned"), (0.67, 0.5, "33% heads, 50% ffn pruned")):
            pruned = prune(small, scores, PruneSpec(heads, units))
            stages.append(Stage(f"+ {label}", pruned, opt, "dynamic", None, multi, batch_size))
    else:
        logger.info("unlabelled data; skipping the pruning stages")
    return stages


def cmd_bench(args) -> int:
    model = _load_model(args.model)
    data = _load_data(args.data, model)
    cores = args.cores or _default_cores()
    if args.suite == "ablation":
        student = _load_model(args.student) if args.student else None
        if student is not None and student.config.num_classes != model.config.num_classes:
            raise CLIError("student and model disagree on the class count", EXIT_DATA)
        stages = _ablation_stages(model, student, data, cores, args.pad_to or model.config.max_seq_len,
                                  args.batch_size)
        report = run_ablation(stages, data.sequences, data.labels, repeats=args.repeats)
        report.to_csv(args.out)
        print(report.format())
        if not report.pinned:
            print("note: core pinning was not applied on this platform")
    elif args.suite == "instances":
        counts = [n for n in (1, 2, 4, 8, 16, 32, 64) if n <= cores]
        rows = instance_sweep(model, data.sequences, cores, counts, batch_size=args.batch_size)
        write_sweep_csv(rows, args.out)
        for r in rows:
            print(f"{r.instances:>3} instances x {r.threads_per_instance:>3} threads  "
                  f"{r.seconds:.4f}s  speedup {r.speedup:.2f}")
    else:
        if data.labels is None:
            raise CLIError("the prune sweep needs labelled data", EXIT_DATA)
        points = sweep_prune_tradeoff(model, data, DEFAULT_GRID, batch_size=args.batch_size)
        write_prune_csv(points, args.out)
        for p in points:
            print(f"heads {p.head_ratio:.2f} ffn {p.ffn_ratio:.2f}  mac_ratio {p.mac_ratio:.4f}  "
                  f"accuracy {_fmt_acc(p.accuracy)}")
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slimformer", description="Transformer encoder inference and compression toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a randomly initialised model")
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--hidden", type=int, required=True)
    g.add_argument("--heads", type=int, required=True)
    g.add_argument("--ffn", type=int, required=True)
    g.add_argument("--vocab", type=int, required=True)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--max-seq-len", type=int, default=128)
    g.add_argument("--activation", choices=ACTIVATIONS, default="gelu")
    g.add_argument("--std", type=float, default=0.02, help="weight init standard deviation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("gen-data", help="write a synthetic separable classification dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--vocab", type=int, default=32)
    d.add_argument("--classes", type=int, default=2)
    d.add_argument("--min-len", type=int, default=6)
    d.add_argument("--max-len", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fine-tune a model on labelled data (cross-entropy)")
    t.add_argument("--model", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=800)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run inference and report accuracy, time and MACs")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--precision", choices=("f32", "i8"), default="f32")
    e.add_argument("--fused", action="store_true", help="use fused qkv, attention and epilogues")
    e.add_argument("--batch-mode", choices=BATCH_MODES, default="dynamic")
    e.add_argument("--batch-size", type=int, default=1)
    e.add_argument("--pad-to", type=int, default=None, help="fixed_pad length (default: model max)")
    e.add_argument("--instances", type=int, default=1)
    e.add_argument("--threads", type=int, default=1, help="threads per instance")
    e.add_argument("--cores", type=int, default=None, help="physical core budget (default: available cores)")
    e.add_argument("--compare", action="store_true", help="also report f32 vs i8 argmax agreement")
    e.add_argument("--csv", default=None)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("prune", help="structured head and FFN-unit pruning")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", default=None)
    pr.add_argument("--keep-heads", type=_ratio, default=1.0)
    pr.add_argument("--keep-ffn", type=_ratio, default=1.0)
    pr.add_argument("--scores", default=None, help="importance-score cache (.npz); reused unless --rescore")
    pr.add_argument("--rescore", action="store_true", help="recompute importance scores even if cached")
    pr.add_argument("--redistill", action="store_true", help="distill the pruned model from the unpruned one")
    pr.add_argument("--steps", type=int, default=500)
    pr.add_argument("--lr", type=float, default=0.1)
    pr.add_argument("--temp", type=float, default=1.0)
    pr.add_argument("--batch-size", type=int, default=8)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prune)

    ds = sub.add_parser("distill", help="distill a smaller student from a teacher")
    ds.add_argument("--teacher", required=True)
    ds.add_argument("--student-geometry", type=_geometry, required=True, metavar="L,H,A,F")
    ds.add_argument("--data", required=True)
    ds.add_argument("--steps", type=int, default=2000)
    ds.add_argument("--lr", type=float, default=0.1)
    ds.add_argument("--temp", type=float, default=1.0)
    ds.add_argument("--batch-size", type=int, default=16)
    ds.add_argument("--activation", choices=ACTIVATIONS, default=None, help="default: the teacher's")
    ds.add_argument("--init-std", type=float, default=0.02)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--out", required=True)
    ds.set_defaults(func=cmd_distill)

    b = sub.add_parser("bench", help="ablation, instance-sweep and prune-sweep reports")
    b.add_argument("--suite", choices=("ablation", "instances", "prune-sweep"), required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--student", default=None, help="distilled model for the ablation suite")
    b.add_argument("--cores", type=int, default=None, help="physical core budget (default: available cores)")
    b.add_argument("--batch-size", type=int, default=1)
    b.add_argument("--pad-to", type=int, default=None)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        code = args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FormatError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrityError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (PlanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logger.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
