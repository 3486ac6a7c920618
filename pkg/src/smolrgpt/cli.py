"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``generate``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import torch

from .config import RunConfig, dump_config, load_config
from .curriculum import load_checkpoint, save_checkpoint, train_stage
from .data_ingest import generate_toy_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, NumericError
from .evaluator import (
    QuestionType,
    classify_question,
    evaluate_model,
    try_normalize,
    write_report,
)
from .model import SmolRGPT

log = logging.getLogger("smolrgpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


def _parse_steps(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError("--steps takes N or N1,N2,N3 with every value >= 1")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smolrgpt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config (JSON); defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output file (synth) or directory")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--categories", help="comma-separated question types")

    p = sub.add_parser("train", help="run the three-stage curriculum")
    common(p)
    p.add_argument("--steps", type=_parse_steps, help="override step budgets: N or N1,N2,N3")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="run a single stage")
    p.add_argument("--checkpoint", help="start from this checkpoint")

    p = sub.add_parser("eval", help="generate answers and score them")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset to evaluate (defaults to data.eval)")

    p = sub.add_parser("generate", help="print raw and normalized answers")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sample file")
    return parser


def cmd_synth(cfg: RunConfig, out_path: str | Path) -> list:
    synth = cfg.synth
    categories = [QuestionType.parse(c) for c in synth.categories]
    samples = generate_toy_dataset(synth.seed, synth.n_samples, categories, cfg.generator_config())
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(samples, out_path)
    counts = Counter(s.category.value for s in samples)
    for q in QuestionType:
        if counts[q.value]:
            print(f"{q.value:<14}{counts[q.value]:>6}")
    return samples


def cmd_train(cfg: RunConfig, out_dir: str | Path, stages=(1, 2, 3), init: str | None = None) -> list:
    out_dir = Path(out_dir)
    datasets = {}
    for k in stages:
        path = cfg.train_data[k - 1]
        if path is None or not Path(path).exists():
            raise DataError(f"stage {k}: training dataset {path!r} does not exist")
        datasets[k] = load_dataset(path)
    model = load_checkpoint(init) if init else SmolRGPT(cfg.model)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    reports = []
    for k in stages:
        plan = cfg.stage_plan(k)
        log.info("stage %d: %d steps, lr %.3g, trainable %s", k, plan.steps, plan.base_lr, sorted(plan.trainable))
        report = train_stage(plan, model, datasets[k], log_every=max(1, plan.steps // 10))
        path = save_checkpoint(model, out_dir / f"stage{k}.ckpt", stage=k)
        report.checkpoint = str(path)
        reports.append(report)
    _write_train_outputs(reports, out_dir)
    return reports


def _write_train_outputs(reports, out_dir: Path) -> None:
    (out_dir / "train_report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(out_dir / "loss_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["global_step", "stage", "step", "loss", "lr"])
        g = 0
        for r in reports:
            for i, (loss, lr) in enumerate(zip(r.losses, r.lrs)):
                writer.writerow([g, r.stage_id, i, repr(loss), repr(lr)])
                g += 1
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        g = 0
        for r in reports:
            ax.plot(range(g, g + len(r.losses)), r.losses, label=f"stage {r.stage_id}")
            g += len(r.losses)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curve.png", dpi=100)
        plt.close(fig)
    except Exception as exc:  # rendering never gates the exit code
        log.warning("loss plot not rendered: %s", exc)


class _Responder:
    def __init__(self, model: SmolRGPT, max_new: int):
        self.model = model
        self.max_new = max_new

    def respond(self, sample) -> str:
        return self.model.respond(sample, self.max_new)


def cmd_eval(cfg: RunConfig, model, dataset, out_dir: str | Path):
    """``model`` is a checkpoint path, a SmolRGPT, or any object with ``respond(sample)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, SmolRGPT):
        model = _Responder(model, cfg.max_new)
    report, _ = evaluate_model(model, dataset, trace_path=out_dir / "trace.jsonl")
    write_report(report, out_dir)
    print(report.render(), end="")
    return report


def cmd_generate(cfg: RunConfig, checkpoint, samples) -> list[tuple[str, str]]:
    model = checkpoint if isinstance(checkpoint, SmolRGPT) else load_checkpoint(checkpoint)
    lines = []
    for sample in samples:
        raw = model.respond(sample, cfg.max_new)
        if sample.category is not None:
            qtype = sample.category
        else:
            question = next(t.text for t in reversed(sample.turns) if t.role == "user")
            qtype = classify_question(question)
        pred = try_normalize(raw, qtype)
        extracted = "<unparseable>" if pred is None else json.dumps(pred.to_json())
        print(f"{sample.sample_id}\traw\t{raw}")
        print(f"{sample.sample_id}\t{qtype.value}\t{extracted}")
        lines.append((raw, extracted))
    return lines


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "synth":
            if args.n is not None:
                if args.n < 1:
                    raise UsageError("--n must be >= 1")
                cfg = replace(cfg, synth=replace(cfg.synth, n_samples=args.n))
            if args.categories:
                cats = tuple(QuestionType.parse(c).value for c in args.categories.split(","))
                cfg = replace(cfg, synth=replace(cfg.synth, categories=cats))
            if not args.out:
                raise UsageError("synth needs --out")
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            if args.steps:
                cfg = cfg.with_steps(args.steps)
            stages = (args.stage,) if args.stage else (1, 2, 3)
            reports = cmd_train(cfg, args.out or cfg.out_dir, stages, args.checkpoint)
            for r in reports:
                print(f"stage {r.stage_id}: final loss {r.losses[-1]:.4f} -> {r.checkpoint}")
        elif args.command == "eval":
            data = args.data or cfg.eval_data
            if data is None:
                raise UsageError("eval needs --data or data.eval in the config")
            cmd_eval(cfg, args.checkpoint, load_dataset(data), args.out or Path(cfg.out_dir) / "eval")
        elif args.command == "generate":
            cmd_generate(cfg, args.checkpoint, load_dataset(args.data))
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
