"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

Both run the full three-stage curriculum on synthetic data drawn in memory
and score the result with the rule-based evaluator.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import torch

from .config import RunConfig
from .curriculum import TrainReport, run_curriculum
from .data_ingest import generate_scene_dataset, generate_toy_dataset
from .evaluator import MetricsReport, QuestionType, evaluate_model
from .model import SmolRGPT

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    train_report: MetricsReport | None
    eval_report: MetricsReport | None
    stage_reports: list[TrainReport]
    total_steps: int
    wall_time: float
    model: SmolRGPT

    def summary(self) -> str:
        lines = [f"steps {self.total_steps}  wall {self.wall_time:.1f}s"]
        if self.train_report is not None:
            lines += ["[train set]", self.train_report.render()]
        if self.eval_report is not None:
            lines += ["[held-out]", self.eval_report.render()]
        return "\n".join(lines)


class _Responder:
    def __init__(self, model: SmolRGPT, max_new: int):
        self.model, self.max_new = model, max_new

    def respond(self, sample) -> str:
        return self.model.respond(sample, self.max_new)


def _categories(cfg: RunConfig) -> list[QuestionType]:
    return [QuestionType.parse(c) for c in cfg.synth.categories]


def train_and_score(cfg: RunConfig, train, held=(), checkpoint_dir=None, score_train=True) -> ExperimentResult:
    """Run the three stages on ``train`` (every stage sees the same samples), then score ``train`` and ``held``."""
    torch.use_deterministic_algorithms(True)
    model = SmolRGPT(cfg.model)
    plans = [cfg.stage_plan(k) for k in (1, 2, 3)]
    t0 = time.perf_counter()
    reports = run_curriculum(plans, [train] * 3, model, checkpoint_dir=checkpoint_dir, log_every=250)
    wall = time.perf_counter() - t0
    responder = _Responder(model, cfg.max_new)
    train_report = evaluate_model(responder, train)[0] if score_train else None
    held_report = evaluate_model(responder, held)[0] if held else None
    return ExperimentResult(train_report, held_report, reports, sum(p.steps for p in plans), wall, model)


def overfit(cfg: RunConfig) -> ExperimentResult:
    """Memorization check: ``cfg.synth.n_samples`` samples, one scene each, scored on themselves."""
    train = generate_toy_dataset(cfg.synth.seed, cfg.synth.n_samples, _categories(cfg), cfg.generator_config())
    return train_and_score(cfg, train)


def heldout(cfg: RunConfig, n_train: int = 256, n_heldout: int = 64, score_train: bool = False) -> ExperimentResult:
    """Generalization check on unseen scenes.

    Every configured question type is asked about each scene, so ``n_train``
    scenes give ``n_train`` questions per type. Held-out scenes come from seed
    ``cfg.synth.seed + 1`` and share nothing with the training scenes.
    """
    gen, cats = cfg.generator_config(), _categories(cfg)
    train = generate_scene_dataset(cfg.synth.seed, n_train, cats, gen)
    held = generate_scene_dataset(cfg.synth.seed + 1, n_heldout, cats, gen, id_prefix="held")
    return train_and_score(cfg, train, held, score_train=score_train)
