"""Run configuration: one JSON document covering model shapes, stage plans, data and output."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .curriculum import STAGE_LR, STAGE_TRAINABLE, WARMUP_FRAC, WEIGHT_DECAY, StagePlan
from .data_ingest import GeneratorConfig
from .errors import ConfigError
from .evaluator import QuestionType
from .model import ModelConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StageSettings:
    steps: int = 50
    batch_size: int = 8
    grad_accum: int = 1
    base_lr: float | None = None  # None -> published rate for the stage
    warmup_frac: float = WARMUP_FRAC
    weight_decay: float = WEIGHT_DECAY


@dataclass(frozen=True)
class SynthSettings:
    n_samples: int = 64
    seed: int = 0
    categories: tuple[str, ...] = tuple(q.value for q in QuestionType)
    canvas: tuple[int, int] = (32, 32)
    pixels_per_meter: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: tuple[StageSettings, StageSettings, StageSettings] = (StageSettings(), StageSettings(), StageSettings())
    train_data: tuple[str | None, str | None, str | None] = (None, None, None)
    eval_data: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0
    max_new: int = 64
    synth: SynthSettings = field(default_factory=SynthSettings)
    schema_version: int = SCHEMA_VERSION

    def stage_plan(self, stage_id: int) -> StagePlan:
        s = self.stages[stage_id - 1]
        return StagePlan(
            stage_id=stage_id,
            trainable=STAGE_TRAINABLE[stage_id],
            base_lr=STAGE_LR[stage_id] if s.base_lr is None else s.base_lr,
            steps=s.steps,
            batch_size=s.batch_size,
            grad_accum=s.grad_accum,
            warmup_frac=s.warmup_frac,
            weight_decay=s.weight_decay,
            seed=self.seed,
        )

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(canvas=tuple(self.synth.canvas), pixels_per_meter=self.synth.pixels_per_meter)

    def with_seed(self, seed: int) -> "RunConfig":
        model = replace(self.model, seed=seed, lm=replace(self.model.lm, seed=seed))
        return replace(self, seed=seed, model=model, synth=replace(self.synth, seed=seed))

    def with_steps(self, steps: tuple[int, int, int]) -> "RunConfig":
        return replace(self, stages=tuple(replace(s, steps=n) for s, n in zip(self.stages, steps)))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "max_new": self.max_new,
            "model": self.model.to_dict(),
            "stages": [vars(s).copy() for s in self.stages],
            "data": {"train": list(self.train_data), "eval": self.eval_data},
            "synth": {**vars(self.synth), "categories": list(self.synth.categories), "canvas": list(self.synth.canvas)},
        }

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        cfg = _parse(d, base)
        validate_run_config(cfg)
        return cfg


def _parse(d: dict, base: Path | None) -> RunConfig:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}; expected {SCHEMA_VERSION}")
    known = {"schema_version", "seed", "out_dir", "max_new", "model", "stages", "data", "synth"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(d.get("model", {}))
        stages_raw = d.get("stages", [{}, {}, {}])
        if len(stages_raw) != 3:
            raise ConfigError("exactly three stage entries are required")
        stages = tuple(StageSettings(**s) for s in stages_raw)
        data = d.get("data", {})
        train = data.get("train", [None, None, None])
        if isinstance(train, str) or train is None:
            train = [train] * 3
        if len(train) != 3:
            raise ConfigError("data.train must be one path or a list of three")

        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str(base / p)

        synth_raw = dict(d.get("synth", {}))
        if "categories" in synth_raw:
            synth_raw["categories"] = tuple(synth_raw["categories"])
        if "canvas" in synth_raw:
            synth_raw["canvas"] = tuple(synth_raw["canvas"])
        return RunConfig(
            model=model,
            stages=stages,
            train_data=tuple(resolve(p) for p in train),
            eval_data=resolve(data.get("eval")),
            out_dir=d.get("out_dir", "runs/default"),
            seed=int(d.get("seed", 0)),
            max_new=int(d.get("max_new", 64)),
            synth=SynthSettings(**synth_raw),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def validate_run_config(cfg: RunConfig) -> None:
    # ModelConfig validates its own shapes on construction
    for i, s in enumerate(cfg.stages, start=1):
        if s.steps < 1 or s.batch_size < 1 or s.grad_accum < 1:
            raise ConfigError(f"stage {i}: steps, batch_size and grad_accum must be >= 1")
        if s.base_lr is not None and s.base_lr <= 0:
            raise ConfigError(f"stage {i}: base_lr must be positive")
        if not 0 <= s.warmup_frac < 1:
            raise ConfigError(f"stage {i}: warmup_frac must be in [0, 1)")
        if s.weight_decay < 0:
            raise ConfigError(f"stage {i}: weight_decay must be >= 0")
    if cfg.max_new < 1:
        raise ConfigError("max_new must be >= 1")
    if tuple(cfg.synth.canvas) != tuple(cfg.model.image_size):
        raise ConfigError(f"synth canvas {cfg.synth.canvas} != model image_size {cfg.model.image_size}")
    for c in cfg.synth.categories:
        try:
            QuestionType.parse(c)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if cfg.synth.n_samples < 1:
        raise ConfigError("synth.n_samples must be >= 1")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(d, base=path.parent)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
