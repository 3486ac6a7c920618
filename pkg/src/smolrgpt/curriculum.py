"""Three-stage training: freeze sets, AdamW with warmup+cosine, checkpoints and reports."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_ingest import ConversationSample
from .errors import CorruptArchive, EmptyDataset, NonFiniteLoss, UnknownStage
from .model import GROUPS, ModelConfig, SmolRGPT

log = logging.getLogger(__name__)

STAGE_TRAINABLE = {
    1: frozenset({"rgb_connector"}),
    2: frozenset({"depth_connector", "rgb_refiner", "depth_refiner"}),
    3: frozenset(set(GROUPS) - {"vision_encoder"}),
}
STAGE_LR = {1: 1e-4, 2: 1e-4, 3: 5e-5}
WEIGHT_DECAY = 0.01
WARMUP_FRAC = 0.03
BETAS = (0.9, 0.999)
EPS = 1e-8


@dataclass
class StagePlan:
    stage_id: int
    trainable: frozenset[str]
    base_lr: float
    steps: int
    batch_size: int = 8
    grad_accum: int = 1
    warmup_frac: float = WARMUP_FRAC
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0

    def __post_init__(self):
        self.trainable = frozenset(self.trainable)
        if "vision_encoder" in self.trainable:
            raise ValueError("the vision encoder is frozen at every stage")
        unknown = self.trainable - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        if self.steps < 1 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("steps, batch_size and grad_accum must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = sorted(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(**{**d, "trainable": frozenset(d["trainable"])})


def default_stage_plan(stage_id: int, steps: int = 100, batch_size: int = 8) -> StagePlan:
    """Published learning rates and freeze sets; step and batch budgets are desk-scale."""
    if stage_id not in STAGE_TRAINABLE:
        raise UnknownStage(f"unknown stage {stage_id!r}; expected 1, 2 or 3")
    return StagePlan(
        stage_id=stage_id,
        trainable=STAGE_TRAINABLE[stage_id],
        base_lr=STAGE_LR[stage_id],
        steps=steps,
        batch_size=batch_size,
    )


def warmup_steps(total: int, warmup_frac: float) -> int:
    return math.ceil(warmup_frac * total)


def lr_at(step: int, total: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup over ceil(warmup_frac * total) steps, then cosine decay to zero."""
    if total <= 0 or not 0 <= step <= total:
        raise ValueError(f"need 0 <= step <= total and total > 0, got step={step}, total={total}")
    warm = warmup_steps(total, warmup_frac)
    if step == total:
        return 0.0
    if step < warm:
        return base_lr * step / warm
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


@dataclass
class TrainReport:
    stage_id: int
    losses: list[float]
    lrs: list[float]
    fingerprints_before: dict[str, str]
    fingerprints_after: dict[str, str]
    wall_time: float
    checkpoint: str | None = None
    plan: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def changed_groups(self) -> set[str]:
        return {g for g in GROUPS if self.fingerprints_before[g] != self.fingerprints_after[g]}

    def to_dict(self) -> dict:
        return asdict(self)


def set_trainable(model: SmolRGPT, trainable: frozenset[str]) -> list[torch.nn.Parameter]:
    params = []
    for g in GROUPS:
        for p in model.group(g).parameters():
            p.requires_grad_(g in trainable)
            if g in trainable:
                params.append(p)
    return params


class BatchSchedule:
    """Order-stable stream of sample indices: reshuffled epochs from a seeded generator."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.buf: list[int] = []

    def take(self, k: int) -> list[int]:
        while len(self.buf) < k:
            self.buf.extend(int(i) for i in self.rng.permutation(self.n))
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def train_stage(
    plan: StagePlan,
    model: SmolRGPT,
    dataset: Sequence[ConversationSample],
    prepared=None,
    log_every: int = 0,
) -> TrainReport:
    """Run ``plan.steps`` optimizer updates on ``model`` in place.

    Each update accumulates ``grad_accum`` micro-batches of ``batch_size``;
    the loss is the summed token NLL over all micro-batches divided by their
    total number of supervised tokens.
    """
    if len(dataset) == 0:
        raise EmptyDataset(f"stage {plan.stage_id}: empty dataset")
    t0 = time.perf_counter()
    before = model.fingerprints()
    params = set_trainable(model, plan.trainable)
    optim = torch.optim.AdamW(params, lr=0.0, betas=BETAS, eps=EPS, weight_decay=plan.weight_decay)
    preps = prepared if prepared is not None else [model.prepare(s) for s in dataset]
    schedule = BatchSchedule(len(preps), plan.seed * 1000 + plan.stage_id)
    losses: list[float] = []
    lrs: list[float] = []
    model.train()
    for step in range(plan.steps):
        lr = lr_at(step, plan.steps, plan.base_lr, plan.warmup_frac)
        for group in optim.param_groups:
            group["lr"] = lr
        micro = [[preps[i] for i in schedule.take(plan.batch_size)] for _ in range(plan.grad_accum)]
        n_tokens = sum(p.n_supervised for m in micro for p in m)
        for p in params:
            p.grad = torch.zeros_like(p)
        total = 0.0
        for batch in micro:
            s, _ = model.batch_loss_sum(batch)
            (s / n_tokens).backward()
            total += float(s.detach())
        value = total / n_tokens
        if not math.isfinite(value):
            raise NonFiniteLoss(plan.stage_id, step, value)
        optim.step()
        losses.append(value)
        lrs.append(lr)
        if log_every and (step % log_every == 0 or step == plan.steps - 1):
            log.info("stage %d step %d/%d loss %.4f lr %.3g", plan.stage_id, step, plan.steps, value, lr)
    model.eval()
    after = model.fingerprints()
    return TrainReport(
        stage_id=plan.stage_id,
        losses=losses,
        lrs=lrs,
        fingerprints_before=before,
        fingerprints_after=after,
        wall_time=time.perf_counter() - t0,
        plan=plan.to_dict(),
        notes=["desk-scale steps/batch; not the published budgets"],
    )


def run_curriculum(
    plans: Sequence[StagePlan],
    datasets: Sequence[Sequence[ConversationSample]],
    model: SmolRGPT,
    checkpoint_dir: str | Path | None = None,
    log_every: int = 0,
) -> list[TrainReport]:
    """Train stages in order; optimizer state is fresh for every stage."""
    if [p.stage_id for p in plans] != sorted(p.stage_id for p in plans):
        raise ValueError("stage plans must be ordered by stage id")
    reports = []
    for plan, data in zip(plans, datasets):
        report = train_stage(plan, model, data, log_every=log_every)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"stage{plan.stage_id}.ckpt"
            save_checkpoint(model, path, stage=plan.stage_id)
            report.checkpoint = str(path)
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"
PAYLOAD = "params.bin"
FORMAT_VERSION = 1


def _state(model: SmolRGPT) -> list[tuple[str, torch.Tensor]]:
    items = []
    for g in GROUPS:
        items.extend(model.group_tensors(g).items())
    return items


def save_checkpoint(model: SmolRGPT, path: str | Path, stage: int | None = None) -> Path:
    """Zip archive: a JSON manifest plus little-endian float64 arrays in manifest order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    payload = io.BytesIO()
    for name, t in _state(model):
        raw = t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": payload.tell(), "sha256": hashlib.sha256(raw).hexdigest()}
        )
        payload.write(raw)
    data = payload.getvalue()
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "stage": stage,
        "groups": list(GROUPS),
        "fingerprints": model.fingerprints(),
        "tensors": entries,
        "payload_sha256": hashlib.sha256(data).hexdigest(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, blob in ((MANIFEST, json.dumps(manifest, indent=2, sort_keys=True).encode()), (PAYLOAD, data)):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, blob)
    return path


def read_manifest(path: str | Path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read(MANIFEST))
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise CorruptArchive(f"{path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> SmolRGPT:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST))
            data = zf.read(PAYLOAD)
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CorruptArchive(f"{path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != manifest.get("payload_sha256"):
        raise CorruptArchive(f"{path}: payload hash does not match the manifest")
    model = SmolRGPT(ModelConfig.from_dict(manifest["config"]))
    state = dict(_state(model))
    if sorted(state) != sorted(e["name"] for e in manifest["tensors"]):
        raise CorruptArchive(f"{path}: tensor names do not match the model layout")
    with torch.no_grad():
        for e in manifest["tensors"]:
            t = state[e["name"]]
            n = int(np.prod(e["shape"])) * 8
            raw = data[e["offset"]: e["offset"] + n]
            if len(raw) != n or hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise CorruptArchive(f"{path}: tensor {e['name']} is damaged")
            arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"])
            t.copy_(torch.from_numpy(arr.copy()).to(t.dtype))
    return model
