"""Rule-based answer normalization and metrics for the four warehouse question types.

The pipeline is generate -> classify question -> normalize answer -> score.
Nothing here feeds back into training or generation.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import ExtractionFailure, UnclassifiableQuestion, VariantMismatch

RULES_VERSION = "1"
DISTANCE_TOLERANCE = 0.25
_EPS = 1e-9


class QuestionType(str, enum.Enum):
    LEFT_RIGHT = "left_right"
    COUNT = "count"
    DISTANCE = "distance"
    MULTI_CHOICE = "multi_choice"

    @classmethod
    def parse(cls, name: str) -> "QuestionType":
        key = re.sub(r"[\s\-]+", "_", name.strip().lower())
        aliases = {
            "leftright": cls.LEFT_RIGHT,
            "left_right": cls.LEFT_RIGHT,
            "count": cls.COUNT,
            "distance": cls.DISTANCE,
            "multichoice": cls.MULTI_CHOICE,
            "multi_choice": cls.MULTI_CHOICE,
            "mcq": cls.MULTI_CHOICE,
        }
        if key not in aliases:
            raise ValueError(f"unknown question type {name!r}")
        return aliases[key]


CATEGORY_ORDER = (
    QuestionType.LEFT_RIGHT,
    QuestionType.COUNT,
    QuestionType.DISTANCE,
    QuestionType.MULTI_CHOICE,
)

NUMBER_WORDS = {
    "zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12, "thirteen": 13, "fourteen": 14, "fifteen": 15, "sixteen": 16,
    "seventeen": 17, "eighteen": 18, "nineteen": 19, "twenty": 20, "none": 0,
}

# Cascade order matters: first match wins.
_QUESTION_RULES: tuple[tuple[QuestionType, re.Pattern], ...] = (
    (
        QuestionType.MULTI_CHOICE,
        re.compile(
            r"\bwhich\s+(?:one|region|regions|of|mask|box|boxes|pallet|pallets|object|objects|transporter)\b"
            r"|\(\s*[a-d]\s*\)|\boptions?\b|\bchoices?\b",
            re.I,
        ),
    ),
    (QuestionType.LEFT_RIGHT, re.compile(r"\b(?:left|right)(?:-hand)?\b", re.I)),
    (QuestionType.COUNT, re.compile(r"\bhow\s+many\b|\bnumber\s+of\b|\bcount\b", re.I)),
    (QuestionType.DISTANCE, re.compile(r"\bdistance\b|\bhow\s+far\b|\bfar\s+apart\b", re.I)),
)

_REGION_RE = re.compile(r"\[?\s*region\s*(\d+)\s*\]?", re.I)
_DIRECTION_RE = re.compile(r"\b(left|right)(?:-hand)?\b", re.I)
_INT_RE = re.compile(r"\b(\d+)\b|\b(" + "|".join(NUMBER_WORDS) + r")\b", re.I)
_DIST_RE = re.compile(
    r"(\d+(?:\.\d+)?|\.\d+)\s*(centimeters?|centimetres?|cm|meters?|metres?|m)?\b", re.I
)
_NUMERIC_ANSWER_RE = re.compile(
    r"(?:\d+(?:\.\d+)?|\.\d+)\s*(?:centimeters?|centimetres?|cm|meters?|metres?|m)?"
    r"|(?:" + "|".join(NUMBER_WORDS) + r")",
    re.I,
)


def classify_question(text: str) -> QuestionType:
    for qtype, pattern in _QUESTION_RULES:
        if pattern.search(text):
            return qtype
    raise UnclassifiableQuestion(f"no rule matches question {text!r}")


def classify_answer(text: str) -> str:
    """Return one of ``directional``, ``numeric``, ``choice`` or ``sentence``."""
    s = text.strip().rstrip(".!").strip()
    if re.fullmatch(r"(?:left|right)(?:-hand)?(?:\s+side)?", s, re.I):
        return "directional"
    if _NUMERIC_ANSWER_RE.fullmatch(s):
        return "numeric"
    if _REGION_RE.fullmatch(s):
        return "choice"
    return "sentence"


@dataclass(frozen=True)
class NormalizedAnswer:
    kind: QuestionType
    value: Any  # "left"/"right", int, float meters, or region index

    def to_json(self) -> Any:
        return self.value

    @classmethod
    def from_json(cls, kind: QuestionType, value: Any) -> "NormalizedAnswer":
        if kind in (QuestionType.COUNT, QuestionType.MULTI_CHOICE):
            value = int(value)
        elif kind is QuestionType.DISTANCE:
            value = float(value)
        return cls(kind, value)


def _strip_regions(text: str) -> str:
    return _REGION_RE.sub(" ", text)


def normalize_answer(text: str, qtype: QuestionType) -> NormalizedAnswer:
    """Extract a canonical value from a free-form answer, or raise ExtractionFailure."""
    if qtype is QuestionType.LEFT_RIGHT:
        words = _DIRECTION_RE.findall(text)
        if not words:
            raise ExtractionFailure(text, qtype)
        direction = words[-1].lower()
        # Answers are read subject-first: "[Region 1] is left of [Region 0]"
        # states the inverse relation of the question's (0, 1) pair.
        regions = [int(m) for m in _REGION_RE.findall(text)]
        if len(regions) >= 2 and regions[0] > regions[1]:
            direction = "left" if direction == "right" else "right"
        return NormalizedAnswer(qtype, direction)

    if qtype is QuestionType.COUNT:
        m = _INT_RE.search(_strip_regions(text))
        if m is None:
            raise ExtractionFailure(text, qtype)
        value = int(m.group(1)) if m.group(1) is not None else NUMBER_WORDS[m.group(2).lower()]
        return NormalizedAnswer(qtype, value)

    if qtype is QuestionType.DISTANCE:
        m = _DIST_RE.search(_strip_regions(text))
        if m is None:
            raise ExtractionFailure(text, qtype)
        value = float(m.group(1))
        unit = (m.group(2) or "m").lower()
        if unit.startswith("c"):
            value /= 100.0
        return NormalizedAnswer(qtype, value)

    if qtype is QuestionType.MULTI_CHOICE:
        m = _REGION_RE.search(text)
        if m is None:
            raise ExtractionFailure(text, qtype)
        return NormalizedAnswer(qtype, int(m.group(1)))

    raise TypeError(f"not a QuestionType: {qtype!r}")


def try_normalize(text: str, qtype: QuestionType) -> NormalizedAnswer | None:
    try:
        return normalize_answer(text, qtype)
    except ExtractionFailure:
        return None


def is_correct(qtype: QuestionType, pred: NormalizedAnswer, gold: NormalizedAnswer) -> bool:
    if qtype is QuestionType.DISTANCE:
        return abs(pred.value - gold.value) / max(gold.value, _EPS) <= DISTANCE_TOLERANCE
    return pred.value == gold.value


@dataclass
class CategoryStats:
    n: int = 0  # parsed predictions
    unparseable: int = 0
    correct: int = 0
    sq_err: float = 0.0

    @property
    def total(self) -> int:
        return self.n + self.unparseable

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class MetricsReport:
    categories: dict[QuestionType, CategoryStats]
    rmse: dict[QuestionType, float]
    aggregate: float
    unparseable: int
    total: int
    rules_version: str = RULES_VERSION
    notes: list[str] = field(default_factory=list)

    def accuracy(self, qtype: QuestionType) -> float:
        return self.categories[qtype].accuracy

    def to_dict(self) -> dict:
        return {
            "rules_version": self.rules_version,
            "aggregate": self.aggregate,
            "total": self.total,
            "unparseable": self.unparseable,
            "categories": {
                q.value: {
                    "n": s.n,
                    "unparseable": s.unparseable,
                    "correct": s.correct,
                    "accuracy": s.accuracy,
                    **({"rmse": self.rmse[q]} if q in self.rmse else {}),
                }
                for q, s in self.categories.items()
            },
            "notes": list(self.notes),
        }

    def render(self) -> str:
        lines = [
            f"# evaluation report (rules v{self.rules_version})",
            "# aggregate = unweighted mean of category accuracies x 100;"
            " not comparable to the challenge leaderboard score",
            f"{'category':<14}{'n':>6}{'failed':>8}{'acc':>10}{'rmse':>10}",
        ]
        for q, s in self.categories.items():
            rmse = f"{self.rmse[q]:.4f}" if q in self.rmse else "-"
            lines.append(f"{q.value:<14}{s.n:>6}{s.unparseable:>8}{s.accuracy:>10.4f}{rmse:>10}")
        lines.append(f"aggregate {self.aggregate:.4f}  total {self.total}  unparseable {self.unparseable}")
        return "\n".join(lines) + "\n"


def compute_metrics(
    pairs: Iterable[tuple[QuestionType, NormalizedAnswer | None, NormalizedAnswer]],
) -> MetricsReport:
    """Score ``(qtype, prediction, gold)`` triples; a ``None`` prediction is an extraction failure."""
    stats: dict[QuestionType, CategoryStats] = {}
    rmse_acc: dict[QuestionType, list[float]] = {}
    for qtype, pred, gold in pairs:
        if gold.kind is not qtype:
            raise VariantMismatch(f"gold {gold.kind.value} answer for a {qtype.value} question")
        s = stats.setdefault(qtype, CategoryStats())
        if pred is None or isinstance(pred, Exception):
            s.unparseable += 1
            continue
        if pred.kind is not qtype:
            raise VariantMismatch(f"prediction {pred.kind.value} for a {qtype.value} question")
        s.n += 1
        s.correct += bool(is_correct(qtype, pred, gold))
        if qtype in (QuestionType.COUNT, QuestionType.DISTANCE):
            rmse_acc.setdefault(qtype, []).append((pred.value - gold.value) ** 2)

    ordered = {q: stats[q] for q in CATEGORY_ORDER if q in stats}
    rmse = {q: math.sqrt(sum(v) / len(v)) for q, v in rmse_acc.items()}
    rmse = {q: rmse[q] for q in CATEGORY_ORDER if q in rmse}
    present = [s.accuracy for s in ordered.values()]
    aggregate = 100.0 * sum(present) / len(present) if present else 0.0
    notes = []
    missing = [q.value for q in CATEGORY_ORDER if q not in ordered]
    if missing and ordered:
        notes.append("aggregate over present categories only; missing: " + ", ".join(missing))
    return MetricsReport(
        categories=ordered,
        rmse=rmse,
        aggregate=aggregate,
        unparseable=sum(s.unparseable for s in ordered.values()),
        total=sum(s.total for s in ordered.values()),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# end-to-end evaluation and trace files
# ---------------------------------------------------------------------------

def question_and_gold(sample) -> tuple[QuestionType, str, str]:
    """(qtype, last user question, last assistant answer) for a conversation sample."""
    question = next(t.text for t in reversed(sample.turns) if t.role == "user")
    answer = next(t.text for t in reversed(sample.turns) if t.role == "assistant")
    qtype = sample.category if sample.category is not None else classify_question(question)
    return qtype, question, answer


def evaluate_model(model, dataset: Sequence, trace_path: str | Path | None = None):
    """Run ``model.respond(sample)`` over ``dataset`` and score the answers.

    ``model`` is anything exposing ``respond(sample) -> str``. Returns the
    report and the per-sample trace records (also written to ``trace_path``).
    """
    traces = []
    pairs = []
    for sample in dataset:
        qtype, _question, gold_text = question_and_gold(sample)
        gold = normalize_answer(gold_text, qtype)
        raw = model.respond(sample)
        pred = try_normalize(raw, qtype)
        if pred is None:
            verdict = "unparseable"
        else:
            verdict = "correct" if is_correct(qtype, pred, gold) else "wrong"
        pairs.append((qtype, pred, gold))
        traces.append(
            {
                "id": sample.sample_id,
                "qtype": qtype.value,
                "raw": raw,
                "extracted": None if pred is None else pred.to_json(),
                "gold": gold.to_json(),
                "verdict": verdict,
            }
        )
    report = compute_metrics(pairs)
    if trace_path is not None:
        write_trace(traces, trace_path)
    return report, traces


def write_trace(traces: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in traces:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_from_trace(traces: Sequence[dict]) -> MetricsReport:
    pairs = []
    for rec in traces:
        qtype = QuestionType(rec["qtype"])
        gold = NormalizedAnswer.from_json(qtype, rec["gold"])
        pred = None if rec["extracted"] is None else NormalizedAnswer.from_json(qtype, rec["extracted"])
        pairs.append((qtype, pred, gold))
    return compute_metrics(pairs)


def write_report(report: MetricsReport, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    text_path = out_dir / f"{stem}.txt"
    json_path = out_dir / f"{stem}.json"
    text_path.write_text(report.render(), encoding="utf-8")
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return text_path, json_path
