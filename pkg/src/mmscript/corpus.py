"""Script datasets: parsing, validation, windowing into training examples."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from mmscript.text import Tokenizer

SPLITS = ("train", "valid", "test")
MAX_HISTORY = 10


class CorpusError(ValueError):
    """Raised for malformed or inconsistent dataset files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class StepPair:
    index: int
    step_text: str
    caption_text: str


@dataclass(frozen=True)
class Task:
    id: str
    goal: str
    subgoal: str | None
    steps: tuple[StepPair, ...]

    def step_texts(self) -> list[str]:
        return [s.step_text for s in self.steps]


@dataclass
class Corpus:
    split: str = "train"
    tasks: list[Task] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def pair_count(self) -> int:
        return sum(len(t.steps) for t in self.tasks)

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)


@dataclass(frozen=True)
class TrainingExample:
    goal: str
    subgoal: str | None
    history: tuple[tuple[str, str], ...]
    target: str
    task_id: str
    position: int

    @property
    def last_step(self) -> str:
        return self.history[-1][0]


@dataclass(frozen=True)
class CorpusStats:
    task_count: int
    pair_count: int
    mean_steps_per_sample: float
    mean_tokens_per_step: float

    def table(self) -> str:
        rows = [
            ("#Task", f"{self.task_count:,}"),
            ("#Pair", f"{self.pair_count:,}"),
            ("avg #Step", f"{self.mean_steps_per_sample:.2f}"),
            ("avg #Token", f"{self.mean_tokens_per_step:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def _clean(value: object) -> str | None:
    if value is None:
        return None
    if not isinstance(value, str):
        raise TypeError(f"expected text, got {type(value).__name__}")
    value = " ".join(value.split())
    return value or None


def _parse_task(record: object, drop_incomplete: bool, lineno: int) -> Task | None:
    if not isinstance(record, dict):
        raise CorpusError("record must be an object", lineno)
    for key in ("id", "goal", "steps"):
        if key not in record:
            raise CorpusError(f"missing field {key!r}", lineno)
    try:
        task_id = _clean(record["id"])
        goal = _clean(record["goal"])
        subgoal = _clean(record.get("subgoal"))
    except TypeError as exc:
        raise CorpusError(str(exc), lineno) from None
    if task_id is None:
        raise CorpusError("empty task id", lineno)
    if goal is None:
        raise CorpusError("empty goal", lineno)
    raw_steps = record["steps"]
    if not isinstance(raw_steps, list):
        raise CorpusError("'steps' must be a list", lineno)

    pairs: list[tuple[str, str]] = []
    for i, raw in enumerate(raw_steps, 1):
        if not isinstance(raw, dict) or "text" not in raw:
            raise CorpusError(f"step {i} must be an object with a 'text' field", lineno)
        try:
            text = _clean(raw["text"])
            caption = _clean(raw.get("caption"))
        except TypeError as exc:
            raise CorpusError(f"step {i}: {exc}", lineno) from None
        if text is None or caption is None:
            if drop_incomplete:
                continue
            what = "text" if text is None else "caption"
            raise CorpusError(f"step {i} has no {what} (use drop_incomplete to skip it)", lineno)
        pairs.append((text, caption))

    if len(pairs) < 2:
        return None
    steps = tuple(StepPair(i, t, c) for i, (t, c) in enumerate(pairs, 1))
    return Task(task_id, goal, subgoal, steps)


def parse_dataset(path: str | Path, drop_incomplete: bool = False, split: str | None = None) -> Corpus:
    """Read a JSON Lines dataset file into a validated :class:`Corpus`.

    Steps lacking text or caption are skipped when ``drop_incomplete`` is set and
    rejected otherwise. Tasks left with fewer than two steps are removed.
    The split defaults to the file stem when it names one of train/valid/test.
    """
    path = Path(path)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    tasks: list[Task] = []
    seen: set[str] = set()
    nonblank = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            nonblank += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed record ({exc.msg})", lineno) from None
            task = _parse_task(record, drop_incomplete, lineno)
            if task is None:
                continue
            if task.id in seen:
                raise CorpusError(f"duplicate task id {task.id!r}", lineno)
            seen.add(task.id)
            tasks.append(task)
    if nonblank == 0:
        raise CorpusError(f"{path} is empty")
    return Corpus(split, tasks)


def task_to_record(task: Task) -> dict:
    return {
        "id": task.id,
        "goal": task.goal,
        "subgoal": task.subgoal,
        "steps": [{"text": s.step_text, "caption": s.caption_text} for s in task.steps],
    }


def write_dataset(corpus: Corpus | Iterable[Task], path: str | Path) -> None:
    tasks = corpus.tasks if isinstance(corpus, Corpus) else corpus
    with Path(path).open("w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_record(task), ensure_ascii=False) + "\n")


def build_examples(corpus: Corpus, max_history: int = MAX_HISTORY) -> list[TrainingExample]:
    """One example per non-initial step; history keeps the most recent pairs."""
    if max_history < 1:
        raise ValueError("max_history must be >= 1")
    examples = []
    for task in corpus.tasks:
        pairs = [(s.step_text, s.caption_text) for s in task.steps]
        for n in range(1, len(pairs)):
            history = tuple(pairs[max(0, n - max_history):n])
            examples.append(
                TrainingExample(
                    goal=task.goal,
                    subgoal=task.subgoal,
                    history=history,
                    target=pairs[n][0],
                    task_id=task.id,
                    position=len(history),
                )
            )
    return examples


def corpus_stats(corpus: Corpus, tokenizer: Tokenizer | None = None) -> CorpusStats:
    """Task/pair counts and per-task, per-step averages.

    Without a tokenizer, tokens are counted with the same normalization the
    tokenizer applies (vocabulary membership does not affect the count).
    """
    from mmscript.text import normalize

    split = tokenizer.tokenize if tokenizer is not None else normalize
    n_tasks = len(corpus.tasks)
    n_pairs = corpus.pair_count()
    mean_steps = n_pairs / n_tasks if n_tasks else 0.0
    lengths = [len(split(s.step_text)) for t in corpus.tasks for s in t.steps]
    mean_tokens = statistics.fmean(lengths) if lengths else 0.0
    return CorpusStats(n_tasks, n_pairs, mean_steps, mean_tokens)
