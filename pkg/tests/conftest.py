import json
import random
from pathlib import Path

import pytest

from mmscript import synthetic
from mmscript.corpus import Corpus, StepPair, Task
from mmscript.retrieval import build_index
from mmscript.text import build_vocab


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def make_task(task_id: str, steps, goal: str = "sew a button", subgoal=None) -> Task:
    return Task(task_id, goal, subgoal,
                tuple(StepPair(i, s, f"a photo of step {i}") for i, s in enumerate(steps, 1)))


def random_corpus(rng: random.Random, n_tasks: int, vocab=None) -> Corpus:
    vocab = vocab or "cut the thread pull out bobbin needle water roses dig hole soil your".split()
    tasks = []
    for t in range(n_tasks):
        n = rng.randint(2, 13)
        steps = [" ".join(rng.choices(vocab, k=rng.randint(1, 6))) for _ in range(n)]
        tasks.append(Task(f"t{t}", "goal " + rng.choice(vocab), None,
                          tuple(StepPair(i, s, "caption " + rng.choice(vocab)) for i, s in enumerate(steps, 1))))
    return Corpus("train", tasks)


@pytest.fixture(scope="session")
def synth_splits():
    return synthetic.make_splits(60, 10, 10, seed=3)


@pytest.fixture(scope="session")
def synth_tokenizer(synth_splits):
    return build_vocab(synth_splits["train"])


@pytest.fixture(scope="session")
def synth_index(synth_splits):
    return build_index(synth_splits["train"])


def micro_instance(seed: int, tokenizer, examples, texts, d_model: int = 8, batch_size: int = 2):
    """A randomly initialised 1-layer double-precision model with a small random batch
    that exercises retrieval (some rows empty) and negatives (ragged counts)."""
    import torch

    from mmscript.batch import collate
    from mmscript.model import ModelConfig, ScriptModel

    rng = random.Random(seed)
    cfg = ModelConfig(tokenizer.vocab_size, d_model=d_model, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                      ffn_dim=2 * d_model, dropout_rate=0.0)
    model = ScriptModel(cfg, seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            # move every parameter off its structured init (zero biases, unit LN gains)
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    exs = rng.sample(examples, batch_size)
    retrieved = [rng.sample(texts, rng.randint(0, 3)) for _ in exs]
    if not any(retrieved):
        retrieved[0] = [rng.choice(texts)]
    negatives = [rng.sample(texts, rng.randint(1, 3)) for _ in exs]
    return model, collate(tokenizer, exs, retrieved, negatives)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
