"""Procedurally generated script corpora with a learnable next-step rule.

Every task follows the same grammar: the action of step i+1 is a fixed
function of the action of step i and a cue word carried by the caption of
step i. The object named in the goal is repeated in each step, so a model has
to both apply the transition table and copy the object.
"""

from __future__ import annotations

import random
from dataclasses import replace

from mmscript.corpus import Corpus, StepPair, Task

OBJECTS = [
    "roses", "tulips", "tomatoes", "basil", "ferns", "orchids", "peppers", "lilies",
    "cucumbers", "daisies", "carrots", "violets", "onions", "peonies", "lettuce", "mint",
]
GOAL_VERBS = ["grow", "care for", "plant", "raise"]

# action -> step template; {o} is the object
ACTIONS = {
    "dig": "dig a hole for the {o}",
    "water": "water the {o} thoroughly",
    "prune": "prune the {o} with shears",
    "feed": "feed the {o} with compost",
    "mulch": "spread mulch around the {o}",
    "stake": "tie the {o} to a stake",
    "shade": "move the {o} into the shade",
    "harvest": "harvest the ripe {o}",
}
CUES = ["dry", "wilted", "crowded"]
CAPTIONS = [
    "a {c} patch of {o} in the garden",
    "a photo of {c} {o} near a fence",
    "some {c} {o} in a clay pot",
]

# next action for (current action, caption cue)
TRANSITIONS = {
    ("dig", "dry"): "water", ("dig", "wilted"): "feed", ("dig", "crowded"): "stake",
    ("water", "dry"): "mulch", ("water", "wilted"): "shade", ("water", "crowded"): "prune",
    ("prune", "dry"): "water", ("prune", "wilted"): "feed", ("prune", "crowded"): "harvest",
    ("feed", "dry"): "water", ("feed", "wilted"): "shade", ("feed", "crowded"): "prune",
    ("mulch", "dry"): "shade", ("mulch", "wilted"): "feed", ("mulch", "crowded"): "stake",
    ("stake", "dry"): "water", ("stake", "wilted"): "prune", ("stake", "crowded"): "harvest",
    ("shade", "dry"): "mulch", ("shade", "wilted"): "water", ("shade", "crowded"): "prune",
    ("harvest", "dry"): "dig", ("harvest", "wilted"): "feed", ("harvest", "crowded"): "stake",
}

NOISE_CAPTION = "a pair of scissors and a measuring tape"
NOISE_STEP = "gather your supplies"


def step_text(action: str, obj: str) -> str:
    return ACTIONS[action].format(o=obj)


def make_task(rng: random.Random, task_id: str, min_steps: int = 3, max_steps: int = 6) -> Task:
    obj = rng.choice(OBJECTS)
    goal = f"{rng.choice(GOAL_VERBS)} {obj}"
    action = rng.choice(sorted(ACTIONS))
    n = rng.randint(min_steps, max_steps)
    steps = []
    for i in range(1, n + 1):
        cue = rng.choice(CUES)
        caption = rng.choice(CAPTIONS).format(c=cue, o=obj)
        steps.append(StepPair(i, step_text(action, obj), caption))
        action = TRANSITIONS[(action, cue)]
    return Task(task_id, goal, None, tuple(steps))


def make_corpus(n_tasks: int, seed: int = 0, split: str = "train", prefix: str | None = None,
                min_steps: int = 3, max_steps: int = 6) -> Corpus:
    rng = random.Random(f"{seed}:{split}")
    prefix = prefix or split
    tasks = [make_task(rng, f"{prefix}-{i:04d}", min_steps, max_steps) for i in range(n_tasks)]
    return Corpus(split, tasks)


def make_splits(n_train: int = 200, n_valid: int = 40, n_test: int = 40,
                seed: int = 0) -> dict[str, Corpus]:
    return {
        "train": make_corpus(n_train, seed, "train"),
        "valid": make_corpus(n_valid, seed, "valid"),
        "test": make_corpus(n_test, seed, "test"),
    }


def inject_noise(corpus: Corpus) -> Corpus:
    """Prepend a fixed uninformative step whose caption is a constant distractor,
    so every example built from the corpus carries the same noise caption."""
    tasks = []
    for task in corpus.tasks:
        steps = [StepPair(1, NOISE_STEP, NOISE_CAPTION)]
        steps += [replace(s, index=s.index + 1) for s in task.steps]
        tasks.append(replace(task, steps=tuple(steps)))
    return Corpus(corpus.split, tasks)
