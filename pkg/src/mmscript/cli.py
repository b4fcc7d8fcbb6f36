"""Command-line pipeline: ingest -> index -> train -> generate -> eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from mmscript import __version__

log = logging.getLogger("mmscript")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: Sequence[str | Path],
                   config: dict | None = None, started: datetime | None = None) -> Path:
    """Record how an output was produced; timestamps live only here."""
    manifest = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "started": (started or datetime.now(timezone.utc)).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    path = out.parent / f"{out.name}.run.json" if not out.is_dir() else out / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def cmd_ingest(args: argparse.Namespace) -> int:
    from mmscript.corpus import corpus_stats, parse_dataset, write_dataset

    started = datetime.now(timezone.utc)
    corpus = parse_dataset(args.data, drop_incomplete=args.drop_incomplete)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(corpus, out)
    print(corpus_stats(corpus).table())
    write_manifest(out, "ingest", args, [args.data], started=started)
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    from mmscript.corpus import parse_dataset
    from mmscript.retrieval import build_index

    started = datetime.now(timezone.utc)
    corpus = parse_dataset(args.train)
    index = build_index(corpus, dim=args.dim)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    print(f"index: {len(index)} entries, dim {index.dim}")
    write_manifest(out, "index", args, [args.train], started=started)
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    from mmscript.retrieval import EmbeddingIndex, retrieve_next_steps

    index = EmbeddingIndex.load(args.index)
    queries = [args.query] if args.query else Path(args.queries).read_text(encoding="utf-8").splitlines()
    print("query\trank\tscore\tretrieved\tsource_task")
    for q in queries:
        res = retrieve_next_steps(index, q, args.k)
        for rank, (step, score, tid) in enumerate(zip(res.steps, res.scores, res.task_ids), 1):
            print(f"{q}\t{rank}\t{score:.6f}\t{step}\t{tid}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from mmscript.corpus import parse_dataset
    from mmscript.retrieval import EmbeddingIndex
    from mmscript.text import build_vocab
    from mmscript.training import TrainConfig, train

    started = datetime.now(timezone.utc)
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    index = None
    if args.index:
        if not Path(args.index).is_file():
            raise FileNotFoundError(f"index {args.index} not found; build it first with `mmscript index`")
        index = EmbeddingIndex.load(args.index)
    elif cfg.k_retrieved > 0:
        raise ValueError("k_retrieved > 0 requires --index; build one with `mmscript index`")
    train_corpus = parse_dataset(args.train, split="train")
    valid_corpus = parse_dataset(args.valid, split="valid")
    tokenizer = build_vocab(train_corpus)
    result = train(train_corpus, valid_corpus, tokenizer, index, cfg, args.out)
    print(f"best epoch {result.best_epoch}; checkpoint {result.checkpoint}; log {result.log_path}")
    from dataclasses import asdict

    write_manifest(Path(args.out), "train", args, [args.config, args.train, args.valid, args.index],
                   config=asdict(cfg), started=started)
    return 0


def _load_run(ckpt: str | Path):
    from mmscript.model import load_checkpoint
    from mmscript.text import Tokenizer

    model, header = load_checkpoint(ckpt)
    tokenizer = Tokenizer.load(Path(ckpt).parent / "vocab.txt")
    if header.get("vocab_hash") not in (None, tokenizer.fingerprint()):
        raise ValueError("vocab.txt does not match the checkpoint")
    if tokenizer.vocab_size != model.cfg.vocab_size:
        raise ValueError("checkpoint vocabulary size does not match vocab.txt")
    return model, tokenizer, header


def cmd_generate(args: argparse.Namespace) -> int:
    import torch

    from mmscript.corpus import build_examples, parse_dataset
    from mmscript.inference import generate
    from mmscript.retrieval import EmbeddingIndex, retrieve_next_steps

    started = datetime.now(timezone.utc)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    model, tokenizer, header = _load_run(args.ckpt)
    k = int(header.get("k_retrieved", 0))
    index = EmbeddingIndex.load(args.index) if args.index else None
    if k > 0 and index is None:
        raise ValueError("this checkpoint was trained with retrieval; pass --index")
    examples = build_examples(parse_dataset(args.corpus), int(header.get("max_history", 10)))
    lines = []
    for ex in examples:
        retr = retrieve_next_steps(index, ex.last_step, k).steps if k > 0 else []
        text = generate(model, tokenizer, ex, retr, beam=args.beam, max_len=args.max_len)
        lines.append(f"{ex.task_id}\t{ex.position}\t{text}")
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(body, encoding="utf-8")
        write_manifest(Path(args.out), "generate", args, [args.ckpt, args.corpus, args.index], started=started)
    else:
        sys.stdout.write(body)
    return 0


def read_generations(path: str | Path) -> dict[tuple[str, int], str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}: line {lineno}: expected task_id<TAB>position<TAB>text")
        out[(parts[0], int(parts[1]))] = parts[2]
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    from mmscript import metrics
    from mmscript.corpus import build_examples, parse_dataset
    from mmscript.retrieval import EmbeddingIndex

    corpus = parse_dataset(args.corpus)
    gens = read_generations(args.generations)
    examples = [ex for ex in build_examples(corpus) if (ex.task_id, ex.position) in gens]
    if not examples:
        raise ValueError("no generation matches an example of the corpus")
    generated = [gens[(ex.task_id, ex.position)] for ex in examples]
    which = args.metrics.split(",") if args.metrics else metrics.ALL_METRICS
    embedder = EmbeddingIndex.load(args.index).embedder if args.index else None
    if "text_at_1" in which and embedder is None:
        print("note: text_at_1 needs --index (fitted embedder); skipped", file=sys.stderr)
    report = metrics.evaluate(generated, examples, corpus, embedder, which, smooth=args.smooth,
                              include_history_in_pool=not args.exclude_history)
    print(report.table())
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(report.to_json() + "\n")
    if args.per_example:
        print("\n".join(metrics.per_example_rows(generated, examples, corpus, embedder)))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    from mmscript.corpus import write_dataset
    from mmscript.synthetic import inject_noise, make_splits

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, corpus in make_splits(args.train_tasks, args.eval_tasks, args.eval_tasks, args.seed).items():
        if args.noise:
            corpus = inject_noise(corpus)
        write_dataset(corpus, out / f"{name}.jsonl")
    print(f"wrote train/valid/test splits to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmscript", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a dataset and print its statistics")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--drop-incomplete", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("index", help="build the step retrieval index")
    s.add_argument("--train", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=512)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", help="print top-k retrieved next steps as TSV")
    s.add_argument("--index", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--query")
    g.add_argument("--queries", help="file with one query per line")
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--train", required=True)
    s.add_argument("--valid", required=True)
    s.add_argument("--index")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="beam-search the next step for every example")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--index")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--max-len", type=int, default=40)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="score generations against a corpus")
    s.add_argument("--generations", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--metrics", help="comma-separated subset of: " + ",".join(
        ("bleu", "rouge_l", "self_bleu", "distinct", "history_overlap", "text_at_1")))
    s.add_argument("--index", help="step index whose embedder scores text_at_1")
    s.add_argument("--per-example", action="store_true")
    s.add_argument("--json")
    s.add_argument("--smooth", action="store_true")
    s.add_argument("--exclude-history", action="store_true", help="drop history steps from the Text@1 pool")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a procedurally generated corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--train-tasks", type=int, default=200)
    s.add_argument("--eval-tasks", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", action="store_true")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
