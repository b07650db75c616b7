"""Deterministic fixtures: a tiny seeded checkpoint and toy datasets."""

import csv
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from traceextract import ByteBPE

CORPUS = (
    "The following are multiple choice questions about chemistry. "
    "Which gas do plants absorb from the air? "
    "A. oxygen B. carbon dioxide C. nitrogen D. helium Answer: B "
    "The answer is the option that the question points at. "
    "What is the boiling point of water at sea level? "
    "A. 50 C B. 75 C C. 100 C D. 150 C Answer: C "
    "Questions about history and biology follow the same shape. "
    "the the the and and of of to in is was for on that A B C D "
)

QUESTIONS = [
    ("chemistry", "Which gas do plants absorb from the air?",
     ["oxygen", "carbon dioxide", "nitrogen", "helium"], "B"),
    ("chemistry", "What is the boiling point of water at sea level in celsius?",
     ["50", "75", "100", "150"], "C"),
    ("biology", "How many legs does a spider have?",
     ["six", "eight", "ten", "four"], "B"),
    ("history", "In which year did the second world war end?",
     ["1918", "1939", "1945", "1950"], "C"),
    ("geography", "Which is the largest ocean?",
     ["Atlantic", "Indian", "Arctic", "Pacific"], "D"),
    ("math", "What is seven times eight?",
     ["54", "56", "63", "49"], "B"),
    ("physics", "What force pulls objects toward the earth?",
     ["magnetism", "friction", "gravity", "tension"], "C"),
    ("literature", "Who wrote Romeo and Juliet?",
     ["Dickens", "Shakespeare", "Austen", "Tolstoy"], "B"),
]


def build_checkpoint(root: Path, *, model_id="tiny-demo", n_layer=3, n_head=4,
                     d_model=16, n_ctx=256, seed=11, n_merges=80) -> Path:
    ckpt = root / model_id
    ckpt.mkdir(parents=True, exist_ok=True)
    tok = ByteBPE.train(CORPUS, n_merges)
    tok.save(ckpt / "tokenizer.json")
    vocab_size = len(tok)
    rng = np.random.default_rng(seed)
    weights = {
        "tok_emb": rng.normal(size=(vocab_size, d_model)) * 0.3,
        "pos_emb": rng.normal(size=(n_ctx, d_model)) * 0.05,
        "ln_f.g": np.ones(d_model), "ln_f.b": np.zeros(d_model),
    }
    for i in range(n_layer):
        weights.update({
            f"h{i}.ln1.g": np.ones(d_model), f"h{i}.ln1.b": np.zeros(d_model),
            f"h{i}.attn.w": rng.normal(size=(d_model, 3 * d_model)) * 0.15,
            f"h{i}.attn.b": np.zeros(3 * d_model),
            f"h{i}.proj.w": rng.normal(size=(d_model, d_model)) * 0.15,
            f"h{i}.proj.b": np.zeros(d_model),
            f"h{i}.ln2.g": np.ones(d_model), f"h{i}.ln2.b": np.zeros(d_model),
            f"h{i}.fc.w": rng.normal(size=(d_model, 4 * d_model)) * 0.15,
            f"h{i}.fc.b": np.zeros(4 * d_model),
            f"h{i}.out.w": rng.normal(size=(4 * d_model, d_model)) * 0.15,
            f"h{i}.out.b": np.zeros(d_model),
        })
    np.savez(ckpt / "weights.npz", **weights)
    (ckpt / "config.json").write_text(json.dumps({
        "model_id": model_id, "n_layer": n_layer, "n_head": n_head,
        "d_model": d_model, "n_ctx": n_ctx, "vocab_size": vocab_size,
    }), encoding="utf-8")
    return ckpt


def write_jsonl_dataset(path: Path, questions=QUESTIONS) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        for i, (subject, question, choices, gold) in enumerate(questions):
            fh.write(json.dumps({
                "query_id": f"toy-{i:03d}", "subject": subject,
                "question": question, "choices": choices, "gold": gold,
            }) + "\n")
    return path


def write_csv_dataset(path: Path, questions=QUESTIONS) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["query_id", "subject", "question",
                                                "choices", "gold"])
        writer.writeheader()
        for i, (subject, question, choices, gold) in enumerate(questions):
            writer.writerow({"query_id": f"toy-{i:03d}", "subject": subject,
                             "question": question, "choices": "||".join(choices),
                             "gold": gold})
    return path


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory) -> Path:
    return build_checkpoint(tmp_path_factory.mktemp("ckpt"))


@pytest.fixture(scope="session")
def toy_jsonl(tmp_path_factory) -> Path:
    return write_jsonl_dataset(tmp_path_factory.mktemp("data") / "toy8.jsonl")


@pytest.fixture(scope="session")
def toy_csv(tmp_path_factory) -> Path:
    return write_csv_dataset(tmp_path_factory.mktemp("data") / "toy8.csv")


MC_TEMPLATE = ("The following are multiple choice questions about {subject}.\n"
               "{question}\n{choices}\nAnswer:")
