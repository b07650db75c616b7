"""Minimal GPT-style decoder inference in numpy.

Checkpoint layout (a directory):
  config.json    model_id, n_layer, n_head, d_model, n_ctx, vocab_size
  weights.npz    tok_emb, pos_emb, per-block h{i}.* tensors, ln_f.{g,b}
  tokenizer.json byte-level BPE vocab + merges

The residual stream after block k (1-based) is the "k-th transformer
layer" hidden state. The unembedding is tied to tok_emb.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bpe import ByteBPE


class CheckpointError(ValueError):
    """Checkpoint directory is missing pieces or shapes disagree."""


_BLOCK_KEYS = ("ln1.g", "ln1.b", "attn.w", "attn.b", "proj.w", "proj.b",
               "ln2.g", "ln2.b", "fc.w", "fc.b", "out.w", "out.b")


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TinyGPT:
    """A loaded checkpoint: config, weights, and its tokenizer."""

    def __init__(self, config: dict, weights: dict[str, np.ndarray], tokenizer: ByteBPE):
        self.model_id = config["model_id"]
        self.n_layer = config["n_layer"]
        self.n_head = config["n_head"]
        self.d_model = config["d_model"]
        self.n_ctx = config["n_ctx"]
        self.vocab_size = config["vocab_size"]
        self.w = weights
        self.tokenizer = tokenizer
        self._check_shapes()

    @classmethod
    def load(cls, path: str | Path) -> "TinyGPT":
        path = Path(path)
        try:
            config = json.loads((path / "config.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read {path / 'config.json'}: {exc}") from None
        for key in ("model_id", "n_layer", "n_head", "d_model", "n_ctx", "vocab_size"):
            if key not in config:
                raise CheckpointError(f"config.json missing {key!r}")
        try:
            with np.load(path / "weights.npz") as npz:
                weights = {k: npz[k] for k in npz.files}
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read {path / 'weights.npz'}: {exc}") from None
        tokenizer = ByteBPE.load(path / "tokenizer.json")
        if len(tokenizer) != config["vocab_size"]:
            raise CheckpointError(
                f"tokenizer has {len(tokenizer)} tokens, config declares {config['vocab_size']}")
        return cls(config, weights, tokenizer)

    def _check_shapes(self) -> None:
        d, v = self.d_model, self.vocab_size
        if d % self.n_head != 0:
            raise CheckpointError(f"d_model {d} not divisible by n_head {self.n_head}")
        want = {"tok_emb": (v, d), "pos_emb": (self.n_ctx, d),
                "ln_f.g": (d,), "ln_f.b": (d,)}
        for i in range(self.n_layer):
            want.update({
                f"h{i}.ln1.g": (d,), f"h{i}.ln1.b": (d,),
                f"h{i}.attn.w": (d, 3 * d), f"h{i}.attn.b": (3 * d,),
                f"h{i}.proj.w": (d, d), f"h{i}.proj.b": (d,),
                f"h{i}.ln2.g": (d,), f"h{i}.ln2.b": (d,),
                f"h{i}.fc.w": (d, 4 * d), f"h{i}.fc.b": (4 * d,),
                f"h{i}.out.w": (4 * d, d), f"h{i}.out.b": (d,),
            })
        for key, shape in want.items():
            if key not in self.w:
                raise CheckpointError(f"weights.npz missing {key!r}")
            if self.w[key].shape != shape:
                raise CheckpointError(
                    f"{key} has shape {self.w[key].shape}, expected {shape}")

    @property
    def param_count(self) -> int:
        return int(sum(w.size for w in self.w.values()))

    # -- inference ----------------------------------------------------------

    def forward(self, token_ids: list[int], capture_layer: int) -> tuple[np.ndarray, np.ndarray]:
        """One pass; returns (last-position logits, hidden after block capture_layer).

        capture_layer is 1-based; the hidden state is the residual stream
        at the final input position, before any generation.
        """
        if not token_ids:
            raise CheckpointError("cannot run a forward pass on an empty prompt")
        if len(token_ids) > self.n_ctx:
            raise CheckpointError(
                f"prompt is {len(token_ids)} tokens, context window is {self.n_ctx}")
        if not 1 <= capture_layer <= self.n_layer:
            raise CheckpointError(
                f"capture layer {capture_layer} outside model depth 1..{self.n_layer}")
        ids = np.asarray(token_ids)
        x = self.w["tok_emb"][ids] + self.w["pos_emb"][: len(ids)]
        mask = np.triu(np.full((len(ids), len(ids)), -1e9), k=1)
        captured: np.ndarray | None = None
        for i in range(self.n_layer):
            x = x + self._attn(i, _layer_norm(x, self.w[f"h{i}.ln1.g"], self.w[f"h{i}.ln1.b"]), mask)
            h = _layer_norm(x, self.w[f"h{i}.ln2.g"], self.w[f"h{i}.ln2.b"])
            x = x + _gelu(h @ self.w[f"h{i}.fc.w"] + self.w[f"h{i}.fc.b"]) @ self.w[f"h{i}.out.w"] + self.w[f"h{i}.out.b"]
            if i + 1 == capture_layer:
                captured = x[-1].copy()
        final = _layer_norm(x, self.w["ln_f.g"], self.w["ln_f.b"])
        logits = final[-1] @ self.w["tok_emb"].T
        assert captured is not None
        return logits, captured

    def _attn(self, i: int, x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        t, d = x.shape
        hd = d // self.n_head
        qkv = x @ self.w[f"h{i}.attn.w"] + self.w[f"h{i}.attn.b"]
        q, k, v = np.split(qkv, 3, axis=-1)
        shape = (t, self.n_head, hd)
        q = q.reshape(shape).transpose(1, 0, 2)
        k = k.reshape(shape).transpose(1, 0, 2)
        v = v.reshape(shape).transpose(1, 0, 2)
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd) + mask
        out = softmax(scores) @ v
        out = out.transpose(1, 0, 2).reshape(t, d)
        return out @ self.w[f"h{i}.proj.w"] + self.w[f"h{i}.proj.b"]

    def greedy_continue(self, token_ids: list[int], max_new: int,
                        stop_texts: tuple[str, ...] = ("\n",)) -> list[int]:
        """Greedy decoding from a prompt; stops at a stop text or max_new."""
        out: list[int] = []
        ids = list(token_ids)
        for _ in range(max_new):
            if len(ids) >= self.n_ctx:
                break
            logits, _ = self.forward(ids, capture_layer=1)
            nxt = int(np.argmax(logits))
            if self.tokenizer.token_text(nxt) in stop_texts:
                break
            out.append(nxt)
            ids.append(nxt)
        return out
