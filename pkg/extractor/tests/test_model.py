"""Checkpoint loading and the numpy forward pass."""

import json

import numpy as np
import pytest

from traceextract import CheckpointError, TinyGPT

from conftest import build_checkpoint


@pytest.fixture(scope="module")
def model(tmp_path_factory):
    return TinyGPT.load(build_checkpoint(tmp_path_factory.mktemp("m")))


def test_load_reads_config_and_weights(model):
    assert model.model_id == "tiny-demo"
    assert (model.n_layer, model.d_model, model.n_head) == (3, 16, 4)


def test_param_count_matches_array_sizes(model):
    assert model.param_count == sum(w.size for w in model.w.values())


def test_forward_shapes_and_determinism(model):
    ids = model.tokenizer.encode("Which gas do plants absorb?")
    logits1, hidden1 = model.forward(ids, capture_layer=2)
    logits2, hidden2 = model.forward(ids, capture_layer=2)
    assert logits1.shape == (model.vocab_size,)
    assert hidden1.shape == (model.d_model,)
    assert np.array_equal(logits1, logits2)
    assert np.array_equal(hidden1, hidden2)


def test_each_layer_produces_distinct_hidden(model):
    ids = model.tokenizer.encode("the boiling point of water")
    hiddens = [model.forward(ids, capture_layer=k)[1] for k in (1, 2, 3)]
    assert not np.array_equal(hiddens[0], hiddens[1])
    assert not np.array_equal(hiddens[1], hiddens[2])


def test_capture_layer_bounds(model):
    ids = model.tokenizer.encode("hello")
    for bad in (0, 4, 99):
        with pytest.raises(CheckpointError, match="outside model depth"):
            model.forward(ids, capture_layer=bad)


def test_empty_and_oversized_prompts_rejected(model):
    with pytest.raises(CheckpointError, match="empty prompt"):
        model.forward([], capture_layer=1)
    with pytest.raises(CheckpointError, match="context window"):
        model.forward([1] * (model.n_ctx + 1), capture_layer=1)


def test_greedy_continue_consistent_with_forward(model):
    ids = model.tokenizer.encode("Answer:")
    logits, _ = model.forward(ids, capture_layer=1)
    out = model.greedy_continue(ids, max_new=3, stop_texts=())
    assert out[0] == int(np.argmax(logits))
    assert len(out) == 3


def test_greedy_continue_stops_at_stop_text(model):
    ids = model.tokenizer.encode("Answer:")
    first = model.greedy_continue(ids, max_new=5, stop_texts=())[0]
    stop = model.tokenizer.token_text(first)
    assert model.greedy_continue(ids, max_new=5, stop_texts=(stop,)) == []


def test_missing_weight_key_rejected(tmp_path):
    ckpt = build_checkpoint(tmp_path)
    with np.load(ckpt / "weights.npz") as npz:
        weights = {k: npz[k] for k in npz.files}
    weights.pop("h1.fc.w")
    np.savez(ckpt / "weights.npz", **weights)
    with pytest.raises(CheckpointError, match="missing 'h1.fc.w'"):
        TinyGPT.load(ckpt)


def test_wrong_shape_rejected(tmp_path):
    ckpt = build_checkpoint(tmp_path)
    with np.load(ckpt / "weights.npz") as npz:
        weights = {k: npz[k] for k in npz.files}
    weights["ln_f.g"] = np.ones(7)
    np.savez(ckpt / "weights.npz", **weights)
    with pytest.raises(CheckpointError, match="ln_f.g has shape"):
        TinyGPT.load(ckpt)


def test_vocab_size_mismatch_rejected(tmp_path):
    ckpt = build_checkpoint(tmp_path)
    config = json.loads((ckpt / "config.json").read_text())
    config["vocab_size"] += 1
    # weights must agree with config so the tokenizer check fires first
    with np.load(ckpt / "weights.npz") as npz:
        weights = {k: npz[k] for k in npz.files}
    weights["tok_emb"] = np.zeros((config["vocab_size"], config["d_model"]))
    np.savez(ckpt / "weights.npz", **weights)
    (ckpt / "config.json").write_text(json.dumps(config), encoding="utf-8")
    with pytest.raises(CheckpointError, match="config declares"):
        TinyGPT.load(ckpt)


def test_missing_config_key_rejected(tmp_path):
    ckpt = build_checkpoint(tmp_path)
    config = json.loads((ckpt / "config.json").read_text())
    del config["n_head"]
    (ckpt / "config.json").write_text(json.dumps(config), encoding="utf-8")
    with pytest.raises(CheckpointError, match="missing 'n_head'"):
        TinyGPT.load(ckpt)


def test_unreadable_checkpoint_dir(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        TinyGPT.load(tmp_path / "nope")
