import json
import os
from pathlib import Path

import numpy as np
import pytest

import daptkit

FIXTURES = Path(os.environ.get("DAPTKIT_FIXTURE_DIR", Path(__file__).resolve().parents[1] / "fixtures"))

DOMAIN = [
    "The numerator sits over the denominator. We simplify the fraction.",
    "A triangle has three sides and three angles. The perimeter adds the sides.",
    "Solve for x when the equation balances. The variable is unknown.",
] * 4


def tiny_config(vocab):
    return {
        "vocab_size": len(vocab),
        "max_seq": 16,
        "hidden_dim": 16,
        "num_layers": 1,
        "num_heads": 2,
        "ffn_dim": 32,
        "num_labels": 2,
        "dropout_rate": 0.0,
    }


@pytest.fixture(scope="module")
def vocab():
    v, merges = daptkit.train_vocabulary(DOMAIN, budget=80)
    assert len(v) == 80
    assert len(merges) > 0
    return v


def test_corpus_helpers():
    assert daptkit.normalize("  a\t\tb  ") == "a b"
    assert daptkit.split_sentences("One. Two!") == ["One.", "Two!"]
    stats = daptkit.corpus_stats(["a b c", "d"])
    assert stats["document_count"] == 2
    assert stats["token_count"] == 4


def test_split_sizes():
    assert daptkit.split_sizes(13722) == (9879, 1098, 2745)
    train, validate, test = daptkit.split(100, seed=3)
    assert sorted(train + validate + test) == list(range(100))


def test_vocabulary_round_trip(vocab, tmp_path):
    ids = vocab.encode("the fraction")
    assert vocab.decode(ids) == "the fraction"
    assert vocab.tokens()[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    path = tmp_path / "vocab.txt"
    vocab.save(str(path))
    assert daptkit.Vocabulary.load(str(path)) == vocab
    with pytest.raises(daptkit.DaptkitError):
        daptkit.Vocabulary.load(str(tmp_path / "missing.txt"))


def test_pretrain_and_checkpoint(vocab, tmp_path):
    segments = daptkit.pack_sequences(DOMAIN, vocab, max_seq=16)
    examples = daptkit.mask_segments(segments, vocab, rate=0.3, max_seq=16, seed=1)
    state = daptkit.init_model(tiny_config(vocab), seed=2)
    trained, log = daptkit.pretrain(
        state, examples, {"strategy": "dapt", "max_steps": 20, "batch_size": 4, "learning_rate": 1e-3, "seed": 2}
    )
    assert trained.content_hash() != state.content_hash()
    assert log["summary"]["steps"] == 20
    assert log["records"][-1]["step"] == 20
    assert 0.0 <= daptkit.mlm_accuracy(trained, examples) <= 1.0

    loss, logits = daptkit.forward_mlm(trained, examples[:2])
    assert np.isfinite(loss)
    assert logits.shape[1] == len(vocab)

    path = tmp_path / "m.ckpt"
    daptkit.save_checkpoint(trained, str(path), {"note": "smoke"})
    loaded = daptkit.load_checkpoint(str(path))
    assert loaded.content_hash() == trained.content_hash()
    np.testing.assert_array_equal(loaded.tensor("embeddings.token"), trained.tensor("embeddings.token"))


def test_finetune_and_predict(vocab):
    state = daptkit.with_classifier(daptkit.init_model(tiny_config(vocab), seed=4), 2, seed=4)
    texts = ["the fraction numerator", "the triangle sides"] * 10
    labels = [0, 1] * 10
    tuned, log, best = daptkit.finetune(
        state, vocab, texts, labels, texts[:4], labels[:4],
        {"strategy": "base", "epochs": 3, "batch_size": 4, "learning_rate": 3e-3, "seed": 4},
    )
    assert 1 <= best <= 3
    assert len(log["records"]) == 3
    logits = daptkit.predict_logits(tuned, ["the fraction", "the triangle"], vocab)
    assert logits.shape == (2, 2)


def test_metrics():
    assert daptkit.accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert daptkit.auc_binary([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0]) == 0.75
    assert daptkit.f1([0, 1, 2], [0, 1, 2], 3) == 1.0
    assert daptkit.auc_multiclass([[1, 0], [0, 1]], [0, 1]) == 1.0
    assert daptkit.scheduled_lr(1.0, 0.1, 10, 100) == pytest.approx(1.0)


def test_report_from_results():
    results = json.loads((FIXTURES / "results_table.json").read_text())
    table = daptkit.report_from_results(results)
    assert "**97.57**" in table
    assert "| d-p |" in table


def test_cli_entry_point(tmp_path):
    code, out, err = daptkit.run_cli(["stats", str(FIXTURES / "toy" / "domain")])
    assert code == 0, err
    assert json.loads(out)["document_count"] > 0
    code, _, _ = daptkit.run_cli(["no-such-command"])
    assert code == 2
