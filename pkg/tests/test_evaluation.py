import json

import numpy as np
import pytest

from conftest import make_sample
from sttpersonal.errors import EmptyDataset
from sttpersonal.evaluation import (
    EvalReport,
    ItemResult,
    SpeakerReport,
    SpeakerResult,
    edit_distance_words,
    evaluate_set,
    wer,
)
from sttpersonal.model import init_model


def _oracle(ref, hyp) -> int:
    """全行列を持つ素直な動的計画法。"""
    d = np.zeros((len(ref) + 1, len(hyp) + 1), dtype=int)
    d[:, 0] = np.arange(len(ref) + 1)
    d[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    return int(d[-1, -1])


def test_identical():
    b = wer("the cat sat", "the cat sat")
    assert (b.substitutions, b.deletions, b.insertions) == (0, 0, 0)
    assert b.wer_percent == 0.0


def test_one_deletion():
    b = wer("the cat sat", "the cat")
    assert (b.substitutions, b.deletions, b.insertions) == (0, 1, 0)
    assert b.wer_percent == pytest.approx(100.0 / 3.0)


def test_substitution_and_insertion():
    b = wer("a b", "a x b c")
    assert b.errors == 2
    assert b.wer_percent == pytest.approx(100.0)


def test_empty_reference():
    b = wer("", "extra words")
    assert b.insertions == 2
    assert b.wer_percent == 200.0


def test_ties_prefer_fewer_insertions():
    # 置換2つでも、挿入1つ+削除1つでも同じコスト
    b = edit_distance_words(["a", "b"], ["b", "c"])
    assert b.errors == 2
    assert b.insertions <= b.deletions


def test_matches_quadratic_oracle():
    rng = np.random.default_rng(0)
    vocab = ["w0", "w1", "w2", "w3"]
    for _ in range(500):
        ref = list(rng.choice(vocab, size=int(rng.integers(0, 9))))
        hyp = list(rng.choice(vocab, size=int(rng.integers(0, 9))))
        assert edit_distance_words(ref, hyp).errors == _oracle(ref, hyp)


def test_report_means():
    items = [ItemResult("a", "x y", "x y", 0.0), ItemResult("b", "x y", "x", 50.0)]
    report = EvalReport.from_items(items, [wer("x y", "x y"), wer("x y", "x")])
    assert report.mean_wer == 25.0
    assert report.word_weighted_wer == 25.0
    assert report.mean_loss is None


def test_word_weighted_differs_from_mean():
    items = [ItemResult("a", "x", "y", 100.0), ItemResult("b", "x y z w", "x y z w", 0.0)]
    report = EvalReport.from_items(items, [wer("x", "y"), wer("x y z w", "x y z w")])
    assert report.mean_wer == 50.0
    assert report.word_weighted_wer == 20.0


def test_report_json_schema():
    items = [ItemResult("a", "x y", "x", 50.0, 1.5)]
    report = EvalReport.from_items(items, [wer("x y", "x")])
    loaded = EvalReport.from_json(report.to_json())
    assert loaded.mean_wer == report.mean_wer
    assert loaded.mean_loss == 1.5
    assert loaded.items[0].hyp == "x"


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.pop("mean_wer"),
        lambda d: d.update(extra=1),
        lambda d: d.update(items={}),
        lambda d: d["items"][0].update(wer="high"),
        lambda d: d["items"][0].update(wer=-1.0),
        lambda d: d["items"][0].pop("hyp"),
        lambda d: d.update(mean_loss="n/a"),
    ],
)
def test_report_schema_violations(mutate):
    d = EvalReport.from_items([ItemResult("a", "x", "x", 0.0, 0.1)], [wer("x", "x")]).to_dict()
    mutate(d)
    with pytest.raises(ValueError):
        EvalReport.from_json(json.dumps(d))


def test_empty_report():
    with pytest.raises(EmptyDataset):
        EvalReport.from_items([], [])


def test_evaluate_set(tiny_config):
    params = init_model(tiny_config, 0)
    rng = np.random.default_rng(0)
    samples = [make_sample(rng.normal(size=(8, 6)), [0, 1], id=f"u{i}", text="ab") for i in range(3)]
    report = evaluate_set(params, samples, batch_size=2)
    assert [item.id for item in report.items] == ["u0", "u1", "u2"]
    assert report.mean_loss is not None and report.mean_loss > 0.0
    for item in report.items:
        assert item.wer == wer(item.ref, item.hyp).wer_percent


def test_evaluate_set_with_a_clip_too_short_for_its_label(tiny_config, caplog):
    params = init_model(tiny_config, 0)
    rng = np.random.default_rng(1)
    short = make_sample(np.zeros((2, 6)), [0, 1, 2], id="short", text="abc")
    ok = make_sample(rng.normal(size=(8, 6)), [0, 1], id="ok", text="ab")
    with caplog.at_level("WARNING", logger="sttpersonal.evaluation"):
        report = evaluate_set(params, [short, ok], batch_size=2)
    by_id = {item.id: item for item in report.items}
    assert by_id["short"].loss is None
    assert by_id["short"].wer == wer("abc", by_id["short"].hyp).wer_percent
    assert report.mean_loss == pytest.approx(by_id["ok"].loss)
    assert report.mean_wer == pytest.approx((by_id["short"].wer + by_id["ok"].wer) / 2)
    assert "short" in caplog.text


def test_evaluate_set_without_any_loss(tiny_config):
    report = evaluate_set(init_model(tiny_config, 0), [make_sample(np.zeros((1, 6)), [0, 1], text="ab")])
    assert report.mean_loss is None
    assert len(report.items) == 1


def test_evaluate_empty(tiny_config):
    with pytest.raises(EmptyDataset):
        evaluate_set(init_model(tiny_config, 0), [])


def test_speaker_report():
    report = SpeakerReport()
    with pytest.raises(EmptyDataset):
        report.mean_drop
    assert report.to_dict()["mean_drop"] is None
    report.add(SpeakerResult("voice7", 40.0, 30.0, 5, 1.2))
    report.add(SpeakerResult("voice8", 20.0, 20.0, 3, 1.0))
    assert report.mean_drop == 5.0
    d = json.loads(report.to_json())
    assert [s["drop"] for s in d["speakers"]] == [10.0, 0.0]
