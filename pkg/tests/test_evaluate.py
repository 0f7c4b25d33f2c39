import csv
import json

import numpy as np
import pytest

from concept_agent.backends import ConceptLlm, ScriptedLlm
from concept_agent.evaluate import (
    DISTINGUISHABILITY,
    MODES,
    THRESHOLDS,
    TRUTHFULNESS,
    EvaluationError,
    ExplanationProfile,
    Mcq,
    McqResult,
    build_mcqs,
    distinguishability_mcqs,
    distractor_sets,
    evaluate,
    extract_explanations,
    global_minmax,
    judge,
    local_minmax,
    score_interpretability,
    similarity_ranking,
    truthfulness_mcqs,
    write_mcqs,
    write_results,
    write_table,
)

import oracles


def _profile(label, contributions):
    names = [f"{label} feature {i}" for i in range(len(contributions))]
    return ExplanationProfile(label, names, list(contributions))


def test_local_minmax_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        row = rng.normal(size=rng.integers(1, 7))
        assert np.allclose(local_minmax(row), oracles.local_minmax(row.tolist()))
    assert local_minmax(np.array([0.4, -1.0])).tolist() == [1.0, 0.0]


def test_global_minmax_bounds():
    out = global_minmax(np.array([0.2, 0.5, 0.0]))
    assert out.max() == 1.0 and out.min() == 0.0
    assert global_minmax(np.array([0.3, 0.3])).tolist() == [1.0, 1.0]
    assert global_minmax(np.zeros(2)).tolist() == [0.0, 0.0]


def test_single_sample_two_stage_normalization():
    scores = np.array([[[0.2, 0.6]]])
    profiles = extract_explanations(scores, np.array([0]), ["cat"], ["fur", "whiskers"])
    assert profiles["cat"].normalized == [0.0, 1.0]
    assert profiles["cat"].concepts == ["whiskers"] and profiles["cat"].contributions == [1.0]


def test_identical_samples_match_single_sample():
    row = np.array([[0.2, 0.9, 0.5], [0.1, 0.0, 0.3]])
    one = extract_explanations(row[None], np.array([0]), ["a", "b"], ["x", "y", "z"])
    two = extract_explanations(np.stack([row, row]), np.array([0, 0]), ["a", "b"], ["x", "y", "z"])
    assert one == two and "b" not in one


def test_non_positive_label_gives_empty_profile():
    scores = np.array([[[-0.1, -0.5]]])
    profile = extract_explanations(scores, np.array([0]), ["cat"], ["fur", "tail"])["cat"]
    assert len(profile) == 0
    with pytest.raises(EvaluationError):
        truthfulness_mcqs(profile)


def test_extract_shape_check():
    with pytest.raises(EvaluationError):
        extract_explanations(np.zeros((1, 2, 2)), np.array([0]), ["a"], ["x", "y"])


def test_profile_invariants_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores = rng.normal(size=(6, 3, 5))
        preds = rng.integers(0, 3, size=6)
        for p in extract_explanations(scores, preds, ["a", "b", "c"], list("vwxyz")).values():
            if len(p):
                assert p.contributions[0] == 1.0
                assert all(x >= y for x, y in zip(p.contributions, p.contributions[1:]))
                assert all(c > 0 for c in p.contributions)
                for lo, hi in zip(THRESHOLDS, THRESHOLDS[1:]):
                    assert set(p.subset(hi)) <= set(p.subset(lo))


def test_threshold_subsets():
    p = _profile("cat", [1.0, 0.6, 0.2])
    assert p.subset(0.5) == p.concepts[:2]
    assert p.subset(1.0) == p.concepts[:1]
    assert p.subset(0.0) == p.concepts
    mcqs = truthfulness_mcqs(p)
    assert [q.threshold for q in mcqs] == list(THRESHOLDS)
    assert mcqs[0].options == ["aligns with facts", "does not align"]
    assert "cat feature 2" in mcqs[0].prompt and "cat feature 2" not in mcqs[-1].prompt
    assert "[class name]" not in mcqs[0].prompt and '"cat"' in mcqs[0].prompt


def test_distractor_ranks_by_independent_sort():
    rng = np.random.default_rng(5)
    text = rng.normal(size=(10, 8))
    image = rng.normal(size=(10, 8))
    for index in range(10):
        sets = distractor_sets(index, 10, text, image, seed=3)
        for name, embs in (("text", text), ("visual", image)):
            unit = [[x / sum(y * y for y in v) ** 0.5 for x in v] for v in embs.tolist()]
            sims = sorted(
                ((-(sum(a * b for a, b in zip(unit[i], unit[index]))), i) for i in range(10) if i != index)
            )
            ranked = [i for _, i in sims]
            assert sets[f"{name}-hard"] == ranked[:4]
            assert sets[f"{name}-easy"] == ranked[4:8]
        assert len(sets["random"]) == 4 and index not in sets["random"]


def test_small_label_set_degrades():
    rng = np.random.default_rng(6)
    embs = rng.normal(size=(5, 4))
    sets = distractor_sets(0, 5, embs, embs, seed=0)
    assert sorted(sets["text-hard"]) == [1, 2, 3, 4]
    assert sets["text-hard"] == sets["text-easy"] == similarity_ranking(embs, 0)
    three = distractor_sets(0, 3, embs[:3], embs[:3], seed=0)
    assert all(len(v) == 2 for v in three.values())
    with pytest.raises(EvaluationError):
        distractor_sets(0, 1, embs[:1], embs[:1], seed=0)


def test_distinguishability_mcqs():
    labels = [f"bird {i}" for i in range(10)]
    rng = np.random.default_rng(7)
    text, image = rng.normal(size=(10, 6)), rng.normal(size=(10, 6))
    mcqs = distinguishability_mcqs(_profile("bird 3", [1.0, 0.4]), labels, text, image, seed=1, superclass="bird")
    assert [q.mode for q in mcqs] == list(MODES)
    for q in mcqs:
        assert len(q.options) == 5 and q.options.count("bird 3") == 1
        assert q.options[q.correct] == "bird 3"
        assert "[" not in q.prompt and '"bird"' in q.prompt
    again = distinguishability_mcqs(_profile("bird 3", [1.0, 0.4]), labels, text, image, seed=1, superclass="bird")
    assert [q.to_dict() for q in mcqs] == [q.to_dict() for q in again]
    with pytest.raises(EvaluationError, match="duplicate"):
        distinguishability_mcqs(_profile("a", [1.0]), ["a", "a", "b"], text[:3], image[:3], seed=0)


def test_few_labels_trim_option_line():
    labels = ["a", "b", "c"]
    embs = np.eye(3)
    q = distinguishability_mcqs(_profile("a", [1.0]), labels, embs, embs, seed=0)[0]
    assert len(q.options) == 3
    line = q.prompt.rstrip("\n").splitlines()[-1]
    assert line.count(";") == 2 and "D." not in q.prompt and "[" not in q.prompt


def _result(kind, label, ok):
    q = Mcq(kind, label, "p", ["x", "y"], [], correct=1 if kind == DISTINGUISHABILITY else None)
    majority = (0 if ok else 1) if kind == TRUTHFULNESS else (1 if ok else 0)
    return McqResult(q, [majority] * 3, majority)


def _label_results(label, truth_ok, dist_ok):
    return [_result(TRUTHFULNESS, label, i < truth_ok) for i in range(5)] + [
        _result(DISTINGUISHABILITY, label, i < dist_ok) for i in range(5)
    ]


def test_score_examples():
    s = score_interpretability(_label_results("a", 5, 3), ["a"])
    assert s.overall == pytest.approx(0.8)
    assert score_interpretability(_label_results("a", 0, 0), ["a"]).overall == 0.0
    both = score_interpretability(_label_results("a", 5, 5) + _label_results("b", 0, 0), ["a", "b"])
    assert both.overall == pytest.approx(0.5)
    assert both.overall == (both.truthfulness + both.distinguishability) / 2


def test_empty_labels_score_zero():
    s = score_interpretability(_label_results("a", 5, 5), ["a", "b"], ["b"])
    assert s.per_label["b"] == {"truthfulness": 0.0, "distinguishability": 0.0, "overall": 0.0}
    assert s.overall == pytest.approx(0.5) and s.empty_labels == ["b"]


def test_missing_judgments_listed():
    with pytest.raises(EvaluationError, match="b/truthfulness"):
        score_interpretability(_label_results("a", 5, 5), ["a", "b"])
    with pytest.raises(EvaluationError):
        score_interpretability(_label_results("z", 5, 5), ["a"])


def _judge_llm():
    return ConceptLlm(
        ScriptedLlm(
            {
                TRUTHFULNESS: lambda args, sample: "A",
                DISTINGUISHABILITY: lambda args, sample: "ABCDE"[args["options"].index("cat")]
                if "cat" in args["options"] else "A",
            }
        )
    )


def test_judge_and_end_to_end(tmp_path):
    labels = ["cat", "dog", "fox"]
    rng = np.random.default_rng(8)
    scores = rng.uniform(0.1, 1.0, size=(6, 3, 4))
    logits = np.tile(np.eye(3), (2, 1))
    targets = np.array([0, 1, 2, 0, 1, 2])
    embs = rng.normal(size=(3, 5))
    report = evaluate(scores, logits, targets, labels, list("wxyz"), _judge_llm(), embs, embs, seed=0)
    assert report.accuracy == 1.0
    assert report.score.per_label["cat"] == {"truthfulness": 1.0, "distinguishability": 1.0, "overall": 1.0}
    assert report.score.per_label["dog"]["distinguishability"] == 0.0
    assert len(report.results) == 30
    write_results(report.results, tmp_path / "r.jsonl")
    first = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert set(first) >= {"label", "kind", "prompt", "options", "correct", "answers", "majority"}
    write_table([report], tmp_path / "t.csv")
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == ["setting", "accuracy", "truthfulness", "distinguishability", "interpretability"]
    assert rows[1][0] == "cocobm"


def test_mcq_file_is_byte_stable(tmp_path):
    labels = [f"l{i}" for i in range(6)]
    rng = np.random.default_rng(9)
    profiles = {lab: _profile(lab, [1.0, 0.5, 0.1]) for lab in labels}
    embs = rng.normal(size=(6, 4))
    for name in ("a", "b"):
        write_mcqs(build_mcqs(profiles, labels, embs, embs, seed=4), tmp_path / name)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert len(build_mcqs(profiles, labels, embs, embs, seed=4)) == 60


def test_judge_records_votes():
    q = truthfulness_mcqs(_profile("cat", [1.0]))[0]
    (r,) = judge(_judge_llm(), [q])
    assert r.answers == [0, 0, 0] and r.passed
