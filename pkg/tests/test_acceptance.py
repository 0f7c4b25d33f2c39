"""Acceptance suite: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -s`` (or ``python3 tests/test_acceptance.py``);
the lines are also repeated in the terminal summary.
"""

from __future__ import annotations

import json
import os
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from conftest import record
from concept_agent import cli
from concept_agent.backends.encoders import DTYPE, SyntheticTextEncoder, encode_text_sequence
from concept_agent.bank import Concept, activate_concepts, add_concepts, delete_concepts
from concept_agent.actions import verify_all
from concept_agent.cocobm import (
    CoCoBM,
    TrainConfig,
    aggregate,
    aggregate_shared,
    build_prompt,
    clamp_scores,
    plain_concept_embeddings,
    score_sample_shared,
    weighted_bce,
)
from concept_agent.config import RunConfig
from concept_agent.planner import (
    RUNNING,
    activation_pattern,
    find_insufficient,
    find_redundant,
    normalize_sample,
    score_patterns,
)

RTOL = 1e-9
FINAL_EPOCHS = 1000
VOCAB = "red blue striped long short wide narrow curved bright dark spotted round sharp soft".split()


def _rand_phrase(rng: random.Random) -> str:
    return " ".join(rng.sample(VOCAB, rng.randint(1, 3)))


def _close(a, b, rtol=RTOL, atol=0.0) -> bool:
    return bool(np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=rtol, atol=atol))


# -- criterion 1 ------------------------------------------------------------------------

def test_criterion_1_oracle_suite():
    rng = np.random.default_rng(1)
    prng = random.Random(1)
    start = time.perf_counter()
    failures: dict[str, int] = {}
    trials = 120

    def check(name, ok):
        failures[name] = failures.get(name, 0) + (not ok)

    for _ in range(trials):
        n, m, k = rng.integers(1, 7), rng.integers(1, 13), rng.integers(1, 9)
        vals = rng.normal(size=(k, n, m))
        vals[rng.random(vals.shape) < 0.15] = 0.0
        nested = vals.tolist()

        check("normalization", _close(normalize_sample(vals[0]), oracles.normalize_sample(nested[0])))
        p_sc = score_patterns(vals)
        p_ref = oracles.score_patterns(nested)
        check("means", _close(p_sc, p_ref))

        t_a = float(rng.choice([0.0, 0.05, 0.1, 0.3, 0.7, 1.0, rng.random()]))
        act = activation_pattern(p_sc, t_a)
        check("thresholding", np.array_equal(act, np.asarray(oracles.activation(p_ref, t_a))))

        t_m = float(rng.choice([0.0, 0.3, 0.8, 2.0]))
        got = {r.index: (r.reason, r.kept) for r in find_redundant(p_sc, act, t_m)}
        check("redundancy", got == oracles.redundant(p_ref, act.tolist(), t_m))
        labels = [f"y{j}" for j in range(n)]
        flags, _ = find_insufficient(act, labels)
        check("insufficiency", flags == oracles.insufficient(act.tolist(), labels))

        editable = rng.random((n, m)) < 0.5
        raw = rng.normal(size=(n, m))
        enc = SyntheticTextEncoder(dim=8, seed=int(rng.integers(1000)))
        concepts = [_rand_phrase(prng) for _ in range(m)]
        model = CoCoBM(enc, labels, concepts, editable.astype(np.uint8), TrainConfig(q=2))
        x = torch.as_tensor(rng.normal(size=(1, 8)), dtype=DTYPE)
        with torch.no_grad():
            raw_model = model.raw_scores(x)[0].numpy()
            clamped = model.concept_scores(x)[0].numpy()
            # one prompt at a time instead of the batched path
            per_pair = [
                [float(x[0] @ encode_text_sequence(enc, build_prompt(enc, y, c, model.cond))) for c in concepts]
                for y in labels
            ]
        check("scoring", _close(raw_model, per_pair, rtol=1e-9, atol=1e-12))
        check("clamping", _close(clamped, oracles.clamp(raw_model.tolist(), editable.tolist())))
        check(
            "clamping",
            _close(
                clamp_scores(torch.as_tensor(raw), torch.as_tensor(editable)).numpy(),
                oracles.clamp(raw.tolist(), editable.tolist()),
            ),
        )

        w, b = rng.normal(size=(n, m)), rng.normal(size=n)
        check("aggregation", _close(aggregate(raw, w, b), oracles.aggregate(raw.tolist(), w.tolist(), b.tolist())))
        logits = rng.normal(scale=3.0, size=n)
        target = int(rng.integers(n))
        ours = weighted_bce(torch.as_tensor(logits)[None], torch.tensor([target])).item()
        check("loss", _close(ours, oracles.weighted_bce(logits.tolist(), target)))

    hand = weighted_bce(torch.zeros(1, 2, dtype=DTYPE), torch.tensor([0])).item()
    check("loss", abs(hand - 1.0397) < 1e-4)
    elapsed = time.perf_counter() - start
    ok = not any(failures.values()) and elapsed < 10.0
    detail = ", ".join(f"{k} {trials - v}/{trials}" for k, v in failures.items())
    record("1", ok, f"{detail}; {elapsed:.2f}s (< 10 s)")
    assert ok, failures


# -- criterion 2 ------------------------------------------------------------------------

def test_criterion_2_gradient_check():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    enc = SyntheticTextEncoder(dim=16, seed=3, token_scale=4.0)
    labels = ["heron", "egret", "stork"]
    concepts = ["long neck", "white plume", "dark bill", "wide wing"]
    editable = (rng.random((3, 4)) < 0.3).astype(np.uint8)
    model = CoCoBM(enc, labels, concepts, editable, TrainConfig(q=2, init_std=0.3))
    with torch.no_grad():
        model.weight.copy_(torch.as_tensor(rng.normal(size=(3, 4))))
        model.bias.copy_(torch.as_tensor(rng.normal(size=3)))
    x = torch.as_tensor(rng.normal(size=(12, 16)), dtype=DTYPE)
    x = x / x.norm(dim=1, keepdim=True)
    y = torch.as_tensor(rng.integers(0, 3, 12))

    def loss():
        return weighted_bce(model(x)[0], y)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    checked = 0
    for param in (model.cond.tokens, model.weight):
        analytic = param.grad.detach().clone()
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            h = 1e-6
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.view(-1)[i].item()
            err = abs(a - numeric) / max(abs(numeric), 1e-6)
            worst = max(worst, err)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 30
    record("2", ok, f"{checked} partials (tokens and W), worst relative error {worst:.2e} (< 1e-3), {elapsed:.1f}s")
    assert ok


# -- criterion 3 ------------------------------------------------------------------------

def test_criterion_3_collapse_to_shared_scores():
    rng = np.random.default_rng(3)
    prng = random.Random(3)
    worst, identical_rows = 0.0, True
    for trial in range(50):
        n, m = int(rng.integers(2, 7)), int(rng.integers(1, 9))
        enc = SyntheticTextEncoder(dim=16, seed=trial)
        concepts = list(dict.fromkeys(_rand_phrase(prng) for _ in range(m)))
        labels = [f"label {j}" for j in range(n)]
        model = CoCoBM(enc, labels, concepts, None, TrainConfig(q=3, condition_on_label=False))
        with torch.no_grad():
            model.cond.tokens.zero_()
        w, b = rng.normal(size=(n, len(concepts))), rng.normal(size=n)
        x = rng.normal(size=16)
        x /= np.linalg.norm(x)
        with torch.no_grad():
            scores = model.concept_scores(torch.as_tensor(x[None], dtype=DTYPE))[0].numpy()
        identical_rows &= bool(np.allclose(scores, scores[:1], atol=1e-12))
        conditional = aggregate(scores, w, b)
        shared = aggregate_shared(score_sample_shared(x, plain_concept_embeddings(enc, concepts)), w, b)
        worst = max(worst, float(np.abs(conditional - shared).max()))
    ok = worst < 1e-6 and identical_rows
    record("3", ok, f"50 instances, identical rows {identical_rows}, max |difference| {worst:.1e} (atol 1e-6)")
    assert ok


# -- shared CLI pipeline for criteria 4, 5 and 8 -------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """ground -> train -> eval (with ablation) -> eval again, with every score checked for clamp safety."""
    root = tmp_path_factory.mktemp("pipeline")
    checks = {"calls": 0, "entries": 0, "violations": 0}
    original = CoCoBM.concept_scores

    def guarded(self, images):
        out = original(self, images)
        mask = self.editable.expand_as(out)
        checks["calls"] += 1
        checks["entries"] += int(mask.sum())
        checks["violations"] += int((out[mask] > 0).sum())
        return out

    mp = pytest.MonkeyPatch()
    mp.setattr(CoCoBM, "concept_scores", guarded)
    try:
        config = RunConfig(final_epochs=FINAL_EPOCHS, out=str(root / "run"))
        t0 = time.perf_counter()
        code = cli.cmd_ground(config)
        run = Path(config.out)
        train_report = cli.cmd_train(config, run, run / "train")
        t_ground_train = time.perf_counter() - t0
        reports = cli.cmd_eval(config, run, run / "train" / "checkpoint.json", run / "eval", ablate=True)
        again = cli.cmd_eval(config, run, run / "train" / "checkpoint.json", run / "eval2")
    finally:
        mp.undo()
    return {
        "config": config,
        "run": run,
        "code": code,
        "train": train_report,
        "eval": reports,
        "eval2": again,
        "checks": checks,
        "seconds": t_ground_train,
    }


def test_criterion_4_clamp_safety(pipeline):
    c = pipeline["checks"]
    ok = c["violations"] == 0 and c["calls"] > 0 and c["entries"] > 0
    record(
        "4",
        ok,
        f"{c['violations']} positive scores at E=1 over {c['entries']} clamped positions in {c['calls']} scoring calls "
        "(grounding, training, evaluation)",
    )
    assert ok


def _feedback(run: Path):
    return [json.loads(p.read_text()) for p in sorted(run.glob("feedback_*.json"))]


def test_criterion_5_planted_world_convergence(pipeline, tmp_path):
    from concept_agent.backends.synthetic import default_world

    run = pipeline["run"]
    status = json.loads((run / "status.json").read_text())
    last = _feedback(run)[-1]
    planted = len(default_world().concepts)
    recovered = len(status["planted_recovered"])
    converged = pipeline["code"] == 0 and status["status"] == "converged" and status["iterations"] <= 10
    clean = not last["unidentifiable"] and not last["removals"]

    # noiseless world: ground and train again
    t0 = time.perf_counter()
    cfg0 = RunConfig(noise=0.0, final_epochs=FINAL_EPOCHS, out=str(tmp_path / "run0"))
    code0 = cli.cmd_ground(cfg0)
    acc0 = cli.cmd_train(cfg0, Path(cfg0.out), Path(cfg0.out) / "train")["accuracy"]
    seconds = pipeline["seconds"] + time.perf_counter() - t0
    acc1 = pipeline["train"]["accuracy"]

    ok = (
        converged
        and clean
        and recovered / planted >= 0.8
        and code0 == 0
        and acc0 == 1.0
        and acc1 >= 0.9
        and seconds < 300
    )
    record(
        "5",
        ok,
        f"{status['status']} in {status['iterations']} iterations, all labels supported {clean}, "
        f"recovered {recovered}/{planted} planted; accuracy {acc0:.3f} at noise 0 and {acc1:.3f} at noise 0.1; "
        f"{seconds:.0f}s",
    )
    assert ok


def test_criterion_6_exact_duplicate_removed(grounded_copy):
    config, env, agent, state = grounded_copy
    original = "sturdy thick conical bill"
    duplicate = "thick sturdy conical bill"  # same tokens, so the synthetic encoder embeds it identically
    assert original in state.bank.texts
    env.world.add_alias(duplicate, original)
    bank, memory = add_concepts(state.bank, state.memory, [duplicate], "injected", state.iteration)
    state.bank, state.memory = activate_concepts(bank, memory, [Concept.create(duplicate, "").id], state.iteration)
    verify_all(agent.llm, state.bank, state.memory, state.iteration)
    state.status = RUNNING
    report = agent.step(state)

    texts = list(report.concept_texts)
    pair = {original, duplicate}
    removed = [r for r in report.removals if r["text"] in pair]
    contrib = (report.score_pattern * report.activation).sum(axis=0)
    ok = len(removed) == 1 and removed[0]["reason"] == "duplicate"
    if ok:
        gone = removed[0]["text"]
        kept = (pair - {gone}).pop()
        ok = contrib[texts.index(kept)] >= contrib[texts.index(gone)] and kept in state.bank.texts
        detail = f"removed {gone!r}, kept {kept!r} (contribution {contrib[texts.index(kept)]:.4f} >= " \
                 f"{contrib[texts.index(gone)]:.4f})"
    else:
        detail = f"removals {report.removals}"
    record("6", ok, detail)
    assert ok


def test_criterion_7_repair_restores_support(grounded_copy):
    config, env, agent, state = grounded_copy
    label = "cardinal"
    last = state.reports[-1]
    j = list(last.labels).index(label)
    support = [last.concept_ids[k] for k in np.flatnonzero(last.activation[j]) if last.concept_ids[k] in state.bank.ids]
    state.bank, state.memory = delete_concepts(state.bank, state.memory, support, state.iteration)
    state.status = RUNNING
    before = len(state.selections)

    first = agent.step(state)
    flagged = first.unidentifiable.get(label) == "no-active-concept"
    repairs = [s for s in state.selections[before:] if s["target_labels"] and label in s["target_labels"]]
    widths_ok = bool(repairs) and all(s["head_width"] == len(s["target_labels"]) + 1 for s in repairs)
    restored_at = None
    for extra in (1, 2):
        report = agent.step(state) if state.status == RUNNING else state.reports[-1]
        if label not in report.unidentifiable:
            restored_at = extra
            break
    ok = flagged and widths_ok and restored_at is not None
    record(
        "7",
        ok,
        f"deleted {len(support)} concepts; '{label}' flagged {flagged}; repair head widths "
        f"{[s['head_width'] for s in repairs]} for targets {[s['target_labels'] for s in repairs]}; "
        f"support restored after {restored_at} iteration(s)",
    )
    assert ok


def test_criterion_8_evaluation_determinism_and_editable_ablation(pipeline):
    run = pipeline["run"]
    same = (run / "eval" / "mcqs.jsonl").read_bytes() == (run / "eval2" / "mcqs.jsonl").read_bytes()
    main, ablated = pipeline["eval"]
    overall = main.score.overall
    drop = ablated.score.truthfulness < main.score.truthfulness
    ok = same and overall >= 0.95 and drop
    record(
        "8",
        ok,
        f"byte-identical MCQ files {same}; overall interpretability {overall:.3f} (>= 0.95); truthfulness "
        f"{main.score.truthfulness:.3f} with the editable matrix vs {ablated.score.truthfulness:.3f} without",
    )
    assert ok


def test_criterion_9_dynamic_vs_static_grounding(pipeline, tmp_path):
    run, config = pipeline["run"], pipeline["config"]
    static_version = json.loads((run / "static_bank.json").read_text())["bank_version"]
    cli.cmd_train(config, run, tmp_path / "static_train", static_version)
    static = cli.cmd_eval(config, run, tmp_path / "static_train" / "checkpoint.json", tmp_path / "static_eval")[0]
    dynamic = pipeline["eval"][0]
    ok = dynamic.score.overall >= static.score.overall
    record(
        "9",
        ok,
        f"interpretability dynamic {dynamic.score.overall:.3f} vs static {static.score.overall:.3f} "
        f"(accuracy {dynamic.accuracy:.3f} vs {static.accuracy:.3f})",
    )
    assert ok


# -- criterion 10 ---------------------------------------------------------------------------

SMOKE_ENV = "CONCEPT_AGENT_SMOKE_DATASET"


def test_criterion_10_real_backend_smoke(tmp_path):
    dataset = os.environ.get(SMOKE_ENV)
    if not dataset or not os.environ.get("CONCEPT_AGENT_LLM_KEY"):
        record("10", None, f"non-gating real-data smoke run skipped (set {SMOKE_ENV} and CONCEPT_AGENT_LLM_KEY)")
        pytest.skip("real encoder/LLM resources not configured")
    out = tmp_path / "real"
    base = ["--backend", "real", "--dataset", dataset]
    steps = [
        ["embed", *base],
        ["ground", *base, "--out", str(out)],
        ["train", "--run", str(out)],
        ["eval", "--run", str(out)],
    ]
    codes = [cli.main(argv) for argv in steps]
    ok = codes[0] == 0 and codes[1] in (0, 2) and codes[2:] == [0, 0] and (out / "eval" / "table.csv").exists()
    record("10", ok, f"exit codes {codes}; report at {out / 'eval' / 'table.csv'}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
