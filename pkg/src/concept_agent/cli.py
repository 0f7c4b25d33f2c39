"""Command-line entry point: ground, train, embed and eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .backends.cache import CacheError, EmbeddingCache
from .backends.encoders import encode_texts
from .bank import build_editable_matrix, latest_bank_path, load_bank, load_memory, save_bank, save_memory
from .cocobm import DTYPE, evaluate_accuracy, load_checkpoint, make_model, save_checkpoint, train
from .config import ConfigError, Environment, RunConfig, build_environment, cache_path, load_world, synthetic_datasets
from .data import stratified_split, substream
from .evaluate import EvalReport, evaluate, write_mcqs, write_results, write_table
from .planner import CAPPED, ConceptAgent, save_report

logger = logging.getLogger("concept_agent")

EXIT_OK, EXIT_ERROR, EXIT_CAPPED = 0, 1, 2
VAL_FRACTION = 0.1

# flag -> RunConfig field
OVERRIDES = {
    "seed": "seed",
    "backend": "backend",
    "ta": "t_a",
    "tm": "t_m",
    "beta": "beta",
    "q": "q",
    "max_iters": "max_iterations",
    "world": "world",
    "noise": "noise",
    "dataset": "dataset",
    "cache": "cache",
    "epochs": "epochs",
    "final_epochs": "final_epochs",
    "workers": "workers",
}


# -- helpers -------------------------------------------------------------------------

def fresh_dir(path: str | Path) -> Path:
    """Create an output directory, refusing to reuse a non-empty one."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} already exists and is not empty; choose another --out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    if base is None:
        base = RunConfig.load(args.config) if args.config else RunConfig()
    d = base.to_dict()
    for flag, name in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            d[name] = value
    if getattr(args, "no_editable_matrix", False):
        d["use_editable"] = False
    if getattr(args, "out", None):
        d["out"] = args.out
    return RunConfig.from_dict(d)


def run_config(run: Path) -> RunConfig:
    path = run / "config.json"
    if not path.exists():
        raise ConfigError(f"{run} is not a grounding run directory (missing config.json)")
    return RunConfig.load(path)


def load_run_bank(run: Path, version: int | None):
    path = latest_bank_path(run) if version is None else run / f"bank_v{version}.json"
    return load_bank(path)


def split_train(env: Environment, seed: int):
    """Hold out a small stratified validation part of the training set for early stopping."""
    first, second = stratified_split(env.train.targets, VAL_FRACTION, substream(seed, "early-stop"))
    return env.train.subset(first), env.train.subset(second)


def fit_final(env: Environment, bank, memory, config: RunConfig, use_editable: bool):
    editable = build_editable_matrix(memory, bank) if use_editable else None
    tcfg = config.train_config(final=True)
    model = make_model(env.encoder, bank, editable, tcfg)
    fit, val = split_train(env, config.seed)
    result = train(model, fit.features, fit.targets, val.features, val.targets, tcfg)
    return model, result


def test_outputs(model, env: Environment):
    with torch.no_grad():
        logits, scores = model(torch.as_tensor(env.test.features, dtype=DTYPE))
    return scores.numpy(), logits.numpy()


# -- commands --------------------------------------------------------------------------

def cmd_ground(config: RunConfig) -> int:
    if not config.out:
        raise ConfigError("ground needs --out")
    env = build_environment(config)
    out = fresh_dir(config.out)
    stamp = config.stamp()
    write_json(out / "config.json", config.to_dict())

    def checkpoint(state, report):
        save_bank(state.bank, out)
        save_memory(state.memory, out)
        if report is not None:
            save_report(report, out)
        else:
            write_json(out / "static_bank.json", {"bank_version": state.bank.version, **stamp})

    agent = ConceptAgent(env.llm, env.encoder, env.train, config.agent_config(), on_iteration=checkpoint)
    state = agent.run()
    save_bank(state.bank, out)
    save_memory(state.memory, out)
    write_json(out / "instances.json", state.instances.to_dict())
    write_json(out / "selections.json", state.selections)
    env.llm.save_transcripts(out / "transcripts.jsonl")
    status = {
        "status": state.status,
        "iterations": state.iteration,
        "bank_version": state.bank.version,
        "bank_hash": state.bank.content_hash(),
        "concepts": state.bank.texts,
        "llm_calls": env.llm.backend_calls,
        **stamp,
    }
    if env.world is not None:
        status["planted_recovered"] = sorted(env.world.recovered(state.bank.texts))
    write_json(out / "status.json", status)
    logger.info("%s after %d iterations with %d concepts", state.status, state.iteration, len(state.bank))
    return EXIT_CAPPED if state.status == CAPPED else EXIT_OK


def cmd_train(config: RunConfig, run: Path, out: Path, bank_version: int | None = None) -> dict:
    bank = load_run_bank(run, bank_version)
    memory = load_memory(run / "memory.json")
    env = build_environment(config)
    out = fresh_dir(out)
    model, result = fit_final(env, bank, memory, config, config.use_editable)
    accuracy = evaluate_accuracy(model, env.test.features, env.test.targets)
    report = {
        "N": len(bank.labels),
        "M": len(bank),
        "accuracy": accuracy,
        "val_accuracy": result.val_accuracy,
        "best_epoch": result.best_epoch,
        "epochs": config.train_config(final=True).epochs,
        "use_editable": config.use_editable,
        "bank_version": bank.version,
        "bank_hash": bank.content_hash(),
        **config.stamp(),
    }
    save_checkpoint(model, bank, out / "checkpoint.json", {"stamp": config.stamp()})
    write_json(out / "report.json", report)
    logger.info("test accuracy %.4f (N=%d, M=%d)", accuracy, report["N"], report["M"])
    return report


def _evaluate_model(model, env: Environment, bank, config: RunConfig, setting: str) -> EvalReport:
    scores, logits = test_outputs(model, env)
    text_embs = encode_texts(env.encoder, list(bank.labels)).numpy()
    image_embs = env.train.label_means()
    return evaluate(
        scores,
        logits,
        env.test.targets,
        bank.labels,
        bank.texts,
        env.judge,
        text_embs,
        image_embs,
        substream(config.seed, "mcq"),
        bank.superclasses,
        setting,
    )


def cmd_eval(config: RunConfig, run: Path, checkpoint: Path, out: Path, ablate: bool = False) -> list[EvalReport]:
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint} (run `concept-agent train` first)")
    meta = json.loads(checkpoint.read_text())
    bank = load_bank(run / f"bank_v{meta['bank_version']}.json")
    env = build_environment(config)
    out = fresh_dir(out)
    model, _ = load_checkpoint(checkpoint, env.encoder, bank)
    reports = [_evaluate_model(model, env, bank, config, "cocobm")]
    if ablate:
        memory = load_memory(run / "memory.json")
        plain, _ = fit_final(env, bank, memory, config, use_editable=False)
        reports.append(_evaluate_model(plain, env, bank, config, "cocobm-no-editable-matrix"))
    for r in reports:
        suffix = "" if r.setting == "cocobm" else "_no_editable"
        write_mcqs([x.mcq for x in r.results], out / f"mcqs{suffix}.jsonl")
        write_results(r.results, out / f"results{suffix}.jsonl")
    write_table(reports, out / "table.csv")
    write_json(
        out / "report.json",
        {
            "rows": [r.summary() for r in reports],
            "profiles": {lab: p.__dict__ for lab, p in reports[0].profiles.items()},
            "bank_version": bank.version,
            **config.stamp(),
        },
    )
    for r in reports:
        s = r.score
        logger.info(
            "%s: accuracy %.4f truthfulness %.4f distinguishability %.4f overall %.4f",
            r.setting, r.accuracy, s.truthfulness, s.distinguishability, s.overall,
        )
    return reports


def cmd_embed(config: RunConfig) -> int:
    """Add missing embeddings to the cache. Returns the number of new rows."""
    path = cache_path(config)
    if config.backend == "synthetic":
        world = load_world(config)
        train, test = synthetic_datasets(world)
        rows = {key: vec for ds in (train, test) for key, vec in zip(ds.ids, ds.features)}
        cache = EmbeddingCache.open(path, world.dim)
        new = cache.update(rows, lambda key: rows[key])
    else:
        from .backends.encoders import ClipBackend
        from .data import list_images, read_label_manifest

        root = Path(config.dataset)
        labels, _ = read_label_manifest(root / "labels.csv")
        items = list_images(root, labels)
        encoder = ClipBackend(config.encoder)
        cache = EmbeddingCache.open(path, encoder.dim)
        new = cache.update([key for key, _ in items], lambda key: encoder.encode_image(root / key).numpy())
    path.parent.mkdir(parents=True, exist_ok=True)
    cache.save(path)
    logger.info("cache %s: %d rows, %d new", path, len(cache), new)
    return new


# -- argument parsing ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["synthetic", "real"])
    p.add_argument("--ta", type=float, help="activation threshold")
    p.add_argument("--tm", type=float, help="pattern-distance threshold")
    p.add_argument("--beta", type=int, help="instances per label")
    p.add_argument("--q", type=int, help="number of condition tokens")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--no-editable-matrix", action="store_true")
    p.add_argument("--out", help="output directory")
    p.add_argument("--world", help="planted world JSON for the synthetic backend")
    p.add_argument("--noise", type=float, help="override the synthetic image noise")
    p.add_argument("--dataset", help="dataset directory for the real backend")
    p.add_argument("--cache", help="embedding cache file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--final-epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-agent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("ground", help="run the concept agent until the bank converges")
    _common(p)
    p = sub.add_parser("train", help="train a CoCoBM on the full dataset with a grounded bank")
    _common(p)
    p.add_argument("--run", required=True, help="grounding run directory")
    p.add_argument("--bank-version", type=int)
    p = sub.add_parser("eval", help="build, judge and score interpretability MCQs")
    _common(p)
    p.add_argument("--run", required=True, help="grounding run directory")
    p.add_argument("--checkpoint", help="default: <run>/train/checkpoint.json")
    p = sub.add_parser("embed", help="fill the embedding cache")
    _common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "ground":
            return cmd_ground(resolve_config(args))
        if args.command == "embed":
            cmd_embed(resolve_config(args))
            return EXIT_OK
        run = Path(args.run)
        config = resolve_config(args, run_config(run))
        if args.command == "train":
            cmd_train(config, run, Path(args.out or run / "train"), args.bank_version)
            return EXIT_OK
        checkpoint = Path(args.checkpoint) if args.checkpoint else run / "train" / "checkpoint.json"
        ablate = args.no_editable_matrix
        if ablate:
            # the main row keeps the matrix; the ablation row drops it
            config = RunConfig.from_dict({**config.to_dict(), "use_editable": True})
        cmd_eval(config, run, checkpoint, Path(args.out or run / "eval"), ablate)
        return EXIT_OK
    except (ConfigError, CacheError, FileNotFoundError, ValueError, RuntimeError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
