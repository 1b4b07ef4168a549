"""End-to-end pipeline: generate -> parse -> train-captioner -> ground ->
train-relclf -> eval.

Stages communicate only through files inside a run directory; a manifest
records the resolved config hash and content hashes of every artifact, so
reruns with the same seed are verifiably bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .captioner import (
    CaptionerConfig,
    build_grounded_dataset,
    load_captioner,
    load_grounded,
    save_captioner,
    save_grounded,
    train_captioner,
)
from .data import Corpus, load_corpus, save_corpus
from .errors import ConfigError, StageError
from .evaluation import build_eval_report, emit_report
from .parsing import PredicateMapping, parse_triplets
from .relclf import RelClfConfig, load_relclf, save_relclf, split_by_scene, train_relclf
from .synth import GeneratorConfig, WorldSpec, generate_corpus
from .util import canonical_json, sha256_file, sha256_text

STAGES = ("generate", "parse", "train-captioner", "ground", "train-relclf", "eval")

PROFILES = {
    "paper": {
        "captioner": {
            "embed_dim": 300,
            "lstm_hidden": 1000,
            "attention_dim": 512,
            "lr": 1e-4,
            "epochs": 75,
            "batch_size": 100,
        },
        "relclf": {"dropout": 0.5, "lr": 1e-3, "epochs": 50, "batch_size": 64},
    },
    "desk": {
        "captioner": {
            "embed_dim": 64,
            "lstm_hidden": 128,
            "attention_dim": 64,
            "lr": 1e-3,
            "epochs": 40,
            "batch_size": 16,
        },
        "relclf": {"dropout": 0.5, "lr": 1e-3, "epochs": 50, "batch_size": 64},
    },
}

_GENERATOR_DEFAULTS = {
    "num_scenes": 200,
    "objects_min": 3,
    "objects_max": 6,
    "feature_noise": 0.1,
    "coverage": 0.4,
    "captions_per_scene": 2,
    "attribute_prob": 0.3,
}

_EVAL_DEFAULTS = {"ks": [50, 100], "baseline": True, "random_trials": 100}


def resolve_config(raw: Optional[dict] = None) -> dict:
    """Merge profile defaults and user overrides into a full config."""
    raw = dict(raw or {})
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    seed = int(raw.get("seed", 0))

    def merge(defaults: dict, overrides) -> dict:
        out = dict(defaults)
        out.update(overrides or {})
        return out

    return {
        "profile": profile,
        "seed": seed,
        "generator": merge(_GENERATOR_DEFAULTS, raw.get("generator")),
        "world": merge({"spec_file": None, "feature_dim": 64}, raw.get("world")),
        "captioner": merge(PROFILES[profile]["captioner"], raw.get("captioner")),
        "ground": merge({"grounder": "attention"}, raw.get("ground")),
        "relclf": merge(PROFILES[profile]["relclf"], raw.get("relclf")),
        "eval": merge(_EVAL_DEFAULTS, raw.get("eval")),
    }


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(json.load(fh))


def build_world(config: dict) -> WorldSpec:
    world_conf = config["world"]
    if world_conf.get("spec_file"):
        return WorldSpec.from_file(world_conf["spec_file"])
    return WorldSpec.build(seed=config["seed"], feature_dim=int(world_conf.get("feature_dim", 64)))


def generator_config(config: dict) -> GeneratorConfig:
    g = config["generator"]
    return GeneratorConfig(
        num_scenes=int(g["num_scenes"]),
        objects_min=int(g["objects_min"]),
        objects_max=int(g["objects_max"]),
        feature_noise=float(g["feature_noise"]),
        coverage=float(g["coverage"]),
        captions_per_scene=int(g["captions_per_scene"]),
        attribute_prob=float(g["attribute_prob"]),
        seed=config["seed"],
    )


def captioner_config(config: dict) -> CaptionerConfig:
    c = config["captioner"]
    return CaptionerConfig(
        embed_dim=int(c["embed_dim"]),
        lstm_hidden=int(c["lstm_hidden"]),
        attention_dim=int(c["attention_dim"]),
        lr=float(c["lr"]),
        epochs=int(c["epochs"]),
        batch_size=int(c["batch_size"]),
        seed=config["seed"],
    )


def relclf_config(config: dict) -> RelClfConfig:
    r = config["relclf"]
    return RelClfConfig(
        dropout=float(r["dropout"]),
        lr=float(r["lr"]),
        epochs=int(r["epochs"]),
        batch_size=int(r["batch_size"]),
        seed=config["seed"],
    )


# ---------------------------------------------------------------------------
# Stages.  Each returns the run-relative paths of the files it produced.
# ---------------------------------------------------------------------------


def _stage_generate(config: dict, run_dir: Path) -> list[str]:
    world = build_world(config)
    splits = generate_corpus(world, generator_config(config))
    save_corpus(splits.train, run_dir / "corpus.train.jsonl")
    save_corpus(splits.val, run_dir / "corpus.val.jsonl")
    save_corpus(splits.test, run_dir / "corpus.test.jsonl")
    PredicateMapping(world.predicate_mapping()).to_file(run_dir / "mapping.json")
    world.to_file(run_dir / "world.json")
    return [
        "corpus.train.jsonl",
        "corpus.val.jsonl",
        "corpus.test.jsonl",
        "mapping.json",
        "world.json",
    ]


def parse_corpus_to_file(corpus: Corpus, mapping: PredicateMapping, out_path) -> dict:
    """Parse every caption and write one JSON line per caption."""
    lexicon = mapping.lexicon()
    totals = {"captions": 0, "triplets": 0, "skipped_clauses": 0}
    with open(out_path, "w", encoding="utf-8") as fh:
        for scene in corpus.scenes:
            for ci, caption in enumerate(scene.captions):
                parsed = parse_triplets(caption.tokens, lexicon)
                totals["captions"] += 1
                totals["triplets"] += len(parsed.triplets)
                totals["skipped_clauses"] += parsed.skipped_clauses
                record = {
                    "scene_id": scene.scene_id,
                    "caption_index": ci,
                    "triplets": [
                        {
                            "subject": {"lemma": t.subject.lemma, "head": t.subject.head},
                            "predicate": {
                                "surface": t.predicate.surface,
                                "span": [t.predicate.start, t.predicate.end],
                            },
                            "object": {"lemma": t.object.lemma, "head": t.object.head},
                            "canonical": mapping.get(t.predicate.surface),
                        }
                        for t in parsed.triplets
                    ],
                    "skipped_clauses": parsed.skipped_clauses,
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return totals


def _stage_parse(config: dict, run_dir: Path) -> list[str]:
    mapping = PredicateMapping.from_file(run_dir / "mapping.json")
    corpus = load_corpus(run_dir / "corpus.train.jsonl")
    parse_corpus_to_file(corpus, mapping, run_dir / "triplets.jsonl")
    return ["triplets.jsonl"]


def _stage_train_captioner(config: dict, run_dir: Path) -> list[str]:
    corpus = load_corpus(run_dir / "corpus.train.jsonl")
    params, vocab, losses = train_captioner(corpus, captioner_config(config))
    save_captioner(run_dir / "captioner.ckpt", params, vocab)
    (run_dir / "captioner.losses.json").write_text(json.dumps(losses) + "\n")
    return ["captioner.ckpt", "captioner.ckpt.meta.json", "captioner.losses.json"]


def _stage_ground(config: dict, run_dir: Path) -> list[str]:
    corpus = load_corpus(run_dir / "corpus.train.jsonl")
    mapping = PredicateMapping.from_file(run_dir / "mapping.json")
    grounder = config["ground"]["grounder"]
    if grounder == "oracle":
        examples, diag = build_grounded_dataset(None, corpus, mapping, None, grounder="oracle")
    else:
        params, vocab = load_captioner(run_dir / "captioner.ckpt")
        examples, diag = build_grounded_dataset(params, corpus, mapping, vocab)
    save_grounded(run_dir / "grounded.jsonl", examples)
    (run_dir / "grounded.diag.json").write_text(
        json.dumps(diag.as_dict(), indent=2, sort_keys=True) + "\n"
    )
    return ["grounded.jsonl", "grounded.diag.json"]


def _stage_train_relclf(config: dict, run_dir: Path) -> list[str]:
    corpus = load_corpus(run_dir / "corpus.train.jsonl")
    examples = load_grounded(run_dir / "grounded.jsonl")
    params, history = train_relclf(examples, corpus.num_relations, relclf_config(config))
    save_relclf(run_dir / "relclf.ckpt", params)
    (run_dir / "relclf.history.json").write_text(
        json.dumps(asdict(history), sort_keys=True) + "\n"
    )
    return ["relclf.ckpt", "relclf.history.json"]


def _stage_eval(config: dict, run_dir: Path) -> list[str]:
    corpus = load_corpus(run_dir / "corpus.test.jsonl")
    mapping = PredicateMapping.from_file(run_dir / "mapping.json")
    rc = relclf_config(config)
    params = load_relclf(run_dir / "relclf.ckpt", dropout_rate=rc.dropout)
    examples = load_grounded(run_dir / "grounded.jsonl")
    _, val_examples = split_by_scene(examples, rc.val_fraction, rc.seed)
    diagnostics = {"grounding": json.loads((run_dir / "grounded.diag.json").read_text())}
    report = build_eval_report(
        params,
        corpus,
        mapping,
        ks=tuple(int(k) for k in config["eval"]["ks"]),
        with_baseline=bool(config["eval"]["baseline"]),
        confusion_examples=val_examples,
        diagnostics=diagnostics,
        config_echo=config,
        random_trials=int(config["eval"]["random_trials"]),
    )
    emit_report(report, run_dir / "reports")
    return [
        "reports/report.json",
        "reports/recall.csv",
        "reports/confusion.csv",
        "reports/correlation.csv",
        "reports/recall.svg",
        "reports/frequencies.svg",
    ]


_STAGE_FUNCS = {
    "generate": _stage_generate,
    "parse": _stage_parse,
    "train-captioner": _stage_train_captioner,
    "ground": _stage_ground,
    "train-relclf": _stage_train_relclf,
    "eval": _stage_eval,
}


def run_pipeline(config: dict, out_dir, skip: Sequence[str] = ()) -> dict:
    """Run all stages, write manifest.json, return the manifest.

    Stages named in `skip` are not re-run; their artifacts must already
    exist in the run directory and are re-hashed into the manifest.
    """
    config = resolve_config(config)
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    unknown = set(skip) - set(STAGES)
    if unknown:
        raise ConfigError(f"unknown stages in skip list: {sorted(unknown)}")

    artifacts = []
    for stage in STAGES:
        func = _STAGE_FUNCS[stage]
        if stage in skip:
            files = _expected_files(stage, run_dir)
            missing = [f for f in files if not (run_dir / f).exists()]
            if missing:
                raise StageError(stage, FileNotFoundError(f"skipped stage missing artifacts: {missing}"))
        else:
            try:
                files = func(config, run_dir)
            except Exception as exc:
                raise StageError(stage, exc) from exc
        artifacts.append(
            {
                "name": stage,
                "files": [{"path": f, "sha256": sha256_file(run_dir / f)} for f in files],
            }
        )

    config_hash = sha256_text(canonical_json(config))
    manifest = {
        "config": config,
        "config_hash": config_hash,
        "seed": config["seed"],
        "artifacts": artifacts,
        "manifest_hash": sha256_text(
            canonical_json({"config_hash": config_hash, "artifacts": artifacts})
        ),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _expected_files(stage: str, run_dir: Path) -> list[str]:
    if stage == "generate":
        return [
            "corpus.train.jsonl",
            "corpus.val.jsonl",
            "corpus.test.jsonl",
            "mapping.json",
            "world.json",
        ]
    if stage == "parse":
        return ["triplets.jsonl"]
    if stage == "train-captioner":
        return ["captioner.ckpt", "captioner.ckpt.meta.json", "captioner.losses.json"]
    if stage == "ground":
        return ["grounded.jsonl", "grounded.diag.json"]
    if stage == "train-relclf":
        return ["relclf.ckpt", "relclf.history.json"]
    if stage == "eval":
        return [
            "reports/report.json",
            "reports/recall.csv",
            "reports/confusion.csv",
            "reports/correlation.csv",
            "reports/recall.svg",
            "reports/frequencies.svg",
        ]
    raise ConfigError(f"unknown stage {stage!r}")
