"""Command-line entry point: one binary, one subcommand per stage."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .captioner import (
    build_grounded_dataset,
    load_captioner,
    load_grounded,
    save_captioner,
    save_grounded,
    train_captioner,
)
from .data import load_corpus, save_corpus
from .errors import CapgroundError, ConfigError
from .evaluation import build_eval_report, emit_report
from .parsing import PredicateMapping
from .relclf import load_relclf, save_relclf, split_by_scene, train_relclf
from .synth import GeneratorConfig, WorldSpec, generate_corpus
from .verify import gradcheck_suite


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capground")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--profile", choices=sorted(pipeline.PROFILES), default=None)
    parser.add_argument("--out", default=None, help="default output path/directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic corpus")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--coverage", type=float, default=0.4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--captions-per-scene", type=int, default=2)
    p.add_argument("--spec", default=None, help="custom world spec JSON")
    p.add_argument("--out", default=None, required=False)

    p = sub.add_parser("parse", help="extract triplets from captions")
    p.add_argument("--captions", required=True, help="corpus JSONL file")
    p.add_argument("--mapping", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train-captioner", help="train the grounding captioner")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--out", default=None)

    p = sub.add_parser("ground", help="build the grounded relation dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mapping", required=True)
    p.add_argument("--grounder", choices=("attention", "oracle"), default="attention")
    p.add_argument("--out", default=None)

    p = sub.add_parser("train-relclf", help="train the relation classifier")
    p.add_argument("--grounded", required=True)
    p.add_argument("--corpus", default=None, help="corpus file supplying the relation catalog")
    p.add_argument("--num-relations", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="PredCls Recall@K evaluation")
    p.add_argument("--relclf", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", default="50,100")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--mapping", default=None)
    p.add_argument("--grounded", default=None, help="grounded dataset for the confusion table")
    p.add_argument("--out", default=None)

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("--config", default=None)
    p.add_argument("--skip", default="", help="comma-separated stages to reuse")
    p.add_argument("--out", default=None)

    p = sub.add_parser("check-grads", help="run the gradient verification suite")
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _resolved_config(args, config_path) -> dict:
    raw = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.profile is not None:
        raw["profile"] = args.profile
    if args.seed is not None:
        raw["seed"] = args.seed
    return pipeline.resolve_config(raw)


def _out(args, sub_out, default: str) -> Path:
    chosen = sub_out or args.out or default
    return Path(chosen)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (CapgroundError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "generate":
        seed = args.seed if args.seed is not None else 0
        world = WorldSpec.from_file(args.spec) if args.spec else WorldSpec.build(seed=seed)
        config = GeneratorConfig(
            num_scenes=args.scenes,
            coverage=args.coverage,
            feature_noise=args.noise,
            captions_per_scene=args.captions_per_scene,
            seed=seed,
        )
        splits = generate_corpus(world, config)
        out = _out(args, args.out, "corpus.jsonl")
        out.parent.mkdir(parents=True, exist_ok=True)
        stem = out.with_suffix("")
        from .data import Corpus

        combined = Corpus(
            feature_dim=world.feature_dim,
            class_words=world.class_words,
            relation_names=world.relation_names,
            scenes=tuple(
                sorted(splits.all_scenes(), key=lambda s: s.scene_id)
            ),
        )
        save_corpus(combined, out)
        for name, corpus in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
            save_corpus(corpus, Path(f"{stem}.{name}.jsonl"))
        PredicateMapping(world.predicate_mapping()).to_file(Path(f"{stem}.mapping.json"))
        print(f"wrote {out} (+train/val/test splits, mapping) with {args.scenes} scenes")
        return 0

    if args.command == "parse":
        corpus = load_corpus(args.captions)
        mapping = PredicateMapping.from_file(args.mapping)
        out = _out(args, args.out, "triplets.jsonl")
        totals = pipeline.parse_corpus_to_file(corpus, mapping, out)
        print(
            f"parsed {totals['captions']} captions: {totals['triplets']} triplets, "
            f"{totals['skipped_clauses']} skipped clauses -> {out}"
        )
        return 0

    if args.command == "train-captioner":
        config = _resolved_config(args, args.config)
        corpus = load_corpus(args.corpus)
        params, vocab, losses = train_captioner(corpus, pipeline.captioner_config(config))
        out = _out(args, args.out, "captioner.ckpt")
        save_captioner(out, params, vocab)
        final = f"{losses[-1]:.4f}" if losses else "n/a"
        print(f"trained captioner for {len(losses)} epochs (final loss {final}) -> {out}")
        return 0

    if args.command == "ground":
        corpus = load_corpus(args.corpus)
        mapping = PredicateMapping.from_file(args.mapping)
        if args.grounder == "oracle":
            examples, diag = build_grounded_dataset(None, corpus, mapping, None, grounder="oracle")
        else:
            params, vocab = load_captioner(args.ckpt)
            examples, diag = build_grounded_dataset(params, corpus, mapping, vocab)
        out = _out(args, args.out, "grounded.jsonl")
        save_grounded(out, examples)
        Path(str(out) + ".diag.json").write_text(
            json.dumps(diag.as_dict(), indent=2, sort_keys=True) + "\n"
        )
        print(f"grounded {diag.examples} tuples ({diag.self_pairs} self-pairs dropped) -> {out}")
        return 0

    if args.command == "train-relclf":
        config = _resolved_config(args, args.config)
        examples = load_grounded(args.grounded)
        if args.num_relations is not None:
            num_relations = args.num_relations
        elif args.corpus:
            num_relations = load_corpus(args.corpus).num_relations
        else:
            raise ConfigError("provide --num-relations or --corpus for the relation catalog")
        params, history = train_relclf(examples, num_relations, pipeline.relclf_config(config))
        out = _out(args, args.out, "relclf.ckpt")
        save_relclf(out, params)
        val = history.val_accuracy[-1] if history.val_accuracy else float("nan")
        print(f"trained relclf for {len(history.losses)} epochs (val acc {val:.3f}) -> {out}")
        return 0

    if args.command == "eval":
        config = _resolved_config(args, None)
        corpus = load_corpus(args.corpus)
        params = load_relclf(args.relclf)
        mapping = PredicateMapping.from_file(args.mapping) if args.mapping else None
        confusion_examples = None
        if args.grounded:
            rc = pipeline.relclf_config(config)
            _, confusion_examples = split_by_scene(
                load_grounded(args.grounded), rc.val_fraction, rc.seed
            )
        ks = tuple(int(k) for k in str(args.k).split(","))
        report = build_eval_report(
            params,
            corpus,
            mapping,
            ks=ks,
            with_baseline=args.baseline and mapping is not None,
            confusion_examples=confusion_examples,
            config_echo=config,
        )
        out = _out(args, args.out, "reports")
        emit_report(report, out)
        for k, method, value in report.recall_table():
            print(f"recall@{k:<4d} {method:<18s} {value:.4f}")
        print(f"report written to {out}")
        return 0

    if args.command == "run":
        config = _resolved_config(args, args.config)
        out = _out(args, args.out, "run")
        skip = tuple(s for s in args.skip.split(",") if s)
        manifest = pipeline.run_pipeline(config, out, skip=skip)
        print(f"pipeline complete: {len(manifest['artifacts'])} artifacts in {out}")
        print(f"manifest hash {manifest['manifest_hash']}")
        return 0

    if args.command == "check-grads":
        reports = gradcheck_suite(seed=args.seed if args.seed is not None else 0)
        failed = False
        for name, report in reports.items():
            ok = report.passed(args.tolerance)
            failed |= not ok
            status = "ok" if ok else "FAIL"
            print(
                f"{status:4s} {name:22s} max_rel_error={report.max_rel_error:.3e} "
                f"(worst: {report.worst_param})"
            )
        return 1 if failed else 0

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
