"""PredCls Recall@K evaluation, baselines, confusion analysis, reports.

Recall is macro-averaged: each scene contributes |top-k hits| / |gt|, and
scenes with no ground-truth relations are excluded from the mean (counted
separately).  Candidates match ground truth on exact
(subject index, relation class, object index).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .captioner import GroundedExample
from .data import Corpus, Scene
from .errors import ContractError, IoError
from .parsing import (
    FrequencyReport,
    ParserLexicon,
    PredicateMapping,
    parse_triplets,
    predicate_frequency_histogram,
)
from .relclf import PredictionEntry, PredictionList, RelClfParams, predict_relations
from .util import parallel_map, rng_stream


def recall_at_k(
    predictions: "PredictionList | Sequence[PredictionEntry]",
    gt_relations: set[tuple[int, int, int]],
    k: int,
) -> float:
    """|top-k candidates intersected with gt| / |gt|."""
    entries = predictions.entries if isinstance(predictions, PredictionList) else tuple(predictions)
    if not gt_relations:
        raise ContractError("recall_at_k needs non-empty ground truth")
    if k < 1:
        raise ContractError("k must be >= 1")
    confidences = [e.confidence for e in entries]
    if any(a < b for a, b in zip(confidences, confidences[1:])):
        raise ContractError("predictions must be sorted by descending confidence")
    top = {e.key() for e in entries[:k]}
    return len(top & gt_relations) / len(gt_relations)


@dataclass
class RecallSummary:
    recalls: dict[int, float]            # k -> macro-averaged recall
    scenes_evaluated: int
    scenes_without_gt: int
    per_scene: dict[str, dict[int, float]] = field(default_factory=dict)


def _macro_average(scene_values: dict[str, dict[int, float]], ks, skipped: int) -> RecallSummary:
    recalls = {}
    for k in ks:
        values = [v[k] for v in scene_values.values()]
        recalls[k] = float(np.mean(values)) if values else 0.0
    return RecallSummary(
        recalls=recalls,
        scenes_evaluated=len(scene_values),
        scenes_without_gt=skipped,
        per_scene=scene_values,
    )


def evaluate_predcls(
    params: RelClfParams, corpus: Corpus, ks: Sequence[int] = (50, 100)
) -> RecallSummary:
    """Run the classifier over all pairs of every test scene."""
    scenes_with_gt = [s for s in corpus.scenes if s.gt_relations]
    skipped = len(corpus.scenes) - len(scenes_with_gt)
    predictions = parallel_map(lambda s: predict_relations(params, s.features()), scenes_with_gt)
    per_scene = {
        scene.scene_id: {k: recall_at_k(preds, set(scene.gt_relations), k) for k in ks}
        for scene, preds in zip(scenes_with_gt, predictions)
    }
    return _macro_average(per_scene, ks, skipped)


@dataclass
class BaselineDiagnostics:
    parsed_triplets: int = 0
    skipped_clauses: int = 0
    unmapped_predicates: int = 0
    ungrounded_entities: int = 0


def caption_triplet_predictions(
    scene: Scene,
    mapping: PredicateMapping,
    class_words: Sequence[str],
    lexicon: ParserLexicon,
    diag: Optional[BaselineDiagnostics] = None,
) -> set[tuple[int, str, int]]:
    """Deduplicated (subject index, relation name, object index) triplets
    parsed from a scene's captions.

    Entities ground by class-word string match; the first object of the
    matching class wins when several share it.
    """
    word_to_first: dict[str, int] = {}
    for obj in scene.objects:
        word_to_first.setdefault(class_words[obj.class_id], obj.id)

    seen: set[tuple[int, str, int]] = set()
    for caption in scene.captions:
        parsed = parse_triplets(caption.tokens, lexicon)
        if diag:
            diag.parsed_triplets += len(parsed.triplets)
            diag.skipped_clauses += parsed.skipped_clauses
        for t in parsed.triplets:
            name = mapping.get(t.predicate.surface)
            if name is None:
                if diag:
                    diag.unmapped_predicates += 1
                continue
            subj = word_to_first.get(t.subject.lemma)
            obj = word_to_first.get(t.object.lemma)
            if subj is None or obj is None or subj == obj:
                if diag:
                    diag.ungrounded_entities += 1
                continue
            seen.add((subj, name, obj))
    return seen


def caption_only_baseline(
    corpus: Corpus,
    mapping: PredicateMapping,
    ks: Sequence[int] = (50, 100),
    lexicon: Optional[ParserLexicon] = None,
) -> tuple[RecallSummary, BaselineDiagnostics]:
    """Recall of the scene graph parsed directly from the captions."""
    if lexicon is None:
        lexicon = mapping.lexicon()
    name_to_id = {n: i for i, n in enumerate(corpus.relation_names)}
    diag = BaselineDiagnostics()
    per_scene: dict[str, dict[int, float]] = {}
    skipped = 0
    for scene in corpus.scenes:
        if not scene.gt_relations:
            skipped += 1
            continue
        named = caption_triplet_predictions(scene, mapping, corpus.class_words, lexicon, diag)
        entries = []
        for subj, name, obj in named:
            rel = name_to_id.get(name)
            if rel is None:
                diag.unmapped_predicates += 1
                continue
            entries.append(PredictionEntry(subject=subj, object=obj, relation=rel, confidence=1.0))
        entries.sort(key=lambda e: (e.subject, e.object, e.relation))
        preds = PredictionList(entries=tuple(entries))
        per_scene[scene.scene_id] = {
            k: recall_at_k(preds, set(scene.gt_relations), k) for k in ks
        }
    return _macro_average(per_scene, ks, skipped), diag


def expected_random_recall(corpus: Corpus, num_relations: int, k: int) -> float:
    """Closed-form mean recall of a uniformly random ranking: per scene,
    every candidate is equally likely to land in the top k, so the
    expected hit fraction is min(k, N)/N with N = n(n-1)C."""
    values = []
    for scene in corpus.scenes:
        if not scene.gt_relations:
            continue
        n = scene.num_objects
        candidates = n * (n - 1) * num_relations
        values.append(min(k, candidates) / candidates)
    return float(np.mean(values)) if values else 0.0


def simulated_random_recall(
    corpus: Corpus, num_relations: int, k: int, trials: int = 200, seed: int = 0
) -> float:
    """Monte-Carlo recall of random rankings (the independent oracle for
    the closed form above)."""
    rng = rng_stream(seed, 99)
    scene_means = []
    for scene in corpus.scenes:
        gt = set(scene.gt_relations)
        if not gt:
            continue
        n = scene.num_objects
        candidates = [
            (i, c, j)
            for i in range(n)
            for j in range(n)
            if i != j
            for c in range(num_relations)
        ]
        total = 0.0
        for _ in range(trials):
            order = rng.permutation(len(candidates))[:k]
            hits = sum(1 for idx in order if candidates[idx] in gt)
            total += hits / len(gt)
        scene_means.append(total / trials)
    return float(np.mean(scene_means)) if scene_means else 0.0


@dataclass
class ConfusionReport:
    """Most-frequent wrong predictions per true class."""

    confusions: dict[str, list[tuple[str, int]]]
    support: dict[str, int]
    omitted: list[str]


def confusion_table(
    params: RelClfParams,
    examples: Sequence[GroundedExample],
    relation_names: Sequence[str],
    top_m: int = 5,
) -> ConfusionReport:
    counts = np.zeros((len(relation_names), len(relation_names)), dtype=np.int64)
    if examples:
        subj = np.stack([e.subject_feature for e in examples])
        obj = np.stack([e.object_feature for e in examples])
        from .kernel import no_grad
        from .relclf import relclf_forward

        with no_grad():
            predicted = relclf_forward(params, subj, obj, train_mode=False).data.argmax(axis=1)
        for ex, pred in zip(examples, predicted):
            counts[ex.relation, int(pred)] += 1

    confusions: dict[str, list[tuple[str, int]]] = {}
    support: dict[str, int] = {}
    omitted: list[str] = []
    for true_id, true_name in enumerate(relation_names):
        row_total = int(counts[true_id].sum())
        if row_total == 0:
            omitted.append(true_name)
            continue
        support[true_name] = row_total
        wrong = [
            (relation_names[pred_id], int(c))
            for pred_id, c in enumerate(counts[true_id])
            if pred_id != true_id and c > 0
        ]
        wrong.sort(key=lambda item: (-item[1], item[0]))
        confusions[true_name] = wrong[:top_m]
    return ConfusionReport(confusions=confusions, support=support, omitted=omitted)


@dataclass
class EvalReport:
    """Everything the eval stage measures, ready for serialization."""

    ks: tuple[int, ...]
    model_recall: RecallSummary
    baseline_recall: Optional[RecallSummary]
    random_recall: dict[int, float]
    confusion: Optional[ConfusionReport]
    correlation: Optional[FrequencyReport]
    diagnostics: dict
    config_echo: dict
    runtime_seconds: float

    def recall_table(self) -> list[tuple[int, str, float]]:
        rows = [(k, "model", self.model_recall.recalls[k]) for k in self.ks]
        if self.baseline_recall is not None:
            rows += [(k, "caption-baseline", self.baseline_recall.recalls[k]) for k in self.ks]
        rows += [(k, "random", self.random_recall[k]) for k in self.ks]
        return rows

    def to_dict(self) -> dict:
        def summary(s: Optional[RecallSummary]):
            if s is None:
                return None
            return {
                "recalls": {str(k): v for k, v in s.recalls.items()},
                "scenes_evaluated": s.scenes_evaluated,
                "scenes_without_gt": s.scenes_without_gt,
            }

        return {
            "ks": list(self.ks),
            "model": summary(self.model_recall),
            "caption_baseline": summary(self.baseline_recall),
            "random": {str(k): v for k, v in self.random_recall.items()},
            "confusion": None
            if self.confusion is None
            else {
                "confusions": {
                    name: [[p, c] for p, c in pairs] for name, pairs in self.confusion.confusions.items()
                },
                "support": self.confusion.support,
                "omitted": self.confusion.omitted,
            },
            "correlation": None
            if self.correlation is None
            else {
                "relation_names": list(self.correlation.relation_names),
                "caption_counts": list(self.correlation.caption_counts),
                "gt_counts": list(self.correlation.gt_counts),
                "spearman": self.correlation.spearman,
                "skipped_clauses": self.correlation.skipped_clauses,
                "unmapped": self.correlation.unmapped,
            },
            "diagnostics": self.diagnostics,
            "config": self.config_echo,
        }


def build_eval_report(
    params: RelClfParams,
    corpus: Corpus,
    mapping: Optional[PredicateMapping],
    ks: Sequence[int] = (50, 100),
    with_baseline: bool = True,
    confusion_examples: Optional[Sequence[GroundedExample]] = None,
    diagnostics: Optional[dict] = None,
    config_echo: Optional[dict] = None,
    random_trials: int = 100,
) -> EvalReport:
    started = time.perf_counter()
    model = evaluate_predcls(params, corpus, ks)
    baseline = None
    correlation = None
    diag = dict(diagnostics or {})
    if mapping is not None:
        correlation = predicate_frequency_histogram(corpus, mapping)
        if with_baseline:
            baseline, bdiag = caption_only_baseline(corpus, mapping, ks)
            diag["baseline"] = vars(bdiag)
    random_recall = {
        k: simulated_random_recall(corpus, params.num_relations, k, trials=random_trials)
        for k in ks
    }
    confusion = None
    if confusion_examples is not None:
        confusion = confusion_table(params, confusion_examples, corpus.relation_names)
    return EvalReport(
        ks=tuple(ks),
        model_recall=model,
        baseline_recall=baseline,
        random_recall=random_recall,
        confusion=confusion,
        correlation=correlation,
        diagnostics=diag,
        config_echo=dict(config_echo or {}),
        runtime_seconds=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# Report emission: json + csv + self-rendered SVG bar charts
# ---------------------------------------------------------------------------


def _svg_bar_chart(title: str, groups: list[tuple[str, list[tuple[str, float]]]], width=640) -> str:
    """Tiny grouped bar chart as plain SVG text; no external renderer."""
    bar_w = 28
    gap = 18
    height = 260
    base = 200
    peak = max((v for _, bars in groups for _, v in bars), default=1.0) or 1.0
    pieces = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="10" y="20" font-size="14" font-family="sans-serif">{title}</text>',
        f'<line x1="10" y1="{base}" x2="{width - 10}" y2="{base}" stroke="black"/>',
    ]
    palette = ("#4878a8", "#e07b39", "#6aa84f", "#a64d79")
    x = 30
    for label, bars in groups:
        group_start = x
        for idx, (_, value) in enumerate(bars):
            h = int(160 * value / peak)
            pieces.append(
                f'<rect x="{x}" y="{base - h}" width="{bar_w}" height="{h}" '
                f'fill="{palette[idx % len(palette)]}"/>'
            )
            pieces.append(
                f'<text x="{x}" y="{base - h - 4}" font-size="9" font-family="sans-serif">'
                f"{value:.3g}</text>"
            )
            x += bar_w + 4
        center = (group_start + x - 4) // 2
        pieces.append(
            f'<text x="{center}" y="{base + 16}" font-size="10" font-family="sans-serif" '
            f'text-anchor="middle">{label}</text>'
        )
        x += gap
    legend_y = 236
    lx = 30
    if groups:
        for idx, (series, _) in enumerate(groups[0][1]):
            pieces.append(
                f'<rect x="{lx}" y="{legend_y - 9}" width="10" height="10" '
                f'fill="{palette[idx % len(palette)]}"/>'
            )
            pieces.append(
                f'<text x="{lx + 14}" y="{legend_y}" font-size="10" font-family="sans-serif">{series}</text>'
            )
            lx += 14 + 8 * len(series) + 20
    pieces.append("</svg>")
    return "\n".join(pieces)


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write report.json, csv tables, SVG charts, and a timing sidecar.

    Wall-clock timing goes to timing.json so every other artifact is
    byte-deterministic for identical runs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []

        path = out / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(path)

        path = out / "recall.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "method", "recall"])
            for k, method, value in report.recall_table():
                writer.writerow([k, method, f"{value:.6f}"])
        written.append(path)

        path = out / "confusion.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true_class", "rank", "predicted_class", "count"])
            if report.confusion is not None:
                for name in sorted(report.confusion.confusions):
                    for rank, (pred, count) in enumerate(report.confusion.confusions[name], start=1):
                        writer.writerow([name, rank, pred, count])
        written.append(path)

        path = out / "correlation.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["relation", "caption_count", "gt_count"])
            if report.correlation is not None:
                for name, cc, gc in zip(
                    report.correlation.relation_names,
                    report.correlation.caption_counts,
                    report.correlation.gt_counts,
                ):
                    writer.writerow([name, cc, gc])
        written.append(path)

        recall_groups = []
        for k in report.ks:
            bars = [("model", report.model_recall.recalls[k])]
            if report.baseline_recall is not None:
                bars.append(("caption-baseline", report.baseline_recall.recalls[k]))
            bars.append(("random", report.random_recall[k]))
            recall_groups.append((f"R@{k}", bars))
        path = out / "recall.svg"
        path.write_text(_svg_bar_chart("PredCls recall", recall_groups))
        written.append(path)

        if report.correlation is not None:
            freq_groups = [
                (name, [("caption", float(cc)), ("ground truth", float(gc))])
                for name, cc, gc in zip(
                    report.correlation.relation_names,
                    report.correlation.caption_counts,
                    report.correlation.gt_counts,
                )
            ]
            path = out / "frequencies.svg"
            path.write_text(_svg_bar_chart("Relation frequency: captions vs ground truth", freq_groups, width=980))
            written.append(path)

        (out / "timing.json").write_text(
            json.dumps({"runtime_seconds": report.runtime_seconds}) + "\n"
        )
        return written
    except OSError as exc:
        raise IoError(f"cannot write report to {out}: {exc}") from exc
