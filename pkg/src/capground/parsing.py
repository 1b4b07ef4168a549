"""Rule-based caption -> (subject, predicate, object) triplet extraction.

Captions are clauses joined by "and"; each clause is parsed as

    [det] [attr]* NOUN  PRED-PHRASE  [det] [attr]* NOUN

where the predicate phrase is the longest match against a predicate
lexicon (multi-token surfaces supported), the subject noun is the token
immediately before the predicate, and the object noun is the final token
of the clause.  Clauses that do not match are skipped silently and
counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .data import Corpus, RelationClass


@dataclass(frozen=True)
class EntityMention:
    lemma: str
    head: int  # token index in the caption


@dataclass(frozen=True)
class PredicateMention:
    surface: str
    start: int
    end: int  # exclusive

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Triplet:
    subject: EntityMention
    predicate: PredicateMention
    object: EntityMention

    def __post_init__(self):
        if self.predicate.end <= self.predicate.start:
            raise ValueError("empty predicate span")
        if not (self.subject.head < self.predicate.start and self.predicate.end <= self.object.head):
            raise ValueError("triplet violates clause order")


@dataclass(frozen=True)
class ParsedCaption:
    triplets: tuple[Triplet, ...]
    skipped_clauses: int


@dataclass(frozen=True)
class EntityRelationSets:
    """First-appearance-ordered unions of triplet entities and predicates."""

    entities: tuple[EntityMention, ...]
    relations: tuple[str, ...]


_DETERMINERS = frozenset({"a", "an", "the"})
_CONJUNCTION = "and"


@dataclass(frozen=True, eq=False)
class ParserLexicon:
    predicate_phrases: frozenset[tuple[str, ...]]
    determiners: frozenset[str] = _DETERMINERS
    attributes: frozenset[str] = frozenset()

    @cached_property
    def max_phrase_len(self) -> int:
        return max((len(p) for p in self.predicate_phrases), default=0)

    @cached_property
    def predicate_words(self) -> frozenset[str]:
        return frozenset(w for p in self.predicate_phrases for w in p)

    @classmethod
    def from_surfaces(cls, surfaces, attributes=()) -> "ParserLexicon":
        return cls(
            predicate_phrases=frozenset(tuple(s.split()) for s in surfaces),
            attributes=frozenset(attributes),
        )

    def is_noun(self, token: str) -> bool:
        return (
            token != _CONJUNCTION
            and token not in self.determiners
            and token not in self.attributes
            and token not in self.predicate_words
        )


def _split_clauses(tokens: Sequence[str]):
    start = 0
    for i, tok in enumerate(tokens):
        if tok == _CONJUNCTION:
            yield start, list(tokens[start:i])
            start = i + 1
    yield start, list(tokens[start:])


def _match_clause(clause: list[str], offset: int, lexicon: ParserLexicon) -> Optional[Triplet]:
    for pos in range(1, len(clause)):
        longest = 0
        for length in range(min(lexicon.max_phrase_len, len(clause) - pos), 0, -1):
            if tuple(clause[pos : pos + length]) in lexicon.predicate_phrases:
                longest = length
                break
        if longest == 0:
            continue
        subj, obj = clause[pos - 1], clause[-1]
        if pos + longest >= len(clause):
            continue  # nothing left for the object
        if not (lexicon.is_noun(subj) and lexicon.is_noun(obj)):
            continue
        return Triplet(
            subject=EntityMention(lemma=subj, head=offset + pos - 1),
            predicate=PredicateMention(
                surface=" ".join(clause[pos : pos + longest]),
                start=offset + pos,
                end=offset + pos + longest,
            ),
            object=EntityMention(lemma=obj, head=offset + len(clause) - 1),
        )
    return None


def parse_triplets(tokens: Sequence[str], lexicon: ParserLexicon) -> ParsedCaption:
    """Extract one triplet per parseable clause; count the rest."""
    triplets = []
    skipped = 0
    for offset, clause in _split_clauses(tokens):
        if not clause:
            skipped += 1
            continue
        triplet = _match_clause(clause, offset, lexicon)
        if triplet is None:
            skipped += 1
        else:
            triplets.append(triplet)
    return ParsedCaption(triplets=tuple(triplets), skipped_clauses=skipped)


def extract_entity_relation_sets(triplets: Sequence[Triplet]) -> EntityRelationSets:
    """Union of subjects/objects and of predicates, deduplicated by lemma
    and surface respectively, order of first appearance preserved."""
    entities: list[EntityMention] = []
    seen_lemmas: set[str] = set()
    relations: list[str] = []
    seen_surfaces: set[str] = set()
    for t in triplets:
        for mention in (t.subject, t.object):
            if mention.lemma not in seen_lemmas:
                seen_lemmas.add(mention.lemma)
                entities.append(mention)
        if t.predicate.surface not in seen_surfaces:
            seen_surfaces.add(t.predicate.surface)
            relations.append(t.predicate.surface)
    return EntityRelationSets(entities=tuple(entities), relations=tuple(relations))


class PredicateMapping:
    """Surface predicate -> canonical relation name, file-backed."""

    def __init__(self, surface_to_name: Mapping[str, str]):
        self._map = {k.lower().strip(): v for k, v in surface_to_name.items()}

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, surface: str) -> bool:
        return surface.lower().strip() in self._map

    def get(self, surface: str) -> Optional[str]:
        return self._map.get(surface.lower().strip())

    def surfaces(self) -> tuple[str, ...]:
        return tuple(self._map)

    @classmethod
    def from_file(cls, path) -> "PredicateMapping":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dict(sorted(self._map.items())), fh, indent=2)

    def lexicon(self, attributes=()) -> ParserLexicon:
        return ParserLexicon.from_surfaces(self._map, attributes)


def canonicalize(surface: str, mapping: PredicateMapping) -> Optional[str]:
    """Canonical relation name for a surface predicate, None if unmapped."""
    return mapping.get(surface)


def canonical_class(
    surface: str, mapping: PredicateMapping, relation_names: Sequence[str]
) -> Optional[RelationClass]:
    name = mapping.get(surface)
    if name is None or name not in relation_names:
        return None
    return RelationClass(id=relation_names.index(name), name=name)


@dataclass(frozen=True)
class FrequencyReport:
    """Per-class relation counts from parsed captions vs. ground truth."""

    relation_names: tuple[str, ...]
    caption_counts: tuple[int, ...]
    gt_counts: tuple[int, ...]
    spearman: Optional[float]
    skipped_clauses: int
    unmapped: int


def predicate_frequency_histogram(
    corpus: Corpus, mapping: PredicateMapping, lexicon: Optional[ParserLexicon] = None
) -> FrequencyReport:
    """Compare caption-derived relation frequencies with ground truth."""
    if lexicon is None:
        lexicon = mapping.lexicon()
    names = corpus.relation_names
    name_to_id = {n: i for i, n in enumerate(names)}
    caption_counts = np.zeros(len(names), dtype=np.int64)
    gt_counts = np.zeros(len(names), dtype=np.int64)
    skipped = 0
    unmapped = 0
    for scene in corpus.scenes:
        for _, c, _ in scene.gt_relations:
            gt_counts[c] += 1
        for caption in scene.captions:
            parsed = parse_triplets(caption.tokens, lexicon)
            skipped += parsed.skipped_clauses
            for t in parsed.triplets:
                name = mapping.get(t.predicate.surface)
                if name is None or name not in name_to_id:
                    unmapped += 1
                else:
                    caption_counts[name_to_id[name]] += 1

    spearman: Optional[float] = None
    if len(names) >= 2:
        rho = stats.spearmanr(caption_counts, gt_counts).statistic
        if np.isfinite(rho):
            spearman = float(rho)
    return FrequencyReport(
        relation_names=names,
        caption_counts=tuple(int(c) for c in caption_counts),
        gt_counts=tuple(int(c) for c in gt_counts),
        spearman=spearman,
        skipped_clauses=skipped,
        unmapped=unmapped,
    )
