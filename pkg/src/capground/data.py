"""Core domain types, vocabulary, and corpus serialization.

A corpus is a JSON Lines file: one header line followed by one scene per
line.  Float values are written as decimals with 17 significant digits so
that save/load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DimensionMismatch, EmptyCaption, ParseError

CORPUS_FORMAT = "capground-corpus"
CORPUS_VERSION = 1

_TERMINAL_PUNCT = ".,!"


def tokenize(raw: str) -> list[str]:
    """Lowercase, split on whitespace, strip terminal punctuation.

    Raises EmptyCaption if nothing survives.
    """
    tokens = []
    for piece in raw.split():
        word = piece.lower().rstrip(_TERMINAL_PUNCT)
        if word:
            tokens.append(word)
    if not tokens:
        raise EmptyCaption(f"caption tokenizes to nothing: {raw!r}")
    return tokens


@dataclass(frozen=True)
class Caption:
    raw: str
    tokens: tuple[str, ...]

    @classmethod
    def from_raw(cls, raw: str) -> "Caption":
        return cls(raw=raw, tokens=tuple(tokenize(raw)))

    def __post_init__(self):
        if not self.tokens or any(not t for t in self.tokens):
            raise EmptyCaption(f"caption has empty tokens: {self.raw!r}")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, eq=False)
class SceneObject:
    """One object in a scene: class, normalized box (x, y, w, h), feature."""

    id: int
    class_id: int
    box: tuple[float, float, float, float]
    feature: np.ndarray

    def __post_init__(self):
        x, y, w, h = self.box
        if not all(math.isfinite(v) for v in self.box):
            raise ValueError(f"non-finite box {self.box}")
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate box {self.box}")
        if x < 0 or y < 0 or x + w > 1 + 1e-12 or y + h > 1 + 1e-12:
            raise ValueError(f"box outside unit square: {self.box}")
        feat = np.ascontiguousarray(self.feature, dtype=np.float64)
        if not np.all(np.isfinite(feat)):
            raise ValueError("non-finite feature values")
        feat.flags.writeable = False
        object.__setattr__(self, "feature", feat)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneObject):
            return NotImplemented
        return (
            self.id == other.id
            and self.class_id == other.class_id
            and self.box == other.box
            and np.array_equal(self.feature, other.feature)
        )

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return (x + w / 2.0, y + h / 2.0)


@dataclass(frozen=True)
class RelationMention:
    """Oracle record of one relation rendered into a caption."""

    subject_token: int
    object_token: int
    predicate_span: tuple[int, int]
    surface: str
    subject_obj: int
    relation: int
    object_obj: int


@dataclass(frozen=True)
class CaptionAlignment:
    """Oracle alignment for a single caption."""

    entities: tuple[tuple[int, int], ...]  # (token index, object index)
    relations: tuple[RelationMention, ...]

    def entity_map(self) -> dict[int, int]:
        return dict(self.entities)


@dataclass(frozen=True)
class OracleAlignment:
    """Per-caption alignments; present only in synthetic corpora."""

    captions: tuple[CaptionAlignment, ...]


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    objects: tuple[SceneObject, ...]
    gt_relations: frozenset[tuple[int, int, int]]  # (subject, relation, object)
    captions: tuple[Caption, ...]
    oracle: Optional[OracleAlignment] = None

    def __post_init__(self):
        n = len(self.objects)
        if n < 2:
            raise ValueError(f"scene {self.scene_id}: needs >= 2 objects, got {n}")
        for i, obj in enumerate(self.objects):
            if obj.id != i:
                raise ValueError(f"scene {self.scene_id}: object id {obj.id} at index {i}")
        for s, c, o in self.gt_relations:
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError(f"scene {self.scene_id}: relation index out of range")
            if s == o:
                raise ValueError(f"scene {self.scene_id}: self-relation ({s},{c},{o})")
        if not self.captions:
            raise ValueError(f"scene {self.scene_id}: at least one caption required")
        if self.oracle is not None and len(self.oracle.captions) != len(self.captions):
            raise ValueError(f"scene {self.scene_id}: oracle/caption count mismatch")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.objects == tuple(other.objects)
            and self.gt_relations == other.gt_relations
            and self.captions == other.captions
            and self.oracle == other.oracle
        )

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def features(self) -> np.ndarray:
        """All object features stacked into an (n, d) array."""
        return np.stack([o.feature for o in self.objects])


@dataclass(frozen=True)
class RelationClass:
    id: int
    name: str


PAD, BOS, EOS, UNK = 0, 1, 2, 3
_RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Word/id bijection with fixed reserved symbols.

    Ids 0..3 are <pad>, <bos>, <eos>, <unk>; content words follow in
    descending-frequency order (ties lexicographic).
    """

    def __init__(self, words: Iterable[str]):
        self._words: list[str] = list(_RESERVED)
        self._ids: dict[str, int] = {w: i for i, w in enumerate(self._words)}
        for w in words:
            if w in self._ids:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            self._ids[w] = len(self._words)
            self._words.append(w)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    def encode(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def decode(self, idx: int) -> str:
        return self._words[idx]

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(self._words)


def build_vocab(captions: Iterable[Caption], min_count: int = 1) -> Vocabulary:
    """Vocabulary over all tokens with frequency >= min_count."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for cap in captions for t in cap.tokens)
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(kept)


@dataclass(frozen=True, eq=False)
class Corpus:
    """A set of scenes plus the class/relation catalogs they index into."""

    feature_dim: int
    class_words: tuple[str, ...]
    relation_names: tuple[str, ...]
    scenes: tuple[Scene, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_words)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def relation_classes(self) -> list[RelationClass]:
        return [RelationClass(i, n) for i, n in enumerate(self.relation_names)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.class_words == other.class_words
            and self.relation_names == other.relation_names
            and self.scenes == other.scenes
        )

    def __len__(self) -> int:
        return len(self.scenes)


# ---------------------------------------------------------------------------
# Serialization.  Floats are rendered with %.17g so parsing recovers the
# exact float64 bit pattern.
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _floats(values) -> str:
    return ",".join(_fmt(v) for v in values)


def _scene_to_line(scene: Scene) -> str:
    objs = ",".join(
        '{"class_id":%d,"box":[%s],"feature":[%s]}'
        % (o.class_id, _floats(o.box), _floats(o.feature))
        for o in scene.objects
    )
    rels = ",".join("[%d,%d,%d]" % r for r in sorted(scene.gt_relations))
    caps = ",".join(json.dumps(c.raw) for c in scene.captions)
    if scene.oracle is None:
        oracle = "null"
    else:
        parts = []
        for align in scene.oracle.captions:
            ents = ",".join('"%d":%d' % (t, o) for t, o in align.entities)
            rms = ",".join(
                '{"subject_token":%d,"object_token":%d,"span":[%d,%d],'
                '"surface":%s,"subject":%d,"class":%d,"object":%d}'
                % (
                    m.subject_token,
                    m.object_token,
                    m.predicate_span[0],
                    m.predicate_span[1],
                    json.dumps(m.surface),
                    m.subject_obj,
                    m.relation,
                    m.object_obj,
                )
                for m in align.relations
            )
            parts.append('{"entities":{%s},"relations":[%s]}' % (ents, rms))
        oracle = '{"captions":[%s]}' % ",".join(parts)
    return (
        '{"scene_id":%s,"objects":[%s],"gt_relations":[%s],"captions":[%s],"oracle":%s}'
        % (json.dumps(scene.scene_id), objs, rels, caps, oracle)
    )


def save_corpus(corpus: Corpus, path) -> None:
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "feature_dim": corpus.feature_dim,
        "num_classes": corpus.num_classes,
        "num_relations": corpus.num_relations,
        "class_words": list(corpus.class_words),
        "relation_names": list(corpus.relation_names),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for scene in corpus.scenes:
            fh.write(_scene_to_line(scene) + "\n")


def _parse_scene(record: dict, feature_dim: int, line: int) -> Scene:
    try:
        scene_id = record["scene_id"]
        raw_objects = record["objects"]
        raw_relations = record["gt_relations"]
        raw_captions = record["captions"]
        raw_oracle = record["oracle"]
    except KeyError as exc:
        raise ParseError(line, f"missing key {exc.args[0]!r}") from None

    objects = []
    for i, ro in enumerate(raw_objects):
        try:
            feature = np.asarray(ro["feature"], dtype=np.float64)
            if feature.shape != (feature_dim,):
                raise DimensionMismatch(
                    f"line {line}: feature of length {feature.size}, corpus dim {feature_dim}"
                )
            objects.append(
                SceneObject(
                    id=i,
                    class_id=int(ro["class_id"]),
                    box=tuple(float(v) for v in ro["box"]),
                    feature=feature,
                )
            )
        except DimensionMismatch:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line, f"bad object record: {exc}") from None

    oracle = None
    if raw_oracle is not None:
        aligns = []
        try:
            for rc in raw_oracle["captions"]:
                entities = tuple(sorted((int(t), int(o)) for t, o in rc["entities"].items()))
                mentions = tuple(
                    RelationMention(
                        subject_token=int(m["subject_token"]),
                        object_token=int(m["object_token"]),
                        predicate_span=(int(m["span"][0]), int(m["span"][1])),
                        surface=m["surface"],
                        subject_obj=int(m["subject"]),
                        relation=int(m["class"]),
                        object_obj=int(m["object"]),
                    )
                    for m in rc["relations"]
                )
                aligns.append(CaptionAlignment(entities=entities, relations=mentions))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(line, f"bad oracle record: {exc}") from None
        oracle = OracleAlignment(captions=tuple(aligns))

    try:
        return Scene(
            scene_id=scene_id,
            objects=tuple(objects),
            gt_relations=frozenset((int(s), int(c), int(o)) for s, c, o in raw_relations),
            captions=tuple(Caption.from_raw(r) for r in raw_captions),
            oracle=oracle,
        )
    except (TypeError, ValueError, EmptyCaption) as exc:
        raise ParseError(line, f"bad scene record: {exc}") from None


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(1, "empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"bad header: {exc}") from None
    if header.get("format") != CORPUS_FORMAT:
        raise ParseError(1, f"unexpected format {header.get('format')!r}")
    if header.get("version") != CORPUS_VERSION:
        raise ParseError(1, f"unsupported version {header.get('version')!r}")
    feature_dim = int(header["feature_dim"])

    scenes = []
    for idx, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(idx, f"bad JSON: {exc}") from None
        scenes.append(_parse_scene(record, feature_dim, idx))

    corpus = Corpus(
        feature_dim=feature_dim,
        class_words=tuple(header.get("class_words", ())),
        relation_names=tuple(header.get("relation_names", ())),
        scenes=tuple(scenes),
    )
    if header.get("num_classes") not in (None, corpus.num_classes):
        raise ParseError(1, "num_classes disagrees with class_words")
    if header.get("num_relations") not in (None, corpus.num_relations):
        raise ParseError(1, "num_relations disagrees with relation_names")
    return corpus
