"""Synthetic scene generator with known ground truth.

Stands in for real images + pretrained features: every scene carries object
boxes, class-and-geometry-encoding feature vectors, ground-truth relations
derived from deterministic rules, and templated captions whose alignments
are recorded as an oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import (
    Caption,
    CaptionAlignment,
    Corpus,
    OracleAlignment,
    RelationMention,
    Scene,
    SceneObject,
)
from .errors import ConfigError
from .util import rng_stream

SPATIAL_RELATIONS = ("above", "below", "left of", "right of", "in", "near")

NEAR_DISTANCE = 0.2

_DEFAULT_CLASS_WORDS = ("person", "dog", "cat", "cup", "table", "hat", "ball", "box")

_DEFAULT_SEMANTIC_RULES = (
    ("person", "holding", "cup"),
    ("person", "wearing", "hat"),
    ("dog", "chasing", "cat"),
    ("cat", "watching", "ball"),
)

_DEFAULT_SURFACE_FORMS = {
    "above": ("above", "over"),
    "below": ("below", "under", "beneath"),
    "left of": ("left of", "to the left of"),
    "right of": ("right of", "to the right of"),
    "in": ("in", "inside", "sitting in"),
    "near": ("near", "beside", "next to"),
    "holding": ("holding", "carrying"),
    "wearing": ("wearing", "wears"),
    "chasing": ("chasing", "running after"),
    "watching": ("watching", "looking at"),
}

_DEFAULT_ATTRIBUTES = ("red", "blue", "green", "small", "big", "shiny", "old", "striped")

# rng stream tags
_WORLD, _SCENE, _SPLIT = 0, 1, 2


@dataclass(frozen=True)
class SemanticRule:
    """Relation that holds for every ordered pair of matching classes."""

    subject_word: str
    relation: str
    object_word: str


@dataclass(frozen=True, eq=False)
class WorldSpec:
    """Fixed vocabulary of a synthetic world: classes, relations, surfaces.

    Prototype and box-embedding matrices are drawn once from the world seed
    and never change, so features are a pure function of (class, box, noise).
    """

    class_words: tuple[str, ...]
    relation_names: tuple[str, ...]
    semantic_rules: tuple[SemanticRule, ...]
    surface_forms: dict[str, tuple[str, ...]]
    attributes: tuple[str, ...]
    feature_dim: int
    seed: int
    prototypes: np.ndarray = field(repr=False)
    box_embed: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(set(self.class_words)) != len(self.class_words):
            raise ConfigError("duplicate class words")
        for w in self.class_words:
            if len(w.split()) != 1:
                raise ConfigError(f"class word must be a single token: {w!r}")
        if len(set(self.relation_names)) != len(self.relation_names):
            raise ConfigError("duplicate relation names")
        seen: dict[str, str] = {}
        for name, surfaces in self.surface_forms.items():
            if name not in self.relation_names:
                raise ConfigError(f"surface forms for unknown relation {name!r}")
            if not surfaces:
                raise ConfigError(f"relation {name!r} has no surface forms")
            for s in surfaces:
                if s in seen:
                    raise ConfigError(f"surface {s!r} maps to both {seen[s]!r} and {name!r}")
                seen[s] = name
        for name in self.relation_names:
            if name not in self.surface_forms:
                raise ConfigError(f"relation {name!r} has no surface forms")
        for rule in self.semantic_rules:
            if rule.subject_word not in self.class_words or rule.object_word not in self.class_words:
                raise ConfigError(f"semantic rule uses unknown class: {rule}")
            if rule.relation not in self.relation_names:
                raise ConfigError(f"semantic rule uses unknown relation: {rule}")
        if self.prototypes.shape != (len(self.class_words), self.feature_dim):
            raise ConfigError("prototype matrix shape mismatch")
        if self.box_embed.shape != (self.feature_dim, 4):
            raise ConfigError("box embedding shape mismatch")

    @classmethod
    def build(
        cls,
        seed: int = 0,
        class_words: tuple[str, ...] = _DEFAULT_CLASS_WORDS,
        semantic_rules=_DEFAULT_SEMANTIC_RULES,
        surface_forms: Optional[dict] = None,
        attributes: tuple[str, ...] = _DEFAULT_ATTRIBUTES,
        feature_dim: int = 64,
    ) -> "WorldSpec":
        rules = tuple(
            r if isinstance(r, SemanticRule) else SemanticRule(*r) for r in semantic_rules
        )
        relations = SPATIAL_RELATIONS + tuple(r.relation for r in rules)
        forms = dict(surface_forms) if surface_forms is not None else {
            k: v for k, v in _DEFAULT_SURFACE_FORMS.items() if k in relations
        }
        rng = rng_stream(seed, _WORLD)
        prototypes = rng.standard_normal((len(class_words), feature_dim))
        # geometry gets a larger gain than class identity so spatial
        # relations stay salient in pair features
        box_embed = 2.0 * rng.standard_normal((feature_dim, 4))
        return cls(
            class_words=tuple(class_words),
            relation_names=relations,
            semantic_rules=rules,
            surface_forms={k: tuple(v) for k, v in forms.items()},
            attributes=tuple(attributes),
            feature_dim=feature_dim,
            seed=seed,
            prototypes=prototypes,
            box_embed=box_embed,
        )

    @classmethod
    def from_file(cls, path) -> "WorldSpec":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.build(
            seed=raw.get("seed", 0),
            class_words=tuple(raw["class_words"]),
            semantic_rules=tuple(tuple(r) for r in raw["semantic_rules"]),
            surface_forms={k: tuple(v) for k, v in raw["surface_forms"].items()},
            attributes=tuple(raw.get("attributes", _DEFAULT_ATTRIBUTES)),
            feature_dim=int(raw.get("feature_dim", 64)),
        )

    def to_file(self, path) -> None:
        raw = {
            "seed": self.seed,
            "class_words": list(self.class_words),
            "semantic_rules": [[r.subject_word, r.relation, r.object_word] for r in self.semantic_rules],
            "surface_forms": {k: list(v) for k, v in self.surface_forms.items()},
            "attributes": list(self.attributes),
            "feature_dim": self.feature_dim,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, indent=2)

    @property
    def num_classes(self) -> int:
        return len(self.class_words)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def relation_id(self, name: str) -> int:
        return self.relation_names.index(name)

    def predicate_mapping(self) -> dict[str, str]:
        """Surface predicate -> canonical relation name."""
        return {s: name for name, surfaces in self.surface_forms.items() for s in surfaces}


@dataclass(frozen=True)
class GeneratorConfig:
    num_scenes: int
    objects_min: int = 3
    objects_max: int = 6
    feature_noise: float = 0.1
    coverage: float = 0.4
    captions_per_scene: int = 2
    attribute_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.coverage <= 1.0):
            raise ConfigError(f"coverage must be in (0, 1], got {self.coverage}")
        if self.objects_min < 2:
            raise ConfigError("objects_min must be >= 2")
        if self.objects_max < self.objects_min:
            raise ConfigError("objects_max < objects_min")
        if self.captions_per_scene < 1:
            raise ConfigError("captions_per_scene must be >= 1")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be >= 0")


def _horizontal_overlap(a, b) -> float:
    ax, _, aw, _ = a
    bx, _, bw, _ = b
    return min(ax + aw, bx + bw) - max(ax, bx)


def _vertical_overlap(a, b) -> float:
    _, ay, _, ah = a
    _, by, _, bh = b
    return min(ay + ah, by + bh) - max(ay, by)


def _above(a, b) -> bool:
    # y grows downward; a sits entirely above b with some horizontal overlap
    return a[1] + a[3] <= b[1] and _horizontal_overlap(a, b) > 0


def _left_of(a, b) -> bool:
    return a[0] + a[2] <= b[0] and _vertical_overlap(a, b) > 0


def _inside(a, b) -> bool:
    proper = a != b
    return (
        proper
        and b[0] <= a[0]
        and b[1] <= a[1]
        and a[0] + a[2] <= b[0] + b[2]
        and a[1] + a[3] <= b[1] + b[3]
    )


def _center_distance(a, b) -> float:
    ax, ay = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx, by = b[0] + b[2] / 2, b[1] + b[3] / 2
    return math.hypot(ax - bx, ay - by)


def derive_spatial_relations(objects) -> set[tuple[int, str, int]]:
    """Geometric relations over every ordered object pair.

    Precedence per pair: in > above/below/left/right > near.  Directional
    relations are mirror-closed (above(i,j) implies below(j,i)); "near"
    fires only when nothing else does in either direction.
    """
    relations: set[tuple[int, str, int]] = set()
    boxes = [tuple(o.box) for o in objects]
    n = len(boxes)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = boxes[i], boxes[j]
            if _inside(a, b):
                relations.add((i, "in", j))
            elif _above(a, b):
                relations.add((i, "above", j))
            elif _above(b, a):
                relations.add((i, "below", j))
            elif _left_of(a, b):
                relations.add((i, "left of", j))
            elif _left_of(b, a):
                relations.add((i, "right of", j))
            elif (
                not _inside(b, a)
                and _center_distance(a, b) < NEAR_DISTANCE
            ):
                relations.add((i, "near", j))
    return relations


def _semantic_relations(world: WorldSpec, class_ids) -> set[tuple[int, str, int]]:
    rules = {(r.subject_word, r.object_word): r.relation for r in world.semantic_rules}
    out: set[tuple[int, str, int]] = set()
    for i, ci in enumerate(class_ids):
        for j, cj in enumerate(class_ids):
            if i == j:
                continue
            rel = rules.get((world.class_words[ci], world.class_words[cj]))
            if rel is not None:
                out.add((i, rel, j))
    return out


def _sample_box(rng) -> tuple[float, float, float, float]:
    # modest box sizes keep scenes from being saturated with relations
    w = float(rng.uniform(0.05, 0.22))
    h = float(rng.uniform(0.05, 0.22))
    x = float(rng.uniform(0.0, 1.0 - w))
    y = float(rng.uniform(0.0, 1.0 - h))
    return (x, y, w, h)


def generate_caption(
    world: WorldSpec,
    config: GeneratorConfig,
    objects,
    gt_relations: set[tuple[int, int, int]],
    rng,
) -> tuple[Caption, CaptionAlignment]:
    """Render a templated caption mentioning a coverage-fraction of GT.

    A scene with no relations yields an existence caption ("a dog") with
    an entity-only oracle.
    """
    words: list[str] = []
    entities: list[tuple[int, int]] = []
    mentions: list[RelationMention] = []

    def emit_entity(obj_index: int) -> int:
        words.append("a")
        if world.attributes and rng.random() < config.attribute_prob:
            words.append(world.attributes[rng.integers(len(world.attributes))])
        token = len(words)
        words.append(world.class_words[objects[obj_index].class_id])
        entities.append((token, obj_index))
        return token

    if not gt_relations:
        emit_entity(int(rng.integers(len(objects))))
    else:
        ordered = sorted(gt_relations)
        count = math.ceil(config.coverage * len(ordered))
        chosen = [ordered[k] for k in rng.choice(len(ordered), size=count, replace=False)]
        for idx, (s, c, o) in enumerate(chosen):
            if idx > 0:
                words.append("and")
            subj_token = emit_entity(s)
            surfaces = world.surface_forms[world.relation_names[c]]
            surface = surfaces[rng.integers(len(surfaces))]
            span_start = len(words)
            words.extend(surface.split())
            span_end = len(words)
            obj_token = emit_entity(o)
            mentions.append(
                RelationMention(
                    subject_token=subj_token,
                    object_token=obj_token,
                    predicate_span=(span_start, span_end),
                    surface=surface,
                    subject_obj=s,
                    relation=c,
                    object_obj=o,
                )
            )

    raw = words[0].capitalize() + " " + " ".join(words[1:]) + "." if len(words) > 1 else words[0].capitalize() + "."
    caption = Caption.from_raw(raw)
    assert list(caption.tokens) == words, "template must survive tokenization"
    return caption, CaptionAlignment(entities=tuple(sorted(entities)), relations=tuple(mentions))


def generate_scene(world: WorldSpec, config: GeneratorConfig, rng, scene_id: str) -> Scene:
    n = int(rng.integers(config.objects_min, config.objects_max + 1))
    class_ids = [int(c) for c in rng.integers(0, world.num_classes, size=n)]
    boxes = [_sample_box(rng) for _ in range(n)]

    objects = []
    for i in range(n):
        feature = world.prototypes[class_ids[i]] + world.box_embed @ np.asarray(boxes[i])
        if config.feature_noise > 0:
            feature = feature + config.feature_noise * rng.standard_normal(world.feature_dim)
        objects.append(SceneObject(id=i, class_id=class_ids[i], box=boxes[i], feature=feature))

    named = derive_spatial_relations(objects) | _semantic_relations(world, class_ids)
    gt_relations = {(s, world.relation_id(r), o) for s, r, o in named}

    captions = []
    alignments = []
    for _ in range(config.captions_per_scene):
        caption, alignment = generate_caption(world, config, objects, gt_relations, rng)
        captions.append(caption)
        alignments.append(alignment)

    return Scene(
        scene_id=scene_id,
        objects=tuple(objects),
        gt_relations=frozenset(gt_relations),
        captions=tuple(captions),
        oracle=OracleAlignment(captions=tuple(alignments)),
    )


@dataclass(frozen=True)
class SplitCorpus:
    train: Corpus
    val: Corpus
    test: Corpus

    def all_scenes(self):
        return self.train.scenes + self.val.scenes + self.test.scenes


def generate_corpus(world: WorldSpec, config: GeneratorConfig) -> SplitCorpus:
    """Deterministic corpus with a disjoint 70/15/15 scene split."""
    if config.num_scenes < 10:
        raise ConfigError(f"need at least 10 scenes, got {config.num_scenes}")

    scenes = []
    for i in range(config.num_scenes):
        rng = rng_stream(config.seed, _SCENE, i)
        scenes.append(generate_scene(world, config, rng, scene_id=f"s{i:06d}"))

    perm = rng_stream(config.seed, _SPLIT).permutation(config.num_scenes)
    n_train = int(0.70 * config.num_scenes)
    n_val = int(0.15 * config.num_scenes)
    groups = {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train : n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val :].tolist()),
    }

    def corpus_for(indices) -> Corpus:
        return Corpus(
            feature_dim=world.feature_dim,
            class_words=world.class_words,
            relation_names=world.relation_names,
            scenes=tuple(scenes[i] for i in indices),
        )

    return SplitCorpus(
        train=corpus_for(groups["train"]),
        val=corpus_for(groups["val"]),
        test=corpus_for(groups["test"]),
    )
