"""Captioning-based grounding module.

A two-layer LSTM captioner attends over object features while predicting
caption words under teacher forcing.  The per-word attention distributions
are the grounding signal: each entity mention is aligned to the argmax
feature, and each parsed triplet to the (subject, object) argmax pair,
which yields the grounded training set for the relation classifier.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import BOS, EOS, PAD, Caption, Corpus, Scene, Vocabulary, build_vocab
from .errors import AlignmentError, ConfigError, NumericalError, OracleMissing, VocabError
from .kernel import (
    AdamState,
    AttentionParams,
    LSTMParams,
    Tensor,
    adam_step,
    add,
    additive_attention,
    backward,
    clip_global_norm,
    concat,
    cross_entropy_with_logits,
    embedding,
    lstm_cell,
    matmul,
    mul,
    no_grad,
    parameter,
    save_checkpoint,
    load_checkpoint,
    tensor_sum,
)
from .kernel.tensor import first_rows
from .kernel.layers import init_uniform, lstm_cell_static, project_keys
from .parsing import ParsedCaption, ParserLexicon, PredicateMapping, Triplet, parse_triplets
from .util import rng_stream

_INIT, _SHUFFLE = 10, 11


@dataclass(frozen=True)
class CaptionerConfig:
    embed_dim: int = 64
    lstm_hidden: int = 128
    attention_dim: int = 64
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 5.0
    min_count: int = 1

    def __post_init__(self):
        if min(self.embed_dim, self.lstm_hidden, self.attention_dim, self.batch_size) < 1:
            raise ConfigError("captioner dimensions and batch size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


class CaptionerParams:
    """All trainable tensors of the grounding captioner."""

    def __init__(self, embed, attn_lstm, lm_lstm, attention, proj_w, proj_b, feature_dim):
        self.embed = embed
        self.attn_lstm = attn_lstm
        self.lm_lstm = lm_lstm
        self.attention = attention
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.feature_dim = feature_dim

    @classmethod
    def init(
        cls, rng: np.random.Generator, vocab_size: int, feature_dim: int, config: CaptionerConfig
    ) -> "CaptionerParams":
        e, hidden, att = config.embed_dim, config.lstm_hidden, config.attention_dim
        return cls(
            embed=parameter(rng.normal(0.0, 0.1, size=(vocab_size, e))),
            attn_lstm=LSTMParams.init(rng, e + feature_dim + hidden, hidden),
            lm_lstm=LSTMParams.init(rng, hidden + feature_dim, hidden),
            attention=AttentionParams.init(rng, hidden, feature_dim, att),
            proj_w=parameter(init_uniform(rng, hidden, (hidden, vocab_size))),
            proj_b=parameter(np.zeros(vocab_size)),
            feature_dim=feature_dim,
        )

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.proj_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {"embed": self.embed, "proj_w": self.proj_w, "proj_b": self.proj_b}
        out.update(self.attn_lstm.tensors("attn_lstm"))
        out.update(self.lm_lstm.tensors("lm_lstm"))
        out.update(self.attention.tensors("attention"))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], feature_dim: int) -> "CaptionerParams":
        def lstm(prefix):
            return LSTMParams(**{
                name: parameter(arrays[f"{prefix}.{name}"])
                for name in ("w_i", "w_f", "w_o", "w_g", "b_i", "b_f", "b_o", "b_g")
            })

        return cls(
            embed=parameter(arrays["embed"]),
            attn_lstm=lstm("attn_lstm"),
            lm_lstm=lstm("lm_lstm"),
            attention=AttentionParams(
                w_q=parameter(arrays["attention.w_q"]),
                w_k=parameter(arrays["attention.w_k"]),
                v=parameter(arrays["attention.v"]),
            ),
            proj_w=parameter(arrays["proj_w"]),
            proj_b=parameter(arrays["proj_b"]),
            feature_dim=feature_dim,
        )


@dataclass
class _Batch:
    """Batch rows are sorted by caption length (descending), so at step t
    the live captions form the prefix of size active[t]; finished rows
    are simply dropped from the computation."""

    feats: np.ndarray      # (B, n_max, d)
    feat_mask: np.ndarray  # (B, n_max) bool
    fbar: np.ndarray       # (B, d)
    inputs: np.ndarray     # (B, T) ids, row b = <bos> w_1 .. w_k <pad>...
    targets: np.ndarray    # (B, T) ids, row b = w_1 .. w_k <eos> <pad>...
    lens: np.ndarray       # (B,) = k_b + 1
    active: np.ndarray     # (T,) live-prefix size per step
    order: tuple[int, ...]  # row b holds input pair order[b]


def _make_batch(pairs: Sequence[tuple[Scene, Caption]], vocab: Vocabulary) -> _Batch:
    order = sorted(range(len(pairs)), key=lambda i: -len(pairs[i][1]))
    pairs = [pairs[i] for i in order]
    batch = len(pairs)
    n_max = max(scene.num_objects for scene, _ in pairs)
    dim = pairs[0][0].objects[0].feature.shape[0]
    lens = np.array([len(cap) + 1 for _, cap in pairs], dtype=np.int64)
    steps = int(lens.max())

    feats = np.zeros((batch, n_max, dim))
    feat_mask = np.zeros((batch, n_max), dtype=bool)
    fbar = np.zeros((batch, dim))
    inputs = np.full((batch, steps), PAD, dtype=np.int64)
    targets = np.full((batch, steps), PAD, dtype=np.int64)

    for b, (scene, caption) in enumerate(pairs):
        n = scene.num_objects
        features = scene.features()
        feats[b, :n] = features
        feat_mask[b, :n] = True
        fbar[b] = features.mean(axis=0)
        ids = vocab.encode_tokens(caption.tokens)
        inputs[b, 0] = BOS
        inputs[b, 1 : len(ids) + 1] = ids
        targets[b, : len(ids)] = ids
        targets[b, len(ids)] = EOS
    active = (lens[None, :] > np.arange(steps)[:, None]).sum(axis=1)
    return _Batch(feats, feat_mask, fbar, inputs, targets, lens, active, tuple(order))


def _forward_batch(params: CaptionerParams, batch: _Batch, collect_probs: bool = False):
    """Teacher-forced pass.

    Returns (mean loss over captions, per-caption NLL values, attention
    probability tensors per step).  Step t predicts target t; its
    attention row is the trace entry for that target word.
    """
    if batch.inputs.max() >= params.vocab_size or batch.targets.max() >= params.vocab_size:
        raise VocabError(f"token id out of range for vocabulary of {params.vocab_size}")
    size, steps = batch.inputs.shape
    hidden = params.hidden_dim
    embed_dim = params.embed.shape[1]
    feat_dim = params.feature_dim

    keys = Tensor(batch.feats)
    key_proj = project_keys(keys, params.attention)
    h_a = Tensor(np.zeros((size, hidden)))
    c_a = Tensor(np.zeros((size, hidden)))
    h_lm = Tensor(np.zeros((size, hidden)))
    c_lm = Tensor(np.zeros((size, hidden)))

    # the embedding and global-context rows of the attention LSTM never
    # change within a caption: multiply them in once per batch
    emb_block, fbar_block, recurrent_block = params.attn_lstm.fused_row_blocks(
        [embed_dim, feat_dim, 2 * hidden]
    )
    attn_biases = params.attn_lstm.fused()[1]
    emb_proj = matmul(params.embed, emb_block)
    fbar_proj = matmul(Tensor(batch.fbar), fbar_block)
    lm_fused = params.lm_lstm.fused()

    total = None
    prob_rows = []
    live = size
    for t in range(steps):
        count = int(batch.active[t])
        if count < live:
            h_a, c_a = first_rows(h_a, count), first_rows(c_a, count)
            h_lm, c_lm = first_rows(h_lm, count), first_rows(c_lm, count)
            keys = first_rows(keys, count)
            key_proj = first_rows(key_proj, count)
            fbar_proj = first_rows(fbar_proj, count)
            live = count
        z_static = add(embedding(emb_proj, batch.inputs[:count, t]), fbar_proj)
        h_a, c_a = lstm_cell_static(
            [h_lm], h_a, c_a, recurrent_block, attn_biases, z_static, hidden
        )
        context, probs = additive_attention(
            h_a, keys, params.attention, mask=batch.feat_mask[:count], key_proj=key_proj
        )
        h_lm, c_lm = lstm_cell([h_a, context], h_lm, c_lm, params.lm_lstm, fused=lm_fused)
        logits = add(matmul(h_lm, params.proj_w), params.proj_b)
        ce = cross_entropy_with_logits(logits, batch.targets[:count, t])
        if count < size:
            ce = concat([ce, Tensor(np.zeros(size - count))], axis=0)
        total = ce if total is None else add(total, ce)
        if collect_probs:
            prob_rows.append(probs)

    per_caption = mul(total, 1.0 / batch.lens)
    loss = mul(tensor_sum(per_caption), 1.0 / size)
    return loss, per_caption, prob_rows


def caption_nll(params: CaptionerParams, scene: Scene, caption: Caption, vocab: Vocabulary) -> float:
    """Mean teacher-forced negative log-likelihood over the k+1 steps."""
    with no_grad():
        loss, _, _ = _forward_batch(params, _make_batch([(scene, caption)], vocab))
    return loss.data.item()


def train_captioner(
    corpus: Corpus, config: CaptionerConfig, vocab: Optional[Vocabulary] = None
) -> tuple[CaptionerParams, Vocabulary, list[float]]:
    """Adam/NLL training over all (scene, caption) pairs; deterministic."""
    if vocab is None:
        vocab = build_vocab(
            [c for scene in corpus.scenes for c in scene.captions], min_count=config.min_count
        )
    params = CaptionerParams.init(
        rng_stream(config.seed, _INIT), len(vocab), corpus.feature_dim, config
    )
    tensors = params.tensors()
    state = AdamState.init(tensors)
    examples = [(scene, caption) for scene in corpus.scenes for caption in scene.captions]

    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng_stream(config.seed, _SHUFFLE, epoch).permutation(len(examples))
        epoch_sum = 0.0
        try:
            for start in range(0, len(order), config.batch_size):
                chunk = [examples[i] for i in order[start : start + config.batch_size]]
                loss, per_caption, _ = _forward_batch(params, _make_batch(chunk, vocab))
                backward(loss)
                grads = {name: t.grad for name, t in tensors.items()}
                clip_global_norm(grads, config.clip_norm)
                adam_step(tensors, grads, state, config.lr)
                epoch_sum += float(per_caption.data.sum())
        except NumericalError as exc:
            raise NumericalError(f"captioner training diverged at epoch {epoch}: {exc}") from exc
        losses.append(epoch_sum / len(examples))
    return params, vocab, losses


@dataclass(frozen=True)
class AttentionTrace:
    """Attention rows per prediction target: row t belongs to caption
    token t (the step fed token t-1); the final row is the <eos> step."""

    probs: np.ndarray  # (k+1, n)

    def row(self, token_index: int) -> np.ndarray:
        return self.probs[token_index]


def attention_traces(
    params: CaptionerParams,
    pairs: Sequence[tuple[Scene, Caption]],
    vocab: Vocabulary,
    batch_size: int = 16,
) -> list[AttentionTrace]:
    """Teacher-forced attention traces for many captions, batched."""
    traces: list[Optional[AttentionTrace]] = [None] * len(pairs)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        batch = _make_batch(chunk, vocab)
        with no_grad():
            _, _, rows = _forward_batch(params, batch, collect_probs=True)
        for b, source in enumerate(batch.order):
            scene = chunk[source][0]
            n = scene.num_objects
            length = int(batch.lens[b])
            probs = np.stack([rows[t].data[b, :n] for t in range(length)])
            traces[start + source] = AttentionTrace(probs=probs)
    return traces


def attention_trace(
    params: CaptionerParams, scene: Scene, caption: Caption, vocab: Vocabulary
) -> AttentionTrace:
    return attention_traces(params, [(scene, caption)], vocab)[0]


@dataclass(frozen=True)
class GroundedRelations:
    """Argmax alignments for one caption."""

    entity_groundings: tuple[tuple[int, int], ...]  # (token index, object index)
    relation_groundings: tuple[tuple[Triplet, int, int], ...]
    alignment_errors: int


def ground_caption(
    params: CaptionerParams,
    scene: Scene,
    caption: Caption,
    triplets: Sequence[Triplet],
    vocab: Vocabulary,
    trace: Optional[AttentionTrace] = None,
) -> GroundedRelations:
    """Align entity mentions and triplet endpoints to objects.

    Ties break toward the lowest object index.  Triplets whose head token
    indices fall outside the caption are skipped and counted.
    """
    if trace is None:
        trace = attention_trace(params, scene, caption, vocab)
    k = len(caption)

    entities: list[tuple[int, int]] = []
    seen: set[int] = set()
    relations: list[tuple[Triplet, int, int]] = []
    errors = 0
    for triplet in triplets:
        heads = (triplet.subject.head, triplet.object.head)
        if any(h >= k for h in heads):
            errors += 1
            continue
        for head in heads:
            if head not in seen:
                seen.add(head)
                entities.append((head, int(np.argmax(trace.row(head)))))
        relations.append(
            (
                triplet,
                int(np.argmax(trace.row(triplet.subject.head))),
                int(np.argmax(trace.row(triplet.object.head))),
            )
        )
    return GroundedRelations(
        entity_groundings=tuple(entities),
        relation_groundings=tuple(relations),
        alignment_errors=errors,
    )


@dataclass(eq=False)
class GroundedExample:
    """One ((f_i, f_j), class) training tuple for the relation classifier."""

    scene_id: str
    subject_feature: np.ndarray
    object_feature: np.ndarray
    relation: int
    provenance: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroundedExample):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.relation == other.relation
            and np.array_equal(self.subject_feature, other.subject_feature)
            and np.array_equal(self.object_feature, other.object_feature)
            and self.provenance == other.provenance
        )


@dataclass
class GroundingDiagnostics:
    examples: int = 0
    parsed_triplets: int = 0
    skipped_clauses: int = 0
    unmapped_predicates: int = 0
    alignment_errors: int = 0
    self_pairs: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def build_grounded_dataset(
    params: Optional[CaptionerParams],
    corpus: Corpus,
    mapping: PredicateMapping,
    vocab: Optional[Vocabulary],
    lexicon: Optional[ParserLexicon] = None,
    grounder: str = "attention",
) -> tuple[list[GroundedExample], GroundingDiagnostics]:
    """Run grounding over a corpus and emit classifier training tuples.

    grounder="attention" uses the trained captioner's argmax alignments;
    grounder="oracle" bypasses attention with the generator's alignments.
    """
    diag = GroundingDiagnostics()
    examples: list[GroundedExample] = []

    if grounder == "oracle":
        for scene in corpus.scenes:
            if scene.oracle is None:
                raise OracleMissing(f"scene {scene.scene_id} has no oracle alignment")
            for ci, align in enumerate(scene.oracle.captions):
                for m in align.relations:
                    diag.parsed_triplets += 1
                    diag.examples += 1
                    examples.append(
                        GroundedExample(
                            scene_id=scene.scene_id,
                            subject_feature=scene.objects[m.subject_obj].feature,
                            object_feature=scene.objects[m.object_obj].feature,
                            relation=m.relation,
                            provenance={
                                "grounder": "oracle",
                                "caption": ci,
                                "surface": m.surface,
                                "subject_obj": m.subject_obj,
                                "object_obj": m.object_obj,
                            },
                        )
                    )
        return examples, diag
    if grounder != "attention":
        raise ConfigError(f"unknown grounder {grounder!r}")
    if params is None or vocab is None:
        raise ConfigError("attention grounding requires trained params and a vocabulary")

    if lexicon is None:
        lexicon = mapping.lexicon()
    name_to_id = {n: i for i, n in enumerate(corpus.relation_names)}
    work = []
    for scene in corpus.scenes:
        for ci, caption in enumerate(scene.captions):
            parsed: ParsedCaption = parse_triplets(caption.tokens, lexicon)
            diag.parsed_triplets += len(parsed.triplets)
            diag.skipped_clauses += parsed.skipped_clauses
            if parsed.triplets:
                work.append((scene, ci, caption, parsed.triplets))

    traces = attention_traces(params, [(scene, cap) for scene, _, cap, _ in work], vocab)
    for (scene, ci, caption, triplets), trace in zip(work, traces):
        grounded = ground_caption(params, scene, caption, triplets, vocab, trace=trace)
        diag.alignment_errors += grounded.alignment_errors
        for triplet, subj_obj, obj_obj in grounded.relation_groundings:
            name = mapping.get(triplet.predicate.surface)
            if name is None or name not in name_to_id:
                diag.unmapped_predicates += 1
                continue
            if subj_obj == obj_obj:
                diag.self_pairs += 1
                continue
            diag.examples += 1
            examples.append(
                GroundedExample(
                    scene_id=scene.scene_id,
                    subject_feature=scene.objects[subj_obj].feature,
                    object_feature=scene.objects[obj_obj].feature,
                    relation=name_to_id[name],
                    provenance={
                        "grounder": "attention",
                        "caption": ci,
                        "surface": triplet.predicate.surface,
                        "subject_lemma": triplet.subject.lemma,
                        "object_lemma": triplet.object.lemma,
                        "subject_obj": subj_obj,
                        "object_obj": obj_obj,
                    },
                )
            )
    return examples, diag


@dataclass(frozen=True)
class GroundingAccuracy:
    entity_accuracy: float
    pair_accuracy: float
    entity_count: int
    pair_count: int
    chance_entity: float  # mean over mentions of 1/n


def grounding_accuracy(params: CaptionerParams, corpus: Corpus, vocab: Vocabulary) -> GroundingAccuracy:
    """Fraction of oracle entity mentions (and subject/object pairs)
    whose attention-argmax grounding hits the oracle object."""
    entity_hits = entity_total = 0
    pair_hits = pair_total = 0
    chance_sum = 0.0
    work = []
    for scene in corpus.scenes:
        if scene.oracle is None:
            raise OracleMissing(f"scene {scene.scene_id} has no oracle alignment")
        for caption, align in zip(scene.captions, scene.oracle.captions):
            work.append((scene, caption, align))
    traces = attention_traces(params, [(scene, cap) for scene, cap, _ in work], vocab)
    for (scene, _, align), trace in zip(work, traces):
        choices = np.argmax(trace.probs, axis=1)
        for token, obj in align.entities:
            entity_total += 1
            chance_sum += 1.0 / scene.num_objects
            if int(choices[token]) == obj:
                entity_hits += 1
        for m in align.relations:
            pair_total += 1
            if int(choices[m.subject_token]) == m.subject_obj and int(choices[m.object_token]) == m.object_obj:
                pair_hits += 1
    return GroundingAccuracy(
        entity_accuracy=entity_hits / entity_total if entity_total else 0.0,
        pair_accuracy=pair_hits / pair_total if pair_total else 0.0,
        entity_count=entity_total,
        pair_count=pair_total,
        chance_entity=chance_sum / entity_total if entity_total else 0.0,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_captioner(path, params: CaptionerParams, vocab: Vocabulary) -> None:
    save_checkpoint(path, params.tensors())
    meta = {
        "feature_dim": params.feature_dim,
        "vocab": list(vocab.words[4:]),  # reserved symbols are implicit
    }
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_captioner(path) -> tuple[CaptionerParams, Vocabulary]:
    arrays = load_checkpoint(path)
    with open(str(path) + ".meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    params = CaptionerParams.from_arrays(arrays, feature_dim=int(meta["feature_dim"]))
    return params, Vocabulary(meta["vocab"])


def save_grounded(path, examples: Sequence[GroundedExample]) -> None:
    from .data import _floats  # shared float formatting

    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                '{"scene_id":%s,"subj_feature":[%s],"obj_feature":[%s],"class":%d,"provenance":%s}\n'
                % (
                    json.dumps(ex.scene_id),
                    _floats(ex.subject_feature),
                    _floats(ex.object_feature),
                    ex.relation,
                    json.dumps(ex.provenance, sort_keys=True),
                )
            )


def load_grounded(path) -> list[GroundedExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            examples.append(
                GroundedExample(
                    scene_id=raw["scene_id"],
                    subject_feature=np.asarray(raw["subj_feature"], dtype=np.float64),
                    object_feature=np.asarray(raw["obj_feature"], dtype=np.float64),
                    relation=int(raw["class"]),
                    provenance=raw.get("provenance", {}),
                )
            )
    return examples
