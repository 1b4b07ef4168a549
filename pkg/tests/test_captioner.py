"""Grounding captioner: forward contracts, NLL, training, alignment."""

from types import SimpleNamespace

import numpy as np
import pytest

from capground.captioner import (
    CaptionerConfig,
    CaptionerParams,
    AttentionTrace,
    attention_trace,
    build_grounded_dataset,
    caption_nll,
    ground_caption,
    grounding_accuracy,
    load_captioner,
    load_grounded,
    save_captioner,
    save_grounded,
    train_captioner,
    _forward_batch,
    _make_batch,
)
from capground.data import Caption, Scene, SceneObject, Vocabulary, build_vocab
from capground.errors import OracleMissing, VocabError
from capground.parsing import ParserLexicon, PredicateMapping, parse_triplets
from capground.synth import GeneratorConfig, WorldSpec, generate_corpus
from capground.util import rng_stream


def _scene(n=3, dim=8, seed=0, captions=("A cube above a table.",)):
    rng = rng_stream(seed, 0)
    objects = tuple(
        SceneObject(
            id=i,
            class_id=i % 2,
            box=(0.02 + 0.15 * i, 0.1 + 0.05 * i, 0.1, 0.1),
            feature=rng.standard_normal(dim),
        )
        for i in range(n)
    )
    return Scene(
        scene_id=f"t{seed}",
        objects=objects,
        gt_relations=frozenset({(0, 0, 1)}),
        captions=tuple(Caption.from_raw(c) for c in captions),
    )


def _tiny_params(vocab, dim=8, seed=0):
    config = CaptionerConfig(embed_dim=6, lstm_hidden=10, attention_dim=5, seed=seed)
    return CaptionerParams.init(rng_stream(seed, 10), len(vocab), dim, config), config


class TestForward:
    def test_single_object_attends_fully(self):
        caption = Caption.from_raw("A cube above a table.")
        vocab = build_vocab([caption])
        params, _ = _tiny_params(vocab)
        fake = SimpleNamespace(
            num_objects=1,
            objects=[SceneObject(id=0, class_id=0, box=(0.1, 0.1, 0.2, 0.2), feature=np.ones(8))],
            features=lambda: np.ones((1, 8)),
        )
        trace = attention_trace(params, fake, caption, vocab)
        np.testing.assert_allclose(trace.probs, 1.0, atol=1e-12)
        assert trace.probs.shape == (len(caption) + 1, 1)

    def test_identical_features_uniform_attention(self):
        caption = Caption.from_raw("A cube above a table.")
        vocab = build_vocab([caption])
        params, _ = _tiny_params(vocab)
        feature = rng_stream(1, 2).standard_normal(8)
        fake = SimpleNamespace(
            num_objects=4,
            objects=[SceneObject(id=i, class_id=0, box=(0.1, 0.1, 0.2, 0.2), feature=feature) for i in range(4)],
            features=lambda: np.tile(feature, (4, 1)),
        )
        trace = attention_trace(params, fake, caption, vocab)
        np.testing.assert_allclose(trace.probs, 0.25, atol=1e-12)

    def test_trace_rows_sum_to_one(self):
        scene = _scene(n=5)
        vocab = build_vocab(scene.captions)
        params, _ = _tiny_params(vocab)
        trace = attention_trace(params, scene, scene.captions[0], vocab)
        np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-6)

    def test_deterministic_logits(self):
        scene = _scene()
        vocab = build_vocab(scene.captions)
        params, _ = _tiny_params(vocab)
        one = caption_nll(params, scene, scene.captions[0], vocab)
        two = caption_nll(params, scene, scene.captions[0], vocab)
        assert one == two

    def test_vocab_overflow_raises(self):
        scene = _scene()
        small_vocab = build_vocab(scene.captions)
        params, _ = _tiny_params(small_vocab)
        big_vocab = Vocabulary(list(small_vocab.words[4:]) + ["zebra", "xylophone"])
        # encode with a vocabulary larger than the embedding table
        caption = Caption.from_raw("A zebra above a xylophone.")
        with pytest.raises(VocabError):
            caption_nll(params, scene, caption, big_vocab)


class TestCaptionNLL:
    def test_untrained_near_uniform(self):
        # random inits produce near-uniform next-word distributions
        scene = _scene(n=4)
        vocab = build_vocab(scene.captions)
        values = []
        for seed in range(20):
            params, _ = _tiny_params(vocab, seed=seed)
            values.append(caption_nll(params, scene, scene.captions[0], vocab))
        assert abs(np.mean(values) - np.log(len(vocab))) < 0.5

    def test_length_one_caption_scores_two_steps(self):
        caption = Caption.from_raw("Cube.")
        scene = _scene(captions=("Cube.",))
        vocab = build_vocab([caption])
        params, _ = _tiny_params(vocab)
        batch = _make_batch([(scene, caption)], vocab)
        assert batch.inputs.shape == (1, 2)
        assert batch.lens[0] == 2
        loss = caption_nll(params, scene, caption, vocab)
        assert loss > 0

    def test_nll_nonnegative(self):
        scene = _scene(n=4)
        vocab = build_vocab(scene.captions)
        for seed in range(5):
            params, _ = _tiny_params(vocab, seed=seed)
            assert caption_nll(params, scene, scene.captions[0], vocab) >= 0

    def test_nll_invariant_to_batch_composition(self):
        scenes = [_scene(seed=s, captions=(f"A cube above a {'big ' * s}table.",)) for s in range(3)]
        vocab = build_vocab([s.captions[0] for s in scenes])
        params, _ = _tiny_params(vocab)
        alone = [caption_nll(params, s, s.captions[0], vocab) for s in scenes]
        batch = _make_batch([(s, s.captions[0]) for s in scenes], vocab)
        from capground.kernel import no_grad

        with no_grad():
            _, per_caption, _ = _forward_batch(params, batch)
        together = [float(per_caption.data[batch.order.index(i)]) for i in range(3)]
        np.testing.assert_allclose(alone, together, atol=1e-9)


class TestTraining:
    def test_loss_halves_on_fifty_scene_corpus(self):
        # 50 scenes, 30 epochs at the default desk dimensions; overfitting
        # small corpora is expected and the loss should at least halve
        from capground.data import Corpus

        world = WorldSpec.build(seed=9)
        splits = generate_corpus(world, GeneratorConfig(num_scenes=50, seed=9))
        corpus = Corpus(
            world.feature_dim,
            world.class_words,
            world.relation_names,
            tuple(sorted(splits.all_scenes(), key=lambda s: s.scene_id)),
        )
        _, _, losses = train_captioner(corpus, CaptionerConfig(epochs=30, seed=1))
        assert losses[-1] < 0.5 * losses[0]

    def test_zero_epochs_keeps_initialization(self):
        world = WorldSpec.build(seed=9, feature_dim=16)
        splits = generate_corpus(world, GeneratorConfig(num_scenes=12, seed=9))
        config = CaptionerConfig(embed_dim=8, lstm_hidden=12, attention_dim=6, epochs=0, seed=3)
        params, vocab, losses = train_captioner(splits.train, config)
        fresh = CaptionerParams.init(rng_stream(3, 10), len(vocab), 16, config)
        assert losses == []
        for name, tensor in params.tensors().items():
            np.testing.assert_array_equal(tensor.data, fresh.tensors()[name].data)

    def test_same_seed_identical_curves(self):
        world = WorldSpec.build(seed=9, feature_dim=16)
        splits = generate_corpus(world, GeneratorConfig(num_scenes=12, seed=9))
        config = CaptionerConfig(embed_dim=8, lstm_hidden=12, attention_dim=6, epochs=3, seed=5)
        p1, _, l1 = train_captioner(splits.train, config)
        p2, _, l2 = train_captioner(splits.train, config)
        assert l1 == l2
        for name, tensor in p1.tensors().items():
            np.testing.assert_array_equal(tensor.data, p2.tensors()[name].data)


class TestGroundCaption:
    def _setup(self):
        caption = Caption.from_raw("A cube above a table.")
        scene = _scene(n=4, captions=("A cube above a table.",))
        vocab = build_vocab([caption])
        lexicon = ParserLexicon.from_surfaces(["above"])
        triplets = parse_triplets(caption.tokens, lexicon).triplets
        params, _ = _tiny_params(vocab)
        return params, scene, caption, triplets, vocab

    def test_one_hot_trace_grounds_to_peak(self):
        params, scene, caption, triplets, vocab = self._setup()
        probs = np.zeros((len(caption) + 1, 4))
        probs[:, 2] = 1.0
        grounded = ground_caption(params, scene, caption, triplets, vocab,
                                  trace=AttentionTrace(probs=probs))
        assert dict(grounded.entity_groundings) == {1: 2, 4: 2}

    def test_uniform_trace_tie_breaks_to_lowest_index(self):
        params, scene, caption, triplets, vocab = self._setup()
        probs = np.full((len(caption) + 1, 4), 0.25)
        grounded = ground_caption(params, scene, caption, triplets, vocab,
                                  trace=AttentionTrace(probs=probs))
        assert dict(grounded.entity_groundings) == {1: 0, 4: 0}

    def test_relation_grounding_composes_argmaxes(self):
        params, scene, caption, triplets, vocab = self._setup()
        probs = np.full((len(caption) + 1, 4), 0.0)
        probs[1, 0] = 1.0  # subject token "cube" -> object 0
        probs[4, 3] = 1.0  # object token "table" -> object 3
        probs[[0, 2, 3, 5], 1] = 1.0
        grounded = ground_caption(params, scene, caption, triplets, vocab,
                                  trace=AttentionTrace(probs=probs))
        ((triplet, subj, obj),) = grounded.relation_groundings
        assert (subj, obj) == (0, 3)
        assert triplet.predicate.surface == "above"

    def test_out_of_range_head_counted_and_skipped(self):
        params, scene, caption, triplets, vocab = self._setup()
        from capground.parsing import EntityMention, PredicateMention, Triplet

        bogus = Triplet(
            subject=EntityMention("cube", 7),
            predicate=PredicateMention("above", 8, 9),
            object=EntityMention("table", 9),
        )
        grounded = ground_caption(params, scene, caption, list(triplets) + [bogus], vocab)
        assert grounded.alignment_errors == 1
        assert len(grounded.relation_groundings) == 1

    def test_permutation_covariance(self):
        # permuting scene objects permutes groundings accordingly
        caption = Caption.from_raw("A cube above a table.")
        vocab = build_vocab([caption])
        rng = rng_stream(4, 0)
        feats = rng.standard_normal((4, 8))
        boxes = [(0.05 + 0.2 * i, 0.1, 0.12, 0.12) for i in range(4)]

        def scene_with(order):
            objects = tuple(
                SceneObject(id=i, class_id=0, box=boxes[src], feature=feats[src])
                for i, src in enumerate(order)
            )
            return Scene("perm", objects, frozenset({(0, 0, 1)}), (caption,))

        params, _ = _tiny_params(vocab)
        identity = list(range(4))
        shuffled = [2, 0, 3, 1]
        t1 = attention_trace(params, scene_with(identity), caption, vocab)
        t2 = attention_trace(params, scene_with(shuffled), caption, vocab)
        np.testing.assert_allclose(t1.probs[:, shuffled], t2.probs, atol=1e-9)


class TestGroundedDataset:
    def _corpus(self, coverage=1.0, captions_per_scene=1, noise=0.1, scenes=16, seed=21):
        world = WorldSpec.build(seed=7, feature_dim=16)
        config = GeneratorConfig(
            num_scenes=scenes,
            seed=seed,
            coverage=coverage,
            captions_per_scene=captions_per_scene,
            feature_noise=noise,
        )
        return world, generate_corpus(world, config)

    def test_oracle_grounding_counts_match_gt(self):
        world, splits = self._corpus()
        mapping = PredicateMapping(world.predicate_mapping())
        examples, diag = build_grounded_dataset(None, splits.train, mapping, None, grounder="oracle")
        expected = sum(len(s.gt_relations) for s in splits.train.scenes)
        assert len(examples) == expected == diag.examples
        assert diag.self_pairs == 0 and diag.unmapped_predicates == 0

    def test_oracle_grounding_requires_oracle(self):
        world, splits = self._corpus()
        mapping = PredicateMapping(world.predicate_mapping())
        stripped = Scene(
            scene_id="x",
            objects=splits.train.scenes[0].objects,
            gt_relations=splits.train.scenes[0].gt_relations,
            captions=splits.train.scenes[0].captions,
            oracle=None,
        )
        from capground.data import Corpus

        bare = Corpus(16, world.class_words, world.relation_names, (stripped,))
        with pytest.raises(OracleMissing):
            build_grounded_dataset(None, bare, mapping, None, grounder="oracle")

    def test_unmapped_predicate_counted(self):
        world, splits = self._corpus()
        mapping_dict = world.predicate_mapping()
        removed = "above"
        partial = PredicateMapping({k: v for k, v in mapping_dict.items() if v != removed})
        lexicon = PredicateMapping(mapping_dict).lexicon()  # parser still knows the surface
        config = CaptionerConfig(embed_dim=8, lstm_hidden=12, attention_dim=6, epochs=0, seed=2)
        vocab = build_vocab([c for s in splits.train.scenes for c in s.captions])
        params = CaptionerParams.init(rng_stream(2, 10), len(vocab), 16, config)
        _, diag_full = build_grounded_dataset(
            params, splits.train, PredicateMapping(mapping_dict), vocab, lexicon=lexicon
        )
        _, diag_partial = build_grounded_dataset(
            params, splits.train, partial, vocab, lexicon=lexicon
        )
        assert diag_partial.unmapped_predicates > diag_full.unmapped_predicates

    def test_self_pairs_dropped_deterministically(self):
        # identical noise-free features make attention uniform, so both
        # triplet endpoints ground to object 0 and the tuple is dropped
        caption = Caption.from_raw("A cube above a cube.")
        feature = np.ones(8)
        objects = tuple(
            SceneObject(id=i, class_id=0, box=(0.1, 0.1 + 0.4 * i, 0.2, 0.2), feature=feature)
            for i in range(2)
        )
        scene = Scene("dup", objects, frozenset({(0, 0, 1)}), (caption,))
        from capground.data import Corpus

        corpus = Corpus(8, ("cube",), ("above",), (scene,))
        mapping = PredicateMapping({"above": "above"})
        vocab = build_vocab([caption])
        params, _ = _tiny_params(vocab)
        examples, diag = build_grounded_dataset(params, corpus, mapping, vocab)
        assert examples == []
        assert diag.self_pairs == 1

    def test_grounded_file_round_trip(self, tmp_path):
        world, splits = self._corpus()
        mapping = PredicateMapping(world.predicate_mapping())
        examples, _ = build_grounded_dataset(None, splits.train, mapping, None, grounder="oracle")
        path = tmp_path / "grounded.jsonl"
        save_grounded(path, examples)
        assert load_grounded(path) == examples


class TestGroundingAccuracy:
    def test_untrained_near_chance(self):
        world = WorldSpec.build(seed=7, feature_dim=16)
        splits = generate_corpus(
            world, GeneratorConfig(num_scenes=24, seed=3, objects_min=4, objects_max=4)
        )
        vocab = build_vocab([c for s in splits.train.scenes for c in s.captions])
        accs = []
        for seed in range(5):
            config = CaptionerConfig(embed_dim=8, lstm_hidden=12, attention_dim=6, seed=seed)
            params = CaptionerParams.init(rng_stream(seed, 10), len(vocab), 16, config)
            accs.append(grounding_accuracy(params, splits.train, vocab).entity_accuracy)
        assert abs(np.mean(accs) - 0.25) < 0.1

    def test_chance_matches_scene_sizes(self):
        world = WorldSpec.build(seed=7, feature_dim=16)
        splits = generate_corpus(
            world, GeneratorConfig(num_scenes=20, seed=3, objects_min=5, objects_max=5)
        )
        vocab = build_vocab([c for s in splits.train.scenes for c in s.captions])
        params, _ = _tiny_params(vocab, dim=16)
        report = grounding_accuracy(params, splits.train, vocab)
        assert report.chance_entity == pytest.approx(0.2)

    def test_missing_oracle_raises(self):
        scene = _scene(n=3)
        from capground.data import Corpus

        corpus = Corpus(8, ("cube", "table"), ("above",), (scene,))
        vocab = build_vocab(scene.captions)
        params, _ = _tiny_params(vocab)
        with pytest.raises(OracleMissing):
            grounding_accuracy(params, corpus, vocab)


class TestPersistence:
    def test_captioner_checkpoint_round_trip(self, tmp_path):
        scene = _scene()
        vocab = build_vocab(scene.captions)
        params, _ = _tiny_params(vocab)
        path = tmp_path / "captioner.ckpt"
        save_captioner(path, params, vocab)
        loaded, loaded_vocab = load_captioner(path)
        assert loaded_vocab == vocab
        for name, tensor in params.tensors().items():
            np.testing.assert_array_equal(tensor.data, loaded.tensors()[name].data)
        before = caption_nll(params, scene, scene.captions[0], vocab)
        after = caption_nll(loaded, scene, scene.captions[0], loaded_vocab)
        assert before == after
