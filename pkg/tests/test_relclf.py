"""Relation classifier: forward semantics, training, all-pairs ranking."""

import numpy as np
import pytest

from capground.captioner import GroundedExample, build_grounded_dataset
from capground.errors import ConfigError, ShapeError
from capground.parsing import PredicateMapping
from capground.relclf import (
    RelClfConfig,
    RelClfParams,
    load_relclf,
    predict_relations,
    relclf_forward,
    save_relclf,
    split_by_scene,
    train_relclf,
)
from capground.synth import GeneratorConfig, WorldSpec, generate_corpus
from capground.util import rng_stream


def _params(dim=6, classes=4, seed=0, hidden=(8, 8)):
    config = RelClfConfig(hidden=hidden, seed=seed)
    return RelClfParams.init(rng_stream(seed, 0), dim, classes, config)


def _zero_params(dim=6, classes=4):
    params = _params(dim, classes)
    for tensor in params.tensors().values():
        tensor.data[...] = 0.0
    return params


class TestForward:
    def test_zero_weights_uniform_softmax(self):
        params = _zero_params(classes=5)
        logits = relclf_forward(params, np.ones((3, 6)), np.zeros((3, 6))).data
        np.testing.assert_allclose(logits, 0.0)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs, 0.2)

    def test_order_sensitivity(self):
        params = _params()
        rng = rng_stream(1, 0)
        f_i, f_j = rng.standard_normal(6), rng.standard_normal(6)
        forward = relclf_forward(params, f_i, f_j).data
        backward = relclf_forward(params, f_j, f_i).data
        assert not np.allclose(forward, backward)

    def test_eval_mode_deterministic(self):
        params = _params()
        rng = rng_stream(1, 1)
        subj, obj = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        one = relclf_forward(params, subj, obj, train_mode=False).data
        two = relclf_forward(params, subj, obj, train_mode=False).data
        np.testing.assert_array_equal(one, two)

    def test_dim_mismatch(self):
        params = _params(dim=6)
        with pytest.raises(ShapeError):
            relclf_forward(params, np.ones((2, 5)), np.ones((2, 5)))

    def test_train_mode_requires_rng(self):
        params = _params()
        with pytest.raises(ConfigError):
            relclf_forward(params, np.ones((2, 6)), np.ones((2, 6)), train_mode=True)


def _oracle_examples(num_scenes=60, noise=0.0, coverage=1.0, seed=5):
    world = WorldSpec.build(seed=11, feature_dim=16)
    config = GeneratorConfig(
        num_scenes=num_scenes, seed=seed, feature_noise=noise, coverage=coverage
    )
    splits = generate_corpus(world, config)
    mapping = PredicateMapping(world.predicate_mapping())
    examples, _ = build_grounded_dataset(None, splits.train, mapping, None, grounder="oracle")
    return world, examples


class TestTraining:
    def test_separable_data_learns_well_above_prior(self):
        # noise-free features encode class and geometry, so oracle labels
        # are nearly a deterministic function of the pair; this smoke test
        # runs at a fraction of the acceptance scale, where accuracy
        # reaches 0.9, and only checks strong learning progress
        world, examples = _oracle_examples(num_scenes=80, noise=0.0)
        config = RelClfConfig(epochs=40, seed=2)
        _, history = train_relclf(examples, world.num_relations, config)
        labels = [e.relation for e in examples]
        prior = max(np.bincount(labels, minlength=world.num_relations)) / len(labels)
        assert history.val_accuracy[-1] > prior + 0.3
        assert history.val_accuracy[-1] > 0.6

    def test_label_shuffle_control(self):
        world, examples = _oracle_examples(num_scenes=60, noise=0.0)
        rng = rng_stream(3, 0)
        labels = [e.relation for e in examples]
        shuffled = rng.permutation(labels)
        corrupted = [
            GroundedExample(
                scene_id=e.scene_id,
                subject_feature=e.subject_feature,
                object_feature=e.object_feature,
                relation=int(s),
            )
            for e, s in zip(examples, shuffled)
        ]
        config = RelClfConfig(epochs=15, seed=2)
        _, history = train_relclf(corrupted, world.num_relations, config)
        prior = max(np.bincount(labels, minlength=world.num_relations)) / len(labels)
        assert history.val_accuracy[-1] < prior + 0.15

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            train_relclf([], 4, RelClfConfig())

    def test_split_by_scene_is_stable_and_leak_free(self):
        _, examples = _oracle_examples(num_scenes=40)
        a_train, a_val = split_by_scene(examples, 0.2, seed=7)
        b_train, b_val = split_by_scene(examples, 0.2, seed=7)
        assert len(a_val) == len(b_val) and len(a_train) == len(b_train)
        train_scenes = {e.scene_id for e in a_train}
        val_scenes = {e.scene_id for e in a_val}
        assert not (train_scenes & val_scenes)

    def test_training_deterministic(self):
        world, examples = _oracle_examples(num_scenes=30)
        config = RelClfConfig(epochs=3, seed=4)
        p1, h1 = train_relclf(examples, world.num_relations, config)
        p2, h2 = train_relclf(examples, world.num_relations, config)
        assert h1.losses == h2.losses
        for name, tensor in p1.tensors().items():
            np.testing.assert_array_equal(tensor.data, p2.tensors()[name].data)


class TestPredictRelations:
    def test_candidate_count_two_objects_three_classes(self):
        params = _params(dim=6, classes=3)
        preds = predict_relations(params, rng_stream(5, 0).standard_normal((2, 6)))
        assert len(preds) == 2 * 1 * 3 == 6

    def test_single_object_empty(self):
        params = _params()
        assert len(predict_relations(params, np.ones((1, 6)))) == 0

    def test_cardinality_formula(self):
        params = _params(dim=6, classes=4)
        for n in (2, 3, 5):
            preds = predict_relations(params, rng_stream(5, n).standard_normal((n, 6)))
            assert len(preds) == n * (n - 1) * 4

    def test_per_pair_confidences_sum_to_one(self):
        params = _params(dim=6, classes=4)
        preds = predict_relations(params, rng_stream(5, 9).standard_normal((3, 6)))
        sums = {}
        for e in preds.entries:
            sums[(e.subject, e.object)] = sums.get((e.subject, e.object), 0.0) + e.confidence
        for total in sums.values():
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_sorted_descending_with_deterministic_ties(self):
        params = _zero_params(dim=6, classes=3)  # all confidences equal
        preds = predict_relations(params, np.ones((3, 6)))
        confs = [e.confidence for e in preds.entries]
        assert confs == sorted(confs, reverse=True)
        keys = [(e.subject, e.object, e.relation) for e in preds.entries]
        assert keys == sorted(keys)  # pure tie-break ordering

    def test_scene_features_entry_points(self):
        world, examples = _oracle_examples(num_scenes=20)
        config = RelClfConfig(epochs=1, seed=0)
        params, _ = train_relclf(examples, world.num_relations, config)
        splits = generate_corpus(world, GeneratorConfig(num_scenes=20, seed=5))
        scene = splits.test.scenes[0]
        preds = predict_relations(params, scene.features())
        assert len(preds) == scene.num_objects * (scene.num_objects - 1) * world.num_relations


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        params = _params(dim=5, classes=3)
        path = tmp_path / "relclf.ckpt"
        save_relclf(path, params)
        loaded = load_relclf(path)
        for name, tensor in params.tensors().items():
            np.testing.assert_array_equal(tensor.data, loaded.tensors()[name].data)
        rng = rng_stream(6, 0)
        subj, obj = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        np.testing.assert_array_equal(
            relclf_forward(params, subj, obj).data, relclf_forward(loaded, subj, obj).data
        )
