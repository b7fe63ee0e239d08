import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaspec.corpus import synthetic_bytes
from adaspec.distributions import Vocab
from adaspec.errors import DomainError, EmptyDataset
from adaspec.lm import BYTE_VOCAB, bytes_to_sequences, fit_kgram, perturb, random_table_model
from adaspec.policies import N_FEATURES
from adaspec.predictor import (
    ExampleSet,
    PredictorHead,
    TrainingExample,
    binary_kl,
    eval_binary_kl,
    gen_dataset,
    load_head,
    predict,
    sigmoid,
    train_head,
    weighted_bce,
)


def random_examples(n, seed, masked_frac=0.0):
    rng = np.random.default_rng(seed)
    return ExampleSet(rng.random((n, N_FEATURES)), rng.random(n), rng.random(n) >= masked_frac)


@pytest.fixture(scope="module")
def byte_data():
    seqs = bytes_to_sequences(synthetic_bytes(1500, seed=0))
    target = fit_kgram(seqs, 2, 0.01, BYTE_VOCAB)
    draft = perturb(target, 0.3, 1.3)
    prompts = [s[:3] for s in bytes_to_sequences(synthetic_bytes(150, seed=1))]
    ds = gen_dataset(target, draft, prompts, 15, np.random.default_rng(0), max_len=80)
    return target, draft, ds


class TestGenDataset:
    def test_all_target_tokens(self, small_pair):
        ds = gen_dataset(*small_pair, [(0,), (1,)] * 5, 100, np.random.default_rng(0), max_len=15)
        assert len(ds) > 0 and not ds.mask.any()
        with pytest.raises(EmptyDataset):
            train_head(ds)

    def test_loss_fraction(self, byte_data):
        ds = byte_data[2]
        assert abs(ds.mask.mean() - 0.85) < 0.02

    def test_identical_models_label_one(self, small_pair):
        m = small_pair[0]
        ds = gen_dataset(m, m, [(0,)] * 10, 15, np.random.default_rng(2), max_len=20)
        np.testing.assert_array_equal(ds.labels, 1.0)

    def test_labels_are_probabilities(self, byte_data):
        ds = byte_data[2]
        assert np.all((ds.labels >= 0) & (ds.labels <= 1))
        assert np.all(np.isfinite(ds.features))

    def test_label_prefix_variants(self, small_pair):
        a = gen_dataset(*small_pair, [(0,)] * 4, 15, np.random.default_rng(0), label_prefix="z")
        assert len(a) > 0
        with pytest.raises(DomainError):
            gen_dataset(*small_pair, [(0,)], 15, np.random.default_rng(0), label_prefix="y")
        with pytest.raises(DomainError):
            gen_dataset(*small_pair, [(0,)], 120, np.random.default_rng(0))

    def test_z_prefix_labels_match_definition(self):
        # with Z-prefix labels every example can be recomputed from its features' context
        target = random_table_model(Vocab(3, 2), 0, np.random.default_rng(0))
        draft = perturb(target, 0.5, 1.0)
        ds = gen_dataset(target, draft, [(0,)] * 20, 0, np.random.default_rng(1), label_prefix="z")
        p, q = target.next_dist([]), draft.next_dist([])
        for f, lab in zip(ds.features, ds.labels):
            y = int(np.flatnonzero(np.isclose(q, f[0]))[0])
            assert lab == pytest.approx(min(1.0, p[y] / q[y]), abs=1e-12)

    def test_jsonl_round_trip(self, tmp_path, small_pair):
        ds = gen_dataset(*small_pair, [(0,)] * 3, 15, np.random.default_rng(0))
        ds.save_jsonl(tmp_path / "d.jsonl")
        back = ExampleSet.load_jsonl(tmp_path / "d.jsonl")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.mask, ds.mask)
        first = (tmp_path / "d.jsonl").read_text().splitlines()[0]
        assert set(__import__("json").loads(first)) == {"features", "label", "mask"}


class TestHead:
    def test_zero_head_is_half(self):
        for d in range(5):
            x = np.random.default_rng(d).random((7, N_FEATURES))
            np.testing.assert_array_equal(PredictorHead.zeros(d, 8).predict(x), 0.5)

    def test_depth_zero_is_logistic_regression(self):
        head = PredictorHead.init(0, 8, np.random.default_rng(0))
        head.params["b_out"][:] = 0.3
        x = np.random.default_rng(1).random((5, N_FEATURES))
        np.testing.assert_allclose(head.predict(x), 1 / (1 + np.exp(-(x @ head.params["w_out"] + 0.3))))

    def test_output_strictly_inside_unit_interval(self):
        head = PredictorHead.init(2, 8, np.random.default_rng(0))
        head.params["b_out"][:] = 1e4
        assert 0 < predict(head, np.zeros(N_FEATURES)) < 1
        head.params["b_out"][:] = -1e4
        assert 0 < predict(head, np.zeros(N_FEATURES)) < 1

    def test_feature_count_checked(self):
        with pytest.raises(DomainError):
            PredictorHead.zeros(1).predict(np.zeros(3))

    @pytest.mark.parametrize("depth", [0, 1, 2, 3, 4])
    def test_gradient_matches_finite_differences(self, depth):
        rng = np.random.default_rng(depth)
        head = PredictorHead.init(depth, 6, rng)
        head.feature_mean = rng.random(N_FEATURES)
        head.feature_scale = 0.5 + rng.random(N_FEATURES)
        data = random_examples(10, seed=depth + 10)
        _, grads = head.loss_and_grad(data, 1.0, 3.0)
        eps = 1e-6
        for name, w in head.params.items():
            num = np.zeros_like(w)
            for idx in np.ndindex(w.shape):
                orig = w[idx]
                w[idx] = orig + eps
                up = head.loss_and_grad(data, 1.0, 3.0)[0]
                w[idx] = orig - eps
                down = head.loss_and_grad(data, 1.0, 3.0)[0]
                w[idx] = orig
                num[idx] = (up - down) / (2 * eps)
            rel = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
            assert rel <= 1e-4, (name, rel)

    def test_save_load(self, tmp_path):
        head = PredictorHead.init(3, 5, np.random.default_rng(0))
        head.save(tmp_path / "h.json")
        back = load_head(tmp_path / "h.json")
        x = np.random.default_rng(1).random((4, N_FEATURES))
        np.testing.assert_array_equal(back.predict(x), head.predict(x))

    def test_bad_schema(self):
        d = PredictorHead.zeros(1).to_dict()
        d["schema_version"] = 99
        with pytest.raises(DomainError):
            PredictorHead.from_dict(d)


class TestLoss:
    def test_masked_examples_ignored(self):
        head = PredictorHead.init(2, 6, np.random.default_rng(0))
        data = random_examples(30, seed=0, masked_frac=0.4)
        kept = data.masked()
        la, ga = head.loss_and_grad(data)
        lb, gb = head.loss_and_grad(kept)
        assert la == lb
        for k in ga:
            np.testing.assert_array_equal(ga[k], gb[k])

    @given(st.floats(0, 0.999), st.floats(0.01, 0.99), st.floats(1, 12), st.floats(0.1, 5))
    def test_rejection_weight_increases_loss(self, label, phat, w, extra):
        assert weighted_bce(label, phat, 1, w + extra) > weighted_bce(label, phat, 1, w)

    def test_kl_self_divergence(self):
        np.testing.assert_allclose(binary_kl([0.0, 0.3, 1.0], [0.0, 0.3, 1.0]), 0.0)

    def test_kl_certain_label(self):
        assert binary_kl(1.0, 0.5) == pytest.approx(math.log(2))

    def test_eval_kl_zero_head(self):
        ex = [TrainingExample(np.zeros(N_FEATURES), 0.5, True), TrainingExample(np.ones(N_FEATURES), 0.5, True)]
        assert eval_binary_kl(PredictorHead.zeros(2), ex) == pytest.approx(0.0, abs=1e-15)
        ex = [TrainingExample(np.zeros(N_FEATURES), 1.0, True)]
        assert eval_binary_kl(PredictorHead.zeros(0), ex) == pytest.approx(math.log(2))


class TestTraining:
    def test_all_accepted_saturates(self):
        rng = np.random.default_rng(0)
        data = ExampleSet(rng.random((400, N_FEATURES)), np.ones(400), np.ones(400, bool))
        short = train_head(data, depth=1, width=8, epochs=10, step_size=0.5, rng=np.random.default_rng(1))
        head = train_head(data, depth=1, width=8, epochs=60, step_size=0.5, rng=np.random.default_rng(1))
        assert head.info["train_loss"] < short.info["train_loss"]
        assert head.info["train_loss"] < 0.02
        pred = head.predict(data.features)
        assert pred.mean() > 0.98 and pred.min() > 0.9

    def test_deterministic(self, small_pair):
        ds = gen_dataset(*small_pair, [(0,)] * 20, 15, np.random.default_rng(0))
        a = train_head(ds, depth=2, width=6, rng=np.random.default_rng(3))
        b = train_head(ds, depth=2, width=6, rng=np.random.default_rng(3))
        assert a.to_dict() == b.to_dict()

    def test_loss_decreases(self, byte_data):
        ds = byte_data[2]
        untrained = PredictorHead.init(2, 16, np.random.default_rng(0))
        untrained.feature_mean = ds.masked().features.mean(axis=0)
        untrained.feature_scale = ds.masked().features.std(axis=0) + 1e-12
        head = train_head(ds, depth=2, width=16, epochs=10, step_size=0.5, rng=np.random.default_rng(0))
        assert head.info["train_loss"] < untrained.loss_and_grad(ds)[0]
        assert head.info["eval_kl"] < 0.6

    def test_monotone_in_draft_probability(self, byte_data):
        ds = byte_data[2].masked()
        head = train_head(ds, depth=2, width=16, epochs=20, step_size=0.5, rng=np.random.default_rng(0))
        hi, lo = ds.features.copy(), ds.features.copy()
        for x, qy in ((hi, 0.99), (lo, 0.01)):
            x[:, 2] = np.maximum(x[:, 2], qy)
            x[:, 0] = qy
            x[:, 3] = x[:, 2] - qy
        assert np.mean(head.predict(hi) > head.predict(lo)) >= 0.9

    def test_deeper_heads_fit_better(self, byte_data):
        ds = byte_data[2]
        kl = {d: train_head(ds, depth=d, epochs=20, step_size=0.5, rng=np.random.default_rng(1)).info["eval_kl"]
              for d in (0, 3)}
        assert kl[3] < kl[0]

    def test_bad_weights(self, small_pair):
        with pytest.raises(DomainError):
            train_head(random_examples(20, 0), w_rej=0)


def test_sigmoid_symmetry():
    z = np.linspace(-40, 40, 81)
    np.testing.assert_allclose(sigmoid(z) + sigmoid(-z), 1.0)
