import numpy as np
import pytest

from prunetect import zoo
from prunetect.probe import AccuracyVector, MeasureError, measure, read_signals, \
    select_eval_images, write_signals
from prunetect.pruning import PruningConfig
from prunetect.synth import gen_dataset


CFG = PruningConfig(pm="trim", sm="targeted", rm="l1", p=0.2,
                    num_samples=5, num_images=10, trim_k=0.5, seed=3)


@pytest.fixture(scope="module")
def eval_set():
    ds = gen_dataset(5, 10, 24, 24, seed=21)
    return ds.images, ds.labels


class TestSelection:
    def test_prefix_is_class_balanced(self, eval_set):
        images, labels = eval_set
        _, sel_labels = select_eval_images(images, labels, 10, seed=0)
        assert sorted(np.bincount(sel_labels, minlength=5)) == [2, 2, 2, 2, 2]
        _, sel7 = select_eval_images(images, labels, 7, seed=0)
        counts = np.bincount(sel7, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_seed_changes_selection_deterministically(self, eval_set):
        images, labels = eval_set
        a1, _ = select_eval_images(images, labels, 10, seed=1)
        a2, _ = select_eval_images(images, labels, 10, seed=1)
        b, _ = select_eval_images(images, labels, 10, seed=2)
        assert np.array_equal(a1, a2)
        assert not np.array_equal(a1, b)

    def test_requesting_too_many_images_fails(self, eval_set):
        images, labels = eval_set
        with pytest.raises(MeasureError, match="available"):
            select_eval_images(images, labels, 51, seed=0)


class TestMeasure:
    def test_values_deterministic_elapsed_not_asserted(self, eval_set):
        images, labels = eval_set
        m = zoo.build("toycnn-a", seed=2)
        v1 = measure(m, CFG, images, labels, "m1")
        v2 = measure(m, CFG, images, labels, "m1")
        assert np.array_equal(v1.values, v2.values)
        assert v1.values.shape == (5,)
        assert np.all((v1.values >= 0) & (v1.values <= 1))
        assert v1.elapsed_seconds > 0

    def test_zero_network_measures_constant_predictor_rate(self, eval_set):
        # The sample-size rule max(1, floor(p*|F|)) keeps every sample below
        # |F| filters for p < 1, so no single config can zero a whole layer.
        # The equivalent boundary case: a model whose conv filters are already
        # all zero stays a constant predictor under any reset sample, so every
        # vector entry equals the balanced-class base rate.
        images, labels = eval_set
        m = zoo.build("toycnn-a", seed=9)
        for layer in m.layers:
            if layer.kind == "Conv2D":
                layer.weight[:] = 0.0
                layer.bias[:] = 0.0
        cfg = PruningConfig(pm="reset", sm="targeted", rm="l1", p=0.2,
                            num_samples=5, num_images=10, seed=0)
        v = measure(m, cfg, images, labels, "m")
        assert np.all(v.values == 0.2)

    def test_model_id_does_not_affect_values(self, eval_set):
        images, labels = eval_set
        m = zoo.build("toycnn-b", seed=1)
        a = measure(m, CFG, images, labels, "x")
        b = measure(m, CFG, images, labels, "y")
        assert np.array_equal(a.values, b.values)

    def test_oversampling_annotated(self, eval_set):
        images, labels = eval_set
        m = zoo.build("toycnn-a", seed=0)
        bad = PruningConfig(pm="reset", sm="targeted", rm="l1", p=0.4,
                            num_samples=5, num_images=10)
        with pytest.raises(MeasureError, match="planning"):
            measure(m, bad, images, labels)

    def test_num_samples_sets_vector_length(self, eval_set):
        images, labels = eval_set
        m = zoo.build("toycnn-a", seed=5)
        for s in (1, 3, 8):
            cfg = PruningConfig(pm="trim", sm="targeted", rm="l1", p=0.05,
                                num_samples=s, num_images=10)
            assert measure(m, cfg, images, labels).values.shape == (s,)


class TestSignalsFile:
    def test_roundtrip(self, tmp_path, eval_set):
        images, labels = eval_set
        m = zoo.build("toycnn-a", seed=4)
        vectors = [measure(m, CFG, images, labels, f"m{i}") for i in range(3)]
        path = tmp_path / "signals.tsv"
        write_signals(path, vectors, echo_lines=["detect.pm=trim"])
        rows = read_signals(path)
        assert len(rows) == 3
        for v, (mid, chash, values, elapsed) in zip(vectors, rows):
            assert mid == v.model_id
            assert np.array_equal(values, v.values)
            assert elapsed == v.elapsed_seconds
        text = path.read_text()
        assert text.startswith("# detect.pm=trim\n")

    def test_mixed_lengths_rejected(self, tmp_path):
        a = AccuracyVector(np.zeros(3), 0.1, CFG, "a")
        cfg2 = PruningConfig(pm="trim", sm="targeted", rm="l1", p=0.2,
                             num_samples=5, num_images=10)
        b = AccuracyVector(np.zeros(5), 0.1, cfg2, "b")
        with pytest.raises(MeasureError):
            write_signals(tmp_path / "s.tsv", [a, b])
