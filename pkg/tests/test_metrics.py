import itertools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomaly_expert import autodiff as ad
from anomaly_expert.errors import DataError
from anomaly_expert.evaluation import evaluate_records, export_map, format_table, map_to_pgm, run_benchmark, score_bundles
from anomaly_expert.features import save_bundle, write_manifest
from anomaly_expert.ltfm import SignificanceMap, significance_image
from anomaly_expert.metrics import auroc, detection_metrics, metrics_from_counts, rouge_l, says_yes
from anomaly_expert.model import predict_scores
from anomaly_expert.params import ExpertConfig, init_params, save_checkpoint
from anomaly_expert.synth import SynthConfig, synth_generate

GOLDEN = Path(__file__).parent / "data" / "golden_map.pgm"


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_hand_pairs(self):
        assert auroc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75

    def test_all_ties(self):
        assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 1)), min_size=2, max_size=40))
    def test_matches_pairwise(self, pairs):
        s, y = zip(*pairs)
        if len(set(y)) < 2:
            return
        assert auroc(s, y) == pairwise_auroc(s, y)

    @given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=30, unique=True), st.integers(0, 2**31))
    def test_monotone_transform_and_negation(self, s, seed):
        y = np.random.default_rng(seed).permutation([1, 0] + [seed % 2] * (len(s) - 2))
        s = np.array(s, dtype=float)
        assert auroc(np.exp(s / 500.0) * 3 + 1, y) == auroc(s, y)
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


class TestDetection:
    def test_perfect(self):
        m = detection_metrics(["Yes, crack visible", "No anomaly"], [1, 0])
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)

    def test_word_boundary(self):
        assert not says_yes("Yesterday it broke")
        assert not says_yes("yes, lower case")
        assert says_yes("I think: Yes.")
        m = detection_metrics(["Yesterday it broke"], [1])
        assert m.fn == 1 and m.tp == 0

    def test_confusion_arithmetic(self):
        m = metrics_from_counts(tp=2, fp=1, fn=1, tn=1)
        assert (m.precision, m.recall, m.f1, m.accuracy) == (2 / 3, 2 / 3, 2 / 3, 3 / 5)

    def test_accuracy_recomputable(self):
        m = detection_metrics(["Yes", "No", "Yes", "No", "Yes"], [1, 1, 0, 0, 1])
        assert m.accuracy == (m.tp + m.tn) / 5

    def test_undefined_flagged(self):
        m = detection_metrics(["No", "No"], [0, 0])
        assert m.precision == 0.0 and "precision" in m.undefined and "recall" in m.undefined


class TestRouge:
    def test_identical(self):
        assert rouge_l("a small dent on the rim", "a small dent on the rim") == 1.0

    def test_disjoint(self):
        assert rouge_l("alpha beta", "gamma delta") == 0.0

    def test_hand_lcs(self):
        assert abs(rouge_l("the cat sat", "the cat ran") - 2 / 3) <= 1e-9

    def test_case_insensitive(self):
        assert rouge_l("The Cat", "the cat") == 1.0

    def test_empty(self):
        assert rouge_l("", "words") == 0.0

    @given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), st.lists(st.sampled_from("abcde"), min_size=1, max_size=8))
    def test_symmetric_for_equal_lengths(self, a, b):
        if len(a) != len(b):
            return
        assert rouge_l(" ".join(a), " ".join(b)) == rouge_l(" ".join(b), " ".join(a))


class TestMaps:
    def test_constant_half(self):
        raw = map_to_pgm(np.full(16, 0.5), 4)
        assert raw.startswith(b"P5\n4 4\n255\n")
        assert set(raw[len(b"P5\n4 4\n255\n"):]) == {128}

    def test_single_hot(self):
        m = np.zeros(16)
        m[6] = 1.0
        pixels = map_to_pgm(m, 4)[len(b"P5\n4 4\n255\n"):]
        assert pixels[6] == 255 and sum(pixels) == 255

    def test_export_bad_crop(self, tmp_path):
        sig = SignificanceMap(np.zeros((4, 1, 4)), np.zeros((1, 4)), 0.07, 2)
        with pytest.raises(IndexError):
            export_map(sig, 3, tmp_path / "x.pgm")

    def test_golden_file(self, tmp_path):
        with ad.precision("double"):
            params = init_params(ExpertConfig(d_enc=16, d=16, g=4, n_heads=2, seed=11))
            bundle = synth_generate(SynthConfig(n_classes=1, images_per_class=2, g=4, d_enc=16, patch_size=2, seed=11))[1]
            sig = significance_image(bundle, params)
        out = export_map(sig, 1, tmp_path / "map.pgm")
        assert out.read_bytes() == GOLDEN.read_bytes()


def write_synth(tmp_path, seed=0):
    bundles = synth_generate(SynthConfig(n_classes=3, images_per_class=10, g=4, d_enc=8, patch_size=2, seed=seed))
    entries = []
    for b in bundles:
        save_bundle(b, tmp_path / f"{b.id}.aovf")
        entries.append({"path": f"{b.id}.aovf", "label": b.label, "class": b.class_id, "id": b.id})
    write_manifest(entries, tmp_path / "m.jsonl")
    return bundles, tmp_path / "m.jsonl"


class TestBenchmark:
    def test_table_rows_per_class(self, tmp_path):
        bundles, manifest = write_synth(tmp_path)
        params = init_params(ExpertConfig(d_enc=8, d=8, g=4, n_heads=2))
        save_checkpoint(params, tmp_path / "c.aovc")
        report = run_benchmark(manifest, tmp_path / "c.aovc")
        assert len(report["per_class"]) == 3
        assert [r["id"] for r in report["scores"]] == sorted(b.id for b in bundles)
        text = format_table(report)
        assert len(text.splitlines()) == 1 + 3 + 2

    def test_threads_do_not_change_scores(self, tmp_path, monkeypatch):
        bundles, _ = write_synth(tmp_path)
        params = init_params(ExpertConfig(d_enc=8, d=8, g=4, n_heads=2))
        serial = predict_scores(bundles, params)
        np.testing.assert_array_equal(score_bundles(bundles, params, threads=3), serial)

    def test_untrained_null_model(self):
        values = []
        for seed in range(5):
            bundles = synth_generate(SynthConfig(n_classes=5, images_per_class=40, seed=seed))
            params = init_params(ExpertConfig(seed=seed))
            values.append(auroc(predict_scores(bundles, params), [b.label for b in bundles]))
        assert all(0.3 < v < 0.7 for v in values), values


class TestRecords:
    def test_score_records(self):
        recs = [{"id": "a", "score": 0.9, "label": 1}, {"id": "b", "score": 0.1, "label": 0}]
        assert evaluate_records(recs)["auroc"] == 1.0

    def test_answer_records(self):
        recs = [
            {"answer": "Yes, the cat sat", "label": 1, "reference": "the cat ran"},
            {"answer": "No", "label": 0},
        ]
        rep = evaluate_records(recs)
        assert rep["detection"]["f1"] == 1.0
        assert rep["rouge_l"] == pytest.approx(rouge_l("Yes, the cat sat", "the cat ran"))
        assert rep["judge"]["score"] is None
        json.dumps(rep)

    def test_malformed(self):
        with pytest.raises(DataError):
            evaluate_records([{"label": 1}])
