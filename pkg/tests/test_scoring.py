import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomaly_expert.autodiff import Tensor
from anomaly_expert.errors import DegenerateWeights
from anomaly_expert.model import forward, predict
from anomaly_expert.scoring import (
    aggregate_global,
    assemble_prompt,
    indication_text,
    score,
    select_adverb,
)

pytestmark = pytest.mark.usefixtures("double")


class TestAggregate:
    def test_uniform_is_mean(self):
        v = np.random.default_rng(0).normal(size=(8, 5))
        r = aggregate_global(Tensor(v), Tensor(np.full(8, 0.3)))
        np.testing.assert_allclose(r.data, v.mean(axis=0), atol=1e-12)

    def test_single_weight_selects(self):
        v = np.random.default_rng(1).normal(size=(8, 5))
        w = np.zeros(8)
        w[3] = 0.6
        np.testing.assert_allclose(aggregate_global(Tensor(v), Tensor(w)).data, v[3], atol=1e-15)

    def test_hand_weighted_mean(self):
        u, w = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
        r = aggregate_global(Tensor(np.stack([u, w])), Tensor([0.8, 0.2]))
        np.testing.assert_allclose(r.data, 0.8 * u + 0.2 * w, atol=1e-15)

    def test_zero_weights(self):
        with pytest.raises(DegenerateWeights):
            aggregate_global(Tensor(np.ones((4, 2))), Tensor(np.zeros(4)))


class TestScore:
    def test_zero_final_layer(self, small_params):
        small_params["score.fc2.weight"].data[:] = 0.0
        small_params["score.fc2.bias"].data[:] = 0.0
        assert score(Tensor(np.random.default_rng(2).normal(size=8)), small_params).item() == 0.5

    def test_logit_ln3(self, small_params):
        small_params["score.fc2.weight"].data[:] = 0.0
        small_params["score.fc2.bias"].data[:] = math.log(3.0)
        assert score(Tensor(np.ones(8)), small_params).item() == pytest.approx(0.75, abs=1e-12)

    def test_monotone_in_logit(self, small_params):
        small_params["score.fc2.weight"].data[:] = 0.0
        prev = -1.0
        for b in np.linspace(-5, 5, 21):
            small_params["score.fc2.bias"].data[:] = b
            s = score(Tensor(np.ones(8)), small_params).item()
            assert s > prev
            prev = s


class TestAdverb:
    @pytest.mark.parametrize(
        "s,expected", [(0.9, "highly"), (0.5, "moderately"), (0.7, "highly"), (0.3, "moderately"), (0.29, "slightly")]
    )
    def test_cases(self, s, expected):
        assert select_adverb(s, 0.3, 0.7) == expected

    @pytest.mark.parametrize("lo,hi", [(0.7, 0.3), (0.5, 0.5), (-0.1, 0.5), (0.2, 1.1)])
    def test_invalid_thresholds(self, lo, hi):
        with pytest.raises(ValueError):
            select_adverb(0.5, lo, hi)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_step_function(self, a, b):
        lo, hi = sorted((a, b))
        bucket = lambda s: (s >= 0.3) + (s >= 0.7)  # noqa: E731
        if bucket(lo) == bucket(hi):
            assert select_adverb(lo) == select_adverb(hi)
        else:
            assert select_adverb(lo) != select_adverb(hi)

    def test_text_bytes(self):
        assert indication_text("highly").encode() == b"with highly suspicious feature:"
        with pytest.raises(ValueError):
            indication_text("very")


class TestPrompt:
    def test_layout(self, small_params, make_bundle):
        b = make_bundle(np.random.default_rng(3), n_crops=3)
        sel, _ = predict(b, small_params)
        layout = assemble_prompt(b, sel)
        kinds = [k for k, _ in layout.segments]
        assert kinds == ["original", "text", "selected"]
        assert layout.original_tokens.shape[0] == b.layout.total_tokens
        np.testing.assert_array_equal(layout.original_tokens, b.v_final.reshape(-1, 8))
        np.testing.assert_array_equal(layout.selected_tokens[0], sel.r)
        assert layout.selected_tokens.shape[0] == 1 + 3 * 4
        assert layout.text == indication_text(layout.adverb)

    def test_json(self, small_params, make_bundle):
        b = make_bundle(np.random.default_rng(4))
        sel, _ = predict(b, small_params)
        d = json.loads(assemble_prompt(b, sel).to_json())
        assert set(d) == {"adverb", "text", "n_original", "n_selected", "score"}
        assert 0.0 < d["score"] < 1.0

    def test_forward_matches_predict(self, small_params, make_bundle):
        b = make_bundle(np.random.default_rng(5))
        out = forward(b, small_params)
        sel, _ = predict(b, small_params)
        assert out.score.item() == sel.score
