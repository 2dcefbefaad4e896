"""Image-level anomaly score and the indication-prompt layout handed to a language model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateWeights
from .features import FeatureBundle
from .params import ExpertParams

ADVERBS = ("highly", "moderately", "slightly")
DEFAULT_THRESHOLDS = (0.3, 0.7)


def aggregate_global(v_s: Tensor, pooled_m: Tensor) -> Tensor:
    """Significance-weighted mean of the selected tokens.

    ``v_s`` stacks all crops' selected tokens as rows; ``pooled_m`` holds the
    matching pooled significances.
    """
    if v_s.shape[0] != pooled_m.shape[0]:
        raise ValueError(f"aggregate_global: {v_s.shape[0]} tokens vs {pooled_m.shape[0]} weights")
    total = ad.sum(pooled_m)
    if not float(total.data) > 0:
        raise DegenerateWeights("pooled significance weights sum to zero")
    return ad.div(ad.matmul(pooled_m, v_s), total)


def score_logit(r: Tensor, params: ExpertParams) -> Tensor:
    h = ad.relu(ad.linear(r, params["score.fc1.weight"], params["score.fc1.bias"]))
    return ad.linear(h, params["score.fc2.weight"], params["score.fc2.bias"])


def score(r: Tensor, params: ExpertParams) -> Tensor:
    """Abnormal probability in (0, 1), shape [1]."""
    return ad.sigmoid(score_logit(r, params))


def select_adverb(score: float, s_low: float = 0.3, s_high: float = 0.7) -> str:
    if not 0.0 <= s_low < s_high <= 1.0:
        raise ValueError(f"invalid thresholds ({s_low}, {s_high})")
    if score >= s_high:
        return "highly"
    if score >= s_low:
        return "moderately"
    return "slightly"


def indication_text(adverb: str) -> str:
    if adverb not in ADVERBS:
        raise ValueError(f"unknown adverb {adverb!r}")
    return f"with {adverb} suspicious feature:"


@dataclass
class SelectionResult:
    r: np.ndarray  # [d_enc]
    score: float
    v_s: np.ndarray  # [n_crops, h*w, d_enc]
    pooled_m: np.ndarray  # [n_crops, h*w]


@dataclass
class PromptLayout:
    """Original tokens, then the indication text, then ``r`` followed by the selected tokens."""

    original_tokens: np.ndarray  # [total_tokens, d_enc]
    adverb: str
    selected_tokens: np.ndarray  # [1 + n_crops*h*w, d_enc]; row 0 is r
    score: float
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS
    text: str = field(init=False)

    def __post_init__(self):
        self.text = indication_text(self.adverb)

    @property
    def segments(self) -> list[tuple[str, object]]:
        return [("original", self.original_tokens), ("text", self.text), ("selected", self.selected_tokens)]

    def to_dict(self) -> dict:
        return {
            "adverb": self.adverb,
            "text": self.text,
            "n_original": int(self.original_tokens.shape[0]),
            "n_selected": int(self.selected_tokens.shape[0]),
            "score": float(self.score),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def assemble_prompt(
    bundle: FeatureBundle,
    selection: SelectionResult,
    thresholds: tuple[float, float] = DEFAULT_THRESHOLDS,
) -> PromptLayout:
    adverb = select_adverb(selection.score, *thresholds)
    n, t, de = bundle.v_final.shape
    selected = np.concatenate([selection.r[None, :], selection.v_s.reshape(-1, de)], axis=0)
    return PromptLayout(
        original_tokens=bundle.v_final.reshape(n * t, de),
        adverb=adverb,
        selected_tokens=selected,
        score=selection.score,
        thresholds=tuple(thresholds),
    )
