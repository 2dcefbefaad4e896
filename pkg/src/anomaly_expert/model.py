"""End-to-end forward pass of the anomaly expert for one image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureBundle
from .ltfm import SignificanceMap, significance_tensors
from .params import ExpertParams
from .scoring import SelectionResult, aggregate_global, score
from .selector import select_tokens


@dataclass
class ForwardOutput:
    score: Tensor  # [1]
    r: Tensor
    v_s: list[Tensor]
    pooled_m: list[Tensor]
    level_maps: list[Tensor]
    averaged_map: Tensor


def forward(bundle: FeatureBundle, params: ExpertParams) -> ForwardOutput:
    levels, m = significance_tensors(bundle, params)
    v_s, pooled = select_tokens(bundle.v_final, m, params)
    r = aggregate_global(ad.concat(v_s, axis=0), ad.concat(pooled, axis=0))
    return ForwardOutput(score(r, params), r, v_s, pooled, levels, m)


def predict(bundle: FeatureBundle, params: ExpertParams) -> tuple[SelectionResult, SignificanceMap]:
    with ad.no_grad():
        out = forward(bundle, params)
    n, t, _ = bundle.v_final.shape
    tau = params.tau()
    sig = SignificanceMap(
        per_level=np.stack([m.data.reshape(n, t) for m in out.level_maps]),
        averaged=out.averaged_map.data.reshape(n, t),
        tau=float(tau.data) if isinstance(tau, Tensor) else float(tau),
        g=params.config.g,
    )
    sel = SelectionResult(
        r=out.r.data.copy(),
        score=float(out.score.data[0]),
        v_s=np.stack([v.data for v in out.v_s]),
        pooled_m=np.stack([p.data for p in out.pooled_m]),
    )
    return sel, sig


def predict_scores(bundles, params: ExpertParams) -> np.ndarray:
    with ad.no_grad():
        return np.array([float(forward(b, params).score.data[0]) for b in bundles])
