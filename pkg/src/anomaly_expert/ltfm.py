"""Look-twice feature matching: class-aware descriptions and per-token significance.

The resized original image (crop 0) is read a second time through a
token-axis linear layer per level; the fused vector is concatenated with a
learnable abnormal or normal embedding and turned into a description by a
small MLP.  Every adapted patch token is then scored by a two-way softmax over
its cosine similarity to the two descriptions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureBundle
from .params import LEVELS, ExpertParams


@dataclass(frozen=True)
class SignificanceMap:
    per_level: np.ndarray  # [4, n_crops, g*g]
    averaged: np.ndarray  # [n_crops, g*g]
    tau: float
    g: int

    def crop(self, j: int) -> np.ndarray:
        return self.averaged[j]


def adapt(v_level: Tensor, level: int, params: ExpertParams) -> Tensor:
    """Per-token linear compression d_enc -> d."""
    return ad.linear(v_level, params[f"adapter.{level}.weight"], params[f"adapter.{level}.bias"])


def lookback_fuse(v0_level: Tensor, level: int, params: ExpertParams) -> Tensor:
    """Weighted sum over the token axis of crop 0's adapted features (plus per-channel bias)."""
    w = params[f"lookback.{level}.weight"]
    if v0_level.shape[0] != w.shape[0]:
        raise ValueError(f"lookback expects {w.shape[0]} tokens, got {v0_level.shape[0]}")
    fused = ad.matmul(w, v0_level)
    if params.config.lookback_bias:
        fused = ad.add(fused, params[f"lookback.{level}.bias"])
    return fused


def mlp2(x: Tensor, prefix: str, params: ExpertParams) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return ad.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def describe(fused: Tensor, level: int, params: ExpertParams) -> tuple[Tensor, Tensor]:
    d_plus = mlp2(ad.concat([params["e_plus"], fused]), f"mlp_plus.{level}", params)
    d_minus = mlp2(ad.concat([params["e_minus"], fused]), f"mlp_minus.{level}", params)
    return d_plus, d_minus


def significance_level(v_adapted: Tensor, d_plus: Tensor, d_minus: Tensor, tau) -> Tensor:
    return ad.softmax_pair(
        ad.cosine_similarity(v_adapted, d_plus),
        ad.cosine_similarity(v_adapted, d_minus),
        tau,
    )


def significance_tensors(bundle: FeatureBundle, params: ExpertParams) -> tuple[list[Tensor], Tensor]:
    """Differentiable level maps and their average, each flattened to [n_crops * g*g].

    Look-back descriptions are computed once from crop 0 and shared by all crops.
    """
    n, t, de = bundle.v_final.shape
    if t != params.config.g ** 2 or de != params.config.d_enc:
        raise ValueError(
            f"bundle grid/width ({t}, {de}) does not match model ({params.config.g ** 2}, {params.config.d_enc})"
        )
    tau = params.tau()
    levels = []
    for li, level in enumerate(LEVELS):
        v = Tensor(bundle.v_levels[li].reshape(n * t, de))
        adapted = adapt(v, level, params)
        fused = lookback_fuse(ad.rows(adapted, 0, t), level, params)
        d_plus, d_minus = describe(fused, level, params)
        levels.append(significance_level(adapted, d_plus, d_minus, tau))
    averaged = ad.scale(ad.add(ad.add(levels[0], levels[1]), ad.add(levels[2], levels[3])), 0.25)
    return levels, averaged


def significance_image(bundle: FeatureBundle, params: ExpertParams) -> SignificanceMap:
    with ad.no_grad():
        levels, averaged = significance_tensors(bundle, params)
    n, t, _ = bundle.v_final.shape
    tau = params.tau()
    return SignificanceMap(
        per_level=np.stack([m.data.reshape(n, t) for m in levels]),
        averaged=averaged.data.reshape(n, t),
        tau=float(tau.data) if isinstance(tau, Tensor) else float(tau),
        g=params.config.g,
    )
