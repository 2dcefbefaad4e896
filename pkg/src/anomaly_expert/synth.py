"""Synthetic planted-anomaly features standing in for a pretrained encoder.

Every class ``c`` owns a unit class direction ``mu_c`` and a unit anomaly
direction ``a_c`` (orthogonal to ``mu_c``).  A normal token is
``mu_c + noise``; an anomalous image additionally shifts a contiguous
``patch_size x patch_size`` block of tokens by ``anomaly_shift_norm * a_c`` in
every crop, in every level and in the final features.

``noise_sigma`` is the expected norm of a token's noise vector (per-coordinate
standard deviation ``noise_sigma / sqrt(d_enc)``), so ``anomaly_shift_norm /
noise_sigma`` is the per-token signal-to-noise ratio.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import N_LEVELS, FeatureBundle, save_bundle, write_manifest


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 5
    images_per_class: int = 200
    anomaly_fraction: float = 0.5
    g: int = 8
    d_enc: int = 64
    n_crops: int = 2
    patch_size: int = 3
    anomaly_shift_norm: float = 1.0
    noise_sigma: float = 0.25
    class_norm: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.anomaly_fraction < 1.0:
            raise ValueError("anomaly_fraction must lie in (0, 1)")
        if not 0 < self.patch_size < self.g:
            raise ValueError("patch_size must satisfy 0 < patch_size < g")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if min(self.n_classes, self.images_per_class, self.d_enc, self.n_crops) < 1:
            raise ValueError("counts and dimensions must be positive")
        if self.noise_sigma < 0 or self.anomaly_shift_norm < 0:
            raise ValueError("noise_sigma and anomaly_shift_norm must be non-negative")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def class_directions(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (mu, a) unit directions, drawn once from the config seed."""
    rng = np.random.default_rng([cfg.seed, 0])
    mus = np.empty((cfg.n_classes, cfg.d_enc))
    anoms = np.empty((cfg.n_classes, cfg.d_enc))
    for c in range(cfg.n_classes):
        mu = _unit(rng.standard_normal(cfg.d_enc))
        a = rng.standard_normal(cfg.d_enc)
        a = _unit(a - (a @ mu) * mu)
        mus[c], anoms[c] = mu, a
    return mus, anoms


def n_anomalous(cfg: SynthConfig) -> int:
    return int(round(cfg.anomaly_fraction * cfg.images_per_class))


def synth_generate(cfg: SynthConfig) -> list[FeatureBundle]:
    mus, anoms = class_directions(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    t = cfg.g * cfg.g
    sigma = cfg.noise_sigma / np.sqrt(cfg.d_enc)
    n_anom = n_anomalous(cfg)
    bundles = []
    for c in range(cfg.n_classes):
        mu = cfg.class_norm * mus[c]
        is_anom = np.zeros(cfg.images_per_class, dtype=bool)
        is_anom[rng.permutation(cfg.images_per_class)[:n_anom]] = True
        for k in range(cfg.images_per_class):
            # all four levels plus v_final in one draw: [5, n_crops, t, d_enc]
            feats = mu + sigma * rng.standard_normal((1 + N_LEVELS, cfg.n_crops, t, cfg.d_enc))
            region: tuple[int, ...] = ()
            if is_anom[k]:
                r0, c0 = rng.integers(0, cfg.g - cfg.patch_size + 1, size=2)
                rr, cc = np.meshgrid(
                    np.arange(r0, r0 + cfg.patch_size), np.arange(c0, c0 + cfg.patch_size), indexing="ij"
                )
                region = tuple(int(i) for i in (rr * cfg.g + cc).ravel())
                feats[:, :, list(region), :] += cfg.anomaly_shift_norm * anoms[c]
            bundles.append(
                FeatureBundle(
                    v_final=feats[0],
                    v_levels=feats[1:],
                    label=int(is_anom[k]),
                    class_id=c,
                    anomaly_region=region,
                    id=f"c{c:03d}_{k:05d}",
                )
            )
    return bundles


def split_dataset(bundles: list[FeatureBundle], test_fraction: float) -> dict[str, str]:
    """Deterministic stratified split: the trailing ``test_fraction`` of each (class, label) group."""
    groups: dict[tuple[int, int], list[FeatureBundle]] = {}
    for b in bundles:
        groups.setdefault((b.class_id, b.label), []).append(b)
    split = {}
    for members in groups.values():
        n_test = int(round(test_fraction * len(members)))
        for i, b in enumerate(members):
            split[b.id] = "test" if i >= len(members) - n_test else "train"
    return split


def write_dataset(cfg: SynthConfig, out_dir: str | os.PathLike) -> Path:
    """Generate, write ``<id>.aovf`` files plus ``manifest.jsonl``/``train.jsonl``/``test.jsonl``."""
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    bundles = synth_generate(cfg)
    split = split_dataset(bundles, cfg.test_fraction)
    entries = []
    for b in bundles:
        rel = f"bundles/{b.id}.aovf"
        save_bundle(b, out / rel)
        entries.append(
            {
                "id": b.id,
                "path": rel,
                "label": b.label,
                "class": b.class_id,
                "split": split[b.id],
                "source_layers": None,
            }
        )
    write_manifest(entries, out / "manifest.jsonl")
    write_manifest([e for e in entries if e["split"] == "train"], out / "train.jsonl")
    write_manifest([e for e in entries if e["split"] == "test"], out / "test.jsonl")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return out / "manifest.jsonl"
