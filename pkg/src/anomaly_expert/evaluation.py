"""Benchmark runs over manifests, text-answer evaluation and significance-map export."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureBundle, iter_bundles, read_manifest
from .ltfm import SignificanceMap
from .metrics import ExternalJudge, NullJudge, auroc, detection_metrics, rouge_l
from .model import predict_scores
from .params import ExpertParams, load_checkpoint


def map_to_pgm(m: np.ndarray, g: int) -> bytes:
    """8-bit binary PGM of a g*g map, pixel = round-half-up(255 * m)."""
    m = np.asarray(m, dtype=np.float64).reshape(g, g)
    pixels = np.floor(255.0 * np.clip(m, 0.0, 1.0) + 0.5).astype(np.uint8)
    return f"P5\n{g} {g}\n255\n".encode("ascii") + pixels.tobytes()


def export_map(sig: SignificanceMap, crop: int, path: str | os.PathLike) -> Path:
    if not 0 <= crop < sig.averaged.shape[0]:
        raise IndexError(f"crop {crop} out of range (map has {sig.averaged.shape[0]} crops)")
    p = Path(path)
    p.write_bytes(map_to_pgm(sig.averaged[crop], sig.g))
    return p


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AOV_THREADS", "1")))
    except ValueError:
        return 1


def score_bundles(bundles: list[FeatureBundle], params: ExpertParams, threads: int | None = None) -> np.ndarray:
    threads = threads or _threads()
    if threads == 1 or len(bundles) < 2:
        return predict_scores(bundles, params)
    chunks = [bundles[i::threads] for i in range(threads)]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda c: predict_scores(c, params), chunks))
    out = np.empty(len(bundles))
    for i, part in enumerate(parts):
        out[i::threads] = part
    return out


def _maybe_auroc(scores, labels) -> float | None:
    try:
        return auroc(scores, labels)
    except ValueError:
        return None


def score_report(ids, scores, labels, classes) -> dict:
    """Per-class and pooled AUROC from already computed scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.asarray(classes)
    per_class = []
    for c in sorted(set(classes.tolist())):
        sel = classes == c
        per_class.append(
            {
                "class": c,
                "n": int(sel.sum()),
                "n_anomalous": int(labels[sel].sum()),
                "auroc": _maybe_auroc(scores[sel], labels[sel]),
            }
        )
    defined = [row["auroc"] for row in per_class if row["auroc"] is not None]
    order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
    return {
        "n": int(scores.size),
        "auroc": _maybe_auroc(scores, labels),
        "mean_class_auroc": float(np.mean(defined)) if defined else None,
        "per_class": per_class,
        "scores": [
            {"id": str(ids[i]), "score": float(scores[i]), "label": int(labels[i]), "class": classes[i].item()}
            for i in order
        ],
    }


def run_benchmark(manifest: str | os.PathLike, checkpoint: str | os.PathLike | ExpertParams) -> dict:
    """Score every bundle of ``manifest`` with a checkpoint; AUROC per class and pooled."""
    params = checkpoint if isinstance(checkpoint, ExpertParams) else load_checkpoint(checkpoint)
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"{manifest}: manifest is empty")
    bundles = list(iter_bundles(entries))
    scores = score_bundles(bundles, params)
    ids = [e.get("id", b.id) for e, b in zip(entries, bundles)]
    classes = [e.get("class", b.class_id) for e, b in zip(entries, bundles)]
    return score_report(ids, scores, [b.label for b in bundles], classes)


def evaluate_records(entries: list[dict], judge: ExternalJudge | None = None) -> dict:
    """Evaluate precomputed records: ``{"score", "label"}`` or ``{"answer", "label", "reference"}``."""
    judge = judge or NullJudge()
    with_score = [e for e in entries if "score" in e]
    with_answer = [e for e in entries if "answer" in e]
    for e in entries:
        if ("score" in e) == ("answer" in e):
            raise DataError(f"record {e.get('id', '?')} must carry exactly one of 'score' or 'answer'")
        if "label" not in e:
            raise DataError(f"record {e.get('id', '?')} has no label")
    report: dict = {}
    if with_score:
        report.update(
            score_report(
                [e.get("id", str(i)) for i, e in enumerate(with_score)],
                [float(e["score"]) for e in with_score],
                [int(e["label"]) for e in with_score],
                [e.get("class", 0) for e in with_score],
            )
        )
    if with_answer:
        det = detection_metrics([e["answer"] for e in with_answer], [int(e["label"]) for e in with_answer])
        report["detection"] = det.to_dict()
        refs = [e for e in with_answer if e.get("reference") is not None and int(e["label"]) == 1]
        if refs:
            report["rouge_l"] = float(np.mean([rouge_l(e["answer"], e["reference"]) for e in refs]))
            judged = [judge.score(e["answer"], e["reference"]) for e in refs]
            report["judge"] = {
                "name": judge.name,
                "score": None if any(j is None for j in judged) else float(np.mean(judged)),
            }
    return report


def format_table(report: dict) -> str:
    """Fixed-width per-class AUROC table followed by pooled and class-mean rows."""

    def fmt(v):
        return "   n/a" if v is None else f"{100 * v:6.1f}"

    lines = [f"{'class':>10} {'n':>6} {'anom':>6} {'AUROC':>6}"]
    for row in report.get("per_class", []):
        lines.append(f"{str(row['class']):>10} {row['n']:>6} {row['n_anomalous']:>6} {fmt(row['auroc'])}")
    lines.append(f"{'mean':>10} {'':>6} {'':>6} {fmt(report.get('mean_class_auroc'))}")
    lines.append(f"{'pooled':>10} {report.get('n', 0):>6} {'':>6} {fmt(report.get('auroc'))}")
    return "\n".join(lines)
