"""Web-collection pipeline logic with all external services behind one client interface.

Three request kinds go through :class:`Client`:

* ``classes`` / ``phrases``: a language model lists class names and writes
  anomalous / normal search phrases per class;
* ``search``: an image search returns hits with precomputed embeddings;
* ``adjudicate``: a multimodal judge labels an image given its search prompt
  as a (possibly wrong) hint.

Only deterministic mock clients ship here.  Near-duplicates are removed per
class by greedy cosine-similarity scanning.
"""
from __future__ import annotations

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import jsonschema
import numpy as np

log = logging.getLogger(__name__)

POLARITIES = ("anomalous", "normal")
VERDICTS = ("keep_normal", "keep_anomalous", "discard")

REQUEST_SCHEMAS = {
    "classes": {
        "type": "object",
        "required": ["task", "n"],
        "properties": {"task": {"const": "classes"}, "n": {"type": "integer", "minimum": 1}},
    },
    "phrases": {
        "type": "object",
        "required": ["task", "class_name", "polarity", "n"],
        "properties": {
            "task": {"const": "phrases"},
            "class_name": {"type": "string", "minLength": 1},
            "polarity": {"enum": list(POLARITIES)},
            "n": {"type": "integer", "minimum": 1},
        },
    },
    "search": {
        "type": "object",
        "required": ["task", "prompt", "max_results"],
        "properties": {
            "task": {"const": "search"},
            "prompt": {"type": "string", "minLength": 1},
            "max_results": {"type": "integer", "minimum": 1},
        },
    },
    "adjudicate": {
        "type": "object",
        "required": ["task", "item", "hint"],
        "properties": {
            "task": {"const": "adjudicate"},
            "item": {
                "type": "object",
                "required": ["id", "class_name", "search_prompt"],
            },
            "hint": {"enum": list(POLARITIES)},
        },
    },
}

RESPONSE_SCHEMAS = {
    "classes": {
        "type": "object",
        "required": ["classes"],
        "properties": {"classes": {"type": "array", "items": {"type": "string"}}},
    },
    "phrases": {
        "type": "object",
        "required": ["phrases"],
        "properties": {"phrases": {"type": "array", "items": {"type": "string"}}},
    },
    "search": {
        "type": "object",
        "required": ["results"],
        "properties": {
            "results": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["url", "embedding"],
                    "properties": {
                        "url": {"type": "string"},
                        "embedding": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    },
                },
            }
        },
    },
    "adjudicate": {
        "type": "object",
        "required": ["verdict"],
        "properties": {"verdict": {"enum": list(VERDICTS)}},
    },
}


_VALIDATORS = {
    (kind, task): jsonschema.Draft202012Validator(schema)
    for kind, table in (("request", REQUEST_SCHEMAS), ("response", RESPONSE_SCHEMAS))
    for task, schema in table.items()
}
for _v in _VALIDATORS.values():
    _v.check_schema(_v.schema)


class ClientError(RuntimeError):
    """An external service failed or answered outside its contract."""


class Client(ABC):
    """Request/response endpoint; requests and responses are plain JSON objects."""

    @abstractmethod
    def handle(self, request: dict) -> dict: ...

    def request(self, payload: dict) -> dict:
        task = payload.get("task")
        if task not in REQUEST_SCHEMAS:
            raise ClientError(f"unknown task {task!r}")
        _VALIDATORS["request", task].validate(payload)
        response = self.handle(payload)
        try:
            _VALIDATORS["response", task].validate(response)
        except jsonschema.ValidationError as exc:
            raise ClientError(f"{task} response violates schema: {exc.message}") from exc
        return response


def _request_rng(request: dict, seed: int) -> np.random.Generator:
    digest = hashlib.sha256((json.dumps(request, sort_keys=True) + f"#{seed}").encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class MockLanguageModel(Client):
    """Deterministic class lists and phrases; every ``duplicate_every``-th phrase repeats the previous one."""

    def __init__(self, seed: int = 0, duplicate_every: int = 0, fail_classes: Iterable[str] = ()):
        self.seed = seed
        self.duplicate_every = duplicate_every
        self.fail_classes = set(fail_classes)

    def handle(self, request: dict) -> dict:
        if request["task"] == "classes":
            return {"classes": [f"object_{i:03d}" for i in range(request["n"])]}
        if request["task"] != "phrases":
            raise ClientError(f"language model cannot serve {request['task']!r}")
        name = request["class_name"]
        if name in self.fail_classes:
            raise ClientError(f"mock failure for class {name!r}")
        rng = _request_rng(request, self.seed)
        adjectives = ("cracked", "scratched", "bent", "stained", "torn") if request["polarity"] == "anomalous" else (
            "clean",
            "new",
            "intact",
            "polished",
            "plain",
        )
        phrases = []
        for k in range(request["n"]):
            if self.duplicate_every and k and k % self.duplicate_every == 0:
                phrases.append(phrases[-1])
            else:
                phrases.append(f"{adjectives[int(rng.integers(len(adjectives)))]} {name} #{k}")
        return {"phrases": phrases}


class MockSearch(Client):
    """Hits with pseudo-random unit embeddings; ``near_duplicates`` extra copies are slightly perturbed."""

    def __init__(self, seed: int = 0, dim: int = 16, near_duplicates: int = 0):
        self.seed, self.dim, self.near_duplicates = seed, dim, near_duplicates

    def handle(self, request: dict) -> dict:
        rng = _request_rng(request, self.seed)
        results = []
        for k in range(request["max_results"]):
            e = rng.standard_normal(self.dim)
            results.append({"url": f"mock://{request['prompt'].replace(' ', '_')}/{k}", "embedding": e.tolist()})
            for d in range(self.near_duplicates):
                jitter = e + 1e-3 * np.linalg.norm(e) * rng.standard_normal(self.dim) / np.sqrt(self.dim)
                results.append({"url": f"mock://{request['prompt'].replace(' ', '_')}/{k}~{d}", "embedding": jitter.tolist()})
        return {"results": results}


class MockJudge(Client):
    """Echoes (or inverts) the hint; ids in ``fail_ids`` raise, ids in ``discard_ids`` are discarded."""

    def __init__(self, mode: str = "echo", fail_ids: Iterable[str] = (), discard_ids: Iterable[str] = ()):
        if mode not in ("echo", "invert"):
            raise ValueError("mode must be 'echo' or 'invert'")
        self.mode = mode
        self.fail_ids = set(fail_ids)
        self.discard_ids = set(discard_ids)

    def handle(self, request: dict) -> dict:
        item_id = request["item"]["id"]
        if item_id in self.fail_ids:
            raise ClientError(f"mock judge failure on {item_id}")
        if item_id in self.discard_ids:
            return {"verdict": "discard"}
        anomalous = request["hint"] == "anomalous"
        if self.mode == "invert":
            anomalous = not anomalous
        return {"verdict": "keep_anomalous" if anomalous else "keep_normal"}


# ---------------------------------------------------------------------------
# pipeline steps


@dataclass
class CollectedItem:
    id: str
    search_prompt: str
    class_name: str
    polarity: str
    embedding: np.ndarray | None = None
    url: str = ""
    verdict: str | None = None

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=np.float64)
            if not np.linalg.norm(self.embedding) > 0:
                raise ValueError(f"item {self.id}: embedding has zero norm")

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "url": self.url,
            "search_prompt": self.search_prompt,
            "class_name": self.class_name,
            "polarity": self.polarity,
            "verdict": self.verdict,
        }
        if self.embedding is not None:
            d["embedding"] = self.embedding.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CollectedItem":
        return cls(
            id=str(d["id"]),
            search_prompt=d.get("search_prompt", ""),
            class_name=d.get("class_name", d.get("class", "")),
            polarity=d.get("polarity", "normal"),
            embedding=d.get("embedding"),
            url=d.get("url", ""),
            verdict=d.get("verdict"),
        )


def dedup(embeddings: Sequence, threshold: float = 0.99) -> list[int]:
    """Greedy near-duplicate removal in input order.

    An item is dropped iff its cosine similarity to some already kept item is
    strictly greater than ``threshold``.  Returns indices of kept items.
    """
    if len(embeddings) == 0:
        return []
    X = np.asarray([np.asarray(e, dtype=np.float64) for e in embeddings])
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm embedding at index {int(np.argmin(norms))}")
    U = X / norms[:, None]
    kept: list[int] = []
    basis = np.empty_like(U)
    for i, u in enumerate(U):
        if kept and np.max(basis[: len(kept)] @ u) > threshold:
            continue
        basis[len(kept)] = u
        kept.append(i)
    return kept


def dedup_items(items: list[CollectedItem], threshold: float = 0.99) -> tuple[list[CollectedItem], dict[str, int]]:
    """Dedup within each class (no cross-class comparison); order of survivors is preserved."""
    by_class: dict[str, list[int]] = {}
    for idx, it in enumerate(items):
        by_class.setdefault(it.class_name, []).append(idx)
    keep: set[int] = set()
    removed: dict[str, int] = {}
    for name, idxs in by_class.items():
        kept = dedup([items[i].embedding for i in idxs], threshold)
        keep.update(idxs[k] for k in kept)
        removed[name] = len(idxs) - len(kept)
    return [it for i, it in enumerate(items) if i in keep], removed


@dataclass
class CleanResult:
    normal: list[CollectedItem] = field(default_factory=list)
    anomalous: list[CollectedItem] = field(default_factory=list)
    discarded: list[CollectedItem] = field(default_factory=list)
    pending: list[CollectedItem] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def kept(self) -> list[CollectedItem]:
        return self.normal + self.anomalous


def clean_labels(items: list[CollectedItem], judge: Client) -> CleanResult:
    """Adjudicate each item independently; failures leave the item pending, never kept."""
    out = CleanResult()
    for it in items:
        req = {
            "task": "adjudicate",
            "item": {"id": it.id, "class_name": it.class_name, "search_prompt": it.search_prompt, "url": it.url},
            "hint": it.polarity,
        }
        try:
            verdict = judge.request(req)["verdict"]
        except (ClientError, jsonschema.ValidationError) as exc:
            it.verdict = None
            out.pending.append(it)
            out.errors[it.id] = str(exc)
            continue
        it.verdict = verdict
        {"keep_normal": out.normal, "keep_anomalous": out.anomalous, "discard": out.discarded}[verdict].append(it)
    return out


@dataclass
class PromptSet:
    prompts: list[dict] = field(default_factory=list)  # {"class_name", "polarity", "prompt"}
    duplicates_removed: dict[str, int] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def groups(self) -> dict[tuple[str, str], list[str]]:
        out: dict[tuple[str, str], list[str]] = {}
        for p in self.prompts:
            out.setdefault((p["class_name"], p["polarity"]), []).append(p["prompt"])
        return out


def build_prompt_set(classes: Sequence[str], lm: Client, phrases_per_class: int = 10) -> PromptSet:
    """Ask for ``phrases_per_class`` anomalous and normal phrases per class, deduplicated within the class."""
    result = PromptSet()
    for name in classes:
        try:
            per_polarity = {
                pol: lm.request({"task": "phrases", "class_name": name, "polarity": pol, "n": phrases_per_class})[
                    "phrases"
                ]
                for pol in POLARITIES
            }
        except ClientError as exc:
            result.failures[name] = str(exc)
            log.warning("phrase generation failed for class %s: %s", name, exc)
            continue
        seen: set[str] = set()
        dropped = 0
        for pol in POLARITIES:
            for phrase in per_polarity[pol]:
                key = " ".join(phrase.lower().split())
                if key in seen:
                    dropped += 1
                    continue
                seen.add(key)
                result.prompts.append({"class_name": name, "polarity": pol, "prompt": phrase})
        result.duplicates_removed[name] = dropped
    return result


def collect(
    n_classes: int,
    lm: Client,
    search: Client,
    judge: Client,
    phrases_per_class: int = 10,
    results_per_prompt: int = 3,
    threshold: float = 0.99,
) -> dict:
    """Full offline pipeline: classes, phrases, search, per-class dedup, label cleaning."""
    classes = lm.request({"task": "classes", "n": n_classes})["classes"]
    prompts = build_prompt_set(classes, lm, phrases_per_class)
    items: list[CollectedItem] = []
    for p in prompts.prompts:
        hits = search.request({"task": "search", "prompt": p["prompt"], "max_results": results_per_prompt})["results"]
        for h in hits:
            items.append(
                CollectedItem(
                    id=f"{len(items):07d}",
                    search_prompt=p["prompt"],
                    class_name=p["class_name"],
                    polarity=p["polarity"],
                    embedding=h["embedding"],
                    url=h["url"],
                )
            )
    unique, removed = dedup_items(items, threshold)
    cleaned = clean_labels(unique, judge)
    return {
        "classes": classes,
        "prompts": len(prompts.prompts),
        "prompt_duplicates_removed": prompts.duplicates_removed,
        "prompt_failures": prompts.failures,
        "collected": len(items),
        "near_duplicates_removed": removed,
        "polarity_counts": dict(Counter(it.polarity for it in cleaned.kept)),
        "kept_normal": len(cleaned.normal),
        "kept_anomalous": len(cleaned.anomalous),
        "discarded": len(cleaned.discarded),
        "pending": len(cleaned.pending),
        "items": [it.to_dict() for it in cleaned.kept],
    }
