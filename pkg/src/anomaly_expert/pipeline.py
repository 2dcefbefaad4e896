"""synth -> train -> eval in one call, with config resolution shared by the CLI."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import jsonschema
import tomli

from . import autodiff as ad
from .evaluation import export_map, run_benchmark
from .features import iter_bundles, read_manifest
from .model import predict
from .params import ExpertConfig, init_params, load_checkpoint, save_checkpoint
from .synth import SynthConfig, write_dataset
from .training import TrainConfig, train_stage1

log = logging.getLogger(__name__)

SECTIONS = {"synth": SynthConfig, "model": ExpertConfig, "train": TrainConfig}
SHARED_KEYS = {"seed"}


class ConfigError(ValueError):
    """Unknown key or uncoercible value in a configuration."""


def _field_types(cls) -> dict[str, type]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def _coerce(value, typ, key: str):
    if isinstance(value, str) and typ is not str:
        low = value.strip().lower()
        if typ is bool:
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if low in ("none", "null"):
            return None
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


@dataclass
class ResolvedConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ExpertConfig = field(default_factory=ExpertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def desk_preset() -> dict:
    """Flat entries of the packaged desk-scale preset."""
    return flatten_toml(tomli.loads(resources.files("anomaly_expert").joinpath("desk.toml").read_text()))


def resolve_config(flat: dict | None = None, seed: int | None = None, preset: bool = True) -> ResolvedConfig:
    """Build all section configs from flat ``key -> value`` pairs (optionally ``section.key``).

    With ``preset`` the packaged desk preset is applied first and ``flat`` on top.
    ``seed`` applies to every section.  Unknown keys raise :class:`ConfigError`.
    """
    flat = {**(desk_preset() if preset else {}), **(flat or {})}
    if seed is not None:
        flat["seed"] = seed
    per_section: dict[str, dict] = {name: {} for name in SECTIONS}
    types = {name: _field_types(cls) for name, cls in SECTIONS.items()}
    for key, value in flat.items():
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in SECTIONS or sub not in types[section]:
                raise ConfigError(f"unknown config key {key!r}")
            targets = [(section, sub)]
        else:
            targets = [(s, key) for s in SECTIONS if key in types[s]]
            if not targets:
                raise ConfigError(f"unknown config key {key!r}")
            if len(targets) > 1 and key not in SHARED_KEYS:
                raise ConfigError(f"ambiguous config key {key!r}; prefix it with a section name")
        for section, sub in targets:
            per_section[section][sub] = _coerce(value, types[section][sub], key)
    try:
        synth = SynthConfig(**per_section["synth"])
        model_kw = {"g": synth.g, "d_enc": synth.d_enc, **per_section["model"]}
        return ResolvedConfig(synth, ExpertConfig(**model_kw), TrainConfig(**per_section["train"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def flatten_toml(doc: dict) -> dict:
    """Sectioned TOML tables become ``section.key`` entries; top-level keys stay flat."""
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return flat


def load_config_file(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        try:
            return flatten_toml(tomli.load(fh))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def report_schema() -> dict:
    return json.loads(resources.files("anomaly_expert").joinpath("report_schema.json").read_text())


def pipeline_run(cfg: ResolvedConfig, out_dir: str | os.PathLike, n_maps: int = 4) -> dict:
    """Generate data, train, benchmark the held-out split and export a few significance maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "synth"
    try:
        write_dataset(cfg.synth, out / "data")
        stage = "train"
        if cfg.train.epochs == 0:
            # untrained baseline: initial parameters only
            (out / "train").mkdir(parents=True, exist_ok=True)
            ckpt = out / "train" / "checkpoint.aovc"
            with ad.precision(cfg.train.precision):
                save_checkpoint(init_params(cfg.model), ckpt)
            train_report = {"epoch_loss": [], "step_loss": [], "train_auroc": [], "wall_time": 0.0}
        else:
            rep = train_stage1(out / "data" / "train.jsonl", cfg.train, cfg.model, out / "train")
            train_report = rep.to_dict()
            ckpt = Path(rep.checkpoint)
        stage = "eval"
        bench = run_benchmark(out / "data" / "test.jsonl", ckpt)
        stage = "maps"
        params = load_checkpoint(ckpt)
        map_dir = out / "maps"
        map_dir.mkdir(exist_ok=True)
        maps = []
        anomalous = [e for e in read_manifest(out / "data" / "test.jsonl") if e["label"] == 1][:n_maps]
        for entry, bundle in zip(anomalous, iter_bundles(anomalous)):
            _, sig = predict(bundle, params)
            for j in range(sig.averaged.shape[0]):
                maps.append(str(export_map(sig, j, map_dir / f"{entry['id']}_crop{j}.pgm")))
    except Exception as exc:
        log.error("pipeline stage %r failed: %s", stage, exc)
        exc.stage = stage  # type: ignore[attr-defined]
        raise
    report = {
        "auroc": bench["auroc"],
        "mean_class_auroc": bench["mean_class_auroc"],
        "per_class": bench["per_class"],
        "loss_curve": train_report["step_loss"],
        "epoch_loss": train_report["epoch_loss"],
        "train_auroc": train_report["train_auroc"],
        "train_wall_time": train_report["wall_time"],
        "checkpoint": str(ckpt),
        "maps": maps,
        "config": cfg.to_dict(),
    }
    jsonschema.validate(report, report_schema())
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
