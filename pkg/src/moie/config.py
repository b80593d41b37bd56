"""Experiment configuration: one JSON document with a section per stage.

Seed derivation. A run has a single root seed per entry of ``seeds``.
:meth:`ExperimentConfig.for_seed` writes that root into every section; each
component then opens its own stream ``numpy.random.default_rng([root, tag])``
(or the bare root where only one stream is drawn):

=====================  =========================================
stream                 key
=====================  =========================================
synthetic world        ``[root, 104729]`` (embedding, nuisance)
synthetic rows         ``root`` or ``[root, sample_seed]``
group split            ``root``
blackbox init / batch  ``root`` / ``[root, 1]``
projection batch/init  ``[root, 2]`` / ``[root, 3]``
selector k init        ``root * 1000 + 2k``
expert k init          ``root * 1000 + 2k + 1``
iteration k batches    ``[root, 100 + k]``
residual head batches  ``[root, 300]``
pseudo-label draw      ``[root, 500]``
target projection      ``[root, 501]``
blackbox fine-tune     ``[root, 502]``
domain shift           ``root`` (matrix) and shift seed (reweighting)
=====================  =========================================
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .blackbox import BlackboxConfig, ProjectionConfig
from .datagen import ConfigError, SynthConfig
from .pipeline import DistillConfig
from .transfer import TransferConfig

__all__ = ["ShiftSpec", "ExperimentConfig", "load_experiment_config"]


@dataclass
class ShiftSpec:
    """Target domain: fresh rows of the source world under a random affine shift."""

    strength: float = 0.5
    subgroup_weights: list[float] | None = field(default_factory=lambda: [0.3, 0.7])
    sample_seed: int = 1
    identity: bool = False


def _section(cls, payload, name):
    if payload is None:
        return cls()
    if not isinstance(payload, dict):
        raise ConfigError(name, "section must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown field")
    if hasattr(cls, "from_json"):
        try:
            return cls.from_json(payload)
        except ConfigError as exc:
            raise ConfigError(f"{name}.{exc.field}", str(exc.args[0]).split(": ", 1)[-1]) from None
    payload = dict(payload)
    if "hidden" in payload:
        payload["hidden"] = tuple(payload["hidden"])
    return cls(**payload)


def _as_json(obj) -> dict:
    if hasattr(obj, "to_json"):
        return obj.to_json()
    out = dataclasses.asdict(obj)
    if "hidden" in out:
        out["hidden"] = list(out["hidden"])
    return out


@dataclass
class ExperimentConfig:
    datagen: SynthConfig = field(default_factory=SynthConfig)
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    blackbox: BlackboxConfig = field(default_factory=BlackboxConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"

    SECTIONS = {"datagen": SynthConfig, "blackbox": BlackboxConfig,
                "projection": ProjectionConfig, "distill": DistillConfig,
                "transfer": TransferConfig, "shift": ShiftSpec}

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds", "need at least one seed")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds", "seeds must be non-negative integers")
        self.datagen.validate()
        if len(self.split) != 3 or any(f <= 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError("split", "need three positive fractions summing to 1")
        d = self.distill
        for name in ("lr", "lambda_s", "temperature_kd", "temperature_lens"):
            if getattr(d, name) <= 0:
                raise ConfigError(f"distill.{name}", "must be positive")
        if not 0.0 <= d.alpha_kd <= 1.0:
            raise ConfigError("distill.alpha_kd", "must lie in [0, 1]")
        if d.lambda_lens < 0:
            raise ConfigError("distill.lambda_lens", "must be non-negative")
        if d.max_experts < 1:
            raise ConfigError("distill.max_experts", "must be at least 1")
        if not d.hidden or any(h < 1 for h in d.hidden):
            raise ConfigError("distill.hidden", "widths must be positive")
        if d.schedule is not None and any(not 0.0 < t <= 1.0 for t in d.schedule):
            raise ConfigError("distill.schedule", "every coverage target must lie in (0, 1]")
        if not 0.0 < d.stop_coverage <= 1.0:
            raise ConfigError("distill.stop_coverage", "must lie in (0, 1]")
        if self.blackbox.lr <= 0 or not self.blackbox.hidden:
            raise ConfigError("blackbox", "needs a positive lr and at least one hidden layer")
        t = self.transfer
        if not 0.0 < t.labeled_fraction <= 1.0:
            raise ConfigError("transfer.labeled_fraction", "must lie in (0, 1]")
        if not 0.0 < t.confidence < 1.0:
            raise ConfigError("transfer.confidence", "must lie in (0, 1)")
        if t.k_transfer < 1 or t.epochs < 1:
            raise ConfigError("transfer", "k_transfer and epochs must be at least 1")
        sw = self.shift.subgroup_weights
        if sw is not None and (len(sw) != len(self.datagen.rules) or any(w < 0 for w in sw)):
            raise ConfigError("shift.subgroup_weights", "one non-negative weight per subgroup")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` as the root of every section."""
        out = ExperimentConfig.from_json(self.to_json())
        out.seeds = [seed]
        for name in ("datagen", "blackbox", "projection", "distill", "transfer"):
            getattr(out, name).seed = seed
        return out

    def to_json(self) -> dict:
        out = {name: _as_json(getattr(self, name)) for name in self.SECTIONS}
        out.update(split=list(self.split), seeds=list(self.seeds), out=self.out)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config", "top level must be a JSON object")
        allowed = set(cls.SECTIONS) | {"split", "seeds", "out"}
        unknown = sorted(set(payload) - allowed)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        kwargs = {name: _section(sec, payload.get(name), name) for name, sec in cls.SECTIONS.items()}
        for key in ("split", "seeds", "out"):
            if key in payload:
                kwargs[key] = payload[key]
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None
        return cfg

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the defaults."""
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(str(p))
        try:
            payload = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        try:
            cfg = ExperimentConfig.from_json(payload)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None
    cfg.validate()
    return cfg
