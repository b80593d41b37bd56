"""Synthetic concept-bottleneck data with planted rules, plus CSV ingestion.

Rows are generated concepts-first: a latent subgroup picks a Bernoulli
concept profile and a planted rule, the rule labels the row, and the input
vector ``x`` is a noisy linear embedding of the (possibly corrupted)
concepts. Concept noise therefore controls how well concepts can be read
back from ``x``, while the recorded concept annotations stay clean.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .logic import Formula

__all__ = [
    "ConfigError",
    "DegenerateConfigError",
    "ConceptTriplet",
    "SynthConfig",
    "ShiftConfig",
    "generate_synthetic",
    "apply_domain_shift",
    "random_shift",
    "split",
    "class_weights",
    "load_csv",
    "save_csv",
    "relabel",
]


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class DegenerateConfigError(ConfigError):
    pass


@dataclass
class ConceptTriplet:
    X: np.ndarray
    C: np.ndarray
    Y: np.ndarray
    groups: np.ndarray
    subgroups: np.ndarray | None = None
    split: str | None = None
    concept_names: list[str] | None = None
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.C = np.asarray(self.C)
        self.Y = np.asarray(self.Y).astype(int)
        self.groups = np.asarray(self.groups).astype(int)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.C.ndim != 2:
            raise ValueError("X and C must be 2-D")
        for name, arr in (("C", self.C), ("Y", self.Y), ("groups", self.groups)):
            if arr.shape[0] != n:
                raise ValueError(f"row count mismatch: X has {n}, {name} has {arr.shape[0]}")
        if self.subgroups is not None:
            self.subgroups = np.asarray(self.subgroups).astype(int)
            if self.subgroups.shape[0] != n:
                raise ValueError("row count mismatch for subgroups")
        if not np.isin(self.Y, (0, 1)).all():
            raise ValueError("labels must be binary")
        if np.issubdtype(self.C.dtype, np.integer) or self.C.dtype == bool:
            if not np.isin(self.C, (0, 1)).all():
                raise ValueError("binary concepts must be 0/1")
            self.C = self.C.astype(int)
        if self.concept_names is None:
            self.concept_names = [f"c_{j}" for j in range(self.C.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n_concepts(self) -> int:
        return self.C.shape[1]

    def subset(self, idx, split: str | None = None) -> "ConceptTriplet":
        idx = np.asarray(idx)
        return ConceptTriplet(
            X=self.X[idx], C=self.C[idx], Y=self.Y[idx], groups=self.groups[idx],
            subgroups=None if self.subgroups is None else self.subgroups[idx],
            split=split if split is not None else self.split,
            concept_names=list(self.concept_names),
            extras={k: v[idx] for k, v in self.extras.items()},
            meta=self.meta,
        )

    def replace(self, **changes) -> "ConceptTriplet":
        return dataclasses.replace(self, **changes)

    def equals(self, other: "ConceptTriplet") -> bool:
        same_sub = (self.subgroups is None and other.subgroups is None) or (
            self.subgroups is not None and other.subgroups is not None
            and np.array_equal(self.subgroups, other.subgroups))
        return (np.array_equal(self.X, other.X) and np.array_equal(self.C, other.C)
                and np.array_equal(self.Y, other.Y) and np.array_equal(self.groups, other.groups)
                and same_sub and list(self.concept_names) == list(other.concept_names))


def _default_rules() -> list[Formula]:
    return [Formula.parse("c_0 ∧ c_1"), Formula.parse("c_2 ∧ c_3")]


@dataclass
class SynthConfig:
    """Generator settings. ``rules[s]`` labels rows of latent subgroup ``s``.

    ``profiles`` (subgroups x concepts Bernoulli rates) defaults to 0.5
    everywhere except one marker concept per subgroup (the first indices not
    used by any rule), set to ``marker_strength`` for its own subgroup and
    ``1 - marker_strength`` for the others, so routing on concepts can tell
    subgroups apart. ``subgroup_noise`` is the isotropic input-noise scale
    per subgroup, which sets how hard each subgroup is for a model reading x.
    """

    n: int = 10_000
    d: int = 32
    n_concepts: int = 12
    rules: list[Formula] = field(default_factory=_default_rules)
    mixing: list[float] = field(default_factory=lambda: [0.5, 0.5])
    prevalence: float = 0.2
    concept_noise: float = 0.05
    label_noise: float = 0.0
    profiles: list[list[float]] | None = None
    marker_strength: float = 0.9
    subgroup_noise: list[float] = field(default_factory=lambda: [0.35, 0.8])
    nuisance_scale: float = 1.0
    n_groups: int | None = None
    unobserved_concepts: list[int] = field(default_factory=list)
    seed: int = 0
    # rows drawn from another stream over the same embedding (fresh samples of one world)
    sample_seed: int | None = None

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError("n", "must be positive")
        if self.d < 1:
            raise ConfigError("d", "must be positive")
        if self.n_concepts < 1:
            raise ConfigError("n_concepts", "must be positive")
        k = len(self.rules)
        if k < 1:
            raise ConfigError("rules", "need at least one planted rule")
        if len(self.mixing) != k:
            raise ConfigError("mixing", f"expected {k} weights, got {len(self.mixing)}")
        if any(w < 0 for w in self.mixing) or abs(sum(self.mixing) - 1.0) > 1e-9:
            raise ConfigError("mixing", "weights must be non-negative and sum to 1")
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError("prevalence", f"must lie in (0, 1), got {self.prevalence}")
        if not 0.0 <= self.concept_noise < 0.5:
            raise ConfigError("concept_noise", "must lie in [0, 0.5)")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise", "must lie in [0, 0.5)")
        if len(self.subgroup_noise) != k:
            raise ConfigError("subgroup_noise", f"expected {k} values")
        for r in self.rules:
            if any(i >= self.n_concepts or i < 0 for i in r.concepts()):
                raise ConfigError("rules", f"rule {r.to_text()} references a missing concept")
        if self.profiles is not None:
            P = np.asarray(self.profiles, dtype=float)
            if P.shape != (k, self.n_concepts) or ((P < 0) | (P > 1)).any():
                raise ConfigError("profiles", "must be subgroups x concepts in [0, 1]")

    def concept_profiles(self) -> np.ndarray:
        if self.profiles is not None:
            return np.asarray(self.profiles, dtype=float)
        k = len(self.rules)
        P = np.full((k, self.n_concepts), 0.5)
        used = set().union(*(r.concepts() for r in self.rules))
        free = [j for j in range(self.n_concepts) if j not in used]
        if k > 1:
            for s, j in zip(range(k), free):
                P[:, j] = 1.0 - self.marker_strength
                P[s, j] = self.marker_strength
        return P

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["rules"] = [r.to_text() for r in self.rules]
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "SynthConfig":
        payload = dict(payload)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        if "rules" in payload:
            payload["rules"] = [r if isinstance(r, Formula) else Formula.parse(r)
                                for r in payload["rules"]]
        return cls(**payload)


@dataclass
class ShiftConfig:
    """Target-domain shift: ``x -> A x + b``, optional subgroup reweighting,
    and extra concept corruption (``concept_noise_delta``)."""

    A: list[list[float]] | None = None
    b: list[float] | None = None
    concept_noise_delta: float = 0.0
    subgroup_weights: list[float] | None = None
    seed: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "ShiftConfig":
        return cls(**payload)


def relabel(C: np.ndarray, subgroups: np.ndarray, rules: list[Formula]) -> np.ndarray:
    """Evaluate each row's planted rule on its concepts."""
    y = np.zeros(C.shape[0], dtype=int)
    for s, rule in enumerate(rules):
        rows = subgroups == s
        if rows.any():
            y[rows] = rule.evaluate(C[rows]).astype(int)
    return y


def generate_synthetic(cfg: SynthConfig) -> ConceptTriplet:
    cfg.validate()
    world = np.random.default_rng([cfg.seed, 104729])
    rng = np.random.default_rng(cfg.seed if cfg.sample_seed is None else [cfg.seed, cfg.sample_seed])
    n, n_c, d = cfg.n, cfg.n_concepts, cfg.d
    P = cfg.concept_profiles()
    k = len(cfg.rules)

    # satisfiability of each rule under its profile (labels are drawn first,
    # concepts are then sampled conditionally on the label)
    probe = np.random.default_rng([cfg.seed, 7919])
    for s, rule in enumerate(cfg.rules):
        if cfg.mixing[s] == 0:
            continue
        rate = rule.evaluate(probe.random((4096, n_c)) < P[s]).mean()
        if rate == 0.0 or rate == 1.0:
            state = "never" if rate == 0.0 else "always"
            raise DegenerateConfigError(
                "rules", f"rule for subgroup {s} ({rule.to_text()}) is {state} satisfied "
                         f"under its concept profile; prevalence {cfg.prevalence} unreachable")

    sub = rng.choice(k, size=n, p=np.asarray(cfg.mixing, dtype=float))
    y_clean = (rng.random(n) < cfg.prevalence).astype(int)
    C = np.zeros((n, n_c), dtype=int)
    pending = np.arange(n)
    for _ in range(2000):
        if pending.size == 0:
            break
        draw = (rng.random((pending.size, n_c)) < P[sub[pending]]).astype(int)
        ok = relabel(draw, sub[pending], cfg.rules) == y_clean[pending]
        C[pending[ok]] = draw[ok]
        pending = pending[~ok]
    if pending.size:
        raise DegenerateConfigError("prevalence", "could not sample concepts matching the labels")

    flips = rng.random((n, n_c)) < cfg.concept_noise
    C_enc = C ^ flips.astype(int)

    E = world.normal(size=(n_c, d))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    if cfg.unobserved_concepts:
        E[list(cfg.unobserved_concepts)] = 0.0
    U = world.normal(size=(k, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    noise = np.asarray(cfg.subgroup_noise, dtype=float)[sub]
    X = ((2 * C_enc - 1) @ E
         + (cfg.nuisance_scale * rng.normal(size=n))[:, None] * U[sub]
         + noise[:, None] * rng.normal(size=(n, d)))

    Y = y_clean.copy()
    if cfg.label_noise > 0:
        Y ^= (rng.random(n) < cfg.label_noise).astype(int)
    if Y.min() == Y.max():
        raise DegenerateConfigError("prevalence", "generated labels contain a single class")

    n_groups = cfg.n_groups or max(1, n // 5)
    groups = rng.integers(0, n_groups, size=n)
    return ConceptTriplet(
        X=X, C=C, Y=Y, groups=groups, subgroups=sub,
        extras={"C_encoded": C_enc},
        meta={"embedding": E, "rules": list(cfg.rules)},
    )


def random_shift(d: int, strength: float = 0.5, seed: int = 0,
                 subgroup_weights: list[float] | None = None) -> ShiftConfig:
    """A well-conditioned random affine shift: ``A = I + strength * G / sqrt(d)``."""
    rng = np.random.default_rng(seed)
    A = np.eye(d) + strength * rng.normal(size=(d, d)) / np.sqrt(d)
    b = strength * rng.normal(size=d) / np.sqrt(d)
    return ShiftConfig(A=A.tolist(), b=b.tolist(), subgroup_weights=subgroup_weights, seed=seed)


def apply_domain_shift(data: ConceptTriplet, shift: ShiftConfig) -> ConceptTriplet:
    rng = np.random.default_rng(shift.seed)
    d = data.d
    A = np.eye(d) if shift.A is None else np.asarray(shift.A, dtype=float)
    b = np.zeros(d) if shift.b is None else np.asarray(shift.b, dtype=float)
    if A.shape != (d, d) or b.shape != (d,):
        raise ConfigError("A", f"shift expects A of shape {(d, d)} and b of shape {(d,)}")
    if np.linalg.matrix_rank(A) < d or np.linalg.cond(A) > 1e12:
        raise ConfigError("A", "shift matrix is not invertible")

    out = data
    if shift.subgroup_weights is not None:
        if data.subgroups is None:
            raise ConfigError("subgroup_weights", "data carries no subgroup labels")
        w_new = np.asarray(shift.subgroup_weights, dtype=float)
        if (w_new < 0).any() or abs(w_new.sum() - 1.0) > 1e-9:
            raise ConfigError("subgroup_weights", "must be non-negative and sum to 1")
        freq = np.bincount(data.subgroups, minlength=w_new.size) / data.n
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(freq > 0, w_new / freq, 0.0)
        p = ratio[data.subgroups]
        idx = rng.choice(data.n, size=data.n, replace=True, p=p / p.sum())
        out = out.subset(np.sort(idx))

    X = out.X.copy()
    extras = dict(out.extras)
    if shift.concept_noise_delta > 0:
        if "C_encoded" not in extras or "embedding" not in out.meta:
            raise ConfigError("concept_noise_delta", "data lacks the concept embedding")
        E = out.meta["embedding"]
        enc = extras["C_encoded"].copy()
        flip = rng.random(enc.shape) < shift.concept_noise_delta
        # moving an encoded concept from +1 to -1 subtracts 2 E_j (and vice versa)
        X -= (2 * (2 * enc - 1) * flip) @ E
        enc ^= flip.astype(int)
        extras["C_encoded"] = enc
    X = X @ A.T + b

    prevalence = out.Y.mean()
    if not 0.0 < prevalence < 1.0:
        raise ConfigError("subgroup_weights", "shifted data has a single class")
    return out.replace(X=X, extras=extras)


def split(data: ConceptTriplet, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Group-disjoint split; each part gets its share of groups (largest remainder)."""
    fractions = np.asarray(fractions, dtype=float)
    if (fractions < 0).any() or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError("fractions", "must be non-negative and sum to 1")
    uniq = np.unique(data.groups)
    if uniq.size < len(fractions):
        raise ConfigError("groups", f"{uniq.size} groups cannot fill {len(fractions)} disjoint splits")
    rng = np.random.default_rng(seed)
    order = rng.permutation(uniq)
    raw = fractions * uniq.size
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: uniq.size - counts.sum()]:
        counts[i] += 1
    # every non-empty share gets at least one group
    for i in np.flatnonzero((counts == 0) & (fractions > 0)):
        j = int(np.argmax(counts))
        counts[j] -= 1
        counts[i] += 1
    bounds = np.concatenate([[0], np.cumsum(counts)])
    names = ["train", "val", "test"] if len(fractions) == 3 else [f"part{i}" for i in range(len(fractions))]
    parts = []
    for i, name in enumerate(names):
        chosen = order[bounds[i]:bounds[i + 1]]
        rows = np.flatnonzero(np.isin(data.groups, chosen))
        parts.append(data.subset(rows, split=name))
    return tuple(parts)


def class_weights(data: ConceptTriplet | np.ndarray, n_classes: int = 2) -> np.ndarray:
    """Per-class fractions ``N_m / N``."""
    Y = data.Y if isinstance(data, ConceptTriplet) else np.asarray(data).astype(int)
    if Y.size == 0:
        raise ValueError("empty data")
    return np.bincount(Y, minlength=n_classes) / Y.size


# CSV -------------------------------------------------------------------------

def save_csv(data: ConceptTriplet, path: str | Path) -> None:
    header = ([f"x_{j}" for j in range(data.d)] + [f"c_{j}" for j in range(data.n_concepts)]
              + ["y", "group"] + (["subgroup"] if data.subgroups is not None else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.X[i]] + [str(int(v)) for v in data.C[i]]
            row += [str(int(data.Y[i])), str(int(data.groups[i]))]
            if data.subgroups is not None:
                row.append(str(int(data.subgroups[i])))
            w.writerow(row)


def _binary(value: str, row: int, col: str) -> int:
    try:
        v = float(value)
    except ValueError:
        raise ValueError(f"row {row}, column {col}: cannot parse {value!r}") from None
    if v not in (0.0, 1.0):
        raise ValueError(f"row {row}, column {col}: non-binary value {value!r}")
    return int(v)


def load_csv(path: str | Path, schema: dict | None = None) -> ConceptTriplet:
    """Read a triplet CSV with columns ``x_*``, ``c_*``, ``y``, ``group``.

    ``schema`` may map ``inputs``/``concepts`` to explicit column lists and
    ``label``/``group`` to column names; otherwise columns are found by prefix.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    schema = schema or {}
    x_cols = schema.get("inputs") or [h for h in header if h.startswith("x_")]
    c_cols = schema.get("concepts") or [h for h in header if h.startswith("c_")]
    y_col, g_col = schema.get("label", "y"), schema.get("group", "group")
    for col in [*x_cols, *c_cols, y_col, g_col]:
        if col not in header:
            raise ValueError(f"{path}: missing column {col!r}")
    if not x_cols or not c_cols:
        raise ValueError(f"{path}: need at least one input and one concept column")
    pos = {h: i for i, h in enumerate(header)}
    has_sub = "subgroup" in pos
    X, C, Y, G, S = [], [], [], [], []
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"row {r}: expected {len(header)} fields, got {len(row)}")
        try:
            X.append([float(row[pos[c]]) for c in x_cols])
            G.append(int(row[pos[g_col]]))
            if has_sub:
                S.append(int(row[pos["subgroup"]]))
        except ValueError:
            raise ValueError(f"row {r}: parse failure") from None
        C.append([_binary(row[pos[c]], r, c) for c in c_cols])
        Y.append(_binary(row[pos[y_col]], r, y_col))
    d, n_c = len(x_cols), len(c_cols)
    return ConceptTriplet(
        X=np.asarray(X, dtype=float).reshape(-1, d),
        C=np.asarray(C, dtype=int).reshape(-1, n_c),
        Y=np.asarray(Y, dtype=int), groups=np.asarray(G, dtype=int),
        subgroups=np.asarray(S, dtype=int) if has_sub else None,
        concept_names=list(c_cols),
    )


def load_config_json(path: str | Path, cls):
    return cls.from_json(json.loads(Path(path).read_text()))
