"""Dataset schema, CSV ingestion, label derivation, scaling, synthetic data.

The feature table is a float64 matrix with an explicit per-cell observed
mask; missing cells hold NaN and the mask is the source of truth. Raw scores
are never imputed here — downstream fill policies decide what a model sees.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DerivationError,
    IntegrityError,
    ParseError,
    SchemaError,
)

NUMERIC = "numeric"
BINARY = "binary-categorical"

ROLE_FEATURE = "feature"
ROLE_LABEL_PRE = "label-source-pre"
ROLE_LABEL_POST = "label-source-post"
ROLE_GROUP = "group-id"
ROLE_SUBGROUP = "subgroup-tag"

DEFAULT_MISSING_TOKENS = ("", "NA")

# The sixteen model inputs, in canonical column order. The last eight are the
# fall reading assessments, which is also the block the headline missing-data
# rate is measured over.
ECRI_FEATURES = (
    ("Gender", BINARY, False),
    ("Tx", BINARY, False),
    ("Age1b", NUMERIC, False),
    ("Tier2_N", NUMERIC, False),
    ("grp_rate", NUMERIC, False),
    ("rcmistot", NUMERIC, False),
    ("gnrl_fid", NUMERIC, False),
    ("TKPctCrct", NUMERIC, False),
    ("NWFcls", NUMERIC, True),
    ("NWFwrc", NUMERIC, True),
    ("ORFwc", NUMERIC, True),
    ("SAwrS", NUMERIC, True),
    ("SAsrS", NUMERIC, True),
    ("SAtoS", NUMERIC, True),
    ("RMwidRS", NUMERIC, True),
    ("RMwdaRS", NUMERIC, True),
)

WORD_ID = "word_identification"
WORD_ATTACK = "word_attack"


@dataclass(frozen=True)
class Variable:
    """One dataset column. A column can serve several roles at once
    (the fall reading scores are both model inputs and label sources)."""

    name: str
    kind: str = NUMERIC
    roles: tuple[str, ...] = (ROLE_FEATURE,)
    assessment: bool = False

    def has_role(self, role: str) -> bool:
        return role in self.roles


@dataclass(frozen=True)
class DatasetSchema:
    """Declarative description of the columns a dataset must provide."""

    variables: tuple[Variable, ...]
    # task name -> (pre column, post column)
    tasks: dict[str, tuple[str, str]] = field(default_factory=dict)
    # subgroup tag name -> column it reads
    subgroups: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names in schema")
        by_name = {v.name: v for v in self.variables}
        for task, (pre, post) in self.tasks.items():
            if pre not in by_name or post not in by_name:
                raise SchemaError(f"task {task!r} references unknown columns {pre!r}/{post!r}")
            if not by_name[pre].has_role(ROLE_LABEL_PRE):
                raise SchemaError(f"{pre!r} lacks the {ROLE_LABEL_PRE} role required by {task!r}")
            if not by_name[post].has_role(ROLE_LABEL_POST):
                raise SchemaError(f"{post!r} lacks the {ROLE_LABEL_POST} role required by {task!r}")
        for tag, column in self.subgroups.items():
            if column not in by_name:
                raise SchemaError(f"subgroup {tag!r} references unknown column {column!r}")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.has_role(ROLE_FEATURE))

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)

    @property
    def assessment_features(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.has_role(ROLE_FEATURE) and v.assessment)

    @property
    def group_columns(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables if v.has_role(ROLE_GROUP))

    def variable(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise SchemaError(f"unknown column {name!r}")

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaError(f"{name!r} is not a feature column") from None

    def binary_feature_mask(self) -> np.ndarray:
        return np.array(
            [self.variable(n).kind == BINARY for n in self.feature_names], dtype=bool
        )

    def schema_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def drop_feature(self, name: str) -> "DatasetSchema":
        """Schema with one feature removed (label sources are untouched:
        a dropped pre-score column keeps its label role)."""
        if name not in self.feature_names:
            raise SchemaError(f"{name!r} is not a feature column")
        new_vars = []
        for v in self.variables:
            if v.name == name:
                roles = tuple(r for r in v.roles if r != ROLE_FEATURE)
                if not roles and name in self.subgroups.values():
                    roles = (ROLE_SUBGROUP,)
                if not roles:
                    continue
                v = replace(v, roles=roles)
            new_vars.append(v)
        return DatasetSchema(tuple(new_vars), dict(self.tasks), dict(self.subgroups))

    def to_dict(self) -> dict:
        return {
            "variables": [
                {"name": v.name, "kind": v.kind, "roles": list(v.roles), "assessment": v.assessment}
                for v in self.variables
            ],
            "tasks": {k: list(v) for k, v in self.tasks.items()},
            "subgroups": dict(self.subgroups),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DatasetSchema":
        variables = tuple(
            Variable(
                name=v["name"],
                kind=v.get("kind", NUMERIC),
                roles=tuple(v.get("roles", (ROLE_FEATURE,))),
                assessment=bool(v.get("assessment", False)),
            )
            for v in payload["variables"]
        )
        tasks = {k: (v[0], v[1]) for k, v in payload.get("tasks", {}).items()}
        return cls(variables, tasks, dict(payload.get("subgroups", {})))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


def ecri_schema() -> DatasetSchema:
    """The default 16-input schema with word-identification / word-attack tasks."""
    variables = []
    for name, kind, assessment in ECRI_FEATURES:
        roles = [ROLE_FEATURE]
        if name == "RMwidRS" or name == "RMwdaRS":
            roles.append(ROLE_LABEL_PRE)
        if name == "Gender":
            roles.append(ROLE_SUBGROUP)
        variables.append(Variable(name, kind, tuple(roles), assessment))
    variables += [
        Variable("RMwidRS_post", NUMERIC, (ROLE_LABEL_POST,), True),
        Variable("RMwdaRS_post", NUMERIC, (ROLE_LABEL_POST,), True),
        Variable("student_id", NUMERIC, (ROLE_GROUP,)),
        Variable("school_id", NUMERIC, (ROLE_GROUP,)),
        Variable("teacher_id", NUMERIC, (ROLE_GROUP,)),
        Variable("at_risk", BINARY, (ROLE_SUBGROUP,)),
        Variable("frl", NUMERIC, (ROLE_SUBGROUP,)),
    ]
    tasks = {WORD_ID: ("RMwidRS", "RMwidRS_post"), WORD_ATTACK: ("RMwdaRS", "RMwdaRS_post")}
    subgroups = {"gender": "Gender", "at_risk": "at_risk", "frl": "frl"}
    return DatasetSchema(tuple(variables), tasks, subgroups)


@dataclass
class FeatureMatrix:
    """Numeric feature table plus per-cell observed mask (NaN where missing)."""

    values: np.ndarray   # (n, d) float64, NaN at unobserved cells
    observed: np.ndarray  # (n, d) bool

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise IntegrityError(
                f"feature values {self.values.shape} vs mask {self.observed.shape}"
            )
        if np.isnan(self.values[self.observed]).any():
            raise IntegrityError("observed cells must not hold NaN")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class LabelSource:
    """Pre/post raw scores for one task, with their own observed flags."""

    pre: np.ndarray
    pre_observed: np.ndarray
    post: np.ndarray
    post_observed: np.ndarray


@dataclass
class Dataset:
    """Immutable-by-convention container for one cohort of students."""

    schema: DatasetSchema
    features: FeatureMatrix
    student_id: np.ndarray
    school_id: np.ndarray
    teacher_id: np.ndarray
    intervention: np.ndarray                    # Tx per row, in {0, 1}
    label_sources: dict[str, LabelSource]
    subgroup_tags: dict[str, np.ndarray]        # tag name -> string labels per row

    def __post_init__(self) -> None:
        n = self.features.n_rows
        for name, arr in (
            ("student_id", self.student_id),
            ("school_id", self.school_id),
            ("teacher_id", self.teacher_id),
            ("intervention", self.intervention),
        ):
            if len(arr) != n:
                raise IntegrityError(f"{name} has {len(arr)} entries for {n} rows")
        if not np.isin(self.intervention, (0, 1)).all():
            raise IntegrityError("Tx must be 0 or 1 for every row")
        if len(np.unique(self.student_id)) != n:
            raise IntegrityError("duplicate student id")
        for task, src in self.label_sources.items():
            for arr in (src.pre, src.pre_observed, src.post, src.post_observed):
                if len(arr) != n:
                    raise IntegrityError(f"label source {task!r} misaligned")
        for tag, arr in self.subgroup_tags.items():
            if len(arr) != n:
                raise IntegrityError(f"subgroup tag {tag!r} misaligned")

    @property
    def n_rows(self) -> int:
        return self.features.n_rows

    def group_ids(self, mode: str) -> np.ndarray:
        if mode == "school_split":
            return self.school_id
        if mode == "student_split":
            return self.student_id
        raise ConfigError(f"unknown split mode {mode!r}")

    def drop_feature(self, name: str) -> "Dataset":
        """Copy of this dataset without one feature column. Labels are
        unaffected because label sources are stored separately."""
        idx = self.schema.feature_index(name)
        keep = [i for i in range(self.features.n_features) if i != idx]
        return Dataset(
            schema=self.schema.drop_feature(name),
            features=FeatureMatrix(self.features.values[:, keep], self.features.observed[:, keep]),
            student_id=self.student_id,
            school_id=self.school_id,
            teacher_id=self.teacher_id,
            intervention=self.intervention,
            label_sources=self.label_sources,
            subgroup_tags=self.subgroup_tags,
        )


@dataclass
class LabeledView:
    """Rows eligible for supervised training: both label sources observed."""

    dataset: Dataset
    task: str
    rows: np.ndarray          # indices into the dataset
    labels: np.ndarray        # {0, 1}
    improvement: np.ndarray   # post - pre per included row
    threshold: float          # control-group mean improvement

    @property
    def n_rows(self) -> int:
        return len(self.rows)


def derive_labels(dataset: Dataset, task: str) -> LabeledView:
    """Binary progress labels against the control-group mean improvement.

    A row enters the view only if both its pre and post score are observed.
    The threshold is the mean improvement over control rows (Tx = 0) in the
    view; labels are 1 for improvements strictly above it, so ties go
    negative.
    """
    if task not in dataset.schema.tasks:
        raise SchemaError(f"unknown task {task!r}; schema defines {sorted(dataset.schema.tasks)}")
    src = dataset.label_sources[task]
    eligible = src.pre_observed & src.post_observed
    rows = np.flatnonzero(eligible)
    improvement = src.post[rows] - src.pre[rows]
    control = dataset.intervention[rows] == 0
    if not control.any():
        raise DerivationError(f"no control rows with observed pre/post for task {task!r}")
    threshold = float(improvement[control].mean())
    labels = (improvement > threshold).astype(np.int64)
    return LabeledView(dataset, task, rows, labels, improvement, threshold)


@dataclass
class Scaler:
    """Per-feature min-max transform fitted on a training split.

    Numeric features map to [0, 1] (constant features to 0.5); binary
    features pass through. Unseen values are clamped, so -1 can never be a
    legitimate post-scaling value and stays free for the missing sentinel.
    """

    lo: np.ndarray
    hi: np.ndarray
    binary: np.ndarray

    def transform(self, values: np.ndarray, observed: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        observed = np.atleast_2d(np.asarray(observed, dtype=bool))
        out = np.full_like(values, np.nan)
        span = self.hi - self.lo
        for j in range(values.shape[1]):
            col = observed[:, j]
            if not col.any():
                continue
            v = values[col, j]
            if self.binary[j]:
                out[col, j] = v
            elif span[j] == 0.0:
                out[col, j] = 0.5
            else:
                out[col, j] = np.clip((v - self.lo[j]) / span[j], 0.0, 1.0)
        return out


def fit_scaler(dataset: Dataset, train_rows: np.ndarray) -> Scaler:
    """Fit min/max statistics on the observed cells of the training rows only."""
    train_rows = np.asarray(train_rows)
    if train_rows.size == 0:
        raise ConfigError("fit_scaler needs a nonempty training split")
    values = dataset.features.values[train_rows]
    observed = dataset.features.observed[train_rows]
    binary = dataset.schema.binary_feature_mask()
    d = values.shape[1]
    lo = np.zeros(d)
    hi = np.ones(d)
    for j in range(d):
        col = observed[:, j]
        if binary[j] or not col.any():
            continue
        lo[j] = values[col, j].min()
        hi[j] = values[col, j].max()
    return Scaler(lo, hi, binary)


def apply_scaler(scaler: Scaler, dataset: Dataset) -> FeatureMatrix:
    """Scale the whole dataset; missing cells stay missing."""
    scaled = scaler.transform(dataset.features.values, dataset.features.observed)
    obs = dataset.features.observed
    if (scaled[obs] == -1.0).any():
        raise IntegrityError("scaled value collided with the -1 missing sentinel")
    return FeatureMatrix(scaled, obs.copy())


def compute_missing_rate(dataset: Dataset) -> float:
    """Fraction of unobserved cells over the assessment feature block."""
    names = dataset.schema.assessment_features
    if not names:
        return 0.0
    cols = [dataset.schema.feature_index(n) for n in names]
    block = dataset.features.observed[:, cols]
    return float(1.0 - block.mean())


# ---------------------------------------------------------------------------
# CSV interface
# ---------------------------------------------------------------------------

def load_csv(path, schema: DatasetSchema, missing_tokens=DEFAULT_MISSING_TOKENS) -> Dataset:
    """Read a UTF-8 comma-separated file against ``schema``.

    Header order is irrelevant, but every schema column must be present and
    no extra columns are allowed. Empty cells and ``missing_tokens`` map to
    observed=False.
    """
    path = Path(path)
    missing = set(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        expected = {v.name for v in schema.variables}
        seen = set(header)
        for name in sorted(seen - expected):
            raise SchemaError(f"unknown column {name!r}")
        for name in (v.name for v in schema.variables):
            if name not in seen:
                raise SchemaError(f"missing column {name!r}")
        col_of = {name: header.index(name) for name in seen}
        rows = list(reader)

    n = len(rows)
    columns: dict[str, np.ndarray] = {}
    observed: dict[str, np.ndarray] = {}
    for var in schema.variables:
        j = col_of[var.name]
        vals = np.full(n, np.nan)
        obs = np.zeros(n, dtype=bool)
        for i, row in enumerate(rows):
            if j >= len(row):
                raise ParseError(f"{path}: row {i + 2} has too few cells")
            token = row[j].strip()
            if token in missing:
                continue
            try:
                value = float(token)
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric token {token!r} at row {i + 2}, column {var.name!r}"
                ) from None
            if var.kind == BINARY and value not in (0.0, 1.0):
                raise ParseError(
                    f"{path}: binary column {var.name!r} has value {token!r} at row {i + 2}"
                )
            vals[i] = value
            obs[i] = True
        columns[var.name] = vals
        observed[var.name] = obs

    return _assemble_dataset(schema, columns, observed)


def _require_full(name: str, observed: np.ndarray) -> None:
    if not observed.all():
        i = int(np.flatnonzero(~observed)[0])
        raise IntegrityError(f"column {name!r} must be fully observed (row {i + 2} is missing)")


def _assemble_dataset(schema, columns, observed) -> Dataset:
    feat_names = schema.feature_names
    values = np.column_stack([columns[n] for n in feat_names])
    obs = np.column_stack([observed[n] for n in feat_names])

    for gid in ("student_id", "school_id", "teacher_id"):
        if gid not in columns:
            raise SchemaError(f"missing column {gid!r}")
        _require_full(gid, observed[gid])
    if "Tx" not in columns:
        raise SchemaError("missing column 'Tx'")
    _require_full("Tx", observed["Tx"])

    label_sources = {}
    for task, (pre, post) in schema.tasks.items():
        label_sources[task] = LabelSource(
            pre=columns[pre].copy(),
            pre_observed=observed[pre].copy(),
            post=columns[post].copy(),
            post_observed=observed[post].copy(),
        )

    tags = {}
    for tag, column in schema.subgroups.items():
        vals = columns[column]
        obs_col = observed[column]
        out = np.array(
            [_format_tag(v) if o else "missing" for v, o in zip(vals, obs_col)], dtype=object
        )
        tags[tag] = out

    return Dataset(
        schema=schema,
        features=FeatureMatrix(values, obs),
        student_id=columns["student_id"].astype(np.int64),
        school_id=columns["school_id"].astype(np.int64),
        teacher_id=columns["teacher_id"].astype(np.int64),
        intervention=columns["Tx"].astype(np.int64),
        label_sources=label_sources,
        subgroup_tags=tags,
    )


def _format_tag(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _format_cell(value: float, observed: bool) -> str:
    if not observed:
        return ""
    return repr(float(value))


def write_csv(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_csv`; round-trips values exactly via repr."""
    schema = dataset.schema
    names = [v.name for v in schema.variables]
    n = dataset.n_rows

    columns: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for j, name in enumerate(schema.feature_names):
        columns[name] = (dataset.features.values[:, j], dataset.features.observed[:, j])
    ones = np.ones(n, dtype=bool)
    columns["student_id"] = (dataset.student_id.astype(np.float64), ones)
    columns["school_id"] = (dataset.school_id.astype(np.float64), ones)
    columns["teacher_id"] = (dataset.teacher_id.astype(np.float64), ones)
    for task, (pre, post) in schema.tasks.items():
        src = dataset.label_sources[task]
        columns.setdefault(pre, (src.pre, src.pre_observed))
        columns[post] = (src.post, src.post_observed)
    for tag, column in schema.subgroups.items():
        if column not in columns:
            vals = np.array([float(v) if v != "missing" else np.nan
                             for v in dataset.subgroup_tags[tag]])
            columns[column] = (vals, ~np.isnan(vals))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(n):
            writer.writerow(
                [_format_cell(columns[name][0][i], bool(columns[name][1][i])) for name in names]
            )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale stand-in for the 6,916-student cohort.

    ``missing_rate`` is the target rate over assessment cells; the generator
    hits it exactly (up to rounding) by drawing a fixed number of missing
    cells. MAR mode makes low-ability students more likely to lose cells.
    """

    n_students: int = 1000
    n_schools: int = 10
    latent_dim: int = 3
    missing_rate: float = 0.3048
    missing_mechanism: str = "MAR"
    intervention_effect: float = 1.5
    seed: int = 0
    class_size: int = 25

    def validate(self) -> None:
        if self.n_schools < 2:
            raise ConfigError("need at least 2 schools")
        if not (0.0 <= self.missing_rate < 1.0):
            raise ConfigError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.n_students < self.n_schools:
            raise ConfigError("need at least one student per school")
        if self.missing_mechanism not in ("MCAR", "MAR"):
            raise ConfigError(f"unknown missing mechanism {self.missing_mechanism!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")


# Raw-score anchors for the eight fall assessments: (intercept, scale,
# loading on general ability). Chosen so scores stay nonnegative and
# strongly correlated through the shared latent.
_ASSESSMENT_PARAMS = {
    "NWFcls": (42.0, 14.0, 0.90),
    "NWFwrc": (16.0, 7.0, 0.85),
    "ORFwc": (32.0, 18.0, 0.80),
    "SAwrS": (560.0, 35.0, 0.75),
    "SAsrS": (540.0, 30.0, 0.70),
    "SAtoS": (550.0, 32.0, 0.85),
    "RMwidRS": (34.0, 12.0, 0.80),
    "RMwdaRS": (14.0, 6.0, 0.75),
}
_ASSESSMENT_NOISE = 0.42
# Growth model: improvement depends mostly on the task-specific skill (whose
# only feature carrier is that task's fall score), plus general ability, a
# dash of teacher quality, and the intervention. Treated students get a
# stronger signal coupling and less noise, so their outcomes are more
# predictable from the inputs.
_GROWTH_BASE = 6.0
_GROWTH_GAIN = 2.2
_GROWTH_GENERAL = 0.35
_GROWTH_SKILL = 1.0
_GROWTH_TEACHER = 0.5
_GROWTH_NOISE = 2.2
_TX_SIGNAL_AMP = 0.45
_TX_NOISE_SHRINK = 0.35
# A per-student adversity factor (family instability, attendance trouble)
# drives both assessment absences and weaker growth. No feature carries it,
# so the missingness pattern itself is evidence a model can use.
_ADVERSITY_GROWTH = 2.0
_ADVERSITY_MISS = 1.3


def _partition_sizes(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    weights = rng.lognormal(mean=0.0, sigma=0.25, size=parts)
    raw = weights / weights.sum() * total
    sizes = np.floor(raw).astype(int)
    sizes = np.maximum(sizes, 1)
    while sizes.sum() > total:
        sizes[np.argmax(sizes)] -= 1
    while sizes.sum() < total:
        sizes[np.argmin(sizes)] += 1
    return sizes


def _weighted_exact_mask(shape, n_missing: int, weights: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Boolean mask with exactly ``n_missing`` True cells, drawn without
    replacement with per-cell weights (uniform weights give MCAR)."""
    n_cells = int(np.prod(shape))
    flat_w = np.broadcast_to(weights, shape).reshape(-1)
    keys = rng.random(n_cells) ** (1.0 / flat_w)
    missing = np.zeros(n_cells, dtype=bool)
    if n_missing > 0:
        missing[np.argsort(keys)[-n_missing:]] = True
    return missing.reshape(shape)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Latent-factor cohort generator; deterministic under ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5D5]))
    schema = ecri_schema()
    n = config.n_students
    n_schools = config.n_schools

    school_sizes = _partition_sizes(n, n_schools, rng)
    school_of = np.repeat(np.arange(n_schools), school_sizes)

    # Clustered randomization: whole schools are control or intervention.
    school_order = rng.permutation(n_schools)
    treated_schools = np.zeros(n_schools, dtype=bool)
    treated_schools[school_order[: (n_schools + 1) // 2]] = True
    tx = treated_schools[school_of].astype(np.int64)

    # Latent abilities: shared school shift + individual variation.
    # Component 0 is general ability; 1 and 2 are word-identification- and
    # word-attack-specific skills.
    dim = max(config.latent_dim, 3)
    school_effect = rng.normal(0.0, 0.3, size=(n_schools, dim))
    z = school_effect[school_of] + rng.normal(0.0, 1.0, size=(n, dim))
    general, skill_wid, skill_wda = z[:, 0], z[:, 1], z[:, 2]

    # Teachers: fixed-size classes within each school.
    teacher_id = np.zeros(n, dtype=np.int64)
    next_teacher = 0
    for s in range(n_schools):
        members = np.flatnonzero(school_of == s)
        n_classes = max(1, math.ceil(len(members) / config.class_size))
        assignment = rng.permutation(len(members)) % n_classes
        teacher_id[members] = next_teacher + assignment
        next_teacher += n_classes
    n_teachers = next_teacher
    teacher_quality = rng.normal(0.0, 1.0, size=n_teachers)
    q = teacher_quality[teacher_id]

    at_risk = (general < -0.524).astype(np.int64)  # ~30th percentile of N(0,1)
    tier2_n = np.bincount(teacher_id, weights=at_risk, minlength=n_teachers)[teacher_id]
    adversity = rng.normal(0.0, 1.0, size=n)

    feats: dict[str, np.ndarray] = {}
    feats["Gender"] = rng.integers(0, 2, size=n).astype(np.float64)
    feats["Tx"] = tx.astype(np.float64)
    feats["Age1b"] = np.clip(rng.normal(6.5, 0.29, size=n), 5.5, 8.0)  # pure noise input
    feats["Tier2_N"] = tier2_n.astype(np.float64)
    feats["grp_rate"] = np.clip(60.0 + 15.0 * q + 10.0 * rng.normal(size=n), 0.0, 100.0)
    feats["rcmistot"] = np.maximum(50.0 + 10.0 * q + 5.0 * rng.normal(size=n), 0.0)
    feats["gnrl_fid"] = np.clip(80.0 + 10.0 * q + 8.0 * rng.normal(size=n), 0.0, 100.0)
    feats["TKPctCrct"] = np.clip(70.0 + 12.0 * q + 6.0 * rng.normal(size=n), 0.0, 100.0)
    for name, (loc, scale, loading) in _ASSESSMENT_PARAMS.items():
        skill = np.zeros(n)
        if name == "RMwidRS":
            skill = 0.80 * skill_wid
        elif name == "RMwdaRS":
            skill = 0.80 * skill_wda
        signal = loading * general + skill + _ASSESSMENT_NOISE * rng.normal(size=n)
        feats[name] = np.maximum(loc + scale * signal, 0.0)

    values = np.column_stack([feats[name] for name in schema.feature_names])
    observed = np.ones_like(values, dtype=bool)

    # Improvements; intervention adds a level shift plus tighter coupling.
    posts = {}
    for task, pre_name, skill in (
        (WORD_ID, "RMwidRS", skill_wid),
        (WORD_ATTACK, "RMwdaRS", skill_wda),
    ):
        signal = _GROWTH_GENERAL * general + _GROWTH_SKILL * skill
        gain = _GROWTH_GAIN * (1.0 + _TX_SIGNAL_AMP * tx)
        noise = _GROWTH_NOISE * (1.0 - _TX_NOISE_SHRINK * tx)
        growth = (
            _GROWTH_BASE
            + gain * signal
            + _GROWTH_TEACHER * q
            - _ADVERSITY_GROWTH * adversity
            + config.intervention_effect * tx
            + noise * rng.normal(size=n)
        )
        posts[task] = np.maximum(feats[pre_name] + growth, 0.0)

    # Missingness over the assessment block and the two post columns.
    assess_cols = [schema.feature_index(name) for name in schema.assessment_features]
    if config.missing_mechanism == "MAR":
        # Absences and transfers skew low-performing and high-adversity, so
        # a missing cell is itself evidence about the student.
        ability = 0.9 * general + 0.7 * skill_wid + 0.7 * skill_wda
        std = (ability - ability.mean()) / max(ability.std(), 1e-9)
        weights = np.exp(-1.1 * std + _ADVERSITY_MISS * adversity)
    else:
        weights = np.ones(n)
    block_shape = (n, len(assess_cols))
    n_missing = round(config.missing_rate * n * len(assess_cols))
    block_missing = _weighted_exact_mask(block_shape, n_missing, weights[:, None], rng)
    for k, j in enumerate(assess_cols):
        col_missing = block_missing[:, k]
        observed[col_missing, j] = False
        values[col_missing, j] = np.nan

    label_sources = {}
    for task, (pre_name, _) in schema.tasks.items():
        j = schema.feature_index(pre_name)
        post_missing = _weighted_exact_mask(
            (n, 1), round(config.missing_rate * n), weights[:, None], rng
        )[:, 0]
        post_vals = posts[task].copy()
        post_vals[post_missing] = np.nan
        label_sources[task] = LabelSource(
            pre=np.where(observed[:, j], values[:, j], np.nan),
            pre_observed=observed[:, j].copy(),
            post=post_vals,
            post_observed=~post_missing,
        )

    frl_high_schools = rng.permutation(n_schools) < n_schools // 2
    tags = {
        "gender": np.array([str(int(g)) for g in feats["Gender"]], dtype=object),
        "at_risk": np.array([str(int(a)) for a in at_risk], dtype=object),
        "frl": np.array(["1" if frl_high_schools[s] else "0" for s in school_of], dtype=object),
    }

    return Dataset(
        schema=schema,
        features=FeatureMatrix(values, observed),
        student_id=np.arange(n, dtype=np.int64),
        school_id=school_of.astype(np.int64),
        teacher_id=teacher_id,
        intervention=tx,
        label_sources=label_sources,
        subgroup_tags=tags,
    )
