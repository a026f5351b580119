"""End-to-end orchestration: benchmark, loss ablation, feature importance.

Everything here is a pure function of (config, seed, input files). All
randomness is derived from the master seed through named sub-streams, so a
rerun with the same config produces byte-identical artifacts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    DatasetSchema,
    SynthConfig,
    WORD_ATTACK,
    WORD_ID,
    derive_labels,
    ecri_schema,
    fit_scaler,
    generate_synthetic,
    load_csv,
)
from .errors import ConfigError, DegenerateTestError, MaskMlpError
from .evaluation import (
    EvalReport,
    FoldPlan,
    SCHOOL_SPLIT,
    STUDENT_SPLIT,
    evaluate,
    make_folds,
    paired_t_test,
)
from .missing import CORRUPT_MARGINAL, CORRUPT_SENTINEL, MaskSpec, fit_marginals
from .models import (
    Classifier,
    LOGREG,
    MASKMLP,
    MLP_INDICATOR,
    MLP_MEAN,
    MLP_ZEROS,
    MODEL_KINDS,
    TrainConfig,
    export_embeddings,
    finetune,
    save_classifier,
    train_baseline,
)
from .pretrain import PretextConfig, init_encoder, pretrain
from .seeds import child_seed
from .serialize import dumps_canonical, fmt_metric, json_safe

MODEL_ORDINAL = {MASKMLP: 0, MLP_ZEROS: 1, MLP_MEAN: 2, MLP_INDICATOR: 3, LOGREG: 4}

SPLIT_NAMES = {"school": SCHOOL_SPLIT, "student": STUDENT_SPLIT}

TASK_NAMES = {
    "word_identification": WORD_ID,
    "word-id": WORD_ID,
    "word_attack": WORD_ATTACK,
    "word-attack": WORD_ATTACK,
}

# The eleven pre-training loss configurations compared in the ablation:
# each loss alone, all pairs involving cosine or mse plus the remaining
# pair, and all four together.
ABLATION_LOSS_SETS = (
    ("cosine",),
    ("mse",),
    ("contrastive",),
    ("triplet",),
    ("cosine", "mse"),
    ("cosine", "contrastive"),
    ("cosine", "triplet"),
    ("mse", "contrastive"),
    ("mse", "triplet"),
    ("contrastive", "triplet"),
    ("cosine", "mse", "contrastive", "triplet"),
)


@dataclass
class RunConfig:
    """Fully resolved run description; see README for the JSON layout."""

    seed: int
    synth: SynthConfig | None = None
    csv_path: str | None = None
    schema_path: str | None = None
    task: str = WORD_ID
    split: str = "school"
    k: int = 5
    models: tuple[str, ...] = (MASKMLP, MLP_INDICATOR)
    mask_rate: float = 0.25
    corruption: str = CORRUPT_SENTINEL
    pretext: PretextConfig = field(default_factory=PretextConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str | None = None

    def __post_init__(self) -> None:
        if self.seed is None:
            raise ConfigError("a master seed is mandatory")
        if self.split not in SPLIT_NAMES:
            raise ConfigError(f"split must be one of {sorted(SPLIT_NAMES)}")
        if self.task in TASK_NAMES:
            self.task = TASK_NAMES[self.task]
        if self.task not in (WORD_ID, WORD_ATTACK):
            raise ConfigError(f"unknown task {self.task!r}")
        self.models = tuple(self.models)
        if not self.models:
            raise ConfigError("at least one model kind is required")
        for kind in self.models:
            if kind not in MODEL_KINDS:
                raise ConfigError(f"unknown model kind {kind!r}")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not (0.0 <= self.mask_rate < 1.0):
            raise ConfigError("mask rate must be in [0, 1)")
        if self.corruption not in (CORRUPT_SENTINEL, CORRUPT_MARGINAL):
            raise ConfigError(f"unknown corruption {self.corruption!r}")
        if self.csv_path is None and self.synth is None:
            raise ConfigError("config needs either a csv path or a synth block")

    @property
    def mode(self) -> str:
        return SPLIT_NAMES[self.split]

    def to_dict(self) -> dict:
        data: dict = {}
        if self.csv_path is not None:
            data["csv"] = str(self.csv_path)
            if self.schema_path is not None:
                data["schema"] = str(self.schema_path)
        if self.synth is not None:
            data["synth"] = {
                "n_students": self.synth.n_students,
                "n_schools": self.synth.n_schools,
                "latent_dim": self.synth.latent_dim,
                "missing_rate": self.synth.missing_rate,
                "missing_mechanism": self.synth.missing_mechanism,
                "intervention_effect": self.synth.intervention_effect,
                "seed": self.synth.seed,
                "class_size": self.synth.class_size,
            }
        return {
            "seed": self.seed,
            "data": data,
            "task": self.task,
            "split": self.split,
            "k": self.k,
            "models": list(self.models),
            "mask": {"rate": self.mask_rate, "corruption": self.corruption},
            "pretext": {
                "losses": list(self.pretext.losses),
                "margin": self.pretext.margin,
                "epochs": self.pretext.epochs,
                "learning_rate": self.pretext.learning_rate,
                "batch_size": self.pretext.batch_size,
            },
            "train": {
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate,
                "batch_size": self.train.batch_size,
                "patience": self.train.patience,
                "min_epochs": self.train.min_epochs,
                "validation_fraction": self.train.validation_fraction,
                "hidden_size": self.train.hidden_size,
                "depth": self.train.depth,
            },
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        if "seed" not in payload or payload["seed"] is None:
            raise ConfigError("a master seed is mandatory")
        data = payload.get("data", {})
        synth = None
        if "synth" in data:
            try:
                synth = SynthConfig(**data["synth"])
            except TypeError as exc:
                raise ConfigError(f"bad synth block: {exc}") from None
            synth.validate()
        pretext = PretextConfig(**payload.get("pretext", {}))
        train = TrainConfig(**payload.get("train", {}))
        mask = payload.get("mask", {})
        return cls(
            seed=int(payload["seed"]),
            synth=synth,
            csv_path=data.get("csv"),
            schema_path=data.get("schema"),
            task=payload.get("task", WORD_ID),
            split=payload.get("split", "school"),
            k=int(payload.get("k", 5)),
            models=tuple(payload.get("models", (MASKMLP, MLP_INDICATOR))),
            mask_rate=float(mask.get("rate", 0.25)),
            corruption=mask.get("corruption", CORRUPT_SENTINEL),
            pretext=pretext,
            train=train,
            out=payload.get("out"),
        )


def load_run_dataset(config: RunConfig) -> Dataset:
    if config.csv_path is not None:
        schema = (
            DatasetSchema.from_json(config.schema_path)
            if config.schema_path
            else ecri_schema()
        )
        path = Path(config.csv_path)
        if not path.exists():
            raise ConfigError(f"csv not found: {path}")
        return load_csv(path, schema)
    synth = config.synth
    if synth.seed == 0:
        synth = replace(synth, seed=child_seed(config.seed, "data"))
    return generate_synthetic(synth)


def _fold_scaler_rows(dataset: Dataset, labeled, plan: FoldPlan, fold: int) -> np.ndarray:
    """All dataset rows whose group does not appear in the fold's test set."""
    group_ids = dataset.group_ids(plan.mode)
    test_groups = np.unique(group_ids[labeled.rows[plan.folds[fold]]])
    return np.flatnonzero(~np.isin(group_ids, test_groups))


def train_fold_classifier(kind: str, dataset: Dataset, labeled, plan: FoldPlan,
                          fold: int, config: RunConfig) -> Classifier:
    """Train one model kind on one fold's training side."""
    seed = config.seed
    scaler_rows = _fold_scaler_rows(dataset, labeled, plan, fold)
    scaler = fit_scaler(dataset, scaler_rows)
    train_pos = plan.train_indices(fold)
    train_seed = child_seed(seed, "train", fold, MODEL_ORDINAL[kind])

    if kind == MASKMLP:
        encoder = init_encoder(
            dataset.schema.feature_count,
            hidden_size=config.train.hidden_size,
            depth=config.train.depth,
            seed=child_seed(seed, "init", fold),
        )
        marginals = None
        if config.corruption == CORRUPT_MARGINAL:
            from .data import apply_scaler

            scaled = apply_scaler(scaler, dataset)
            marginals = fit_marginals(scaled.values, scaled.observed, scaler_rows)
        mask = MaskSpec(
            mask_rate=config.mask_rate,
            corruption=config.corruption,
            rng=np.random.default_rng(child_seed(seed, "masks", fold)),
            marginals=marginals,
        )
        pretrain(dataset, encoder, config.pretext, mask, scaler=scaler,
                 seed=child_seed(seed, "pretrain", fold))
        return finetune(encoder, labeled, config.train, scaler=scaler,
                        rows=train_pos, seed=train_seed, fold=fold)
    return train_baseline(kind, labeled, config.train, scaler=scaler,
                          rows=train_pos, seed=train_seed, fold=fold)


def run_single_model(kind: str, dataset: Dataset, labeled, plan: FoldPlan,
                     config: RunConfig) -> tuple[EvalReport, list[Classifier]]:
    classifiers = [
        train_fold_classifier(kind, dataset, labeled, plan, fold, config)
        for fold in range(plan.k)
    ]
    report = evaluate(classifiers, plan, labeled, dataset)
    return report, classifiers


@dataclass
class BenchmarkResult:
    config: RunConfig
    dataset: Dataset
    labeled: object
    plan: FoldPlan
    reports: dict[str, EvalReport]
    classifiers: dict[str, list[Classifier]]
    ttests: list[dict]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "n_rows": int(self.dataset.n_rows),
            "n_labeled": int(self.labeled.n_rows),
            "label_threshold": float(self.labeled.threshold),
            "models": {kind: report.to_dict() for kind, report in self.reports.items()},
            "paired_t_tests": self.ttests,
        }


def _pairwise_ttests(reports: dict[str, EvalReport]) -> list[dict]:
    kinds = list(reports)
    out = []
    for i, a in enumerate(kinds):
        for b in kinds[i + 1:]:
            for metric in ("accuracy", "roc_auc"):
                va = reports[a].fold_values(metric)
                vb = reports[b].fold_values(metric)
                entry = {"model_a": a, "model_b": b, "metric": metric}
                try:
                    t, p = paired_t_test(va, vb)
                    entry.update({"t": t, "p": p})
                except DegenerateTestError:
                    entry.update({"t": None, "p": None, "degenerate": True})
                out.append(entry)
    return out


def run_benchmark(config: RunConfig, dataset: Dataset | None = None) -> BenchmarkResult:
    """The full protocol: grouped folds, per-fold training, evaluation, t-tests."""
    if dataset is None:
        dataset = load_run_dataset(config)
    labeled = derive_labels(dataset, config.task)
    plan = make_folds(
        dataset.group_ids(config.mode)[labeled.rows],
        config.k,
        config.mode,
        child_seed(config.seed, "folds"),
    )
    reports: dict[str, EvalReport] = {}
    classifiers: dict[str, list[Classifier]] = {}
    for kind in config.models:
        report, clfs = run_single_model(kind, dataset, labeled, plan, config)
        reports[kind] = report
        classifiers[kind] = clfs
    return BenchmarkResult(config, dataset, labeled, plan, reports, classifiers,
                           _pairwise_ttests(reports))


# ---------------------------------------------------------------------------
# Loss ablation
# ---------------------------------------------------------------------------

def run_loss_ablation(config: RunConfig,
                      loss_sets: tuple[tuple[str, ...], ...] = ABLATION_LOSS_SETS) -> list[dict]:
    """Pre-training objective sweep over both split modes."""
    if not loss_sets or any(len(s) == 0 for s in loss_sets):
        raise ConfigError("every ablation entry needs at least one loss")
    dataset = load_run_dataset(config)
    rows = []
    for split in ("school", "student"):
        for losses in loss_sets:
            cfg = replace(config, split=split, models=(MASKMLP,),
                          pretext=replace(config.pretext, losses=tuple(losses)))
            result = run_benchmark(cfg, dataset=dataset)
            agg = result.reports[MASKMLP].aggregate["all"]
            rows.append({
                "losses": list(losses),
                "split": split,
                "accuracy": agg["accuracy"],
                "roc_auc": agg["roc_auc"],
                "pr_auc": agg["pr_auc"],
            })
    return rows


# ---------------------------------------------------------------------------
# Feature importance by exclusion
# ---------------------------------------------------------------------------

def run_feature_importance(config: RunConfig, features: tuple[str, ...] | None = None,
                           out_dir=None) -> list[dict]:
    """Retrain with each feature dropped; positive accuracy delta = important.

    Every run reuses the same master seed, so the only varying factor is the
    excluded column.
    """
    dataset = load_run_dataset(config)
    cfg = replace(config, models=(MASKMLP,))
    baseline = run_benchmark(cfg, dataset=dataset)
    base_acc = baseline.reports[MASKMLP].aggregate["all"]["accuracy"]
    names = dataset.schema.feature_names if features is None else tuple(features)
    rows = []
    for name in names:
        try:
            ablated = run_benchmark(cfg, dataset=dataset.drop_feature(name))
        except MaskMlpError as exc:
            raise type(exc)(f"while dropping feature {name!r}: {exc}") from exc
        acc = ablated.reports[MASKMLP].aggregate["all"]["accuracy"]
        rows.append({
            "feature": name,
            "baseline_accuracy": base_acc,
            "ablated_accuracy": acc,
            "delta": base_acc - acc,
        })
    if out_dir is not None:
        _write_importance(Path(out_dir), rows)
    return rows


# ---------------------------------------------------------------------------
# Artifact writing
# ---------------------------------------------------------------------------

def write_benchmark_outputs(result: BenchmarkResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    report_json = out / "report.json"
    report_json.write_text(dumps_canonical(result.to_dict()))
    written.append(report_json)

    report_md = out / "report.md"
    report_md.write_text(render_markdown(result))
    written.append(report_md)

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for kind, clfs in result.classifiers.items():
        for fold, clf in enumerate(clfs):
            path = ckpt_dir / f"{kind}_fold{fold}.ckpt"
            save_classifier(path, clf)
            written.append(path)

    for kind, report in result.reports.items():
        path = out / f"quantile_{kind}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bucket", "count", "accuracy"])
            for row in report.quantile:
                writer.writerow([row["bucket"], row["count"],
                                 "" if not np.isfinite(row["accuracy"]) else repr(row["accuracy"])])
        written.append(path)
    return written


def _write_importance(out: Path, rows: list[dict]) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: -r["delta"])
    csv_path = out / "feature_importance.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "baseline_accuracy", "ablated_accuracy", "delta"])
        for r in ordered:
            writer.writerow([r["feature"], repr(r["baseline_accuracy"]),
                             repr(r["ablated_accuracy"]), repr(r["delta"])])
    md_path = out / "feature_importance.md"
    lines = [
        "# Feature importance (accuracy drop when excluded)",
        "",
        "| feature | baseline | ablated | delta |",
        "| --- | --- | --- | --- |",
    ]
    for r in ordered:
        lines.append(
            f"| {r['feature']} | {fmt_metric(r['baseline_accuracy'])} "
            f"| {fmt_metric(r['ablated_accuracy'])} | {fmt_metric(r['delta'])} |"
        )
    md_path.write_text("\n".join(lines) + "\n")
    return [csv_path, md_path]


def write_ablation_outputs(rows: list[dict], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "loss_ablation.json"
    json_path.write_text(dumps_canonical(rows))
    md_path = out / "loss_ablation.md"
    lines = [
        "# Pre-training loss ablation",
        "",
        "| losses | split | accuracy | roc_auc | pr_auc |",
        "| --- | --- | --- | --- | --- |",
    ]
    for r in rows:
        lines.append(
            f"| {'+'.join(r['losses'])} | {r['split']} | {fmt_metric(r['accuracy'])} "
            f"| {fmt_metric(r['roc_auc'])} | {fmt_metric(r['pr_auc'])} |"
        )
    md_path.write_text("\n".join(lines) + "\n")
    return [json_path, md_path]


def render_markdown(result: BenchmarkResult) -> str:
    cfg = result.config
    lines = [
        "# Benchmark report",
        "",
        f"- task: {cfg.task}",
        f"- split: {cfg.split} (k={cfg.k})",
        f"- seed: {cfg.seed}",
        f"- rows: {result.dataset.n_rows} total, {result.labeled.n_rows} labeled",
        f"- label threshold (control mean improvement): {result.labeled.threshold:.4f}",
        "",
        "## Aggregate metrics (mean over folds)",
        "",
        "| model | acc (all) | roc-auc (all) | pr-auc (all) | acc (Tx) | roc-auc (Tx) | pr-auc (Tx) |",
        "| --- | --- | --- | --- | --- | --- | --- |",
    ]
    for kind, report in result.reports.items():
        a, t = report.aggregate["all"], report.aggregate["intervention"]
        lines.append(
            f"| {kind} | {fmt_metric(a['accuracy'])} | {fmt_metric(a['roc_auc'])} "
            f"| {fmt_metric(a['pr_auc'])} | {fmt_metric(t['accuracy'])} "
            f"| {fmt_metric(t['roc_auc'])} | {fmt_metric(t['pr_auc'])} |"
        )

    lines += ["", "## Paired t-tests over folds", ""]
    if result.ttests:
        lines += ["| model a | model b | metric | t | p |", "| --- | --- | --- | --- | --- |"]
        for entry in result.ttests:
            if entry.get("degenerate"):
                t_str = p_str = "degenerate"
            else:
                t_str, p_str = fmt_metric(entry["t"]), fmt_metric(entry["p"])
            lines.append(
                f"| {entry['model_a']} | {entry['model_b']} | {entry['metric']} "
                f"| {t_str} | {p_str} |"
            )
    else:
        lines.append("(single model, nothing to compare)")

    for kind, report in result.reports.items():
        lines += ["", f"## {kind}: per-fold metrics", "",
                  "| fold | scope | n | accuracy | specificity | sensitivity | roc-auc | pr-auc |",
                  "| --- | --- | --- | --- | --- | --- | --- | --- |"]
        for fold, fm in enumerate(report.fold_metrics):
            for scope in ("all", "intervention"):
                m = fm[scope]
                lines.append(
                    f"| {fold} | {scope} | {m['n']} | {fmt_metric(m['accuracy'])} "
                    f"| {fmt_metric(m['specificity'])} | {fmt_metric(m['sensitivity'])} "
                    f"| {fmt_metric(m['roc_auc'])} | {fmt_metric(m['pr_auc'])} |"
                )
        lines += ["", f"## {kind}: accuracy by improvement quantile", "",
                  "| bucket | n | accuracy |", "| --- | --- | --- |"]
        for row in report.quantile:
            lines.append(f"| {row['bucket']} | {row['count']} | {fmt_metric(row['accuracy'])} |")
        for tag, table in report.subgroups.items():
            lines += ["", f"## {kind}: breakdown by {tag}", "",
                      "| group | n | accuracy | specificity | sensitivity | roc-auc | pr-auc | low support |",
                      "| --- | --- | --- | --- | --- | --- | --- | --- |"]
            for value, m in table.items():
                lines.append(
                    f"| {value} | {m['n']} | {fmt_metric(m['accuracy'])} "
                    f"| {fmt_metric(m['specificity'])} | {fmt_metric(m['sensitivity'])} "
                    f"| {fmt_metric(m['roc_auc'])} | {fmt_metric(m['pr_auc'])} "
                    f"| {'yes' if m['low_support'] else 'no'} |"
                )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------

def run_export_embeddings(config: RunConfig, out_dir) -> Path:
    """Train one model on all labeled rows and dump embeddings for projection."""
    kind = config.models[0]
    if kind == LOGREG:
        raise ConfigError("logreg has no encoder; pick an MLP-based model")
    dataset = load_run_dataset(config)
    labeled = derive_labels(dataset, config.task)
    scaler = fit_scaler(dataset, np.arange(dataset.n_rows))
    seed = config.seed
    if kind == MASKMLP:
        encoder = init_encoder(
            dataset.schema.feature_count,
            hidden_size=config.train.hidden_size,
            depth=config.train.depth,
            seed=child_seed(seed, "export-init"),
        )
        marginals = None
        if config.corruption == CORRUPT_MARGINAL:
            from .data import apply_scaler

            scaled = apply_scaler(scaler, dataset)
            marginals = fit_marginals(scaled.values, scaled.observed,
                                      np.arange(dataset.n_rows))
        mask = MaskSpec(config.mask_rate, config.corruption,
                        rng=np.random.default_rng(child_seed(seed, "export-masks")),
                        marginals=marginals)
        pretrain(dataset, encoder, config.pretext, mask, scaler=scaler,
                 seed=child_seed(seed, "export-pretrain"))
        clf = finetune(encoder, labeled, config.train, scaler=scaler,
                       seed=child_seed(seed, "export-train"))
    else:
        clf = train_baseline(kind, labeled, config.train, scaler=scaler,
                             seed=child_seed(seed, "export-train"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"embeddings_{kind}.csv"
    export_embeddings(clf, labeled, path=path)
    return path
