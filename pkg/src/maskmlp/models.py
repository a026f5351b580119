"""Classifiers: fine-tuned MaskMLP, from-scratch MLP baselines, logistic regression.

Every classifier carries its scaler and fill policy, so prediction takes raw
feature rows and handles scaling and missing cells internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LabeledView, Scaler
from .errors import ConfigError, ContractError, ShapeError, TrainingError
from .missing import (
    FILL_INDICATOR,
    FILL_MASK_PRETRAIN,
    FILL_MEAN,
    FILL_ZEROS,
    FillPolicy,
    fit_mean_policy,
    materialize_matrix,
)
from .nn import (
    AdamState,
    Mlp,
    adam_step,
    backward_layers,
    bce_with_logits,
    forward_layers,
    init_head,
    init_mlp,
    load_arrays,
    save_arrays,
    sigmoid,
)
from .serialize import json_safe

MASKMLP = "maskmlp"
MLP_ZEROS = "mlp_zeros"
MLP_MEAN = "mlp_mean"
MLP_INDICATOR = "mlp_indicator"
LOGREG = "logreg"
MODEL_KINDS = (MASKMLP, MLP_ZEROS, MLP_MEAN, MLP_INDICATOR, LOGREG)


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 128
    patience: int = 10
    # patience only starts counting after this many epochs: fine-tuning a
    # heavily-aligned encoder goes through a long warm-up plateau that would
    # otherwise trip early stopping at a terrible checkpoint
    min_epochs: int = 30
    validation_fraction: float = 0.1
    hidden_size: int = 64
    depth: int = 3

    def __post_init__(self) -> None:
        if not (0.0 < self.validation_fraction < 0.5):
            raise ConfigError("validation_fraction must lie in (0, 0.5)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class Classifier:
    """A trained model bundled with everything prediction needs."""

    kind: str
    model: Mlp
    policy: FillPolicy
    scaler: Scaler
    schema_hash: str
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.model.input_dim


def _grouped_validation_split(groups: np.ndarray, fraction: float,
                              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, validation); no group appears on both sides.

    Falls back to a plain row split when only one group is present.
    """
    n = len(groups)
    target = max(1, round(fraction * n))
    unique = np.unique(groups)
    if len(unique) == 1:
        order = rng.permutation(n)
        return order[target:], order[:target]
    order = rng.permutation(len(unique))
    val_groups: list = []
    count = 0
    for g in unique[order]:
        if count >= target or len(val_groups) == len(unique) - 1:
            break
        val_groups.append(g)
        count += int((groups == g).sum())
    val_mask = np.isin(groups, val_groups)
    return np.flatnonzero(~val_mask), np.flatnonzero(val_mask)


def _head_logits(model: Mlp, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, object]:
    emb, cache = forward_layers(model.layers, x)
    logits = emb @ model.head.weight + model.head.bias
    return logits.reshape(-1), emb, cache


def _validation_bce(model: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    logits, _, _ = _head_logits(model, x)
    loss, _ = bce_with_logits(logits, y)
    return loss


def _train_bce(model: Mlp, x: np.ndarray, y: np.ndarray, groups: np.ndarray,
               cfg: TrainConfig, seed: int) -> dict:
    """Minibatch Adam on binary cross-entropy with grouped early stopping.

    Keeps the best-validation-loss parameters and restores them at the end.
    """
    split_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x71]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x72]))
    train_idx, val_idx = _grouped_validation_split(groups, cfg.validation_fraction, split_rng)
    if len(train_idx) == 0:
        train_idx, val_idx = np.arange(len(y)), np.array([], dtype=int)

    params = model.parameters()
    names = model.parameter_names()
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)

    best_val = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = -1
    since_best = 0
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_idx))
        for s in range(0, len(order), cfg.batch_size):
            idx = train_idx[order[s : s + cfg.batch_size]]
            logits, emb, cache = _head_logits(model, x[idx])
            loss, dz = bce_with_logits(logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"fine-tuning diverged at epoch {epoch}")
            dz_col = dz[:, None]
            head_grads = (emb.T @ dz_col, dz_col.sum(axis=0))
            d_emb = dz_col @ model.head.weight.T
            grads = backward_layers(model.layers, cache, d_emb)
            flat: list[np.ndarray] = []
            for gw, gb in grads:
                flat.extend((gw, gb))
            flat.extend(head_grads)
            adam_step(params, flat, state, names)
        epochs_run = epoch + 1

        if len(val_idx) == 0:
            continue
        val_loss = _validation_bce(model, x[val_idx], y[val_idx])
        if val_loss < best_val:
            best_val = val_loss
            best_params = [p.copy() for p in params]
            best_epoch = epoch
            since_best = 0
        elif epoch + 1 >= cfg.min_epochs:
            since_best += 1
            if since_best > cfg.patience:
                break

    if len(val_idx) > 0 and cfg.epochs > 0:
        for p, b in zip(params, best_params):
            p[...] = b
    return {
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "best_val_loss": None if not np.isfinite(best_val) else float(best_val),
        "n_train": int(len(train_idx)),
        "n_val": int(len(val_idx)),
    }


def _prepare_inputs(labeled: LabeledView, rows: np.ndarray | None, scaler: Scaler,
                    policy: FillPolicy, fit_means: bool):
    if labeled.n_rows == 0:
        raise TrainingError("empty labeled view")
    positions = np.arange(labeled.n_rows) if rows is None else np.asarray(rows)
    if positions.size == 0:
        raise TrainingError("no training rows selected")
    ds = labeled.dataset
    ds_rows = labeled.rows[positions]
    raw = ds.features.values[ds_rows]
    obs = ds.features.observed[ds_rows]
    scaled = scaler.transform(raw, obs)
    if fit_means:
        policy = fit_mean_policy(scaled, obs, np.arange(len(ds_rows)))
    x = materialize_matrix(policy, scaled, obs)
    y = labeled.labels[positions].astype(np.float64)
    groups = ds.school_id[ds_rows]
    return x, y, groups, policy


def finetune(encoder: Mlp, labeled: LabeledView, cfg: TrainConfig, *,
             scaler: Scaler, rows: np.ndarray | None = None, seed: int = 0,
             fold: int | None = None) -> Classifier:
    """Attach a classification head and fine-tune the whole network end to end."""
    policy = FillPolicy(FILL_MASK_PRETRAIN)
    x, y, groups, policy = _prepare_inputs(labeled, rows, scaler, policy, fit_means=False)
    if encoder.input_dim != x.shape[1]:
        raise ShapeError(f"encoder expects {encoder.input_dim} inputs, data has {x.shape[1]}")
    model = encoder.clone()
    head_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x73]))
    model.head = init_head(model.hidden_size, head_rng)
    meta = _train_bce(model, x, y, groups, cfg, seed)
    meta.update({"seed": int(seed), "fold": fold, "task": labeled.task})
    return Classifier(MASKMLP, model, policy, scaler, labeled.dataset.schema.schema_hash(), meta)


def train_baseline(kind: str, labeled: LabeledView, cfg: TrainConfig, *,
                   scaler: Scaler, rows: np.ndarray | None = None, seed: int = 0,
                   fold: int | None = None) -> Classifier:
    """From-scratch baselines: MLP with zeros/mean/indicator fill, or logistic
    regression (a bare sigmoid head over indicator-filled inputs)."""
    if kind not in (MLP_ZEROS, MLP_MEAN, MLP_INDICATOR, LOGREG):
        raise ConfigError(f"unknown baseline kind {kind!r}")
    policy = {
        MLP_ZEROS: FillPolicy(FILL_ZEROS),
        MLP_MEAN: FillPolicy(FILL_MEAN),
        MLP_INDICATOR: FillPolicy(FILL_INDICATOR),
        LOGREG: FillPolicy(FILL_INDICATOR),
    }[kind]
    x, y, groups, policy = _prepare_inputs(
        labeled, rows, scaler, policy, fit_means=(kind == MLP_MEAN)
    )
    init_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x74]))
    d = x.shape[1]
    if kind == LOGREG:
        model = Mlp([], init_head(d, init_rng))
    else:
        model = init_mlp(d, cfg.hidden_size, cfg.depth, init_rng, with_head=True)
    meta = _train_bce(model, x, y, groups, cfg, seed)
    meta.update({"seed": int(seed), "fold": fold, "task": labeled.task})
    return Classifier(kind, model, policy, scaler, labeled.dataset.schema.schema_hash(), meta)


def predict_proba(classifier: Classifier, features: np.ndarray,
                  observed: np.ndarray) -> np.ndarray:
    """Probabilities in [0, 1] for raw (unscaled) rows.

    Rows are processed one at a time, so batched calls match single-row calls
    bit for bit.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(observed, dtype=bool))
    if feats.shape[1] != classifier.input_dim:
        raise ContractError(
            f"classifier expects {classifier.input_dim} features, got {feats.shape[1]}"
        )
    scaled = classifier.scaler.transform(feats, obs)
    x = materialize_matrix(classifier.policy, scaled, obs)
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        logits, _, _ = _head_logits(classifier.model, x[i : i + 1])
        out[i] = sigmoid(logits)[0]
    return out


def predict_proba_rows(classifier: Classifier, dataset: Dataset,
                       rows: np.ndarray) -> np.ndarray:
    """Predict for dataset rows, enforcing the schema-hash contract."""
    if dataset.schema.schema_hash() != classifier.schema_hash:
        raise ContractError("dataset schema does not match the classifier's schema hash")
    rows = np.asarray(rows)
    return predict_proba(
        classifier, dataset.features.values[rows], dataset.features.observed[rows]
    )


def embed_rows(classifier: Classifier, features: np.ndarray,
               observed: np.ndarray) -> np.ndarray:
    """Encoder embeddings for raw rows (no head)."""
    if not classifier.model.layers:
        raise ContractError(f"{classifier.kind} has no encoder to embed with")
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(observed, dtype=bool))
    scaled = classifier.scaler.transform(feats, obs)
    x = materialize_matrix(classifier.policy, scaled, obs)
    out = np.empty((x.shape[0], classifier.model.hidden_size))
    for i in range(x.shape[0]):
        emb, _ = forward_layers(classifier.model.layers, x[i : i + 1])
        out[i] = emb[0]
    return out


def export_embeddings(classifier: Classifier, labeled: LabeledView,
                      rows: np.ndarray | None = None, path=None) -> np.ndarray:
    """Embedding matrix for labeled rows; optionally written as a CSV with
    label and subgroup columns for external projection tools."""
    positions = np.arange(labeled.n_rows) if rows is None else np.asarray(rows)
    ds = labeled.dataset
    ds_rows = labeled.rows[positions]
    emb = embed_rows(
        classifier, ds.features.values[ds_rows], ds.features.observed[ds_rows]
    )
    if path is not None:
        import csv as _csv

        tags = sorted(ds.subgroup_tags)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(
                ["student_id", "label", *tags, *[f"e{j}" for j in range(emb.shape[1])]]
            )
            for i, (r, pos) in enumerate(zip(ds_rows, positions)):
                writer.writerow(
                    [
                        int(ds.student_id[r]),
                        int(labeled.labels[pos]),
                        *[ds.subgroup_tags[t][r] for t in tags],
                        *[repr(v) for v in emb[i]],
                    ]
                )
    return emb


# ---------------------------------------------------------------------------
# Classifier checkpoints
# ---------------------------------------------------------------------------

def save_classifier(path, classifier: Classifier) -> None:
    from .nn import model_to_arrays

    named, arch = model_to_arrays(classifier.model)
    named.append(("scaler.lo", classifier.scaler.lo))
    named.append(("scaler.hi", classifier.scaler.hi))
    named.append(("scaler.binary", classifier.scaler.binary.astype(np.float64)))
    if classifier.policy.means is not None:
        named.append(("policy.means", classifier.policy.means))
    meta = {
        "schema_hash": classifier.schema_hash,
        "kind": classifier.kind,
        "arch": arch,
        "policy": classifier.policy.kind,
        "extra": json_safe(classifier.meta),
    }
    save_arrays(path, named, meta)


def load_classifier(path) -> Classifier:
    from .nn import model_from_arrays

    arrays, meta = load_arrays(path)
    model = model_from_arrays(arrays, meta["arch"])
    scaler = Scaler(
        arrays["scaler.lo"], arrays["scaler.hi"], arrays["scaler.binary"].astype(bool)
    )
    policy = FillPolicy(meta["policy"], arrays.get("policy.means"))
    return Classifier(meta["kind"], model, policy, scaler, meta["schema_hash"],
                      dict(meta.get("extra", {})))
