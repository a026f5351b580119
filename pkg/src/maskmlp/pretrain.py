"""Self-supervised pre-training.

The encoder sees two views of every row — the sentinel-filled original and a
mask-augmented corruption — and is trained to keep their embeddings aligned.
Losses are computed per row and averaged over the batch; multi-loss configs
average the selected losses with equal weights. All gradients are analytic
and checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Scaler, apply_scaler
from .errors import ConfigError, NumericError, ShapeError, TrainingError
from .missing import (
    FILL_MASK_PRETRAIN,
    FillPolicy,
    MaskSpec,
    mask_augment_matrix,
    materialize_matrix,
)
from .nn import (
    AdamState,
    Layer,
    Mlp,
    adam_step,
    backward_layers,
    forward,
    forward_layers,
    init_mlp,
    input_gradient,
    sigmoid,
)

LOSS_ORDER = ("cosine", "mse", "contrastive", "triplet", "vime")


@dataclass
class PretextConfig:
    """Which pretext losses to combine, and how long to train."""

    losses: tuple[str, ...] = ("cosine",)
    margin: float = 1.0
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 128

    def __post_init__(self) -> None:
        self.losses = tuple(self.losses)
        if not self.losses:
            raise ConfigError("at least one pretext loss must be selected")
        for name in self.losses:
            if name not in LOSS_ORDER:
                raise ConfigError(f"unknown pretext loss {name!r}")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")

    def ordered_losses(self) -> tuple[str, ...]:
        return tuple(name for name in LOSS_ORDER if name in self.losses)


def _as_batch(*arrays: np.ndarray) -> list[np.ndarray]:
    out = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in arrays]
    h = out[0].shape
    for a in out[1:]:
        if a.shape != h:
            raise ShapeError(f"embedding shapes differ: {h} vs {a.shape}")
    return out


def cosine_embedding_loss(e_i: np.ndarray, e_mask: np.ndarray):
    """1 - cos(e_i, e_mask), averaged over rows. Range [0, 2] per row.

    Returns (loss, grad wrt e_i, grad wrt e_mask).
    """
    a, b = _as_batch(e_i, e_mask)
    n = a.shape[0]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na < 1e-12).any() or (nb < 1e-12).any():
        raise NumericError("zero-norm embedding in cosine loss")
    dot = np.einsum("ij,ij->i", a, b)
    cos = dot / (na * nb)
    loss = float(np.mean(1.0 - cos))
    # d(1-cos)/da = -b/(|a||b|) + cos * a/|a|^2, then / n for the batch mean
    ga = (-b / (na * nb)[:, None] + (cos / na**2)[:, None] * a) / n
    gb = (-a / (na * nb)[:, None] + (cos / nb**2)[:, None] * b) / n
    return loss, ga, gb


def mse_embedding_loss(e_i: np.ndarray, e_mask: np.ndarray):
    """Mean squared difference over embedding components, averaged over rows."""
    a, b = _as_batch(e_i, e_mask)
    n, h = a.shape
    diff = a - b
    loss = float(np.mean(np.sum(diff * diff, axis=1) / h))
    ga = 2.0 * diff / (h * n)
    return loss, ga, -ga


def contrastive_loss(anchor: np.ndarray, positive: np.ndarray,
                     negative: np.ndarray, margin: float = 1.0):
    """Pair-based contrastive form: d(a,p)^2 + max(0, margin - d(a,n))^2."""
    a, p, nvec = _as_batch(anchor, positive, negative)
    n = a.shape[0]
    dp = a - p
    dn = a - nvec
    d_an = np.linalg.norm(dn, axis=1)
    slack = margin - d_an
    active = slack > 0.0
    loss = float(np.mean(np.sum(dp * dp, axis=1) + np.where(active, slack, 0.0) ** 2))
    safe = np.maximum(d_an, 1e-12)
    hinge_coef = np.where(active, -2.0 * slack / safe, 0.0)[:, None]
    ga = (2.0 * dp + hinge_coef * dn) / n
    gp = -2.0 * dp / n
    gn = -hinge_coef * dn / n
    return loss, ga, gp, gn


def triplet_loss(anchor: np.ndarray, positive: np.ndarray,
                 negative: np.ndarray, margin: float = 1.0):
    """max(0, d(a,p) - d(a,n) + margin) with Euclidean distances."""
    a, p, nvec = _as_batch(anchor, positive, negative)
    n = a.shape[0]
    dp = a - p
    dn = a - nvec
    d_ap = np.linalg.norm(dp, axis=1)
    d_an = np.linalg.norm(dn, axis=1)
    slack = d_ap - d_an + margin
    active = slack > 0.0
    loss = float(np.mean(np.where(active, slack, 0.0)))
    unit_p = dp / np.maximum(d_ap, 1e-12)[:, None]
    unit_n = dn / np.maximum(d_an, 1e-12)[:, None]
    coef = active[:, None].astype(np.float64) / n
    ga = coef * (unit_p - unit_n)
    gp = -coef * unit_p
    gn = coef * unit_n
    return loss, ga, gp, gn


def vime_pretext_loss(original: np.ndarray, pre_observed: np.ndarray,
                      aug_mask: np.ndarray, recon: np.ndarray,
                      mask_logits: np.ndarray):
    """Mask-estimation BCE plus reconstruction MSE, equal weights.

    The BCE runs over every position against the augmentation mask; the MSE
    only over positions observed before augmentation, where a ground-truth
    value exists.
    """
    x = np.atleast_2d(np.asarray(original, dtype=np.float64))
    obs = np.atleast_2d(np.asarray(pre_observed, dtype=bool))
    m = np.atleast_2d(np.asarray(aug_mask)).astype(np.float64)
    r = np.atleast_2d(np.asarray(recon, dtype=np.float64))
    z = np.atleast_2d(np.asarray(mask_logits, dtype=np.float64))
    if not (x.shape == obs.shape == m.shape == r.shape == z.shape):
        raise ShapeError("vime inputs must share one shape")

    total = m.size
    bce = float(np.sum(np.maximum(z, 0.0) - z * m + np.log1p(np.exp(-np.abs(z)))) / total)
    g_logits = (sigmoid(z) - m) / total

    n_obs = int(obs.sum())
    g_recon = np.zeros_like(r)
    if n_obs > 0:
        diff = np.where(obs, r - x, 0.0)
        mse = float(np.sum(diff * diff) / n_obs)
        g_recon = 2.0 * diff / n_obs
    else:
        mse = 0.0
    return bce + mse, g_recon, g_logits


@dataclass
class PretrainHistory:
    """Per-step and per-epoch loss records."""

    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


@dataclass
class PretrainResult:
    encoder: Mlp
    history: PretrainHistory


def _vime_decoder(hidden: int, out_dim: int, rng: np.random.Generator) -> list[Layer]:
    # single hidden layer mirroring the encoder's last hidden size
    b1 = np.sqrt(6.0 / hidden)
    return [
        Layer(rng.uniform(-b1, b1, size=(hidden, hidden)), np.zeros(hidden), "relu"),
        Layer(rng.uniform(-b1, b1, size=(hidden, out_dim)), np.zeros(out_dim), "identity"),
    ]


def _batches(n: int, batch_size: int, order: np.ndarray):
    """Contiguous slices of the shuffled order; a trailing singleton is folded
    into the previous batch so in-batch negative sampling always works."""
    s = 0
    while s < n:
        e = min(s + batch_size, n)
        if n - e == 1:
            e = n
        yield order[s:e]
        s = e


def pretrain(dataset: Dataset, model: Mlp, pretext: PretextConfig, mask: MaskSpec,
             *, scaler: Scaler, seed: int = 0) -> PretrainResult:
    """Train the encoder on every row, labels never consulted.

    Each step materializes a batch with the -1 sentinel, corrupts a copy via
    ``mask_augment``, embeds both views, and takes one Adam step on the
    equally-weighted mean of the selected losses.
    """
    losses = pretext.ordered_losses()
    scaled = apply_scaler(scaler, dataset)
    x_all = materialize_matrix(FillPolicy(FILL_MASK_PRETRAIN), scaled.values, scaled.observed)
    obs_all = scaled.observed
    n = x_all.shape[0]

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51]))
    neg_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x52]))
    decoder_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x53]))

    contrastive_like = ("contrastive" in losses) or ("triplet" in losses)
    recon_dec = mask_dec = None
    if "vime" in losses:
        recon_dec = _vime_decoder(model.hidden_size, x_all.shape[1], decoder_rng)
        mask_dec = _vime_decoder(model.hidden_size, x_all.shape[1], decoder_rng)

    params = model.parameters()
    names = model.parameter_names()
    if recon_dec is not None:
        for tag, dec in (("recon", recon_dec), ("mask", mask_dec)):
            for i, layer in enumerate(dec):
                params.extend((layer.weight, layer.bias))
                names.extend((f"{tag}_dec{i}.weight", f"{tag}_dec{i}.bias"))
    state = AdamState.for_params(params, learning_rate=pretext.learning_rate)

    history = PretrainHistory()
    n_losses = len(losses)
    for epoch in range(pretext.epochs):
        order = shuffle_rng.permutation(n)
        epoch_records = []
        for step, idx in enumerate(_batches(n, pretext.batch_size, order)):
            xb = x_all[idx]
            ob = obs_all[idx]
            if contrastive_like and len(idx) < 2:
                raise TrainingError("contrastive pretexts need batches of at least 2 rows")
            xm, missing_after = mask_augment_matrix(xb, ob, mask)

            emb_i, cache_i = forward(model, xb)
            emb_m, cache_m = forward(model, xm)
            d_i = np.zeros_like(emb_i)
            d_m = np.zeros_like(emb_m)
            dec_grads: list[tuple[np.ndarray, np.ndarray]] = []
            record: dict[str, float] = {}

            for name in losses:
                if name == "cosine":
                    # dead-ReLU rows have zero-norm embeddings where the
                    # cosine is undefined; they contribute nothing this step
                    valid = (np.linalg.norm(emb_i, axis=1) >= 1e-12) & (
                        np.linalg.norm(emb_m, axis=1) >= 1e-12
                    )
                    if valid.all():
                        value, ga, gb = cosine_embedding_loss(emb_i, emb_m)
                        d_i += ga / n_losses
                        d_m += gb / n_losses
                    elif valid.any():
                        value, ga, gb = cosine_embedding_loss(emb_i[valid], emb_m[valid])
                        d_i[valid] += ga / n_losses
                        d_m[valid] += gb / n_losses
                    else:
                        value = 0.0
                elif name == "mse":
                    value, ga, gb = mse_embedding_loss(emb_i, emb_m)
                    d_i += ga / n_losses
                    d_m += gb / n_losses
                elif name in ("contrastive", "triplet"):
                    b = len(idx)
                    neg_idx = (np.arange(b) + 1 + neg_rng.integers(0, b - 1, size=b)) % b
                    fn = contrastive_loss if name == "contrastive" else triplet_loss
                    value, ga, gp, gn = fn(emb_i, emb_m, emb_i[neg_idx], pretext.margin)
                    d_i += ga / n_losses
                    d_m += gp / n_losses
                    np.add.at(d_i, neg_idx, gn / n_losses)
                else:  # vime
                    recon, cache_r = forward_layers(recon_dec, emb_m)
                    logits, cache_z = forward_layers(mask_dec, emb_m)
                    aug = missing_after & ob
                    value, g_recon, g_logits = vime_pretext_loss(xb, ob, aug, recon, logits)
                    dec_grads = backward_layers(recon_dec, cache_r, g_recon / n_losses)
                    dec_grads += backward_layers(mask_dec, cache_z, g_logits / n_losses)
                    d_m += input_gradient(recon_dec, cache_r, g_recon / n_losses)
                    d_m += input_gradient(mask_dec, cache_z, g_logits / n_losses)
                record[name] = value

            total = sum(record.values()) / n_losses
            if not np.isfinite(total):
                raise TrainingError(f"pre-training diverged at epoch {epoch}, step {step}")
            record["total"] = total

            grads_i = backward_layers(model.layers, cache_i, d_i)
            grads_m = backward_layers(model.layers, cache_m, d_m)
            flat: list[np.ndarray] = []
            for (gw_i, gb_i), (gw_m, gb_m) in zip(grads_i, grads_m):
                flat.extend((gw_i + gw_m, gb_i + gb_m))
            for gw, gb in dec_grads:
                flat.extend((gw, gb))
            adam_step(params, flat, state, names)

            history.steps.append(record)
            epoch_records.append(record)

        keys = list(losses) + ["total"]
        history.epochs.append(
            {k: float(np.mean([r[k] for r in epoch_records])) for k in keys}
            if epoch_records
            else {}
        )
    return PretrainResult(model, history)


def init_encoder(input_dim: int, hidden_size: int = 64, depth: int = 3,
                 seed: int = 0) -> Mlp:
    """Fresh ReLU encoder with the reference 3 x 64 shape by default."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1E]))
    return init_mlp(input_dim, hidden_size, depth, rng)
