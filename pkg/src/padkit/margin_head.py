"""Margin-softmax patch classifier with epoch-scheduled class weights.

The head projects provider embeddings to a compact space, aligns them with
one unit-norm prototype per class, and trains with an additive or angular
margin on the target logit. Class weights start at imbalance-derived
values and relax linearly toward uniform over the configured epoch budget,
so early training emphasizes rare classes and late training restores the
plain objective.

Margin variants:

* ``cosface``: target logit ``s * (cos(theta) - m)``. A config switch
  (``cosface_form="rotate_angle"``) instead rotates the angle,
  ``s * cos(theta - m)``.
* ``arcface``: ``s * cos(theta + m)``, expanded through
  ``cos(theta)*cos(m) - sin(theta)*sin(m)`` with ``sin(theta)`` clamped at
  zero so the forward stays real for every input.
* ``adaface``: margin adapts to the embedding norm. With the normalized
  norm ``nhat`` in [-1, 1], the angular part is ``cos(theta - m*nhat)``
  and the additive part ``m*nhat + m``. The additive part is scaled by
  ``s`` by default; ``adaface_subtraction="unscaled"`` leaves it outside
  the scale factor. ``nhat`` is treated as data: no gradient flows
  through the norm statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .optim import AdamConfig, AdamState, LrSchedule, adam_step, lr_at
from .store import EmbeddingStore, patch_id

CLASS_ORDER = ("real", "print", "screen", "composite")

LOSS_VARIANTS = frozenset({"cosface", "arcface", "adaface"})
WEIGHT_MODES = frozenset({"none", "static", "dynamic"})


class MarginHeadError(ValueError):
    pass


class DegenerateEmbeddingError(MarginHeadError):
    """An embedding with (near-)zero norm cannot be angle-aligned."""


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int = 384
    embed_dim: int = 128
    n_classes: int = 4
    loss: str = "adaface"
    margin: float = 0.4
    scale: float = 64.0
    cosface_form: str = "subtract_cosine"  # or "rotate_angle"
    adaface_subtraction: str = "scaled"  # or "unscaled"
    weight_mode: str = "dynamic"
    weight_norm: str = "mean_one"  # or "literal"
    use_bias: bool = True

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise MarginHeadError(f"unknown loss variant {self.loss!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise MarginHeadError(f"unknown weight mode {self.weight_mode!r}")
        if self.cosface_form not in {"subtract_cosine", "rotate_angle"}:
            raise MarginHeadError(f"unknown cosface form {self.cosface_form!r}")
        if self.adaface_subtraction not in {"scaled", "unscaled"}:
            raise MarginHeadError(f"unknown adaface subtraction {self.adaface_subtraction!r}")
        if self.weight_norm not in {"mean_one", "literal"}:
            raise MarginHeadError(f"unknown weight norm {self.weight_norm!r}")
        if not 0.0 <= self.margin < 1.0:
            raise MarginHeadError("margin must lie in [0, 1)")
        if self.scale <= 0:
            raise MarginHeadError("scale must be positive")


def init_head(cfg: HeadConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded Gaussian projection and unit-norm prototype rows."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x68656164])))
    params = {
        "projection": rng.normal(size=(cfg.input_dim, cfg.embed_dim)) / math.sqrt(cfg.input_dim),
        "bias": np.zeros((1, cfg.embed_dim)),
        "prototypes": rng.normal(size=(cfg.n_classes, cfg.embed_dim)),
    }
    renormalize_prototypes(params)
    return params


def renormalize_prototypes(params: dict[str, np.ndarray]) -> None:
    W = params["prototypes"]
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    if norms.min() < 1e-12:
        raise DegenerateEmbeddingError("prototype row collapsed to zero norm")
    W /= norms


# ---------------------------------------------------------------------------
# graph builders (autodiff Tensors in, Tensor out)


def project_graph(P: ad.Tensor, b: ad.Tensor | None, x: ad.Tensor) -> ad.Tensor:
    z = ad.matmul(x, P)
    return ad.add(z, b) if b is not None else z


def cosine_graph(z: ad.Tensor, W: ad.Tensor) -> ad.Tensor:
    """Cosine alignment of each row of z against each prototype row."""
    norms_sq = ad.rowsum(ad.mul(z, z))
    if norms_sq.value.min() < 1e-24:
        raise DegenerateEmbeddingError("embedding with zero norm cannot be normalized")
    zhat = ad.div(z, ad.sqrt(norms_sq))
    return ad.matmul(zhat, ad.transpose(W))


def margin_logits_graph(
    cos: ad.Tensor,
    onehot: np.ndarray,
    cfg: HeadConfig,
    norm_hat: np.ndarray | None = None,
) -> ad.Tensor:
    """Apply the configured margin to the target logit, scale the rest.

    ``onehot`` is a constant (B, C) indicator; ``norm_hat`` is the
    constant per-sample normalized embedding norm required by adaface.
    """
    B, C = cos.shape
    if onehot.shape != (B, C) or not np.all(onehot.sum(axis=1) == 1.0):
        raise MarginHeadError(f"onehot must be (B, C) with one hot entry per row, got {onehot.shape}")
    m, s = cfg.margin, cfg.scale
    oh = ad.constant(onehot, name="onehot")
    cy = ad.rowsum(ad.mul(cos, oh))  # (B, 1) target cosine

    def sin_of(c: ad.Tensor) -> ad.Tensor:
        return ad.sqrt(ad.clamp(ad.sub(ad.constant(1.0), ad.mul(c, c)), lo=0.0))

    if cfg.loss == "cosface" and cfg.cosface_form == "subtract_cosine":
        target = ad.sub(cy, ad.constant(m))
    elif cfg.loss == "cosface":  # rotate_angle
        target = ad.add(
            ad.scale(cy, math.cos(m)), ad.scale(sin_of(cy), math.sin(m))
        )
    elif cfg.loss == "arcface":
        target = ad.sub(
            ad.scale(cy, math.cos(m)), ad.scale(sin_of(cy), math.sin(m))
        )
    else:  # adaface
        if norm_hat is None:
            raise MarginHeadError("adaface needs the normalized embedding norm")
        nhat = np.asarray(norm_hat, dtype=np.float64).reshape(B, 1)
        if nhat.min() < -1.0 or nhat.max() > 1.0:
            raise MarginHeadError("normalized norms must lie in [-1, 1]")
        g_angle = -m * nhat
        g_add = m * nhat + m
        rotated = ad.sub(
            ad.mul(cy, ad.constant(np.cos(g_angle))),
            ad.mul(sin_of(cy), ad.constant(np.sin(g_angle))),
        )
        if cfg.adaface_subtraction == "scaled":
            target = ad.sub(rotated, ad.constant(g_add))
        else:
            # additive part applied after scaling; handled below
            adjusted = ad.add(cos, ad.mul(oh, ad.sub(rotated, cy)))
            scaled = ad.scale(adjusted, s)
            return ad.sub(scaled, ad.mul(oh, ad.constant(g_add)))

    adjusted = ad.add(cos, ad.mul(oh, ad.sub(target, cy)))
    return ad.scale(adjusted, s)


def softmax_margin_loss_graph(logits: ad.Tensor, onehot: np.ndarray) -> ad.Tensor:
    """Per-sample cross entropy of the margin logits, (B, 1), max-subtracted."""
    oh = ad.constant(onehot, name="onehot")
    row_max = ad.constant(logits.value.max(axis=1, keepdims=True), name="row_max")
    shifted = ad.sub(logits, row_max)
    lse = ad.add(row_max, ad.log(ad.rowsum(ad.exp(shifted))))
    fy = ad.rowsum(ad.mul(logits, oh))
    return ad.sub(lse, fy)


def weighted_mean_loss_graph(per_sample: ad.Tensor, sample_weights: np.ndarray) -> ad.Tensor:
    w = ad.constant(np.asarray(sample_weights, dtype=np.float64).reshape(-1, 1), name="weights")
    return ad.mean_all(ad.mul(per_sample, w))


def head_loss_graph(
    tensors: list[ad.Tensor],
    x: np.ndarray,
    y: np.ndarray,
    cfg: HeadConfig,
    norm_hat: np.ndarray | None = None,
    class_weights: np.ndarray | None = None,
) -> ad.Tensor:
    """Full pipeline loss from parameter tensors [P, b, W].

    ``norm_hat`` is passed as fixed data so the same builder serves both
    training and finite-difference checking.
    """
    P, b, W = tensors
    B = x.shape[0]
    onehot = np.zeros((B, cfg.n_classes))
    onehot[np.arange(B), y] = 1.0
    z = project_graph(P, b if cfg.use_bias else None, ad.constant(x, name="x"))
    cos = cosine_graph(z, W)
    logits = margin_logits_graph(cos, onehot, cfg, norm_hat)
    per_sample = softmax_margin_loss_graph(logits, onehot)
    if class_weights is None:
        return ad.mean_all(per_sample)
    return weighted_mean_loss_graph(per_sample, np.asarray(class_weights)[y])


# ---------------------------------------------------------------------------
# plain numpy helpers


def project(params: dict[str, np.ndarray], x: np.ndarray, cfg: HeadConfig) -> np.ndarray:
    z = x @ params["projection"]
    return z + params["bias"] if cfg.use_bias else z


def cosine_alignment(z: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if norms.min() < 1e-12:
        raise DegenerateEmbeddingError("embedding with zero norm cannot be normalized")
    return (z / norms) @ prototypes.T


def classify(params: dict[str, np.ndarray], x: np.ndarray, cfg: HeadConfig) -> np.ndarray:
    return cosine_alignment(project(params, x, cfg), params["prototypes"]).argmax(axis=1)


# ---------------------------------------------------------------------------
# adaptive norm statistics (adaface)


@dataclass
class NormStats:
    """Running embedding-norm statistics with exponential moving averages."""

    mean: float = 0.0
    std: float = 1.0
    momentum: float = 0.01
    concentration: float = 0.33
    eps: float = 1e-6
    initialized: bool = False

    def update(self, norms: np.ndarray) -> None:
        batch_mean = float(norms.mean())
        batch_std = float(norms.std(ddof=1)) if norms.size > 1 else 0.0
        if not self.initialized:
            self.mean = batch_mean
            self.std = batch_std
            self.initialized = True
        else:
            self.mean = (1.0 - self.momentum) * self.mean + self.momentum * batch_mean
            self.std = (1.0 - self.momentum) * self.std + self.momentum * batch_std

    def normalized(self, norms: np.ndarray) -> np.ndarray:
        scaled = self.concentration * (norms - self.mean) / (self.std + self.eps)
        return np.clip(scaled, -1.0, 1.0)


# ---------------------------------------------------------------------------
# class-weight schedule


def initial_class_weights(counts, norm: str = "mean_one") -> np.ndarray:
    """Imbalance weights from per-class sample counts.

    The raw weight of class i is ``N / N_i``. ``mean_one`` rescales the
    vector to sum to C (mean exactly one); ``literal`` multiplies the raw
    vector by C outright. Classes with zero count receive weight 1 and are
    excluded from the normalization: they contribute no samples, so their
    weight multiplies nothing.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise MarginHeadError("class counts must be nonnegative")
    present = counts > 0
    if not present.any():
        raise MarginHeadError("at least one class must have samples")
    N = counts.sum()
    c_present = int(present.sum())
    raw = np.where(present, N / np.where(present, counts, 1.0), 0.0)
    w = np.ones_like(counts)
    if norm == "mean_one":
        w[present] = c_present * raw[present] / raw[present].sum()
    elif norm == "literal":
        w[present] = c_present * raw[present]
    else:
        raise MarginHeadError(f"unknown weight norm {norm!r}")
    return w


def class_weights_at(w0: np.ndarray, epoch: int, total_epochs: int, mode: str) -> np.ndarray:
    """Scheduled weights at completed-epoch count ``epoch``.

    ``dynamic`` interpolates ``(1 - lam) * 1 + lam * w0`` with
    ``lam = 1 - epoch/total_epochs``; epoch 0 gives w0, epoch=total gives
    exact ones. ``total_epochs`` is the configured budget even when early
    stopping ends training sooner.
    """
    if mode == "none":
        return np.ones_like(w0)
    if mode == "static":
        return w0.copy()
    if mode != "dynamic":
        raise MarginHeadError(f"unknown weight mode {mode!r}")
    if not 0 <= epoch <= total_epochs:
        raise MarginHeadError(f"epoch {epoch} outside [0, {total_epochs}]")
    lam = 1.0 - epoch / total_epochs
    return (1.0 - lam) * np.ones_like(w0) + lam * w0


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainHeadConfig:
    epochs: int = 70
    batch_size: int = 256
    lr0: float = 1.25e-3
    lr_e: float = 1.25e-4
    weight_decay: float = 1e-4
    decoupled_decay: bool = True
    patience: int = 5
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class HeadTrainResult:
    params: dict[str, np.ndarray]
    norm_stats: NormStats
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    class_order: tuple[str, ...] = CLASS_ORDER


def split_train_val_subjects(rows, val_fraction: float, seed: int):
    """Deterministic subject-level split of dev rows into train and val."""
    subjects = sorted({r.subject_id for r in rows})
    if len(subjects) < 2:
        raise MarginHeadError("need at least two subjects to carve a validation split")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x76616c])))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_val = max(1, round(val_fraction * len(subjects)))
    n_val = min(n_val, len(subjects) - 1)
    val_subjects = set(order[:n_val])
    train = [r for r in rows if r.subject_id not in val_subjects]
    val = [r for r in rows if r.subject_id in val_subjects]
    return train, val


def collect_doc_patches(store: EmbeddingStore, rows) -> dict[str, list[str]]:
    """Base (unaugmented) patch ids per document, sorted for determinism."""
    by_doc: dict[str, list[str]] = {r.doc_id: [] for r in rows}
    for pid in store.ids():
        if "#a" in pid:
            continue
        doc = pid.rsplit("/", 1)[0]
        if doc in by_doc:
            by_doc[doc].append(pid)
    empty = [d for d, pids in by_doc.items() if not pids]
    if empty:
        raise MarginHeadError(f"{len(empty)} documents have no patches in the store: {empty[:5]}")
    for pids in by_doc.values():
        pids.sort()
    return by_doc


def _dataset_arrays(store: EmbeddingStore, rows, by_doc):
    ids: list[str] = []
    labels: list[int] = []
    for r in rows:
        for pid in by_doc[r.doc_id]:
            ids.append(pid)
            labels.append(CLASS_ORDER.index(r.label))
    X = store.batch_lookup(ids)
    y = np.asarray(labels, dtype=np.int64)
    variants = {}
    for i, pid in enumerate(ids):
        vs = store.variants_of(pid)
        if len(vs) > 1:
            variants[i] = store.batch_lookup(vs)
    return X, y, variants


def train_head(
    store: EmbeddingStore,
    rows,
    cfg: HeadConfig,
    tcfg: TrainHeadConfig,
) -> HeadTrainResult:
    """Train the margin head on dev documents with early stopping.

    Validation documents are carved out subject-disjoint. The validation
    loss used for model selection is the unweighted objective, so epochs
    remain comparable while the class-weight schedule moves.
    """
    train_rows, val_rows = split_train_val_subjects(rows, tcfg.val_fraction, tcfg.seed)
    by_doc = collect_doc_patches(store, rows)
    X_tr, y_tr, variants = _dataset_arrays(store, train_rows, by_doc)
    X_va, y_va, _ = _dataset_arrays(store, val_rows, by_doc)
    if X_tr.shape[0] == 0 or X_va.shape[0] == 0:
        raise MarginHeadError("empty train or validation patch set")

    counts = np.bincount(y_tr, minlength=cfg.n_classes)
    w0 = initial_class_weights(counts, cfg.weight_norm)

    params = init_head(cfg, tcfg.seed)
    state = AdamState()
    acfg = AdamConfig(weight_decay=tcfg.weight_decay, decoupled=tcfg.decoupled_decay)
    steps_per_epoch = max(1, math.ceil(X_tr.shape[0] / tcfg.batch_size))
    sched = LrSchedule(
        alpha0=tcfg.lr0, alpha_e=tcfg.lr_e, warmup_steps=0,
        total_steps=tcfg.epochs * steps_per_epoch,
    )
    stats = NormStats()
    result = HeadTrainResult(params={k: v.copy() for k, v in params.items()}, norm_stats=stats)
    epoch_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([tcfg.seed, 0x65706f63])))

    stale = 0
    step = 0
    for epoch in range(tcfg.epochs):
        w_t = class_weights_at(w0, epoch, tcfg.epochs, cfg.weight_mode)
        perm = epoch_rng.permutation(X_tr.shape[0])
        train_losses = []
        for start in range(0, perm.size, tcfg.batch_size):
            idx = perm[start : start + tcfg.batch_size]
            xb = X_tr[idx]
            if variants:
                xb = xb.copy()
                for j, i in enumerate(idx):
                    pool = variants.get(int(i))
                    if pool is not None:
                        xb[j] = pool[epoch_rng.integers(pool.shape[0])]
            loss_t, grads = _train_step_graph(params, xb, y_tr[idx], cfg, w_t, stats)
            adam_step(params, grads, state, lr_at(sched, step), acfg)
            renormalize_prototypes(params)
            step += 1
            train_losses.append(float(loss_t))
        val_loss = evaluate_loss(params, X_va, y_va, cfg, stats, tcfg.batch_size)
        result.log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(train_losses)),
                "val_loss": val_loss,
                "lr": lr_at(sched, min(step, sched.total_steps)),
                "lambda_t": 1.0 - epoch / tcfg.epochs,
                "w_t": [float(v) for v in w_t],
            }
        )
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    return result


def _train_step_graph(params, xb, yb, cfg, w_t, stats: NormStats):
    P = ad.parameter(params["projection"], name="projection")
    b = ad.parameter(params["bias"], name="bias")
    W = ad.parameter(params["prototypes"], name="prototypes")
    z = project_graph(P, b if cfg.use_bias else None, ad.constant(xb, name="x"))
    norm_hat = None
    if cfg.loss == "adaface":
        norms = np.linalg.norm(z.value, axis=1)
        stats.update(norms)
        norm_hat = stats.normalized(norms)
    B = xb.shape[0]
    onehot = np.zeros((B, cfg.n_classes))
    onehot[np.arange(B), yb] = 1.0
    cos = cosine_graph(z, W)
    logits = margin_logits_graph(cos, onehot, cfg, norm_hat)
    per_sample = softmax_margin_loss_graph(logits, onehot)
    loss = weighted_mean_loss_graph(per_sample, w_t[yb])
    ad.backward(loss)
    grads = {"projection": P.grad, "bias": b.grad, "prototypes": W.grad}
    if grads["bias"] is None:
        grads["bias"] = np.zeros_like(params["bias"])
    return loss.value, grads


def evaluate_loss(params, X, y, cfg, stats: NormStats, batch_size: int = 256) -> float:
    """Unweighted mean margin loss without updating norm statistics."""
    total = 0.0
    for start in range(0, X.shape[0], batch_size):
        xb = X[start : start + batch_size]
        yb = y[start : start + batch_size]
        tensors = [
            ad.constant(params["projection"]),
            ad.constant(params["bias"]),
            ad.constant(params["prototypes"]),
        ]
        norm_hat = None
        if cfg.loss == "adaface":
            z = project(params, xb, cfg)
            norm_hat = stats.normalized(np.linalg.norm(z, axis=1))
        loss = head_loss_graph(tensors, xb, yb, cfg, norm_hat=norm_hat)
        total += float(loss.value) * xb.shape[0]
    return total / X.shape[0]


# ---------------------------------------------------------------------------
# checkpoint glue


def head_to_checkpoint(result: HeadTrainResult, cfg: HeadConfig) -> tuple[dict, dict]:
    tensors = dict(result.params)
    meta = {
        "kind": "margin_head",
        "config": {
            "input_dim": cfg.input_dim,
            "embed_dim": cfg.embed_dim,
            "n_classes": cfg.n_classes,
            "loss": cfg.loss,
            "margin": cfg.margin,
            "scale": cfg.scale,
            "cosface_form": cfg.cosface_form,
            "adaface_subtraction": cfg.adaface_subtraction,
            "weight_mode": cfg.weight_mode,
            "weight_norm": cfg.weight_norm,
            "use_bias": cfg.use_bias,
        },
        "norm_stats": {
            "mean": result.norm_stats.mean,
            "std": result.norm_stats.std,
            "initialized": result.norm_stats.initialized,
        },
        "best_epoch": result.best_epoch,
        "class_order": list(result.class_order),
    }
    return tensors, meta


def head_from_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> tuple[dict[str, np.ndarray], HeadConfig]:
    if meta.get("kind") != "margin_head":
        raise MarginHeadError(f"checkpoint is not a margin head: kind={meta.get('kind')!r}")
    cfg = HeadConfig(**meta["config"])
    return {k: tensors[k] for k in ("projection", "bias", "prototypes")}, cfg
