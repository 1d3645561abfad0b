"""Stage-2 supervised evaluation: splits, linear probing, ablation sweeps.

The probe is a single affine layer trained with multinomial cross-entropy
on frozen backbone features (or jointly with a backbone copy in
end-to-end mode). Model selection picks the epoch with the best
validation macro AUC.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .data import ImageDataset, Manifest
from .distill import MomentumSGD, DistillConfig, extract_cls_embeddings
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .metrics import AblationCell, EvalReport, MetricsEntry, macro_metrics
from .seeding import derive_rng
from .tensor import Tensor
from .vit import ViTModel, vit_forward

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    """Stratified train/val/test fractions; defaults follow the 60/20/20 protocol."""

    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"fractions must be three nonnegative values, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {self.fractions}")


def _largest_remainder(n: int, fractions) -> list[int]:
    exact = [f * n for f in fractions]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    short = n - sum(counts)
    for idx in sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))[:short]:
        counts[idx] += 1
    return counts


def stratified_split(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Split into train/val/test, per class within 1 sample of the fractions.

    Uses largest-remainder rounding per (dataset, class) group; groups are
    shuffled deterministically by the spec seed. Classes with fewer than 3
    samples are rejected by name.
    """
    groups: dict[tuple[str, int], list[int]] = {}
    for idx, record in enumerate(manifest):
        groups.setdefault((record.dataset, record.label), []).append(idx)
    for (dataset, label), members in sorted(groups.items()):
        if len(members) < 3:
            raise DomainError(
                f"class {label} of dataset {dataset!r} has only {len(members)} samples (need >= 3)"
            )
    assigned: dict[int, int] = {}
    for (dataset, label), members in sorted(groups.items()):
        members = list(members)
        if spec.stratified:
            order = derive_rng(spec.seed, "split", dataset, label).permutation(len(members))
            members = [members[i] for i in order]
        counts = _largest_remainder(len(members), spec.fractions)
        cursor = 0
        for part, count in enumerate(counts):
            for idx in members[cursor : cursor + count]:
                assigned[idx] = part
            cursor += count
    parts: list[list] = [[], [], []]
    for idx, record in enumerate(manifest):
        parts[assigned[idx]].append(record)
    return tuple(manifest.subset(p) for p in parts)


def subsample_stratified(manifest: Manifest, fraction: float, seed: int) -> Manifest | None:
    """Per-class subsample at ``fraction``; None when any class vanishes."""
    if not 0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must lie in (0,1], got {fraction}")
    if fraction == 1.0:
        return manifest
    groups: dict[tuple[str, int], list[int]] = {}
    for idx, record in enumerate(manifest):
        groups.setdefault((record.dataset, record.label), []).append(idx)
    keep: set[int] = set()
    for (dataset, label), members in sorted(groups.items()):
        count = int(round(fraction * len(members)))
        if count == 0:
            return None
        order = derive_rng(seed, "subsample", dataset, label).permutation(len(members))
        keep.update(members[i] for i in order[:count])
    return manifest.subset([r for i, r in enumerate(manifest) if i in keep])


def resolve_splits(
    manifest: Manifest, spec: SplitSpec, val_fraction: float = 0.2
) -> tuple[Manifest, Manifest, Manifest]:
    """Honor explicit split tags when present, else stratify by the spec.

    A tagged manifest without a val part donates ``val_fraction`` of its
    train records (stratified) to validation.
    """
    tags = {r.split for r in manifest}
    if "train" in tags and "test" in tags:
        train = manifest.filter_split("train")
        val = manifest.filter_split("val")
        test = manifest.filter_split("test")
        if len(val) == 0 and val_fraction > 0:
            carve = SplitSpec(
                fractions=(1.0 - val_fraction, val_fraction, 0.0),
                seed=spec.seed,
                stratified=spec.stratified,
            )
            train, val, _ = stratified_split(train, carve)
        return train, val, test
    return stratified_split(manifest, spec)


# ---------------------------------------------------------------------------
# feature extraction


def extract_features(
    model: ViTModel, manifest: Manifest, base_size: int, stats
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Class-token features of the (teacher) model, rows in manifest order.

    Only standardization is applied; undecodable images are skipped with a
    warning by the dataset loader.
    """
    dataset = ImageDataset.from_manifest(manifest, base_size=base_size, stats=stats)
    features = extract_cls_embeddings(model, dataset.images)
    return features, dataset.labels, dataset.dataset_names


# ---------------------------------------------------------------------------
# the linear probe


class LinearProbeClassifier(BaseEstimator, ClassifierMixin):
    """Single affine layer over frozen features, softmax cross-entropy loss.

    Features are standardized with train-split statistics (an affine
    reparameterization, so the model stays a single linear layer). Dropout
    is applied to features during training only. When a validation set is
    given to ``fit``, the epoch with the best validation macro AUC wins.
    """

    def __init__(
        self,
        n_classes: int | None = None,
        dropout_rate: float = 0.0,
        learning_rate: float = 0.5,
        epochs: int = 200,
        weight_decay: float = 1e-3,
        seed: int = 0,
    ):
        self.n_classes = n_classes
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0,1), got {self.dropout_rate}")
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ShapeError(f"X {X.shape} does not match {y.shape[0]} labels")
        if X.shape[0] == 0:
            raise ContractError("cannot fit a probe on an empty split")
        n_classes = self.n_classes or int(y.max()) + 1
        n, d = X.shape

        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Xs = (X - self.mean_) / self.scale_
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y] = 1.0

        rng = derive_rng(self.seed, "probe-dropout")
        weight = Tensor(np.zeros((d, n_classes)), requires_grad=True)
        bias = Tensor(np.zeros(n_classes), requires_grad=True)
        target = Tensor(onehot)

        best = (-np.inf, 0)
        best_params = (weight.data.copy(), bias.data.copy())
        history = []
        for epoch in range(self.epochs):
            feats = Xs
            if self.dropout_rate > 0:
                mask = rng.uniform(size=Xs.shape) >= self.dropout_rate
                feats = Xs * mask / (1.0 - self.dropout_rate)
            logits = T.matmul(Tensor(feats), weight) + bias
            loss = T.scale(
                T.tensor_sum(T.mul(T.log_softmax_rows(logits), target)), -1.0 / n
            )
            weight.zero_grad()
            bias.zero_grad()
            T.backward(loss)
            weight.data = weight.data - self.learning_rate * (
                weight.grad + self.weight_decay * weight.data
            )
            bias.data = bias.data - self.learning_rate * bias.grad

            if X_val is not None and len(X_val):
                self.weight_ = weight.data
                self.bias_ = bias.data
                self.n_classes_ = n_classes
                val_auc = macro_metrics(self.predict_proba(X_val), y_val, n_classes).auc
                history.append(val_auc)
                if val_auc > best[0]:
                    best = (val_auc, epoch)
                    best_params = (weight.data.copy(), bias.data.copy())

        if X_val is not None and len(X_val):
            self.weight_, self.bias_ = best_params
            self.val_auc_, self.best_epoch_ = best
            self.val_history_ = history
        else:
            self.weight_ = weight.data
            self.bias_ = bias.data
            self.val_auc_, self.best_epoch_ = float("nan"), self.epochs - 1
            self.val_history_ = history
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "weight_"):
            raise NotFittedError("fit the probe before predicting")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weight_.shape[0]:
            raise ShapeError(f"X {X.shape} does not match probe width {self.weight_.shape[0]}")
        logits = (X - self.mean_) / self.scale_ @ self.weight_ + self.bias_
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def predict_probs(probe: LinearProbeClassifier, features: np.ndarray) -> np.ndarray:
    """Class probabilities from features; rows sum to 1, dropout disabled."""
    return probe.predict_proba(features)


def predict_from_images(
    probe: LinearProbeClassifier, backbone: ViTModel, images
) -> np.ndarray:
    return probe.predict_proba(extract_cls_embeddings(backbone, images))


# ---------------------------------------------------------------------------
# probe training over a backbone (frozen / end-to-end)


@dataclass(frozen=True)
class ProbeHyperparams:
    learning_rate: float = 0.5
    epochs: int = 200
    weight_decay: float = 1e-3
    e2e_learning_rate: float = 0.02
    e2e_epochs: int = 8
    e2e_batch_size: int = 16
    e2e_momentum: float = 0.9
    seed: int = 0


@dataclass
class ProbeData:
    """Everything probe training needs, with optional cached features."""

    backbone: ViTModel
    images_train: list
    y_train: np.ndarray
    images_val: list
    y_val: np.ndarray
    n_classes: int
    features_train: np.ndarray | None = None
    features_val: np.ndarray | None = None

    def train_features(self) -> np.ndarray:
        if self.features_train is None:
            self.features_train = extract_cls_embeddings(self.backbone, self.images_train)
        return self.features_train

    def val_features(self) -> np.ndarray:
        if self.features_val is None:
            self.features_val = extract_cls_embeddings(self.backbone, self.images_val)
        return self.features_val


@dataclass
class ProbeResult:
    probe: LinearProbeClassifier
    backbone: ViTModel
    mode: str
    val_auc: float
    best_epoch: int


PROBE_MODES = ("frozen", "end_to_end")


def train_probe(
    data: ProbeData, mode: str, dropout_rate: float, hp: ProbeHyperparams
) -> ProbeResult:
    """Fit the probe; ``end_to_end`` also fine-tunes a copy of the backbone.

    Frozen mode never touches the backbone, it trains on extracted
    features only. Both modes select the best epoch by validation AUC.
    """
    if mode not in PROBE_MODES:
        raise ConfigError(f"probe mode must be one of {PROBE_MODES}, got {mode!r}")
    if len(data.images_train) == 0 and data.features_train is None:
        raise ContractError("empty training split")
    if mode == "frozen":
        probe = LinearProbeClassifier(
            n_classes=data.n_classes,
            dropout_rate=dropout_rate,
            learning_rate=hp.learning_rate,
            epochs=hp.epochs,
            weight_decay=hp.weight_decay,
            seed=hp.seed,
        )
        probe.fit(data.train_features(), data.y_train, data.val_features(), data.y_val)
        return ProbeResult(
            probe=probe,
            backbone=data.backbone,
            mode=mode,
            val_auc=probe.val_auc_,
            best_epoch=probe.best_epoch_,
        )
    return _train_end_to_end(data, dropout_rate, hp)


def _train_end_to_end(data: ProbeData, dropout_rate: float, hp: ProbeHyperparams) -> ProbeResult:
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0,1), got {dropout_rate}")
    backbone = data.backbone.copy()
    d = backbone.config.d_model
    n_classes = data.n_classes
    n = len(data.images_train)
    rng = derive_rng(hp.seed, "e2e")
    weight = Tensor(np.zeros((d, n_classes), dtype=np.float32), requires_grad=True)
    bias = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True)
    onehot = np.zeros((n, n_classes), dtype=np.float32)
    onehot[np.arange(n), data.y_train] = 1.0

    params = backbone.named_parameters() + [("probe.w", weight), ("probe.b", bias)]
    sgd_config = DistillConfig(
        learning_rate=hp.e2e_learning_rate,
        momentum=hp.e2e_momentum,
        weight_decay=hp.weight_decay,
        clip_norm=3.0,
    )
    optimizer = MomentumSGD(params, {}, sgd_config)

    def val_auc_now() -> float:
        feats = extract_cls_embeddings(backbone, data.images_val)
        logits = feats @ weight.data + bias.data
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return macro_metrics(e / e.sum(axis=1, keepdims=True), data.y_val, n_classes).auc

    best = (-np.inf, -1)
    best_arrays = (backbone.state_arrays(), weight.data.copy(), bias.data.copy())
    for epoch in range(hp.e2e_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.e2e_batch_size):
            idx = order[start : start + hp.e2e_batch_size]
            batch = np.stack([data.images_train[i] for i in idx])
            cls, _, _ = vit_forward(backbone, batch)
            if dropout_rate > 0:
                mask = (rng.uniform(size=cls.shape) >= dropout_rate) / (1.0 - dropout_rate)
                cls = T.mul(cls, Tensor(mask.astype(np.float32)))
            logits = T.matmul(cls, weight) + bias
            loss = T.scale(
                T.tensor_sum(T.mul(T.log_softmax_rows(logits), Tensor(onehot[idx]))),
                -1.0 / len(idx),
            )
            for _, p in params:
                p.zero_grad()
            T.backward(loss)
            optimizer.step(hp.e2e_learning_rate)
        auc = val_auc_now()
        if auc > best[0]:
            best = (auc, epoch)
            best_arrays = (backbone.state_arrays(), weight.data.copy(), bias.data.copy())

    backbone.load_state_arrays(best_arrays[0])
    probe = LinearProbeClassifier(n_classes=n_classes, dropout_rate=dropout_rate)
    probe.weight_ = best_arrays[1].astype(np.float64)
    probe.bias_ = best_arrays[2].astype(np.float64)
    probe.mean_ = np.zeros(d)
    probe.scale_ = np.ones(d)
    probe.n_classes_ = n_classes
    probe.classes_ = np.arange(n_classes)
    return ProbeResult(
        probe=probe, backbone=backbone, mode="end_to_end", val_auc=best[0], best_epoch=best[1]
    )


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass(frozen=True)
class AblationGrid:
    fractions: tuple[float, ...] = (0.065, 0.10, 0.25, 0.50, 0.75, 1.0)
    dropouts: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5)
    modes: tuple[str, ...] = PROBE_MODES


def ablation_sweep(
    backbone: ViTModel,
    train_manifest: Manifest,
    val_manifest: Manifest,
    test_manifest: Manifest,
    grid: AblationGrid,
    hp: ProbeHyperparams,
    base_size: int,
    stats,
) -> EvalReport:
    """Label-fraction x dropout x mode sweep, evaluated on the held-out test split.

    Features for frozen cells are extracted once per dataset and reused.
    Cells whose subsample loses a class entirely are marked skipped.
    """
    report = EvalReport()
    train_ds = ImageDataset.from_manifest(train_manifest, base_size=base_size, stats=stats)
    val_ds = ImageDataset.from_manifest(val_manifest, base_size=base_size, stats=stats)
    test_ds = ImageDataset.from_manifest(test_manifest, base_size=base_size, stats=stats)
    feats_train = extract_cls_embeddings(backbone, train_ds.images)
    feats_val = extract_cls_embeddings(backbone, val_ds.images)
    feats_test = extract_cls_embeddings(backbone, test_ds.images)

    for dataset_name in train_manifest.datasets():
        n_classes = train_manifest.class_counts[dataset_name]
        tr_idx = [i for i, d in enumerate(train_ds.dataset_names) if d == dataset_name]
        va_idx = [i for i, d in enumerate(val_ds.dataset_names) if d == dataset_name]
        te_idx = [i for i, d in enumerate(test_ds.dataset_names) if d == dataset_name]
        tr_records = [r for r in train_manifest if r.dataset == dataset_name]
        for fraction in grid.fractions:
            sub = subsample_stratified(
                train_manifest.subset(tr_records), fraction, seed=hp.seed
            )
            if sub is None:
                for dropout in grid.dropouts:
                    for mode in grid.modes:
                        report.cells.append(
                            AblationCell(dataset_name, fraction, dropout, mode, "skipped")
                        )
                continue
            chosen = {r.path for r in sub}
            rows = [i for i, r in zip(tr_idx, tr_records) if r.path in chosen]
            for dropout in grid.dropouts:
                for mode in grid.modes:
                    data = ProbeData(
                        backbone=backbone,
                        images_train=[train_ds.images[i] for i in rows],
                        y_train=train_ds.labels[rows],
                        images_val=[val_ds.images[i] for i in va_idx],
                        y_val=val_ds.labels[va_idx],
                        n_classes=n_classes,
                        features_train=feats_train[rows] if mode == "frozen" else None,
                        features_val=feats_val[va_idx] if mode == "frozen" else None,
                    )
                    result = train_probe(data, mode, dropout, hp)
                    if mode == "frozen":
                        probs = result.probe.predict_proba(feats_test[te_idx])
                    else:
                        probs = predict_from_images(
                            result.probe, result.backbone, [test_ds.images[i] for i in te_idx]
                        )
                    entry = macro_metrics(probs, test_ds.labels[te_idx], n_classes)
                    report.cells.append(
                        AblationCell(dataset_name, fraction, dropout, mode, "ok", entry)
                    )
                    logger.info(
                        "ablation %s frac=%.3f dropout=%.1f %s: auc=%.4f",
                        dataset_name,
                        fraction,
                        dropout,
                        mode,
                        entry.auc,
                    )
    return report
