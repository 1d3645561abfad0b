"""Stage-1 self-supervised training.

A student network fed small local crops is trained to match the
temperature-softened output distribution of a gradient-free teacher fed
large global crops; the teacher trails the student as an exponential
moving average of its weights. Centering (a running mean subtracted from
teacher logits before the softmax) keeps the outputs from collapsing onto
a single prototype and can be disabled to demonstrate the collapse.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .augment import ChannelStats, ViewSpec, make_views
from .data import ImageDataset
from .errors import ConfigError, ContractError, DomainError
from .seeding import derive_rng
from .tensor import Tensor
from .vit import ViTConfig, ViTModel, vit_forward

logger = logging.getLogger(__name__)

EMA_GRANULARITIES = ("per-epoch", "per-step")


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of the distillation objective and its optimizer."""

    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_coefficient: float = 0.9
    ema_granularity: str = "per-epoch"
    proto_dim: int = 256
    centering: bool = True
    center_momentum: float = 0.99
    epochs: int = 30
    batch_size: int = 16
    optimizer: str = "sgd"
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 2e-3
    clip_norm: float = 3.0
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.4)
    local_size: int = 0  # 0 means half the global view size
    p_flip: float = 0.5
    p_gray: float = 0.2
    extra_photometric: bool = False
    student_sees_globals: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.teacher_temp <= self.student_temp:
            raise ConfigError(
                f"need 0 < teacher_temp <= student_temp, got {self.teacher_temp} / {self.student_temp}"
            )
        if not 0.0 <= self.ema_coefficient <= 1.0:
            raise ConfigError(f"ema coefficient must lie in [0,1], got {self.ema_coefficient}")
        if self.ema_granularity not in EMA_GRANULARITIES:
            raise ConfigError(
                f"ema granularity must be one of {EMA_GRANULARITIES}, got {self.ema_granularity!r}"
            )
        if not 0.0 <= self.center_momentum < 1.0:
            raise ConfigError(f"center momentum must lie in [0,1), got {self.center_momentum}")
        if self.optimizer != "sgd":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if min(self.epochs, self.batch_size, self.n_global, self.n_local) < 1:
            raise ConfigError("epochs, batch size, and view counts must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    teacher_entropy: float
    lr_last: float
    n_batches: int
    skipped: int = 0


class TrainerState:
    """Student and teacher weights plus everything a resumed run needs."""

    def __init__(self, vit_config: ViTConfig, config: DistillConfig):
        if vit_config.proto_dim != config.proto_dim:
            raise ConfigError(
                f"backbone proto_dim {vit_config.proto_dim} != distill proto_dim {config.proto_dim}"
            )
        self.vit_config = vit_config
        self.config = config
        self.student = ViTModel(vit_config, seed=config.seed)
        self.teacher = self.student.copy()
        self.teacher.set_requires_grad(False)
        self.center = np.zeros(config.proto_dim, dtype=np.float32)
        self.epoch = 0
        self.step = 0
        self.velocities: dict[str, np.ndarray] = {}
        self.loss_history: list[tuple[int, int, float]] = []
        self.stats: ChannelStats | None = None


def teacher_probs(logits: Tensor, teacher_temp: float, center: np.ndarray | None = None) -> Tensor:
    """Temperature softmax of (logits - center); never joins the tape."""
    if not teacher_temp > 0:
        raise DomainError(f"teacher temperature must be positive, got {teacher_temp}")
    with T.no_grad():
        shifted = logits.data if center is None else logits.data - center
        return T.softmax_rows(Tensor(shifted), temperature=teacher_temp)


def student_log_probs(logits: Tensor, student_temp: float) -> Tensor:
    """Differentiable log-softmax of logits / student_temp."""
    if not student_temp > 0:
        raise DomainError(f"student temperature must be positive, got {student_temp}")
    return T.log_softmax_rows(logits, temperature=student_temp)


def _entropy(probs: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, None)
    return float(-(p * np.log(p)).sum(axis=-1).mean())


def distill_loss(
    teacher_probs_list: Sequence[Tensor],
    student_logits_list: Sequence[Tensor],
    config: DistillConfig,
) -> Tensor:
    """Mean cross-entropy over every (global view, local view) pair.

    Teacher rows act as soft targets and must be detached; the gradient
    reaches only the student logits. The mean (rather than Eq-style sum)
    keeps the learning rate independent of the view counts.
    """
    if not teacher_probs_list or not student_logits_list:
        raise ContractError("distill_loss needs nonempty teacher and student view sets")
    for t in teacher_probs_list:
        if t._pullback is not None or t.requires_grad:
            raise ContractError("teacher outputs must be detached from the tape")
    batch = teacher_probs_list[0].shape[0]
    terms: list[Tensor] = []
    for s_logits in student_logits_list:
        if s_logits.shape[0] != batch:
            raise ContractError(
                f"batch mismatch: teacher {batch} rows vs student {s_logits.shape[0]}"
            )
        log_p = student_log_probs(s_logits, config.student_temp)
        for t_probs in teacher_probs_list:
            terms.append(T.scale(T.tensor_sum(T.mul(t_probs, log_p)), -1.0 / batch))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return T.scale(total, 1.0 / len(terms))


def ema_update(teacher: ViTModel, student: ViTModel, coefficient: float) -> None:
    """teacher <- coefficient * teacher + (1 - coefficient) * student."""
    t_params = teacher.named_parameters()
    s_params = student.named_parameters()
    if len(t_params) != len(s_params):
        raise ContractError("teacher and student parameter lists differ in length")
    for (t_name, t_param), (s_name, s_param) in zip(t_params, s_params):
        if t_param.shape != s_param.shape:
            raise ContractError(
                f"parameter {t_name}: teacher shape {t_param.shape} vs student {s_param.shape}"
            )
        if coefficient == 1.0:
            continue
        if coefficient == 0.0:
            t_param.data = s_param.data.copy()
        else:
            t_param.data = coefficient * t_param.data + (1.0 - coefficient) * s_param.data


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """center <- momentum * center + (1 - momentum) * batch mean of logits."""
    if not 0.0 <= momentum < 1.0:
        raise DomainError(f"center momentum must lie in [0,1), got {momentum}")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(axis=0)
    return (momentum * center + (1.0 - momentum) * batch_mean).astype(center.dtype)


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class MomentumSGD:
    """SGD with momentum; velocity buffers live in the trainer state."""

    def __init__(self, named_params, velocities: dict, config: DistillConfig):
        self.named_params = named_params
        self.velocities = velocities
        self.momentum = config.momentum
        self.weight_decay = config.weight_decay
        self.clip_norm = config.clip_norm

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            grads[name] = g
        if self.clip_norm > 0:
            total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if total > self.clip_norm:
                ratio = self.clip_norm / total
                grads = {k: g * ratio for k, g in grads.items()}
        for name, p in self.named_params:
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + g
            self.velocities[name] = v
            p.data = p.data - lr * v


def _view_specs(vit_config: ViTConfig, config: DistillConfig) -> tuple[ViewSpec, ViewSpec]:
    global_size = vit_config.image_size
    local_size = config.local_size or max(vit_config.patch_size, global_size // 2)
    if local_size % vit_config.patch_size:
        raise ConfigError(
            f"local view size {local_size} not divisible by patch size {vit_config.patch_size}"
        )
    return (
        ViewSpec("global", config.n_global, config.global_scale, global_size),
        ViewSpec("local", config.n_local, config.local_scale, local_size),
    )


def train_epoch(state: TrainerState, dataset: ImageDataset, config: DistillConfig) -> EpochReport:
    """One pass over the dataset; mutates the state in place.

    Per batch: build crop sets, teacher forwards the globals without a
    tape, the student forwards the locals, backward through the pairwise
    loss, optimizer step, then center and (per-step) EMA updates. The
    per-epoch EMA fires once at the end.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    global_spec, local_spec = _view_specs(state.vit_config, config)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    order = derive_rng(config.seed, "order", state.epoch).permutation(n)
    optimizer = MomentumSGD(state.student.named_parameters(), state.velocities, config)

    losses: list[float] = []
    entropies: list[float] = []
    lr = config.learning_rate
    for start in range(0, n, config.batch_size):
        indices = order[start : start + config.batch_size]
        crops = [
            make_views(
                dataset.images[i],
                global_spec,
                local_spec,
                seed=int(derive_rng(config.seed, "aug", state.epoch, int(i)).integers(2**31)),
                source_id=dataset.ids[i],
                p_flip=config.p_flip,
                p_gray=config.p_gray,
                extra=config.extra_photometric,
            )
            for i in indices
        ]

        teacher_logit_arrays = []
        probs = []
        with T.no_grad():
            for g in range(config.n_global):
                batch_g = np.stack([c.globals_[g] for c in crops])
                _, logits, _ = vit_forward(state.teacher, batch_g)
                teacher_logit_arrays.append(logits.data)
                probs.append(
                    teacher_probs(
                        logits,
                        config.teacher_temp,
                        state.center if config.centering else None,
                    )
                )

        student_logits = []
        for l in range(config.n_local):
            batch_l = np.stack([c.locals_[l] for c in crops])
            _, logits, _ = vit_forward(state.student, batch_l)
            student_logits.append(logits)
        if config.student_sees_globals:
            for g in range(config.n_global):
                batch_g = np.stack([c.globals_[g] for c in crops])
                _, logits, _ = vit_forward(state.student, batch_g)
                student_logits.append(logits)

        loss = distill_loss(probs, student_logits, config)
        state.student.zero_grad()
        T.backward(loss)
        lr = cosine_lr(config.learning_rate, state.step, total_steps)
        optimizer.step(lr)

        if config.centering:
            state.center = update_center(
                state.center, np.concatenate(teacher_logit_arrays), config.center_momentum
            )
        if config.ema_granularity == "per-step":
            ema_update(state.teacher, state.student, config.ema_coefficient)

        value = float(loss.item())
        losses.append(value)
        entropies.append(float(np.mean([_entropy(p.data) for p in probs])))
        state.step += 1
        state.loss_history.append((state.epoch, state.step, value))

    if config.ema_granularity == "per-epoch":
        ema_update(state.teacher, state.student, config.ema_coefficient)
    state.epoch += 1
    report = EpochReport(
        epoch=state.epoch,
        mean_loss=float(np.mean(losses)),
        teacher_entropy=float(np.mean(entropies)),
        lr_last=lr,
        n_batches=len(losses),
        skipped=dataset.skipped,
    )
    logger.info(
        "epoch %d: loss %.4f, teacher entropy %.3f nats, lr %.4g",
        report.epoch,
        report.mean_loss,
        report.teacher_entropy,
        report.lr_last,
    )
    return report


def pretrain(
    state: TrainerState, dataset: ImageDataset, config: DistillConfig, epochs: int | None = None
) -> list[EpochReport]:
    """Run ``epochs`` training epochs (default: the configured count)."""
    if state.stats is None:
        state.stats = dataset.stats
    reports = []
    for _ in range(config.epochs if epochs is None else epochs):
        reports.append(train_epoch(state, dataset, config))
    return reports


def extract_cls_embeddings(model: ViTModel, images, batch_size: int = 64) -> np.ndarray:
    """Teacher/student class-token embeddings for standardized images."""
    chunks = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            batch = np.stack(images[start : start + batch_size])
            cls, _, _ = vit_forward(model, batch)
            chunks.append(cls.data)
    return np.concatenate(chunks, axis=0)


class SelfDistillationPretrainer(BaseEstimator, TransformerMixin):
    """Estimator facade over the two-network pretraining loop.

    ``fit`` treats X as an array or list of images (labels are ignored);
    ``transform`` maps images to the teacher's class-token embeddings.
    """

    def __init__(
        self,
        preset: str = "tiny",
        channels: int = 3,
        proto_dim: int = 256,
        teacher_temp: float = 0.04,
        student_temp: float = 0.1,
        ema_coefficient: float = 0.9,
        ema_granularity: str = "per-epoch",
        centering: bool = True,
        center_momentum: float = 0.99,
        epochs: int = 30,
        batch_size: int = 16,
        learning_rate: float = 0.02,
        momentum: float = 0.9,
        weight_decay: float = 2e-3,
        clip_norm: float = 3.0,
        n_global: int = 2,
        n_local: int = 8,
        student_sees_globals: bool = False,
        seed: int = 0,
    ):
        self.preset = preset
        self.channels = channels
        self.proto_dim = proto_dim
        self.teacher_temp = teacher_temp
        self.student_temp = student_temp
        self.ema_coefficient = ema_coefficient
        self.ema_granularity = ema_granularity
        self.centering = centering
        self.center_momentum = center_momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.n_global = n_global
        self.n_local = n_local
        self.student_sees_globals = student_sees_globals
        self.seed = seed

    def _configs(self) -> tuple[ViTConfig, DistillConfig]:
        vit_config = ViTConfig.from_preset(
            self.preset, channels=self.channels, proto_dim=self.proto_dim
        )
        config = DistillConfig(
            teacher_temp=self.teacher_temp,
            student_temp=self.student_temp,
            ema_coefficient=self.ema_coefficient,
            ema_granularity=self.ema_granularity,
            proto_dim=self.proto_dim,
            centering=self.centering,
            center_momentum=self.center_momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            n_global=self.n_global,
            n_local=self.n_local,
            student_sees_globals=self.student_sees_globals,
            seed=self.seed,
        )
        return vit_config, config

    def fit(self, X, y=None):
        vit_config, config = self._configs()
        dataset = ImageDataset.from_arrays(X, base_size=vit_config.image_size)
        state = TrainerState(vit_config, config)
        reports = pretrain(state, dataset, config)
        self.state_ = state
        self.reports_ = reports
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise NotFittedError("fit the pretrainer before calling transform")
        dataset = ImageDataset.from_arrays(
            X, base_size=self.state_.vit_config.image_size, stats=self.state_.stats
        )
        return extract_cls_embeddings(self.state_.teacher, dataset.images)
