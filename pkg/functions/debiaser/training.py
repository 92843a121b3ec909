"""Classifier pre-training and the HSIC-regularised U-net training loop.

The de-biaser minimises

    mean((x - U_w(x))^2) + lam * HSIC(h1(U_w(x)), h2(U_w(x)))

over the U-net weights w while the two-headed classifier h stays frozen.
"""
import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, TypeVar

import numpy as np

from .data import Dataset, batch_iter
from .hsic import hsic_node
from .networks import (
    ClassifierParams,
    ParamSet,
    UNetParams,
    classifier_forward,
    classifier_heads,
    init_classifier,
    init_unet,
    unet_forward,
)
from .tensor import Tape, Tensor, add, backward, bce_loss, mse_loss, scale

logger = logging.getLogger(__name__)

P = TypeVar("P", bound=ParamSet)

LOG_COLUMNS = ["epoch", "batch", "mse", "hsic", "total", "lr"]


@dataclass
class Hyperparams:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lr_step: int = 7
    lr_gamma: float = 0.1
    epochs: int = 5
    batch_size: int = 64
    lam: float = 0.07
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "lr_step", "lr_gamma", "epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.momentum < 0:
            raise ValueError(f"momentum must be non-negative, got {self.momentum}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")


@dataclass
class LogRecord:
    epoch: int
    batch: int
    mse: float
    hsic: float
    total: float
    lr: float


@dataclass
class TrainLog:
    records: List[LogRecord] = field(default_factory=list)
    final_metrics: Optional[object] = None

    def epoch_mean(self, epoch: int, column: str = "mse") -> float:
        values = [getattr(r, column) for r in self.records if r.epoch == epoch]
        if not values:
            raise ValueError(f"No records for epoch {epoch}")
        return float(np.mean(values))

    def to_csv(self) -> str:
        with io.StringIO() as buffer:
            writer = csv.writer(buffer, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.epoch, r.batch] + [f"{getattr(r, c):.9g}" for c in ("mse", "hsic", "total", "lr")]
                )
            return buffer.getvalue()


@dataclass
class OptimState:
    velocity: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimState":
        return cls({name: np.zeros_like(value) for name, value in params.tensors.items()})


def step_lr(epoch: int, base_lr: float, step: int, gamma: float) -> float:
    "Step decay: base_lr * gamma ** floor(epoch / step)."
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return base_lr * gamma ** (epoch // step)


def sgd_step(
    params: P, grads: Dict[str, np.ndarray], state: OptimState, lr: float, momentum: float
) -> Tuple[P, OptimState]:
    """Classic momentum: v <- momentum * v + g; p <- p - lr * v.

    Returns new parameter and state objects; inputs are not modified.
    """
    if getattr(params, "frozen", False):
        raise ValueError("Refusing to update frozen parameters")
    tensors, velocity = {}, {}
    for name, value in params.tensors.items():
        grad = grads[name]
        if grad.shape != value.shape or state.velocity[name].shape != value.shape:
            raise ValueError(f"Shape mismatch for {name}: param {value.shape}, grad {grad.shape}")
        v = (momentum * state.velocity[name] + grad).astype(value.dtype)
        velocity[name] = v
        tensors[name] = (value - lr * v).astype(value.dtype)
    return params.with_tensors(tensors), OptimState(velocity)


def composite_loss(
    batch: Tensor,
    recon: Tensor,
    h1: Tensor,
    h2: Tensor,
    lam: float,
    sigma_h1: Optional[float] = None,
    sigma_h2: Optional[float] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, mse_part, hsic_part) with total = mse_part + lam * hsic_part.

    HSIC bandwidths default to the per-batch median heuristic of h1 and h2.
    """
    n = batch.shape[0]
    if n < 2:
        raise ValueError(f"composite_loss needs at least 2 samples, got {n}")
    mse_part = mse_loss(recon, batch)
    hsic_part = hsic_node(h1, h2, sigma_h1, sigma_h2)
    if lam == 0:
        return mse_part, mse_part, hsic_part
    return add(mse_part, scale(hsic_part, lam)), mse_part, hsic_part


def _check_two_classes(name: str, labels: np.ndarray):
    if len(np.unique(labels)) < 2:
        raise ValueError(f"Label column {name!r} is constant; classifier training is ill-posed")


def pretrain_classifier(
    train: Dataset, hyper: Hyperparams, targets: Optional[List[str]] = None
) -> ClassifierParams:
    """Fit the classifier by minimising the summed BCE of each head.

    `targets` names the attribute columns, one head each; the default is the
    (target, protected) pair. Returns frozen parameters.
    """
    if len(train) == 0:
        raise ValueError("Cannot pretrain on an empty dataset")
    targets = targets or [train.target_name, train.protected_name]
    columns = [train.label(name) for name in targets]
    for name, column in zip(targets, columns):
        _check_two_classes(name, column)

    params = init_classifier(hyper.seed, n_heads=len(targets))
    state = OptimState.zeros_like(params)
    for epoch in range(hyper.epochs):
        lr = step_lr(epoch, hyper.learning_rate, hyper.lr_step, hyper.lr_gamma)
        losses = []
        for batch in batch_iter(train, hyper.batch_size, hyper.seed + epoch):
            tape = Tape()
            heads = classifier_heads(params, Tensor(batch.images), tape)
            loss = None
            for head, name in zip(heads, targets):
                term = bce_loss(head, Tensor(batch.label(name).astype(np.float32)))
                loss = term if loss is None else add(loss, term)
            grads = backward(loss, tape)
            params, state = sgd_step(params, grads, state, lr, hyper.momentum)
            losses.append(loss.item())
        logger.info(f"Pretrain {'/'.join(targets)} epoch {epoch}: bce={np.mean(losses):.5f} lr={lr:g}")

    return params.freeze()


def train_debiaser(
    train: Dataset,
    classifier: ClassifierParams,
    hyper: Hyperparams,
    unet: Optional[UNetParams] = None,
) -> Tuple[UNetParams, TrainLog]:
    """Train the U-net against the frozen classifier.

    Each batch: reconstruct, score through the classifier, take the composite
    loss, backpropagate into the U-net only, and log the loss terms.
    """
    if not classifier.frozen:
        raise ValueError("The classifier must be frozen during de-biaser training")
    digest = classifier.digest()
    if unet is None:
        unet = init_unet(hyper.seed)
    state = OptimState.zeros_like(unet)
    log = TrainLog()

    for epoch in range(hyper.epochs):
        lr = step_lr(epoch, hyper.learning_rate, hyper.lr_step, hyper.lr_gamma)
        for index, batch in enumerate(batch_iter(train, hyper.batch_size, hyper.seed + epoch)):
            tape = Tape()
            x = Tensor(batch.images)
            recon = unet_forward(unet, x, tape)
            h1, h2 = classifier_forward(classifier, recon, tape)
            total, mse_part, hsic_part = composite_loss(x, recon, h1, h2, hyper.lam)
            grads = backward(total, tape)
            unet, state = sgd_step(unet, grads, state, lr, hyper.momentum)

            record = LogRecord(epoch, index, mse_part.item(), hsic_part.item(), total.item(), lr)
            log.records.append(record)
            logger.debug(f"epoch={epoch} batch={index} mse={record.mse:.6g} hsic={record.hsic:.6g}")

        logger.info(
            f"De-bias epoch {epoch}: mse={log.epoch_mean(epoch, 'mse'):.6f} "
            f"hsic={log.epoch_mean(epoch, 'hsic'):.6f} lam={hyper.lam:g} lr={lr:g}"
        )

    if classifier.digest() != digest:
        raise RuntimeError("Frozen classifier parameters changed during training")
    return unet, log

