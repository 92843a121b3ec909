import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .data import Dataset
from .hsic import hsic_biased
from .networks import ClassifierParams, UNetParams, classifier_heads, unet_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)

Transform = Union[None, UNetParams, Callable[[Tensor], Tensor]]


@dataclass
class MetricsReport:
    ap: float
    dp: float
    deo: float
    n_evaluated: int
    threshold: float = 0.5
    transform: str = "original"

    def __post_init__(self):
        if self.n_evaluated <= 0:
            raise ValueError("A report needs at least one evaluated example")


@dataclass
class SpilloverRow:
    attribute: str
    hsic_with_target: float
    dp_original: float
    dp_reconstructed: float
    dp_delta_abs: float
    category: str = "all"
    ap_original: float = float("nan")
    ap_reconstructed: float = float("nan")
    deo_original: float = float("nan")
    deo_reconstructed: float = float("nan")


@dataclass
class CategorySummary:
    category: str
    n_attributes: int
    ap_original: float
    ap_reconstructed: float
    dp_original: float
    dp_reconstructed: float
    deo_original: float
    deo_reconstructed: float


def _binary(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be 0/1 valued")
    return arr.astype(np.int64)


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of each positive, ranking by descending
    score with ties broken by ascending original index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary("labels", labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in shape: {scores.shape} vs {labels.shape}")
    if labels.sum() == 0:
        raise ValueError("average_precision needs at least one positive label")

    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.cumsum(hits)[ranks - 1] / ranks
    return float(precision.mean())


def demographic_parity_gap(preds, s) -> float:
    "|P(pred=1 | s=0) - P(pred=1 | s=1)|"
    preds, s = _binary("preds", preds), _binary("s", s)
    if not np.any(s == 0) or not np.any(s == 1):
        raise ValueError("Both protected groups must be non-empty")
    return float(abs(preds[s == 0].mean() - preds[s == 1].mean()))


def deo(preds, labels, s) -> float:
    "Absolute difference of the group-wise true positive rates."
    preds, labels, s = _binary("preds", preds), _binary("labels", labels), _binary("s", s)
    rates = []
    for group in (0, 1):
        positives = (s == group) & (labels == 1)
        if not np.any(positives):
            raise ValueError(f"Group s={group} has no positive labels")
        rates.append(preds[positives].mean())
    return float(abs(rates[0] - rates[1]))


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two equal-length vectors of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def identity_transform(batch: Tensor) -> Tensor:
    return batch


def _apply(transform: Transform, batch: Tensor) -> Tensor:
    if transform is None:
        return batch
    if isinstance(transform, UNetParams):
        return unet_forward(transform, batch)
    return transform(batch)


def transform_images(transform: Transform, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    "Apply a transform chunk by chunk, without recording gradients."
    if transform is None:
        return images
    chunks = [
        _apply(transform, Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(chunks) if chunks else images


def predict(
    classifier: ClassifierParams,
    images: np.ndarray,
    transform: Transform = None,
    batch_size: int = 256,
    head: int = 0,
) -> np.ndarray:
    "Probabilities of one classifier head, optionally after transforming the images."
    scores = []
    for i in range(0, len(images), batch_size):
        batch = _apply(transform, Tensor(images[i : i + batch_size]))
        scores.append(classifier_heads(classifier, batch)[head].data)
    return np.concatenate(scores)


def evaluate(
    classifier: ClassifierParams,
    transform: Transform,
    test: Dataset,
    threshold: float = 0.5,
    batch_size: int = 256,
    name: Optional[str] = None,
) -> MetricsReport:
    """AP of raw h1 scores against y; DP and DEO of h1 thresholded at
    `threshold`. Images pass through `transform` (the U-net) first if given."""
    if len(test) == 0:
        raise ValueError("Cannot evaluate on an empty test set")
    scores = predict(classifier, test.images, transform, batch_size)
    preds = (scores >= threshold).astype(np.int64)
    if name is None:
        name = "original" if transform is None or transform is identity_transform else "reconstructed"
    report = MetricsReport(
        ap=average_precision(scores, test.y),
        dp=demographic_parity_gap(preds, test.s),
        deo=deo(preds, test.y, test.s),
        n_evaluated=len(test),
        threshold=threshold,
        transform=name,
    )
    logger.info(f"Evaluated {name}: AP={report.ap:.4f} DP={report.dp:.4f} DEO={report.deo:.4f}")
    return report


def _safe(metric: Callable[..., float], *args) -> float:
    try:
        return metric(*args)
    except ValueError as e:
        logger.warning(f"{metric.__name__} undefined: {e}")
        return float("nan")


def spillover_report(
    train: Dataset,
    attribute_classifiers: Dict[str, ClassifierParams],
    unet: Transform,
    test: Dataset,
    threshold: float = 0.5,
    hsic_samples: Optional[int] = 1000,
    seed: int = 0,
    batch_size: int = 256,
) -> Tuple[List[SpilloverRow], float]:
    """Relate each attribute's dependence on the target to how much the
    reconstruction moves that attribute's demographic parity.

    hsic_with_target uses the training labels (a seeded subset of at most
    `hsic_samples` rows); DP is measured with each attribute's single-head
    classifier on original versus reconstructed test images.
    """
    if not attribute_classifiers:
        raise ValueError("spillover_report needs at least one attribute classifier")
    rows_for_hsic = np.arange(len(train))
    if hsic_samples is not None and len(train) > hsic_samples:
        rows_for_hsic = np.sort(np.random.default_rng(seed).choice(len(train), hsic_samples, replace=False))
    reconstructed = transform_images(unet, test.images, batch_size)

    rows = []
    for name, classifier in attribute_classifiers.items():
        labels = train.label(name)[rows_for_hsic]
        dependence = hsic_biased(labels, train.y[rows_for_hsic]).value

        test_labels = test.label(name)
        scores_orig = predict(classifier, test.images, None, batch_size)
        scores_recon = predict(classifier, reconstructed, None, batch_size)
        preds_orig = (scores_orig >= threshold).astype(np.int64)
        preds_recon = (scores_recon >= threshold).astype(np.int64)
        dp_orig = demographic_parity_gap(preds_orig, test.s)
        dp_recon = demographic_parity_gap(preds_recon, test.s)

        category = test.aux_categories[test.aux_names.index(name)] if name in test.aux_names else "all"
        rows.append(
            SpilloverRow(
                attribute=name,
                hsic_with_target=dependence,
                dp_original=dp_orig,
                dp_reconstructed=dp_recon,
                dp_delta_abs=abs(dp_recon - dp_orig),
                category=category,
                ap_original=_safe(average_precision, scores_orig, test_labels),
                ap_reconstructed=_safe(average_precision, scores_recon, test_labels),
                deo_original=_safe(deo, preds_orig, test_labels, test.s),
                deo_reconstructed=_safe(deo, preds_recon, test_labels, test.s),
            )
        )
        logger.info(f"Spillover {name}: hsic={dependence:.5f} dp {dp_orig:.4f} -> {dp_recon:.4f}")

    # NaN when either column is constant or there is a single attribute
    r = _safe(pearson, [row.hsic_with_target for row in rows], [row.dp_delta_abs for row in rows])
    logger.info(f"Pearson(HSIC with target, |dDP|) = {r:.3f} over {len(rows)} attributes")
    return rows, r


def category_summary(rows: List[SpilloverRow]) -> List[CategorySummary]:
    "Uniform per-category averages of the per-attribute metrics, in first-seen category order."
    categories = list(dict.fromkeys(row.category for row in rows))
    summaries = []
    for category in categories:
        members = [row for row in rows if row.category == category]

        def mean(column: str) -> float:
            values = np.array([getattr(row, column) for row in members], dtype=np.float64)
            return float(np.nanmean(values)) if np.any(~np.isnan(values)) else float("nan")

        summaries.append(
            CategorySummary(
                category,
                len(members),
                mean("ap_original"),
                mean("ap_reconstructed"),
                mean("dp_original"),
                mean("dp_reconstructed"),
                mean("deo_original"),
                mean("deo_reconstructed"),
            )
        )
    return summaries
