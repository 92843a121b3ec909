"""Kernel independence measures.

The Hilbert-Schmidt independence criterion is the squared Hilbert-Schmidt
norm of the cross-covariance operator between two RKHSs. For n paired
samples it is estimated (biased) as

    HSIC = (n - 1)^-2 tr(K H L H)

with K, L the Gaussian RBF Gram matrices of the two samples and
H = I - 1/n the centering matrix. Everything here runs in float64.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .tensor import Tensor, custom_op

logger = logging.getLogger(__name__)


@dataclass
class GramMatrix:
    values: np.ndarray
    bandwidth_sigma: float

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class HsicResult:
    value: float
    n: int
    sigma_a: float
    sigma_b: float
    raw: float = 0.0


@dataclass
class PermutationResult:
    observed: float
    p_value: float
    percentile_95: float
    percentile_99: float
    null: np.ndarray = field(repr=False, default=None)


def as_samples(samples) -> np.ndarray:
    "Coerce scalars-per-sample or vectors-per-sample into an (n, d) float64 array."
    if isinstance(samples, Tensor):
        samples = samples.data
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim != 2:
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def median_bandwidth(samples) -> float:
    """Median heuristic: median Euclidean distance over all unordered pairs,
    falling back to 1.0 when that median is zero."""
    arr = as_samples(samples)
    if arr.shape[0] < 2:
        raise ValueError(f"median_bandwidth needs at least 2 samples, got {arr.shape[0]}")
    sigma = float(np.median(pdist(arr, "euclidean")))
    return sigma if sigma > 0 else 1.0


def rbf_gram(samples, sigma: float) -> GramMatrix:
    if not sigma > 0:
        raise ValueError(f"Bandwidth must be positive, got {sigma}")
    arr = as_samples(samples)
    values = np.exp(-squareform(pdist(arr, "sqeuclidean")) / (2.0 * sigma**2))
    np.fill_diagonal(values, 1.0)
    return GramMatrix(values, float(sigma))


def center(gram: np.ndarray) -> np.ndarray:
    "H K H without forming H."
    row = gram.mean(axis=1, keepdims=True)
    col = gram.mean(axis=0, keepdims=True)
    return gram - row - col + gram.mean()


def centering_matrix(n: int) -> np.ndarray:
    return np.eye(n) - np.full((n, n), 1.0 / n)


def hsic_trace_oracle(K: np.ndarray, L: np.ndarray) -> float:
    "Dense reference: explicit H and the product K H L H."
    n = K.shape[0]
    H = centering_matrix(n)
    return float(np.trace(K @ H @ L @ H)) / (n - 1) ** 2


def hsic_centered_oracle(K: np.ndarray, L: np.ndarray) -> float:
    "tr((HKH)(HLH)), equal to tr(KHLH) because H is idempotent."
    n = K.shape[0]
    H = centering_matrix(n)
    return float(np.trace((H @ K @ H) @ (H @ L @ H))) / (n - 1) ** 2


def _grams(a, b, sigma_a: Optional[float], sigma_b: Optional[float]):
    a, b = as_samples(a), as_samples(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"Sample count mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError(f"HSIC needs at least 2 samples, got {a.shape[0]}")
    sigma_a = median_bandwidth(a) if sigma_a is None else sigma_a
    sigma_b = median_bandwidth(b) if sigma_b is None else sigma_b
    return a, b, rbf_gram(a, sigma_a), rbf_gram(b, sigma_b)


def hsic_biased(
    a,
    b,
    sigma_a: Optional[float] = None,
    sigma_b: Optional[float] = None,
    check: bool = False,
) -> HsicResult:
    """Biased HSIC estimate. Bandwidths default to the median heuristic.

    With `check=True` the value is cross-checked against tr((HKH)(HLH)).
    """
    a, b, K, L = _grams(a, b, sigma_a, sigma_b)
    n = K.n
    # tr(K H L H) = sum((HKH) * L) since L is symmetric
    raw = float(np.sum(center(K.values) * L.values)) / (n - 1) ** 2
    if check:
        reference = hsic_centered_oracle(K.values, L.values)
        if abs(raw - reference) > 1e-10:
            raise ArithmeticError(f"HSIC trace identity violated: {raw} vs {reference}")
    return HsicResult(max(raw, 0.0), n, K.bandwidth_sigma, L.bandwidth_sigma, raw)


def _rbf_input_gradient(samples: np.ndarray, gram: np.ndarray, weights: np.ndarray, sigma: float):
    # d/da_i sum_ij W_ij K_ij with dK_ij/da_i = K_ij (a_j - a_i) / sigma^2, W symmetric
    P = weights * gram
    return 2.0 / sigma**2 * (P @ samples - P.sum(axis=1, keepdims=True) * samples)


def hsic_with_gradient(
    a, b, sigma_a: Optional[float] = None, sigma_b: Optional[float] = None
) -> Tuple[HsicResult, np.ndarray, np.ndarray]:
    """HSIC together with its gradient with respect to each sample set.

    Bandwidths are constants: no gradient flows through the median heuristic.
    Gradients have the (n, d) shape of the coerced samples.
    """
    a, b, K, L = _grams(a, b, sigma_a, sigma_b)
    n = K.n
    norm = (n - 1) ** 2
    Kc, Lc = center(K.values), center(L.values)
    raw = float(np.sum(Kc * L.values)) / norm
    grad_a = _rbf_input_gradient(a, K.values, Lc / norm, K.bandwidth_sigma)
    grad_b = _rbf_input_gradient(b, L.values, Kc / norm, L.bandwidth_sigma)
    result = HsicResult(max(raw, 0.0), n, K.bandwidth_sigma, L.bandwidth_sigma, raw)
    return result, grad_a, grad_b


def hsic_node(a: Tensor, b: Tensor, sigma_a: Optional[float] = None, sigma_b: Optional[float] = None) -> Tensor:
    """HSIC between two taped tensors as a differentiable scalar.

    The forward value is the raw (unclamped) estimate so that value and
    gradient stay consistent.
    """
    result, grad_a, grad_b = hsic_with_gradient(a.data, b.data, sigma_a, sigma_b)
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.asarray(result.raw, dtype=dtype)

    def vjp(g):
        g = float(g)
        return (
            (g * grad_a).reshape(a.shape).astype(a.dtype),
            (g * grad_b).reshape(b.shape).astype(b.dtype),
        )

    return custom_op("hsic", (a, b), out, vjp)


def permutation_test(a, b, permutations: int = 1000, seed: int = 0, threads: int = 1) -> PermutationResult:
    """Permutation test of independence.

    Replica i shuffles `b` with a generator seeded by seed + i; bandwidths are
    fixed at their unpermuted median-heuristic values. Replicas may run on a
    thread pool; results are assembled in replica order.
    """
    if permutations < 100:
        raise ValueError(f"permutation_test needs at least 100 permutations, got {permutations}")
    a, b, K, L = _grams(a, b, None, None)
    n = K.n
    norm = (n - 1) ** 2
    Kc = center(K.values)
    observed = max(float(np.sum(Kc * L.values)) / norm, 0.0)

    def replica(i: int) -> float:
        perm = np.random.default_rng(seed + i).permutation(n)
        return max(float(np.sum(Kc * L.values[np.ix_(perm, perm)])) / norm, 0.0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            null = np.array(list(pool.map(replica, range(permutations))))
    else:
        null = np.array([replica(i) for i in range(permutations)])

    p_value = (1 + int(np.sum(null >= observed))) / (1 + permutations)
    logger.debug(f"Permutation test: observed={observed:.6g}, p={p_value:.4f}, n={n}")
    return PermutationResult(
        observed,
        p_value,
        float(np.percentile(null, 95)),
        float(np.percentile(null, 99)),
        null,
    )
