"""Iterative product quantization: subvector codebooks over weight columns.

Each column of a weight matrix is split into `m` contiguous subvectors (the
last one zero-padded when the column length is not divisible); a shared
codebook of `k` codewords is fit over all subvectors with either hard k-means
(k-means++ init, farthest-point empty-cluster repair) or an isotropic-Gaussian
EM with shared variance and a final hard assignment.  Codewords keep training
via averaged gradients of their assigned subvectors.  A layer schedule
quantizes the network bottom-to-top: the number of still-finetuned top layers
F only ever decreases.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


# ---------------------------------------------------------------------------
# subvector layout


def split_subvectors(w: np.ndarray, m: int) -> tuple[np.ndarray, int]:
    """Split every column into m contiguous subvectors, zero-padding the tail.

    Returns (subvectors, pad) where subvectors has shape
    (cols * m, ceil(rows / m)) ordered column-major: column 0's m pieces
    first, then column 1's, ...
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"split_subvectors: need a 2-D matrix, got shape {w.shape}")
    rows, cols = w.shape
    if not 1 <= m <= rows:
        raise ValueError(f"split_subvectors: m must be in [1, {rows}], got {m}")
    dim = -(-rows // m)
    pad = m * dim - rows
    padded = np.concatenate([w, np.zeros((pad, cols), dtype=w.dtype)]) if pad else w
    # (rows+pad, cols) -> (m, dim, cols) -> (cols, m, dim) -> flat
    sub = padded.reshape(m, dim, cols).transpose(2, 0, 1).reshape(cols * m, dim)
    return np.ascontiguousarray(sub), pad


def _assemble(subvectors: np.ndarray, m: int, rows: int, cols: int, pad: int) -> np.ndarray:
    dim = subvectors.shape[1]
    padded = subvectors.reshape(cols, m, dim).transpose(1, 2, 0).reshape(m * dim, cols)
    return padded[:rows] if pad else padded


@dataclass
class Codebook:
    """Fitted product-quantization state for one weight matrix."""

    codewords: np.ndarray      # (k, subvec_dim) float32
    assignments: np.ndarray    # (num_subvectors,) int, column-major order
    m: int
    source_shape: tuple
    pad: int

    @property
    def k(self) -> int:
        return self.codewords.shape[0]

    @property
    def subvec_dim(self) -> int:
        return self.codewords.shape[1]

    @property
    def num_subvectors(self) -> int:
        return self.assignments.shape[0]


def reconstruct(codebook: Codebook) -> np.ndarray:
    """Assemble the matrix from assigned codewords; padding is stripped."""
    rows, cols = codebook.source_shape
    sub = codebook.codewords[codebook.assignments]
    return _assemble(sub, codebook.m, rows, cols, codebook.pad)


def reconstruction_error(codebook: Codebook, w: np.ndarray) -> float:
    """Codebook objective: sum of squared subvector distances on the padded grid.

    Accumulated as sequential float64 per-subvector dot products so the value
    is exactly reproducible by an independent recomputation using the same
    convention.
    """
    sub, pad = split_subvectors(np.asarray(w), codebook.m)
    if pad != codebook.pad or sub.shape[0] != codebook.num_subvectors:
        raise ValueError("reconstruction_error: matrix does not match codebook layout")
    total = 0.0
    cw = codebook.codewords.astype(np.float64)
    sub64 = sub.astype(np.float64)
    for i in range(sub64.shape[0]):
        d = sub64[i] - cw[codebook.assignments[i]]
        total += float(np.dot(d, d))
    return total


# ---------------------------------------------------------------------------
# k-means


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; duplicates only appear when < k distinct points."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # every point already covered: repeat one
            centers[j:] = centers[0]
            break
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared distances; clip tiny negatives from the expansion
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T
          + np.sum(centers * centers, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def kmeans_fit(subvectors: np.ndarray, k: int, iters: int = 25,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ init and farthest-point repair.

    Returns (codewords, assignments, objective_history); the history is the
    post-assignment objective per iteration and never increases.
    """
    x = np.asarray(subvectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"kmeans_fit: need a non-empty 2-D array, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"kmeans_fit: k must be in [1, {n}], got {k}")
    if k > 65535:
        raise ValueError(f"kmeans_fit: k must fit in u16, got {k}")
    if iters < 1:
        raise ValueError(f"kmeans_fit: iters must be >= 1, got {iters}")
    rng = rng if rng is not None else np.random.default_rng(0)

    centers = _kmeanspp_init(x, k, rng)
    history: list[float] = []
    assign = None
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        new_assign = d2.argmin(axis=1)
        objective = float(d2[np.arange(n), new_assign].sum())
        if history:
            assert objective <= history[-1] + 1e-9 * max(1.0, abs(history[-1])), \
                "k-means objective increased"
        history.append(objective)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        # centroid update; empty clusters reseed to the farthest point
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j] > 0:
                centers[j] = x[assign == j].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            dmin = _sq_dists(x, centers).min(axis=1)
            for j in empties:
                far = int(dmin.argmax())
                centers[j] = x[far]
                dmin[far] = 0.0
    return centers.astype(np.float32), assign.astype(np.int64), history


# ---------------------------------------------------------------------------
# EM (isotropic Gaussian mixture, shared variance)


def em_fit(subvectors: np.ndarray, k: int, iters: int = 25,
           rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Mixture of k isotropic Gaussians with one shared variance.

    Soft E/M steps with a monotone log-likelihood; the returned assignments
    are the final hard argmax responsibilities.
    """
    x = np.asarray(subvectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"em_fit: need a non-empty 2-D array, got shape {x.shape}")
    n, dim = x.shape
    if not 1 <= k <= n:
        raise ValueError(f"em_fit: k must be in [1, {n}], got {k}")
    if k > 65535:
        raise ValueError(f"em_fit: k must fit in u16, got {k}")
    if iters < 1:
        raise ValueError(f"em_fit: iters must be >= 1, got {iters}")
    rng = rng if rng is not None else np.random.default_rng(0)

    means = _kmeanspp_init(x, k, rng).astype(np.float64)
    weights = np.full(k, 1.0 / k)
    var = max(float(x.var()), 1e-8)
    history: list[float] = []
    resp = None
    for _ in range(iters):
        # E step in log space
        d2 = _sq_dists(x, means)
        log_p = (np.log(np.maximum(weights, 1e-300))[None, :]
                 - 0.5 * dim * np.log(2.0 * np.pi * var) - d2 / (2.0 * var))
        m = log_p.max(axis=1, keepdims=True)
        log_norm = m + np.log(np.exp(log_p - m).sum(axis=1, keepdims=True))
        loglik = float(log_norm.sum())
        if history:
            assert loglik >= history[-1] - 1e-7 * max(1.0, abs(history[-1])), \
                "EM log-likelihood decreased"
        history.append(loglik)
        resp = np.exp(log_p - log_norm)
        # M step: means, mixing weights, shared isotropic variance
        nk = resp.sum(axis=0)
        nonzero = nk > 1e-12
        means[nonzero] = (resp.T @ x)[nonzero] / nk[nonzero, None]
        weights = np.maximum(nk / n, 1e-12)
        weights /= weights.sum()
        var = max(float((resp * _sq_dists(x, means)).sum() / (n * dim)), 1e-12)
    assign = resp.argmax(axis=1)
    return means.astype(np.float32), assign.astype(np.int64), history


# ---------------------------------------------------------------------------
# matrix-level API


def fit_codebook(w: np.ndarray, k: int, m: int, iters: int = 25,
                 rng: np.random.Generator | None = None, method: str = "kmeans") -> Codebook:
    """Fit a codebook over the column-subvectors of a weight matrix."""
    w = np.asarray(w)
    sub, pad = split_subvectors(w, m)
    if method == "kmeans":
        codewords, assign, _ = kmeans_fit(sub, k, iters=iters, rng=rng)
    elif method == "em":
        codewords, assign, _ = em_fit(sub, k, iters=iters, rng=rng)
    else:
        raise ValueError(f"fit_codebook: unknown method {method!r}")
    return Codebook(codewords=codewords, assignments=assign, m=m,
                    source_shape=w.shape, pad=pad)


def codeword_grad_update(codebook: Codebook, grads: np.ndarray, lr: float) -> Codebook:
    """One SGD step on the codewords: mean gradient over assigned subvectors.

    `grads` matches the source matrix shape; padded positions contribute zero.
    Codewords with no assigned subvector stay untouched.
    """
    grads = np.asarray(grads)
    if grads.shape != tuple(codebook.source_shape):
        raise ValueError(
            f"codeword_grad_update: gradient shape {grads.shape} does not match "
            f"source {tuple(codebook.source_shape)}")
    gsub, _ = split_subvectors(grads, codebook.m)
    k = codebook.k
    sums = np.zeros((k, codebook.subvec_dim), dtype=np.float64)
    np.add.at(sums, codebook.assignments, gsub.astype(np.float64))
    counts = np.bincount(codebook.assignments, minlength=k).astype(np.float64)
    used = counts > 0
    mean_g = np.zeros_like(sums)
    mean_g[used] = sums[used] / counts[used, None]
    new_words = (codebook.codewords.astype(np.float64) - lr * mean_g).astype(np.float32)
    return replace(codebook, codewords=new_words)


# ---------------------------------------------------------------------------
# layer schedule


@dataclass(frozen=True)
class QuantSchedule:
    """Bottom-to-top quantization: layers below (total - finetuned) are frozen
    into codebooks while the top `finetuned` layers keep FP-32 training."""

    total_layers: int
    finetuned: int
    boundaries: tuple  # epochs at which one more layer becomes quantized

    def __post_init__(self):
        if self.total_layers < 1:
            raise ValueError(f"schedule: total_layers must be >= 1, got {self.total_layers}")
        if not 0 <= self.finetuned <= self.total_layers:
            raise ValueError(
                f"schedule: finetuned must be in [0, {self.total_layers}], got {self.finetuned}")
        if len(self.boundaries) != self.total_layers:
            raise ValueError(
                f"schedule: need exactly {self.total_layers} boundaries, got {len(self.boundaries)}")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValueError("schedule: boundaries must be non-decreasing")

    def quantized_layers(self) -> range:
        return range(self.total_layers - self.finetuned)


def uniform_schedule(total_layers: int, total_epochs: int) -> QuantSchedule:
    """Evenly spaced boundaries so F walks total_layers -> 0 across training."""
    if total_epochs < 1:
        raise ValueError(f"uniform_schedule: total_epochs must be >= 1, got {total_epochs}")
    stages = total_layers + 1
    boundaries = tuple(max(1, round(total_epochs * (i + 1) / stages))
                       for i in range(total_layers))
    return QuantSchedule(total_layers=total_layers, finetuned=total_layers,
                         boundaries=boundaries)


def advance_schedule(schedule: QuantSchedule, epoch: int) -> QuantSchedule:
    """Schedule state at the given epoch; F is non-increasing in epoch."""
    if epoch < 0:
        raise ValueError(f"advance_schedule: epoch must be >= 0, got {epoch}")
    crossed = sum(1 for b in schedule.boundaries if b <= epoch)
    return replace(schedule, finetuned=schedule.total_layers - crossed)
