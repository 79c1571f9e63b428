"""Joint contrastive + classification objective with analytic gradients.

The contrastive term is NT-Xent over a batch of 2N projected views laid out
as consecutive positive pairs (rows 2k and 2k+1 belong together). The
classification term is label-smoothed cross entropy averaged over all 2N
views and weighted by ``lambda_``. Everything is plain float64 numpy so the
gradients can be checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_LOG = 1e-12


class LossDomainError(ValueError):
    """Raised when an input violates a loss-function precondition."""


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the joint objective."""

    tau: float = 0.05
    lambda_: float = 0.5
    alpha: float = 0.01
    n_classes: int = 3

    def __post_init__(self):
        if self.tau <= 0:
            raise LossDomainError(f"temperature must be positive, got {self.tau}")
        if self.lambda_ < 0:
            raise LossDomainError(f"lambda must be nonnegative, got {self.lambda_}")
        if not 0 <= self.alpha < 1:
            raise LossDomainError(f"alpha must be in [0,1), got {self.alpha}")
        if self.n_classes < 2:
            raise LossDomainError(f"need at least 2 classes, got {self.n_classes}")


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity u.v / (|u||v|), defined only for nonzero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise LossDomainError("cosine similarity undefined for zero vector")
    return float(np.dot(u, v) / (nu * nv))


def _positive_index(i: int) -> int:
    """Row index of the positive partner under the pair layout."""
    return i + 1 if i % 2 == 0 else i - 1


def nt_xent(z: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """NT-Xent loss and its analytic gradient w.r.t. the raw embeddings.

    ``z`` is 2N x D with views 2k/2k+1 forming positive pairs. The loss is
    the mean over all 2N anchors of

        -log( exp(sim(z_a, z_p)/tau) / sum_{k != a} exp(sim(z_a, z_k)/tau) )

    Returns (loss, grad) with grad the same shape as z.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] % 2 != 0 or z.shape[0] < 2:
        raise LossDomainError(f"expected 2N x D embeddings, got shape {z.shape}")
    if tau <= 0:
        raise LossDomainError(f"temperature must be positive, got {tau}")
    m = z.shape[0]
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise LossDomainError("zero-norm embedding row")

    zh = z / norms[:, None]
    sim = zh @ zh.T  # cosine similarities
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)  # exclude k == anchor

    # log-sum-exp per anchor over k != anchor
    mx = logits.max(axis=1)
    expl = np.exp(logits - mx[:, None])
    sumexp = expl.sum(axis=1)
    lse = mx + np.log(sumexp)

    pos = np.array([_positive_index(i) for i in range(m)])
    per_anchor = lse - logits[np.arange(m), pos]
    loss = float(per_anchor.mean())

    # dLoss/d sim[a, k]: softmax weight for every k != a, minus 1 at the positive
    w = expl / sumexp[:, None]  # softmax rows (diagonal already zero)
    w[np.arange(m), pos] -= 1.0
    w /= tau * m

    # back through cosine: d sim(a,k)/d z_a = (zh_k - sim[a,k] * zh_a) / |z_a|
    g = w + w.T  # sim is symmetric in its two arguments
    grad = (g @ zh - (g * sim).sum(axis=1)[:, None] * zh) / norms[:, None]
    return loss, grad


def nt_xent_reference(z: np.ndarray, tau: float) -> float:
    """Naive double-loop evaluation of the NT-Xent sum, for cross-checking."""
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    total = 0.0
    for i in range(m):
        j = _positive_index(i)
        num = np.exp(cosine_sim(z[i], z[j]) / tau)
        den = sum(
            np.exp(cosine_sim(z[i], z[k]) / tau) for k in range(m) if k != i
        )
        total += -np.log(num / den)
    return total / m


def smoothed_targets(label: int, alpha: float, n_classes: int) -> np.ndarray:
    """Label-smoothed target: 1-alpha at the true class, alpha/(C-1) elsewhere."""
    if not 0 <= alpha < 1:
        raise LossDomainError(f"alpha must be in [0,1), got {alpha}")
    if not 0 <= label < n_classes:
        raise LossDomainError(f"label {label} out of range for {n_classes} classes")
    t = np.full(n_classes, alpha / (n_classes - 1), dtype=np.float64)
    t[label] = 1.0 - alpha
    return t


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise numerically stable softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross entropy -sum(y log p) and its gradient w.r.t. pre-softmax logits.

    ``probs`` must already be softmax output; the logit gradient is then
    simply probs - target.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if abs(target.sum() - 1.0) > 1e-9:
        raise LossDomainError("target distribution does not sum to 1")
    loss = float(-(target * np.log(np.clip(probs, EPS_LOG, None))).sum())
    return loss, probs - target


def joint_loss(
    z: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
) -> dict:
    """Full objective: NT-Xent mean + lambda * mean smoothed cross entropy.

    ``z`` (2N x D) and ``logits`` (2N x C) must share their leading
    dimension. Returns both partial losses and the gradients w.r.t. z and
    logits.
    """
    z = np.asarray(z, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m = z.shape[0]
    if logits.shape[0] != m or labels.shape[0] != m:
        raise LossDomainError("inconsistent batch sizes across inputs")

    cl_loss, grad_z = nt_xent(z, cfg.tau)

    probs = softmax(logits)
    ce_total = 0.0
    grad_logits = np.zeros_like(logits)
    for i in range(m):
        target = smoothed_targets(int(labels[i]), cfg.alpha, cfg.n_classes)
        li, gi = cross_entropy(probs[i], target)
        ce_total += li
        grad_logits[i] = gi
    ce_loss = ce_total / m
    grad_logits *= cfg.lambda_ / m

    return {
        "loss": cl_loss + cfg.lambda_ * ce_loss,
        "contrastive": cl_loss,
        "cross_entropy": ce_loss,
        "grad_z": grad_z,
        "grad_logits": grad_logits,
    }
