"""Softmax clustering head, relative-entropy objective and target estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

PROB_FLOOR = 1e-12


class OracleNotConverged(RuntimeError):
    def __init__(self, iterations, grad_norm):
        super().__init__(
            f"projected gradient did not converge after {iterations} iterations "
            f"(projected gradient norm {grad_norm:.3e})"
        )
        self.iterations = iterations
        self.grad_norm = grad_norm


@dataclass
class LossBreakdown:
    clustering_kl: float = 0.0
    balance_kl: float = 0.0
    reconstruction: float = 0.0
    cross_entropy: float = 0.0

    @property
    def total(self) -> float:
        return self.clustering_kl + self.balance_kl + self.reconstruction

    def as_dict(self) -> dict:
        return {
            "clustering_kl": self.clustering_kl,
            "balance_kl": self.balance_kl,
            "reconstruction": self.reconstruction,
            "cross_entropy": self.cross_entropy,
            "total": self.total,
        }


def uniform_prior(k: int) -> np.ndarray:
    return np.full(k, 1.0 / k)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_soft_assignments(z, theta) -> np.ndarray:
    """``p_ik`` proportional to ``exp(theta_k . z_i)``."""
    if z.ndim != 2 or z.shape[1] != theta.shape[0]:
        raise ValueError(f"embedding shape {z.shape} incompatible with theta {theta.shape}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(theta))):
        raise FloatingPointError("non-finite embedding or softmax parameters")
    return softmax(z @ theta)


def empirical_frequency(q) -> np.ndarray:
    return q.mean(axis=0)


def _xlogy_ratio(x, num, den):
    # sum x * log(num / den) with 0 log 0 = 0 and a floor inside the logs
    safe = np.where(x > 0, x, 0.0)
    ratio = np.log(np.maximum(num, PROB_FLOOR)) - np.log(np.maximum(den, PROB_FLOOR))
    return float(np.sum(np.where(x > 0, safe * ratio, 0.0)))


def clustering_loss(q, p, prior=None) -> LossBreakdown:
    """``KL(Q || P) + KL(f || u)`` for the current targets and predictions."""
    if q.shape != p.shape:
        raise ValueError(f"Q shape {q.shape} != P shape {p.shape}")
    n, k = q.shape
    prior = uniform_prior(k) if prior is None else np.asarray(prior, dtype=float)
    f = empirical_frequency(q)
    kl_qp = _xlogy_ratio(q, q, p) / n
    # merged form: (1/N) sum_ik q_ik log(f_k/u_k) == sum_k f_k log(f_k/u_k)
    kl_fu = _xlogy_ratio(q, np.broadcast_to(f, q.shape), np.broadcast_to(prior, q.shape)) / n
    if not (np.isfinite(kl_qp) and np.isfinite(kl_fu)):
        raise FloatingPointError("non-finite clustering loss")
    return LossBreakdown(clustering_kl=kl_qp, balance_kl=kl_fu)


def estimate_targets(p, prior=None) -> np.ndarray:
    """Closed-form target update ``q_ik ~ p_ik / sqrt(sum_i' p_i'k)``.

    With a non-uniform ``prior`` the column weights become
    ``sqrt(u_k / sum_i' p_i'k)``, which reduces to the uniform case.
    """
    col = p.sum(axis=0)
    if np.any(col <= 0):
        raise ValueError("a cluster has zero total probability mass")
    weight = 1.0 / np.sqrt(col)
    if prior is not None:
        weight = weight * np.sqrt(np.asarray(prior, dtype=float))
    r = p * weight
    return r / r.sum(axis=1, keepdims=True)


def target_objective(q, p, prior=None) -> float:
    """Full target-inference objective ``(1/N) sum q log(q/p) + q log(f/u)``."""
    return clustering_loss(q, p, prior).total


def _target_objective_grad(q, p, log_prior):
    n = q.shape[0]
    f = q.mean(axis=0)
    # d/dq_ik of sum_i'k' q log f_k' is log f_k + 1
    return (np.log(np.maximum(q, PROB_FLOOR)) + 1.0 - np.log(p)
            + np.log(np.maximum(f, PROB_FLOOR)) + 1.0 - log_prior) / n


def project_rows_to_simplex(v) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    n, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = u - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


def targets_oracle(p, prior=None, step_count=200_000, step_size=None, tol=1e-10):
    """Minimise the full target objective by accelerated projected gradient.

    Slow reference used to validate :func:`estimate_targets`; it does not
    share code with it. Starts from ``P``. ``step_size`` defaults to ``0.5/L``
    with ``L`` a bound on the Hessian of the entropy terms over the region the
    iterates occupy.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise ValueError("P must be strictly positive")
    n, k = p.shape
    prior = np.full(k, 1.0 / k) if prior is None else np.asarray(prior, dtype=float)
    log_prior = np.log(prior)
    if step_size is None:
        col = p.sum(axis=0)
        q_lo = 0.5 * p.min() * np.sqrt(col.min() / col.max())
        lipschitz = (1.0 / q_lo + 1.0 / (n * q_lo)) / n
        step_size = 0.5 / lipschitz
    q = p.copy()
    y = q.copy()
    t = 1.0
    gnorm = np.inf
    for it in range(1, step_count + 1):
        q_next = project_rows_to_simplex(y - step_size * _target_objective_grad(y, p, log_prior))
        gnorm = float(np.max(np.abs(q_next - y))) / step_size
        if np.any(q_next <= 0):
            # keep iterates inside the domain of the log
            q_next = np.maximum(q_next, PROB_FLOOR)
            q_next /= q_next.sum(axis=1, keepdims=True)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        momentum = (t - 1.0) / t_next
        # adaptive restart when the step goes uphill
        if np.sum((q_next - q) * (y - q_next)) > 0:
            t_next, momentum = 1.0, 0.0
        y = q_next + momentum * (q_next - q)
        step = float(np.max(np.abs(q_next - q)))
        q, t = q_next, t_next
        if step < tol and gnorm * step_size < tol:
            return q
    raise OracleNotConverged(step_count, gnorm)


def m_step_loss_and_grads(q, z, theta, probs=None):
    """Cross-entropy ``-(1/N) sum q log p`` of the softmax head on embeddings ``z``.

    Returns ``(loss, grad_theta, grad_z)``; ``q`` is held constant.
    """
    if q.shape[0] != z.shape[0] or q.shape[1] != theta.shape[1] or z.shape[1] != theta.shape[0]:
        raise ValueError(f"shape mismatch: Q {q.shape}, Z {z.shape}, theta {theta.shape}")
    n = z.shape[0]
    logits = z @ theta
    logp = log_softmax(logits)
    p = np.exp(logp) if probs is None else probs
    loss = -float(np.sum(q * logp)) / n
    g_logits = (p - q) / n
    return loss, z.T @ g_logits, g_logits @ theta.T


def fit_softmax_head(z, q, theta0, max_iter=100):
    """Fit ``theta`` to fixed targets on a frozen embedding.

    Minimises the cross-entropy of :func:`m_step_loss_and_grads` over
    ``theta`` alone with L-BFGS, starting from ``theta0``. The problem is
    convex; on separable targets it has no finite minimiser, so ``max_iter``
    bounds how confident the fitted head becomes.
    """
    shape = theta0.shape

    def fun(flat):
        loss, g_theta, _ = m_step_loss_and_grads(q, z, flat.reshape(shape))
        return loss, g_theta.ravel()

    res = minimize(fun, theta0.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    return res.x.reshape(shape)


def kmeans_inertia(x, centroids, labels) -> float:
    return float(np.sum((x - centroids[labels]) ** 2))


def _sq_dists(x, c):
    return np.maximum(
        (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :], 0.0
    )


def _kmeans_pp(x, k, rng):
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = _sq_dists(x, np.asarray(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return np.array(centroids)


def _lloyd(x, centroids, max_iters, history=None):
    k = len(centroids)
    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        if history is not None:
            history.append(kmeans_inertia(x, centroids, new_labels))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(d2[np.arange(len(x)), labels]))
                centroids[j] = x[far]
                labels = labels.copy()
                labels[far] = j
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(axis=1)
    return centroids, labels


def kmeans(x, k, rng: np.random.Generator, max_iters=300, n_init=10, history=None):
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Returns ``(centroids, labels)``. ``history``, when a list, receives the
    objective value at each assignment step of every restart.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if len(x) < k:
        raise ValueError(f"need at least k={k} samples, got {len(x)}")
    best = None
    for _ in range(n_init):
        run = None
        if history is not None:
            run = []
            history.append(run)
        c, labels = _lloyd(x, _kmeans_pp(x, k, rng), max_iters, run)
        inertia = kmeans_inertia(x, c, labels)
        if best is None or inertia < best[0]:
            best = (inertia, c, labels)
    return best[1], best[2]


def init_assignments(z, k, rng) -> np.ndarray:
    """One-hot targets from k-means on the embedding."""
    _, labels = kmeans(z, k, rng)
    q = np.zeros((len(z), k))
    q[np.arange(len(z)), labels] = 1.0
    return q
