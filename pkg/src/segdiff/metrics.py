"""Overlap metrics and the Fréchet distance between Gaussian feature fits."""
from __future__ import annotations

import numpy as np

from .ablation import Mask


class EigenConvergenceError(ArithmeticError):
    pass


class FIDError(ValueError):
    pass


# --------------------------------------------------------------------------
# Dice


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, Mask) else np.asarray(x)


def dice(a, b, cls: int | None = None) -> float:
    """2|A∩B| / (|A| + |B|) for class ``cls`` (or for boolean inputs); 1.0 when both are empty."""
    a, b = _labels(a), _labels(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    if cls is not None:
        a, b = a == cls, b == cls
    else:
        a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def per_class_dice(a, b, num_classes: int) -> np.ndarray:
    """Dice for classes 1..C-1 of one pair of label maps."""
    return np.array([dice(a, b, c) for c in range(1, num_classes)])


def mean_foreground_dice(a, b, num_classes: int | None = None) -> float:
    if num_classes is None:
        if isinstance(a, Mask):
            num_classes = a.num_classes
        else:
            raise ValueError("num_classes required for raw label arrays")
    if num_classes < 2:
        return 1.0
    return float(per_class_dice(a, b, num_classes).mean())


def batch_dice(pred: np.ndarray, target: np.ndarray, num_classes: int) -> tuple[float, np.ndarray]:
    """Mean over images of the per-image foreground Dice; also per-class means."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {target.shape}")
    if len(pred) == 0:
        return float("nan"), np.full(num_classes - 1, np.nan)
    per = np.stack([per_class_dice(p, t, num_classes) for p, t in zip(pred, target)])
    return float(per.mean()), per.mean(axis=0)


# --------------------------------------------------------------------------
# symmetric eigensolver


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a real symmetric matrix.

    Returns ascending eigenvalues ``w`` and orthonormal eigenvectors as the
    columns of ``q`` so that ``q @ diag(w) @ q.T`` reconstructs ``a``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh: expected a square matrix, got {a.shape}")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    q = np.eye(n)
    scale = np.abs(a).max() if n else 0.0
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), q

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, r) plane rotation
                ap = a[:, p].copy()
                ar = a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap = a[p, :].copy()
                ar = a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                a[p, r] = a[r, p] = 0.0
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
    else:
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off > tol * scale:
            raise EigenConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})")

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], q[:, order]


def _psd_sqrt_eigs(w: np.ndarray, what: str) -> np.ndarray:
    tol = 1e-8 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.any(w < -tol):
        raise FIDError(f"{what} has eigenvalue {w.min():.3e} below -{tol:.1e}; not positive semi-definite")
    return np.sqrt(np.clip(w, 0.0, None))


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, q = jacobi_eigh(m)
    return (q * _psd_sqrt_eigs(w, "matrix")) @ q.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    tr (S_a S_b)^{1/2} is evaluated as tr sqrtm(sqrt(S_a) S_b sqrt(S_a)),
    which is symmetric PSD and so amenable to the Jacobi eigensolver.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, float)), np.atleast_1d(np.asarray(mu_b, float))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, float)), np.atleast_2d(np.asarray(cov_b, float))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape or cov_a.shape != mu_a.shape * 2:
        raise FIDError(f"inconsistent Gaussian parameters {mu_a.shape}, {cov_a.shape}, {mu_b.shape}, {cov_b.shape}")
    root_a = sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    w, _ = jacobi_eigh(0.5 * (inner + inner.T))
    trace_sqrt = float(_psd_sqrt_eigs(w, "sqrt(S_a) S_b sqrt(S_a)").sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Maximum-likelihood mean and covariance (normalised by n)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise FIDError(f"features must be (n, d), got {f.shape}")
    mu = f.mean(axis=0)
    centered = f - mu
    return mu, centered.T @ centered / len(f)


def fid_from_features(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    for name, f in (("A", feat_a), ("B", feat_b)):
        if f.shape[0] <= f.shape[1]:
            raise FIDError(f"set {name} has {f.shape[0]} samples, need more than feature dim {f.shape[1]}")
    return frechet_distance(*gaussian_fit(feat_a), *gaussian_fit(feat_b))
