"""Input-space and latent-feature kernels.

The input kernel is an ARD Matern 5/2 with one lengthscale per dimension and
a single outputscale.  Latent output-mode features use a unit-lengthscale
squared-exponential kernel; scale identifiability lives in the latent
coordinates and the input outputscale, since per-factor scales inside a
Kronecker product are not identifiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class InputKernelHyper:
    """ARD Matern 5/2 hyperparameters: per-dimension lengthscales, one outputscale."""

    lengthscales: np.ndarray
    outputscale: float

    def __post_init__(self) -> None:
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if np.any(ls <= 0.0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        if self.outputscale <= 0.0 or not np.isfinite(self.outputscale):
            raise ValueError("outputscale must be positive and finite")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "outputscale", float(self.outputscale))


def _scaled_dist(x: np.ndarray, x2: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    """Pairwise scaled Euclidean distances r between rows of x and x2.

    Coordinate differences are formed directly (never via the expanded square),
    so the result stays accurate even for extreme lengthscale ratios.
    """
    return cdist(np.atleast_2d(x), np.atleast_2d(x2), metric="seuclidean",
                 V=np.asarray(lengthscales, dtype=np.float64) ** 2)


def matern52_matrix(x: np.ndarray, x2: np.ndarray, hyper: InputKernelHyper) -> np.ndarray:
    """Cross-covariance matrix of the ARD Matern 5/2 kernel."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    if x.shape[1] != hyper.lengthscales.shape[0] or x2.shape[1] != hyper.lengthscales.shape[0]:
        raise ValueError("input dimension does not match lengthscales")
    r = _scaled_dist(x, x2, hyper.lengthscales)
    return hyper.outputscale * (1.0 + SQRT5 * r + 5.0 * r**2 / 3.0) * np.exp(-SQRT5 * r)


def matern52_ard(x: np.ndarray, x2: np.ndarray, hyper: InputKernelHyper) -> float:
    """Matern 5/2 kernel value between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if x.shape != x2.shape:
        raise ValueError("inputs must have equal shapes")
    return float(matern52_matrix(x[None, :], x2[None, :], hyper)[0, 0])


def latent_kernel_matrix(v: np.ndarray, v2: np.ndarray | None = None) -> np.ndarray:
    """Unit-lengthscale RBF Gram matrix over latent feature rows."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    v2 = v if v2 is None else np.atleast_2d(np.asarray(v2, dtype=np.float64))
    if v.shape[1] != v2.shape[1]:
        raise ValueError("latent dimensions do not match")
    return np.exp(-0.5 * cdist(v, v2, metric="sqeuclidean"))


def latent_kernel(v: np.ndarray, v2: np.ndarray) -> float:
    """exp(-||v - v2||^2 / 2) between two latent vectors."""
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    v2 = np.atleast_1d(np.asarray(v2, dtype=np.float64))
    if v.shape != v2.shape:
        raise ValueError("latent vectors must have equal length")
    return float(np.exp(-0.5 * np.sum((v - v2) ** 2)))
