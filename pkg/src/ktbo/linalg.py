"""Symmetric dense and Kronecker-structured linear algebra.

The covariance matrices handled here are chains of Kronecker products of
small symmetric factors.  All solves, log-determinants and matrix roots go
through per-factor eigendecompositions, which tolerate semi-definite factors
via eigenvalue clamping and never materialize the full product.  Matrix-vector
products with a Kronecker chain are computed by the reshape-multiply scheme
(one mode product per factor), so the cost is a sum over factor sizes rather
than quadratic in the joint dimension.

``vec`` convention: the joint vector is the C-order flattening of the tensor
whose axis 0 is indexed by the first factor; the last mode varies fastest.
This matches ``numpy.kron`` applied left to right.

A reduced-precision MVM path emulates IEEE half precision by quantizing the
factors, the operand and every intermediate to the nearest representable
float16 value (round-to-nearest-even), with dynamic max-abs scaling, while
accumulating products in float32.  Results are returned in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "EigenPair",
    "KronOperator",
    "LinalgError",
    "PrecisionOverflowError",
    "SingularOperatorError",
    "kron_eig_solve",
    "kron_logdet",
    "kron_mvm",
    "matrix_root",
    "reduced_precision_mvm",
    "sym_eig",
]

SYMMETRY_RTOL = 1e-12
EIG_CLAMP = 1e-10


class LinalgError(ValueError):
    """Base class for linear-algebra input and conditioning failures."""


class SingularOperatorError(LinalgError):
    """Raised when a solve or log-determinant hits a nonpositive eigenvalue."""


class PrecisionOverflowError(LinalgError):
    """Raised when values cannot be represented after half-precision scaling."""


def _check_sym_matrix(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix has non-finite entries")
    scale = np.max(np.abs(a))
    tol = SYMMETRY_RTOL * max(scale, 1.0)
    if np.max(np.abs(a - a.T)) > tol:
        raise LinalgError("matrix is not symmetric within tolerance")
    return a


@dataclass(frozen=True)
class EigenPair:
    """Orthonormal eigenvectors (columns of ``vectors``) and descending eigenvalues."""

    vectors: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class KronOperator:
    """A Kronecker chain of symmetric factors, never formed densely.

    ``factors[0]`` indexes data points; the remaining factors index output
    modes in tensor-mode order.
    """

    factors: tuple[np.ndarray, ...]
    dims: tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.factors) == 0:
            raise LinalgError("KronOperator needs at least one factor")
        checked = tuple(_check_sym_matrix(f) for f in self.factors)
        object.__setattr__(self, "factors", checked)
        object.__setattr__(self, "dims", tuple(f.shape[0] for f in checked))

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)


def _factors_of(op) -> list[np.ndarray]:
    if isinstance(op, KronOperator):
        return list(op.factors)
    return [np.asarray(f) for f in op]


def _apply_kron(factors: list[np.ndarray], v: np.ndarray) -> np.ndarray:
    """Apply (f_1 ⊗ ... ⊗ f_m) to v via successive mode products.

    Factors may be rectangular.  ``v`` is a vector of length prod(cols) or a
    matrix whose columns are independent operands.
    """
    in_dims = [f.shape[1] for f in factors]
    total_in = math.prod(in_dims)
    v = np.asarray(v, dtype=np.float64)
    batched = v.ndim == 2
    if v.shape[0] != total_in:
        raise LinalgError(
            f"operand length {v.shape[0]} does not match operator dim {total_in}"
        )
    x = v.reshape(in_dims + ([v.shape[1]] if batched else []))
    for axis, f in enumerate(factors):
        x = np.moveaxis(np.tensordot(f, x, axes=([1], [axis])), 0, axis)
    out_len = math.prod(f.shape[0] for f in factors)
    return x.reshape((out_len, -1) if batched else out_len)


def kron_mvm(op, v: np.ndarray) -> np.ndarray:
    """Multiply a Kronecker chain by a vector without materializing it.

    ``op`` is a :class:`KronOperator` or a plain sequence of factor matrices;
    ``v`` may also be a matrix of stacked column operands.
    """
    factors = _factors_of(op)
    for f in factors:
        if not np.all(np.isfinite(f)):
            raise LinalgError("factor has non-finite entries")
    return _apply_kron(factors, v)


def sym_eig(a: np.ndarray) -> EigenPair:
    """Eigendecompose a symmetric matrix; eigenvalues sorted descending."""
    a = _check_sym_matrix(a)
    values, vectors = scipy.linalg.eigh(a)
    return EigenPair(vectors=vectors[:, ::-1].copy(), values=values[::-1].copy())


def _joint_eigs(factor_eigs: list[np.ndarray], sigma2: float) -> np.ndarray:
    """Tensor of all products of per-factor eigenvalues, plus sigma2."""
    joint = np.array(1.0)
    for lam in factor_eigs:
        joint = np.multiply.outer(joint, lam)
    return joint + sigma2


def kron_eig_solve(op, sigma2: float, v: np.ndarray, eigs: list[EigenPair] | None = None) -> np.ndarray:
    """Solve ((⊗ factors) + sigma2·I) x = v through per-factor eigenbases.

    Factors must be PSD up to roundoff; small negative eigenvalues are
    clamped to zero.  Precomputed ``eigs`` (one per factor) may be supplied
    to reuse cached decompositions.
    """
    factors = _factors_of(op)
    if eigs is None:
        eigs = [sym_eig(f) for f in factors]
    lams = [np.clip(e.values, 0.0, None) for e in eigs]
    d = _joint_eigs(lams, sigma2)
    if np.min(d) <= 0.0:
        raise SingularOperatorError("joint covariance is singular (zero eigenvalue and zero noise)")
    qts = [e.vectors.T for e in eigs]
    tilde = _apply_kron(qts, v)
    d_flat = d.reshape(-1)
    tilde = tilde / (d_flat[:, None] if tilde.ndim == 2 else d_flat)
    return _apply_kron([e.vectors for e in eigs], tilde)


def kron_logdet(factor_eigs: list[np.ndarray], sigma2: float) -> float:
    """log det((⊗ factors) + sigma2·I) from per-factor eigenvalues."""
    lams = [np.clip(np.asarray(lam, dtype=np.float64), 0.0, None) for lam in factor_eigs]
    d = _joint_eigs(lams, sigma2)
    if np.min(d) <= 0.0:
        raise SingularOperatorError("log-determinant of a singular operator")
    return float(np.sum(np.log(d)))


def matrix_root(a: np.ndarray, clamp_eps: float = EIG_CLAMP) -> np.ndarray:
    """Symmetric square root Q·diag(max(λ, clamp_eps))^{1/2}·Qᵀ in float64."""
    if clamp_eps <= 0.0:
        raise LinalgError("clamp_eps must be positive")
    pair = sym_eig(a)
    root_vals = np.sqrt(np.maximum(pair.values, clamp_eps))
    return (pair.vectors * root_vals) @ pair.vectors.T


def _quantize_half(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale by max-abs, round to the float16 grid, return as float32."""
    if not np.all(np.isfinite(a)):
        raise PrecisionOverflowError("non-finite values in half-precision path")
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        scale = 1.0
    q = (a / scale).astype(np.float16)
    if not np.all(np.isfinite(q)):
        raise PrecisionOverflowError("overflow after half-precision scaling")
    return q.astype(np.float32), scale


def _apply_kron_half(factors: list[np.ndarray], v: np.ndarray) -> np.ndarray:
    """Half-precision emulation of :func:`_apply_kron` with float32 accumulation."""
    in_dims = [f.shape[1] for f in factors]
    total_in = math.prod(in_dims)
    v = np.asarray(v, dtype=np.float64)
    batched = v.ndim == 2
    if v.shape[0] != total_in:
        raise LinalgError(
            f"operand length {v.shape[0]} does not match operator dim {total_in}"
        )
    x, scale = _quantize_half(v.reshape(in_dims + ([v.shape[1]] if batched else [])))
    for axis, f in enumerate(factors):
        fq, fscale = _quantize_half(np.asarray(f, dtype=np.float64))
        x = np.moveaxis(np.tensordot(fq, x, axes=([1], [axis])), 0, axis)
        x, xscale = _quantize_half(x)
        scale *= fscale * xscale
    out_len = math.prod(f.shape[0] for f in factors)
    out = x.astype(np.float64) * scale
    return out.reshape((out_len, -1) if batched else out_len)


def reduced_precision_mvm(op, v: np.ndarray) -> np.ndarray:
    """Kronecker MVM with factors and intermediates rounded to half precision.

    Per-factor and per-intermediate dynamic scaling keeps values inside the
    float16 range; inner products accumulate in float32 and the result is
    returned in float64.
    """
    return _apply_kron_half(_factors_of(op), v)
