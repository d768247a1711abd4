"""Fisher-Rao maps on the open probability simplex and its products.

Every function accepts either a single vector of length ``c`` or a field of
shape ``(..., c)``; the last axis is always the simplex axis, so the same
code serves the single-point and the row-wise (assignment matrix) forms.
"""

import numpy as np

# entries of lifted simplex points are kept above this floor
SIMPLEX_FLOOR = 1e-12


class DomainError(ValueError):
    """Input lies outside the domain of a map (non-positive simplex entry)."""


def _check_dim(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ValueError("simplex dimension must be at least 2, got shape %s" % (z.shape,))
    return z


def _check_positive(p, name="p"):
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise DomainError("%s must be strictly positive and finite" % name)
    return p


def _floor(p):
    if np.any(p < SIMPLEX_FLOOR):
        p = np.maximum(p, SIMPLEX_FLOOR)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


def barycenter(shape):
    """Uniform distribution(s) of the given shape (or length), last axis is the simplex axis."""
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    return np.full(shape, 1.0 / shape[-1])


def project_tangent(z):
    """Orthogonal projection onto T0 = {v : sum(v) = 0}."""
    z = _check_dim(z)
    return z - z.mean(axis=-1, keepdims=True)


def replicator_apply(p, z):
    """(Diag(p) - p p^T) z, applied along the last axis."""
    p = np.asarray(p, dtype=float)
    z = np.asarray(z, dtype=float)
    if p.shape[-1] != z.shape[-1]:
        raise ValueError("dimension mismatch: %s vs %s" % (p.shape, z.shape))
    return p * z - p * np.sum(p * z, axis=-1, keepdims=True)


def exp_map(p, z):
    """Lifting map exp_p(z) = p e^z / <p, e^z>.

    Evaluated in the shifted log-domain, so large ``z`` cannot overflow.
    """
    p = np.asarray(p, dtype=float)
    z = np.asarray(z, dtype=float)
    if p.shape[-1] != z.shape[-1]:
        raise ValueError("dimension mismatch: %s vs %s" % (p.shape, z.shape))
    logits = np.log(p) + z
    logits = logits - logits.max(axis=-1, keepdims=True)
    q = np.exp(logits)
    q /= q.sum(axis=-1, keepdims=True)
    return _floor(q)


def exp_map_inverse(p, q):
    """Inverse of exp_p restricted to T0: Pi0(log q - log p)."""
    p = _check_positive(p, "p")
    q = _check_positive(q, "q")
    return project_tangent(np.log(q) - np.log(p))


def Exp(p, v):
    """Exponential map Exp_p(v) = p e^{v/p} / <p, e^{v/p}> for v in T0."""
    p = _check_positive(p, "p")
    return exp_map(p, np.asarray(v, dtype=float) / p)


def Exp_inverse(p, q):
    """Exp_p^{-1}(q) = R_p log(q/p)."""
    p = _check_positive(p, "p")
    q = _check_positive(q, "q")
    return replicator_apply(p, np.log(q / p))


def entropy(W):
    """Shannon entropy of each row of an assignment field."""
    W = np.asarray(W, dtype=float)
    return -np.sum(W * np.log(np.maximum(W, SIMPLEX_FLOOR)), axis=-1)


def is_simplex_point(p, atol=1e-12):
    p = np.asarray(p, dtype=float)
    return bool(np.all(p > 0) and np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol))


def vec_r(M):
    """Row-stacking vectorization."""
    return np.asarray(M).reshape(-1)


def unvec_r(v, shape):
    return np.asarray(v).reshape(shape)
