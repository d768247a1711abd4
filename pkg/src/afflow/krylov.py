"""Krylov approximations of exp(tA)b and t*phi(tA)b for matrix-free operators.

phi(x) = (e^x - 1)/x. Small dense exponentials are computed by scaling and
squaring with the degree-13 diagonal Pade approximant; phi is always obtained
from the exponential of the augmented matrix [[M, b], [0, 0]].
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg


class BreakdownError(ValueError):
    """Raised for a zero starting vector."""


@dataclass
class LinearOperator:
    """An n x n linear map given by its action (and optionally its transpose)."""

    dim: int
    matvec: Callable[[np.ndarray], np.ndarray]
    rmatvec: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x):
        return self.matvec(x)

    @property
    def T(self):
        if self.rmatvec is None:
            raise NotImplementedError("operator has no transpose action")
        return LinearOperator(self.dim, self.rmatvec, self.matvec)

    def to_dense(self):
        eye = np.eye(self.dim)
        return np.column_stack([self.matvec(eye[:, j]) for j in range(self.dim)])

    @classmethod
    def from_dense(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M.shape[0], lambda x: M @ x, lambda x: M.T @ x)


@dataclass
class KrylovDecomposition:
    Q: np.ndarray  # n x m_eff, orthonormal columns
    H: np.ndarray  # m_eff x m_eff, upper Hessenberg
    beta: float
    h_next: float  # subdiagonal entry h_{m+1,m}; 0 after a happy breakdown
    q_next: Optional[np.ndarray]

    @property
    def m_eff(self):
        return self.H.shape[0]


def arnoldi(A, b, m, breakdown_tol=1e-12):
    """Arnoldi process with modified Gram-Schmidt plus one reorthogonalization.

    Stops early when the new direction has norm below
    ``breakdown_tol * ||A q_j||``, i.e. the Krylov space is invariant.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    beta = float(np.linalg.norm(b))
    if beta == 0.0 or not np.isfinite(beta):
        raise BreakdownError("Krylov starting vector must be nonzero and finite")
    m = int(min(m, n))
    if m < 1:
        raise ValueError("Krylov dimension must be >= 1")
    Q = np.zeros((n, m + 1))
    H = np.zeros((m + 1, m))
    Q[:, 0] = b / beta
    for j in range(m):
        w = np.asarray(A(Q[:, j]), dtype=float)
        scale = np.linalg.norm(w)
        for _ in range(2):
            for i in range(j + 1):
                c = Q[:, i] @ w
                H[i, j] += c
                w = w - c * Q[:, i]
        h = np.linalg.norm(w)
        if h <= breakdown_tol * scale:
            m_eff = j + 1
            return KrylovDecomposition(Q[:, :m_eff], H[:m_eff, :m_eff], beta, 0.0, None)
        H[j + 1, j] = h
        Q[:, j + 1] = w / h
    return KrylovDecomposition(Q[:, :m], H[:m, :m], beta, float(H[m, m - 1]), Q[:, m])


# Pade(13) coefficients and the 1-norm threshold theta_13 (Higham 2005)
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


def expm_dense(M):
    """Matrix exponential of a small dense matrix (scaling and squaring, Pade 13)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expm_dense needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    k = M.shape[0]
    if k == 0:
        return M.copy()
    norm1 = np.abs(M).sum(axis=0).max()
    s = 0
    if norm1 > _THETA13:
        s = int(np.ceil(np.log2(norm1 / _THETA13)))
    A = M / (2.0 ** s)
    c = _PADE13
    I = np.eye(k)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (c[13] * A6 + c[11] * A4 + c[9] * A2)
             + c[7] * A6 + c[5] * A4 + c[3] * A2 + c[1] * I)
    V = A6 @ (c[12] * A6 + c[10] * A4 + c[8] * A2) + c[6] * A6 + c[4] * A4 + c[2] * A2 + c[0] * I
    R = scipy.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def phi_dense(M, b=None):
    """Return (expm(M), phi(M) b) from the exponential of [[M, b], [0, 0]].

    ``b`` defaults to the first unit vector.
    """
    M = np.asarray(M, dtype=float)
    k = M.shape[0]
    if b is None:
        b = np.zeros(k)
        b[0] = 1.0
    aug = np.zeros((k + 1, k + 1))
    aug[:k, :k] = M
    aug[:k, k] = b
    E = expm_dense(aug)
    return E[:k, :k], E[:k, k]


def _as_operator(A):
    if isinstance(A, LinearOperator):
        return A
    if callable(A):
        return A
    return LinearOperator.from_dense(A)


def expm_action(A, b, t=1.0, m=10, breakdown_tol=1e-12):
    """Approximate expm(tA) b by ||b|| Q_m expm(t H_m) e_1."""
    K = arnoldi(_as_operator(A), b, m, breakdown_tol)
    E = expm_dense(t * K.H)
    return K.beta * (K.Q @ E[:, 0])


def phi_action(A, b, t=1.0, m=10, breakdown_tol=1e-12):
    """Approximate t phi(tA) b by t ||b|| Q_m phi(t H_m) e_1."""
    K = arnoldi(_as_operator(A), b, m, breakdown_tol)
    _, col = phi_dense(t * K.H)
    return t * K.beta * (K.Q @ col)


def kron_sum(A, B):
    """A (+) B = A kron I + I kron B."""
    A = np.asarray(A)
    B = np.asarray(B)
    return np.kron(A, np.eye(B.shape[0])) + np.kron(np.eye(A.shape[0]), B)


def dexpm_dense(X, Y):
    """Directional derivative of expm at X along Y, via the Kronecker-sum phi formula.

    Dense and O(k^6); meant for validating gradient assembly on tiny problems.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.shape[0] != X.shape[1]:
        raise ValueError("X and Y must be square matrices of equal size")
    k = X.shape[0]
    _, col = phi_dense(kron_sum(-X, X.T), Y.reshape(-1))
    return (np.kron(expm_dense(X), np.eye(k)) @ col).reshape(k, k)
