"""Linearized assignment flow: data terms, the operator A^J(Omega), and solvers."""

import math
from dataclasses import dataclass

import numpy as np

from . import manifold as mf
from .krylov import LinearOperator, phi_action


@dataclass
class DistanceField:
    D: np.ndarray  # |I| x |J|
    rho: float = 1.0

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float)
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if not np.all(np.isfinite(self.D)):
            raise ValueError("distance field has non-finite entries")


def _pixels(image):
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        return image.reshape(-1, image.shape[-1])
    if image.ndim == 2:
        return image
    if image.ndim == 1:
        return image[:, None]
    raise ValueError("image must be (H, W, C), (|I|, C) or (|I|,)")


def distance_field(image, labels, rho=1.0, graph=None, mode="pixel"):
    """Euclidean distances between pixel colors and label colors.

    ``mode="patch"`` averages the center-pixel distances over each pixel's
    neighborhood (requires ``graph``).
    """
    f = _pixels(image)
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    if labels.shape[0] == 0:
        raise ValueError("need at least one label")
    if labels.shape[1] != f.shape[1]:
        raise ValueError(
            "channel mismatch: image has %d channels, labels have %d" % (f.shape[1], labels.shape[1])
        )
    D = np.linalg.norm(f[:, None, :] - labels[None, :, :], axis=-1)
    if mode == "patch":
        if graph is None:
            raise ValueError("patch distances need the grid graph")
        D = graph.gather(D).mean(axis=1)
    elif mode != "pixel":
        raise ValueError("unknown distance mode %r" % mode)
    return DistanceField(D, float(rho))


def likelihood(W, D, rho=1.0):
    return mf.exp_map(W, -np.asarray(D) / rho)


def similarity(W, L, omega):
    """Geometric averaging S_i = Exp_{W_i}(sum_k w_ik Exp^{-1}_{W_i}(L_k))."""
    W = np.asarray(W, dtype=float)
    logL = np.log(np.asarray(L, dtype=float))
    # sum_k w_ik R_{W_i} log(L_k / W_i) = R_{W_i}(sum_k w_ik log L_k - log W_i)
    z = omega.to_sparse() @ logL - np.log(W) * omega.patches.sum(axis=1, keepdims=True)
    return mf.Exp(W, mf.replicator_apply(W, z))


class FlowOperator:
    """Matrix-free A^J(Omega) = Diag(R_S)(Omega kron I) and the data vector b.

    With the default base point (barycenter) ``S`` is S(W0) and
    ``b = vec_r(R_{W0} S(W0))``. Passing ``W`` re-linearizes at another point
    while keeping the barycentric tangent parametrization.
    """

    def __init__(self, graph, omega, distances, W=None):
        self.graph = graph
        self.omega = omega
        self.distances = distances
        D = distances.D
        self.n_pixels, self.n_labels = D.shape
        if self.n_pixels != graph.n_pixels:
            raise ValueError("distance field and graph disagree on pixel count")
        W0 = mf.barycenter(D.shape)
        self.W = W0 if W is None else np.asarray(W, dtype=float)
        self.S = similarity(self.W, likelihood(self.W, D, distances.rho), omega)
        self.B = mf.replicator_apply(W0, self.S)
        self._Om = omega.to_sparse()
        self._OmT = self._Om.T.tocsr()

    @property
    def rho(self):
        return self.distances.rho

    @property
    def dim(self):
        return self.n_pixels * self.n_labels

    @property
    def b(self):
        return self.B.reshape(-1)

    def apply(self, v):
        V = np.asarray(v).reshape(self.n_pixels, self.n_labels)
        return mf.replicator_apply(self.S, self._Om @ V).reshape(-1)

    def apply_transpose(self, u):
        U = np.asarray(u).reshape(self.n_pixels, self.n_labels)
        return (self._OmT @ mf.replicator_apply(self.S, U)).reshape(-1)

    def linear_operator(self):
        return LinearOperator(self.dim, self.apply, self.apply_transpose)

    def to_dense(self):
        """Dense n x n matrix (small instances only)."""
        N, c = self.n_pixels, self.n_labels
        R = np.zeros((N * c, N * c))
        for i in range(N):
            s = self.S[i]
            R[i * c:(i + 1) * c, i * c:(i + 1) * c] = np.diag(s) - np.outer(s, s)
        return R @ np.kron(self.omega.to_dense(), np.eye(c))


def build_flow_operator(graph, omega, distances, W=None):
    return FlowOperator(graph, omega, distances, W)


def solve_linearized(op, T=5.0, m=10):
    """v_T = T phi(T A^J) b by Krylov exponential integration; returns V_T (|I| x |J|)."""
    if T <= 0:
        raise ValueError("integration time must be positive")
    b = op.b
    if not np.any(b):
        return np.zeros((op.n_pixels, op.n_labels))
    v = phi_action(op.linear_operator(), b, T, m)
    return v.reshape(op.n_pixels, op.n_labels)


def integrate_euler(op, T=5.0, h=0.01):
    """Explicit Euler v <- v + h (A^J v + b), v(0) = 0.

    The step is shrunk to T / ceil(T / h) so that the last step lands on T.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    steps = max(1, int(math.ceil(T / h - 1e-9)))
    h = T / steps
    b = op.b
    v = np.zeros_like(b)
    for _ in range(steps):
        v = v + h * (op.apply(v) + b)
    return v.reshape(op.n_pixels, op.n_labels)


def lift_to_labeling(V):
    """Label of each pixel in the limit Exp_1(sV), s -> inf; ties go to the smaller index."""
    return np.argmax(np.asarray(V), axis=-1)


def integrate_nonlinear(image, labels, omega, step_sizes, rho=1.0, m=10, eps=None, graph=None):
    """Sequence of linearized flows re-linearized at W^(k) = Exp_1(V^(k)).

    Returns (W, labeling, n_steps_taken).
    """
    graph = graph or omega.graph
    dist = distance_field(image, labels, rho)
    N, c = dist.D.shape
    if eps is None:
        eps = 1e-3 * math.log(c)
    W0 = mf.barycenter((N, c))
    V = np.zeros((N, c))
    W = W0
    k = 0
    for k, h in enumerate(step_sizes, start=1):
        op = FlowOperator(graph, omega, dist, W=W)
        V = V + solve_linearized(op, h, m)
        W = mf.Exp(W0, V)
        if mf.entropy(W).mean() < eps:
            break
    return W, lift_to_labeling(V), k
