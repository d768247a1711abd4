"""Loss, regularizer and the closed-form parameter gradient of the linearized flow.

Parameters are the weight patches, an |I| x |N| array; directions ``Y`` and
gradients ``G`` live in the same patch layout. All differentials below are
taken with respect to patch entries, so on tiny grids where a neighbor
occurs twice in a window the corresponding entries of Omega simply add up.

The loss gradient has three parts:

* the flow-operator part, <g, (I,0) dexpm(Acal)[dAcal Y] e_{n+1}>, evaluated
  through two Arnoldi bases and a low-rank SVD of the small phi-core;
* the data-vector part, <g, T phi(T A^J) db Y>, evaluated exactly with one
  phi-action of the transposed operator;
* the regularizer.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import manifold as mf
from .flow import FlowOperator, distance_field, solve_linearized
from .graph import WeightField
from .krylov import LinearOperator, arnoldi, expm_action, expm_dense, kron_sum, phi_action, phi_dense

log = logging.getLogger(__name__)


class BudgetError(RuntimeError):
    """Finite-difference oracle refused an instance that is too large."""


# ---------------------------------------------------------------------------
# loss and regularizer


def loss_distance(V, Vstar):
    """Cosine distance 1 - <V*, V> / (|V*| |V|); 1 for a zero V."""
    V = np.asarray(V, dtype=float)
    Vstar = np.asarray(Vstar, dtype=float)
    nv, ns = np.linalg.norm(V), np.linalg.norm(Vstar)
    if nv == 0 or ns == 0:
        log.warning("cosine loss evaluated at a zero field; returning 1")
        return 1.0
    return 1.0 - float(np.sum(Vstar * V) / (ns * nv))


def loss_distance_grad(V, Vstar):
    V = np.asarray(V, dtype=float)
    Vstar = np.asarray(Vstar, dtype=float)
    nv, ns = np.linalg.norm(V), np.linalg.norm(Vstar)
    if nv == 0:
        raise ZeroDivisionError("cosine loss gradient undefined at V = 0")
    G = -Vstar / (ns * nv) + float(np.sum(Vstar * V)) * V / (ns * nv ** 3)
    return mf.project_tangent(G)


def _reg_tangent(patches):
    # t_i = exp_{1}^{-1}(Omega_i) = Pi0 log Omega_i (barycentric base point)
    return mf.project_tangent(np.log(patches))


def regularizer(omega, tau):
    P = omega.patches if isinstance(omega, WeightField) else np.asarray(omega)
    return 0.5 * tau * float(np.sum(_reg_tangent(P) ** 2))


def regularizer_grad(omega, tau):
    """Euclidean patch gradient tau * t_i / Omega_i."""
    P = omega.patches if isinstance(omega, WeightField) else np.asarray(omega)
    return tau * _reg_tangent(P) / P


def regularizer_differential(omega, tau, Y):
    """dR(Omega)Y = tau sum_i <t_i, Pi0(Y_i / Omega_i)> for tangent patch directions Y."""
    P = omega.patches if isinstance(omega, WeightField) else np.asarray(omega)
    return tau * float(np.sum(_reg_tangent(P) * mf.project_tangent(np.asarray(Y) / P)))


def riemannian_gradient(euclidean, omega):
    """Fisher-Rao gradient R_{Omega_i} g_i for every patch."""
    P = omega.patches if isinstance(omega, WeightField) else np.asarray(omega)
    return mf.replicator_apply(P, euclidean)


# ---------------------------------------------------------------------------
# patch-pattern helpers


def _patch_apply(graph, Y, X):
    """(Y X)_i = sum_p Y[i, p] X[nbr(i, p)] for Y in patch layout."""
    return np.einsum("ip,ipc->ic", Y, X[graph.neighbor_index])


def _patch_pair(graph, A, X):
    """G[i, p] = <A_i, X[nbr(i, p)]>, the adjoint of _patch_apply in its Y slot."""
    return np.einsum("ic,ipc->ip", A, X[graph.neighbor_index])


# ---------------------------------------------------------------------------
# differentials of the maps Omega -> S(W0), b, A^J, Acal and their adjoints


def df1(op, Y):
    """d S(W0) [Y] = -(1/rho) R_S (Y D)."""
    return -mf.replicator_apply(op.S, _patch_apply(op.graph, Y, op.distances.D)) / op.rho


def df1_adjoint(op, Z):
    """-(1/rho) R_S(Z) D^T restricted to the patch pattern."""
    Z = np.asarray(Z).reshape(op.n_pixels, op.n_labels)
    return -_patch_pair(op.graph, mf.replicator_apply(op.S, Z), op.distances.D) / op.rho


def _R_W0(op, Z):
    return mf.replicator_apply(mf.barycenter(Z.shape), Z)


def df2(op, Y):
    """d b [Y] = vec_r(R_W0 df1(Y))."""
    return _R_W0(op, df1(op, Y)).reshape(-1)


def df2_adjoint(op, z):
    Z = np.asarray(z).reshape(op.n_pixels, op.n_labels)
    return df1_adjoint(op, _R_W0(op, Z))


def _dR_apply(S, dS, X):
    # (Diag(dS) - dS S^T - S dS^T) x, row-wise
    return dS * X - dS * np.sum(S * X, axis=-1, keepdims=True) - S * np.sum(dS * X, axis=-1, keepdims=True)


def df3_apply(op, Y, v):
    """(d A^J [Y]) v, matrix-free."""
    V = np.asarray(v).reshape(op.n_pixels, op.n_labels)
    dS = df1(op, Y)
    X = op._Om @ V
    out = _dR_apply(op.S, dS, X) + mf.replicator_apply(op.S, _patch_apply(op.graph, Y, V))
    return out.reshape(-1)


def df3_dense(op, Y):
    n = op.dim
    eye = np.eye(n)
    return np.column_stack([df3_apply(op, Y, eye[:, j]) for j in range(n)])


def df3_adjoint(op, a, z):
    """Patch gradient of Y -> a^T (d A^J [Y]) z."""
    N, c = op.n_pixels, op.n_labels
    a = np.asarray(a).reshape(N, c)
    z = np.asarray(z).reshape(N, c)
    S = op.S
    X = op._Om @ z
    # a_i^T dR[dS_i] x_i = <dS_i, h_i>
    h = a * X - a * np.sum(S * X, axis=-1, keepdims=True) - X * np.sum(S * a, axis=-1, keepdims=True)
    return _patch_pair(op.graph, mf.replicator_apply(S, a), z) + df1_adjoint(op, h)


def dA_dense(op, Y, T, include_b=True):
    """d Acal [Y] as a dense (n+1) x (n+1) matrix."""
    n = op.dim
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = T * df3_dense(op, Y)
    if include_b:
        M[:n, n] = T * df2(op, Y)
    return M


def dA_adjoint(op, terms, T, include_b=True):
    """Patch gradient of Y -> <d Acal [Y], sum_r alpha_r u_r w_r^T>.

    ``terms`` is a sequence of (alpha, u, w) with u, w of length n+1. With
    ``include_b=False`` the last column of d Acal (the data-vector block) is
    left out.
    """
    n = op.dim
    G = np.zeros(op.graph.neighbor_index.shape)
    for alpha, u, w in terms:
        u = np.asarray(u)
        w = np.asarray(w)
        G += alpha * df3_adjoint(op, u[:n], w[:n])
        if include_b:
            G += alpha * w[n] * df2_adjoint(op, u[:n])
    return T * G


# ---------------------------------------------------------------------------
# augmented operator and the low-rank phi-core


class AugmentedOperator:
    """Acal = [[T A^J, T b], [0, 0]] acting on R^{n+1}."""

    def __init__(self, op, T):
        self.op = op
        self.T = float(T)
        self.n = op.dim
        self.dim = self.n + 1
        self._b = op.b

    def apply(self, x):
        x = np.asarray(x)
        out = np.zeros(self.dim)
        out[: self.n] = self.T * (self.op.apply(x[: self.n]) + self._b * x[self.n])
        return out

    def apply_transpose(self, y):
        y = np.asarray(y)
        out = np.empty(self.dim)
        out[: self.n] = self.T * self.op.apply_transpose(y[: self.n])
        out[self.n] = self.T * float(self._b @ y[: self.n])
        return out

    def linear_operator(self):
        return LinearOperator(self.dim, self.apply, self.apply_transpose)

    def to_dense(self):
        M = np.zeros((self.dim, self.dim))
        M[: self.n, : self.n] = self.T * self.op.to_dense()
        M[: self.n, self.n] = self.T * self._b
        return M


@dataclass
class RankOneGradientFactors:
    c: float
    sigma1: float
    u: np.ndarray
    w: np.ndarray
    T: float
    full_svd: List[tuple] = field(default_factory=list)  # (sigma_i, P y_i, Q z_i)

    @property
    def sigmas(self):
        return np.array([s for s, _, _ in self.full_svd]) if self.full_svd else np.array([self.sigma1])

    @property
    def sigma_ratio(self):
        s = self.sigmas
        if len(s) < 2 or s[0] == 0:
            return 0.0
        return float(s[1] / s[0])

    def terms(self, rank=1):
        """(alpha, u, w) triples of the rank-``rank`` reconstruction; None means all."""
        if rank == 1 or not self.full_svd:
            return [(self.c * self.sigma1, self.u, self.w)]
        chosen = self.full_svd if rank is None else self.full_svd[:rank]
        return [(self.c * s, u, w) for s, u, w in chosen]

    def reconstruct(self, rank=1):
        return sum(a * np.outer(u, w) for a, u, w in self.terms(rank))


def assemble_b1(op, v_T, g, T, m=10):
    """b1 = (expm(T A^J), v_T)^T g as an (n+1)-vector."""
    g = np.asarray(g).reshape(-1)
    if not np.any(g):
        raise ValueError("loss gradient is zero; the flow-dependent gradient vanishes")
    top = expm_action(op.linear_operator().T, g, T, m)
    return np.concatenate([top, [float(np.asarray(v_T).reshape(-1) @ g)]])


def benzi_rank1(aug, b1, m=10):
    """Two-sided Krylov projection of phi(-Acal^T (+) Acal)(b1 kron e_{n+1}) and its SVD."""
    k = aug.dim
    b2 = np.zeros(k)
    b2[-1] = 1.0
    K1 = arnoldi(LinearOperator(k, lambda x: -aug.apply_transpose(x)), b1, m)
    K2 = arnoldi(aug.linear_operator(), b2, m)
    core = kron_sum(K1.H, K2.H)
    _, col = phi_dense(core)
    Xc = col.reshape(K1.m_eff, K2.m_eff)
    Ysv, sig, Zt = np.linalg.svd(Xc)
    svd = [(float(sig[i]), K1.Q @ Ysv[:, i], K2.Q @ Zt[i]) for i in range(len(sig))]
    c = K1.beta * K2.beta
    return RankOneGradientFactors(c, svd[0][0], svd[0][1], svd[0][2], aug.T, svd)


def apply_dA_transpose_rank1(op, factors, rank=1, include_b=True):
    """Flow-operator part of the Euclidean gradient from the low-rank factors."""
    return dA_adjoint(op, factors.terms(rank), factors.T, include_b)


def second_summand_grad(op, g, T, m=10):
    """Patch gradient of Y -> <g, T phi(T A^J) db[Y]>."""
    g = np.asarray(g).reshape(-1)
    if not np.any(g):
        return np.zeros(op.graph.neighbor_index.shape)
    q = phi_action(op.linear_operator().T, g, T, m)
    return df2_adjoint(op, q)


# ---------------------------------------------------------------------------
# full gradient


@dataclass
class GradientResult:
    euclidean: np.ndarray
    riemannian: np.ndarray
    loss: float
    V_T: np.ndarray
    factors: Optional[RankOneGradientFactors] = None
    degenerate: bool = False

    @property
    def sigma1(self):
        return self.factors.sigma1 if self.factors else float("nan")

    @property
    def sigma_ratio(self):
        return self.factors.sigma_ratio if self.factors else float("nan")


def full_gradient(op, Vstar, T=5.0, m=10, tau=0.1, rank=1, second_summand=True):
    """Loss and its Euclidean/Riemannian patch gradients at op.omega.

    ``rank`` selects how many singular triplets of the phi-core enter the
    flow-operator part (None: all). With ``second_summand=False`` the
    data-vector dependence is carried only by the low-rank term, which is the
    leaner approximation; the default evaluates it exactly instead.
    """
    omega = op.omega
    V_T = solve_linearized(op, T, m)
    G = regularizer_grad(omega, tau)
    loss = loss_distance(V_T, Vstar) + regularizer(omega, tau)
    if not np.any(V_T):
        warnings.warn("flow solution is zero; returning the regularizer gradient only")
        return GradientResult(G, riemannian_gradient(G, omega), loss, V_T, None, True)
    g = loss_distance_grad(V_T, Vstar).reshape(-1)
    factors = None
    if np.any(g):
        aug = AugmentedOperator(op, T)
        b1 = assemble_b1(op, V_T, g, T, m)
        factors = benzi_rank1(aug, b1, m)
        G = G + apply_dA_transpose_rank1(op, factors, rank, include_b=not second_summand)
        if second_summand:
            G = G + second_summand_grad(op, g, T, m)
    return GradientResult(G, riemannian_gradient(G, omega), loss, V_T, factors)


def loss_value(op, Vstar, T=5.0, m=10, tau=0.1):
    V_T = solve_linearized(op, T, m)
    return loss_distance(V_T, Vstar) + regularizer(op.omega, tau), V_T


# ---------------------------------------------------------------------------
# dense reference evaluations (small instances)


def dense_v_T(op, T):
    """v_T from the last column of expm(Acal), fully dense."""
    A = AugmentedOperator(op, T).to_dense()
    return expm_dense(A)[:-1, -1]


def dense_first_summand(op, Y, T, include_b=True):
    """(I,0) dexpm(Acal)[dAcal Y] e_{n+1}, via a directional derivative of expm.

    Uses the block identity expm([[X, Z], [0, X]]) = [[e^X, dexpm(X)Z], [0, e^X]].
    """
    A = AugmentedOperator(op, T).to_dense()
    dA = dA_dense(op, Y, T, include_b)
    k = A.shape[0]
    big = np.zeros((2 * k, 2 * k))
    big[:k, :k] = A
    big[k:, k:] = A
    big[:k, k:] = dA
    dE = expm_dense(big)[:k, k:]
    return dE[:-1, -1]


def dense_dv_T(op, Y, T):
    """Directional derivative of v_T: operator part plus exact data-vector part."""
    _, phib = phi_dense(T * op.to_dense(), df2(op, Y))
    return dense_first_summand(op, Y, T, include_b=False) + T * phib


# ---------------------------------------------------------------------------
# finite-difference oracle


def tangent_directions(patch_size):
    """Coordinate directions e_p - 1/|N| of the patch simplex tangent space."""
    return np.eye(patch_size) - 1.0 / patch_size


def fd_gradient_oracle(image, labels, omega, Vstar, T=5.0, tau=0.1, rho=1.0, h_fd=1e-5,
                       euler_h=1e-3, solver="euler", max_evals=20000, distances=None):
    """Central differences of the full loss along per-patch tangent coordinates.

    Returns Pi0 of the Euclidean patch gradient. ``solver`` selects the flow
    used inside the loss: "euler" (explicit Euler with step ``euler_h``) or
    "dense" (exact dense phi of the augmented matrix).
    """
    g = omega.graph
    N, P = g.n_pixels, g.patch_size
    if 2 * N * P > max_evals:
        raise BudgetError("finite-difference oracle needs %d flow solves (budget %d)" % (2 * N * P, max_evals))
    dist = distances or distance_field(image, labels, rho)
    base = omega.patches
    if solver == "euler":
        return _fd_euler_batched(g, dist, base, Vstar, T, tau, h_fd, euler_h)
    if solver != "dense":
        raise ValueError("unknown solver %r" % solver)
    dirs = tangent_directions(P)
    out = np.zeros((N, P))
    for i in range(N):
        for p in range(P):
            vals = []
            for sgn in (1.0, -1.0):
                pt = base.copy()
                pt[i] = pt[i] + sgn * h_fd * dirs[p]
                w = WeightField(g, pt)
                op = FlowOperator(g, w, dist)
                v = dense_v_T(op, T).reshape(N, -1)
                vals.append(loss_distance(v, Vstar) + regularizer(w, tau))
            out[i, p] = (vals[0] - vals[1]) / (2 * h_fd)
    return out


def _fd_euler_batched(graph, dist, base, Vstar, T, tau, h_fd, euler_h, chunk=2048):
    """All perturbed Euler solves advanced together, ``chunk`` at a time.

    Each job perturbs a single patch, so the shared part of Omega V is one
    sparse product and only the perturbed pixel gets a correction.
    """
    N, P = base.shape
    D, rho = dist.D, dist.rho
    c = D.shape[1]
    nbr = graph.neighbor_index
    dirs = tangent_directions(P)
    jobs = [(i, p, s) for i in range(N) for p in range(P) for s in (1.0, -1.0)]
    losses = np.empty(len(jobs))
    steps = max(1, int(math.ceil(T / euler_h - 1e-9)))
    h = T / steps
    Om_base = WeightField(graph, base).to_sparse()
    W0 = mf.barycenter((N, c))
    S_base = mf.exp_map(W0, -(Om_base @ D) / rho)
    for start in range(0, len(jobs), chunk):
        batch = jobs[start:start + chunk]
        Bn = len(batch)
        rows = np.array([i for i, _, _ in batch])
        delta = np.array([s * h_fd * dirs[p] for _, p, s in batch])  # Bn x P
        cols = nbr[rows]  # Bn x P
        jb = np.arange(Bn)
        S = np.broadcast_to(S_base[:, None, :], (N, Bn, c)).copy()
        S[rows, jb] = mf.exp_map(W0[0], -((base[rows] + delta)[:, :, None] * D[cols]).sum(axis=1) / rho)
        Bvec = mf.replicator_apply(W0[0], S)
        V = np.zeros((N, Bn, c))
        for _ in range(steps):
            X = (Om_base @ V.reshape(N, Bn * c)).reshape(N, Bn, c)
            X[rows, jb] += np.einsum("bp,bpc->bc", delta, V[cols, jb[:, None]])
            V += h * (S * X - S * np.sum(S * X, axis=-1, keepdims=True) + Bvec)
        for j, (i, p, s) in enumerate(batch):
            Om = base.copy()
            Om[i] += s * h_fd * dirs[p]
            losses[start + j] = loss_distance(V[:, j], Vstar) + regularizer(Om, tau)
    diff = (losses[0::2] - losses[1::2]) / (2 * h_fd)
    return diff.reshape(N, P)


def pixel_cosines(A, B, eps=0.0):
    """Per-row cosine similarity of two patch gradients."""
    A = mf.project_tangent(np.asarray(A))
    B = mf.project_tangent(np.asarray(B))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    return np.sum(A * B, axis=1) / np.maximum(na * nb, np.finfo(float).tiny + eps)


def gradient_agreement(image, labels, Vstar, omega, T=5.0, m=10, tau=0.1, rho=1.0, mode="fd", rank=1):
    """Cosines between the closed-form gradient and a finite-difference oracle at every pixel.

    ``mode="fd"`` differentiates explicit Euler (step 1e-3), ``mode="dense"``
    the exact dense solution.
    """
    dist = distance_field(image, labels, rho)
    res = full_gradient(FlowOperator(omega.graph, omega, dist), Vstar, T, m, tau, rank)
    solver = {"fd": "euler", "dense": "dense"}.get(mode)
    if solver is None:
        raise ValueError("mode must be 'fd' or 'dense'")
    ref = fd_gradient_oracle(image, labels, omega, Vstar, T, tau, rho, solver=solver, distances=dist)
    return pixel_cosines(res.euclidean, ref)
