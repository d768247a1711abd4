"""Prototype-based prediction of weight patches from local image features.

A pixel with feature f (the raw colors of its window, in patch order) gets

    a_j = softmax_j(-sigma |f - p_j|),   Omega_hat = exp_1(sum_j a_j nu_j).

Training composes the flow's patch gradient with the analytic differential of
this map. Writing g = R_{Omega_hat} dL/dOmega_hat (the gradient with respect
to the tangent argument of exp_1) and e_j = <g, nu_j>:

    dL/dnu_j    = sum_i a_ij g_i
    r_ij        = a_ij (e_ij - sum_k a_ik e_ik)
    dL/dsigma   = -sum_ij r_ij |f_i - p_j|
    dL/dp_j     = sigma sum_i r_ij (f_i - p_j) / |f_i - p_j|
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.cluster import KMeans

from . import manifold as mf
from .flow import FlowOperator, distance_field, solve_linearized
from .gradient import full_gradient, loss_distance, regularizer
from .graph import WeightField, build_grid
from .training import TrainingAborted, evaluate

log = logging.getLogger(__name__)


@dataclass
class PredictorParams:
    p: np.ndarray  # N x 3|N_patch| feature prototypes
    nu: np.ndarray  # N x |N_patch| tangent vectors
    sigma: float = 1.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        if self.p.shape[0] < 1 or self.p.shape[0] != self.nu.shape[0]:
            raise ValueError("need matching, non-empty prototype and tangent arrays")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def n_prototypes(self):
        return self.p.shape[0]

    def copy(self):
        return PredictorParams(self.p.copy(), self.nu.copy(), self.sigma)


@dataclass
class PredictorConfig:
    n_prototypes: int = 50
    steps: int = 100
    step_size: float = 0.05
    seed: int = 0
    kmeans_iters: int = 20
    kmeans_restarts: int = 3
    T: float = 5.0
    m: int = 10
    tau: float = 0.1
    rho: float = 1.0
    radius: int = 1
    rank: Optional[int] = 1
    max_halvings: int = 20


@dataclass
class PredictorTrace:
    step: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_wrong_pct: List[float] = field(default_factory=list)
    sigma: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    FIELDS = ("step", "train_loss", "val_wrong_pct", "sigma", "seconds")

    def append(self, **row):
        for k in self.FIELDS:
            getattr(self, k).append(row[k])

    def rows(self):
        return [dict(zip(self.FIELDS, v)) for v in zip(*(getattr(self, k) for k in self.FIELDS))]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for row in self.rows():
                fh.write(",".join(repr(row[k]) for k in self.FIELDS) + "\n")


def patch_features(image, graph):
    """Raw colors of each pixel's window, flattened in patch order: |I| x (C |N|)."""
    image = np.asarray(image, dtype=float)
    px = image.reshape(graph.n_pixels, -1)
    return px[graph.neighbor_index].reshape(graph.n_pixels, -1)


def init_predictor(clean_images, n_prototypes=50, seed=0, radius=1, kmeans_iters=20, restarts=3):
    """k-means prototypes on noise-free patches; nu_j points towards pixels similar to the center."""
    feats = []
    for img in clean_images:
        img = np.asarray(img, dtype=float)
        g = build_grid(img.shape[0], img.shape[1], radius)
        feats.append(patch_features(img, g))
    if not feats:
        raise ValueError("empty training corpus")
    F = np.concatenate(feats)
    n_distinct = np.unique(F, axis=0).shape[0]
    if n_prototypes > n_distinct:
        raise ValueError("%d prototypes requested but only %d distinct patches" % (n_prototypes, n_distinct))
    km = KMeans(n_clusters=n_prototypes, max_iter=kmeans_iters, n_init=restarts, random_state=seed)
    km.fit(F)
    p = km.cluster_centers_
    P = (2 * radius + 1) ** 2
    pix = p.reshape(n_prototypes, P, -1)
    d = np.linalg.norm(pix - pix[:, (P - 1) // 2][:, None, :], axis=-1)
    nu = mf.project_tangent(np.exp(-d))
    return PredictorParams(p, nu, 1.0)


def _similarity_weights(F, params):
    d = np.linalg.norm(F[:, None, :] - params.p[None, :, :], axis=-1)
    z = -params.sigma * d
    z -= z.max(axis=1, keepdims=True)
    a = np.exp(z)
    a /= a.sum(axis=1, keepdims=True)
    return a, d


def predict_patches(F, params):
    a, _ = _similarity_weights(F, params)
    return mf.exp_map(np.full((F.shape[0], params.nu.shape[1]), 1.0 / params.nu.shape[1]), a @ params.nu)


def predict_weights(image, params, graph=None, radius=1):
    image = np.asarray(image, dtype=float)
    graph = graph or build_grid(image.shape[0], image.shape[1], radius)
    F = patch_features(image, graph)
    if F.shape[1] != params.p.shape[1]:
        raise ValueError("feature dimension %d does not match prototypes (%d)" % (F.shape[1], params.p.shape[1]))
    return WeightField(graph, predict_patches(F, params))


def backprop_patches(F, params, G):
    """Chain rule from Euclidean patch gradients G (|I| x |N|) to (dp, dnu, dsigma)."""
    a, d = _similarity_weights(F, params)
    Om = mf.exp_map(np.full(G.shape, 1.0 / G.shape[1]), a @ params.nu)
    g = mf.replicator_apply(Om, G)
    dnu = mf.project_tangent(a.T @ g)
    e = g @ params.nu.T
    r = a * (e - np.sum(a * e, axis=1, keepdims=True))
    dsigma = -float(np.sum(r * d))
    q = params.sigma * r / np.where(d > 0, d, np.inf)
    dp = q.T @ F - q.sum(axis=0)[:, None] * params.p
    return dp, dnu, dsigma


class _Sample:
    def __init__(self, li, cfg):
        H, W = li.truth.shape
        self.graph = build_grid(H, W, cfg.radius)
        self.F = patch_features(li.noisy, self.graph)
        self.dist = distance_field(li.noisy, li.labels, cfg.rho)
        self.Vstar = li.V_star
        self.truth = li.truth.reshape(-1)
        self.tau = cfg.tau / self.graph.n_pixels


def _loss_and_grad(samples, params, cfg):
    dp = np.zeros_like(params.p)
    dnu = np.zeros_like(params.nu)
    dsig = 0.0
    total = 0.0
    for s in samples:
        omega = WeightField(s.graph, predict_patches(s.F, params))
        res = full_gradient(FlowOperator(s.graph, omega, s.dist), s.Vstar, cfg.T, cfg.m, s.tau, cfg.rank)
        total += res.loss
        gp, gn, gs = backprop_patches(s.F, params, res.euclidean)
        dp += gp
        dnu += gn
        dsig += gs
    k = len(samples)
    return total / k, dp / k, dnu / k, dsig / k


def predictor_loss(samples, params, cfg):
    total = 0.0
    for s in samples:
        omega = WeightField(s.graph, predict_patches(s.F, params))
        V = solve_linearized(FlowOperator(s.graph, omega, s.dist), cfg.T, cfg.m)
        total += loss_distance(V, s.Vstar) + regularizer(omega, s.tau)
    return total / len(samples)


def labeling_error(samples, params, cfg):
    wrong = []
    for s in samples:
        omega = WeightField(s.graph, predict_patches(s.F, params))
        V = solve_linearized(FlowOperator(s.graph, omega, s.dist), cfg.T, cfg.m)
        wrong.append(evaluate(V, s.truth)[0])
    return float(np.mean(wrong))


def train_predictor(train_images, val_images=None, config=None, params=None):
    """Gradient descent on (p, log sigma, nu); returns (PredictorParams, PredictorTrace).

    The step is ``step_size`` times the mean pixel count and is halved
    (persistently) whenever the training loss would increase.

    ``train_images`` and ``val_images`` are LabeledImage lists; prototypes are
    initialized from the clean training images unless ``params`` is given.
    """
    cfg = config or PredictorConfig()
    if params is None:
        params = init_predictor([li.clean for li in train_images], cfg.n_prototypes, cfg.seed,
                                cfg.radius, cfg.kmeans_iters, cfg.kmeans_restarts)
    params = params.copy()
    samples = [_Sample(li, cfg) for li in train_images]
    val = [_Sample(li, cfg) for li in (val_images or [])]
    trace = PredictorTrace()
    t0 = time.perf_counter()
    # per-pixel step units, as in the weight-field training
    h = cfg.step_size * np.mean([s.graph.n_pixels for s in samples])
    for step in range(1, cfg.steps + 1):
        loss, dp, dnu, dsig = _loss_and_grad(samples, params, cfg)
        if not (np.isfinite(loss) and np.all(np.isfinite(dp)) and np.all(np.isfinite(dnu))):
            raise TrainingAborted("non-finite predictor loss or gradient at step %d" % step, trace)
        for _ in range(cfg.max_halvings + 1):
            cand = PredictorParams(params.p - h * dp, params.nu - h * dnu,
                                   float(np.exp(np.log(params.sigma) - h * params.sigma * dsig)))
            if predictor_loss(samples, cand, cfg) <= loss:
                break
            h *= 0.5
        params = cand
        vw = labeling_error(val, params, cfg) if val else float("nan")
        trace.append(step=step, train_loss=loss, val_wrong_pct=vw, sigma=params.sigma,
                     seconds=time.perf_counter() - t0)
    return params, trace


def save_predictor(path, params):
    header = {"n_prototypes": params.n_prototypes, "feature_dim": params.p.shape[1],
              "patch_size": params.nu.shape[1], "sigma": params.sigma, "dtype": "f64"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(params.p, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.nu, dtype="<f8").tobytes())


def load_predictor(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    if header.get("dtype") != "f64":
        raise ValueError("unsupported dtype %r" % header.get("dtype"))
    N, dim, P = header["n_prototypes"], header["feature_dim"], header["patch_size"]
    if payload.size != N * (dim + P):
        raise ValueError("payload size mismatch")
    return PredictorParams(payload[:N * dim].reshape(N, dim).copy(),
                           payload[N * dim:].reshape(N, P).copy(), header["sigma"])
