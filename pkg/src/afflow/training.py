"""Riemannian gradient descent on weight patches, with traces and checkpoints.

Step size and regularizer weight are given per pixel: the cosine loss is a
single number for the whole image, so its patch gradient shrinks like
1/|I|. Internally the step is h * |I| and the regularizer weight tau / |I|,
which keeps the defaults meaningful across image sizes.
"""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import manifold as mf
from .flow import FlowOperator, distance_field, lift_to_labeling, solve_linearized
from .gradient import full_gradient, fd_gradient_oracle, loss_distance, regularizer, riemannian_gradient
from .graph import WeightField, build_grid, save_omega, uniform_weights, validate_weights

log = logging.getLogger(__name__)

RANK_MODES = ("rank-1", "rank-r", "full-m")
GRAD_MODES = ("closed-form", "fd-oracle")
TRACE_FIELDS = ("iteration", "loss", "wrong_pct", "grad_norm", "sigma1", "sigma_ratio", "seconds")


@dataclass
class TrainConfig:
    T: float = 5.0
    m: int = 10
    tau: float = 0.1
    step_size: float = 0.5
    max_iters: int = 100
    seed: int = 0
    rank_mode: str = "rank-1"
    rank_r: int = 2
    grad_mode: str = "closed-form"
    rho: float = 1.0
    radius: int = 1
    grad_tol: float = 1e-6
    max_halvings: int = 30
    checkpoint_every: int = 10
    second_summand: bool = True

    def __post_init__(self):
        for name in ("T", "step_size", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.m < 1 or self.max_iters < 1 or self.rank_r < 1 or self.radius < 1:
            raise ValueError("m, max_iters, rank_r and radius must be >= 1")
        if self.rank_mode not in RANK_MODES:
            raise ValueError("rank_mode must be one of %s" % (RANK_MODES,))
        if self.grad_mode not in GRAD_MODES:
            raise ValueError("grad_mode must be one of %s" % (GRAD_MODES,))

    @property
    def rank(self):
        return {"rank-1": 1, "rank-r": self.rank_r, "full-m": None}[self.rank_mode]


@dataclass
class TrainTrace:
    iteration: List[int] = field(default_factory=list)
    loss: List[float] = field(default_factory=list)
    wrong_pct: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    sigma1: List[float] = field(default_factory=list)
    sigma_ratio: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    initial_wrong_pct: float = float("nan")

    def __len__(self):
        return len(self.iteration)

    def append(self, **row):
        for k in TRACE_FIELDS:
            getattr(self, k).append(row[k])

    def rows(self):
        return [dict(zip(TRACE_FIELDS, vals)) for vals in zip(*(getattr(self, k) for k in TRACE_FIELDS))]

    @property
    def final_wrong_pct(self):
        return self.wrong_pct[-1] if self.wrong_pct else self.initial_wrong_pct

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; carries the trace recorded so far."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def descend_step(omega, grad, h):
    """Omega_i <- exp_{Omega_i}(-h grad_i) for every patch."""
    return WeightField(omega.graph, mf.exp_map(omega.patches, -h * np.asarray(grad)))


def evaluate(V, truth, Vstar=None):
    """Wrong-pixel percentage of argmax(V) against ``truth`` and, given V*, the cosine loss."""
    V = np.asarray(V)
    truth = np.asarray(truth).reshape(-1)
    labels = lift_to_labeling(V.reshape(truth.size, -1))
    if labels.shape != truth.shape:
        raise ValueError("labeling and ground truth differ in size")
    wrong = 100.0 * float(np.mean(labels != truth))
    loss = loss_distance(V, Vstar) if Vstar is not None else float("nan")
    return wrong, loss


class _Problem:
    """One training image: distances, ground truth and objective evaluation."""

    def __init__(self, image, labels, W_star, config, graph=None):
        image = np.asarray(image, dtype=float)
        H, W = image.shape[:2]
        self.graph = graph or build_grid(H, W, config.radius)
        self.image = image
        self.labels = np.asarray(labels, dtype=float)
        self.dist = distance_field(image, labels, config.rho)
        W_star = np.asarray(W_star, dtype=float).reshape(self.graph.n_pixels, -1)
        if W_star.shape != self.dist.D.shape:
            raise ValueError("ground truth does not match image size / label count")
        self.Vstar = mf.project_tangent(W_star)
        self.truth = np.argmax(W_star, axis=1)
        self.cfg = config
        self.tau = config.tau / self.graph.n_pixels

    def operator(self, omega):
        return FlowOperator(self.graph, omega, self.dist)

    def objective(self, omega):
        V_T = solve_linearized(self.operator(omega), self.cfg.T, self.cfg.m)
        return loss_distance(V_T, self.Vstar) + regularizer(omega, self.tau), V_T

    def gradient(self, omega):
        cfg = self.cfg
        if cfg.grad_mode == "fd-oracle":
            G = fd_gradient_oracle(self.image, self.labels, omega, self.Vstar, cfg.T, self.tau,
                                   cfg.rho, distances=self.dist, solver="dense")
            return riemannian_gradient(G, omega), float("nan"), float("nan")
        res = full_gradient(self.operator(omega), self.Vstar, cfg.T, cfg.m, self.tau,
                            cfg.rank, cfg.second_summand)
        return res.riemannian, res.sigma1, res.sigma_ratio


def train(image, labels, W_star, config=None, omega=None, checkpoint_dir=None, start_iter=0):
    """Gradient descent from uniform weights (or ``omega``); returns (WeightField, TrainTrace).

    A step that increases the objective is retried with half the step size;
    the halved size is kept for later iterations.
    """
    cfg = config or TrainConfig()
    prob = _Problem(image, labels, W_star, cfg, omega.graph if omega is not None else None)
    omega = omega.copy() if omega is not None else uniform_weights(prob.graph)
    trace = TrainTrace()
    h = cfg.step_size * prob.graph.n_pixels
    t0 = time.perf_counter()
    loss, V_T = prob.objective(omega)
    trace.initial_loss = loss
    trace.initial_wrong_pct = evaluate(V_T, prob.truth)[0]
    for it in range(start_iter + 1, start_iter + cfg.max_iters + 1):
        grad, s1, ratio = prob.gradient(omega)
        gnorm = float(np.sqrt(np.sum(grad * grad / omega.patches)))
        if not np.isfinite(gnorm):
            raise TrainingAborted("non-finite gradient at iteration %d" % it, trace)
        if gnorm < cfg.grad_tol:
            log.info("gradient norm %.3g below tolerance; stopping", gnorm)
            break
        for _ in range(cfg.max_halvings + 1):
            cand = descend_step(omega, grad, h)
            new_loss, new_V = prob.objective(cand)
            if not np.isfinite(new_loss):
                raise TrainingAborted("non-finite loss at iteration %d" % it, trace)
            if new_loss <= loss:
                break
            h *= 0.5
        else:
            log.info("no decrease after %d halvings; stopping", cfg.max_halvings)
            break
        omega, loss, V_T = cand, new_loss, new_V
        msg = validate_weights(omega)
        if msg:
            raise TrainingAborted("invalid weights after iteration %d: %s" % (it, msg), trace)
        trace.append(iteration=it, loss=float(loss), wrong_pct=evaluate(V_T, prob.truth)[0],
                     grad_norm=gnorm, sigma1=float(s1), sigma_ratio=float(ratio),
                     seconds=time.perf_counter() - t0)
        if checkpoint_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_omega(os.path.join(checkpoint_dir, "ckpt_%04d.omega" % it), omega)
    return omega, trace


def mean_trace(traces):
    """Element-wise mean of several traces over their common length."""
    n = min(len(t) for t in traces)
    out = TrainTrace()
    for k in TRACE_FIELDS:
        vals = np.array([getattr(t, k)[:n] for t in traces], dtype=float)
        col = vals.mean(axis=0).tolist()
        setattr(out, k, [int(v) for v in col] if k == "iteration" else col)
    out.initial_loss = float(np.mean([t.initial_loss for t in traces]))
    out.initial_wrong_pct = float(np.mean([t.initial_wrong_pct for t in traces]))
    return out


def train_set(images, config=None, checkpoint_dir=None):
    """Train one weight field per LabeledImage; returns (list of WeightField, mean trace, traces)."""
    cfg = config or TrainConfig()
    omegas, traces = [], []
    for k, li in enumerate(images):
        ck = os.path.join(checkpoint_dir, "img%02d" % k) if checkpoint_dir else None
        om, tr = train(li.noisy, li.labels, li.W_star, cfg, checkpoint_dir=ck)
        omegas.append(om)
        traces.append(tr)
    return omegas, mean_trace(traces), traces


def config_dict(cfg):
    return asdict(cfg)
