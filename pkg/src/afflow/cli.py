"""Command line interface: ``afflow <command> ...``.

Exit codes: 0 success, 2 bad configuration or input, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
import time

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import data
from .flow import FlowOperator, distance_field, lift_to_labeling, solve_linearized
from .gradient import gradient_agreement
from .graph import build_grid, load_omega, save_omega, uniform_weights, validate_weights
from .krylov import BreakdownError
from .predictor import PredictorConfig, load_predictor, predict_weights, save_predictor, train_predictor
from .training import TrainConfig, TrainingAborted, train

log = logging.getLogger("afflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _pos, "m": _count, "tau": _nonneg, "step_size": _pos, "max_iters": _count,
                "seed": {"type": "integer"}, "rank_mode": {"enum": ["rank-1", "rank-r", "full-m"]},
                "rank_r": _count, "grad_mode": {"enum": ["closed-form", "fd-oracle"]}, "rho": _pos,
                "radius": _count, "grad_tol": _nonneg, "max_halvings": {"type": "integer", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 0}, "second_summand": {"type": "boolean"},
            },
        },
        "predictor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_prototypes": _count, "steps": _count, "step_size": _pos, "seed": {"type": "integer"},
                "kmeans_iters": _count, "kmeans_restarts": _count, "T": _pos, "m": _count, "tau": _nonneg,
                "rho": _pos, "radius": _count, "rank": {"type": ["integer", "null"], "minimum": 1},
                "max_halvings": {"type": "integer", "minimum": 0},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc))
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError("invalid config: %s" % exc.message)
    return cfg


def _read_image(path, data_dir=None):
    """Decode a PPM to floats; returns (image, labels, truth).

    With a dataset directory the manifest supplies the labels and, if it lists
    the file, the value range of the noisy encoding and the ground truth.
    """
    samples, maxval = data.read_ppm(path)
    value_range = (0.0, 1.0)
    labels = truth = None
    if data_dir:
        with open(os.path.join(data_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        labels = np.asarray(manifest["labels"], dtype=float)
        name = os.path.basename(path)
        for e in manifest["images"]:
            if name in (e["noisy"], e["clean"]):
                if name == e["noisy"]:
                    value_range = tuple(e["noisy_range"])
                truth = data.read_pgm(os.path.join(data_dir, e["truth"]))[0]
    return data.decode_float_image(samples, value_range, maxval), labels, truth


def _labels_for(args, labels):
    if labels is not None:
        return labels
    return data.Scenario(kind=args.scenario).labels


def _write_labeling(path, labeling, shape, truth=None):
    labeling = np.asarray(labeling).reshape(shape)
    data.write_pgm(path, labeling, maxval=255)
    if truth is not None:
        print("wrong pixels: %.3f%%" % (100.0 * np.mean(labeling != truth)))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    sc = data.Scenario(kind=args.scenario, size=tuple(args.size), n_cells=args.cells,
                       noise=args.noise, seed=args.seed)
    manifest = data.write_dataset(args.out, sc, args.count)
    print("wrote %d images to %s" % (len(manifest["images"]), args.out))
    return EXIT_OK


def cmd_train(args):
    cfg = TrainConfig(**load_config(args.config).get("train", {}))
    _, images = data.load_dataset(args.data)
    if not 0 <= args.index < len(images):
        raise ConfigError("image index %d out of range (dataset has %d)" % (args.index, len(images)))
    li = images[args.index]
    omega = load_omega(args.resume) if args.resume else None
    omega, trace = train(li.noisy, li.labels, li.W_star, cfg, omega=omega,
                         checkpoint_dir=args.checkpoint_dir, start_iter=args.start_iter)
    save_omega(args.out, omega)
    if args.trace:
        trace.write_csv(args.trace)
    print("initial wrong %.3f%% -> final wrong %.3f%% after %d iterations"
          % (trace.initial_wrong_pct, trace.final_wrong_pct, len(trace)))
    return EXIT_OK


def _label_with(image, labels, omega, T, m):
    dist = distance_field(image, labels)
    return lift_to_labeling(solve_linearized(FlowOperator(omega.graph, omega, dist), T, m))


def cmd_label(args):
    image, labels, truth = _read_image(args.image, args.data)
    labels = _labels_for(args, labels)
    H, W = image.shape[:2]
    if args.uniform:
        omega = uniform_weights(build_grid(H, W, args.radius))
    else:
        omega = load_omega(args.weights)
        if (omega.graph.height, omega.graph.width) != (H, W):
            raise ConfigError("weights are for a %dx%d image, got %dx%d"
                              % (omega.graph.height, omega.graph.width, H, W))
        msg = validate_weights(omega)
        if msg:
            raise ConfigError("invalid weights: " + msg)
    _write_labeling(args.out, _label_with(image, labels, omega, args.T, args.m), (H, W), truth)
    return EXIT_OK


def cmd_grad_check(args):
    li = data.grad_check_instance(args.size, args.labels, args.seed)
    omega = uniform_weights(build_grid(args.size, args.size))
    t0 = time.perf_counter()
    cos = gradient_agreement(li.noisy, li.labels, li.V_star, omega, args.T, args.m, args.tau, mode=args.mode)
    frac = float(np.mean(cos >= 0.9))
    print("pixels with cosine >= 0.9: %.4f (%d/%d), min cosine %.4f, %.1fs"
          % (frac, int(np.sum(cos >= 0.9)), cos.size, cos.min(), time.perf_counter() - t0))
    return EXIT_OK


def cmd_predict_train(args):
    cfg = PredictorConfig(**load_config(args.config).get("predictor", {}))
    _, train_images = data.load_dataset(args.data)
    val_images = data.load_dataset(args.val_data)[1] if args.val_data else None
    params, trace = train_predictor(train_images, val_images, cfg)
    save_predictor(args.out, params)
    if args.trace:
        trace.write_csv(args.trace)
    if val_images:
        print("validation wrong %.3f%% after %d steps" % (trace.val_wrong_pct[-1], len(trace.step)))
    return EXIT_OK


def cmd_predict(args):
    image, labels, truth = _read_image(args.image, args.data)
    labels = _labels_for(args, labels)
    params = load_predictor(args.model)
    omega = predict_weights(image, params)
    if args.weights_out:
        save_omega(args.weights_out, omega)
    _write_labeling(args.out, _label_with(image, labels, omega, args.T, args.m), image.shape[:2], truth)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="afflow", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="BLAS threads (env AFFLOW_THREADS)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--scenario", choices=["lines", "colors"], required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=5)
    g.add_argument("--size", type=int, nargs=2, default=[128, 128], metavar=("H", "W"))
    g.add_argument("--cells", type=int, default=30)
    g.add_argument("--noise", type=float, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="learn a weight field for one dataset image")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--index", type=int, default=0)
    t.add_argument("--trace", default=None)
    t.add_argument("--checkpoint-dir", default=None)
    t.add_argument("--resume", default=None, help="start from a saved .omega")
    t.add_argument("--start-iter", type=int, default=0)
    t.set_defaults(func=cmd_train)

    def flow_opts(p):
        p.add_argument("--data", default=None, help="dataset dir (labels and value range)")
        p.add_argument("--scenario", choices=["lines", "colors"], default="colors")
        p.add_argument("--T", type=float, default=5.0)
        p.add_argument("--m", type=int, default=10)

    lb = sub.add_parser("label", help="label an image with given or uniform weights")
    lb.add_argument("--image", required=True)
    w = lb.add_mutually_exclusive_group(required=True)
    w.add_argument("--weights")
    w.add_argument("--uniform", action="store_true")
    lb.add_argument("--radius", type=int, default=1)
    lb.add_argument("--out", required=True)
    flow_opts(lb)
    lb.set_defaults(func=cmd_label)

    gc = sub.add_parser("grad-check", help="closed-form vs finite-difference gradient")
    gc.add_argument("--size", type=int, default=8)
    gc.add_argument("--labels", type=int, default=3)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--mode", choices=["fd", "dense"], default="fd")
    gc.add_argument("--T", type=float, default=5.0)
    gc.add_argument("--m", type=int, default=10)
    gc.add_argument("--tau", type=float, default=0.1)
    gc.set_defaults(func=cmd_grad_check)

    pt = sub.add_parser("predict-train", help="train the weight-patch predictor")
    pt.add_argument("--data", required=True)
    pt.add_argument("--val-data", default=None)
    pt.add_argument("--config", default=None)
    pt.add_argument("--out", required=True)
    pt.add_argument("--trace", default=None)
    pt.set_defaults(func=cmd_predict_train)

    pr = sub.add_parser("predict", help="label an image with predicted weights")
    pr.add_argument("--image", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--weights-out", default=None)
    flow_opts(pr)
    pr.set_defaults(func=cmd_predict)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads or (int(os.environ["AFFLOW_THREADS"]) if os.environ.get("AFFLOW_THREADS") else None)
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (TrainingAborted, BreakdownError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        if isinstance(exc, TrainingAborted) and getattr(args, "trace", None):
            exc.trace.write_csv(args.trace)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
