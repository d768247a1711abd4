"""Synthetic Voronoi scenarios, noise, ground-truth encoding and Netpbm I/O."""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import ndtri

from . import manifold as mf

LINE_PALETTE = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])  # line, background
COLOR_PALETTE = np.array([
    [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0],
])

# Per-channel noise levels giving a pixelwise nearest-label error of
# 50% on the 8 cube-corner colors and 20% between black and white
# (calibrate_noise; closed forms in cube_corner_noise / two_color_noise).
DEFAULT_NOISE = {"colors": 0.6103, "lines": 1.0290}
W_STAR_EPS = 1e-6


@dataclass
class Scenario:
    kind: str = "colors"
    size: Tuple[int, int] = (128, 128)
    n_cells: int = 30
    noise: Optional[float] = None
    seed: int = 0
    palette: Optional[list] = None
    edge_threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in ("lines", "colors"):
            raise ValueError("scenario kind must be 'lines' or 'colors'")
        self.size = tuple(int(s) for s in self.size)
        if self.noise is None:
            self.noise = DEFAULT_NOISE[self.kind]
        if self.palette is None:
            self.palette = (LINE_PALETTE if self.kind == "lines" else COLOR_PALETTE).tolist()
        pal = np.asarray(self.palette, dtype=float)
        if len({tuple(c) for c in pal.tolist()}) != len(pal):
            raise ValueError("palette colors must be distinct")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        if self.n_cells < 1:
            raise ValueError("need at least one Voronoi cell")

    @property
    def labels(self):
        return np.asarray(self.palette, dtype=float)

    def to_dict(self):
        d = asdict(self)
        d["size"] = list(self.size)
        return d


@dataclass
class LabeledImage:
    clean: np.ndarray  # H x W x 3
    noisy: np.ndarray  # H x W x 3, unclipped
    truth: np.ndarray  # H x W label indices
    labels: np.ndarray  # |J| x 3
    W_star: np.ndarray = field(init=False)
    V_star: np.ndarray = field(init=False)

    def __post_init__(self):
        self.W_star = smooth_one_hot(self.truth.reshape(-1), len(self.labels))
        self.V_star = mf.project_tangent(self.W_star)

    @property
    def shape(self):
        return self.truth.shape


def smooth_one_hot(truth, n_labels, eps=W_STAR_EPS):
    W = np.full((truth.size, n_labels), eps / n_labels)
    W[np.arange(truth.size), truth.reshape(-1)] += 1.0 - eps
    return W


def _seed_distances(size, n_cells, rng):
    H, W = size
    seeds = rng.uniform(0.0, 1.0, size=(n_cells, 2)) * np.array([H, W])
    ys, xs = np.mgrid[0:H, 0:W]
    pts = np.stack([ys.ravel() + 0.5, xs.ravel() + 0.5], axis=1)
    return np.linalg.norm(pts[:, None, :] - seeds[None, :, :], axis=-1)


def nearest_label(image, labels):
    f = np.asarray(image, dtype=float).reshape(-1, np.asarray(labels).shape[1])
    d = np.linalg.norm(f[:, None, :] - np.asarray(labels)[None, :, :], axis=-1)
    return np.argmin(d, axis=1).reshape(np.asarray(image).shape[:-1])


def gen_voronoi_lines(scenario):
    """Black 1-pixel Voronoi edges on white; label 0 = line, 1 = background."""
    if scenario.kind != "lines":
        raise ValueError("expected a lines scenario")
    rng = np.random.default_rng(scenario.seed)
    H, W = scenario.size
    d = _seed_distances(scenario.size, scenario.n_cells, rng)
    if scenario.n_cells >= 2:
        d2 = np.partition(d, 1, axis=1)[:, :2]
        edge = (d2[:, 1] - d2[:, 0]) < scenario.edge_threshold
    else:
        edge = np.zeros(H * W, dtype=bool)
    truth = np.where(edge, 0, 1).reshape(H, W)
    clean = scenario.labels[truth]
    noisy = add_noise(clean, scenario.noise, rng)
    return LabeledImage(clean, noisy, truth, scenario.labels)


def gen_voronoi_colors(scenario):
    """Voronoi cells, each filled with a randomly drawn palette color."""
    if scenario.kind != "colors":
        raise ValueError("expected a colors scenario")
    rng = np.random.default_rng(scenario.seed)
    H, W = scenario.size
    d = _seed_distances(scenario.size, scenario.n_cells, rng)
    cell = np.argmin(d, axis=1)
    colors = rng.integers(0, len(scenario.labels), size=scenario.n_cells)
    truth = colors[cell].reshape(H, W)
    clean = scenario.labels[truth]
    noisy = add_noise(clean, scenario.noise, rng)
    return LabeledImage(clean, noisy, truth, scenario.labels)


def generate(scenario):
    if scenario.kind == "lines":
        return gen_voronoi_lines(scenario)
    return gen_voronoi_colors(scenario)


def add_noise(image, sigma, seed=None):
    """I.i.d. Gaussian noise per channel, not clipped.

    ``seed`` may be an int or an existing numpy Generator.
    """
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    image = np.asarray(image, dtype=float)
    if sigma == 0:
        return image.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return image + sigma * rng.standard_normal(image.shape)


def pixelwise_error(image, truth, labels):
    return 100.0 * float(np.mean(nearest_label(image, labels) != truth))


def calibrate_noise(labels, target_error, lo=0.0, hi=4.0, n_samples=200000, seed=0, tol=1e-4):
    """Bisection on sigma so that pixelwise nearest-label error matches ``target_error``.

    The error is estimated on ``n_samples`` noisy copies of every palette
    color with common random numbers, so the estimate is monotone in sigma.
    """
    labels = np.asarray(labels, dtype=float)
    rng = np.random.default_rng(seed)
    per = max(1, n_samples // len(labels))
    z = rng.standard_normal((len(labels), per, labels.shape[1]))
    truth = np.repeat(np.arange(len(labels)), per)

    def err(sigma):
        noisy = (labels[:, None, :] + sigma * z).reshape(-1, labels.shape[1])
        return np.mean(nearest_label(noisy, labels) != truth)

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if err(mid) < target_error:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cube_corner_noise(target_error):
    """Closed form for the 8-corner palette: (1 - Phi(-1/(2 sigma)))^3 = 1 - target."""
    p = 1.0 - (1.0 - target_error) ** (1.0 / 3.0)
    return -0.5 / ndtri(p)


def two_color_noise(labels, target_error):
    """Closed form for two labels: Phi(-|l0 - l1| / (2 sigma)) = target."""
    labels = np.asarray(labels, dtype=float)
    return -0.5 * np.linalg.norm(labels[0] - labels[1]) / ndtri(target_error)


# ---------------------------------------------------------------------------
# Netpbm I/O


def _read_header(fh, magic):
    tokens = []
    got = fh.read(2)
    if got != magic:
        raise ValueError("bad magic number %r, expected %r" % (got, magic))
    while len(tokens) < 3:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated header")
        if ch == b"#":
            fh.readline()
            continue
        if ch.isspace():
            continue
        tok = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            tok += ch
        tokens.append(int(tok))
    return tokens


def _dtype(maxval):
    if not 0 < maxval < 65536:
        raise ValueError("maxval out of range: %d" % maxval)
    return np.dtype(">u2") if maxval > 255 else np.dtype("u1")


def _write_netpbm(path, magic, arr, maxval):
    arr = np.asarray(arr)
    if arr.min() < 0 or arr.max() > maxval:
        raise ValueError("samples outside [0, %d]" % maxval)
    H, W = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, W, H, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_dtype(maxval)).tobytes())


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        W, H, maxval = _read_header(fh, magic)
        dt = _dtype(maxval)
        count = W * H * channels
        data = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt)
    if data.size != count:
        raise ValueError("truncated pixel data in %s" % path)
    shape = (H, W, channels) if channels > 1 else (H, W)
    return data.reshape(shape).astype(np.int64), maxval


def write_ppm(path, rgb, maxval=65535):
    """Binary P6 from integer samples (H x W x 3)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("PPM needs an H x W x 3 array")
    _write_netpbm(path, b"P6", rgb, maxval)


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


def write_pgm(path, gray, maxval=255):
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError("PGM needs an H x W array")
    _write_netpbm(path, b"P5", gray, maxval)


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def encode_float_image(img, lo=None, hi=None, maxval=65535):
    """Affine map of a float image to [0, maxval]; returns (samples, (lo, hi))."""
    img = np.asarray(img, dtype=float)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    q = np.rint((img - lo) / (hi - lo) * maxval).astype(np.int64)
    return np.clip(q, 0, maxval), (lo, hi)


def decode_float_image(samples, value_range, maxval=65535):
    lo, hi = value_range
    return lo + np.asarray(samples, dtype=float) / maxval * (hi - lo)


# ---------------------------------------------------------------------------
# datasets


def write_dataset(out_dir, scenario, n_images=5):
    """Write clean/noisy PPM + truth PGM triples and a manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for k in range(n_images):
        sc = Scenario(**{**scenario.to_dict(), "seed": scenario.seed + k})
        li = generate(sc)
        stem = "img%02d" % k
        files = {"clean": stem + "_clean.ppm", "noisy": stem + "_noisy.ppm", "truth": stem + "_truth.pgm"}
        q, _ = encode_float_image(li.clean, 0.0, 1.0)
        write_ppm(os.path.join(out_dir, files["clean"]), q)
        q, rng_ = encode_float_image(li.noisy)
        write_ppm(os.path.join(out_dir, files["noisy"]), q)
        write_pgm(os.path.join(out_dir, files["truth"]), li.truth, maxval=max(255, len(li.labels) - 1))
        entries.append({**files, "noisy_range": list(rng_), "seed": sc.seed})
    manifest = {"scenario": scenario.to_dict(), "labels": scenario.labels.tolist(), "images": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    labels = np.asarray(manifest["labels"], dtype=float)
    images = []
    for e in manifest["images"]:
        clean, mv = read_ppm(os.path.join(data_dir, e["clean"]))
        noisy, mv2 = read_ppm(os.path.join(data_dir, e["noisy"]))
        truth, _ = read_pgm(os.path.join(data_dir, e["truth"]))
        images.append(LabeledImage(
            decode_float_image(clean, (0.0, 1.0), mv),
            decode_float_image(noisy, e["noisy_range"], mv2),
            truth, labels,
        ))
    return manifest, images


DISTRACTOR = [0.5, 0.5, 0.5]


def grad_check_instance(size=8, n_labels=3, seed=0, n_cells=3):
    """Small noisy line image; a third, unused gray label is added for n_labels=3."""
    if n_labels not in (2, 3):
        raise ValueError("gradient check supports 2 or 3 labels")
    palette = LINE_PALETTE.tolist() + ([DISTRACTOR] if n_labels == 3 else [])
    li = generate(Scenario(kind="lines", size=(size, size), n_cells=n_cells, seed=seed))
    return LabeledImage(li.clean, li.noisy, li.truth, np.asarray(palette))
