"""Toroidal grid graphs and simplex-constrained weight patches."""

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GridGraph:
    """Grid graph with a (2r+1)x(2r+1) neighborhood at every pixel.

    Neighbor indexing wraps around the image borders so that every pixel has
    exactly the same number of neighbors. ``neighbor_index[i, p]`` is the
    pixel at patch position ``p`` (row-major within the window) around ``i``;
    the center sits at ``p = (|N| - 1) // 2``.
    """

    height: int
    width: int
    radius: int
    neighbor_index: np.ndarray

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def patch_size(self):
        return (2 * self.radius + 1) ** 2

    @property
    def center(self):
        return (self.patch_size - 1) // 2

    def offsets(self):
        r = self.radius
        return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    def gather(self, field):
        """Neighborhood view of a per-pixel field: (|I|, ...) -> (|I|, |N|, ...)."""
        return np.asarray(field)[self.neighbor_index]


def build_grid(height, width, radius=1):
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be positive, got %dx%d" % (height, width))
    if radius < 1:
        raise ValueError("neighborhood radius must be >= 1")
    ys, xs = np.divmod(np.arange(height * width), width)
    cols = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            cols.append(((ys + dy) % height) * width + (xs + dx) % width)
    nbr = np.stack(cols, axis=1)
    nbr.setflags(write=False)
    return GridGraph(int(height), int(width), int(radius), nbr)


class WeightField:
    """Per-pixel weight patches, each a point of the open |N|-simplex."""

    def __init__(self, graph, patches):
        patches = np.asarray(patches, dtype=float)
        if patches.shape != (graph.n_pixels, graph.patch_size):
            raise ValueError(
                "patches must have shape %s, got %s"
                % ((graph.n_pixels, graph.patch_size), patches.shape)
            )
        self.graph = graph
        self.patches = patches

    def copy(self):
        return WeightField(self.graph, self.patches.copy())

    def to_sparse(self):
        """The |I| x |I| matrix Omega; repeated neighbors (tiny grids) are summed."""
        g = self.graph
        rows = np.repeat(np.arange(g.n_pixels), g.patch_size)
        return sp.csr_matrix(
            (self.patches.ravel(), (rows, g.neighbor_index.ravel())),
            shape=(g.n_pixels, g.n_pixels),
        )

    def to_dense(self):
        return self.to_sparse().toarray()

    def __repr__(self):
        g = self.graph
        return "WeightField(%dx%d, radius=%d)" % (g.height, g.width, g.radius)


def uniform_weights(graph):
    n = graph.patch_size
    return WeightField(graph, np.full((graph.n_pixels, n), 1.0 / n))


def validate_weights(omega, tol=1e-9):
    """Return None if every patch is valid, else a message naming the first bad pixel."""
    P = omega.patches
    for i in range(P.shape[0]):
        row = P[i]
        if not np.all(np.isfinite(row)) or np.any(row <= 0):
            return "pixel %d: non-positive or non-finite weight" % i
        if abs(row.sum() - 1.0) > tol:
            return "pixel %d: weights sum to %.12g" % (i, row.sum())
    return None


def save_omega(path, omega):
    g = omega.graph
    header = {"height": g.height, "width": g.width, "radius": g.radius, "dtype": "f64"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(omega.patches, dtype="<f8").tobytes())


def load_omega(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        payload = fh.read()
    if header.get("dtype") != "f64":
        raise ValueError("unsupported dtype %r" % header.get("dtype"))
    g = build_grid(header["height"], header["width"], header["radius"])
    data = np.frombuffer(payload, dtype="<f8")
    if data.size != g.n_pixels * g.patch_size:
        raise ValueError("payload has %d values, expected %d" % (data.size, g.n_pixels * g.patch_size))
    return WeightField(g, data.reshape(g.n_pixels, g.patch_size).astype(float))
