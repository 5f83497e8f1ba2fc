"""Loss-landscape instruments: 2D error planes and straight-path barriers.

A plane is spanned by three anchor weight vectors: origin at the first,
u along (second - first), v the Gram-Schmidt complement of (third - first).
Grids record test error (1 - accuracy) at each (x, y); barriers measure the
worst error along the straight segment between two weight vectors, in
excess of the higher endpoint.
"""

import io
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .model import ConvLayer, DenseLayer, LstmLayer, Model, RecurrentLayer, ResidualBlock
from .network import accuracy

__all__ = [
    "PlaneGrid",
    "flatten_model",
    "unflatten_model",
    "make_plane",
    "grid_eval",
    "grid_to_csv",
    "segment_barrier",
]

_ANCHOR_NAMES = ("model1", "model2", "model2_aligned")


def _layer_tensors(layer):
    if isinstance(layer, DenseLayer):
        return [layer.weight, layer.bias]
    if isinstance(layer, ConvLayer):
        return [layer.filters, layer.bias]
    if isinstance(layer, RecurrentLayer):
        return [layer.input_weight, layer.hidden_weight, layer.bias]
    if isinstance(layer, LstmLayer):
        out = []
        for g in layer.gates:
            out += [g.input_weight, g.hidden_weight, g.bias]
        return out
    if isinstance(layer, ResidualBlock):
        out = []
        for inner in layer.inner:
            out += [inner.weight, inner.bias]
        return out
    raise ValueError(f"unknown layer type {type(layer).__name__}")


def flatten_model(model: Model) -> np.ndarray:
    """Concatenate all tensors (layer order, C-order ravel) into one vector."""
    parts = []
    for layer in model.layers:
        parts += [np.asarray(t, dtype=np.float64).ravel() for t in _layer_tensors(layer)]
    return np.concatenate(parts)


def unflatten_model(template: Model, vec) -> Model:
    """Reshape a flat vector back into the template's structure."""
    vec = np.asarray(vec, dtype=np.float64)
    out = template.copy()
    pos = 0
    for layer in out.layers:
        for t in _layer_tensors(layer):
            n = t.size
            if pos + n > vec.size:
                raise ValueError("vector too short for template")
            t[...] = vec[pos:pos + n].reshape(t.shape)
            pos += n
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, template needs {pos}")
    return out


@dataclass
class PlaneGrid:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    grid: np.ndarray  # (rows, cols) error values; grid[r, c] at (xs[c], ys[r])
    anchor_coords: List[Tuple[float, float]]
    xs: np.ndarray
    ys: np.ndarray


def make_plane(theta1, theta2, theta2_aligned):
    """Orthonormal 2D frame through three weight vectors.

    Returns (origin, u, v, anchor_coords) with origin = theta1 and anchor
    coordinates exact in that frame. Raises on affinely dependent anchors.
    """
    t1 = np.asarray(theta1, dtype=np.float64)
    t2 = np.asarray(theta2, dtype=np.float64)
    t3 = np.asarray(theta2_aligned, dtype=np.float64)
    if t1.shape != t2.shape or t1.shape != t3.shape or t1.ndim != 1:
        raise ValueError("anchors must be flat vectors of equal length")
    d1 = t2 - t1
    n1 = float(np.linalg.norm(d1))
    if n1 <= 1e-12:
        raise ValueError("degenerate plane: first two anchors coincide")
    u = d1 / n1
    d2 = t3 - t1
    x3 = float(d2 @ u)
    resid = d2 - x3 * u
    n2 = float(np.linalg.norm(resid))
    if n2 <= 1e-12:
        raise ValueError("degenerate plane: anchors are collinear")
    v = resid / n2
    coords = [(0.0, 0.0), (n1, 0.0), (x3, n2)]
    return t1, u, v, coords


def _default_bounds(coords, margin=0.4):
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    dx = max(xs) - min(xs)
    dy = max(ys) - min(ys)
    return (
        min(xs) - margin * dx,
        max(xs) + margin * dx,
        min(ys) - margin * dy,
        max(ys) + margin * dy,
    )


def grid_eval(plane, template: Model, dataset, rows: int = 25, cols: int = 25,
              bounds=None) -> PlaneGrid:
    """Evaluate test error over a rows x cols grid on the plane.

    plane is the make_plane output. bounds = (xmin, xmax, ymin, ymax);
    the default expands the anchors' bounding box by 40% per side.
    """
    origin, u, v, coords = plane
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 cols")
    if bounds is None:
        bounds = _default_bounds(coords)
    xmin, xmax, ymin, ymax = bounds
    for x, y in coords:
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            raise ValueError("bounds must cover all three anchor coordinates")
    xs = np.linspace(xmin, xmax, cols)
    ys = np.linspace(ymin, ymax, rows)
    grid = np.empty((rows, cols))
    for r, yv in enumerate(ys):
        for c, xv in enumerate(xs):
            model = unflatten_model(template, origin + xv * u + yv * v)
            grid[r, c] = 1.0 - accuracy(model, dataset)
    return PlaneGrid(origin, u, v, grid, list(coords), xs, ys)


def grid_to_csv(plane_grid: PlaneGrid, path: str) -> None:
    """Write `x,y,error` rows with `#anchor,name,x,y` metadata on top."""
    buf = io.StringIO()
    for name, (x, y) in zip(_ANCHOR_NAMES, plane_grid.anchor_coords):
        buf.write(f"#anchor,{name},{float(x)!r},{float(y)!r}\n")
    buf.write("x,y,error\n")
    for r in range(plane_grid.grid.shape[0]):
        for c in range(plane_grid.grid.shape[1]):
            buf.write(
                f"{float(plane_grid.xs[c])!r},{float(plane_grid.ys[r])!r},"
                f"{float(plane_grid.grid[r, c])!r}\n"
            )
    with open(path, "w") as f:
        f.write(buf.getvalue())


def segment_barrier(thetaA, thetaB, template: Model, dataset, steps: int = 21) -> float:
    """Worst error along the straight segment, in excess of the endpoints.

    Evaluates error((1 - t) A + t B) on a uniform t grid including both
    endpoints and returns max_t error(t) - max(error(0), error(1)).
    Always >= 0; 0 when A = B.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    a = np.asarray(thetaA, dtype=np.float64)
    b = np.asarray(thetaB, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("endpoints must be flat vectors of equal length")
    errs = []
    for t in np.linspace(0.0, 1.0, steps):
        model = unflatten_model(template, (1.0 - t) * a + t * b)
        errs.append(1.0 - accuracy(model, dataset))
    return float(max(errs) - max(errs[0], errs[-1]))
