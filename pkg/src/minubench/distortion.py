"""Thin-plate-spline distortion fields and their PCA statistical model.

A field is a regular grid of 2-D displacement vectors. New fields are drawn
from a trained model as ``mean + sum_i c_i * sqrt(lambda_i) * e_i`` with
``c_i ~ Normal(0, sigma_d)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import MinutiaeTemplate, canonical_angles, template_from_arrays
from .perturb import clamp_in_bounds


class TpsFitError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2, written in terms of r^2, with U(0) = 0."""
    out = np.zeros_like(r2, dtype=float)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


@dataclass(frozen=True)
class TpsTransform:
    """f(p) = affine @ (1, x, y) + sum_j weights[j] * U(|p - c_j|).

    ``affine`` is 2x3 and ``weights`` is (n, 2).
    """

    control_points: np.ndarray
    weights: np.ndarray
    affine: np.ndarray
    regularization: float = 0.0

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return tps_eval(self, pts)

    @property
    def side_condition_residual(self) -> float:
        c = self.control_points
        P = np.column_stack([np.ones(len(c)), c])
        return float(np.max(np.abs(P.T @ self.weights)))


def tps_fit(source: np.ndarray, target: np.ndarray, regularization: float = 0.0) -> TpsTransform:
    """Solve for the spline mapping `source` points onto `target` points.

    With ``regularization == 0`` the result interpolates exactly; larger
    values trade fidelity for smoothness.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise TpsFitError(f"source {src.shape} and target {dst.shape} must both be (n, 2)")
    n = len(src)
    if n < 3:
        raise TpsFitError(f"need at least 3 control points, got {n}")
    if regularization < 0:
        raise TpsFitError("regularization must be non-negative")
    P = np.column_stack([np.ones(n), src])
    if np.linalg.matrix_rank(P) < 3:
        raise TpsFitError("control points are collinear")
    if len(np.unique(src, axis=0)) < n:
        raise TpsFitError("duplicate control points")

    K = tps_kernel(_sqdist(src, src))
    if regularization:
        K = K + regularization * np.eye(n)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError as exc:
        raise TpsFitError(f"singular TPS system: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise TpsFitError("TPS solution is not finite")
    return TpsTransform(src.copy(), sol[:n], sol[n:].T.copy(), float(regularization))


def tps_eval(tps: TpsTransform, pts: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(pts, dtype=float))
    U = tps_kernel(_sqdist(p, tps.control_points))
    out = tps.affine[:, 0] + p @ tps.affine[:, 1:].T + U @ tps.weights
    return out if np.ndim(pts) == 2 else out[0]


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float] = (0.0, 0.0)
    spacing: float = 16.0
    cols: int = 27
    rows: int = 36

    @classmethod
    def covering(cls, width: int, height: int, spacing: float = 16.0) -> "GridSpec":
        return cls((0.0, 0.0), spacing, int(math.ceil(width / spacing)) + 1, int(math.ceil(height / spacing)) + 1)

    @property
    def nodes(self) -> np.ndarray:
        """(rows*cols, 2) node coordinates, row-major."""
        gy, gx = np.mgrid[0 : self.rows, 0 : self.cols]
        return np.column_stack([
            self.origin[0] + gx.ravel() * self.spacing,
            self.origin[1] + gy.ravel() * self.spacing,
        ])

    @property
    def dim(self) -> int:
        return self.rows * self.cols * 2


@dataclass(frozen=True)
class DistortionField:
    grid: GridSpec
    displacements: np.ndarray  # (rows, cols, 2)

    def __post_init__(self) -> None:
        d = np.asarray(self.displacements, dtype=float)
        if d.shape != (self.grid.rows, self.grid.cols, 2):
            raise ValueError(f"displacements {d.shape} do not match grid {self.grid.rows}x{self.grid.cols}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacements must be finite")
        object.__setattr__(self, "displacements", d)

    def flatten(self) -> np.ndarray:
        return self.displacements.reshape(-1)

    @classmethod
    def from_vector(cls, grid: GridSpec, vec: np.ndarray) -> "DistortionField":
        return cls(grid, np.asarray(vec, dtype=float).reshape(grid.rows, grid.cols, 2))

    def at(self, pts: np.ndarray) -> np.ndarray:
        """Bilinear lookup; outside the grid the border values are extended."""
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        g = self.grid
        u = np.clip((p[:, 0] - g.origin[0]) / g.spacing, 0.0, g.cols - 1)
        v = np.clip((p[:, 1] - g.origin[1]) / g.spacing, 0.0, g.rows - 1)
        i0 = np.minimum(np.floor(u).astype(int), g.cols - 2) if g.cols > 1 else np.zeros(len(u), int)
        j0 = np.minimum(np.floor(v).astype(int), g.rows - 2) if g.rows > 1 else np.zeros(len(v), int)
        fu = (u - i0)[:, None]
        fv = (v - j0)[:, None]
        i1 = np.minimum(i0 + 1, g.cols - 1)
        j1 = np.minimum(j0 + 1, g.rows - 1)
        d = self.displacements
        return (
            d[j0, i0] * (1 - fu) * (1 - fv)
            + d[j0, i1] * fu * (1 - fv)
            + d[j1, i0] * (1 - fu) * fv
            + d[j1, i1] * fu * fv
        )

    def mean_magnitude(self) -> float:
        return float(np.mean(np.linalg.norm(self.displacements, axis=2)))


def field_from_tps(tps: TpsTransform, grid: GridSpec) -> DistortionField:
    nodes = grid.nodes
    disp = tps_eval(tps, nodes) - nodes
    return DistortionField(grid, disp.reshape(grid.rows, grid.cols, 2))


def contact_weight(r: np.ndarray, inner: float, outer: float) -> np.ndarray:
    """1 within `inner` of the contact centre, smoothstep down to 0 at `outer`."""
    w = np.clip((outer - r) / (outer - inner), 0.0, 1.0)
    return w * w * (3.0 - 2.0 * w)


@dataclass(frozen=True)
class PressParams:
    """Ranges of the synthetic press-with-torque generator.

    Torque, shear and compression magnitudes are drawn uniformly between
    `min_strength` and 1 times their maxima, with a random sign for torque
    and shear.
    """

    width: int = 416
    height: int = 560
    max_torque_deg: float = 8.0
    max_shear_frac: float = 0.15
    max_compression: float = 0.10
    min_strength: float = 0.7
    contact_radius: float = 0.0
    taper_radius: float = 220.0
    lattice_cols: int = 5
    lattice_rows: int = 6
    spacing: float = 16.0


def press_lattice(p: PressParams) -> np.ndarray:
    gy, gx = np.mgrid[0 : p.lattice_rows, 0 : p.lattice_cols]
    return np.column_stack([
        gx.ravel() * p.width / (p.lattice_cols - 1),
        gy.ravel() * p.height / (p.lattice_rows - 1),
    ]).astype(float)


def press_displacement(pts: np.ndarray, center: tuple[float, float], torque: float, shear: float,
                       compression: float, p: PressParams) -> np.ndarray:
    """Skin turns by `torque` radians about `center`, slides sideways by
    `shear` px and is squeezed vertically by `compression`.

    The motion is full strength at the print centre and fades smoothly to zero
    at `taper_radius`, so strain is spread over the whole print instead of
    leaving large regions that move rigidly.
    """
    rel = pts - np.asarray(center, float)
    c, s = math.cos(torque), math.sin(torque)
    rot = np.column_stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]]) - rel
    disp = rot + np.column_stack([np.full(len(pts), shear), -compression * rel[:, 1]])
    patch = pts - np.array([p.width / 2, p.height / 2])
    w = contact_weight(np.hypot(patch[:, 0], patch[:, 1]), p.contact_radius, p.taper_radius)
    return disp * w[:, None]


def press_field(center: tuple[float, float], torque: float, shear: float, compression: float,
                p: PressParams | None = None) -> DistortionField:
    """One synthetic distortion: spline through the displaced control lattice."""
    p = p or PressParams()
    lattice = press_lattice(p)
    disp = press_displacement(lattice, center, torque, shear, compression, p)
    tps = tps_fit(lattice, lattice + disp, 0.0)
    return field_from_tps(tps, GridSpec.covering(p.width, p.height, p.spacing))


def synth_training_fields(seed: int, count: int = 320, params: PressParams | None = None) -> list[DistortionField]:
    """Synthetic stand-in for fields estimated from distorted-fingerprint videos.

    Each field models a finger pressed with a torque about a random point in
    the lower third of the print, a lateral shear and a vertical squeeze.
    """
    if count < 2:
        raise ValueError("need at least two training fields")
    p = params or PressParams()
    rng = np.random.default_rng(seed)

    def strength() -> float:
        return rng.uniform(p.min_strength, 1.0)

    def signed() -> float:
        return (1.0 if rng.random() < 0.5 else -1.0) * strength()

    fields = []
    for _ in range(count):
        center = (rng.uniform(0.25 * p.width, 0.75 * p.width), rng.uniform(2 * p.height / 3, p.height))
        torque = math.radians(p.max_torque_deg) * signed()
        shear = p.max_shear_frac * p.width * signed()
        compression = p.max_compression * strength()
        fields.append(press_field(center, torque, shear, compression, p))
    return fields


@dataclass(frozen=True)
class DistortionModel:
    grid: GridSpec
    mean_field: np.ndarray     # (dim,)
    eigenvalues: np.ndarray    # (t,), descending
    eigenfields: np.ndarray    # (t, dim), orthonormal rows

    @property
    def t(self) -> int:
        return len(self.eigenvalues)

    @property
    def degenerate(self) -> bool:
        """True when the training fields carried no variance."""
        return not np.any(self.eigenvalues > 0)

    def field_from_coefficients(self, c: np.ndarray) -> DistortionField:
        c = np.asarray(c, dtype=float)
        vec = self.mean_field + (c * np.sqrt(self.eigenvalues)) @ self.eigenfields
        return DistortionField.from_vector(self.grid, vec)

    def reconstruct(self, f: DistortionField) -> DistortionField:
        """Project a field onto the retained eigenfields."""
        centered = f.flatten() - self.mean_field
        coef = self.eigenfields @ centered
        return DistortionField.from_vector(self.grid, self.mean_field + coef @ self.eigenfields)


def train_distortion_model(fields: list[DistortionField], t: int = 2) -> DistortionModel:
    """PCA over flattened fields with the 1/(M-1) sample covariance."""
    if not fields:
        raise ValueError("no training fields")
    grid = fields[0].grid
    if any(f.grid != grid for f in fields):
        raise ValueError("training fields have different grids")
    M = len(fields)
    if M < t + 1:
        raise ValueError(f"need at least t+1={t + 1} fields, got {M}")
    X = np.stack([f.flatten() for f in fields])
    # shifting by the first row first keeps identical inputs exact
    mean = X[0] + (X - X[0]).mean(axis=0)
    Xc = X - mean
    # right singular vectors of the centred data are the covariance eigenvectors
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    eig = s**2 / (M - 1)
    vt = vt[:t]
    # sign convention: largest-magnitude entry positive
    for i in range(len(vt)):
        if vt[i, np.argmax(np.abs(vt[i]))] < 0:
            vt[i] = -vt[i]
    eig = eig[:t]
    if len(eig) < t:
        eig = np.concatenate([eig, np.zeros(t - len(eig))])
    return DistortionModel(grid, mean, eig.copy(), vt.copy())


def sample_field(model: DistortionModel, sigma_d: float, rng: np.random.Generator) -> tuple[DistortionField, np.ndarray]:
    """Draw c_i ~ Normal(0, sigma_d) and synthesize the corresponding field."""
    c = rng.normal(0.0, sigma_d, size=model.t) if sigma_d > 0 else np.zeros(model.t)
    return model.field_from_coefficients(c), c


LOOKAHEAD_PX = 10.0


def apply_field(t: MinutiaeTemplate, fld: DistortionField) -> MinutiaeTemplate:
    """Warp minutiae positions by the field; each direction follows the warped
    segment to a point 10 px ahead along the original direction."""
    if len(t) == 0:
        return t
    arr = t.array
    p = arr[:, :2]
    q = p + LOOKAHEAD_PX * np.column_stack([np.cos(arr[:, 2]), np.sin(arr[:, 2])])
    dp = fld.at(p)
    p2 = p + dp
    dq = fld.at(q)
    q2 = q + dq
    theta = canonical_angles(np.arctan2(q2[:, 1] - p2[:, 1], q2[:, 0] - p2[:, 0]))
    # equal displacements at both ends are a local translation: keep theta bit-exact
    same = np.all(dq == dp, axis=1)
    theta[same] = arr[same, 2]
    clamp_in_bounds(p2, t.width, t.height)
    return template_from_arrays(t, np.column_stack([p2, theta]), t.kinds, t.qualities)


# --- model file ------------------------------------------------------------

MODEL_MAGIC = b"DMDL"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHdddIII")


def save_model(path: str | Path, model: DistortionModel, provenance: dict | None = None) -> None:
    """Write the binary model plus a ``.json`` provenance sidecar."""
    g = model.grid
    buf = bytearray(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, g.origin[0], g.origin[1], g.spacing,
                                 g.cols, g.rows, model.t))
    buf += np.asarray(model.mean_field, "<f8").tobytes()
    buf += np.asarray(model.eigenvalues, "<f8").tobytes()
    buf += np.asarray(model.eigenfields, "<f8").tobytes()
    path = Path(path)
    path.write_bytes(bytes(buf))
    side = {"format": "DMDL", "version": MODEL_VERSION, "t": model.t, "grid": {
        "origin": list(g.origin), "spacing": g.spacing, "cols": g.cols, "rows": g.rows}}
    side.update(provenance or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> DistortionModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated model header")
    magic, version, ox, oy, spacing, cols, rows, t = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model version {version} is not supported (expected {MODEL_VERSION})")
    grid = GridSpec((ox, oy), spacing, cols, rows)
    dim = grid.dim
    need = _HEADER.size + 8 * (dim + t + t * dim)
    if len(data) != need:
        raise ModelFormatError(f"{path}: expected {need} bytes, found {len(data)}")
    vals = np.frombuffer(data, "<f8", offset=_HEADER.size)
    mean = vals[:dim].copy()
    eig = vals[dim : dim + t].copy()
    vecs = vals[dim + t :].reshape(t, dim).copy()
    return DistortionModel(grid, mean, eig, vecs)
