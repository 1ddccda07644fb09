"""Point-cloud input: a plain ASCII format and the vertex subset of PLY files.

ASCII lines are ``x y z`` or ``x y z sx sy sz qw qx qy qz opacity`` where
``s`` are per-axis standard deviations and ``q`` a unit quaternion; ``#``
starts a comment. PLY files exported by Gaussian-splatting tools store
log-scales, a ``w x y z`` quaternion and a pre-sigmoid opacity; every other
vertex property (``f_dc_*``, ``f_rest_*``, normals...) is kept as payload.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, IoError, ParseError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_GAUSSIAN_FIELDS = ["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]


@dataclass
class PointCloud:
    positions: np.ndarray
    covariances: np.ndarray = None
    opacities: np.ndarray = None
    payload: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.positions)

    def subset(self, mask):
        take = lambda a: None if a is None else a[mask]
        return PointCloud(self.positions[mask], take(self.covariances), take(self.opacities),
                          {k: v[mask] for k, v in self.payload.items()})


def quat_to_matrix(q):
    """Rotation matrices from ``(..., 4)`` quaternions in ``w x y z`` order (normalized first)."""
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariance_from(scales, quats):
    r = quat_to_matrix(quats)
    return r @ (scales[..., :, None] ** 2 * np.swapaxes(r, -1, -2))


def read_ascii(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                vals = [float(t) for t in text.split()]
            except ValueError:
                raise ParseError(f"{path}: non-numeric value", line=lineno) from None
            if len(vals) not in (3, 11):
                raise ParseError(f"{path}: expected 3 or 11 values, got {len(vals)}", line=lineno)
            if width is not None and len(vals) != width:
                raise ParseError(f"{path}: inconsistent column count", line=lineno)
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"{path}: non-finite value", line=lineno)
            width = len(vals)
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    cloud = PointCloud(data[:, :3].copy())
    if width == 11:
        cloud.covariances = covariance_from(data[:, 3:6], data[:, 6:10])
        cloud.opacities = data[:, 10].copy()
    return cloud


def _read_ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise ParseError(f"{path}: missing 'ply' magic", line=1)
    fmt, elements, lineno = None, [], 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"{path}: header not terminated", line=lineno)
        words = raw.decode("ascii", "replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            return fmt, elements
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise ParseError(f"{path}: property before element", line=lineno)
            if words[1] == "list":
                raise ParseError(f"{path}: list properties are not supported", line=lineno)
            if words[1] not in _PLY_TYPES:
                raise ParseError(f"{path}: unknown property type '{words[1]}'", line=lineno)
            elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
        else:
            raise ParseError(f"{path}: unexpected header keyword '{words[0]}'", line=lineno)


def read_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh, path)
        if not elements or elements[0][0] != "vertex":
            raise ParseError(f"{path}: first element must be 'vertex'")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise ParseError(f"{path}: vertex element lacks x/y/z")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                raise ParseError(f"{path}: truncated vertex data")
            rec = np.frombuffer(buf, dtype=dtype, count=count)
            cols = {n: rec[n].astype(np.float64) for n in names}
        elif fmt == "ascii":
            try:
                data = np.loadtxt(fh, dtype=np.float64, max_rows=count, ndmin=2)
            except ValueError as exc:
                raise ParseError(f"{path}: bad vertex data ({exc})") from None
            if data.shape[0] < count or (count and data.shape[1] != len(names)):
                raise ParseError(f"{path}: truncated vertex data")
            cols = {n: data[:, i] for i, n in enumerate(names)} if count else {n: np.zeros(0) for n in names}
        else:
            raise ParseError(f"{path}: unsupported PLY format '{fmt}'")
    cloud = PointCloud(np.stack([cols["x"], cols["y"], cols["z"]], -1))
    if set(_GAUSSIAN_FIELDS) <= set(names):
        scales = np.exp(np.stack([cols[f"scale_{i}"] for i in range(3)], -1))
        quats = np.stack([cols[f"rot_{i}"] for i in range(4)], -1)
        cloud.covariances = covariance_from(scales, quats)
        cloud.opacities = 1.0 / (1.0 + np.exp(-cols["opacity"]))
    used = {"x", "y", "z"} | (set(_GAUSSIAN_FIELDS) if cloud.covariances is not None else set())
    cloud.payload = {n: cols[n] for n in names if n not in used}
    return cloud


def normalize(cloud, center=(0.5, 0.5, 0.5), extent=0.5):
    """Move the bounding-box center to ``center`` and scale its largest side to ``extent``."""
    lo, hi = cloud.positions.min(0), cloud.positions.max(0)
    mid = 0.5 * (lo + hi)
    side = float((hi - lo).max())
    factor = extent / side if side > 0 else 1.0
    cloud.positions = np.asarray(center) + (cloud.positions - mid) * factor
    if cloud.covariances is not None:
        cloud.covariances = cloud.covariances * factor ** 2
    return cloud


def load_points(path, opacity_threshold=0.0, center=(0.5, 0.5, 0.5), extent=0.5):
    """Read a point file (``.ply`` or ASCII) and normalize it into the unit cube."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"point file not found: {path}", missing=True)
    try:
        with open(path, "rb") as fh:
            is_ply = fh.read(3) == b"ply"
        cloud = read_ply(path) if is_ply else read_ascii(path)
    except UnicodeDecodeError:
        raise ParseError(f"{path}: not a text point file") from None
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if cloud.opacities is not None and opacity_threshold > 0:
        cloud = cloud.subset(cloud.opacities >= opacity_threshold)
    if len(cloud) == 0:
        raise EmptyCloud(f"{path}: no points")
    return normalize(cloud, center, extent)


def write_ascii(path, cloud):
    """Write positions (and kernels when present) in the ASCII point format."""
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.positions):
            fh.write(" ".join(repr(float(c)) for c in p))
            if cloud.covariances is not None:
                w, r = np.linalg.eigh(cloud.covariances[i])
                if np.linalg.det(r) < 0:
                    r[:, 0] = -r[:, 0]
                fh.write(" " + " ".join(repr(float(s)) for s in np.sqrt(np.clip(w, 0, None))))
                fh.write(" " + " ".join(repr(float(q)) for q in matrix_to_quat(r)))
                fh.write(f" {float(cloud.opacities[i])!r}")
            fh.write("\n")


def matrix_to_quat(r):
    t = np.trace(r)
    if t > 0:
        s = 2.0 * np.sqrt(1.0 + t)
        return np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = 2.0 * np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k])
    q = np.empty(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (r[j, i] + r[i, j]) / s
    q[1 + k] = (r[k, i] + r[i, k]) / s
    return q
