"""Grids, datasets, vectorization convention and sufficient statistics.

Vectorization is space-fastest throughout the package: an I x J trial matrix
Y (rows = locations, columns = times) is flattened column by column, so
vec(Y)[j*I + i] = Y[i, j] and any IJ x IJ joint covariance decomposes into
J x J blocks of I x I spatial matrices.  All other modules inherit this
convention.
"""
import io
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

_MAGIC = int.from_bytes(b"STKRON01", "little")
_VERSION = 1


@dataclass(frozen=True)
class SpaceGrid:
    """Discrete spatial locations, I points in R^d.

    points has shape (I, d).  grid_shape optionally records an image layout
    (rows, cols) with rows*cols = I, used for degree maps on pixel grids.
    """
    points: np.ndarray
    grid_shape: tuple | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("points must be a non-empty (I, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("spatial coordinates must be finite")
        uniq = np.unique(pts, axis=0)
        if uniq.shape[0] != pts.shape[0]:
            raise ValueError("spatial points must be distinct")
        if self.grid_shape is not None:
            r, c = self.grid_shape
            if r * c != pts.shape[0]:
                raise ValueError("grid_shape inconsistent with point count")
            object.__setattr__(self, "grid_shape", (int(r), int(c)))
        object.__setattr__(self, "points", pts)

    @property
    def I(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing non-negative time points, length J."""
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).ravel()
        if t.size < 1:
            raise ValueError("J must be >= 1")
        if not np.all(np.isfinite(t)):
            raise ValueError("times must be finite")
        if np.any(t < 0):
            raise ValueError("times must be non-negative")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def J(self):
        return self.times.size


@dataclass(frozen=True)
class SpatioTemporalDataset:
    """K independent trials of a space-time field on a common grid.

    trials has shape (K, I, J): trials[k, i, j] = y_k(x_i, t_j).
    """
    space: SpaceGrid
    time: TimeGrid
    trials: np.ndarray

    def __post_init__(self):
        tr = np.asarray(self.trials, dtype=np.float64)
        if tr.ndim != 3:
            raise ValueError("trials must have shape (K, I, J)")
        if tr.shape[0] < 1:
            raise ValueError("K must be >= 1")
        if tr.shape[1] != self.space.I or tr.shape[2] != self.time.J:
            raise ValueError(
                "trial shape %s does not match grids (I=%d, J=%d)"
                % (tr.shape[1:], self.space.I, self.time.J))
        if not np.all(np.isfinite(tr)):
            raise ValueError("trial values must be finite")
        object.__setattr__(self, "trials", tr)

    @property
    def K(self):
        return self.trials.shape[0]

    @property
    def I(self):
        return self.space.I

    @property
    def J(self):
        return self.time.J


@dataclass(frozen=True)
class SufficientStats:
    """Trial mean, mean squared norm and centered trials, all vectorized."""
    ybar: np.ndarray      # (IJ,)
    ysq: float            # (1/K) sum_k ||vec Y_k||^2
    centered: np.ndarray  # (K, IJ), rows vec(Y_k) - ybar
    K: int
    I: int
    J: int


def vec_index(i, j, I, J=None):
    """Flat index of location i at time j under space-fastest stacking.

    Zero-based: vec_index(i, j, I) = j*I + i, so the space index varies
    fastest and time blocks are contiguous.
    """
    if not (0 <= i < I):
        raise ValueError("space index out of range")
    if j < 0 or (J is not None and j >= J):
        raise ValueError("time index out of range")
    return j * I + i


def vectorize_trial(Y):
    """vec of one I x J trial matrix, space-fastest (column stacking)."""
    return np.asarray(Y).reshape(-1, order="F")


def sufficient_stats(ds):
    """Compute the statistics shared by both marginalized posteriors.

    Returns ybar (vectorized trial mean), ysq = (1/K) sum_k tr(Y_k^T Y_k),
    and the centered vectors vec(Y_k) - ybar.
    """
    K, I, J = ds.trials.shape
    vecs = ds.trials.transpose(0, 2, 1).reshape(K, I * J)  # row k = vec(Y_k)
    ybar = vecs.mean(axis=0)
    ysq = float(np.mean(np.einsum("ki,ki->k", vecs, vecs)))
    centered = vecs - ybar
    return SufficientStats(ybar=ybar, ysq=ysq, centered=centered,
                           K=K, I=I, J=J)


def _atomic_write(path, payload, mode="wb"):
    """Write to a temp file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise OSError("directory does not exist: %s" % d)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    # 17 significant digits: lossless float64 text round-trip
    return "%.17g" % x


def save_dataset(ds, path, format="csv"):
    """Serialize a dataset; format is 'csv' or 'binary'.

    CSV layout: first line '# I=<I> J=<J> K=<K> d=<d>', comment lines with
    the grids, then K blocks of I rows x J comma-separated values, blocks
    separated by a blank line.  Binary layout: 8 little-endian int64 header
    (magic, version, I, J, K, d, grids-present flag, packed grid shape),
    the grids, then trials in order, each stored column-major.
    """
    K, I, J = ds.trials.shape
    d = ds.space.dim
    if format == "csv":
        buf = io.StringIO()
        buf.write("# I=%d J=%d K=%d d=%d\n" % (I, J, K, d))
        buf.write("# t=%s\n" % ",".join(_fmt(v) for v in ds.time.times))
        buf.write("# x=%s\n" % ";".join(
            ",".join(_fmt(v) for v in p) for p in ds.space.points))
        if ds.space.grid_shape is not None:
            buf.write("# grid=%d,%d\n" % ds.space.grid_shape)
        for k in range(K):
            if k > 0:
                buf.write("\n")
            for i in range(I):
                buf.write(",".join(_fmt(v) for v in ds.trials[k, i]))
                buf.write("\n")
        _atomic_write(path, buf.getvalue(), mode="w")
    elif format == "binary":
        gs = ds.space.grid_shape
        packed = (gs[0] << 32) | gs[1] if gs is not None else 0
        header = np.array([_MAGIC, _VERSION, I, J, K, d, 1, packed],
                          dtype="<i8")
        parts = [header.tobytes(),
                 ds.time.times.astype("<f8").tobytes(),
                 np.ascontiguousarray(ds.space.points, dtype="<f8").tobytes()]
        for k in range(K):
            parts.append(np.asfortranarray(ds.trials[k], dtype="<f8")
                         .tobytes(order="F"))
        _atomic_write(path, b"".join(parts), mode="wb")
    else:
        raise ValueError("unknown format: %r" % (format,))


def load_dataset(path, format=None):
    """Load a dataset written by save_dataset.

    format defaults to 'csv' for .csv paths and 'binary' otherwise.
    """
    if format is None:
        format = "csv" if str(path).endswith(".csv") else "binary"
    if format == "csv":
        return _load_csv(path)
    if format == "binary":
        return _load_binary(path)
    raise ValueError("unknown format: %r" % (format,))


def _load_csv(path):
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("row 1: empty file")
    head = lines[0].strip()
    if not head.startswith("#"):
        raise ParseError("row 1: missing '# I=.. J=.. K=.. d=..' header")
    fields = {}
    for tok in head.lstrip("#").split():
        if "=" not in tok:
            raise ParseError("row 1: malformed header token %r" % tok)
        k, v = tok.split("=", 1)
        try:
            fields[k] = int(v)
        except ValueError:
            raise ParseError("row 1: non-integer header value %r" % tok)
    for key in ("I", "J", "K", "d"):
        if key not in fields:
            raise ParseError("row 1: header missing %s" % key)
    I, J, K, d = fields["I"], fields["J"], fields["K"], fields["d"]
    if K < 1:
        raise ParseError("row 1: K must be >= 1")
    times = None
    points = None
    grid_shape = None
    rows = []         # (lineno, values)
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("t="):
                times = np.array([float(v) for v in body[2:].split(",")])
            elif body.startswith("x="):
                points = np.array([[float(v) for v in p.split(",")]
                                   for p in body[2:].split(";")])
            elif body.startswith("grid="):
                r, c = body[5:].split(",")
                grid_shape = (int(r), int(c))
            continue
        vals = line.split(",")
        if len(vals) != J:
            raise ParseError("row %d: expected %d values, got %d"
                             % (lineno, J, len(vals)))
        try:
            rows.append([float(v) for v in vals])
        except ValueError:
            raise ParseError("row %d: non-numeric value" % lineno)
    if len(rows) != K * I:
        raise ParseError("expected %d data rows (K*I), found %d"
                         % (K * I, len(rows)))
    trials = np.array(rows, dtype=np.float64).reshape(K, I, J)
    if times is None:
        times = np.arange(J, dtype=np.float64)
    if points is None:
        points = np.arange(I, dtype=np.float64)[:, None] * np.ones((1, d))
    return SpatioTemporalDataset(
        space=SpaceGrid(points=points, grid_shape=grid_shape),
        time=TimeGrid(times=times), trials=trials)


def _load_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 64:
        raise ParseError("row 1: truncated header")
    header = np.frombuffer(blob[:64], dtype="<i8")
    if header[0] != _MAGIC:
        raise ParseError("row 1: bad magic number")
    if header[1] != _VERSION:
        raise ParseError("row 1: unsupported version %d" % header[1])
    I, J, K, d = (int(v) for v in header[2:6])
    if K < 1:
        raise ParseError("row 1: K must be >= 1")
    grids_present, packed = int(header[6]), int(header[7])
    grid_shape = ((packed >> 32, packed & 0xFFFFFFFF)
                  if packed else None)
    off = 64
    if grids_present:
        if len(blob) < off + 8 * (J + I * d):
            raise ParseError("grid section truncated")
        times = np.frombuffer(blob, dtype="<f8", count=J, offset=off).copy()
        off += 8 * J
        points = np.frombuffer(blob, dtype="<f8", count=I * d,
                               offset=off).copy().reshape(I, d)
        off += 8 * I * d
    else:
        times = np.arange(J, dtype=np.float64)
        points = np.arange(I, dtype=np.float64)[:, None] * np.ones((1, d))
    need = K * I * J
    if len(blob) < off + 8 * need:
        raise ParseError("payload truncated: expected %d values" % need)
    data = np.frombuffer(blob, dtype="<f8", count=need, offset=off)
    trials = np.empty((K, I, J))
    for k in range(K):
        trials[k] = data[k * I * J:(k + 1) * I * J].reshape(I, J, order="F")
    return SpatioTemporalDataset(
        space=SpaceGrid(points=points, grid_shape=grid_shape),
        time=TimeGrid(times=times), trials=trials)
