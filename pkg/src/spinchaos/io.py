"""Binary and CSV dumps for matrices, kernels and path ensembles.

Binary layout: little-endian uint64 dimensions (two for matrices, three for
ensembles) followed by the row-major float64 payload.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_array(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(np.asarray(values.shape, dtype="<u8").tobytes())
        fh.write(values.tobytes())


def read_array(path, ndim: int = 2) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = np.frombuffer(raw[: 8 * ndim], dtype="<u8").astype(int)
    data = np.frombuffer(raw[8 * ndim :], dtype="<f8")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: header {tuple(dims)} does not match payload of {data.size} values")
    return data.reshape(dims).copy()


def write_matrix(path, values: np.ndarray) -> None:
    if np.ndim(values) != 2:
        raise ValueError("matrix dump expects a 2-D array")
    write_array(path, values)


def read_matrix(path) -> np.ndarray:
    return read_array(path, 2)


def write_kernel_csv(path, values: np.ndarray, times: np.ndarray, lower_only: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "t_i", "t_j", "value"])
        for i in range(values.shape[0]):
            for j in range(i + 1 if lower_only else values.shape[1]):
                w.writerow([i, j, repr(float(times[i])), repr(float(times[j])), repr(float(values[i, j]))])


def read_kernel_csv(path, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["i"]), int(row["j"])] = float(row["value"])
    return out


def write_ensemble_csv(path, values: np.ndarray) -> None:
    """Rows (replica, particle, time_index, value) of a (replica, particle, time) array."""
    r, p, m = values.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "particle", "time_index", "value"])
        for a in range(r):
            for b in range(p):
                for c in range(m):
                    w.writerow([a, b, c, repr(float(values[a, b, c]))])


def read_ensemble_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((int(row["replica"]), int(row["particle"]), int(row["time_index"]), float(row["value"])))
    dims = [1 + max(r[k] for r in rows) for k in range(3)]
    out = np.zeros(dims)
    for a, b, c, v in rows:
        out[a, b, c] = v
    return out
