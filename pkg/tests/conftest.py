"""Shared test helpers: finite-difference oracles and dataset paths."""

import os
from pathlib import Path

import numpy as np
import pytest

from fedcomp import engine as eg

FD_STEP = 1e-5


def central_fd(f, x, h=FD_STEP):
    """Central finite differences of a scalar function at a flat array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out.ravel()[i] = (fp - fm) / (2.0 * h)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def fd_gradient_of_graph(root, bindings, wrt_leaf, h=FD_STEP):
    """FD oracle for d(root)/d(wrt_leaf) of an engine graph."""
    base = np.array(bindings[wrt_leaf], dtype=np.float64)

    def f(x):
        b = dict(bindings)
        b[wrt_leaf] = x
        return float(eg.evaluate(root, b))

    return central_fd(f, base, h)


def mnist_dir():
    return Path(os.environ.get("FEDCOMP_DATA", "/root/data/mnist"))


def mnist_available():
    root = mnist_dir()
    names = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    return all((root / n).exists() for n in names)


requires_mnist = pytest.mark.skipif(
    not mnist_available(),
    reason="MNIST IDX files not found (set FEDCOMP_DATA or place them in /root/data/mnist)",
)
