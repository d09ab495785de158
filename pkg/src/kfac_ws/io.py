"""Versioned plain-text checkpoints: weights, Kronecker factors and prior precisions."""

import numpy as np

from . import kfac

HEADER = "kfac-ws-checkpoint v1"


def _matrix_lines(name, M):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [f"{name} {M.shape[0]} {M.shape[1]}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in M)
    return lines


def _read_matrix(it):
    name, r, c = next(it).split()
    rows = [[float(x) for x in next(it).split()] for _ in range(int(r))]
    return name, np.array(rows, dtype=np.float64).reshape(int(r), int(c))


def checkpoint_to_text(weights, factors=None, deltas=None, step=0):
    lines = [HEADER, f"step {int(step)}", f"weights {len(weights)}"]
    for u, W in enumerate(weights):
        lines += _matrix_lines(f"W{u}", W)
    deltas = [] if deltas is None else list(np.asarray(deltas, dtype=np.float64))
    lines.append(f"deltas {len(deltas)}")
    if deltas:
        lines.append(" ".join(repr(float(d)) for d in deltas))
    body = "\n".join(lines) + "\n"
    if factors:
        body += kfac.factors_to_text(factors)
    return body


def checkpoint_from_text(text):
    """Inverse of :func:`checkpoint_to_text`; returns ``(weights, factors, deltas, step)``."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ValueError(f"expected header {HEADER!r}")
    it = iter(lines[1:])
    step = int(next(it).split()[1])
    n = int(next(it).split()[1])
    weights = [_read_matrix(it)[1] for _ in range(n)]
    n_d = int(next(it).split()[1])
    deltas = np.array([float(x) for x in next(it).split()]) if n_d else np.zeros(0)
    rest = list(it)
    factors = kfac.factors_from_text("\n".join(rest)) if rest else []
    return weights, factors, deltas, step


def save_checkpoint(path, weights, factors=None, deltas=None, step=0):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(checkpoint_to_text(weights, factors, deltas, step))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return checkpoint_from_text(fh.read())
