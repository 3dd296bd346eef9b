"""Shared numeric helpers: angle wrapping, Newton cores, hashing, CSV text."""

from __future__ import annotations

import hashlib
import struct

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, TWO_PI)


def float_bits_hex(x: float) -> str:
    """Big-endian IEEE-754 hex of a float; canonical across languages."""
    return struct.pack(">d", float(x)).hex()


def fingerprint(values: dict) -> str:
    """sha256 over 'key=ieee754hex' pairs, keys sorted.

    Floats are hashed by their exact bit pattern so that any runtime that
    holds the same IEEE-754 doubles produces the same digest.
    """
    parts = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            enc = "true" if v else "false"
        elif isinstance(v, (int, float)):
            enc = float_bits_hex(float(v))
        else:
            enc = str(v)
        parts.append(f"{key}={enc}")
    return hashlib.sha256(";".join(parts).encode("ascii")).hexdigest()


def fmt(x) -> str:
    """Decimal text with 17 significant digits (value-exact round trip)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    """Write rows of numbers as 17-significant-digit decimal CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


class NewtonError(RuntimeError):
    """Newton iteration failed (max iterations or singular system)."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


def newton_core(fun_jac, x0, eps=1e-8, k_max=20):
    """Square Newton-Raphson: iterate x <- x - J^-1 F until max|dx| < eps.

    ``fun_jac(x)`` returns the pair (F, J) from one evaluation. Returns
    (x, iterations, update_norms); raises NewtonError on the iteration cap
    or a singular Jacobian.
    """
    x = np.array(x0, dtype=float, copy=True)
    update_norms = []
    f = None
    for k in range(1, k_max + 1):
        f, j = fun_jac(x)
        f = np.atleast_1d(np.asarray(f, dtype=float))
        j = np.atleast_2d(np.asarray(j, dtype=float))
        try:
            dx = np.linalg.solve(j, f)
        except np.linalg.LinAlgError as exc:
            raise NewtonError(
                f"singular Jacobian at iteration {k}: {exc}",
                residual_norm=float(np.max(np.abs(f))),
                iterations=k,
            ) from exc
        x -= dx
        step = float(np.max(np.abs(dx)))
        update_norms.append(step)
        if step < eps:
            return x, k, update_norms
    raise NewtonError(
        f"no convergence in {k_max} Newton iterations "
        f"(last update {update_norms[-1]:.3e})",
        residual_norm=float(np.max(np.abs(f))),
        iterations=k_max,
    )


def gauss_newton(fun, jac, x0, eps=1e-10, k_max=50, backtrack=6):
    """Least-squares Newton for consistent (possibly overdetermined) systems.

    Used where an exact symmetry (global rotation) leaves the square system
    rank-deficient and one anchor equation makes it overdetermined but
    consistent. Backtracking halves the step while the residual norm grows.
    """
    x = np.array(x0, dtype=float, copy=True)
    f = np.asarray(fun(x), dtype=float)
    fnorm = float(np.linalg.norm(f))
    for k in range(1, k_max + 1):
        j = np.asarray(jac(x), dtype=float)
        dx, *_ = np.linalg.lstsq(j, f, rcond=None)
        scale = 1.0
        for _ in range(backtrack + 1):
            x_try = x - scale * dx
            f_try = np.asarray(fun(x_try), dtype=float)
            fnorm_try = float(np.linalg.norm(f_try))
            if fnorm_try <= fnorm or fnorm < eps:
                break
            scale *= 0.5
        x, f, fnorm = x_try, f_try, fnorm_try
        if float(np.max(np.abs(scale * dx))) < eps and fnorm < np.sqrt(len(f)) * eps * 100:
            return x, k
        if fnorm < eps:
            return x, k
    if fnorm < np.sqrt(len(f)) * eps * 100:
        return x, k_max
    raise NewtonError(
        f"no convergence in {k_max} Gauss-Newton iterations (|F| = {fnorm:.3e})",
        residual_norm=fnorm,
        iterations=k_max,
    )
