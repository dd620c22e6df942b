"""Independent reference computations used as test oracles.

Nothing here calls the package's steppers; each oracle solves the defining
equations with plain numpy so a shared bug cannot hide in both sides.
"""

import numpy as np


def skew(a):
    """Matrix of ``y -> a × y``."""
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def expm_skew(S, tau):
    """``exp(tau S)`` for skew ``S`` by the Rodrigues formula."""
    S = np.asarray(S, float)
    w = np.array([S[2, 1], S[0, 2], S[1, 0]])
    th = np.linalg.norm(w)
    if th == 0:
        return np.eye(3)
    K = S / th
    return np.eye(3) + np.sin(tau * th) * K + (1.0 - np.cos(tau * th)) * (K @ K)


def tsm1_linear_step(x0, v0, h, b, Q, q, eps=1.0):
    """TSM1 for constant ``B = b`` and ``U = x^T Q x / 2 + q^T x`` as one 6x6 solve.

    Unknowns ``(x1, v1)``:
      x1 - x0 = h (v0 + v1)/2
      v1 - v0 = h ((v0 + v1)/2) × b / eps - h (Q (x0 + x1)/2 + q)
    """
    x0, v0, b, q = (np.asarray(a, float) for a in (x0, v0, b, q))
    Q = np.asarray(Q, float)
    I = np.eye(3)
    # a × b = -[b]x a
    Cb = -skew(b) / eps
    M = np.block([[I, -0.5 * h * I], [0.5 * h * Q, I - 0.5 * h * Cb]])
    rhs = np.concatenate([x0 + 0.5 * h * v0,
                          v0 + 0.5 * h * Cb @ v0 - 0.5 * h * Q @ x0 - h * q])
    z = np.linalg.solve(M, rhs)
    return z[:3], z[3:]


def tsm2_residual(model, x_prev, x, x_next, h):
    """Residual of the midpoint two-step recursion, evaluated with numpy."""
    c = 0.5 * h / model.eps
    mp = 0.5 * (x_next + x)
    mm = 0.5 * (x + x_prev)
    lhs = x_next - 2 * x + x_prev
    rhs = (c * model.vector_potential_jacobian(mp).T @ (x_next - x)
           + c * model.vector_potential_jacobian(mm).T @ (x - x_prev)
           - (h / model.eps) * (model.vector_potential(mp) - model.vector_potential(mm))
           + 0.5 * h * h * (model.force(mp) + model.force(mm)))
    return np.linalg.norm(lhs - rhs)


def varm_residual(model, x_prev, x, x_next, h):
    """Residual of the grid-point variational recursion (symmetric form)."""
    c = 0.5 * h / model.eps
    lhs = x_next - 2 * x + x_prev
    rhs = (c * model.vector_potential_jacobian(x).T @ (x_next - x_prev)
           - c * (model.vector_potential(x_next) - model.vector_potential(x_prev))
           + h * h * model.force(x))
    return np.linalg.norm(lhs - rhs)


def gyration(x0, v0, t, b=1.0):
    """Exact solution of ``x'' = x' × (0, 0, b)`` with no force."""
    x0, v0 = np.asarray(x0, float), np.asarray(v0, float)
    w = b
    c, s = np.cos(w * t), np.sin(w * t)
    vx = v0[0] * c + v0[1] * s
    vy = -v0[0] * s + v0[1] * c
    x = x0[0] + (v0[0] * s - v0[1] * (c - 1.0)) / w
    y = x0[1] + (v0[1] * s + v0[0] * (c - 1.0)) / w
    return np.array([x, y, x0[2] + v0[2] * t]), np.array([vx, vy, v0[2]])


def fd_jacobian_map(f, z, step=1e-6):
    """Central-difference Jacobian of ``f: R^n -> R^n``."""
    z = np.asarray(z, float)
    n = z.size
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        J[:, j] = (f(z + e) - f(z - e)) / (2 * step)
    return J
