"""Stepping maps for charged-particle dynamics ``x'' = x' × B(x)/eps + F(x)``.

Methods
-------
tsm1
    Implicit midpoint type one-step scheme::

        x1 = x0 + h vh,   v1 = v0 + h vh × B(xm)/eps + h F(xm),
        vh = (v0 + v1)/2, xm = (x0 + x1)/2.

tsm1-avf
    As ``tsm1`` with ``F(xm)`` replaced by the average of ``F`` over the
    segment ``[x0, x1]`` (Gauss-Legendre quadrature); energy preserving.
tsm2
    Two-step variational scheme with ``A, A', F`` at the midpoints
    ``(x_{n+1} + x_n)/2`` and ``(x_n + x_{n-1})/2``; velocities from
    ``v_{n+1} = 2 (x_{n+1} - x_n)/h - v_n``.
boris
    Two-step Boris recursion with ``B`` and ``F`` at ``x_n``.
varm
    Two-step variational scheme with ``A, A'`` at grid points.
rk4ref
    Classical Runge-Kutta, used as the reference solver.

All steppers share one low-level calling convention (``core(x_prev, x,
v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out) ->
(status, iterations, residual)``) and are selected by an integer code, so
that a single compiled loop drives every method.  Status 0 is success,
1 non-convergence.
"""

from __future__ import annotations

import enum
import weakref
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from . import observables
from .fields import FieldModel, SingularFieldError, field_overrides, rebind
from .fields import builtin_A as field_A
from .fields import builtin_B as field_B
from .fields import builtin_dA as field_dA
from .fields import builtin_F as field_F
from .fields import builtin_singular as field_singular
from .observables import observe
from .solvers import NonConvergence, SolverSettings, SolveReport, cross, solve_cross_linear, solve_fixed_point

DEFAULT_QUAD_ORDER = 5

OK, NONCONVERGED, SINGULAR = 0, 1, 2


class MethodId(enum.Enum):
    TSM1 = "tsm1"
    TSM1_AVF = "tsm1-avf"
    TSM2 = "tsm2"
    BORIS = "boris"
    VARM = "varm"
    RK4REF = "rk4ref"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown method {name!r}")

    @property
    def two_step(self) -> bool:
        return self in (MethodId.TSM2, MethodId.BORIS, MethodId.VARM)

    @property
    def central_velocity(self) -> bool:
        return self in (MethodId.BORIS, MethodId.VARM)


class StarterStrategy(enum.Enum):
    TSM1_START = "tsm1"
    REFERENCE_START = "reference"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for s in cls:
            if key in (s.value, s.name.lower().replace("_", "-")):
                return s
        raise ValueError(f"unknown starter strategy {name!r}")


DEFAULT_STARTER = {
    MethodId.TSM2: StarterStrategy.TSM1_START,
    MethodId.BORIS: StarterStrategy.REFERENCE_START,
    MethodId.VARM: StarterStrategy.REFERENCE_START,
}


@dataclass(frozen=True)
class ParticleState:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.array(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))


@dataclass(frozen=True)
class TwoStepState:
    """State of a two-step recursion: ``x_{n-1}, x_n`` and ``v_n`` at ``t_n``.

    For Boris and VARM the velocity at ``x_n`` is only fixed by the central
    difference once ``x_{n+1}`` is known; their steppers store the
    second-order backward difference here instead.
    """

    x_prev: np.ndarray
    x_curr: np.ndarray
    v_curr: np.ndarray
    t_curr: float

    def __post_init__(self):
        for name in ("x_prev", "x_curr", "v_curr"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float).reshape(3))


# ---------------------------------------------------------------------------
# compiled step cores


@njit(cache=True)
def _tsm1_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    # outer fixed point on the half displacement w = x_{n+1/2} - x_n (small, so
    # the residual stays far above roundoff when |x| is large); exact inner
    # solve for v_{n+1/2}
    c = 0.5 * h * inv_eps
    w = 0.5 * h * v
    xm = x + w
    t = np.empty(3)
    r = np.empty(3)
    xs = np.empty(3)
    vh = v.copy()
    res = np.inf
    status = NONCONVERGED
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(3):
            xm[i] = x[i] + w[i]
        b = field_B(xm, p)
        for i in range(3):
            t[i] = c * b[i]
            r[i] = v[i]
        for k in range(nodes.shape[0]):
            s2 = 2.0 * nodes[k]
            for i in range(3):
                xs[i] = x[i] + s2 * w[i]
            f = field_F(xs, p)
            for i in range(3):
                r[i] += 0.5 * h * weights[k] * f[i]
        vh = solve_cross_linear(t, r)
        res = 0.0
        for i in range(3):
            wn = 0.5 * h * vh[i]
            d = wn - w[i]
            res += d * d
            w[i] = (1.0 - damping) * w[i] + damping * wn
        res = np.sqrt(res)
        if res <= tol:
            status = OK
            break
        if not np.isfinite(res):
            break
    for i in range(3):
        out[i] = x[i] + h * vh[i]
        out[3 + i] = 2.0 * vh[i] - v[i]
    return status, it, res


@njit(cache=True)
def _tsm2_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    # unknown d = x_{n+1} - x_n
    c = 0.5 * h * inv_eps
    hh = 0.5 * h * h
    dm = x - xp
    mm = x - 0.5 * dm
    Am = field_A(mm, p)
    Jm = field_dA(mm, p)
    Fm = field_F(mm, p)
    base = np.empty(3)
    for i in range(3):
        jt = Jm[0, i] * dm[0] + Jm[1, i] * dm[1] + Jm[2, i] * dm[2]
        base[i] = dm[i] + c * jt + 2.0 * c * Am[i] + hh * Fm[i]
    d = dm.copy()
    R = np.empty(3)
    t = np.empty(3)
    mp = np.empty(3)
    res = np.inf
    status = NONCONVERGED
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(3):
            mp[i] = x[i] + 0.5 * d[i]
        Ap = field_A(mp, p)
        Jp = field_dA(mp, p)
        Bp = field_B(mp, p)
        Fp = field_F(mp, p)
        for i in range(3):
            jt = Jp[0, i] * d[0] + Jp[1, i] * d[1] + Jp[2, i] * d[2]
            R[i] = d[i] - base[i] - c * jt + 2.0 * c * Ap[i] - hh * Fp[i]
            t[i] = c * Bp[i]
        # (I + [t]x) approximates dR/dd since (A'^T - A') w = w × B
        delta = solve_cross_linear(t, R)
        res = np.sqrt(delta[0] ** 2 + delta[1] ** 2 + delta[2] ** 2)
        for i in range(3):
            d[i] -= damping * delta[i]
        if res <= tol:
            status = OK
            break
        if not np.isfinite(res):
            break
    for i in range(3):
        out[i] = x[i] + d[i]
        out[3 + i] = 2.0 * d[i] / h - v[i]
    return status, it, res


@njit(cache=True)
def _boris_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    # linear in d = x_{n+1} - x_n:  d + c B × d = dm + c dm × B + h^2 F
    c = 0.5 * h * inv_eps
    b = field_B(x, p)
    f = field_F(x, p)
    dm = x - xp
    db = cross(dm, b)
    t = np.empty(3)
    r = np.empty(3)
    for i in range(3):
        t[i] = c * b[i]
        r[i] = dm[i] + c * db[i] + h * h * f[i]
    d = solve_cross_linear(t, r)
    for i in range(3):
        out[i] = x[i] + d[i]
        out[3 + i] = (3.0 * d[i] - dm[i]) / (2.0 * h)
    return OK, 1, 0.0


@njit(cache=True)
def _varm_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    # unknown d = x_{n+1} - x_n
    c = 0.5 * h * inv_eps
    dm = x - xp
    Jx = field_dA(x, p)
    bx = field_B(x, p)
    fx = field_F(x, p)
    Axp = field_A(xp, p)
    t = np.empty(3)
    for i in range(3):
        t[i] = c * bx[i]
    d = dm.copy()
    y = np.empty(3)
    R = np.empty(3)
    res = np.inf
    status = NONCONVERGED
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(3):
            y[i] = x[i] + d[i]
        Ay = field_A(y, p)
        for i in range(3):
            jt = (Jx[0, i] * (d[0] + dm[0]) + Jx[1, i] * (d[1] + dm[1])
                  + Jx[2, i] * (d[2] + dm[2]))
            R[i] = d[i] - dm[i] - c * jt + c * (Ay[i] - Axp[i]) - h * h * fx[i]
        delta = solve_cross_linear(t, R)
        res = np.sqrt(delta[0] ** 2 + delta[1] ** 2 + delta[2] ** 2)
        for i in range(3):
            d[i] -= damping * delta[i]
        if res <= tol:
            status = OK
            break
        if not np.isfinite(res):
            break
    for i in range(3):
        out[i] = x[i] + d[i]
        out[3 + i] = (3.0 * d[i] - dm[i]) / (2.0 * h)
    return status, it, res


@njit(cache=True)
def _accel(x, v, inv_eps, p):
    b = field_B(x, p)
    f = field_F(x, p)
    a = cross(v, b)
    for i in range(3):
        a[i] = inv_eps * a[i] + f[i]
    return a


@njit(cache=True)
def _rk4_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    k1x = v
    k1v = _accel(x, v, inv_eps, p)
    x2 = x + 0.5 * h * k1x
    k2x = v + 0.5 * h * k1v
    k2v = _accel(x2, k2x, inv_eps, p)
    x3 = x + 0.5 * h * k2x
    k3x = v + 0.5 * h * k2v
    k3v = _accel(x3, k3x, inv_eps, p)
    x4 = x + h * k3x
    k4x = v + h * k3v
    k4v = _accel(x4, k4x, inv_eps, p)
    for i in range(3):
        out[i] = x[i] + h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i])
        out[3 + i] = v[i] + h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i])
    return OK, 1, 0.0


# integer codes understood by _step
_CORE_CODE = {
    MethodId.TSM1: 0,
    MethodId.TSM1_AVF: 0,
    MethodId.TSM2: 1,
    MethodId.BORIS: 2,
    MethodId.VARM: 3,
    MethodId.RK4REF: 4,
}


# ---------------------------------------------------------------------------
# compiled loops


@njit(cache=True)
def _step(code, xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out):
    if code == 0:
        return _tsm1_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out)
    elif code == 1:
        return _tsm2_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out)
    elif code == 2:
        return _boris_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out)
    elif code == 3:
        return _varm_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out)
    return _rk4_core(xp, x, v, h, inv_eps, p, tol, max_iter, damping, nodes, weights, out)


@njit(cache=True)
def _trajectory(code, central, nsteps, h, inv_eps, x0, v0, x1, v1, p,
                tol, max_iter, damping, nodes, weights, X, V, stats):
    X[0] = x0
    V[0] = v0
    if nsteps == 0:
        return OK, 0
    X[1] = x1
    V[1] = v1
    xp = x0.copy()
    xc = x1.copy()
    vc = v1.copy()
    out = np.empty(6)
    last = nsteps if central else nsteps - 1
    for n in range(1, last + 1):
        status, it, res = _step(code, xp, xc, vc, h, inv_eps, p,
                               tol, max_iter, damping, nodes, weights, out)
        stats[0] += it
        stats[1] = max(stats[1], it)
        stats[2] = max(stats[2], res)
        if status != OK:
            stats[3] = res
            return status, n
        xn = out[0:3].copy()
        vn = out[3:6].copy()
        if field_singular(xn, p):
            X[min(n + 1, nsteps)] = xn
            return SINGULAR, n
        if central:
            for i in range(3):
                V[n, i] = (xn[i] - xp[i]) / (2.0 * h)
        if n < nsteps:
            X[n + 1] = xn
            V[n + 1] = vn
        xp = xc
        xc = xn
        vc = vn
    return OK, 0


@njit(cache=True)
def _run(code, central, nsteps, h, inv_eps, x0, v0, x1, v1, p, S, has_S, mscale,
         tol, max_iter, damping, nodes, weights,
         sample_every, samples, drift, nwin, final, stats):
    # drift[q] = (initial, max_abs_dev, final_dev, first_window_dev, last_window_dev)
    xa = x0.copy()
    va = v0.copy()
    xp = x0.copy()
    xc = x1.copy()
    vc = v1.copy()
    xn = x1.copy()
    vn = v1.copy()
    vcur = v1.copy()
    out = np.empty(6)
    obs = np.empty(6)
    xm = np.empty(3)
    vm = np.empty(3)
    slots = np.array([0, 1, 2, 4, 5])
    last = nsteps if central else nsteps - 1
    for n in range(1, nsteps + 1):
        if n <= last:
            status, it, res = _step(code, xp, xc, vc, h, inv_eps, p,
                                   tol, max_iter, damping, nodes, weights, out)
            stats[0] += it
            stats[1] = max(stats[1], it)
            stats[2] = max(stats[2], res)
            if status != OK:
                stats[3] = res
                final[0:3] = xc
                return status, n
            for i in range(3):
                xn[i] = out[i]
                vn[i] = out[3 + i]
            if field_singular(xn, p):
                final[0:3] = xn
                return SINGULAR, n
            if central:
                for i in range(3):
                    vcur[i] = (xn[i] - xp[i]) / (2.0 * h)
            else:
                vcur[:] = vc
        else:
            vcur[:] = vc
        for i in range(3):
            xm[i] = 0.5 * (xa[i] + xc[i])
            vm[i] = 0.5 * (va[i] + vcur[i])
        observe(xm, vm, h, inv_eps, p, S, has_S, mscale, obs)
        k = n - 1
        for q in range(5):
            val = obs[slots[q]]
            if k == 0:
                drift[q, 0] = val
            dev = val - drift[q, 0]
            adev = abs(dev)
            if adev > drift[q, 1]:
                drift[q, 1] = adev
            drift[q, 2] = dev
            if k < nwin and adev > drift[q, 3]:
                drift[q, 3] = adev
            if k >= nsteps - nwin and adev > drift[q, 4]:
                drift[q, 4] = adev
        if k % sample_every == 0:
            j = k // sample_every
            samples[j, 0] = (k + 0.5) * h
            for i in range(3):
                samples[j, 1 + i] = xm[i]
                samples[j, 4 + i] = vm[i]
            for i in range(6):
                samples[j, 7 + i] = obs[i]
        xa[:] = xc
        va[:] = vcur
        if n <= last:
            xp[:] = xc
            xc[:] = xn
            vc[:] = vn
    final[0:3] = xa
    final[3:6] = va
    return OK, 0


@njit(cache=True)
def _rk4_solve(nsteps, h, inv_eps, x0, v0, p, out):
    x = x0.copy()
    v = v0.copy()
    nodes = np.empty(0)
    for n in range(nsteps):
        _rk4_core(x, x, v, h, inv_eps, p, 0.0, 1, 1.0, nodes, nodes, out)
        x = out[0:3].copy()
        v = out[3:6].copy()
        if field_singular(x, p):
            return SINGULAR, n + 1
    out[0:3] = x
    out[3:6] = v
    return OK, 0


# ---------------------------------------------------------------------------
# python-facing helpers


@lru_cache(maxsize=None)
def gauss_legendre_unit(order: int):
    """Gauss-Legendre nodes and weights on ``[0, 1]``."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    xg, wg = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (xg + 1.0)
    weights = 0.5 * wg
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


_MIDPOINT_RULE = (np.array([0.5]), np.array([1.0]))


def _quadrature(method: MethodId, quad_order: int):
    if method is MethodId.TSM1_AVF:
        if quad_order < 2:
            raise ValueError("AVF quadrature order must be >= 2")
        return gauss_legendre_unit(quad_order)
    return _MIDPOINT_RULE


_COMPILED = ("_tsm1_core", "_tsm2_core", "_boris_core", "_varm_core", "_accel", "_rk4_core",
             "_step", "_trajectory", "_run", "_rk4_solve")
_python_kernels = weakref.WeakKeyDictionary()


def _kernels(model: FieldModel) -> dict:
    """Name -> callable for the stepping loops, bound to ``model``'s field."""
    if model.jitted:
        return {name: globals()[name] for name in _COMPILED}
    ns = _python_kernels.get(model)
    if ns is None:
        over = field_overrides(model)
        over["observe"] = observables.observe_fn(model)
        ns = rebind({name: globals()[name] for name in _COMPILED}, globals(), over)
        _python_kernels[model] = ns
    return ns


def _settings(settings):
    return SolverSettings() if settings is None else settings


def _call_core(method: MethodId, model: FieldModel, xp, x, v, h, settings=None,
               quad_order=DEFAULT_QUAD_ORDER):
    st = _settings(settings)
    nodes, weights = _quadrature(method, quad_order)
    out = np.empty(6)
    xp = np.ascontiguousarray(xp, float)
    x = np.ascontiguousarray(x, float)
    v = np.ascontiguousarray(v, float)
    status, it, res = _kernels(model)["_step"](
        _CORE_CODE[method], xp, x, v, float(h), model.inv_eps, model.params,
        st.tol, int(st.max_iter), st.damping, nodes, weights, out)
    report = SolveReport(int(it), float(res), status == OK)
    if status != OK:
        raise NonConvergence(
            f"{method.value}: implicit solve did not converge (residual {res:.3e})",
            iterate=out[:3], residual=float(res), iterations=int(it))
    xn, vn = out[:3].copy(), out[3:].copy()
    if model.is_singular(xn):
        raise SingularFieldError(f"{method.value}: step entered the singular set at {xn}", xn)
    return xn, vn, report


def tsm1_step(s: ParticleState, h: float, model: FieldModel, settings=None):
    """One step of the implicit midpoint type scheme; returns ``(state, report)``."""
    xn, vn, rep = _call_core(MethodId.TSM1, model, s.x, s.x, s.v, h, settings)
    return ParticleState(s.t + h, xn, vn), rep


def tsm1_avf_step(s: ParticleState, h: float, model: FieldModel, settings=None,
                  quad_order: int = DEFAULT_QUAD_ORDER):
    """TSM1 with the segment-averaged force ``int_0^1 F(x0 + s (x1 - x0)) ds``."""
    xn, vn, rep = _call_core(MethodId.TSM1_AVF, model, s.x, s.x, s.v, h, settings, quad_order)
    return ParticleState(s.t + h, xn, vn), rep


def tsm2_step(ts: TwoStepState, h: float, model: FieldModel, settings=None):
    xn, vn, rep = _call_core(MethodId.TSM2, model, ts.x_prev, ts.x_curr, ts.v_curr, h, settings)
    return TwoStepState(ts.x_curr, xn, vn, ts.t_curr + h), rep


def boris_step(ts: TwoStepState, h: float, model: FieldModel) -> TwoStepState:
    xn, vn, _ = _call_core(MethodId.BORIS, model, ts.x_prev, ts.x_curr, ts.v_curr, h)
    return TwoStepState(ts.x_curr, xn, vn, ts.t_curr + h)


def varm_step(ts: TwoStepState, h: float, model: FieldModel, settings=None):
    xn, vn, rep = _call_core(MethodId.VARM, model, ts.x_prev, ts.x_curr, ts.v_curr, h, settings)
    return TwoStepState(ts.x_curr, xn, vn, ts.t_curr + h), rep


def central_velocity(x_prev, x_next, h: float) -> np.ndarray:
    """Velocity at ``x_n`` for Boris and VARM: ``(x_{n+1} - x_{n-1}) / 2h``."""
    return (np.asarray(x_next, float) - np.asarray(x_prev, float)) / (2.0 * h)


def reference_solve(s0: ParticleState, h_ref: float, t_end: float, model: FieldModel) -> ParticleState:
    """RK4 on ``x' = v, v' = v × B/eps + F`` from ``s0.t`` to ``t_end``.

    The step is shrunk to ``(t_end - s0.t) / ceil((t_end - s0.t) / h_ref)``
    so the final time is hit exactly.
    """
    span = t_end - s0.t
    if h_ref <= 0:
        raise ValueError("h_ref must be positive")
    if span == 0:
        return s0
    nsteps = int(np.ceil(abs(span) / h_ref - 1e-9))
    h = span / nsteps
    out = np.empty(6)
    status, n = _kernels(model)["_rk4_solve"](nsteps, h, model.inv_eps, s0.x, s0.v,
                                              model.params, out)
    if status == SINGULAR:
        raise SingularFieldError(f"reference solve entered the singular set at step {n}",
                                 out[:3], step=n)
    return ParticleState(t_end, out[:3].copy(), out[3:].copy())


def make_starter(s0: ParticleState, h: float, model: FieldModel,
                 strategy=StarterStrategy.TSM1_START, settings=None) -> TwoStepState:
    """Supply ``(x_1, v_1)`` for a two-step recursion.

    ``tsm1``: one TSM1 step.  ``reference``: RK4 over ``[t0, t0 + h]`` with
    100 substeps.
    """
    strategy = StarterStrategy.parse(strategy)
    if strategy is StarterStrategy.TSM1_START:
        s1, _ = tsm1_step(s0, h, model, settings)
    else:
        s1 = reference_solve(s0, abs(h) / 100.0, s0.t + h, model)
    return TwoStepState(s0.x, s1.x, s1.v, s0.t + h)


@dataclass
class SolverStats:
    total_iterations: int = 0
    max_iterations: int = 0
    max_residual: float = 0.0
    steps: int = 0

    @property
    def mean_iterations(self) -> float:
        return self.total_iterations / self.steps if self.steps else 0.0


@dataclass
class Trajectory:
    method: MethodId
    h: float
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    stats: SolverStats = field(default_factory=SolverStats)


def initial_pair(method, model: FieldModel, h: float, x0, v0, starter=None, settings=None,
                 quad_order: int = DEFAULT_QUAD_ORDER, t0: float = 0.0):
    """State 1 of a run: the method's own step, or the starter for two-step methods."""
    method = MethodId.parse(method)
    s0 = ParticleState(t0, x0, v0)
    if model.is_singular(s0.x):
        raise SingularFieldError(f"initial position {s0.x} lies in the singular set", s0.x, step=0)
    try:
        if method.two_step:
            strategy = DEFAULT_STARTER[method] if starter is None else StarterStrategy.parse(starter)
            ts = make_starter(s0, h, model, strategy, settings)
            return ts.x_curr, ts.v_curr
        xn, vn, _ = _call_core(method, model, s0.x, s0.x, s0.v, h, settings, quad_order)
        return xn, vn
    except (NonConvergence, SingularFieldError) as exc:
        if exc.step is None:
            exc.step = 1
        raise


def integrate(method, model: FieldModel, h: float, nsteps: int, x0, v0, *, starter=None,
              settings=None, quad_order: int = DEFAULT_QUAD_ORDER, t0: float = 0.0) -> Trajectory:
    """Integrate ``nsteps`` fixed steps and return every state.

    Boris and VARM velocities are central differences, so one extra position
    beyond ``nsteps`` is computed internally.
    """
    method = MethodId.parse(method)
    st = _settings(settings)
    nsteps = int(nsteps)
    x0 = np.array(x0, dtype=float)
    v0 = np.array(v0, dtype=float)
    X = np.empty((nsteps + 1, 3))
    V = np.empty((nsteps + 1, 3))
    stats = np.zeros(4)
    if nsteps > 0:
        x1, v1 = initial_pair(method, model, h, x0, v0, starter, st, quad_order, t0)
    else:
        x1, v1 = x0.copy(), v0.copy()
    nodes, weights = _quadrature(method, quad_order)
    x1 = np.ascontiguousarray(x1, float)
    v1 = np.ascontiguousarray(v1, float)
    status, n = _kernels(model)["_trajectory"](
        _CORE_CODE[method], method.central_velocity, nsteps, float(h), model.inv_eps,
        x0, v0, x1, v1, model.params, st.tol, int(st.max_iter), st.damping, nodes, weights,
        X, V, stats)
    if status != OK:
        _raise_status(method, status, n, stats, X[min(n + 1, nsteps)] if status == SINGULAR else X[n])
    t = t0 + h * np.arange(nsteps + 1)
    return Trajectory(method, h, t, X, V, _stats(stats, nsteps))


def run_loop(method: MethodId, model: FieldModel, nsteps: int, h: float, x0, v0, x1, v1,
             S, has_S, settings: SolverSettings, nodes, weights,
             sample_every, samples, drift, nwin, final, stats):
    """Step and observe in one compiled pass; see the harness for the array layouts."""
    st = settings
    args = (nsteps, float(h), model.inv_eps, x0, v0, np.ascontiguousarray(x1, float),
            np.ascontiguousarray(v1, float))
    return _kernels(model)["_run"](
        _CORE_CODE[method], method.central_velocity, *args, model.params, S, has_S, model.mscale,
        st.tol, int(st.max_iter), st.damping, nodes, weights,
        sample_every, samples, drift, nwin, final, stats)


def _stats(raw, nsteps) -> SolverStats:
    return SolverStats(int(raw[0]), int(raw[1]), float(raw[2]), nsteps)


def _raise_status(method, status, n, stats, position=None):
    # loop index n failed while producing state n + 1
    if status == NONCONVERGED:
        raise NonConvergence(
            f"{method.value}: implicit solve for state {n + 1} did not converge "
            f"(residual {stats[3]:.3e})", iterate=position, residual=float(stats[3]), step=n + 1)
    if status == SINGULAR:
        raise SingularFieldError(
            f"{method.value}: state {n + 1} entered the singular set at {position}",
            position, step=n + 1)


# ---------------------------------------------------------------------------
# discrete Legendre transform of the midpoint variational scheme


def discrete_momenta(x0, x1, h: float, model: FieldModel):
    """Momenta ``(p_0, p_1)`` conjugate to the midpoint discrete Lagrangian.

    ``L_h(a, b) = h [ |b - a|^2 / 2h^2 + A(m)^T (b - a) / (eps h) - U(m) ]``
    with ``m = (a + b)/2``; ``p_0 = -dL_h/da`` and ``p_1 = dL_h/db``.  Both
    approximate ``v + A(x)/eps`` to second order.
    """
    x0 = np.asarray(x0, float)
    x1 = np.asarray(x1, float)
    m = 0.5 * (x0 + x1)
    d = x1 - x0
    jt = model.vector_potential_jacobian(m).T @ d
    a = model.vector_potential(m)
    f = model.force(m)
    common = d / h + model.inv_eps * a
    p0 = common - 0.5 * model.inv_eps * jt - 0.5 * h * f
    p1 = common + 0.5 * model.inv_eps * jt + 0.5 * h * f
    return p0, p1


def tsm2_momentum_step(x, pm, h: float, model: FieldModel, settings=None):
    """One step of the midpoint variational scheme as a map ``(x, p) -> (x', p')``.

    Eliminating ``p`` between consecutive steps recovers the two-step TSM2
    recursion exactly, so the map is the one-step form of that scheme.
    """
    x = np.asarray(x, float)
    pm = np.asarray(pm, float)
    c = 0.5 * h * model.inv_eps

    def precond_map(y):
        m = 0.5 * (x + y)
        d = y - x
        R = (d - h * pm - c * (model.vector_potential_jacobian(m).T @ d)
             + 2.0 * c * model.vector_potential(m) - 0.5 * h * h * model.force(m))
        return y - solve_cross_linear(c * model.magnetic_field(m), R)

    y, _ = solve_fixed_point(precond_map, x + h * pm - h * model.inv_eps * model.vector_potential(x),
                             _settings(settings))
    return y, discrete_momenta(x, y, h, model)[1]
