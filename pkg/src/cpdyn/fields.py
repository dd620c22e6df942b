"""Electromagnetic field models for charged-particle dynamics.

A :class:`FieldModel` bundles the vector potential ``A``, its Jacobian, the
magnetic field ``B = curl A``, the scalar potential ``U`` and the force
``F = -grad U`` together with the field scale ``eps`` that divides the
Lorentz term.

Evaluators are stored as *kernels* with the calling convention
``kernel(x, p)`` where ``p`` is a flat parameter array.  Builtin kernels are
compiled with numba so the integrator loops can call them at native speed;
models built from plain Python callables run the same loops uninterpreted.
"""

from __future__ import annotations

import enum
import types
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

DEFAULT_R2_FLOOR = 1e-12

# parameter layout shared by all builtin kernels
_B = slice(0, 3)
_Q = slice(3, 12)
_QV = slice(12, 15)
_FLOOR = 15
_KIND = 16
_NPARAM = 17

# values of p[_KIND] for the builtin kernels below
KIND_AFFINE = 0.0
KIND_ROTSYM = 1.0


class FieldError(ValueError):
    """Invalid field construction parameters."""


class SingularFieldError(RuntimeError):
    """A state entered the set where the field model is undefined."""

    def __init__(self, message, position=None, step=None):
        super().__init__(message)
        self.position = None if position is None else np.array(position, dtype=float)
        self.step = step


class BuiltinFieldId(enum.Enum):
    CONSTANT_B = "constant"
    EXPERIMENT_ROTSYM = "experiment"
    QUADRATIC_U = "quadratic"
    FREE = "free"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {
            "constant": cls.CONSTANT_B,
            "constant-b": cls.CONSTANT_B,
            "experiment": cls.EXPERIMENT_ROTSYM,
            "experiment-rotsym": cls.EXPERIMENT_ROTSYM,
            "rotsym": cls.EXPERIMENT_ROTSYM,
            "quadratic": cls.QUADRATIC_U,
            "quadratic-u": cls.QUADRATIC_U,
            "free": cls.FREE,
        }
        try:
            return aliases[key]
        except KeyError:
            raise FieldError(f"unknown field id {name!r}") from None


# ---------------------------------------------------------------------------
# builtin kernels


@njit(cache=True, error_model="numpy")
def _const_A(x, p):
    # A = -1/2 x × b = 1/2 b × x
    out = np.empty(3)
    out[0] = 0.5 * (p[1] * x[2] - p[2] * x[1])
    out[1] = 0.5 * (p[2] * x[0] - p[0] * x[2])
    out[2] = 0.5 * (p[0] * x[1] - p[1] * x[0])
    return out


@njit(cache=True, error_model="numpy")
def _const_dA(x, p):
    out = np.zeros((3, 3))
    out[0, 1] = -0.5 * p[2]
    out[0, 2] = 0.5 * p[1]
    out[1, 0] = 0.5 * p[2]
    out[1, 2] = -0.5 * p[0]
    out[2, 0] = -0.5 * p[1]
    out[2, 1] = 0.5 * p[0]
    return out


@njit(cache=True, error_model="numpy")
def _const_B(x, p):
    out = np.empty(3)
    out[0] = p[0]
    out[1] = p[1]
    out[2] = p[2]
    return out


@njit(cache=True, error_model="numpy")
def _quad_U(x, p):
    s = 0.0
    for i in range(3):
        qx = 0.0
        for j in range(3):
            qx += p[3 + 3 * i + j] * x[j]
        s += 0.5 * x[i] * qx + p[12 + i] * x[i]
    return s


@njit(cache=True, error_model="numpy")
def _quad_F(x, p):
    out = np.empty(3)
    for i in range(3):
        qx = 0.0
        for j in range(3):
            qx += p[3 + 3 * i + j] * x[j]
        out[i] = -(qx + p[12 + i])
    return out


@njit(cache=True, error_model="numpy")
def _rot_A(x, p):
    r = np.sqrt(x[0] * x[0] + x[1] * x[1])
    out = np.empty(3)
    out[0] = -x[1] * r / 3.0
    out[1] = x[0] * r / 3.0
    out[2] = 0.0
    return out


@njit(cache=True, error_model="numpy")
def _rot_dA(x, p):
    r = np.sqrt(x[0] * x[0] + x[1] * x[1])
    out = np.zeros((3, 3))
    out[0, 0] = -x[0] * x[1] / (3.0 * r)
    out[0, 1] = -r / 3.0 - x[1] * x[1] / (3.0 * r)
    out[1, 0] = r / 3.0 + x[0] * x[0] / (3.0 * r)
    out[1, 1] = x[0] * x[1] / (3.0 * r)
    return out


@njit(cache=True, error_model="numpy")
def _rot_B(x, p):
    out = np.zeros(3)
    out[2] = np.sqrt(x[0] * x[0] + x[1] * x[1])
    return out


@njit(cache=True, error_model="numpy")
def _rot_U(x, p):
    return 1.0 / (100.0 * np.sqrt(x[0] * x[0] + x[1] * x[1]))


@njit(cache=True, error_model="numpy")
def _rot_F(x, p):
    r2 = x[0] * x[0] + x[1] * x[1]
    c = 1.0 / (100.0 * r2 * np.sqrt(r2))
    out = np.zeros(3)
    out[0] = c * x[0]
    out[1] = c * x[1]
    return out


@njit(cache=True, error_model="numpy")
def _rot_singular(x, p):
    r2 = x[0] * x[0] + x[1] * x[1]
    # NaN positions are singular too
    return not (r2 >= p[15])


# Builtin fields share one set of entry points that branch on p[_KIND].
# Compiled loops can then reference them as globals, which keeps the
# numba on-disk cache valid across processes.


@njit(cache=True, error_model="numpy")
def builtin_A(x, p):
    if p[16] == 1.0:
        return _rot_A(x, p)
    return _const_A(x, p)


@njit(cache=True, error_model="numpy")
def builtin_dA(x, p):
    if p[16] == 1.0:
        return _rot_dA(x, p)
    return _const_dA(x, p)


@njit(cache=True, error_model="numpy")
def builtin_B(x, p):
    if p[16] == 1.0:
        return _rot_B(x, p)
    return _const_B(x, p)


@njit(cache=True, error_model="numpy")
def builtin_U(x, p):
    if p[16] == 1.0:
        return _rot_U(x, p)
    return _quad_U(x, p)


@njit(cache=True, error_model="numpy")
def builtin_F(x, p):
    if p[16] == 1.0:
        return _rot_F(x, p)
    return _quad_F(x, p)


@njit(cache=True, error_model="numpy")
def builtin_singular(x, p):
    if p[16] == 1.0:
        return _rot_singular(x, p)
    return False


# Python fallback for user-supplied fields: compiled code refers to the
# builtin entry points through the module-global names below, so running
# the same code objects with those names rebound evaluates a custom model.

FIELD_NAMES = ("field_A", "field_dA", "field_B", "field_U", "field_F", "field_singular")


def field_overrides(model) -> dict:
    return dict(zip(FIELD_NAMES, (model.A, model.dA, model.B, model.U, model.F, model.singular)))


def rebind(dispatchers: dict, module_globals: dict, overrides: dict) -> dict:
    """Pure-Python copies of compiled functions resolving globals in a shared namespace.

    ``dispatchers`` maps global names to numba dispatchers; the returned
    namespace maps the same names to their rebound ``py_func`` copies, so
    calls between them stay inside the namespace.
    """
    g = dict(module_globals)
    g.update(overrides)
    for name, disp in dispatchers.items():
        f = getattr(disp, "py_func", disp)
        g[name] = types.FunctionType(f.__code__, g, f.__name__, f.__defaults__, f.__closure__)
    return g


# ---------------------------------------------------------------------------


def fd_jacobian(fun: Callable, x, step: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian ``J[i, j] = d fun_i / d x_j``."""
    x = np.asarray(x, dtype=float)
    if step is None:
        step = 1e-6 * max(1.0, float(np.linalg.norm(x)))
    jac = np.empty((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        jac[:, j] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * step)
    return jac


@dataclass(frozen=True, eq=False)
class FieldModel:
    """Immutable evaluator bundle for ``A, A', B, U, F, S`` and ``eps``.

    ``momentum_scale`` is the factor multiplying ``A`` in the momentum
    ``M = (v + c A)^T S x``; ``None`` means ``1/eps``.
    """

    eps: float
    A: Callable
    dA: Callable
    B: Callable
    U: Callable
    F: Callable
    singular: Callable
    params: np.ndarray
    symmetry_generator: Optional[np.ndarray] = None
    name: str = "custom"
    jitted: bool = False
    momentum_scale: Optional[float] = None
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.eps) and self.eps > 0):
            raise FieldError(f"eps must be positive, got {self.eps!r}")
        p = np.ascontiguousarray(self.params, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "params", p)
        S = self.symmetry_generator
        if S is not None:
            S = np.array(S, dtype=float).reshape(3, 3)
            if not np.array_equal(S.T, -S):
                raise FieldError("symmetry generator must be skew-symmetric")
            S.setflags(write=False)
            object.__setattr__(self, "symmetry_generator", S)

    @property
    def inv_eps(self) -> float:
        return 1.0 / self.eps

    @property
    def mscale(self) -> float:
        return self.inv_eps if self.momentum_scale is None else float(self.momentum_scale)

    # convenience evaluators -------------------------------------------------

    def vector_potential(self, x) -> np.ndarray:
        return np.asarray(self.A(_vec(x), self.params), dtype=float)

    def vector_potential_jacobian(self, x) -> np.ndarray:
        return np.asarray(self.dA(_vec(x), self.params), dtype=float)

    def magnetic_field(self, x) -> np.ndarray:
        return np.asarray(self.B(_vec(x), self.params), dtype=float)

    def scalar_potential(self, x) -> float:
        return float(self.U(_vec(x), self.params))

    def force(self, x) -> np.ndarray:
        return np.asarray(self.F(_vec(x), self.params), dtype=float)

    def is_singular(self, x) -> bool:
        return bool(self.singular(_vec(x), self.params))

    def with_eps(self, eps: float) -> "FieldModel":
        return FieldModel(
            eps=eps, A=self.A, dA=self.dA, B=self.B, U=self.U, F=self.F,
            singular=self.singular, params=self.params,
            symmetry_generator=self.symmetry_generator, name=self.name,
            jitted=self.jitted, momentum_scale=self.momentum_scale,
            description=dict(self.description),
        )

    @classmethod
    def from_functions(
        cls,
        eps: float,
        vector_potential: Callable,
        magnetic_field: Callable,
        scalar_potential: Optional[Callable] = None,
        force: Optional[Callable] = None,
        vector_potential_jacobian: Optional[Callable] = None,
        symmetry_generator=None,
        singular_set_guard: Optional[Callable] = None,
        momentum_scale: Optional[float] = None,
        name: str = "custom",
    ) -> "FieldModel":
        """Build a model from single-argument Python callables ``f(x)``.

        A missing Jacobian falls back to central differences with step
        ``1e-6 * max(1, |x|)``; a missing potential means ``U = 0, F = 0``.
        """
        if (scalar_potential is None) != (force is None):
            raise FieldError("scalar_potential and force must be given together")
        if vector_potential_jacobian is None:
            def vector_potential_jacobian(x, _A=vector_potential):
                return fd_jacobian(_A, x)
        if scalar_potential is None:
            def scalar_potential(x):
                return 0.0

            def force(x):
                return np.zeros(3)
        if singular_set_guard is None:
            def singular_set_guard(x):
                return False

        def wrap_vec(f):
            return lambda x, p: np.asarray(f(x), dtype=float)

        return cls(
            eps=eps,
            A=wrap_vec(vector_potential),
            dA=lambda x, p: np.asarray(vector_potential_jacobian(x), dtype=float),
            B=wrap_vec(magnetic_field),
            U=lambda x, p: float(scalar_potential(x)),
            F=wrap_vec(force),
            singular=lambda x, p: bool(singular_set_guard(x)),
            params=np.zeros(_NPARAM),
            symmetry_generator=symmetry_generator,
            name=name,
            jitted=False,
            momentum_scale=momentum_scale,
        )


def _vec(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=float).reshape(3)


def _rotation_generator(b: np.ndarray) -> np.ndarray:
    # S x = x × b
    return np.array([[0.0, b[2], -b[1]], [-b[2], 0.0, b[0]], [b[1], -b[0], 0.0]])


def make_builtin(
    field_id,
    eps: float,
    *,
    b: Optional[Sequence[float]] = None,
    Q=None,
    q: Optional[Sequence[float]] = None,
    r2_floor: float = DEFAULT_R2_FLOOR,
    momentum_scale: Optional[float] = None,
) -> FieldModel:
    """Construct one of the builtin field models.

    Parameters
    ----------
    field_id
        A :class:`BuiltinFieldId` or its name (``constant``, ``experiment``,
        ``quadratic``, ``free``).
    eps
        Field scale; the Lorentz term is ``v × B / eps``.
    b
        Constant magnetic field for ``constant`` (default ``(0, 0, 1)``) and
        ``quadratic`` (default zero).
    Q, q
        Hessian and linear term of the quadratic potential
        ``U = x^T Q x / 2 + q^T x``.  ``Q`` must be symmetric.
    r2_floor
        Points with ``x1^2 + x2^2 < r2_floor`` are singular for the
        rotationally symmetric experiment field.
    """
    fid = BuiltinFieldId.parse(field_id)
    if not (np.isfinite(eps) and eps > 0):
        raise FieldError(f"eps must be positive, got {eps!r}")
    p = np.zeros(_NPARAM)
    p[_FLOOR] = r2_floor
    desc = {"id": fid.value}
    S = None

    if fid is BuiltinFieldId.EXPERIMENT_ROTSYM:
        p[_KIND] = KIND_ROTSYM
        if not (np.isfinite(r2_floor) and r2_floor >= 0):
            raise FieldError("r2_floor must be a non-negative number")
        desc["r2_floor"] = r2_floor
        S = _rotation_generator(np.array([0.0, 0.0, 1.0]))
        return FieldModel(
            eps=eps, A=builtin_A, dA=builtin_dA, B=builtin_B, U=builtin_U, F=builtin_F,
            singular=builtin_singular, params=p, symmetry_generator=S,
            name=fid.value, jitted=True, momentum_scale=momentum_scale,
            description=desc,
        )

    if fid is BuiltinFieldId.FREE:
        bvec = np.zeros(3)
    elif fid is BuiltinFieldId.CONSTANT_B:
        bvec = np.array([0.0, 0.0, 1.0]) if b is None else _finite_vec(b, "b")
    else:
        bvec = np.zeros(3) if b is None else _finite_vec(b, "b")
    p[_B] = bvec
    desc["b"] = bvec.tolist()

    if fid is BuiltinFieldId.QUADRATIC_U:
        Qm = np.eye(3) if Q is None else np.array(Q, dtype=float).reshape(3, 3)
        qv = np.zeros(3) if q is None else _finite_vec(q, "q")
        if not np.all(np.isfinite(Qm)):
            raise FieldError("Q must be finite")
        if not np.array_equal(Qm, Qm.T):
            raise FieldError("Q must be symmetric")
        p[_Q] = Qm.ravel()
        p[_QV] = qv
        desc["Q"] = Qm.ravel().tolist()
        desc["q"] = qv.tolist()
    else:
        Qm, qv = np.zeros((3, 3)), np.zeros(3)

    # b = 0 and Q = 0, q = 0 make the affine kernels vanish identically
    if np.any(bvec):
        Sc = _rotation_generator(bvec)
        # U must be invariant under rotations about b: [Q, S] = 0, S^T q = 0
        if np.allclose(Qm @ Sc, Sc @ Qm, atol=1e-14) and np.allclose(Sc.T @ qv, 0.0, atol=1e-14):
            S = Sc

    return FieldModel(
        eps=eps, A=builtin_A, dA=builtin_dA, B=builtin_B, U=builtin_U, F=builtin_F,
        singular=builtin_singular,
        params=p, symmetry_generator=S, name=fid.value, jitted=True,
        momentum_scale=momentum_scale, description=desc,
    )


def _finite_vec(v, name) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise FieldError(f"{name} must be a finite 3-vector")
    return arr


# ---------------------------------------------------------------------------
# consistency checks


@dataclass
class ConsistencyReport:
    max_curl_deviation: float
    max_grad_deviation: float
    tol: float
    checked: int
    skipped: list

    @property
    def passed(self) -> bool:
        return self.max_curl_deviation <= self.tol and self.max_grad_deviation <= self.tol


def fd_curl(A: Callable, x, step: float) -> np.ndarray:
    J = fd_jacobian(A, x, step)
    return np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])


def fd_gradient(U: Callable, x, step: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        g[j] = (U(x + e) - U(x - e)) / (2.0 * step)
    return g


def verify_consistency(model: FieldModel, sample_points, fd_step: float = 1e-5,
                       tol: float = 1e-6) -> ConsistencyReport:
    """Compare central-difference ``curl A`` with ``B`` and ``-grad U`` with ``F``.

    Points in the singular set are skipped and their indices reported.
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    curl_dev = 0.0
    grad_dev = 0.0
    skipped = []
    checked = 0
    for i, x in enumerate(np.atleast_2d(np.asarray(sample_points, dtype=float))):
        if model.is_singular(x):
            skipped.append(i)
            continue
        curl = fd_curl(model.vector_potential, x, fd_step)
        grad = fd_gradient(model.scalar_potential, x, fd_step)
        curl_dev = max(curl_dev, float(np.linalg.norm(curl - model.magnetic_field(x))))
        grad_dev = max(grad_dev, float(np.linalg.norm(-grad - model.force(x))))
        checked += 1
    return ConsistencyReport(curl_dev, grad_dev, tol, checked, skipped)


def momentum_closed_form(x, v) -> float:
    """Momentum of the rotationally symmetric experiment field at ``eps = 1``."""
    r = np.hypot(x[0], x[1])
    return (v[0] - x[1] * r / 3.0) * x[1] - (v[1] + x[0] * r / 3.0) * x[0]
