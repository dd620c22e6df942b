"""Conserved and nearly conserved quantities evaluated at midpoint states.

Quantities: the energy ``E = |v|^2/2 + U(x)``, the momentum
``M = (v + c A(x))^T S x``, the magnetic moment ``I = |v_perp|^2 / (2|B|)``,
the discrete gyration angle ``xi = 2 arctan(h|B| / (2 eps))`` and the
modified energy and moment

    H_h = E + (xi csc xi - 1) I |B|,
    I_h = (1 + h^2 |B|^2 / (4 eps^2)) I.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .fields import FieldModel, field_overrides, rebind
from .fields import builtin_A as field_A
from .fields import builtin_B as field_B
from .fields import builtin_U as field_U

OBS_FIELDS = ("E", "M", "I", "xi", "Hh", "Ih")

# leading small-xi coefficients of H_h - H = c_E xi^2 I|B| and I_h - I = c_I xi^2 I
TSM2_COEFFS = {"energy": 1.0 / 6.0, "moment": 1.0 / 4.0}
VARM_COEFFS = {"energy": 5.0 / 12.0, "moment": 1.0 / 2.0}


@dataclass(frozen=True)
class MidpointState:
    t_mid: float
    x_mid: np.ndarray
    v_mid: np.ndarray


@dataclass(frozen=True)
class ObservableSample:
    t_mid: float
    E: float
    M: float
    I: float
    xi: float
    H_h: float
    I_h: float

    def defined(self, name: str) -> bool:
        return not math.isnan(getattr(self, name))


def midpoint_state(a, b) -> MidpointState:
    """Arithmetic mean of two :class:`~cpdyn.integrators.ParticleState`."""
    return MidpointState(
        0.5 * (a.t + b.t),
        0.5 * (np.asarray(a.x, float) + np.asarray(b.x, float)),
        0.5 * (np.asarray(a.v, float) + np.asarray(b.v, float)),
    )


@njit(cache=True)
def observe(x, v, h, inv_eps, p, S, has_S, mscale, out):
    """Fill ``out`` with ``(E, M, I, xi, H_h, I_h)``; NaN marks undefined."""
    E = 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + field_U(x, p)
    out[0] = E
    if has_S:
        a = field_A(x, p)
        M = 0.0
        for i in range(3):
            sx = S[i, 0] * x[0] + S[i, 1] * x[1] + S[i, 2] * x[2]
            M += (v[i] + mscale * a[i]) * sx
        out[1] = M
    else:
        out[1] = np.nan
    b = field_B(x, p)
    b2 = b[0] * b[0] + b[1] * b[1] + b[2] * b[2]
    if b2 > 0.0:
        bn = np.sqrt(b2)
        c0 = v[1] * b[2] - v[2] * b[1]
        c1 = v[2] * b[0] - v[0] * b[2]
        c2 = v[0] * b[1] - v[1] * b[0]
        I = 0.5 * (c0 * c0 + c1 * c1 + c2 * c2) / (b2 * bn)
        eta = 0.5 * h * inv_eps * bn
        xi = 2.0 * np.arctan(abs(eta))
        out[2] = I
        out[3] = xi
        fac = xi / np.sin(xi) - 1.0 if xi > 0.0 else 0.0
        out[4] = E + fac * I * bn
        out[5] = (eta * eta + 1.0) * I
    else:
        out[2] = np.nan
        out[3] = np.nan
        out[4] = np.nan
        out[5] = np.nan


def observe_fn(model: FieldModel):
    """``observe`` bound to ``model``: compiled for builtin fields, Python otherwise."""
    if model.jitted:
        return observe
    return rebind({"observe": observe}, globals(), field_overrides(model))["observe"]


def _S_args(model: FieldModel):
    S = model.symmetry_generator
    if S is None:
        return np.zeros((3, 3)), False
    return np.ascontiguousarray(S), True


def compute_sample(ms: MidpointState, model: FieldModel, h: float) -> ObservableSample:
    """Evaluate all observables at a midpoint state.

    ``I, xi, H_h, I_h`` are NaN where ``B(x_mid) = 0``; ``M`` is NaN when the
    model has no symmetry generator.  ``h = 0`` gives ``xi = 0`` and the
    unmodified limits ``H_h = E, I_h = I``.
    """
    out = np.empty(6)
    S, has_S = _S_args(model)
    x = np.ascontiguousarray(ms.x_mid, dtype=float)
    v = np.ascontiguousarray(ms.v_mid, dtype=float)
    observe_fn(model)(x, v, float(h), model.inv_eps, model.params, S, has_S, model.mscale, out)
    return ObservableSample(float(ms.t_mid), *map(float, out))


# ---------------------------------------------------------------------------
# standalone formulas


def energy(model: FieldModel, x, v) -> float:
    v = np.asarray(v, float)
    return 0.5 * float(v @ v) + model.scalar_potential(x)


def momentum(model: FieldModel, x, v) -> float:
    S = model.symmetry_generator
    if S is None:
        raise ValueError("model has no symmetry generator")
    x = np.asarray(x, float)
    return float((np.asarray(v, float) + model.mscale * model.vector_potential(x)) @ (S @ x))


def magnetic_moment(model: FieldModel, x, v) -> float:
    b = model.magnetic_field(x)
    bn = np.linalg.norm(b)
    if bn == 0:
        raise ValueError("magnetic moment undefined where B = 0")
    vperp = np.cross(v, b) / bn
    return 0.5 * float(vperp @ vperp) / bn


def gyration_angle(model: FieldModel, x, h: float) -> float:
    """Discrete gyration angle per step ``xi = 2 arctan(h|B(x)| / (2 eps))``.

    This is the phase advance per step of the oscillatory component of the
    numerical solution: ``tan(xi / 2) = (h / 2 eps) |B|``.
    """
    return 2.0 * math.atan(abs(h) * np.linalg.norm(model.magnetic_field(x)) / (2.0 * model.eps))


def energy_correction_factor(xi):
    """``xi csc xi - 1``; tends to ``xi^2 / 6`` as ``xi -> 0``."""
    xi = np.asarray(xi, dtype=float)
    return xi / np.sin(xi) - 1.0


def moment_correction_factor(xi):
    """``sec^2(xi / 2) - 1 = tan^2(xi / 2)``; tends to ``xi^2 / 4``."""
    return np.tan(0.5 * np.asarray(xi, dtype=float)) ** 2


@dataclass
class ExpansionReport:
    xi: np.ndarray
    energy_ratio: np.ndarray  # (xi csc xi - 1) / (xi^2 / 6)
    moment_ratio: np.ndarray  # (sec^2(xi/2) - 1) / (xi^2 / 4)
    within_bound: np.ndarray
    closer_than_varm: bool

    @property
    def passed(self) -> bool:
        return bool(np.all(self.within_bound)) and self.closer_than_varm


def modified_invariant_expansion_check(xi_values) -> ExpansionReport:
    """Check the small-``xi`` expansions of the modified invariants.

    The ratios to their leading Taylor terms must deviate from one by at most
    ``xi^2 / 2``, and the leading coefficients of the midpoint two-step
    method (1/6, 1/4) must be strictly below the grid-point variational
    method's (5/12, 1/2).
    """
    xi = np.asarray(xi_values, dtype=float)
    if np.any(xi <= 0) or np.any(xi > 0.5):
        raise ValueError("xi values must lie in (0, 0.5]")
    er = energy_correction_factor(xi) / (TSM2_COEFFS["energy"] * xi**2)
    mr = moment_correction_factor(xi) / (TSM2_COEFFS["moment"] * xi**2)
    bound = 0.5 * xi**2
    ok = (np.abs(er - 1.0) <= bound) & (np.abs(mr - 1.0) <= bound)
    closer = (TSM2_COEFFS["energy"] < VARM_COEFFS["energy"]
              and TSM2_COEFFS["moment"] < VARM_COEFFS["moment"])
    return ExpansionReport(xi, er, mr, ok, closer)
