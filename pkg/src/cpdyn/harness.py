"""Scenario runner, drift metrics, convergence studies and method comparison."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import integrators as itg
from .fields import BuiltinFieldId, FieldModel, make_builtin
from .integrators import MethodId, SolverStats, StarterStrategy
from .observables import ObservableSample, _S_args
from .solvers import SolverSettings

MAX_STORED_SAMPLES = 100_000
DRIFT_QUANTITIES = ("E", "M", "I", "Hh", "Ih")
SAMPLE_COLUMNS = ("t", "x1", "x2", "x3", "v1", "v2", "v3", "E", "M", "I", "xi", "Hh", "Ih")

BENCH_X0 = (0.0, 1.0, 0.1)
BENCH_V0 = (0.09, 0.05, 0.20)


class ScenarioError(ValueError):
    """Invalid or inconsistent scenario."""


@dataclass(frozen=True)
class FieldSpec:
    """A builtin field id plus its parameters (``b``, ``Q``, ``q``, ``r2_floor``)."""

    id: BuiltinFieldId = BuiltinFieldId.EXPERIMENT_ROTSYM
    params: tuple = ()

    @classmethod
    def of(cls, field_id, **params) -> "FieldSpec":
        items = tuple(sorted((k, _freeze(v)) for k, v in params.items() if v is not None))
        return cls(BuiltinFieldId.parse(field_id), items)

    def build(self, eps: float, momentum_scale=None) -> FieldModel:
        kw = {k: (np.array(v) if isinstance(v, tuple) else v) for k, v in self.params}
        return make_builtin(self.id, eps, momentum_scale=momentum_scale, **kw)


def _freeze(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(float(a) for a in np.asarray(v, dtype=float).ravel())
    return float(v)


@dataclass(frozen=True)
class Scenario:
    field: FieldSpec = FieldSpec()
    eps: float = 1.0
    method: MethodId = MethodId.TSM2
    h: float = 0.1
    t_end: float = 10_000.0
    x0: tuple = BENCH_X0
    v0: tuple = BENCH_V0
    starter: Optional[StarterStrategy] = None
    settings: SolverSettings = SolverSettings()
    sample_every: Optional[int] = None
    quad_order: int = itg.DEFAULT_QUAD_ORDER
    momentum_scale: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "method", MethodId.parse(self.method))
        if self.starter is not None:
            object.__setattr__(self, "starter", StarterStrategy.parse(self.starter))
        object.__setattr__(self, "x0", _vec3(self.x0, "x0"))
        object.__setattr__(self, "v0", _vec3(self.v0, "v0"))

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.h))

    def validate(self) -> None:
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ScenarioError("h must be positive")
        if not (self.t_end > 0 and math.isfinite(self.t_end)):
            raise ScenarioError("t_end must be positive")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ScenarioError("eps must be positive")
        n = self.t_end / self.h
        if round(n) < 1 or abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ScenarioError(f"t_end = {self.t_end} is not a multiple of h = {self.h}")
        if self.sample_every is not None and self.sample_every < 1:
            raise ScenarioError("sample_every must be >= 1")
        if self.starter is not None and not self.method.two_step:
            raise ScenarioError(f"method {self.method.value} is one-step and takes no starter")

    def resolved_sample_every(self) -> int:
        if self.sample_every is not None:
            return int(self.sample_every)
        return max(1, math.ceil(self.nsteps / MAX_STORED_SAMPLES))

    def model(self) -> FieldModel:
        return self.field.build(self.eps, self.momentum_scale)

    def as_dict(self) -> Dict[str, str]:
        """Flat ``key -> value`` view used for scenario files and CSV metadata."""
        d = {"field.id": self.field.id.value}
        for k, v in self.field.params:
            d[f"field.{k}"] = _fmt(v)
        d.update({
            "eps": repr(float(self.eps)),
            "method": self.method.value,
            "h": repr(float(self.h)),
            "t_end": repr(float(self.t_end)),
            "x0": _fmt(self.x0),
            "v0": _fmt(self.v0),
            "starter": "" if self.starter is None else self.starter.value,
            "solver.tol": repr(self.settings.tol),
            "solver.max_iter": str(self.settings.max_iter),
            "solver.damping": repr(self.settings.damping),
            "sample_every": str(self.resolved_sample_every()),
            "quad_order": str(self.quad_order),
        })
        if self.momentum_scale is not None:
            d["momentum_scale"] = repr(float(self.momentum_scale))
        return d


def _vec3(v, name) -> tuple:
    arr = np.asarray(v, dtype=float).ravel()
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{name} must be a finite 3-vector")
    return tuple(float(a) for a in arr)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(a)) for a in v)
    return repr(float(v))


@dataclass
class QuantityDrift:
    initial: float
    max_abs_dev: float
    final_dev: float
    first_window_dev: float
    last_window_dev: float

    @property
    def trend_ratio(self) -> float:
        """Last-window over first-window drift; near or below 1 means no growth."""
        if self.first_window_dev == 0:
            return 0.0 if self.last_window_dev == 0 else math.inf
        return self.last_window_dev / self.first_window_dev


@dataclass
class SampleTable:
    """Decimated midpoint samples as columns ``SAMPLE_COLUMNS``."""

    data: np.ndarray

    def __len__(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, SAMPLE_COLUMNS.index(name)]

    @property
    def t(self) -> np.ndarray:
        return self.data[:, 0]

    def __iter__(self) -> Iterator[ObservableSample]:
        for row in self.data:
            yield ObservableSample(*map(float, row[[0, 7, 8, 9, 10, 11, 12]]))

    def __getitem__(self, k) -> ObservableSample:
        row = self.data[k]
        return ObservableSample(*map(float, row[[0, 7, 8, 9, 10, 11, 12]]))


@dataclass
class RunOutput:
    scenario: Scenario
    samples: SampleTable
    drift: Dict[str, QuantityDrift]
    solver_stats: SolverStats
    wall_time: float
    final_state: itg.ParticleState
    sample_every: int


def run_scenario(sc: Scenario, model: Optional[FieldModel] = None) -> RunOutput:
    """Integrate a scenario and collect midpoint observables.

    Drift is measured against the first midpoint sample over every step; only
    every ``sample_every``-th midpoint is stored.  Raises
    :class:`~cpdyn.solvers.NonConvergence` or
    :class:`~cpdyn.fields.SingularFieldError` with the failing step index.
    """
    sc.validate()
    model = sc.model() if model is None else model
    method = sc.method
    st = sc.settings
    N = sc.nsteps
    every = sc.resolved_sample_every()
    nwin = max(1, math.ceil(0.1 * N))
    t0 = time.perf_counter()

    x0 = np.array(sc.x0)
    v0 = np.array(sc.v0)
    x1, v1 = itg.initial_pair(method, model, sc.h, x0, v0, sc.starter, st, sc.quad_order)
    nodes, weights = itg._quadrature(method, sc.quad_order)
    S, has_S = _S_args(model)
    samples = np.full(((N - 1) // every + 1, len(SAMPLE_COLUMNS)), np.nan)
    drift = np.zeros((len(DRIFT_QUANTITIES), 5))
    final = np.full(6, np.nan)
    stats = np.zeros(4)
    status, n = itg.run_loop(method, model, N, sc.h, x0, v0, x1, v1, S, has_S, st,
                             nodes, weights, every, samples, drift, nwin, final, stats)
    itg._raise_status(method, status, n, stats, final[:3])

    metrics = {}
    for q, name in enumerate(DRIFT_QUANTITIES):
        row = drift[q]
        if math.isnan(row[0]):
            row = np.full(5, np.nan)
        metrics[name] = QuantityDrift(*map(float, row))
    return RunOutput(
        scenario=sc,
        samples=SampleTable(samples),
        drift=metrics,
        solver_stats=itg._stats(stats, N),
        wall_time=time.perf_counter() - t0,
        final_state=itg.ParticleState(N * sc.h, final[:3], final[3:]),
        sample_every=every,
    )


def endpoint_samples(sc: Scenario, model: Optional[FieldModel] = None) -> SampleTable:
    """Diagnostic series of the observables at grid states ``(x_n, v_n)``.

    Rows are ``n = 0, every, 2*every, ...`` with ``t = n*h``.  The whole
    trajectory is held in memory, so this is meant for moderate runs.
    """
    from .observables import observe_fn

    sc.validate()
    model = sc.model() if model is None else model
    every = sc.resolved_sample_every()
    tr = itg.integrate(sc.method, model, sc.h, sc.nsteps, sc.x0, sc.v0, starter=sc.starter,
                       settings=sc.settings, quad_order=sc.quad_order)
    idx = np.arange(0, sc.nsteps + 1, every)
    S, has_S = _S_args(model)
    obs = observe_fn(model)
    data = np.empty((idx.size, len(SAMPLE_COLUMNS)))
    buf = np.empty(6)
    for row, n in enumerate(idx):
        x = np.ascontiguousarray(tr.x[n])
        v = np.ascontiguousarray(tr.v[n])
        obs(x, v, sc.h, model.inv_eps, model.params, S, has_S, model.mscale, buf)
        data[row, 0] = n * sc.h
        data[row, 1:4] = x
        data[row, 4:7] = v
        data[row, 7:] = buf
    return SampleTable(data)


# ---------------------------------------------------------------------------
# convergence


@dataclass
class ConvergenceTable:
    method: MethodId
    h: np.ndarray
    errors: np.ndarray
    slope: float
    t_short: float

    def rows(self):
        return list(zip(self.h.tolist(), self.errors.tolist()))

    def order_within(self, lo: float, hi: float) -> bool:
        return bool(lo <= self.slope <= hi)


def fit_order(h_list, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    h = np.asarray(h_list, dtype=float)
    e = np.asarray(errors, dtype=float)
    if np.any(e <= 0):
        # an exact method has no measurable order
        return math.nan
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def convergence_study(sc: Scenario, h_list: Sequence[float], t_short: float = 10.0,
                      integrate: Optional[Callable[[float], np.ndarray]] = None,
                      h_ref: Optional[float] = None) -> ConvergenceTable:
    """Global position error at ``t_short`` against a fine RK4 reference.

    ``integrate`` overrides the stepper: it maps ``h`` to the position at
    ``t_short``.  The reference uses ``h_ref`` (default ``min(h_list)/20``).
    """
    hs = np.asarray(h_list, dtype=float)
    if hs.size < 2 or np.any(np.diff(hs) >= 0):
        raise ScenarioError("h_list must hold at least two strictly decreasing steps")
    model = sc.model()
    s0 = itg.ParticleState(0.0, sc.x0, sc.v0)
    ref = itg.reference_solve(s0, h_ref or hs.min() / 20.0, t_short, model)

    def default_integrate(h):
        n = int(round(t_short / h))
        if abs(n * h - t_short) > 1e-9 * t_short:
            raise ScenarioError(f"t_short = {t_short} is not a multiple of h = {h}")
        tr = itg.integrate(sc.method, model, h, n, sc.x0, sc.v0, starter=sc.starter,
                           settings=sc.settings, quad_order=sc.quad_order)
        return tr.x[-1]

    run = integrate or default_integrate
    errors = np.array([np.linalg.norm(np.asarray(run(h)) - ref.x) for h in hs])
    return ConvergenceTable(sc.method, hs, errors, fit_order(hs, errors), t_short)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    runs: Dict[MethodId, RunOutput] = field(default_factory=dict)

    def drift_rows(self) -> List[tuple]:
        return [(m.value, q, out.drift[q]) for m, out in self.runs.items() for q in DRIFT_QUANTITIES]


_SHARED = ("field", "eps", "h", "t_end", "x0", "v0")


def compare_methods(scenarios: Sequence[Scenario]) -> Comparison:
    """Run scenarios that differ only in method and align their drift metrics."""
    if not scenarios:
        raise ScenarioError("no scenarios to compare")
    first = scenarios[0]
    seen = set()
    for sc in scenarios:
        for attr in _SHARED:
            if getattr(sc, attr) != getattr(first, attr):
                raise ScenarioError(f"scenarios disagree on {attr}")
        if sc.method in seen:
            raise ScenarioError(f"method {sc.method.value} listed twice")
        seen.add(sc.method)
    return Comparison({sc.method: run_scenario(sc) for sc in scenarios})


def benchmark_scenario(method="tsm2", h: float = 0.1, eps: float = 1.0, t_end: float = 10_000.0,
                   **kw) -> Scenario:
    """The rotationally symmetric benchmark field with its standard initial data."""
    return Scenario(field=FieldSpec.of("experiment"), eps=eps, method=MethodId.parse(method),
                    h=h, t_end=t_end, **kw)


# ---------------------------------------------------------------------------
# quick verification suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def quick_verify(rng_seed: int = 0) -> List[CheckResult]:
    """Fast invariant checks run by ``cpdyn verify``."""
    from .fields import verify_consistency
    from .observables import modified_invariant_expansion_check
    from .solvers import solve_cross_linear

    rng = np.random.default_rng(rng_seed)
    results = []

    pts = rng.uniform(-2, 2, size=(200, 3))
    pts = pts[np.hypot(pts[:, 0], pts[:, 1]) >= 0.1][:100]
    for name, model in (
        ("experiment", make_builtin("experiment", 1.0)),
        ("constant", make_builtin("constant", 1.0, b=[0.3, -0.2, 1.0])),
        ("quadratic", make_builtin("quadratic", 1.0, b=[0, 0, 1], Q=np.diag([1.0, 2.0, 0.5]), q=[0.1, 0, 0])),
        ("free", make_builtin("free", 1.0)),
    ):
        rep = verify_consistency(model, pts, 1e-5, 1e-6)
        results.append(CheckResult(f"field consistency ({name})", rep.passed,
                                   f"curl {rep.max_curl_deviation:.2e}, grad {rep.max_grad_deviation:.2e}"))

    exp = make_builtin("experiment", 1.0)
    worst = 0.0
    for _ in range(20):
        x = rng.uniform(-1.5, 1.5, 3)
        if np.hypot(x[0], x[1]) < 0.3:
            continue
        s = itg.ParticleState(0.0, x, rng.uniform(-0.3, 0.3, 3))
        s1, _ = itg.tsm1_step(s, 0.1, exp)
        s2, _ = itg.tsm1_step(s1, -0.1, exp)
        worst = max(worst, float(np.linalg.norm(np.r_[s2.x - s.x, s2.v - s.v])))
    results.append(CheckResult("tsm1 symmetry", worst <= 1e-12, f"max |step(-h) step(h) - id| = {worst:.2e}"))

    cb = make_builtin("quadratic", 1.0, b=[0, 0, 1], Q=np.eye(3))
    t1 = itg.integrate("tsm1", cb, 0.1, 1000, BENCH_X0, BENCH_V0)
    t2 = itg.integrate("tsm2", cb, 0.1, 1000, BENCH_X0, BENCH_V0, starter="tsm1")
    dev = float(np.abs(t1.x - t2.x).max())
    results.append(CheckResult("constant-B reduction tsm2 = tsm1", dev <= 1e-11, f"max |dx| = {dev:.2e}"))

    for eps in (1.0, 0.01):
        m = make_builtin("quadratic", eps, b=[0, 0, 1], Q=np.eye(3))
        tr = itg.integrate("tsm1", m, 0.1, 10_000, BENCH_X0, BENCH_V0)
        E = 0.5 * np.sum(tr.v**2, axis=1) + 0.5 * np.sum(tr.x**2, axis=1)
        dE = float(np.abs(E - E[0]).max())
        results.append(CheckResult(f"quadratic-U exact energy (eps={eps})", dE <= 1e-10, f"max |dE| = {dE:.2e}"))

    worst = 0.0
    for _ in range(1000):
        t = rng.uniform(-2, 2, 3)
        r = rng.uniform(-2, 2, 3)
        v = solve_cross_linear(t, r)
        worst = max(worst, float(np.linalg.norm(v + np.cross(t, v) - r) / (1 + np.linalg.norm(r))))
    results.append(CheckResult("cross-linear round trip", worst <= 1e-14, f"max scaled residual {worst:.2e}"))

    rep = modified_invariant_expansion_check([1e-2, 0.05, 0.1, 0.5])
    results.append(CheckResult("modified-invariant expansion", rep.passed,
                               f"ratios at xi=1e-2: {rep.energy_ratio[0]:.6f}, {rep.moment_ratio[0]:.6f}"))
    return results
