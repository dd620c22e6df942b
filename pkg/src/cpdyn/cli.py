"""Command line interface: ``cpdyn run | converge | compare | verify``.

Scenario parameters come from an optional ``key = value`` file (dotted keys
such as ``solver.tol`` or ``field.b``) overridden by command line flags.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .fields import BuiltinFieldId, FieldError, SingularFieldError
from .harness import (DRIFT_QUANTITIES, FieldSpec, RunOutput, Scenario, ScenarioError,
                      compare_methods, convergence_study, quick_verify, run_scenario)
from .integrators import MethodId, StarterStrategy
from .solvers import NonConvergence, SolverSettings

log = logging.getLogger("cpdyn")

EXIT_OK = 0
EXIT_SCENARIO = 1
EXIT_SOLVER = 2
EXIT_VERIFY = 3
EXIT_USAGE = 64

# flag dest -> scenario key
FLAG_KEYS = {
    "field": "field.id",
    "field_b": "field.b",
    "field_Q": "field.Q",
    "field_q": "field.q",
    "r2_floor": "field.r2_floor",
    "eps": "eps",
    "method": "method",
    "h": "h",
    "t_end": "t_end",
    "x0": "x0",
    "v0": "v0",
    "starter": "starter",
    "solver_tol": "solver.tol",
    "solver_max_iter": "solver.max_iter",
    "solver_damping": "solver.damping",
    "sample_every": "sample_every",
    "quad_order": "quad_order",
    "momentum_scale": "momentum_scale",
}
KNOWN_KEYS = set(FLAG_KEYS.values()) | {"field"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# scenario assembly


def read_scenario_file(path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KNOWN_KEYS:
            raise ScenarioError(f"{path}:{n}: unknown key {k!r}")
        out["field.id" if k == "field" else k] = v
    return out


def _floats(s: str, key: str) -> List[float]:
    try:
        return [float(a) for a in s.replace(";", ",").split(",") if a.strip()]
    except ValueError as exc:
        raise ScenarioError(f"{key}: cannot parse {s!r} as numbers") from exc


def _num(s: str, key: str, kind=float):
    try:
        return kind(s)
    except ValueError as exc:
        raise ScenarioError(f"{key}: cannot parse {s!r}") from exc


def scenario_from_mapping(m: Dict[str, str]) -> Scenario:
    """Build a :class:`Scenario` from flat string values; absent keys keep defaults."""
    unknown = set(m) - KNOWN_KEYS
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    fparams = {}
    for k in ("b", "Q", "q"):
        if m.get(f"field.{k}"):
            vals = _floats(m[f"field.{k}"], f"field.{k}")
            want = 9 if k == "Q" else 3
            if len(vals) != want:
                raise ScenarioError(f"field.{k} needs {want} numbers, got {len(vals)}")
            fparams[k] = np.reshape(vals, (3, 3)) if k == "Q" else vals
    if m.get("field.r2_floor"):
        fparams["r2_floor"] = _num(m["field.r2_floor"], "field.r2_floor")
    kw = {}
    try:
        kw["field"] = FieldSpec.of(m.get("field.id", "experiment"), **fparams)
        if "method" in m:
            kw["method"] = MethodId.parse(m["method"])
    except (ValueError, KeyError) as exc:
        raise ScenarioError(str(exc)) from exc
    for key in ("eps", "h", "t_end", "momentum_scale"):
        if m.get(key):
            kw[key] = _num(m[key], key)
    for key in ("x0", "v0"):
        if m.get(key):
            kw[key] = tuple(_floats(m[key], key))
    if m.get("starter"):
        kw["starter"] = m["starter"]
    if m.get("sample_every"):
        kw["sample_every"] = _num(m["sample_every"], "sample_every", int)
    if m.get("quad_order"):
        kw["quad_order"] = _num(m["quad_order"], "quad_order", int)
    sset = {}
    if m.get("solver.tol"):
        sset["tol"] = _num(m["solver.tol"], "solver.tol")
    if m.get("solver.max_iter"):
        sset["max_iter"] = _num(m["solver.max_iter"], "solver.max_iter", int)
    if m.get("solver.damping"):
        sset["damping"] = _num(m["solver.damping"], "solver.damping")
    try:
        kw["settings"] = SolverSettings(**sset)
        sc = Scenario(**kw)
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(str(exc)) from exc
    sc.validate()
    return sc


def merged_mapping(args) -> Dict[str, str]:
    m = read_scenario_file(args.scenario) if args.scenario else {}
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            m[key] = str(val)
    return m


def _out_dir(args) -> Path:
    d = Path(args.out or os.environ.get("CPDYN_OUT_DIR") or "cpdyn-out")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ScenarioError(f"cannot create output directory {d}: {exc}") from exc
    return d


# ---------------------------------------------------------------------------
# commands


def _print_drift(outputs: Dict[str, RunOutput]) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("run", "quantity", "max_abs_dev", "first_window_dev", "last_window_dev", "trend_ratio"))
    for label, out in outputs.items():
        for q in DRIFT_QUANTITIES:
            d = out.drift[q]
            w.writerow((label, q, f"{d.max_abs_dev:.6e}", f"{d.first_window_dev:.6e}",
                        f"{d.last_window_dev:.6e}", f"{d.trend_ratio:.4g}"))


def cmd_run(args) -> int:
    from .report import deviation_series, emit_csv, emit_drift_csv, emit_svg, metadata_lines

    sc = scenario_from_mapping(merged_mapping(args))
    out_dir = _out_dir(args)
    out = run_scenario(sc)
    emit_csv(out, out_dir / "series.csv")
    emit_drift_csv({sc.method.value: out}, out_dir / "drift.csv")
    quantities = [q for q in DRIFT_QUANTITIES if np.isfinite(out.drift[q].initial)]
    if not args.no_figures:
        from .plotting import QUANTITY_LABELS, drift_panels

        panels = [(QUANTITY_LABELS[q], {sc.method.value: deviation_series(out, q)}) for q in quantities]
        drift_panels(panels, out_dir / "drift.png")
    if args.svg:
        for q in quantities:
            emit_svg({sc.method.value: deviation_series(out, q)}, out_dir / f"drift_{q}.svg",
                     title=f"{q} deviation, h = {sc.h:g}", ylabel=q)
    if args.endpoints:
        from .harness import endpoint_samples
        from .report import write_series

        meta = metadata_lines(out) + ["samples = grid states (x_n, v_n), t = n*h"]
        write_series(endpoint_samples(sc).data, meta, out_dir / "endpoints.csv")
    _print_drift({sc.method.value: out})
    st = out.solver_stats
    log.info("steps %d, mean iterations %.2f, max residual %.2e, wall %.2fs",
             st.steps, st.mean_iterations, st.max_residual, out.wall_time)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import deviation_series, emit_csv, emit_drift_csv, emit_svg

    base = merged_mapping(args)
    methods = [MethodId.parse(s) for s in (args.methods or "tsm1,tsm2").split(",") if s.strip()]
    hs = _floats(base.get("h", "0.1"), "h")
    out_dir = _out_dir(args)
    outputs: Dict[str, RunOutput] = {}
    by_h = []
    for h in hs:
        scs = []
        for m in methods:
            mm = dict(base, h=repr(h), method=m.value)
            if not m.two_step:
                mm.pop("starter", None)
            scs.append(scenario_from_mapping(mm))
        comp = compare_methods(scs)
        by_h.append((h, comp))
        for m, out in comp.runs.items():
            label = f"{m.value}/h={h:g}"
            outputs[label] = out
            emit_csv(out, out_dir / f"series_{m.value}_h{h:g}.csv")
    emit_drift_csv(outputs, out_dir / "drift.csv")
    quantities = [q for q in DRIFT_QUANTITIES
                  if all(np.isfinite(o.drift[q].initial) for o in outputs.values())]
    if not args.no_figures:
        from .plotting import QUANTITY_LABELS, drift_panels

        for q in quantities:
            panels = [(f"h = {h:g}", {m.value: deviation_series(o, q) for m, o in comp.runs.items()})
                      for h, comp in by_h]
            drift_panels(panels, out_dir / f"drift_{q}.png", ylabel=QUANTITY_LABELS[q])
    if args.svg:
        for q in quantities:
            for h, comp in by_h:
                emit_svg({m.value: deviation_series(o, q) for m, o in comp.runs.items()},
                         out_dir / f"drift_{q}_h{h:g}.svg", title=f"{q} deviation, h = {h:g}", ylabel=q)
    _print_drift(outputs)
    return EXIT_OK


def cmd_converge(args) -> int:
    base = merged_mapping(args)
    base.setdefault("t_end", repr(args.t_short))
    sc = scenario_from_mapping(base)
    hs = _floats(args.h_list, "h_list")
    table = convergence_study(sc, hs, t_short=args.t_short)
    out_dir = _out_dir(args)
    path = out_dir / "convergence.csv"
    with path.open("w", newline="") as fh:
        fh.write(f"# cpdyn {__version__}\n# method = {sc.method.value}\n")
        fh.write(f"# t_short = {args.t_short!r}\n# slope = {table.slope!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("h", "error"))
        for h, e in table.rows():
            w.writerow((repr(h), repr(e)))
    if not args.no_figures:
        import matplotlib.pyplot as plt

        from .plotting import RC

        with plt.rc_context(RC):
            fig, ax = plt.subplots(figsize=(4.0, 3.2))
            ax.loglog(table.h, table.errors, "o-", label=f"{sc.method.value} (slope {table.slope:.2f})")
            ax.set_xlabel("h")
            ax.set_ylabel(f"position error at t = {args.t_short:g}")
            ax.legend(frameon=False)
            fig.tight_layout()
            fig.savefig(out_dir / "convergence.png", dpi=150)
            plt.close(fig)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("h", "error"))
    for h, e in table.rows():
        w.writerow((f"{h:g}", f"{e:.6e}"))
    print(f"# slope = {table.slope:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = quick_verify()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ---------------------------------------------------------------------------


def _choice(parse, what):
    def conv(s):
        try:
            return parse(s).value
        except (ValueError, KeyError):
            raise argparse.ArgumentTypeError(f"unknown {what} {s!r}")
    conv.__name__ = what
    return conv


def _method_list(s):
    conv = _choice(MethodId.parse, "method")
    return ",".join(conv(a) for a in s.split(",") if a.strip())


def _scenario_args(p: argparse.ArgumentParser, h_help="stepsize") -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--scenario", metavar="FILE", help="key = value scenario file")
    g.add_argument("--field", type=_choice(BuiltinFieldId.parse, "field"), help="constant | experiment | quadratic | free")
    g.add_argument("--field-b", dest="field_b", metavar="B1,B2,B3")
    g.add_argument("--field-Q", dest="field_Q", metavar="Q11,...,Q33")
    g.add_argument("--field-q", dest="field_q", metavar="Q1,Q2,Q3")
    g.add_argument("--r2-floor", dest="r2_floor", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--method", type=_choice(MethodId.parse, "method"), help="tsm1 | tsm1-avf | tsm2 | boris | varm | rk4ref")
    g.add_argument("--h", help=h_help)
    g.add_argument("--t-end", dest="t_end", type=float)
    g.add_argument("--x0", metavar="X1,X2,X3")
    g.add_argument("--v0", metavar="V1,V2,V3")
    g.add_argument("--starter", type=_choice(StarterStrategy.parse, "starter"), help="tsm1 | reference")
    g.add_argument("--solver-tol", dest="solver_tol", type=float)
    g.add_argument("--solver-max-iter", dest="solver_max_iter", type=int)
    g.add_argument("--solver-damping", dest="solver_damping", type=float)
    g.add_argument("--sample-every", dest="sample_every", type=int)
    g.add_argument("--quad-order", dest="quad_order", type=int)
    g.add_argument("--momentum-scale", dest="momentum_scale", type=float)
    o = p.add_argument_group("output")
    o.add_argument("--out", metavar="DIR", help="output directory (default $CPDYN_OUT_DIR or ./cpdyn-out)")
    o.add_argument("--svg", action="store_true", help="also write standalone SVG charts")
    o.add_argument("--no-figures", action="store_true", help="skip matplotlib PNG figures")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpdyn", description="Charged-particle integrators with invariant drift reports.")
    p.add_argument("--version", action="version", version=f"cpdyn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    r = sub.add_parser("run", help="integrate one scenario")
    _scenario_args(r)
    r.add_argument("--endpoints", action="store_true",
                   help="also write endpoints.csv with observables at grid states (diagnostic)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several methods on one scenario")
    _scenario_args(c, h_help="stepsize or comma list of stepsizes")
    c.add_argument("--methods", type=_method_list, help="comma list, default tsm1,tsm2")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("converge", help="empirical order against an RK4 reference")
    _scenario_args(k)
    k.add_argument("--h-list", dest="h_list", default="0.1,0.05,0.025,0.0125")
    k.add_argument("--t-short", dest="t_short", type=float, default=10.0)
    k.set_defaults(func=cmd_converge)

    v = sub.add_parser("verify", help="fast invariant self-checks")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NonConvergence, SingularFieldError) as exc:
        print(f"cpdyn: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ScenarioError, FieldError, OSError) as exc:
        print(f"cpdyn: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
