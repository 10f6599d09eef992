"""``ppde``: command-line runs with JSON reports, CSV traces and CI exit codes.

Exit codes: 0 when every assertion passes, 1 when one fails, 2 on usage or
dispatch errors (bad flags, bad specs, budget rejections).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, parse_config
from .expectation import Payoff, dpp_check, inf_expectation, pure_stopping_sup, sup_expectation
from .lattice import ControlGrid
from .pathspace import Jet, Path, PathFunctional, SpaceTimePoint, path_from_csv, path_from_json, phi_batch

__all__ = ["RunReport", "main", "functional_from_spec", "payoff_from_spec", "run"]

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    """Bad command-line input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# reports


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


@dataclass
class RunReport:
    """Command echo, config digest and assertion records ``(name, value, tolerance, pass)``."""

    command: list
    config_digest: str
    records: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    wall_time: float | None = None

    def add(self, name, value, tolerance, passed):
        self.records.append({"name": name, "value": value, "tolerance": tolerance, "pass": bool(passed)})

    @property
    def passed(self):
        return all(r["pass"] for r in self.records)

    def to_json(self):
        body = {"command": self.command, "config_digest": self.config_digest, "pass": self.passed,
                "records": self.records, "details": self.details}
        if self.wall_time is not None:
            body["wall_time"] = self.wall_time
        return json.dumps(_clean(body), sort_keys=True, indent=2)


def _write_csv(out_dir, name, header, rows):
    if not out_dir:
        return None
    os.makedirs(out_dir, exist_ok=True)
    target = os.path.join(out_dir, name)
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return target


# ---------------------------------------------------------------------------
# specs


def _floats(args, n, spec):
    try:
        vals = [float(a) for a in args]
    except ValueError:
        raise UsageError(f"bad numeric argument in {spec!r}") from None
    if len(vals) > n:
        raise UsageError(f"too many arguments in {spec!r}")
    return vals


def _wt(t_idx, paths):
    return paths[np.arange(len(t_idx)), t_idx, 0]


def functional_from_spec(spec: str, cfg: ExperimentConfig) -> PathFunctional:
    """Path functionals by name.

    ``heat[:c[:eps]]``   ``w_t^2 + c (T-t) + eps w_t (T-t)``
    ``nonsolution``      ``heat`` plus ``0.5 (T-t)``
    ``const:k``          the constant ``k``
    ``phi:a:b:c``        test monomial ``a t + b w_t + c w_t^2 / 2``
    ``ref:<xi>[:shift]`` heat reference for terminal ``xi`` (square, linear, const, bounded), plus ``shift``
    """
    from .experiments import heat_reference_functional, heat_solution, terminal_functional

    name, *args = spec.split(":")
    T = cfg.T
    if name == "heat":
        v = _floats(args, 2, spec)
        c, eps = (v + [1.0, 0.0][len(v):])[:2]
        return heat_solution(T, c, eps)
    if name == "nonsolution":
        return heat_solution(T, 1.5)
    if name == "const":
        (k,) = _floats(args, 1, spec) or [0.0]
        return PathFunctional.constant(k)
    if name == "phi":
        v = _floats(args, 3, spec)
        if len(v) != 3:
            raise UsageError("phi needs a:b:c")
        jet = Jet(*v)
        return PathFunctional(lambda t, p, dt: phi_batch(jet, t, p, dt), f"phi({v[0]:g},{v[1]:g},{v[2]:g})")
    if name == "ref":
        if not args:
            raise UsageError("ref needs a terminal functional name")
        try:
            xi = terminal_functional(args[0])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        (shift,) = _floats(args[1:], 1, spec) or [0.0]
        ref = heat_reference_functional(xi, cfg.L, cfg.N, cfg.dt, cfg.budget())
        return ref if shift == 0.0 else ref + shift
    raise UsageError(f"unknown functional spec {spec!r}")


def payoff_from_spec(spec: str, delta=None) -> Payoff:
    """Payoffs of the stop index and the path.

    ``const:k``, ``time`` (stop time), ``w`` (``w`` at the stop), ``negw``, ``w2``, ``absw``,
    ``maxw`` (running maximum), ``poly:a:b:c`` (``a + b w + c w^2``).
    """
    name, *args = spec.split(":")

    def runmax(t, p, dt):
        idx = np.arange(p.shape[1])[None, :] <= np.asarray(t)[:, None]
        return np.max(np.where(idx, p[:, :, 0], -np.inf), axis=1)

    simple = {
        "time": lambda t, p, dt: np.asarray(t, dtype=float) * dt,
        "w": lambda t, p, dt: _wt(t, p),
        "negw": lambda t, p, dt: -_wt(t, p),
        "w2": lambda t, p, dt: _wt(t, p) ** 2,
        "absw": lambda t, p, dt: np.abs(_wt(t, p)),
        "maxw": runmax,
    }
    if name in simple:
        if args:
            raise UsageError(f"{name} takes no arguments")
        return Payoff(simple[name], delta, name=name)
    if name == "const":
        (k,) = _floats(args, 1, spec) or [0.0]
        return Payoff(lambda t, p, dt: np.full(len(p), k), delta, name=f"const({k:g})")
    if name == "poly":
        v = _floats(args, 3, spec)
        a, b, c = (v + [0.0, 0.0, 0.0][len(v):])[:3]
        return Payoff(lambda t, p, dt: a + b * _wt(t, p) + c * _wt(t, p) ** 2, delta, name=f"poly({spec})")
    raise UsageError(f"unknown payoff spec {spec!r}")


def _theta_from_file(path, t_index=None) -> SpaceTimePoint:
    with open(path) as fh:
        text = fh.read()
    obj = None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        pass
    if obj is None:
        p = path_from_csv(text)
        return SpaceTimePoint(p.N if t_index is None else t_index, p)
    if "path" in obj:
        p = path_from_json(json.dumps(obj["path"]))
        return SpaceTimePoint(obj.get("t_index", p.N) if t_index is None else t_index, p)
    p = path_from_json(text)
    return SpaceTimePoint(p.N if t_index is None else t_index, p)


def _ladder(text):
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad n-ladder {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError("n-ladder entries must be positive")
    return vals


# ---------------------------------------------------------------------------
# commands


TREE_STEPS = 4  # default depth for the full-tree commands


def _grid(cfg):
    return ControlGrid.symmetric(cfg.L, cfg.dt, cfg.n_drift, cfg.n_var, cfg.m)


def _cmd_expectation(a, cfg, rep):
    cfg = cfg.replace(**{k: v for k, v in (("L", a.L), ("N", a.N)) if v is not None})
    rep.config_digest = cfg.digest()
    f = payoff_from_spec(a.payoff, a.delta)
    grid = _grid(cfg)
    if a.mode == "pure-stop":
        value = pure_stopping_sup(f, grid, cfg.N, budget=cfg.budget())
        digest = None
    else:
        op = sup_expectation if a.mode == "sup" else inf_expectation
        value, policy = op(f, grid, cfg.N, cfg.budget())
        digest = policy.digest()
    rep.details = {"value": value, "policy_digest": digest, "mode": a.mode, "payoff": a.payoff, "grid": repr(grid)}
    rep.add("value", value, 0.0, math.isfinite(value))


def _cmd_dpp(a, cfg, rep):
    cfg = cfg.replace(**{k: v for k, v in (("L", a.L), ("N", a.N)) if v is not None})
    rep.config_digest = cfg.digest()
    tau = cfg.N // 2 if a.tau is None else a.tau
    r = dpp_check(payoff_from_spec(a.payoff, a.delta), _grid(cfg), cfg.N, tau, tol=1e-12 * cfg.tol_scale,
                  budget=cfg.budget())
    rep.details = r.to_dict()
    rep.add("dpp_gap", r.gap, r.tolerance, r.gap <= r.tolerance)
    rep.add("stop_node_gap", r.as_gap, r.tolerance, r.as_gap <= r.tolerance)


def _cmd_jet(a, cfg, rep):
    from .viscosity import jet_test_batch

    theta = _theta_from_file(a.theta, a.t_index) if a.theta else SpaceTimePoint(0, Path.zeros(cfg.N, cfg.dt, cfg.m))
    u = functional_from_spec(a.u, cfg)
    v = _floats(a.jet.split(","), 3, a.jet)
    if len(v) != 3:
        raise UsageError("--jet needs a,b,c")
    tol = 1e-9 * cfg.tol_scale
    r = jet_test_batch(u, theta, [Jet(*v)], a.delta, a.role, L=cfg.L, tol=tol, budget=cfg.budget())[0]
    rep.details = r.to_dict()
    want = {"any": None, "member": True, "non-member": False}[a.expect]
    rep.add("member", r.member, tol, want is None or r.member == want)


def _cmd_check(a, cfg, rep):
    from .experiments import sample_points
    from .viscosity import check_subsolution, check_supersolution, default_jet_grid

    u = functional_from_spec(a.u, cfg)
    G = _G(a.G, cfg)
    pts = sample_points(cfg)
    fn = check_subsolution if a.role == "sub" else check_supersolution
    r = fn(u, G, pts, lambda uu, th: default_jet_grid(uu, th, cfg.jet_step), cfg.delta_grid, L=cfg.L,
           tol_residual=5 * cfg.dt * cfg.tol_scale, budget=cfg.budget())
    rep.details = {"role": a.role, "u": a.u, "G": G.name, "worst": r.worst, "n_members": r.n_members,
                   "points": r.rows}
    rep.add(f"{a.role}_worst_violation", r.worst, r.tolerance, r.passed)
    head, rows = r.csv_rows()
    _write_csv(a.out, f"check_{a.role}.csv", head, rows)


def _G(name, cfg):
    from .viscosity import g_registry

    try:
        return g_registry(name, eps=cfg.eps) if name == "heat_drift" else g_registry(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _comparison_records(r, rep, out, name="comparison.csv"):
    for t in r.traces:
        rep.add(f"min_gap[n={t['n']:g}]", t["min_gap"], r.tolerance, t["min_gap"] >= -r.tolerance)
    rep.add("terminal_ordered", r.terminal_ordered, 0.0, r.terminal_ordered)
    _write_csv(out, name, ["n", "min_gap", "rho", "max_u_lift", "max_v_drop"],
               [[t["n"], t["min_gap"], t["rho"], t["max_u_lift"], t["max_v_drop"]] for t in r.traces])


def _cmd_comparison(a, cfg, rep):
    from .regularization import comparison_pipeline, reference_tree_points

    if a.n_ladder:
        cfg = cfg.replace(n_ladder=_ladder(a.n_ladder))
        rep.config_digest = cfg.digest()
    S = reference_tree_points(ControlGrid(cfg.L, cfg.dt, [0.0], [0.0, cfg.L]), cfg.N)
    u, v = functional_from_spec(a.u, cfg), functional_from_spec(a.v, cfg)
    r = comparison_pipeline(u, v, _G(a.G, cfg), S, S, cfg.n_ladder, p=cfg.p, tol=5 * cfg.dt * cfg.tol_scale)
    rep.details = r.to_dict()
    _comparison_records(r, rep, a.out)


def _cmd_hilbert(a, cfg, rep):
    from .experiments import hilbert_suite

    if a.refinements < 1:
        raise UsageError("--refinements must be at least 1")
    res = hilbert_suite(a.suite, a.refinements, tol_scale=cfg.tol_scale)
    for rec in res["records"]:
        rep.add(*rec)
    rep.details = {"suite": a.suite, "rows": res["rows"]}
    _write_csv(a.out, f"hilbert_{a.suite}.csv", ["dt", "error"], res["rows"])


def _cmd_experiment(a, cfg, rep):
    from . import experiments as ex
    from .viscosity import heat_G

    tol = 5 * cfg.dt * cfg.tol_scale
    if a.name == "heat":
        ref = ex.heat_reference_functional(ex.terminal_functional(cfg.terminal), cfg.L, cfg.N, cfg.dt, cfg.budget())
        G = heat_G(cfg.L, cfg.m)
        good = ex.viscosity_verify(ref, G, cfg)
        bad = ex.viscosity_verify(ref + PathFunctional(lambda t, p, dt: 0.5 * (cfg.T - t * dt)), G, cfg)
        rep.add("reference_sub", good.sub.worst, tol, good.sub.passed)
        rep.add("reference_super", good.sup.worst, tol, good.sup.passed)
        # the perturbation is a strict supersolution, so it is rejected by the sub check
        rep.add("perturbed_rejected", max(bad.sub.worst, bad.sup.worst), tol, not bad.passed)
        rep.details = {"reference": good.to_dict(), "perturbed": bad.to_dict()}
        _write_csv(a.out, "heat_sub.csv", *good.sub.csv_rows())
        _write_csv(a.out, "heat_super.csv", *good.sup.csv_rows())
    elif a.name == "perron":
        pts = ex.sample_points(cfg)
        fam = ex.affine_minorants(np.linspace(-1.0, 1.0, 9), cfg.T)
        upper = ex.heat_solution(cfg.T, 1.0)
        _, r = ex.perron_envelope(fam, pts, heat_G(1.0, cfg.m), upper=upper, cfg=cfg)
        rep.add("members_subsolutions", sum(r.members_checked), len(r.members_checked), all(r.members_checked))
        rep.add("dominates_members", r.dominates_members, 0.0, r.dominates_members)
        rep.add("below_upper_barrier", r.below_upper, 0.0, r.below_upper)
        rep.add("envelope_sub", r.sub.worst, r.sub.tolerance, r.sub.passed)
        rep.details = r.to_dict()
        rep.details["envelope_super_passed"] = r.sup.passed
        rep.details["comparison_surrogate"] = "sup/inf-convolution pipeline on the reference tree"
    elif a.name == "stability":
        r = ex.stability_experiment(cfg)
        for t in r.traces:
            ok = t["found"] and t["gap"] <= 2.0 / t["n"]
            rep.add(f"trace_gap[n={t['n']}]", t.get("gap", math.nan), 2.0 / t["n"], ok)
        rep.add("limit_residual", r.limit_residual, r.tolerance, r.limit_residual <= r.tolerance)
        rep.details = r.to_dict()
        _write_csv(a.out, "stability.csv", ["n", "alpha_n", "gap", "residual_n"],
                   [[t["n"], t.get("alpha_n", math.nan), t.get("gap", math.nan), t.get("residual_n", math.nan)]
                    for t in r.traces])
    elif a.name == "comparison":
        r = ex.comparison_study(cfg)
        rep.details = r.to_dict()
        _comparison_records(r, rep, a.out)
    else:  # argparse restricts the choices
        raise UsageError(f"unknown experiment {a.name!r}")


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style experiment configuration file")
    common.add_argument("--out", help="directory for CSV traces")
    common.add_argument("--seed", type=int, help="sample-point seed (overrides the config)")
    common.add_argument("--tol-scale", type=float, help="multiplier applied to every tolerance")
    common.add_argument("--timing", action="store_true", help="include wall time (breaks byte-identical reports)")

    ap = _Parser(prog="ppde", description=__doc__.split("\n")[0],
                 epilog="PPDE_BUDGET in the environment overrides the tree node budget.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    e = sub.add_parser("expectation", parents=[common], help="upper/lower expectation on the scenario tree")
    e.add_argument("--payoff", required=True, help="payoff spec: const:k, time, w, negw, w2, absw, maxw, poly:a:b:c")
    e.add_argument("--L", type=float)
    e.add_argument("--N", type=int, default=TREE_STEPS,
                   help=f"tree depth (default {TREE_STEPS}; full trees at the config N usually exceed the node budget)")
    e.add_argument("--delta", type=float, help="localization level (payoff read at the hitting time)")
    e.add_argument("--mode", choices=["sup", "inf", "pure-stop"], default="sup")

    d = sub.add_parser("dpp-check", parents=[common], help="dynamic programming identities")
    d.add_argument("--payoff", required=True)
    d.add_argument("--L", type=float)
    d.add_argument("--N", type=int, default=TREE_STEPS, help=f"tree depth (default {TREE_STEPS})")
    d.add_argument("--delta", type=float)
    d.add_argument("--tau", type=int, help="intermediate time index (default N // 2)")

    j = sub.add_parser("jet-check", parents=[common], help="membership of a jet")
    j.add_argument("--u", required=True, help="functional spec: heat[:c[:eps]], nonsolution, const:k, phi:a:b:c, "
                                              "ref:<xi>[:shift]")
    j.add_argument("--theta", help="path file (JSON or CSV); default: the zero path at time 0")
    j.add_argument("--t-index", type=int)
    j.add_argument("--jet", required=True, help="a,b,c")
    j.add_argument("--delta", type=float, default=0.3)
    j.add_argument("--role", choices=["sub", "super"], default="sub")
    j.add_argument("--expect", choices=["any", "member", "non-member"], default="any")

    c = sub.add_parser("check", parents=[common], help="sub- or supersolution check on sample points")
    c.add_argument("--role", choices=["sub", "super"], required=True)
    c.add_argument("--u", required=True)
    c.add_argument("--G", default="heat", help="zero, heat, heat_drift")

    cm = sub.add_parser("comparison", parents=[common], help="regularize and compare two functionals")
    cm.add_argument("--G", default="heat")
    cm.add_argument("--u", required=True)
    cm.add_argument("--v", required=True)
    cm.add_argument("--n-ladder", help="comma separated, e.g. 2,5,10,20")

    h = sub.add_parser("hilbert-check", parents=[common], help="lifted-state numerics")
    h.add_argument("--suite", choices=["resolvent", "semigroup", "bnorm", "conv"], required=True)
    h.add_argument("--refinements", type=int, default=3)

    x = sub.add_parser("experiment", parents=[common], help="assembled experiments")
    x.add_argument("--name", choices=["heat", "perron", "stability", "comparison"], required=True)
    return ap


HANDLERS = {"expectation": _cmd_expectation, "dpp-check": _cmd_dpp, "jet-check": _cmd_jet, "check": _cmd_check,
            "comparison": _cmd_comparison, "hilbert-check": _cmd_hilbert, "experiment": _cmd_experiment}


def _load_config(a):
    cfg = ExperimentConfig()
    if a.config:
        try:
            with open(a.config) as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    kw = {}
    if a.seed is not None:
        kw["sample_seed"] = a.seed
    if a.tol_scale is not None:
        kw["tol_scale"] = a.tol_scale
    return cfg.replace(**kw) if kw else cfg


def run(argv) -> tuple[RunReport | None, int]:
    """Parse ``argv``, dispatch, and return the report with its exit code."""
    argv = list(argv)
    try:
        a = build_parser().parse_args(argv)
        if a.command is None:
            raise UsageError("missing command; see --help")
        cfg = _load_config(a)
        rep = RunReport(argv, cfg.digest())
        start = time.perf_counter()
        HANDLERS[a.command](a, cfg, rep)
        if a.timing:
            rep.wall_time = time.perf_counter() - start
    except (ValueError, OSError) as exc:  # usage, config, budget and spec errors
        print(f"ppde: error: {exc}", file=sys.stderr)
        return None, EXIT_USAGE
    return rep, EXIT_PASS if rep.passed else EXIT_FAIL


def main(argv=None) -> int:
    try:
        rep, code = run(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if rep is not None:
        print(rep.to_json())
    return code


if __name__ == "__main__":
    sys.exit(main())
