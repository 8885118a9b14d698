"""Command-line workflows: riccati, gamma-search, simulate, rl, verify.

Each subcommand reads a JSON model file, runs the requested computation and
writes CSV data plus a plain-text report into the output directory.  Exit
status is 0 whenever the computation completed; infeasibility of a gamma
level is a reported result, not an error.  All randomness is derived from
--seed, so identical invocations produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import model as mdl
from . import riccati as ric
from . import rl as rlmod
from . import simulate as sim
from ._numutil import fmt17, min_eig

__all__ = ["main"]


def _load(path: str) -> mdl.MeanFieldJumpModel:
    if not os.path.exists(path):
        raise FileNotFoundError(f"model file not found: {path}")
    m = mdl.load_model(path)
    problems = mdl.validate(m)
    if problems:
        raise ValueError("invalid model file %s:\n  %s" % (path, "\n  ".join(problems)))
    return m


def _outdir(ns) -> str:
    os.makedirs(ns.out, exist_ok=True)
    return ns.out


def _write_report(path: str, lines: list[str]) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_riccati(ns) -> int:
    m = _load(ns.model)
    out = _outdir(ns)
    traj = ric.solve_gdre(m, ns.gamma, ns.dt, mode=ns.mode)
    ric.export_trajectory_csv(traj, os.path.join(out, "trajectory.csv"), include_det=True)
    lines = [
        f"model: {ns.model}",
        f"gamma: {fmt17(ns.gamma)}  dt: {fmt17(ns.dt)}  mode: {ns.mode}",
        f"grid points: {len(traj.grid)}",
        f"feasible: {traj.feasible}",
    ]
    if traj.failure is not None:
        t, name, me = traj.failure
        lines.append(f"first failure: t={fmt17(t)} block={name} min_eig={fmt17(me)}")
    else:
        margins = traj.sigma_margins.min(axis=0)
        for name, val in zip(ric.MARGIN_NAMES, margins):
            lines.append(f"min over grid of lambda_min({name}): {fmt17(val)}")
    _write_report(os.path.join(out, "report.txt"), lines)
    return 0


def cmd_gamma_search(ns) -> int:
    m = _load(ns.model)
    out = _outdir(ns)
    res = ric.gamma_threshold(m, ns.lo, ns.hi, ns.tol, ns.dt, mode=ns.mode)
    lines = [
        f"model: {ns.model}",
        f"bracket: [{fmt17(ns.lo)}, {fmt17(ns.hi)}]  tol: {fmt17(ns.tol)}",
        f"gamma_star: {fmt17(res.gamma_star)}",
        f"final bracket: [{fmt17(res.lo)}, {fmt17(res.hi)}]  width: {fmt17(res.hi - res.lo)}",
        "probes (gamma, feasible):",
    ]
    lines += [f"  {fmt17(g)} {ok}" for g, ok in res.probes]
    _write_report(os.path.join(out, "report.txt"), lines)
    return 0


def cmd_simulate(ns) -> int:
    m = _load(ns.model)
    out = _outdir(ns)
    traj = ric.solve_gdre(m, ns.gamma, ns.dt, mode=ns.mode)
    lines = [f"model: {ns.model}", f"gamma: {fmt17(ns.gamma)}  dt: {fmt17(ns.dt)}"]
    if not traj.feasible:
        t, name, me = traj.failure
        lines.append(f"feasible: False (t={fmt17(t)} block={name}); no simulation run")
        _write_report(os.path.join(out, "report.txt"), lines)
        return 0

    x0 = np.array([float(v) for v in ns.x0.split(",")])
    dt_sim = ns.dt_sim if ns.dt_sim is not None else ns.dt
    noise = sim.NoiseSpec(seed=ns.seed, n_particles=ns.particles, dt=dt_sim)
    u_pol = sim.PolicySpec.from_gains(traj.gains, "control")

    if ns.v_mode == "worst":
        v_pol = sim.PolicySpec.from_gains(traj.gains, "disturbance")
        bundle = sim.simulate(m, u_pol, v_pol, noise, sim.deterministic_x0(x0))
        j1_hat, j1_se = sim.estimate_cost(bundle, "J1", ns.gamma)
        j2_hat, j2_se = sim.estimate_cost(bundle, "J2")
        j1, j2 = ric.value_at(traj, x0, np.zeros((m.dims.n, m.dims.n)))
        lines += [
            f"particles: {ns.particles}  dt_sim: {fmt17(dt_sim)}  x0: {ns.x0}",
            f"J1 predicted: {fmt17(j1)}  estimated: {fmt17(j1_hat)} +/- {fmt17(j1_se)}",
            f"J2 predicted: {fmt17(j2)}  estimated: {fmt17(j2_hat)} +/- {fmt17(j2_se)}",
        ]
        try:
            lines.append(f"gain ratio under worst-case pair: {fmt17(sim.empirical_gain(bundle))}")
        except sim.ZeroDisturbance:
            lines.append("gain ratio: disturbance energy is zero")
        sim.export_bundle_csv(bundle, os.path.join(out, "paths.csv"),
                              per_particle=ns.export_paths)
    else:
        ratios = []
        for k in range(ns.v_seeds):
            nk = sim.NoiseSpec(seed=ns.seed + 1000 * k, n_particles=ns.particles, dt=dt_sim)
            v_pol = sim.PolicySpec.white(m.dims.nv, std=1.0)
            bundle = sim.simulate(m, u_pol, v_pol, nk,
                                  sim.deterministic_x0(np.zeros(m.dims.n)))
            ratios.append(sim.empirical_gain(bundle))
        lines += [f"random disturbances: {ns.v_seeds} seeds, particles {ns.particles}"]
        lines += [f"  ratio[{k}]: {fmt17(r)}" for k, r in enumerate(ratios)]
        lines.append(f"max ratio: {fmt17(max(ratios))}  gamma: {fmt17(ns.gamma)}")
    _write_report(os.path.join(out, "report.txt"), lines)
    return 0


def cmd_rl(ns) -> int:
    m = _load(ns.model)
    out = _outdir(ns)
    if m.jump_atoms:
        if not ns.strip_jumps:
            print("error: the model-free workflow only supports diffusion-only "
                  "models (no jump atoms); pass --strip-jumps to drop them",
                  file=sys.stderr)
            return 2
        m = m.without_jumps()
    d = m.dims
    grid = np.linspace(0.0, m.T, ns.grid_n + 1)
    rng = np.random.default_rng(ns.seed)
    probe_x0 = rng.normal(0.0, 1.5, size=(ns.probes, d.n))
    plant = rlmod.MeanFieldPlant(m, n_population=ns.particles, seed=ns.seed)
    settings = rlmod.RlSettings(gamma=ns.gamma, rl_grid=grid, n_substeps=ns.substeps,
                                n_branches=ns.paths, seed=ns.seed, data_mode=ns.data,
                                eps=ns.eps, eps1=ns.eps1,
                                output_weight=m.M.T @ m.M)
    zeros_u = np.zeros((d.nu, d.n))
    zeros_v = np.zeros((d.nv, d.n))
    iterate, report = rlmod.run_algorithm1(plant, settings,
                                           (zeros_u, zeros_u, zeros_v, zeros_v),
                                           probe_x0)

    _write_gain_csv(os.path.join(out, "gains.csv"), grid, iterate)
    lines = [
        f"model: {ns.model}",
        f"gamma: {fmt17(ns.gamma)}  data mode: {ns.data}",
        f"intervals: {ns.grid_n}  substeps: {ns.substeps}  probes: {ns.probes}"
        f"  branch paths: {ns.paths}",
        f"outer rounds: {iterate.outer_rounds}  inner rounds: {iterate.inner_rounds}",
        f"final outer distance: {fmt17(report.outer_dists[-1])}",
        f"worst regression smallest singular value: {fmt17(report.smallest_sv.min())}",
        f"cross-interval value mismatch (max): "
        f"{fmt17(report.q_mismatch.max()) if len(report.q_mismatch) else '0'}",
        f"population-vs-branch mean gap (max): {fmt17(report.closure_gap.max())}",
        f"elapsed: {report.elapsed:.2f} s",
    ]
    if ns.data == "exact":
        dre = ric.solve_hinf_dre(m, ns.gamma, m.T / (ns.grid_n * ns.substeps))
        gap = _gain_gap(grid, iterate, dre, ns.substeps)
        lines.append(f"gap to model-based gains: {fmt17(gap)}")
    _write_report(os.path.join(out, "report.txt"), lines)
    return 0


def _write_gain_csv(path: str, grid: np.ndarray, it: rlmod.PolicyIterate) -> None:
    N = it.L.shape[0]
    names = ["t_lo", "t_hi"]
    blocks = [("L", it.L), ("Lt", it.Lt), ("F", it.F), ("Ft", it.Ft)]
    for nm, arr in blocks:
        names += [f"{nm}_{i + 1}{j + 1}" for i in range(arr.shape[1])
                  for j in range(arr.shape[2])]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(N):
            row = [fmt17(grid[i]), fmt17(grid[i + 1])]
            for _nm, arr in blocks:
                row += [fmt17(v) for v in arr[i].reshape(-1)]
            fh.write(",".join(row) + "\n")


def _gain_gap(grid, iterate, dre, substeps: int) -> float:
    """Max gain difference, interval-constant learned vs reference at midpoints."""
    gaps = []
    for i in range(iterate.L.shape[0]):
        mid = i * substeps + substeps // 2
        gaps += [
            np.max(np.abs(iterate.L[i] - dre.L[mid])),
            np.max(np.abs(iterate.Lt[i] - dre.Lt[mid])),
            np.max(np.abs(iterate.F[i] - dre.F[mid])),
            np.max(np.abs(iterate.Ft[i] - dre.Ft[mid])),
        ]
    return float(max(gaps))


def cmd_verify(ns) -> int:
    checks: list[tuple[str, bool, str]] = []

    def check(name: str, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except AssertionError as exc:
            checks.append((name, False, str(exc)))

    rng = np.random.default_rng(0)

    def enc():
        for _ in range(50):
            n = int(rng.integers(1, 5))
            p = rng.normal(size=(n, n))
            p = 0.5 * (p + p.T)
            x = rng.normal(size=n)
            assert np.array_equal(rlmod.smat(rlmod.svec(p)), p)
            assert abs(rlmod.svec(p) @ rlmod.quad_monomials(x) - x @ p @ x) < 1e-12

    def jump_lin():
        m = mdl.demo_jump_model()
        p = rng.normal(size=(2, 2))
        p = p + p.T
        s = rng.normal(size=(2, 2))
        s = s + s.T
        lhs = mdl.jump_integral(m.jump_atoms, 2.0 * p - 3.0 * s, "E", "E")
        rhs = 2.0 * mdl.jump_integral(m.jump_atoms, p, "E", "E") \
            - 3.0 * mdl.jump_integral(m.jump_atoms, s, "E", "E")
        assert np.allclose(lhs, rhs, atol=1e-12)

    def gdre_demo():
        traj = ric.solve_gdre(mdl.demo_jump_model(), 5.0, 1e-3)
        assert traj.feasible, "demo model should be feasible at gamma=5"
        assert np.allclose(traj.P1[-1], 0.0) and np.allclose(traj.Q2[-1], 0.0)
        assert min_eig(-traj.P1[0]) > 0 and min_eig(traj.P2[0]) > 0

    def brl_picard():
        dm = mdl.DisturbanceOnlyModel(
            n=1, nv=1, A=[[0.0]], Abar=[[0.0]], B=[[1.0]], Bbar=[[0.0]],
            C=[[0.0]], Cbar=[[0.0]], D=[[0.0]], Dbar=[[0.0]], M=[[1.0]], T=0.1)
        brl = ric.solve_brl(dm, 5.0, 1e-3)
        pic = ric.picard_solve(dm, 5.0, 1e-3, tol=1e-11)
        gap = np.max(np.abs(brl.P - pic.P))
        assert gap < 1e-6, f"picard/brl gap {gap:.2e}"

    def sim_determinism():
        m = mdl.demo_jump_model()
        traj = ric.solve_gdre(m, 5.0, 1e-3)
        noise = sim.NoiseSpec(seed=7, n_particles=64, dt=1e-3)
        pol_u = sim.PolicySpec.from_gains(traj.gains, "control")
        pol_v = sim.PolicySpec.from_gains(traj.gains, "disturbance")
        b1 = sim.simulate(m, pol_u, pol_v, noise, sim.deterministic_x0([1.0, 1.0]))
        b2 = sim.simulate(m, pol_u, pol_v, noise, sim.deterministic_x0([1.0, 1.0]))
        assert np.array_equal(b1.states, b2.states)

    check("quadratic encodings", enc)
    check("jump integral linearity", jump_lin)
    check("coupled riccati on demo model", gdre_demo)
    check("bounded-real lemma vs successive linearization", brl_picard)
    check("simulation determinism", sim_determinism)

    ok = True
    for name, passed, msg in checks:
        tag = "PASS" if passed else "FAIL"
        ok = ok and passed
        print(f"[{tag}] {name}" + (f": {msg}" if msg else ""))
    print(f"verify: {'all checks passed' if ok else 'some checks FAILED'}")
    return 0 if (ok or not ns.strict) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfhinf",
                                description="finite-horizon mean-field H2/H-infinity toolbox")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True):
        if model:
            sp.add_argument("--model", required=True, help="path to JSON model file")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--mode", choices=("frozen", "stage"), default="frozen",
                        help="gain handling inside the backward sweep")

    sp = sub.add_parser("riccati", help="solve the coupled Riccati equations")
    common(sp)
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_riccati)

    sp = sub.add_parser("gamma-search", help="bisection on the feasibility threshold")
    common(sp)
    sp.add_argument("--lo", type=float, required=True)
    sp.add_argument("--hi", type=float, required=True)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_gamma_search)

    sp = sub.add_parser("simulate", help="Monte Carlo validation of the synthesis")
    common(sp)
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.add_argument("--dt-sim", type=float, default=None)
    sp.add_argument("--particles", type=int, default=10000)
    sp.add_argument("--x0", default="1,1")
    sp.add_argument("--v-mode", choices=("worst", "white"), default="worst")
    sp.add_argument("--v-seeds", type=int, default=20)
    sp.add_argument("--export-paths", action="store_true",
                    help="also write per-particle paths (large)")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("rl", help="model-free synthesis from trajectory data")
    common(sp)
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--data", choices=("exact", "sampled"), default="sampled")
    sp.add_argument("--grid-n", type=int, default=10, help="number of sampling intervals")
    sp.add_argument("--substeps", type=int, default=10)
    sp.add_argument("--probes", type=int, default=30, help="initial states for regression")
    sp.add_argument("--paths", type=int, default=10000, help="branch paths per interval")
    sp.add_argument("--particles", type=int, default=4000, help="population size")
    sp.add_argument("--eps", type=float, default=1e-8)
    sp.add_argument("--eps1", type=float, default=1e-9)
    sp.add_argument("--strip-jumps", action="store_true")
    sp.set_defaults(fn=cmd_rl)

    sp = sub.add_parser("verify", help="run the built-in invariant checks")
    sp.add_argument("--strict", action="store_true",
                    help="nonzero exit when a check fails")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.fn(ns)
    except (FileNotFoundError, ValueError, ric.BadBracket) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
