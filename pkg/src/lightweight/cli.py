"""Command line driver: ``lightweight {analyze,optimize,oracle,gradcheck}``.

Every run writes ``manifest.json`` (config echo, versions, seed) into the
output directory, which is enough to repeat it.  Exit codes: 0 success,
1 error, 2 infeasible start, 3 failed verification.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_FAIL = 0, 1, 2, 3
GRADCHECK_WARN_ELEMENTS = 20_000

logger = logging.getLogger("lightweight")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lightweight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="INI config file")
    common.add_argument("--set", "-s", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--out", "-o", type=Path, help="output directory (overrides output.directory)")
    common.add_argument("--threads", type=int, help="cap on BLAS/LAPACK worker threads")
    common.add_argument("--verbose", "-v", action="count", default=0)

    p = sub.add_parser("analyze", parents=[common], help="criticality map and critical instant")
    p.add_argument("--oracle", action="store_true", help="cross-check with the brute-force search")
    sub.add_parser("oracle", parents=[common], help="brute-force critical instant")
    sub.add_parser("optimize", parents=[common], help="stress-constrained lightweighting")
    p = sub.add_parser("gradcheck", parents=[common], help="adjoint vs finite-difference gradients")
    p.add_argument("--samples", type=int, default=1, help="number of random designs")
    p.add_argument("--step", type=float, default=1e-4, help="relative finite-difference step")
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)   # negative-control hook
    sub.add_parser("models", help="list bundled models")
    return parser


def _limit_threads(n):
    # must run before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


# -- problem setup ---------------------------------------------------------------

def build_problem(cfg):
    """Mesh, regions, material and analyzer described by a RunConfig."""
    import numpy as np
    from .criticality import CriticalityAnalyzer
    from .fem import MaterialModel
    from .io import ConfigError, parse_predicate
    from .mesh import RegionSpec, load_tet_mesh, select_nodes, tag_shell_elements
    from .models import BUNDLED

    mc, rc = cfg["mesh"], cfg["regions"]
    model = None
    if mc["model"]:
        if mc["model"] not in BUNDLED:
            raise ConfigError(f"{cfg.source}: unknown model {mc['model']!r}; choose from {sorted(BUNDLED)}")
        model = BUNDLED[mc["model"]]()
        mesh = model.mesh
    else:
        mesh = load_tet_mesh(cfg.path(mc["node_file"]), cfg.path(mc["ele_file"]))

    def node_set(listed, where, surface_only):
        if listed:
            return listed
        if where:
            return select_nodes(mesh, parse_predicate(where), surface_only)
        return None

    fixed = node_set(rc["fixed_nodes"], rc["fixed_where"], False)
    contact = node_set(rc["contact_nodes"], rc["contact_where"], True)
    thickness = rc["shell_thickness"]
    if model is not None and fixed is None and contact is None and thickness is None:
        regions = model.regions
    else:
        if fixed is None:
            fixed = model.regions.fixed_nodes if model else None
        if contact is None:
            contact = model.regions.contact_nodes if model else None
        if fixed is None or contact is None:
            raise ConfigError(f"{cfg.source}: [regions] needs fixed and contact nodes for a mesh file")
        if thickness is None:
            thickness = model.regions.shell_thickness if model else mesh.mean_edge_length
        shell = tag_shell_elements(mesh, thickness) if thickness > 0 else []
        contact = np.setdiff1d(contact, fixed)
        regions = RegionSpec(fixed, contact, shell, thickness).validate(mesh)

    m = cfg["material"]
    try:
        material = MaterialModel(m["youngs_modulus"], m["poisson_ratio"], m["yield_strength"], m["simp_exponent"],
                                 m["void_fraction"], m["stress_exponent"])
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [material] {exc}") from None
    s, w = cfg["surrogate"], cfg["weak_regions"]
    analyzer = CriticalityAnalyzer(mesh, regions, material, budget=1.0, patch_radius=cfg["load"]["patch_radius"],
                                   sample_fraction=s["sample_fraction"], q=s["q"], ridge_factor=s["ridge"],
                                   fr_fraction=s["fr_fraction"], wr_modes=w["modes"], wr_fraction=w["fraction"],
                                   mass_floor=w["mass_floor"])
    return mesh, regions, material, analyzer


def initial_density(cfg, mesh):
    import numpy as np
    from .io import read_density
    path = cfg.path(cfg["output"]["density_file"])
    return read_density(path, mesh) if path else np.ones(mesh.n_elements)


def build_reduction(cfg, mesh, regions):
    from .reduction import LogisticMap, compute_material_basis
    r = cfg["reduction"]
    cache = cfg.path(r["cache_dir"])
    basis = compute_material_basis(mesh, regions.shell_elements, r["k"], cache)
    return basis, LogisticMap(r["steepness"], r["inflection"], r["threshold"])


# -- output helpers -------------------------------------------------------------

def _json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_to_builtin) + "\n")


def _to_builtin(x):
    import numpy as np
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _csv(path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x):
    return f"{x:.10g}"


def write_manifest(out: Path, cfg, command, seed, extra=None):
    import numpy
    import scipy
    from . import __version__
    manifest = {
        "command": command,
        "config_source": cfg.source,
        "config": cfg.as_text(),
        "seed": seed,
        "versions": {"lightweight": __version__, "python": platform.python_version(),
                     "numpy": numpy.__version__, "scipy": scipy.__version__},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    _json(out / "manifest.json", manifest)


def format_trace(result, budget) -> str:
    """Hierarchical search trace, one block per force-region island."""
    lines = [f"critical node {result.node} sigma_cr {result.sigma_cr * budget:.6g} FEA {result.n_fea}"]
    for k, tr in enumerate(result.traces):
        lines.append(f"island {k}: {len(tr['island'])} nodes, {tr['n_fea']} FEA, "
                     f"best node {tr['node']} sigma {tr['sigma'] * budget:.6g}")
        for depth, (size, evals) in enumerate(tr["levels"], 1):
            cells = " ".join(f"{c}:{v * budget:.6g}" for c, v in evals)
            lines.append(f"  level {depth}: segment {size} nodes; centers {cells}")
    return "\n".join(lines) + "\n"


def format_report(res, material, config, history_fea) -> str:
    """Run summary: per-iteration table, verdict and totals."""
    lines = [f"{'iter':>5} {'mass':>12} {'sigma_cr':>12} {'node':>6} {'fea':>5} {'adj':>4} {'state':>9} step"]
    for s in res.history:
        lines.append(f"{s.iteration:5d} {s.mass:12.6g} {s.sigma_cr:12.6g} {s.node:6d} {s.n_fea:5d} "
                     f"{s.n_fea_gradient:4d} {'accepted' if s.accepted else 'rejected':>9} {s.step}")
    steps = max(len(res.history), 1)
    lines += ["",
              f"status             {res.status}",
              f"verdict            {res.verdict}",
              f"iterations         {res.iterations}",
              f"initial volume     {res.mass_initial:.6g}",
              f"optimized volume   {res.mass_final:.6g}",
              f"binary volume      {res.mass_binary:.6g}",
              f"yield strength     {material.yield_strength:.6g}",
              f"verified sigma_cr  {res.sigma_verified:.6g} (limit {(1 + config.verify_tol) * material.yield_strength:.6g})",
              f"avg FEA per step   {history_fea / steps:.2f}",
              f"oracle FEA         {res.verification.n_fea if res.verification is not None else 0}"]
    return "\n".join(lines) + "\n"


def _instant_record(result, budget, library, mesh):
    inst = library.instant(result.node, budget)
    return {"node": result.node, "position": mesh.nodes[result.node], "sigma_cr": result.sigma_cr * budget,
            "budget": budget, "n_fea": result.n_fea, "patch_radius": inst.patch_radius,
            "patch_nodes": inst.nodes, "forces": inst.forces}


# -- commands --------------------------------------------------------------------

def cmd_analyze(cfg, out: Path, args) -> int:
    import numpy as np
    from .fem import recover_stress
    from .io import write_vtk

    mesh, regions, material, analyzer = build_problem(cfg)
    P = cfg["load"]["force_budget"]
    density = initial_density(cfg, mesh)
    an = analyzer.analyze(density)
    contact = analyzer.library.contact
    crit = an.model.criticality(analyzer.library.magnitudes) * P
    island = {int(i): k for k, isl in enumerate(an.frs.islands) for i in isl}
    _csv(out / "criticality.csv", ["node", "x", "y", "z", "criticality", "force_region"],
         [[int(i), *map(_g, mesh.nodes[i]), _g(c), island.get(int(i), -1)] for i, c in zip(contact, crit)])
    _csv(out / "force_regions.csv", ["node", "island"], sorted(island.items()))
    _csv(out / "weak_regions.csv", ["element"], [[int(e)] for e in an.wrs.elements])
    record = _instant_record(an.result, P, analyzer.library, mesh)
    record.update(fea_analysis=an.n_fea, q=analyzer.q, samples=analyzer.samples, n_contact=len(contact),
                  n_force_region=len(an.frs.nodes), n_weak_elements=len(an.wrs.elements))
    if args.oracle:
        orc = analyzer.oracle(system=an.system, wrs=an.wrs)
        rank = np.argsort(-crit)
        top = set(contact[rank[:len(an.frs.nodes)]].tolist())
        record["oracle"] = {"node": orc.node, "sigma_cr": orc.sigma_cr * P, "n_fea": orc.n_fea,
                            "ratio": an.result.sigma_cr / orc.sigma_cr if orc.sigma_cr > 0 else 1.0,
                            "node_in_force_regions": orc.node in top,
                            "speedup": orc.n_fea / max(an.n_fea, 1)}
        _csv(out / "oracle.csv", ["node", "max_von_mises", "max_von_mises_weak"],
             [[int(i), _g(a * P), _g(b * P)] for i, a, b in zip(orc.all_nodes, orc.max_all, orc.max_wr)])
    _json(out / "critical_instant.json", record)
    (out / "search_trace.txt").write_text(format_trace(an.result, P))
    vm = recover_stress(an.system, an.result.u).von_mises * P
    wr = np.zeros(mesh.n_elements)
    wr[an.wrs.elements] = 1
    write_vtk(out / "analysis.vtk", mesh, {"von_mises": vm, "density": density, "weak_region": wr},
              {"criticality": dict(zip(contact.tolist(), crit))})
    print(f"critical node {an.result.node}: sigma_cr {an.result.sigma_cr * P:.6g} ({an.n_fea} FEA)")
    if args.oracle:
        o = record["oracle"]
        print(f"oracle node {o['node']}: sigma_cr {o['sigma_cr']:.6g} ({o['n_fea']} FEA), ratio {o['ratio']:.4f}")
    return EXIT_OK


def cmd_oracle(cfg, out: Path, args) -> int:
    from .fem import recover_stress
    from .io import write_vtk

    mesh, regions, material, analyzer = build_problem(cfg)
    P = cfg["load"]["force_budget"]
    density = initial_density(cfg, mesh)
    system = analyzer.factorize(density)
    wrs = analyzer.weak_regions(system)
    orc = analyzer.oracle(system=system, wrs=wrs)
    _csv(out / "oracle.csv", ["node", "max_von_mises", "max_von_mises_weak"],
         [[int(i), _g(a * P), _g(b * P)] for i, a, b in zip(orc.all_nodes, orc.max_all, orc.max_wr)])
    _json(out / "critical_instant.json", _instant_record(orc, P, analyzer.library, mesh))
    vm = recover_stress(system, orc.u).von_mises * P
    write_vtk(out / "oracle.vtk", mesh, {"von_mises": vm, "density": density},
              {"max_von_mises": dict(zip(orc.all_nodes.tolist(), orc.max_all * P))})
    print(f"oracle node {orc.node}: sigma_cr {orc.sigma_cr * P:.6g} ({orc.n_fea} FEA)")
    return EXIT_OK


def _optimizer_config(cfg):
    from .optimizer import OptimizerConfig
    o = cfg["optimizer"]
    return OptimizerConfig(force_budget=cfg["load"]["force_budget"], max_iters=o["max_iters"],
                           tol_mass=o["tol_mass"], patience=o["patience"], trust_radius=o["trust_radius"],
                           trust_max=o["trust_max"], trust_min=o["trust_min"], feas_tol=o["feas_tol"],
                           pnorm=o["pnorm"], cache_size=o["cache_size"], verify_tol=o["verify_tol"],
                           threshold=cfg["reduction"]["threshold"], sharpen=o["sharpen"],
                           penalty_step=o["penalty_step"])


def cmd_optimize(cfg, out: Path, args) -> int:
    from .fem import recover_stress
    from .io import write_density, write_vtk
    from .optimizer import optimize

    mesh, regions, material, analyzer = build_problem(cfg)
    basis, logistic = build_reduction(cfg, mesh, regions)
    config = _optimizer_config(cfg)
    fields = ["iteration", "mass", "sigma_cr", "H", "node", "n_wr", "constraint", "n_fea", "n_fea_gradient",
              "accepted", "trust_radius", "step"]
    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)

        def log_state(st):
            row = st.summary()
            w.writerow([_g(v) if isinstance(v, float) else v for v in (row[f] for f in fields)])
            fh.flush()
            print(f"iter {st.iteration:4d} mass {st.mass:.6g} sigma_cr {st.sigma_cr:.6g} "
                  f"{'accepted' if st.accepted else 'rejected'} {st.step}", flush=True)

        res = optimize(mesh, regions, material, basis, logistic, config, analyzer, callback=log_state)
    write_density(out / "density.txt", res.density, mesh)
    write_density(out / "density_binary.txt", res.binary_density, mesh)
    report = {"status": res.status, "verdict": res.verdict, "iterations": res.iterations,
              "mass_initial": res.mass_initial, "mass_final": res.mass_final, "mass_binary": res.mass_binary,
              "yield_strength": material.yield_strength, "force_budget": config.force_budget,
              "sigma_cr_final": res.history[-1].sigma_cr if res.history else None,
              "sigma_verified": res.sigma_verified, "verify_limit": (1 + config.verify_tol) * material.yield_strength,
              "simp_exponent_final": res.extras.get("simp_exponent"),
              "fea_total": sum(s.n_fea + s.n_fea_gradient for s in res.history)}
    cell = {"density": res.density, "binary": res.binary_density}
    if res.verification is not None:
        report["verification_node"] = res.verification.node
        report["verification_fea"] = res.verification.n_fea
        system = analyzer.factorize(res.binary_density)
        cell["von_mises_verified"] = recover_stress(system, res.verification.u).von_mises * config.force_budget
    _json(out / "report.json", report)
    (out / "report.txt").write_text(format_report(res, material, config, report["fea_total"]))
    write_vtk(out / "design.vtk", mesh, cell)
    print(f"{res.status}: mass {res.mass_initial:.6g} -> {res.mass_final:.6g} (binary {res.mass_binary:.6g}); "
          f"verified sigma_cr {res.sigma_verified:.6g}; {res.verdict}")
    return {"PASS": EXIT_OK, "SKIPPED": EXIT_OK, "INFEASIBLE": EXIT_INFEASIBLE}.get(res.verdict, EXIT_FAIL)


def cmd_gradcheck(cfg, out: Path, args) -> int:
    import numpy as np
    from .optimizer import gradient_check, random_alpha

    mesh, regions, material, analyzer = build_problem(cfg)
    if mesh.n_elements > GRADCHECK_WARN_ELEMENTS:
        logger.warning("gradcheck on %d elements will be slow; a small mesh is recommended", mesh.n_elements)
    basis, logistic = build_reduction(cfg, mesh, regions)
    rng = np.random.default_rng(cfg["output"]["seed"])
    rows, ok = [], True
    for sample in range(args.samples):
        alpha = random_alpha(basis.k, mesh.total_volume, rng)
        chk = gradient_check(analyzer, basis, alpha, logistic, cfg["optimizer"]["pnorm"], args.step,
                             corrupt=args.corrupt)
        passed = chk.passed()
        ok &= passed
        for j in range(basis.k):
            rows.append([sample, j, _g(chk.adjoint_H[j]), _g(chk.fd_H_half[j]), _g(chk.rel_error_H[j]),
                         _g(chk.adjoint_M[j]), _g(chk.fd_M[j]), _g(chk.rel_error_M[j])])
        print(f"sample {sample}: max rel. error H {chk.rel_error_H.max():.3e}  M {chk.rel_error_M.max():.3e}  "
              f"fd stable {chk.fd_stable}  {'PASS' if passed else 'FAIL'}")
    _csv(out / "gradcheck.csv", ["sample", "component", "adjoint_H", "fd_H", "rel_error_H", "adjoint_M", "fd_M",
                                 "rel_error_M"], rows)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"analyze": cmd_analyze, "oracle": cmd_oracle, "optimize": cmd_optimize, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
                        if hasattr(args, "verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "models":
        from .models import BUNDLED
        for name, fn in BUNDLED.items():
            print(f"{name:16s} {(fn.__doc__ or '').strip().splitlines()[0]}")
        return EXIT_OK
    if args.threads:
        _limit_threads(args.threads)
    from .io import ConfigError, load_config
    from .mesh import MeshError
    try:
        cfg = load_config(args.config, args.set)
        out = args.out if args.out is not None else cfg.path(cfg["output"]["directory"])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out, cfg, args.command, cfg["output"]["seed"])
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, MeshError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
