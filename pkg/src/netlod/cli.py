"""Command line interface.

Subcommands: generate, audit, solve, reference, convergence, decay,
interp-audit.  All outputs are written atomically and embed the resolved
configuration plus the library version for provenance.  Identical
configurations (including seeds) produce byte-identical output files at
any NETLOD_THREADS setting; wall-clock timings therefore go to stderr,
never into output files.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from fractions import Fraction

import numpy as np

from . import __version__
from .audit import convergence_study, decay_study, estimate_poincare_mu
from .errors import NetlodError
from .generator import GeneratorConfig, generate_with_report, tag_dirichlet_nodes
from .interpolation import compute_dual_basis
from .lod import solve_lod, solve_reference
from .mesh import build_coarse_mesh
from .network import read_network, write_network
from .operators import (EdgeCoefficients, FiberParams, assemble_mass,
                        assemble_model)

_FACE_TOKENS = {"x0": (0, 0), "x1": (0, 1), "y0": (1, 0), "y1": (1, 1),
                "z0": (2, 0), "z1": (2, 1)}


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolved_config(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in ("func",) and v is not None}
    cfg["version"] = __version__
    return cfg


def _parse_domain(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.lower().split("x"))
    except ValueError as exc:
        raise NetlodError(f"invalid domain spec {text!r} (use e.g. 1x1)") from exc


def _parse_H_list(text: str) -> list[Fraction]:
    out = []
    for tok in text.split(","):
        try:
            out.append(Fraction(tok.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise NetlodError(f"invalid mesh size {tok!r} (use e.g. 1/16)") from exc
    return out


def _parse_bc(tokens) -> tuple[object, str]:
    """--bc faces=x0,x1 g=stretch:0.5 -> (face spec, g spec)."""
    faces: object = "all"
    gspec = "zero"
    for tok in tokens or []:
        key, _, value = tok.partition("=")
        if key == "faces":
            if value == "all":
                faces = "all"
            else:
                try:
                    faces = [_FACE_TOKENS[v] for v in value.split(",")]
                except KeyError as exc:
                    raise NetlodError(f"unknown face token in {value!r}") from exc
        elif key == "g":
            gspec = value
        else:
            raise NetlodError(f"unknown --bc entry {tok!r}")
    return faces, gspec


def _load_vector(spec: str, mass, ncomp: int, num_nodes: int) -> np.ndarray:
    """Load specs: zero | mass-one | const:v1,...,vn (mass weighted)."""
    if spec == "zero":
        return np.zeros(ncomp * num_nodes)
    if spec == "mass-one":
        values = np.ones(ncomp)
    elif spec.startswith("const:"):
        values = np.array([float(v) for v in spec[len("const:"):].split(",")])
        if values.size != ncomp:
            raise NetlodError(f"load spec {spec!r} needs {ncomp} components")
    else:
        raise NetlodError(f"unknown load spec {spec!r}")
    h = np.repeat(values, num_nodes)
    diag = np.tile(mass.diagonal, ncomp)
    return diag * h


def _boundary_vector(spec: str, net, ncomp: int) -> np.ndarray | None:
    """Boundary data specs: zero | stretch:S (g(x) = [S*x_1, 0, ...])."""
    if spec == "zero":
        return None
    if spec.startswith("stretch:"):
        s = float(spec[len("stretch:"):])
        g = np.zeros(ncomp * net.num_nodes)
        g[:net.num_nodes] = s * net.coords[:, 0]
        return g
    raise NetlodError(f"unknown boundary data spec {spec!r}")


def _edge_coeffs(args, net) -> EdgeCoefficients:
    gamma = None
    if getattr(args, "gamma_const", None) is not None:
        gamma = np.full(net.num_edges, args.gamma_const)
    elif getattr(args, "gamma_range", None) is not None:
        lo, hi = (float(v) for v in args.gamma_range.split(","))
        rng = np.random.default_rng(getattr(args, "gamma_seed", 0) or 0)
        gamma = rng.uniform(lo, hi, net.num_edges)
    fiber = None
    if getattr(args, "model", None) in ("fiber", "fiber2d"):
        fiber = FiberParams(wire_radius=args.fiber_radius,
                            young_modulus=args.fiber_modulus)
    return EdgeCoefficients(gamma=gamma, fiber=fiber)


def _get_network(args):
    if getattr(args, "net", None):
        return read_network(args.net)
    if getattr(args, "domain", None):
        cfg = GeneratorConfig(
            domain=_parse_domain(args.domain),
            segment_length=args.fiber_length,
            seed=args.seed,
            density=getattr(args, "density", None),
            total_mass=getattr(args, "mass", None),
        )
        return generate_with_report(cfg)[0]
    raise NetlodError("no network: give --net FILE or generator flags (--domain ...)")


def _problem(args):
    """Shared setup: network, operator, mass, load, boundary data, faces."""
    net = _get_network(args)
    faces, gspec = _parse_bc(getattr(args, "bc", None))
    net, _ = tag_dirichlet_nodes(net, faces)
    coeffs = _edge_coeffs(args, net)
    K = assemble_model(net, args.model, coeffs,
                       triple_policy=getattr(args, "triple_policy", "all"))
    mass = assemble_mass(net)
    g = _boundary_vector(gspec, net, K.ncomp)
    load_spec = getattr(args, "load", None)
    if load_spec is None:
        load_spec = "zero" if g is not None else "mass-one"
    f = _load_vector(load_spec, mass, K.ncomp, net.num_nodes)
    return net, K, mass, f, g, faces


def _emit(args, payload: dict):
    text = json.dumps(payload)
    if getattr(args, "out", None):
        _atomic_write(args.out, text)
    if getattr(args, "json", False):
        print(text)


def _csv_text(config: dict, header: list[str], rows: list[list], extra=()) -> str:
    lines = ["# netlod-schema v1", "# config " + json.dumps(config)]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    lines.extend(extra)
    return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    cfg = GeneratorConfig(
        domain=_parse_domain(args.domain),
        segment_length=args.fiber_length,
        seed=args.seed,
        density=args.density,
        total_mass=args.mass,
        merge_tolerance=args.merge_tol,
        prune_boundary_stubs=args.prune_boundary_stubs,
    )
    net, report = generate_with_report(cfg)
    write_network(net, args.out)
    print(f"generated {report.nodes} nodes / {report.edges} edges; "
          f"mass {report.final_length:.4g} of target {report.target_length:.4g} "
          f"(cleanup loss {100 * report.mass_loss:.1f}%)", file=sys.stderr)
    if args.json:
        print(json.dumps({"config": _resolved_config(args),
                          "nodes": report.nodes, "edges": report.edges,
                          "segments": report.segments_placed,
                          "mass": report.final_length,
                          "raw_mass": report.raw_length}))
    return 0


def cmd_audit(args):
    net = read_network(args.net)
    if args.mode == "friedrichs":
        faces, _ = _parse_bc(args.bc)
        net, _ = tag_dirichlet_nodes(net, faces)
    R_list = [float(v) for v in args.R.split(",")]
    report = estimate_poincare_mu(net, R_list, samples=args.samples,
                                  mode=args.mode, R0=args.R0)
    rows = []
    for s in report.samples:
        center = list(s.center) + [0.0] * (2 - len(s.center))
        rows.append([s.mode, s.R, center[0], center[1],
                     s.lambda2 if s.passed else float("nan"),
                     s.inv_over_R2 if s.passed else float("nan")])
    extra = [f"# mu2 {report.mu2!r}", f"# slope {report.slope!r}",
             f"# R0 {report.R0!r}"]
    text = _csv_text(_resolved_config(args),
                     ["mode", "R", "x1", "x2", "lambda2", "inv_lambda2_over_R2"],
                     rows, extra)
    _atomic_write(args.out, text)
    if args.json:
        print(json.dumps({"config": _resolved_config(args), "mu2": report.mu2,
                          "slope": report.slope, "R0": report.R0}))
    return 0


def _solution_payload(args, net, K, u, residual: float, extra: dict) -> dict:
    payload = {"schema": "netlod-solution v1",
               "config": _resolved_config(args),
               "model": args.model, "n": K.ncomp,
               "num_nodes": net.num_nodes,
               "residuals": {"solver": residual},
               "values": [float(v) for v in u]}
    payload.update(extra)
    return payload


def cmd_solve(args):
    net, K, mass, f, g, faces = _problem(args)
    H = _parse_H_list(args.H)[0]
    mesh = build_coarse_mesh(net.domain, H, faces, R0=net.max_edge_length,
                             strict=args.strict,
                             warn=lambda m: print("warning: " + m, file=sys.stderr))
    interp = compute_dual_basis(mesh, net, mass)
    u, system = solve_lod(K, interp, args.k, f, g=g)
    worst = max((r.residual for r in system.corrector.reports), default=0.0)
    payload = _solution_payload(args, net, K, u, worst,
                                {"H": str(H), "k": args.k, "method": "lod"})
    _emit(args, payload)
    return 0


def cmd_reference(args):
    net, K, mass, f, g, _ = _problem(args)
    u, report = solve_reference(K, net, f, g=g)
    payload = _solution_payload(args, net, K, u, report.residual,
                                {"method": "reference"})
    _emit(args, payload)
    return 0


def cmd_convergence(args):
    net, K, mass, f, g, faces = _problem(args)
    H_list = _parse_H_list(args.H)
    result = convergence_study(net, K, mass, f, faces, H_list, args.k, g=g)
    header = ["method", "H", "k", "dofs", "err_K", "err_M"]
    rows = [[r["method"], str(r["H"]), r["k"], r["dofs"], r["err_K"], r["err_M"]]
            for r in result["rows"]]
    extra = [f"# slope {m} {n} {result['slopes'][m][n]!r}"
             for m in sorted(result["slopes"]) for n in ("K", "M")]
    for r in result["rows"]:
        print(f"{r['method']:4s} H={r['H']} k={r['k']} errK={r['err_K']:.4e} "
              f"errM={r['err_M']:.4e} ({r['seconds']:.2f}s)", file=sys.stderr)
    _atomic_write(args.out, _csv_text(_resolved_config(args), header, rows, extra))
    if args.json:
        out = {"config": _resolved_config(args), "slopes": result["slopes"],
               "rows": [{k: (str(v) if k == "H" else v) for k, v in r.items()
                         if k != "seconds"} for r in result["rows"]]}
        print(json.dumps(out))
    return 0


def cmd_decay(args):
    net, K, mass, f, g, faces = _problem(args)
    H = _parse_H_list(args.H)[0]
    k_list = [int(v) for v in args.k.split(",")]
    result = decay_study(net, K, mass, f, faces, H, k_list, g=g)
    header = ["method", "H", "k", "dofs", "err_K", "err_M"]
    rows = [[r["method"], str(r["H"]), r["k"], r["dofs"], r["err_K"], r["err_M"]]
            for r in result["rows"]]
    extra = ["# ratios_K " + ",".join(repr(v) for v in result["ratios_K"])]
    for r in result["rows"]:
        print(f"k={r['k']} errK={r['err_K']:.4e} errM={r['err_M']:.4e} "
              f"({r['seconds']:.2f}s)", file=sys.stderr)
    _atomic_write(args.out, _csv_text(_resolved_config(args), header, rows, extra))
    if args.json:
        out = {"config": _resolved_config(args), "ratios_K": result["ratios_K"],
               "rows": [{k: (str(v) if k == "H" else v) for k, v in r.items()
                         if k != "seconds"} for r in result["rows"]]}
        print(json.dumps(out))
    return 0


def cmd_interp_audit(args):
    net = read_network(args.net)
    faces, _ = _parse_bc(args.bc)
    net, _ = tag_dirichlet_nodes(net, faces)
    H = _parse_H_list(args.H)[0]
    mesh = build_coarse_mesh(net.domain, H, faces)
    mass = assemble_mass(net)
    interp = compute_dual_basis(mesh, net, mass)
    scale = float(H) ** (mesh.dim / 2.0)
    rows = []
    for dof in range(mesh.num_mesh_nodes):
        node = int(np.flatnonzero(mesh.dof_of_node == dof)[0])
        elem = int(interp.assignment[node])
        rows.append([dof, node, elem, interp.psi_norms[dof] * scale,
                     interp.gram_cond[elem]])
    header = ["dof", "mesh_node", "element", "psi_norm_scaled", "gram_cond"]
    _atomic_write(args.out, _csv_text(_resolved_config(args), header, rows))
    if args.json:
        print(json.dumps({"config": _resolved_config(args),
                          "max_psi_norm_scaled": float(np.max(interp.psi_norms) * scale)}))
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_network_source(p, require_net=False):
    p.add_argument("--net", help="network JSON file")
    if not require_net:
        p.add_argument("--domain", help="generate: domain spec, e.g. 1x1")
        p.add_argument("--fiber-length", type=float, default=0.05)
        p.add_argument("--mass", type=float, help="generate: target total length")
        p.add_argument("--density", type=float, help="generate: target length per area")
        p.add_argument("--seed", type=int, default=0)


def _add_model(p):
    p.add_argument("--model", required=True,
                   choices=["heat", "spring", "fiber", "fiber2d"])
    p.add_argument("--gamma-const", type=float, help="uniform edge coefficient")
    p.add_argument("--gamma-range", help="random edge coefficients, e.g. 0.1,1")
    p.add_argument("--gamma-seed", type=int, default=0)
    p.add_argument("--fiber-radius", type=float, default=2.5e-3)
    p.add_argument("--fiber-modulus", type=float, default=210e9)
    p.add_argument("--triple-policy", choices=["all", "collinear"], default="all")
    p.add_argument("--load", help="zero | mass-one | const:v1,...,vn")
    p.add_argument("--bc", nargs="*", metavar="KEY=VALUE",
                   help="faces=x0,x1|all and g=stretch:S|zero")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netlod",
                                     description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a random fiber network")
    p.add_argument("--domain", required=True)
    p.add_argument("--fiber-length", type=float, default=0.05)
    p.add_argument("--mass", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--merge-tol", type=float)
    p.add_argument("--prune-boundary-stubs", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("audit", help="estimate homogeneity/connectivity constants")
    p.add_argument("--net", required=True)
    p.add_argument("--R", required=True, help="comma list of box radii")
    p.add_argument("--samples", type=int, default=9)
    p.add_argument("--mode", choices=["poincare", "friedrichs"], default="poincare")
    p.add_argument("--R0", type=float, help="override locality scale (default: max edge)")
    p.add_argument("--bc", nargs="*", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("solve", help="localized multiscale solve")
    _add_network_source(p)
    _add_model(p)
    p.add_argument("--H", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--strict", action="store_true",
                   help="reject H below the stability bound instead of warning")
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("reference", help="fine-scale constrained solve")
    _add_network_source(p)
    _add_model(p)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("convergence", help="error sweep over mesh sizes")
    _add_network_source(p)
    _add_model(p)
    p.add_argument("--H", required=True, help="comma list, e.g. 1/4,1/8,1/16")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("decay", help="error sweep over localization radii")
    _add_network_source(p)
    _add_model(p)
    p.add_argument("--H", required=True)
    p.add_argument("--k", required=True, help="comma list, e.g. 1,2,3,4")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("interp-audit", help="dual basis diagnostics as CSV")
    p.add_argument("--net", required=True)
    p.add_argument("--H", required=True)
    p.add_argument("--bc", nargs="*", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_interp_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NetlodError as exc:
        print(f"netlod: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
