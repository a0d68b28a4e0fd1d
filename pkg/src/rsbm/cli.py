"""Command-line interface.

Exit codes: 0 success, 1 an experiment check failed, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import OBSERVABLES, ConfigError, config_reference, load_config, observable_field, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _observable_args(p):
    p.add_argument("--observable", choices=OBSERVABLES, default="gaussian", help="test function (default gaussian)")
    p.add_argument("--width", type=float, default=1.0)
    p.add_argument("--center", type=float, default=0.0)


def _write_field_csv(path, field, value_name="value"):
    import csv

    coords = [c.ravel() for c in field.box.coords()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(field.box.d)] + [value_name])
        for row in zip(*coords, field.flat):
            w.writerow([repr(float(v)) for v in row])


def _cmd_run(args) -> int:
    cfg = load_config(args.config).replace_mc(args.seed, args.threads, args.out)
    summary = run_experiment(cfg)
    for c in summary.checks:
        tag = ("PASS" if c.passed else "FAIL") + (" (advisory)" if c.advisory else "")
        print(f"{tag} {c.name}: statistic={c.statistic:.6g} tolerance={c.tolerance:g}")
    print(f"{summary.experiment}: {'passed' if summary.passed else 'FAILED'} in {summary.runtime_s:.1f}s -> {cfg.output}")
    return EXIT_OK if summary.passed else EXIT_FAIL


def _cmd_validate(args) -> int:
    for path in args.config:
        cfg = load_config(path)
        print(f"{path}: ok ({cfg.experiment}, hash {cfg.digest()[:12]})")
    return EXIT_OK


def _cmd_env_sample(args) -> int:
    from .environment import EnvironmentSpec, environment_to_csv, sample_environment, save_environment
    from .lattice import LatticeBox

    box = LatticeBox(args.d, args.n, args.M, args.boundary)
    env = sample_environment(EnvironmentSpec(args.dist, box, args.seed, args.p))
    save_environment(env, args.out)
    if args.csv:
        environment_to_csv(env, args.csv)
    print(f"wrote {args.out}: {box.num_sites} sites, c_n={env.c_n:.6g}, nu={env.nu:.6g}")
    return EXIT_OK


def _load_env(path):
    from .environment import load_environment

    try:
        return load_environment(path)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None


def _cmd_pam_solve(args) -> int:
    from .lattice import Field
    from .pam import SemigroupBackend, semigroup_apply

    env = _load_env(args.env)
    f0 = Field.dirac(env.box) if args.initial == "dirac" else observable_field(env.box, args.observable, args.width, args.center)
    out = semigroup_apply(env, f0, args.t, SemigroupBackend(args.backend))
    if args.out:
        _write_field_csv(args.out, out)
    print(f"T_t f0 at the origin: {out.at_origin():.12g}")
    return EXIT_OK


def _cmd_dual_solve(args) -> int:
    from .dual import DualSpec, exact_log_laplace, fkpp_solve
    from .particle import BranchingSpec, initial_mass
    from .pam import SemigroupBackend

    env = _load_env(args.env)
    phi = observable_field(env.box, args.observable, args.width, args.center)
    backend = SemigroupBackend(args.backend)
    if args.kind == "fkpp":
        kappa = 2 * env.nu if args.kappa is None else args.kappa
        out = fkpp_solve(env, phi, args.t, DualSpec(kappa), backend)
        print(f"U_t phi at the origin (kappa={kappa:g}): {out.at_origin():.12g}")
    else:
        branching = BranchingSpec("binary", args.rho)
        out = exact_log_laplace(env, phi, args.t, branching, backend=backend)
        N = initial_mass(env.box.n, args.rho)
        print(f"h(t, 0) = {out.at_origin():.12g}; Laplace functional from {N} particles: {out.at_origin() ** N:.12g}")
    if args.out:
        _write_field_csv(args.out, out)
    return EXIT_OK


def _cmd_spectral_eig(args) -> int:
    from .spectral import assemble, top_eigenpair

    env = _load_env(args.env)
    pair = top_eigenpair(assemble(env, args.L), args.method)
    if args.out:
        _write_field_csv(args.out, pair.e1, "e1")
    print(f"lambda1 = {pair.lambda1:.12g} (residual {pair.residual:.2e}, {pair.method})")
    return EXIT_OK


def _cmd_report_merge(args) -> int:
    runs = []
    for path in args.summaries:
        try:
            runs.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    passed = all(c["pass"] or c.get("advisory", False) for r in runs for c in r.get("checks", []))
    merged = {"runs": runs, "passed": passed}
    text = json.dumps(merged, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rsbm", description="Branching random walk in random environment: experiments and solvers.",
                     epilog=config_reference(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment config", epilog=config_reference(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override mc.base_seed (environment seeds are unchanged)")
    p.add_argument("--threads", type=int, help="override mc.max_threads")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="check configs without running them")
    p.add_argument("config", nargs="+")
    p.set_defaults(func=_cmd_validate)

    env = sub.add_parser("env", help="environment tools").add_subparsers(dest="env_command", required=True,
                                                                        parser_class=_Parser)
    p = env.add_parser("sample", help="sample an environment to a binary file")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--boundary", default="periodic", choices=("periodic", "dirichlet"))
    p.add_argument("--dist", default="rademacher")
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write a CSV view")
    p.set_defaults(func=_cmd_env_sample)

    pam = sub.add_parser("pam", help="PAM solver").add_subparsers(dest="pam_command", required=True, parser_class=_Parser)
    p = pam.add_parser("solve", help="apply the PAM semigroup")
    p.add_argument("--env", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--initial", choices=("dirac", "observable"), default="observable")
    p.add_argument("--backend", choices=("dense_expm", "crank_nicolson"), default="dense_expm")
    _observable_args(p)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_pam_solve)

    dual = sub.add_parser("dual", help="dual solvers").add_subparsers(dest="dual_command", required=True,
                                                                     parser_class=_Parser)
    p = dual.add_parser("solve", help="exact log-Laplace dual or FKPP")
    p.add_argument("--env", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--kind", choices=("exact", "fkpp"), default="exact")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--kappa", type=float, help="FKPP parameter (default 2 nu)")
    p.add_argument("--backend", choices=("dense_expm", "crank_nicolson"), default="dense_expm")
    _observable_args(p)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_dual_solve)

    spec = sub.add_parser("spectral", help="Dirichlet Anderson Hamiltonian").add_subparsers(
        dest="spectral_command", required=True, parser_class=_Parser)
    p = spec.add_parser("eig", help="top eigenpair on the box (-L/2, L/2)^d")
    p.add_argument("--env", required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--method", choices=("auto", "dense", "power"), default="auto")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_spectral_eig)

    rep = sub.add_parser("report", help="report tools").add_subparsers(dest="report_command", required=True,
                                                                      parser_class=_Parser)
    p = rep.add_parser("merge", help="merge summary.json files")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report_merge)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"rsbm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"rsbm: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
