from __future__ import annotations

import contextlib
import logging
from typing import TYPE_CHECKING

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
import typer as t

from lasalt import (
    characteristics,
    expectation,
    moments,
    montecarlo,
    reporting,
    serialization,
    snapshots,
    spde,
    verify,
)
from lasalt.errors import (
    ConfigError,
    ConfigMismatchError,
    HashMismatchError,
    NumericalError,
)
from lasalt.grid import relative_l2
from lasalt.noise import build_noise_basis, sample_path
from lasalt.runconfig import RunConfig, desk_config


if TYPE_CHECKING:
    from collections.abc import Iterator


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY = 4

CFG_HELP = "Run configuration (JSON or TOML, any fsspec URL)."
OUT_HELP = "Output directory. Defaults to output.directory of the config."
FORCE_HELP = "Overwrite a non-empty output directory."
THREADS_HELP = "Worker threads for ensemble shards. Affects wall time only."
VERBOSE_HELP = "Log per-step diagnostics."
TRAJ_HELP = "Precomputed expectation trajectory directory (hash-checked)."
REFINE_HELP = "Also run grid (n, 2n, 4n) and step (dt, dt/2, dt/4) refinement ladders."
MEMBER_HELP = "Ensemble member id (selects the Brownian path)."
QUICK_HELP = "Run the acceptance ladder at reduced scale."
ONLY_HELP = "Run only these criteria (E-1 always runs)."

CFG_CMDS = ["-c", "--config"]
OUT_CMDS = ["-o", "--out"]
FORCE_CMDS = ["-f", "--force"]
THREADS_CMDS = ["-t", "--threads"]
VERBOSE_CMDS = ["-v", "--verbose"]
TRAJ_CMDS = ["-T", "--trajectory"]
REFINE_CMDS = ["-r", "--refine"]
MEMBER_CMDS = ["-m", "--member"]
QUICK_CMDS = ["-q", "--quick"]
ONLY_CMDS = ["--only"]

console = Console(stderr=True)

cli = t.Typer(
    name="lasalt",
    help=(
        "Expectation, fluctuation and moment solvers for the Lagrangian-averaged "
        "stochastic Euler-Boussinesq system, with Monte Carlo and characteristics "
        "cross-checks."
    ),
    no_args_is_help=True,
)


def setup_logging(verbose: bool) -> None:  # noqa: FBT001
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@contextlib.contextmanager
def exit_codes() -> Iterator[None]:
    """Translate library errors into the documented exit codes."""
    try:
        yield
    except (ConfigError, ConfigMismatchError, HashMismatchError) as e:
        console.print(f"[bold red]Configuration error:[/] {e}")
        raise t.Exit(EXIT_CONFIG) from e
    except NumericalError as e:
        console.print(f"[bold red]Numerical failure:[/] {e}")
        raise t.Exit(EXIT_NUMERICAL) from e


def _load(config_path: str | None) -> RunConfig:
    if config_path is None:
        msg = "No config given (use --config)"
        raise ConfigError(msg)
    return RunConfig.from_file(config_path)


def _out(config: RunConfig, out: str | None, verb: str) -> str:
    return out if out is not None else f"{config.output.directory}/{verb}"


def _trajectory(
    config: RunConfig, trajectory_dir: str | None
) -> expectation.ExpectationTrajectory:
    if trajectory_dir is None:
        return expectation.run_expectation(config)
    return expectation.ExpectationTrajectory.load(
        trajectory_dir, config_hash=config.config_hash
    )


@cli.command(name="expectation")
def cmd_expectation(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    refine: bool = t.Option(False, *REFINE_CMDS, help=REFINE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Solve the expectation system and write the trajectory directory.

    Args:
        config_path: Run configuration.
        out: Output directory.
        force: Overwrite a non-empty output directory.
        refine: Also run the refinement ladders and write convergence.json.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = _load(config_path)
        target = _out(config, out, "expectation")
        traj = expectation.run_expectation(config)
        traj.save(target, force=force)
        if refine:
            n = config.grid.n
            report = {
                "grid": expectation.self_convergence(config, [n, 2 * n, 4 * n]).as_dict(),
                "time": expectation.time_convergence(config).as_dict(),
            }
            serialization.dump_file(report, f"{target}/convergence.json")
        console.print(f"C0 = {traj.energy_growth_constant():.6e}")


@cli.command(name="spde")
def cmd_spde(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    trajectory_dir: str = t.Option(
        None, *TRAJ_CMDS, help=TRAJ_HELP, show_default=False
    ),
    member: int = t.Option(0, *MEMBER_CMDS, help=MEMBER_HELP),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Run one stochastic member and write its snapshots at the trajectory times.

    Args:
        config_path: Run configuration.
        out: Output directory.
        trajectory_dir: Precomputed expectation trajectory.
        member: Member id.
        force: Overwrite a non-empty output directory.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = _load(config_path)
        traj = _trajectory(config, trajectory_dir)
        basis = build_noise_basis(config.noise, traj.grid)
        n_steps = round((traj.t_end - traj.t_start) / traj.dt)
        path = sample_path(config.ensemble.seed, member, n_steps, traj.dt, basis)
        enable_u = config.solver.enable_u_equation
        forcing = spde.assemble_forcing(traj, traj.g) if enable_u else None
        saved = [spde.initial_state(traj, enable_u=enable_u)]

        def keep(state: spde.SpdeState) -> None:
            if state.step_index % traj.save_every == 0:
                saved.append(state)

        spde.run_member(
            saved[0],
            traj,
            basis,
            traj.g,
            path.increments,
            scheme=config.solver.scheme,
            forcing=forcing,
            callback=keep,
        )
        target = _out(config, out, f"member{member}")
        root = snapshots.prepare_directory(target, force=force)
        steps = [s.step_index for s in saved]
        times = [s.t for s in saved]
        hashes: dict[str, str] = {}
        for prefix in ("theta", "omega"):
            series = [getattr(s, prefix) for s in saved]
            hashes |= snapshots.write_series(root, prefix, series, steps, times)
        if enable_u:
            us = [s.u for s in saved if s.u is not None]
            hashes |= snapshots.write_series(root, "u", us, steps, times)
        seam = spde.check_seam(saved[-1].theta - traj.theta_at(saved[-1].t))
        meta = {
            "member": member,
            "seed": config.ensemble.seed,
            "scheme": config.solver.scheme,
            "config_hash": config.config_hash,
            "seam_ratio": seam,
            "files": hashes,
        }
        serialization.dump_file(meta, root / "meta.json")


@cli.command(name="moments")
def cmd_moments(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    trajectory_dir: str = t.Option(
        None, *TRAJ_CMDS, help=TRAJ_HELP, show_default=False
    ),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Integrate the closed moment equations along an expectation trajectory.

    Args:
        config_path: Run configuration.
        out: Output directory.
        trajectory_dir: Precomputed expectation trajectory.
        force: Overwrite a non-empty output directory.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = _load(config_path)
        traj = _trajectory(config, trajectory_dir)
        solution = moments.run_moments(config, traj)
        solution.save(_out(config, out, "moments"), force=force)
        if not all(p.ok for p in solution.positivity):
            console.print("[yellow]Even-moment positivity was violated, see the log.")


@cli.command(name="ensemble")
def cmd_ensemble(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    trajectory_dir: str = t.Option(
        None, *TRAJ_CMDS, help=TRAJ_HELP, show_default=False
    ),
    threads: int = t.Option(1, *THREADS_CMDS, help=THREADS_HELP),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Run the Monte Carlo ensemble and compare it with the moment closures.

    Args:
        config_path: Run configuration.
        out: Output directory.
        trajectory_dir: Precomputed expectation trajectory.
        threads: Worker threads.
        force: Overwrite a non-empty output directory.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = _load(config_path)
        traj = _trajectory(config, trajectory_dir)
        stats = montecarlo.run_ensemble(config, traj, threads=threads)
        solution = moments.run_moments(config, traj)
        tolerance = config.ensemble.discretization_tolerance
        reports = [
            montecarlo.closure_compare(s, solution.at_time(s.t), tolerance=tolerance)
            for s in (*stats.history, stats)
        ]
        target = _out(config, out, "ensemble")
        stats.save(target, force=force)
        montecarlo.write_report(reports, target)
        reporting.write_text(
            reporting.render_closure_report(reports[-1]), f"{target}/closure.md"
        )
        console.print(_closure_table(reports[-1]))


def _closure_table(report: montecarlo.ClosureReport) -> Table:
    table = Table(title=f"Closure at t={report.t:.4f} ({report.members} members)")
    for column in ("quantity", "rel. error", "threshold", "verdict"):
        table.add_column(column)
    for q in report.quantities:
        table.add_row(
            q.name,
            f"{q.rel_error:.3e}",
            f"{q.threshold:.3e}",
            reporting.verdict(q.passed),
        )
    return table


@cli.command(name="characteristics")
def cmd_characteristics(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    trajectory_dir: str = t.Option(
        None, *TRAJ_CMDS, help=TRAJ_HELP, show_default=False
    ),
    member: int = t.Option(0, *MEMBER_CMDS, help=MEMBER_HELP),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Solve one member along its characteristics and compare with the SPDE stepper.

    Args:
        config_path: Run configuration.
        out: Output directory.
        trajectory_dir: Precomputed expectation trajectory.
        member: Member id.
        force: Overwrite a non-empty output directory.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = _load(config_path)
        traj = _trajectory(config, trajectory_dir)
        basis = build_noise_basis(config.noise, traj.grid)
        n_steps = round((traj.t_end - traj.t_start) / traj.dt)
        path = sample_path(config.ensemble.seed, member, n_steps, traj.dt, basis)
        enable_u = config.solver.enable_u_equation
        forcing = spde.assemble_forcing(traj, traj.g) if enable_u else None
        final = spde.run_member(
            spde.initial_state(traj, enable_u=enable_u),
            traj,
            basis,
            traj.g,
            path.increments,
            scheme=config.solver.scheme,
            forcing=forcing,
        )
        inverse = characteristics.integrate_flow(
            traj, basis, path.increments, traj.t_start, traj.t_end, "inverse",
            scheme=config.solver.scheme,
        )
        theta = characteristics.theta_by_pullback(traj.states[0].theta, inverse)
        root = snapshots.prepare_directory(
            _out(config, out, f"characteristics{member}"), force=force
        )
        hashes = {
            "inverse_map.lsf1": inverse.save(root / "inverse_map.lsf1"),
            "theta.lsf1": snapshots.write_lsf1(
                root / "theta.lsf1", theta, n_steps, traj.t_end
            ),
        }
        det = inverse.jacobian_determinant()
        result = {
            "member": member,
            "t": traj.t_end,
            "theta_rel_l2": relative_l2(theta, final.theta),
            "jacobian_det_min": float(det.min()),
            "jacobian_det_max": float(det.max()),
            "files": hashes,
        }
        if enable_u and forcing is not None and final.u is not None:
            u0 = traj.u_snapshots[0].as_oneform()
            u = characteristics.u_by_characteristics(
                u0, traj, basis, path.increments, forcing, traj.t_end
            )
            result["u_rel_l2"] = relative_l2(u, final.u)
        serialization.dump_file(result, root / "characteristics.json")
        console.print(f"theta rel. L2 vs SPDE: {result['theta_rel_l2']:.3e}")


@cli.command(name="verify")
def cmd_verify(
    config_path: str = t.Option(None, *CFG_CMDS, help=CFG_HELP, show_default=False),
    out: str = t.Option(None, *OUT_CMDS, help=OUT_HELP, show_default=False),
    trajectory_dir: str = t.Option(
        None, *TRAJ_CMDS, help=TRAJ_HELP, show_default=False
    ),
    threads: int = t.Option(1, *THREADS_CMDS, help=THREADS_HELP),
    quick: bool = t.Option(False, *QUICK_CMDS, help=QUICK_HELP),
    only: list[str] = t.Option(  # noqa: B008
        None, *ONLY_CMDS, help=ONLY_HELP, show_default=False
    ),
    force: bool = t.Option(False, *FORCE_CMDS, help=FORCE_HELP),
    verbose: bool = t.Option(False, *VERBOSE_CMDS, help=VERBOSE_HELP),
):
    """Run the acceptance ladder. Exits with 4 if any criterion fails.

    Args:
        config_path: Run configuration, the packaged desk config if not given.
        out: Output directory.
        trajectory_dir: Precomputed expectation trajectory of the config.
        threads: Worker threads.
        quick: Reduced scale.
        only: Criteria to run.
        force: Overwrite a non-empty output directory.
        verbose: Log per-step diagnostics.
    """
    setup_logging(verbose)
    with exit_codes():
        config = desk_config() if config_path is None else _load(config_path)
        traj = None
        if trajectory_dir is not None:
            traj = expectation.ExpectationTrajectory.load(
                trajectory_dir, config_hash=config.config_hash
            )
        summary = verify.run_verify(
            config,
            threads=threads,
            ladder=verify.Ladder.quick() if quick else None,
            only=only or None,
            trajectory=traj,
        )
        summary.save(_out(config, out, "verify"), force=force)
    table = Table(title="Acceptance ladder")
    for column in ("criterion", "verdict", "note"):
        table.add_column(column)
    for c in summary.criteria:
        table.add_row(c.id, reporting.verdict(c.passed), c.note)
    console.print(table)
    if not summary.passed:
        missing = [*summary.failed, *summary.skipped]
        console.print(f"[bold red]Failed:[/] {', '.join(missing)}")
        raise t.Exit(EXIT_VERIFY)


if __name__ == "__main__":
    cli(["verify", "--quick", "--only", "A-1", "--force"])
