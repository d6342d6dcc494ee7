"""Command-line experiment runner.

Every subcommand writes CSV outputs plus ``manifest.json`` into ``--out``.
Exit status: 0 success, 1 failed invariant or invalid input, 2 usage error.
``msqg-lab --from-manifest path/manifest.json`` reruns a recorded experiment.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Callable

import click
import numpy as np

from . import antidivergence as ad
from . import formats
from . import msqg_ops as ops
from . import wavepackets as wp
from .solver import SimConfig, simulate
from .spectral_core import Grid


class InvariantFailure(Exception):
    def __init__(self, name: str, detail: str):
        super().__init__(f"{name}: {detail}")
        self.name = name
        self.detail = detail


def thread_cap() -> int:
    raw = os.environ.get("MSQG_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise click.UsageError(f"MSQG_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise click.UsageError(f"MSQG_THREADS must be a positive integer, got {raw!r}")
    return value


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


MULTIPLIERS: dict[str, Callable[[float], ops.MultiplierSpec]] = {
    "msqg": ops.msqg,
    "gradient": ops.gradient_control,
    "even-cosine": ops.even_cosine,
    "exceptional": lambda delta: ops.exceptional_even(),
}


def _multiplier(name: str, delta: float) -> ops.MultiplierSpec:
    if name not in MULTIPLIERS:
        raise ValueError(f"unknown multiplier {name!r}; choose from {sorted(MULTIPLIERS)}")
    return MULTIPLIERS[name](delta)


def _write(out: Path, name: str, text: str | bytes, written: list[str]) -> None:
    path = out / name
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)
    written.append(name)


# ---------------------------------------------------------------------------
# Runners: (params, out_dir, written) -> None; raise InvariantFailure on a failed check


def run_simulate(p: dict, out: Path, written: list[str]) -> None:
    cfg = SimConfig.from_dict(p["sim"])
    p["sim"] = cfg.to_dict()
    res = simulate(cfg)
    _write(out, "diagnostics.csv", res.diagnostics_csv(), written)
    for i, (t, snap) in enumerate(sorted(res.snapshots.items())):
        _write(out, f"snapshot_{i:03d}.msqg", formats.snapshot_bytes(snap), written)
    _write(out, "final.msqg", formats.snapshot_bytes(res.final), written)
    means = [r.mean for r in res.records]
    if max(means) - min(means) > 1e-14 * max(1.0, abs(means[0])):
        raise InvariantFailure("mean conservation", f"mean drifted by {max(means) - min(means):.3e}")


def run_verify_kernel(p: dict, out: Path, written: list[str]) -> None:
    m = _multiplier(p["multiplier"], p["delta"])
    n = p["n"] if p["n"] is not None else 2 ** (p["q"] + 4)
    table = ad.build_kernel(
        p["q"], p["qhat"], m, Grid(n), p["sigma_order"], max_pairs=p["max_pairs"], seed=p["seed"]
    )
    _write(out, "kernel.msqk", formats.kernel_bytes(table), written)
    _write(out, "kernel_summary.csv", ad.kernel_summary_csv([table]), written)
    if m.family == "msqg" and table.max_trace > 1e-12 * table.max_abs:
        raise InvariantFailure(
            "trace-free kernel", f"max|trace| = {table.max_trace:.3e} > 1e-12 * max|K| = {table.max_abs:.3e}"
        )


def run_verify_divform(p: dict, out: Path, written: list[str]) -> None:
    m = ops.msqg(p["delta"])
    rows = []
    worst = 0.0
    for seed in range(p["seed"], p["seed"] + p["seeds"]):
        theta = ad.random_sparse_field(seed, 2.0 ** (p["q"] - 1), 2.0 ** (p["q"] + 2), p["modes"])
        rep = ad.verify_divergence_form(theta, p["q"], p["qhat"], m, p["sigma_order"])
        rows.append([seed, p["q"], p["qhat"], p["delta"], rep.vector_residual, rep.scalar_residual])
        worst = max(worst, rep.residual)
    header = ["seed", "q", "qhat", "delta", "vector_residual", "scalar_residual"]
    _write(out, "divform.csv", formats.csv_text(header, rows), written)
    if worst > p["tolerance"]:
        raise InvariantFailure("divergence form", f"worst residual {worst:.3e} > {p['tolerance']:.1e}")


def run_paraproduct(p: dict, out: Path, written: list[str]) -> None:
    grid = Grid(p["n"])
    m = ops.msqg(p["delta"])
    theta = ops.random_field(grid, p["seed"], p["scale"], delta=p["delta"])
    psi = ops.random_field(grid, p["seed"] + 1_000_003, p["scale"])
    br = ops.paraproduct_decompose(psi, theta, m)
    _write(out, "paraproduct.csv", br.to_csv(), written)
    summary = formats.csv_text(
        ["LL", "HL", "LH", "HH", "total", "direct", "relative_mismatch"],
        [[br.LL, br.HL, br.LH, br.HH, br.total, br.direct, br.relative_mismatch]],
    )
    _write(out, "paraproduct_summary.csv", summary, written)
    if br.LL != 0.0:
        raise InvariantFailure("LL vanishes", f"LL = {br.LL!r}")
    if br.relative_mismatch > 1e-8:
        raise InvariantFailure("paraproduct total", f"relative mismatch {br.relative_mismatch:.3e}")


def run_bound_ratio(p: dict, out: Path, written: list[str]) -> None:
    m = ops.msqg(p["delta"])
    rows = []
    for n in p["ns"]:
        grid = Grid(n)
        theta = ops.random_field(grid, p["seed"], p["scale"], delta=p["delta"])
        psi = ops.random_field(grid, p["seed"] + 1_000_003, p["scale"])
        rows.append([n, p["seminorm"], ops.bound_ratio(psi, theta, m, p["seminorm"])])
    _write(out, "bound_ratio.csv", formats.csv_text(["n", "seminorm", "ratio"], rows), written)


def run_flux(p: dict, out: Path, written: list[str]) -> None:
    grid = Grid(p["n"])
    m = ops.msqg(p["delta"])
    theta = ops.random_field(grid, p["seed"], p["scale"], p["spectrum"], p["delta"])
    rows = []
    for q in p["qhats"]:
        rep = ops.hamiltonian_flux(theta, q, m)
        rows.append([q, rep.flux, rep.low_velocity_part, rep.high_velocity_part])
    header = ["qhat", "flux", "low_velocity_part", "high_velocity_part"]
    _write(out, "flux.csv", formats.csv_text(header, rows), written)


def run_sharpness(p: dict, out: Path, written: list[str]) -> None:
    series = wp.sharpness_limit(p["psi"], p["delta"], p["lambdas"], tuple(p["direction"]), p["width"])
    _write(out, "sharpness.csv", series.to_csv(), written)
    extrap = [["richardson_half", series.richardson]] + [[k, v] for k, v in sorted(series.alternatives.items())]
    extrap.append(["fitted_exponent", series.exponent if min(series.errors) > 0 else float("nan")])
    _write(out, "sharpness_extrapolation.csv", formats.csv_text(["quantity", "value"], extrap), written)
    errs = series.errors
    if series.target != 0.0 and any(b >= a for a, b in zip(errs, errs[1:])):
        raise InvariantFailure("sharpness error decreasing", f"errors {errs}")


def run_characterize(p: dict, out: Path, written: list[str]) -> None:
    m = _multiplier(p["multiplier"], p["delta"])
    series = wp.characterization_limit(
        m, tuple(p["xi"]), p["psi"], p["lambdas"], p["case"], strict=p["strict"], width=p["width"]
    )
    _write(out, "characterize.csv", series.to_csv(), written)
    extra = [["richardson_half", series.richardson]] + [[k, v] for k, v in sorted(series.alternatives.items())]
    extra += [[k, v] for k, v in sorted(series.extra.items())]
    _write(out, "characterize_summary.csv", formats.csv_text(["quantity", "value"], extra), written)


def run_moment_lemma(p: dict, out: Path, written: list[str]) -> None:
    grid = Grid(p["n"])
    m = ops.msqg(p["delta"])
    theta = ad.concentrated_theta(grid, p["width"], p["wavenumber"], p["seed"])
    asm = ad.assemble_tracefree_antidivergence(theta, m, method=p["method"])
    series = ad.verify_moment_lemma(asm.tensor, (0.0, 0.0, 0.0, 1.0), p["radii"], mass_of="source")
    rows = [[R, v, v / series.scale] for R, v in zip(series.radii, series.values)]
    _write(out, "moment.csv", formats.csv_text(["R", "I", "I_over_scale"], rows), written)
    last = abs(series.values[-1]) / series.scale
    if last > p["tolerance"]:
        raise InvariantFailure("moment decay", f"|I(R_max)|/scale = {last:.3e} > {p['tolerance']:.1e}")


def run_tracefree_assemble(p: dict, out: Path, written: list[str]) -> None:
    grid = Grid(p["n"])
    m = ops.msqg(p["delta"])
    theta = ops.band_limited_random(grid, p["seed"], p["kmax"], p["delta"])
    asm = ad.assemble_tracefree_antidivergence(theta, m, method=p["method"])
    header = ["seed", "divergence_error", "trace_ratio", "symmetry_error"]
    row = [p["seed"], asm.divergence_error, asm.trace_ratio, asm.symmetry_error]
    _write(out, "tracefree.csv", formats.csv_text(header, [row]), written)
    _write(out, "tracefree_tensor.msqg", formats.snapshot_bytes(asm.tensor), written)
    if asm.divergence_error > 1e-7:
        raise InvariantFailure("double divergence", f"relative error {asm.divergence_error:.3e}")
    if asm.trace_ratio > 1e-10:
        raise InvariantFailure("trace-free", f"trace ratio {asm.trace_ratio:.3e}")


RUNNERS: dict[str, Callable[[dict, Path, list[str]], None]] = {
    "simulate": run_simulate,
    "verify-kernel": run_verify_kernel,
    "verify-divform": run_verify_divform,
    "paraproduct": run_paraproduct,
    "bound-ratio": run_bound_ratio,
    "flux": run_flux,
    "sharpness": run_sharpness,
    "characterize": run_characterize,
    "moment-lemma": run_moment_lemma,
    "tracefree-assemble": run_tracefree_assemble,
}


def execute(subcommand: str, params: dict, out: str | Path) -> int:
    """Run one experiment, write its manifest, and return the exit status."""
    threads = thread_cap()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    status, detail, code = "ok", "", 0
    try:
        RUNNERS[subcommand](params, out, written)
    except InvariantFailure as exc:
        status, detail, code = "failed", str(exc), 1
        click.echo(f"invariant failed: {exc}", err=True)
    except (ValueError, ZeroDivisionError, ArithmeticError, RuntimeError) as exc:
        status, detail, code = "error", str(exc), 1
        click.echo(f"error: {exc}", err=True)
    man = formats.manifest(subcommand, params, written + ["manifest.json"], status, detail)
    man["threads"] = threads
    formats.write_manifest(out / "manifest.json", man)
    return code


# ---------------------------------------------------------------------------
# click wiring


def _finish(ctx: click.Context, subcommand: str, params: dict, out: str) -> None:
    ctx.exit(execute(subcommand, params, out))


out_option = click.option("--out", default=".", show_default=True, help="Output directory.")


@click.group(invoke_without_command=True, no_args_is_help=False)
@click.option("--from-manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Rerun the experiment recorded in a manifest.")
@click.option("--out", "replay_out", default=None, help="Output directory for --from-manifest.")
@click.pass_context
def cli(ctx: click.Context, manifest_path: str | None, replay_out: str | None) -> None:
    """mSQG harmonic-analysis lab on the 2-torus."""
    if ctx.invoked_subcommand is not None:
        return
    if manifest_path is None:
        click.echo(ctx.get_usage(), err=True)
        ctx.exit(2)
    data = json.loads(Path(manifest_path).read_text())
    sub = data.get("subcommand")
    if sub not in RUNNERS:
        raise click.UsageError(f"manifest names unknown subcommand {sub!r}")
    out = replay_out or str(Path(manifest_path).parent)
    ctx.exit(execute(sub, data["config"], out))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@out_option
@click.pass_context
def simulate_cmd(ctx, config_path, out):
    """Integrate mSQG from a JSON SimConfig."""
    sim = json.loads(Path(config_path).read_text())
    _finish(ctx, "simulate", {"sim": sim}, out)


simulate_cmd.name = "simulate"


@cli.command("verify-kernel")
@click.option("--delta", type=float, required=True)
@click.option("--q", type=int, required=True)
@click.option("--qhat", type=int, required=True)
@click.option("--n", type=int, default=None, help="Grid size; default is the smallest that fits the band.")
@click.option("--sigma-order", type=int, default=ad.DEFAULT_SIGMA_ORDER, show_default=True)
@click.option("--multiplier", default="msqg", show_default=True, type=click.Choice(sorted(MULTIPLIERS)))
@click.option("--max-pairs", type=int, default=20000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
@click.pass_context
def verify_kernel_cmd(ctx, delta, q, qhat, n, sigma_order, multiplier, max_pairs, seed, out):
    """Sample the anti-divergence kernel and check its trace."""
    params = dict(delta=delta, q=q, qhat=qhat, n=n, sigma_order=sigma_order, multiplier=multiplier,
                  max_pairs=max_pairs, seed=seed)
    _finish(ctx, "verify-kernel", params, out)


@cli.command("verify-divform")
@click.option("--delta", type=float, required=True)
@click.option("--q", type=int, required=True)
@click.option("--qhat", type=int, default=3, show_default=True)
@click.option("--seeds", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="First seed.")
@click.option("--modes", type=int, default=48, show_default=True, help="Conjugate mode pairs in theta.")
@click.option("--sigma-order", type=int, default=ad.DEFAULT_SIGMA_ORDER, show_default=True)
@click.option("--tolerance", type=float, default=1e-8, show_default=True)
@out_option
@click.pass_context
def verify_divform_cmd(ctx, delta, q, qhat, seeds, seed, modes, sigma_order, tolerance, out):
    """Check the divergence-form identity on random sparse theta."""
    params = dict(delta=delta, q=q, qhat=qhat, seeds=seeds, seed=seed, modes=modes,
                  sigma_order=sigma_order, tolerance=tolerance)
    _finish(ctx, "verify-divform", params, out)


@cli.command("paraproduct")
@click.option("--seed", type=int, required=True)
@click.option("--n", type=int, default=128, show_default=True)
@click.option("--delta", type=float, default=0.25, show_default=True)
@click.option("--scale", type=float, default=8.0, show_default=True, help="Spectral width of the random fields.")
@out_option
@click.pass_context
def paraproduct_cmd(ctx, seed, n, delta, scale, out):
    """Split B(psi, theta) into LL/HL/LH/HH contributions."""
    _finish(ctx, "paraproduct", dict(seed=seed, n=n, delta=delta, scale=scale), out)


@cli.command("bound-ratio")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ns", default="64,128,256", show_default=True, help="Comma-separated grid sizes.")
@click.option("--delta", type=float, default=0.25, show_default=True)
@click.option("--scale", type=float, default=6.0, show_default=True)
@click.option("--seminorm", type=click.Choice(["W2inf", "W2inf_tracefree"]), default="W2inf_tracefree",
              show_default=True)
@out_option
@click.pass_context
def bound_ratio_cmd(ctx, seed, ns, delta, scale, seminorm, out):
    """|B| / (seminorm(psi) ||theta||^2) across grid refinement."""
    params = dict(seed=seed, ns=_ints(ns), delta=delta, scale=scale, seminorm=seminorm)
    _finish(ctx, "bound-ratio", params, out)


@cli.command("flux")
@click.option("--n", type=int, default=256, show_default=True)
@click.option("--delta", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--scale", type=float, default=1.0, show_default=True)
@click.option("--spectrum", type=click.Choice(["gaussian", "exponential"]), default="exponential",
              show_default=True)
@click.option("--qhats", default="2,3,4,5,6", show_default=True)
@out_option
@click.pass_context
def flux_cmd(ctx, n, delta, seed, scale, spectrum, qhats, out):
    """Hamiltonian flux through frequency 2^qhat."""
    params = dict(n=n, delta=delta, seed=seed, scale=scale, spectrum=spectrum, qhats=_ints(qhats))
    _finish(ctx, "flux", params, out)


@cli.command("sharpness")
@click.option("--delta", type=float, required=True)
@click.option("--lambdas", default="16,32,64,128", show_default=True)
@click.option("--psi", default="x1x2", show_default=True, type=click.Choice(sorted(wp.BUILTIN_PSI)))
@click.option("--direction", default="1,0", show_default=True)
@click.option("--width", type=float, default=2.6, show_default=True, help="Envelope width.")
@out_option
@click.pass_context
def sharpness_cmd(ctx, delta, lambdas, psi, direction, width, out):
    """Wave-packet sequence for the sharp trace-free bound."""
    d = _floats(direction)
    norm = float(np.hypot(*d))
    params = dict(delta=delta, lambdas=_floats(lambdas), psi=psi, direction=[d[0] / norm, d[1] / norm],
                  width=width)
    _finish(ctx, "sharpness", params, out)


@cli.command("characterize")
@click.option("--case", type=click.Choice(["a", "b", "c", "d"]), required=True)
@click.option("--multiplier", type=click.Choice(sorted(MULTIPLIERS)), required=True)
@click.option("--delta", type=float, default=0.5, show_default=True)
@click.option("--psi", default="x2", show_default=True, type=click.Choice(sorted(wp.BUILTIN_PSI)))
@click.option("--lambdas", default="16,32,64,128", show_default=True)
@click.option("--xi", default="1,0", show_default=True)
@click.option("--width", type=float, default=2.6, show_default=True)
@click.option("--strict/--no-strict", default=True, show_default=True,
              help="Reject multipliers whose parity does not match the case.")
@out_option
@click.pass_context
def characterize_cmd(ctx, case, multiplier, delta, psi, lambdas, xi, width, strict, out):
    """Limit functionals that single out mSQG among homogeneous multipliers."""
    x = _floats(xi)
    norm = float(np.hypot(*x))
    params = dict(case=case, multiplier=multiplier, delta=delta, psi=psi, lambdas=_floats(lambdas),
                  xi=[x[0] / norm, x[1] / norm], width=width, strict=strict)
    _finish(ctx, "characterize", params, out)


@cli.command("moment-lemma")
@click.option("--n", type=int, default=256, show_default=True)
@click.option("--delta", type=float, default=0.25, show_default=True)
@click.option("--width", type=float, default=0.23, show_default=True)
@click.option("--wavenumber", type=float, default=18.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--radii", default="1.0,1.5,2.0,2.5,2.8,3.0,3.1", show_default=True)
@click.option("--method", type=click.Choice(["calderon", "bands"]), default="calderon", show_default=True)
@click.option("--tolerance", type=float, default=1e-8, show_default=True)
@out_option
@click.pass_context
def moment_lemma_cmd(ctx, n, delta, width, wavenumber, seed, radii, method, tolerance, out):
    """Cut-off moments I(R) of a trace-free tensor against |x|^2."""
    params = dict(n=n, delta=delta, width=width, wavenumber=wavenumber, seed=seed, radii=_floats(radii),
                  method=method, tolerance=tolerance)
    _finish(ctx, "moment-lemma", params, out)


@cli.command("tracefree-assemble")
@click.option("--n", type=int, default=64, show_default=True)
@click.option("--delta", type=float, default=0.25, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--kmax", type=float, default=10.0, show_default=True)
@click.option("--method", type=click.Choice(["bands", "calderon"]), default="bands", show_default=True)
@out_option
@click.pass_context
def tracefree_assemble_cmd(ctx, n, delta, seed, kmax, method, out):
    """Symmetric trace-free tensor whose double divergence is the nonlinearity."""
    _finish(ctx, "tracefree-assemble", dict(n=n, delta=delta, seed=seed, kmax=kmax, method=method), out)


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else list(argv)
    try:
        code = cli.main(args=args, prog_name="msqg-lab", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.Abort:
        return 1
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
