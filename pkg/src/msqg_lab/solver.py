"""Fixed-step RK4 integration of the mSQG active scalar with conservation diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .function_spaces import lp_norm
from .msqg_ops import MultiplierSpec, hamiltonian_flux, mean_free, msqg, nonlinearity_coeffs, random_field
from .spectral_core import Grid, SpectralField, fractional_laplacian_symbol, to_physical_real

BOX_AREA = (2.0 * math.pi) ** 2
CFL_ADVISORY = 0.5
CFL_ABORT_FACTOR = 4.0


class SimulationError(RuntimeError):
    """Raised when a run produces non-finite values or violates the CFL abort bound."""


@dataclass
class InitialCondition:
    kind: str = "randomSmooth"  # randomSmooth | explicit | twoMode | sine | zero
    seed: int = 1
    spectrum_scale: float = 4.0
    spectrum: str = "gaussian"
    path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in {"randomSmooth", "explicit", "twoMode", "sine", "zero"}:
            raise ValueError(f"unknown initial condition {self.kind!r}")
        if self.kind == "explicit" and not self.path:
            raise ValueError("explicit initial data needs a snapshot path")


@dataclass
class SimConfig:
    n: int = 128
    delta: float = 0.5
    dt: float = 1e-3
    t_end: float = 1.0
    initial_condition: InitialCondition = field(default_factory=InitialCondition)
    dealias: bool = True
    diag_stride: int = 100
    flux_qhats: list[int] = field(default_factory=list)
    snapshot_times: list[float] = field(default_factory=list)
    sign: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.initial_condition, dict):
            self.initial_condition = InitialCondition(**self.initial_condition)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= self.dt:
            raise ValueError("t_end must be at least dt")
        if self.diag_stride < 1:
            raise ValueError("diag_stride must be >= 1")
        Grid(self.n)

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    hamiltonian: float
    l2: float
    l3: float
    mean: float
    flux_samples: dict[int, float] = field(default_factory=dict)


@dataclass
class SimulationResult:
    config: SimConfig
    records: list[DiagnosticsRecord]
    final: SpectralField
    snapshots: dict[float, SpectralField]
    cfl_start: float

    def drift(self, attr: str) -> float:
        first = getattr(self.records[0], attr)
        last = getattr(self.records[-1], attr)
        return abs(last - first) / abs(first) if first != 0 else abs(last - first)

    def diagnostics_csv(self) -> str:
        qs = self.config.flux_qhats
        head = ["t", "H", "L2", "L3", "mean"] + [f"flux_{q}" for q in qs]
        lines = [",".join(head)]
        for r in self.records:
            row = [r.t, r.hamiltonian, r.l2, r.l3, r.mean] + [r.flux_samples[q] for q in qs]
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def initial_field(grid: Grid, ic: InitialCondition, delta: float) -> SpectralField:
    if ic.kind == "randomSmooth":
        return random_field(grid, ic.seed, ic.spectrum_scale, ic.spectrum, delta)
    x1, x2 = grid.coords
    if ic.kind == "sine":
        return SpectralField.from_physical(grid, np.sin(x1), delta=delta)
    if ic.kind == "twoMode":
        return SpectralField.from_physical(grid, np.sin(x1) + 0.5 * np.cos(2.0 * x2), delta=delta)
    if ic.kind == "zero":
        return SpectralField(grid, np.zeros((grid.n, grid.n), dtype=complex), "scalar", True, delta)
    from .formats import read_snapshot

    snap = read_snapshot(ic.path)
    if snap.grid.n != grid.n:
        raise ValueError(f"snapshot grid n={snap.grid.n} differs from config n={grid.n}")
    return SpectralField(grid, snap.coeffs, "scalar", True, delta)


def hamiltonian(theta_hat: np.ndarray, grid: Grid, delta: float) -> float:
    """int |Lambda^{-1+delta} theta|^2 dx."""
    sym = fractional_laplacian_symbol(grid, -1.0 + delta)
    return float(BOX_AREA * np.sum(np.abs(sym * mean_free(theta_hat)) ** 2))


def diagnostics(theta: SpectralField, t: float, m: MultiplierSpec, qhats: list[int]) -> DiagnosticsRecord:
    grid = theta.grid
    c = theta.coeffs
    flux = {q: hamiltonian_flux(theta, q, m).flux for q in qhats}
    return DiagnosticsRecord(
        t=t,
        hamiltonian=hamiltonian(c, grid, m.delta),
        l2=float(BOX_AREA * np.sum(np.abs(c) ** 2)),
        l3=lp_norm(c, 3),
        mean=float(BOX_AREA * c[0, 0].real),
        flux_samples=flux,
    )


def cfl_number(theta_hat: np.ndarray, grid: Grid, m: MultiplierSpec, dt: float) -> float:
    """dt * max|T theta| * n / (2 pi)."""
    vel = to_physical_real(m.on_grid(grid) * theta_hat)
    speed = float(np.max(np.hypot(vel[0], vel[1]))) if vel.size else 0.0
    return dt * speed * grid.n / (2.0 * math.pi)


def step_rk4(
    theta: SpectralField | np.ndarray,
    dt: float,
    m: MultiplierSpec,
    dealias: bool = True,
    grid: Grid | None = None,
) -> SpectralField | np.ndarray:
    """One classical RK4 step of d/dt theta = -T^l theta grad_l theta."""
    coeffs = theta.coeffs if isinstance(theta, SpectralField) else theta
    grid = theta.grid if isinstance(theta, SpectralField) else grid
    new = _rk4_coeffs(grid, coeffs, dt, m, dealias, m.on_grid(grid))
    if isinstance(theta, SpectralField):
        return theta.with_coeffs(new)
    return new


def simulate(
    config: SimConfig,
    initial: SpectralField | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> SimulationResult:
    """Integrate to ``t_end`` recording diagnostics every ``diag_stride`` steps."""
    grid = Grid(config.n)
    m = msqg(config.delta, config.sign)
    theta = initial if initial is not None else initial_field(grid, config.initial_condition, config.delta)
    c = theta.coeffs.copy()
    cfl0 = cfl_number(c, grid, m, config.dt)
    sym = m.on_grid(grid)
    records = [diagnostics(theta, 0.0, m, config.flux_qhats)]
    snaps: dict[float, SpectralField] = {}
    pending = sorted(config.snapshot_times)
    steps = config.steps
    for step in range(1, steps + 1):
        c = _rk4_coeffs(grid, c, config.dt, m, config.dealias, sym)
        t = step * config.dt
        while pending and t >= pending[0] - 0.5 * config.dt:
            snaps[pending.pop(0)] = theta.with_coeffs(c.copy())
        if step % config.diag_stride == 0 or step == steps:
            if not np.all(np.isfinite(c)):
                raise SimulationError(f"non-finite values at step {step} (t={t})")
            cfl = cfl_number(c, grid, m, config.dt)
            if cfl > CFL_ABORT_FACTOR * CFL_ADVISORY:
                raise SimulationError(
                    f"CFL number {cfl:.3f} exceeds {CFL_ABORT_FACTOR}x the advisory bound at t={t}"
                )
            records.append(diagnostics(theta.with_coeffs(c), t, m, config.flux_qhats))
        if progress is not None:
            progress(step, steps)
    return SimulationResult(config, records, theta.with_coeffs(c), snaps, cfl0)


def _rk4_coeffs(grid: Grid, c: np.ndarray, dt: float, m: MultiplierSpec, dealias: bool, sym) -> np.ndarray:
    def rhs(x: np.ndarray) -> np.ndarray:
        return -nonlinearity_coeffs(grid, x, m, dealias, sym)

    k1 = rhs(c)
    k2 = rhs(c + 0.5 * dt * k1)
    k3 = rhs(c + 0.5 * dt * k2)
    k4 = rhs(c + dt * k3)
    out = c + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError("non-finite values after RK4 step")
    return out
