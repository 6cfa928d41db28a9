"""Finite-difference / finite-volume reference solutions and the grid file format.

* Diffusion-Reaction: central second difference for diffusion, explicit
  reaction, Lie-split forward Euler, periodic.
* Burgers: conservative Godunov (upwind) flux for ``u^2/2``, central
  diffusion, two-stage SSP Runge-Kutta in time, periodic.
* Shallow Water: first-order finite volumes with Rusanov fluxes, zero-gradient
  outflow boundaries, flat bottom, forward Euler.

The 1-D grids are vertex grids ``x_j = lo + j*dx`` on the periodic interval,
so a grid of ``N`` points is exactly every other point of one with ``2N``.
The Shallow Water grid is cell-centred. Solutions are stored at ``N_t``
evenly spaced times including ``t = 0``; the internal step divides each output
interval evenly and respects the stability limit times ``cfl_safety``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .pde import InitialConditionSpec, PdeProblem, _column, eval_ic_sinusoid, make_problem

MAGIC = b"ATLGRID1"
DESK_RESOLUTION = {"diffreact": (256, 128), "burgers": (256, 128), "swe": (64, 64, 51)}
FULL_RESOLUTION = {"diffreact": (1024, 256), "burgers": (1024, 256), "swe": (128, 128, 101)}


@dataclass
class GridField:
    """Reference solution on a regular grid.

    ``dims`` is ``(N_x, N_t)`` or ``(N_x, N_y, N_t)``. ``values`` has shape
    ``(n_fields, N_t, N_x)`` or ``(n_fields, N_t, N_y, N_x)``: time outermost,
    x fastest.
    """

    kind: str
    dims: tuple[int, ...]
    spacings: tuple[float, ...]
    origin: tuple[float, ...]
    field_names: tuple[str, ...]
    values: np.ndarray
    ic: dict | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacings = tuple(float(s) for s in self.spacings)
        self.origin = tuple(float(o) for o in self.origin)
        self.field_names = tuple(self.field_names)
        expected = (len(self.field_names), self.dims[-1], *reversed(self.dims[:-1]))
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != expected:
            raise ContractError(f"values have shape {self.values.shape}, expected {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("grid values must be finite")

    def axis(self, k: int) -> np.ndarray:
        """Coordinates along axis ``k`` in ``dims`` order (last one is time)."""
        return self.origin[k] + self.spacings[k] * np.arange(self.dims[k])

    def points(self) -> np.ndarray:
        """All grid points as rows ``(x, [y,] t)`` in the same order as a flattened field."""
        axes = [self.axis(k) for k in range(len(self.dims))]
        # meshgrid over (t, [y,] x) so that x varies fastest
        grids = np.meshgrid(*reversed(axes), indexing="ij")
        cols = [g.reshape(-1) for g in reversed(grids)]
        return np.stack(cols, axis=1)

    def field(self, name: str) -> np.ndarray:
        return self.values[self.field_names.index(name)]

    def same_as(self, other: GridField) -> bool:
        return (
            self.kind == other.kind
            and self.dims == other.dims
            and self.spacings == other.spacings
            and self.origin == other.origin
            and self.field_names == other.field_names
            and self.ic == other.ic
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True)
class SolverConfig:
    resolution: tuple[int, ...]
    cfl_safety: float = 0.9
    dt: float | None = None

    def __post_init__(self):
        if not 0.0 < self.cfl_safety < 1.0:
            raise ConfigError("cfl_safety must lie in (0, 1)")
        if any(int(n) < 2 for n in self.resolution):
            raise ConfigError("every grid dimension needs at least two points")


def _substeps(interval: float, dt_max: float, dt_fixed: float | None) -> tuple[int, float]:
    if dt_fixed is not None:
        if dt_fixed > dt_max:
            raise ConfigError(f"time step {dt_fixed:g} exceeds the stability limit {dt_max:g}")
        dt_max = dt_fixed
    n = max(1, math.ceil(interval / dt_max - 1e-12))
    return n, interval / n


def _initial_1d(ic, x):
    if isinstance(ic, InitialConditionSpec):
        if ic.variant != "sinusoid":
            raise ContractError("1-D solvers need a sinusoid initial condition")
        return eval_ic_sinusoid(ic, x)
    if callable(ic):
        return np.asarray(ic(x), dtype=np.float64) * np.ones_like(x)
    arr = np.asarray(ic, dtype=np.float64)
    if arr.shape != x.shape:
        raise ContractError("initial array does not match the grid")
    return arr.copy()


def _ic_record(ic):
    return ic.to_dict() if isinstance(ic, InitialConditionSpec) else None


def _time_axis(problem: PdeProblem, n_t: int):
    t0, t1 = problem.time_domain
    return t0, (t1 - t0) / (n_t - 1)


def _lap(u, dx):
    return (np.roll(u, -1) - 2.0 * u + np.roll(u, 1)) / (dx * dx)


def solve_diffreact(ic, config: SolverConfig | None = None, problem: PdeProblem | None = None) -> GridField:
    problem = problem or make_problem("diffreact")
    config = config or SolverConfig(DESK_RESOLUTION["diffreact"])
    n_x, n_t = config.resolution
    (lo, hi), = problem.space_domain
    dx = (hi - lo) / n_x
    x = lo + dx * np.arange(n_x)
    nu, rho = problem.coefficients["nu"], problem.coefficients["rho"]
    t0, dt_out = _time_axis(problem, n_t)
    # explicit diffusion limit dx^2/(2 nu); reaction limit 1/rho
    dt_max = config.cfl_safety * min(dx * dx / (2.0 * nu), 1.0 / max(rho, 1e-300))
    n_sub, dt = _substeps(dt_out, dt_max, config.dt)
    u = _initial_1d(ic, x)
    out = np.empty((1, n_t, n_x))
    out[0, 0] = u
    for k in range(1, n_t):
        for _ in range(n_sub):
            u = u + (dt * nu) * _lap(u, dx)
            u = u + (dt * rho) * u * (1.0 - u)
        out[0, k] = u
    return GridField("diffreact", (n_x, n_t), (dx, dt_out), (lo, t0), ("u",), out, _ic_record(ic))


def _godunov_flux(ul, ur):
    # exact Riemann flux for the convex flux f(u) = u^2/2
    return np.maximum(0.5 * np.maximum(ul, 0.0) ** 2, 0.5 * np.minimum(ur, 0.0) ** 2)


def _mc_slope(u):
    # monotonized-central limited slope per cell
    fwd = np.roll(u, -1) - u
    bwd = u - np.roll(u, 1)
    lim = np.minimum(np.minimum(2.0 * np.abs(fwd), 2.0 * np.abs(bwd)), 0.5 * np.abs(fwd + bwd))
    return np.where(fwd * bwd > 0, np.sign(fwd) * lim, 0.0)


def _burgers_rhs(u, dx, visc, scheme="muscl"):
    if scheme == "muscl":
        s = _mc_slope(u)
        ul, ur = u + 0.5 * s, np.roll(u - 0.5 * s, -1)
    else:
        ul, ur = u, np.roll(u, -1)
    flux = _godunov_flux(ul, ur)  # interface j+1/2
    return -(flux - np.roll(flux, 1)) / dx + visc * _lap(u, dx)


def solve_burgers(ic, config: SolverConfig | None = None, problem: PdeProblem | None = None,
                  scheme: str = "muscl") -> GridField:
    """Burgers reference solution.

    ``scheme="upwind"`` uses cell averages directly as the Riemann states
    (first order); ``"muscl"`` reconstructs them with MC-limited slopes, which
    is second order where the solution is smooth. Both feed the same upwind
    Godunov flux.
    """
    if scheme not in ("muscl", "upwind"):
        raise ConfigError(f"unknown Burgers scheme {scheme!r}")
    problem = problem or make_problem("burgers")
    config = config or SolverConfig(DESK_RESOLUTION["burgers"])
    n_x, n_t = config.resolution
    (lo, hi), = problem.space_domain
    dx = (hi - lo) / n_x
    x = lo + dx * np.arange(n_x)
    visc = problem.coefficients["nu"] / math.pi
    t0, dt_out = _time_axis(problem, n_t)
    u = _initial_1d(ic, x)
    out = np.empty((1, n_t, n_x))
    out[0, 0] = u
    for k in range(1, n_t):
        remaining = dt_out
        # the advective limit can tighten as gradients steepen; re-plan per output interval
        speed = max(np.max(np.abs(u)), 1e-12)
        dt_max = config.cfl_safety / (speed / dx + 2.0 * visc / (dx * dx))
        n_sub, dt = _substeps(remaining, dt_max, config.dt)
        for _ in range(n_sub):
            # two-stage SSP Runge-Kutta (Heun)
            u1 = u + dt * _burgers_rhs(u, dx, visc, scheme)
            u = 0.5 * (u + u1 + dt * _burgers_rhs(u1, dx, visc, scheme))
        out[0, k] = u
    return GridField("burgers", (n_x, n_t), (dx, dt_out), (lo, t0), ("u",), out, _ic_record(ic))


def _swe_flux(h, mn, mt, g):
    """Flux normal to a face, given depth and normal/tangential momentum."""
    un = mn / h
    return mn, mn * un + 0.5 * g * h * h, mt * un


def _rusanov(hl, mnl, mtl, hr, mnr, mtr, g):
    fl = _swe_flux(hl, mnl, mtl, g)
    fr = _swe_flux(hr, mnr, mtr, g)
    a = np.maximum(np.abs(mnl / hl) + np.sqrt(g * hl), np.abs(mnr / hr) + np.sqrt(g * hr))
    return tuple(
        0.5 * (fa + fb) - 0.5 * a * (qr - ql)
        for fa, fb, ql, qr in zip(fl, fr, (hl, mnl, mtl), (hr, mnr, mtr))
    )


def _swe_step(h, hu, hv, dt, dx, dy, g):
    # arrays indexed [y, x]; pad one ghost layer with zero-gradient extrapolation
    H, U, V = (np.pad(q, 1, mode="edge") for q in (h, hu, hv))
    # x faces: between columns i and i+1 of the padded interior rows
    fh, fu, fv = _rusanov(
        H[1:-1, :-1], U[1:-1, :-1], V[1:-1, :-1], H[1:-1, 1:], U[1:-1, 1:], V[1:-1, 1:], g
    )
    # y faces: normal momentum is hv, tangential hu
    gh, gv, gu = _rusanov(
        H[:-1, 1:-1], V[:-1, 1:-1], U[:-1, 1:-1], H[1:, 1:-1], V[1:, 1:-1], U[1:, 1:-1], g
    )
    cx, cy = dt / dx, dt / dy
    h = h - cx * (fh[:, 1:] - fh[:, :-1]) - cy * (gh[1:, :] - gh[:-1, :])
    hu = hu - cx * (fu[:, 1:] - fu[:, :-1]) - cy * (gu[1:, :] - gu[:-1, :])
    hv = hv - cx * (fv[:, 1:] - fv[:, :-1]) - cy * (gv[1:, :] - gv[:-1, :])
    return h, hu, hv


def solve_swe(ic, config: SolverConfig | None = None, problem: PdeProblem | None = None) -> GridField:
    """Radial dam break. ``ic`` is a dam-break spec, a radius, or an ``h0`` array over ``[y, x]``."""
    problem = problem or make_problem("swe")
    config = config or SolverConfig(DESK_RESOLUTION["swe"])
    n_x, n_y, n_t = config.resolution
    (xlo, xhi), (ylo, yhi) = problem.space_domain
    dx, dy = (xhi - xlo) / n_x, (yhi - ylo) / n_y
    xc = xlo + dx * (np.arange(n_x) + 0.5)
    yc = ylo + dy * (np.arange(n_y) + 0.5)
    X, Y = np.meshgrid(xc, yc)
    if isinstance(ic, InitialConditionSpec):
        if ic.variant != "dambreak":
            raise ContractError("the shallow water solver needs a dam-break initial condition")
        h = _column(ic.radius, X, Y)
    elif np.ndim(ic) == 0:
        r = float(ic)
        if not 0.0 <= r <= 0.7:
            raise ContractError("dam-break radius must lie in [0, 0.7]")
        h = _column(r, X, Y)
    else:
        h = np.asarray(ic, dtype=np.float64).copy()
        if h.shape != (n_y, n_x):
            raise ContractError("h0 array does not match the grid")
    g = problem.coefficients["g"]
    hu = np.zeros_like(h)
    hv = np.zeros_like(h)
    t0, dt_out = _time_axis(problem, n_t)
    out = np.empty((3, n_t, n_y, n_x))
    out[:, 0] = h, hu / h, hv / h
    for k in range(1, n_t):
        t_left = dt_out
        while t_left > 1e-14 * dt_out:
            c = np.sqrt(g * h)
            rate = np.max(np.abs(hu / h) + c) / dx + np.max(np.abs(hv / h) + c) / dy
            dt_max = config.cfl_safety / rate
            if config.dt is not None and config.dt > dt_max:
                raise ConfigError(f"time step {config.dt:g} exceeds the stability limit {dt_max:g}")
            dt = min(config.dt or dt_max, t_left)
            h, hu, hv = _swe_step(h, hu, hv, dt, dx, dy, g)
            t_left -= dt
        if not np.all(h > 0):
            raise ContractError("water depth became nonpositive")
        out[:, k] = h, hu / h, hv / h
    return GridField(
        "swe", (n_x, n_y, n_t), (dx, dy, dt_out), (xc[0], yc[0], t0), ("h", "u", "v"), out, _ic_record(ic)
    )


def solve(kind: str, ic, config: SolverConfig | None = None) -> GridField:
    return {"diffreact": solve_diffreact, "burgers": solve_burgers, "swe": solve_swe}[kind](ic, config)


# ---------------------------------------------------------------------------
# grid files: magic, u64 header length, JSON header, little-endian float64 payload


def write_grid(grid: GridField, path) -> None:
    header = {
        "kind": grid.kind,
        "dims": list(grid.dims),
        "spacings": list(grid.spacings),
        "origin": list(grid.origin),
        "field_names": list(grid.field_names),
        "ic": grid.ic,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def read_grid(path) -> GridField:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic number: not an ATLGRID1 file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise FormatError("truncated header length")
    (n,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + n:
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[pos : pos + n].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        names = tuple(header["field_names"])
        spacings, origin = header["spacings"], header["origin"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}") from exc
    if len(spacings) != len(dims) or len(origin) != len(dims) or not names or min(dims, default=0) < 1:
        raise FormatError("header dimensions are inconsistent")
    pos += n
    payload = raw[pos:]
    count = len(names) * math.prod(dims)
    if len(payload) % 8:
        raise FormatError("payload is not a whole number of float64 values")
    if len(payload) // 8 != count:
        raise FormatError(f"payload holds {len(payload) // 8} values, header implies {count}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    values = values.reshape(len(names), dims[-1], *reversed(dims[:-1]))
    try:
        return GridField(header["kind"], dims, spacings, origin, names, values, header.get("ic"))
    except ContractError as exc:
        raise FormatError(str(exc)) from exc
