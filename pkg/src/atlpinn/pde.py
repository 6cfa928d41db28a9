"""Diffusion-Reaction, Burgers and Shallow Water problems and the PINN loss.

Network inputs are ordered ``(x, t)`` for the 1-D problems and ``(x, y, t)``
for Shallow Water. Shallow Water networks output ``(h, u, v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ContractError, SpecError

KINDS = ("diffreact", "burgers", "swe")


@dataclass(frozen=True)
class PdeProblem:
    kind: str
    coefficients: Mapping[str, float]
    space_domain: tuple[tuple[float, float], ...]
    time_domain: tuple[float, float]
    field_count: int

    @property
    def space_dim(self) -> int:
        return len(self.space_domain)

    @property
    def input_dim(self) -> int:
        return self.space_dim + 1

    @property
    def input_names(self) -> tuple[str, ...]:
        return ("x", "t") if self.space_dim == 1 else ("x", "y", "t")

    @property
    def field_names(self) -> tuple[str, ...]:
        return ("u",) if self.field_count == 1 else ("h", "u", "v")


def make_problem(kind: str, **overrides: float) -> PdeProblem:
    """The problem with its default coefficients; ``overrides`` replace coefficients."""
    if kind == "diffreact":
        coeffs = {"nu": 0.5, "rho": 1.0}
        p = PdeProblem(kind, coeffs, ((0.0, 1.0),), (0.0, 1.0), 1)
    elif kind == "burgers":
        coeffs = {"nu": 0.01}
        p = PdeProblem(kind, coeffs, ((0.0, 1.0),), (0.0, 2.0), 1)
    elif kind == "swe":
        coeffs = {"g": 1.0}
        p = PdeProblem(kind, coeffs, ((-2.5, 2.5), (-2.5, 2.5)), (0.0, 1.0), 3)
    else:
        raise SpecError(f"unknown problem kind {kind!r}")
    unknown = set(overrides) - set(coeffs)
    if unknown:
        raise SpecError(f"unknown coefficients for {kind}: {sorted(unknown)}")
    if overrides:
        p = PdeProblem(kind, {**coeffs, **overrides}, p.space_domain, p.time_domain, p.field_count)
    return p


# ---------------------------------------------------------------------------
# initial conditions


@dataclass(frozen=True)
class InitialConditionSpec:
    """Either a two-term sinusoid superposition or a radial dam break."""

    variant: str
    amplitudes: tuple[float, ...] = ()
    wavenumbers: tuple[int, ...] = ()
    phases: tuple[float, ...] = ()
    length: float = 1.0
    radius: float | None = None

    def __post_init__(self):
        if self.variant == "sinusoid":
            if not (len(self.amplitudes) == len(self.wavenumbers) == len(self.phases) == 2):
                raise SpecError("a sinusoid superposition has exactly two terms")
        elif self.variant == "dambreak":
            if self.radius is None or not 0.3 <= self.radius <= 0.7:
                raise SpecError("dam-break radius must lie in [0.3, 0.7]")
        else:
            raise SpecError(f"unknown initial condition variant {self.variant!r}")

    @classmethod
    def sinusoid(cls, amplitudes, wavenumbers, phases, length=1.0):
        return cls(
            "sinusoid",
            tuple(float(a) for a in amplitudes),
            tuple(int(n) for n in wavenumbers),
            tuple(float(p) for p in phases),
            float(length),
        )

    @classmethod
    def dambreak(cls, radius):
        return cls("dambreak", radius=float(radius))

    def to_dict(self) -> dict:
        if self.variant == "sinusoid":
            return {
                "variant": "sinusoid",
                "amplitudes": list(self.amplitudes),
                "wavenumbers": list(self.wavenumbers),
                "phases": list(self.phases),
                "length": self.length,
            }
        return {"variant": "dambreak", "radius": self.radius}

    @classmethod
    def from_dict(cls, d: Mapping) -> InitialConditionSpec:
        if d.get("variant") == "sinusoid":
            return cls.sinusoid(d["amplitudes"], d["wavenumbers"], d["phases"], d.get("length", 1.0))
        if d.get("variant") == "dambreak":
            return cls.dambreak(d["radius"])
        raise SpecError(f"unknown initial condition variant {d.get('variant')!r}")


def sample_ic(kind: str, rng: np.random.Generator) -> InitialConditionSpec:
    """Draw a random initial condition of the family used by ``kind``."""
    if kind in ("diffreact", "burgers"):
        return InitialConditionSpec.sinusoid(
            rng.uniform(0.0, 1.0, 2), rng.integers(1, 9, 2), rng.uniform(0.0, 2 * math.pi, 2), 1.0
        )
    if kind == "swe":
        return InitialConditionSpec.dambreak(rng.uniform(0.3, 0.7))
    raise SpecError(f"unknown problem kind {kind!r}")


def eval_ic_sinusoid(spec: InitialConditionSpec, x) -> np.ndarray:
    if spec.variant != "sinusoid":
        raise ContractError("not a sinusoid initial condition")
    x = np.asarray(x, dtype=np.float64)
    u = np.zeros_like(x)
    for a, n, phi in zip(spec.amplitudes, spec.wavenumbers, spec.phases):
        u = u + a * np.sin(2 * math.pi * n * x / spec.length + phi)
    return u


def eval_ic_dambreak(r: float, x, y) -> np.ndarray:
    """Water column of height 2 inside radius ``r`` around the origin, 1 outside."""
    if not 0.3 <= r <= 0.7:
        raise ContractError("dam-break radius must lie in [0.3, 0.7]")
    return _column(r, x, y)


def _column(r, x, y):
    rr = np.hypot(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return np.where(rr < r, 2.0, 1.0)


def initial_fields(ic: InitialConditionSpec, *coords) -> list[np.ndarray]:
    """Target values of every field at ``t = 0`` for the given spatial coordinates."""
    if ic.variant == "sinusoid":
        return [eval_ic_sinusoid(ic, coords[0])]
    h = eval_ic_dambreak(ic.radius, coords[0], coords[1])
    return [h, np.zeros_like(h), np.zeros_like(h)]


# ---------------------------------------------------------------------------
# residual operators (work on tape nodes or plain arrays)


def residual_diffreact(u, du_dt, du_dxx, coeffs):
    nu, rho = coeffs["nu"], coeffs["rho"]
    return du_dt - nu * du_dxx - rho * u * (1.0 - u)


def residual_burgers(u, du_dt, du_dx, du_dxx, coeffs):
    # convective form u*u_x of d/dx(u^2/2)
    return du_dt + u * du_dx - (coeffs["nu"] / math.pi) * du_dxx


def residual_swe(h, u, v, d: Mapping[str, object], coeffs):
    """Mass and momentum residuals of the shallow water system with flat bottom.

    ``d`` maps ``"h_t"``, ``"u_x"`` and so on to first derivatives. Products
    are expanded, e.g. ``d(hu)/dt = h u_t + u h_t``.
    """
    g = coeffs["g"]
    h_t, h_x, h_y = d["h_t"], d["h_x"], d["h_y"]
    u_t, u_x, u_y = d["u_t"], d["u_x"], d["u_y"]
    v_t, v_x, v_y = d["v_t"], d["v_x"], d["v_y"]
    hu = h * u
    hv = h * v
    mass = h_t + (h_x * u + h * u_x) + (h_y * v + h * v_y)
    # d(huv) = uv h_. + hv u_. + hu v_.
    uv = u * v
    xmom = (
        h * u_t + u * h_t
        + h_x * (u * u) + 2.0 * hu * u_x + g * h * h_x
        + uv * h_y + hv * u_y + hu * v_y
    )
    ymom = (
        h * v_t + v * h_t
        + uv * h_x + hv * u_x + hu * v_x
        + h_y * (v * v) + 2.0 * hv * v_y + g * h * h_y
    )
    return mass, xmom, ymom


def pde_residuals(problem: PdeProblem, fields, inputs) -> list:
    """Residual nodes for network outputs ``fields`` built from input channels ``inputs``."""
    c = problem.coefficients
    if problem.kind == "diffreact":
        (u,) = fields
        x, t = inputs
        u_t, u_x = ad.input_derivatives(u, [t, x])
        u_xx = ad.input_derivative(u_x, x)
        return [residual_diffreact(u, u_t, u_xx, c)]
    if problem.kind == "burgers":
        (u,) = fields
        x, t = inputs
        u_t, u_x = ad.input_derivatives(u, [t, x])
        u_xx = ad.input_derivative(u_x, x)
        return [residual_burgers(u, u_t, u_x, u_xx, c)]
    x, y, t = inputs
    d = {}
    for name, f in zip(("h", "u", "v"), fields):
        f_t, f_x, f_y = ad.input_derivatives(f, [t, x, y])
        d[f"{name}_t"], d[f"{name}_x"], d[f"{name}_y"] = f_t, f_x, f_y
    return list(residual_swe(*fields, d, c))


# ---------------------------------------------------------------------------
# loss assembly


@dataclass(frozen=True)
class LossWeights:
    W_f: float = 1.0
    W_b: float = 1.0
    W_0: float = 1.0
    W_d: float = 0.0

    def __post_init__(self):
        for name in ("W_f", "W_b", "W_0", "W_d"):
            w = getattr(self, name)
            if not math.isfinite(w) or w < 0:
                raise ContractError(f"loss weight {name} must be finite and nonnegative")


@dataclass
class LossBreakdown:
    L_f: float
    L_b: float
    L_0: float
    L_d: float
    total: float
    node: ad.Var | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {"L_f": self.L_f, "L_b": self.L_b, "L_0": self.L_0, "L_d": self.L_d, "total": self.total}


def _mean_sq(terms):
    acc = None
    for r in terms:
        m = (r * r).mean()
        acc = m if acc is None else acc + m
    return acc * (1.0 / len(terms))


def _channels(tape: ad.Tape, batch, names):
    return [tape.input(batch.coords[n], name=n) for n in names]


def assemble_loss(problem: PdeProblem, net: nets.NetworkAssembly, task, batches, weights: LossWeights = LossWeights(),
                  tape: ad.Tape | None = None) -> LossBreakdown:
    """Weighted PINN loss for one task on a fresh (or given) tape.

    ``batches`` needs ``collocation``, ``boundary_pairs`` (a list of
    ``(side_a, side_b)`` batches) and ``initial`` point batches, and may carry
    ``data`` with ``values`` per field for the supervised term.
    """
    tape = tape or ad.Tape()
    names = problem.input_names
    coll = batches.collocation
    pairs = batches.boundary_pairs
    init = batches.initial
    if coll is None or len(coll) == 0:
        raise ContractError("collocation batch is empty")
    if not pairs or any(len(a) == 0 for a, _ in pairs):
        raise ContractError("boundary batch is empty")
    if init is None or len(init) == 0:
        raise ContractError("initial batch is empty")

    xs = _channels(tape, coll, names)
    fields = nets.forward(net, task, xs)
    L_f = _mean_sq(pde_residuals(problem, fields, xs))

    diffs = []
    for side_a, side_b in pairs:
        fa = nets.forward(net, task, _channels(tape, side_a, names))
        fb = nets.forward(net, task, _channels(tape, side_b, names))
        diffs.extend(a - b for a, b in zip(fa, fb))
    L_b = _mean_sq(diffs)

    f0 = nets.forward(net, task, _channels(tape, init, names))
    targets = initial_fields(batches.ic, *[init.coords[n] for n in names[:-1]])
    L_0 = _mean_sq([f - tgt[:, None] for f, tgt in zip(f0, targets)])

    total = weights.W_f * L_f + weights.W_b * L_b + weights.W_0 * L_0
    L_d = None
    data = getattr(batches, "data", None)
    if data is not None and len(data) > 0:
        fd = nets.forward(net, task, _channels(tape, data, names))
        L_d = _mean_sq([f - np.asarray(val)[:, None] for f, val in zip(fd, data.values)])
        total = total + weights.W_d * L_d
    return LossBreakdown(
        float(L_f.value),
        float(L_b.value),
        float(L_0.value),
        0.0 if L_d is None else float(L_d.value),
        float(total.value),
        total,
    )
