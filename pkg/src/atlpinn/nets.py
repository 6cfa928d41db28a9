"""Single-task PINN and the four two-task architectures (Hard, Soft, MMoE, PLE).

All parameters live in one flat float64 vector. The vector is laid out as
``[shared | private main | private aux]`` so each partition class is one
contiguous index range. Networks are evaluated on a caller-owned
:class:`~atlpinn.autodiff.Tape`; parameters are bound to the tape once per
tape and reused by every forward call on it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError, SpecError

MODES = ("single", "hard", "soft", "mmoe", "ple")
TASKS = ("main", "aux")
SHARED = "shared"


def task_name(task) -> str:
    if task in (0, "main"):
        return "main"
    if task in (1, "aux"):
        return "aux"
    raise ContractError(f"unknown task id {task!r}")


def philox(seed) -> np.random.Generator:
    """The package-wide PRNG: numpy's counter-based Philox4x64."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected tanh network.

    ``hidden_layers`` affine+tanh layers of ``width`` cells, then a linear
    output layer to ``output_dim``. ``output_dim=None`` drops the output layer
    so the stack is a feature extractor whose features are its last hidden
    activations (used for experts).
    """

    input_dim: int
    hidden_layers: int
    width: int
    output_dim: int | None = 1
    activation: str = "tanh"

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1 or self.input_dim < 1:
            raise SpecError("MlpSpec needs input_dim, hidden_layers and width >= 1")
        if self.output_dim is not None and self.output_dim < 1:
            raise SpecError("output_dim must be positive or None")
        if self.activation != "tanh":
            raise SpecError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.width] * self.hidden_layers
        if self.output_dim is not None:
            dims.append(self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def out_features(self) -> int:
        return self.width if self.output_dim is None else self.output_dim

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


@dataclass(frozen=True)
class ArchitectureSpec:
    mode: str
    single_spec: MlpSpec | None = None
    expert_spec: MlpSpec | None = None
    tower_spec: MlpSpec | None = None
    n_shared_experts: int = 1
    n_task_experts_per_task: int = 0
    n_tasks: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}")
        if self.n_tasks != 2:
            raise SpecError("exactly two tasks (main + aux) are supported")
        if self.mode == "single":
            if self.single_spec is None:
                raise SpecError("single mode needs single_spec")
            return
        if self.expert_spec is None or self.tower_spec is None:
            raise SpecError(f"{self.mode} mode needs expert_spec and tower_spec")
        if self.expert_spec.output_dim is not None:
            raise SpecError("expert stacks end at their last hidden layer (output_dim=None)")
        if self.mode == "hard" and (self.n_shared_experts != 1 or self.n_task_experts_per_task != 0):
            raise SpecError("hard mode uses one shared expert and no task experts")
        if self.mode == "mmoe" and self.n_task_experts_per_task != 0:
            raise SpecError("MMoE has no task-specific experts")
        if self.mode in ("soft", "ple") and self.n_task_experts_per_task < 1:
            raise SpecError(f"{self.mode} needs at least one task expert per task")
        if self.n_shared_experts < 1:
            raise SpecError("at least one shared expert is required")
        if self.tower_spec.input_dim != self.tower_input_dim:
            raise SpecError(
                f"tower input width {self.tower_spec.input_dim} does not match "
                f"expert feature width {self.tower_input_dim}"
            )

    @property
    def tower_input_dim(self) -> int:
        w = self.expert_spec.out_features
        if self.mode == "soft":
            return w * (self.n_shared_experts + self.n_task_experts_per_task)
        return w

    @property
    def input_dim(self) -> int:
        return (self.single_spec or self.expert_spec).input_dim

    @property
    def output_dim(self) -> int:
        return (self.single_spec or self.tower_spec).output_dim

    @classmethod
    def build_default(
        cls,
        mode: str,
        input_dim: int,
        output_dim: int,
        width: int,
        single_layers: int,
        expert_layers: int,
        tower_layers: int,
    ) -> ArchitectureSpec:
        """Spec for ``mode`` using the default expert counts for that mode."""
        if mode == "single":
            return cls(mode, single_spec=MlpSpec(input_dim, single_layers, width, output_dim))
        n_shared, n_task = {"hard": (1, 0), "soft": (1, 1), "mmoe": (3, 0), "ple": (1, 1)}[mode]
        expert = MlpSpec(input_dim, expert_layers, width, None)
        tower_in = width * (n_shared + n_task) if mode == "soft" else width
        tower = MlpSpec(tower_in, tower_layers, width, output_dim)
        return cls(mode, None, expert, tower, n_shared, n_task)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchitectureSpec:
        d = dict(d)
        for key in ("single_spec", "expert_spec", "tower_spec"):
            if d.get(key) is not None:
                d[key] = MlpSpec(**d[key])
        return cls(**d)


@dataclass(frozen=True)
class Layer:
    component: str
    index: int
    fan_in: int
    fan_out: int
    offset: int
    owner: str

    @property
    def size(self) -> int:
        return self.fan_in * self.fan_out + self.fan_out

    def weight(self, flat: np.ndarray) -> np.ndarray:
        return flat[self.offset : self.offset + self.fan_in * self.fan_out].reshape(self.fan_in, self.fan_out)

    def bias(self, flat: np.ndarray) -> np.ndarray:
        start = self.offset + self.fan_in * self.fan_out
        return flat[start : start + self.fan_out].reshape(1, self.fan_out)


@dataclass(frozen=True)
class ParameterPartition:
    """Index ranges ``[start, stop)`` per class: shared θ and private φ per task."""

    shared: tuple[int, int]
    private: dict[str, tuple[int, int]]

    def indices(self, cls: str) -> slice:
        lo, hi = self.shared if cls == SHARED else self.private[cls]
        return slice(lo, hi)

    def size(self, cls: str) -> int:
        lo, hi = self.shared if cls == SHARED else self.private[cls]
        return hi - lo

    def classes(self) -> list[str]:
        return [SHARED, *self.private]

    def check(self, total: int) -> None:
        ranges = sorted([self.shared, *self.private.values()])
        pos = 0
        for lo, hi in ranges:
            if lo != pos or hi < lo:
                raise SpecError("parameter partition has a gap or overlap")
            pos = hi
        if pos != total:
            raise SpecError("parameter partition does not cover the parameter vector")


def _component_plan(arch: ArchitectureSpec) -> list[tuple[str, str, MlpSpec | tuple[int, int]]]:
    """(component name, owner, spec) in layout order: shared first, then per task."""
    if arch.mode == "single":
        return [("net", "main", arch.single_spec)]
    plan: list = []
    for e in range(arch.n_shared_experts):
        plan.append((f"expert.shared.{e}", SHARED, arch.expert_spec))
    for t in TASKS:
        for e in range(arch.n_task_experts_per_task):
            plan.append((f"expert.{t}.{e}", t, arch.expert_spec))
        if arch.mode in ("mmoe", "ple"):
            n_gate = arch.n_shared_experts + arch.n_task_experts_per_task
            plan.append((f"gate.{t}", t, (arch.input_dim, n_gate)))
        plan.append((f"tower.{t}", t, arch.tower_spec))
    return plan


class NetworkAssembly:
    """Parameters plus wiring for one architecture."""

    def __init__(self, arch: ArchitectureSpec, parameters: np.ndarray, seed: int | None = None):
        self.arch = arch
        self.seed = seed
        self.layers: dict[str, list[Layer]] = {}
        offset = 0
        owners_seen: list[str] = []
        bounds: dict[str, list[int]] = {}
        for name, owner, spec in _component_plan(arch):
            dims = spec.layer_dims if isinstance(spec, MlpSpec) else [spec]
            layers = []
            for k, (fi, fo) in enumerate(dims):
                layer = Layer(name, k, fi, fo, offset, owner)
                layers.append(layer)
                b = bounds.setdefault(owner, [offset, offset])
                b[1] = offset + layer.size
                offset += layer.size
            self.layers[name] = layers
            if owner not in owners_seen:
                owners_seen.append(owner)
        self.n_params = offset
        if arch.mode == "single":
            self.partition = ParameterPartition((0, 0), {"main": tuple(bounds["main"])})
        else:
            self.partition = ParameterPartition(
                tuple(bounds[SHARED]), {t: tuple(bounds[t]) for t in TASKS}
            )
        self.partition.check(self.n_params)
        parameters = np.asarray(parameters, dtype=np.float64)
        if parameters.shape != (self.n_params,):
            raise SpecError(f"expected {self.n_params} parameters, got {parameters.shape}")
        self.parameters = parameters

    @property
    def mode(self) -> str:
        return self.arch.mode

    def with_parameters(self, parameters: np.ndarray) -> NetworkAssembly:
        return NetworkAssembly(self.arch, parameters, self.seed)

    def all_layers(self) -> list[Layer]:
        return [layer for layers in self.layers.values() for layer in layers]

    def bind(self, tape: ad.Tape) -> BoundNetwork:
        bound = tape.bindings.get(id(self))
        if bound is None or bound.net is not self:
            bound = BoundNetwork(self, tape)
            tape.bindings[id(self)] = bound
        return bound


def build(arch: ArchitectureSpec, seed: int) -> NetworkAssembly:
    """Glorot-uniform weights and zero biases, drawn from a Philox stream keyed by ``seed``."""
    template = NetworkAssembly(arch, np.zeros(_count(arch)), seed)
    rng = philox(seed)
    flat = np.zeros(template.n_params)
    for layer in template.all_layers():
        limit = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        w = rng.uniform(-limit, limit, size=layer.fan_in * layer.fan_out)
        flat[layer.offset : layer.offset + w.size] = w
    return NetworkAssembly(arch, flat, seed)


def _count(arch: ArchitectureSpec) -> int:
    total = 0
    for _, _, spec in _component_plan(arch):
        dims = spec.layer_dims if isinstance(spec, MlpSpec) else [spec]
        total += sum(i * o + o for i, o in dims)
    return total


def param_report(net: NetworkAssembly) -> dict[str, int]:
    p = net.partition
    report = {SHARED: p.size(SHARED)}
    for t in TASKS:
        report[t] = p.size(t) if t in p.private else 0
    report["total"] = net.n_params
    return report


class BoundNetwork:
    """A network's parameters as leaves on one tape."""

    def __init__(self, net: NetworkAssembly, tape: ad.Tape):
        self.net = net
        self.tape = tape
        self.leaves: dict[str, list[tuple[ad.Var, ad.Var]]] = {}
        for name, layers in net.layers.items():
            self.leaves[name] = [
                (tape.param(layer.weight(net.parameters).copy()), tape.param(layer.bias(net.parameters).copy()))
                for layer in layers
            ]

    def _mlp(self, name: str, x, spec: MlpSpec):
        leaves = self.leaves[name]
        for k, (w, b) in enumerate(leaves):
            x = ad.affine(x, w, b)
            if k < spec.hidden_layers:
                x = ad.tanh(x)
        return x

    def gate(self, task: str, x):
        ((w, b),) = self.leaves[f"gate.{task}"]
        return ad.softmax_rows(ad.affine(x, w, b))

    def features(self, task: str, x):
        """Expert features handed to the task tower."""
        arch = self.net.arch
        es = arch.expert_spec
        shared = [self._mlp(f"expert.shared.{e}", x, es) for e in range(arch.n_shared_experts)]
        own = [self._mlp(f"expert.{task}.{e}", x, es) for e in range(arch.n_task_experts_per_task)]
        if arch.mode == "hard":
            return shared[0]
        if arch.mode == "soft":
            return ad.concat_cols(*shared, *own)
        experts = shared + own
        g = self.gate(task, x)
        mixed = None
        for e, out in enumerate(experts):
            term = ad.mul(ad.slice_cols(g, e, e + 1), out)
            mixed = term if mixed is None else ad.add(mixed, term)
        return mixed

    def forward(self, task, coords) -> tuple[ad.Var, ...]:
        task = task_name(task)
        x = _stack_coords(coords, self.net.arch.input_dim)
        arch = self.net.arch
        if arch.mode == "single":
            if task != "main":
                raise ContractError("single-task networks only have the main task")
            y = self._mlp("net", x, arch.single_spec)
        else:
            y = self._mlp(f"tower.{task}", self.features(task, x), arch.tower_spec)
        if arch.output_dim == 1:
            return (y,)
        return tuple(ad.slice_cols(y, k, k + 1) for k in range(arch.output_dim))

    def flat_grad(self, loss: ad.Var) -> np.ndarray:
        """Gradient of a scalar loss as a vector aligned with ``net.parameters``."""
        names = list(self.leaves)
        wrt = [v for name in names for pair in self.leaves[name] for v in pair]
        grads = ad.grad(loss, wrt)
        flat = np.zeros(self.net.n_params)
        it = iter(grads)
        for name in names:
            for layer in self.net.layers[name]:
                gw, gb = next(it), next(it)
                n = layer.fan_in * layer.fan_out
                flat[layer.offset : layer.offset + n] = gw.reshape(-1)
                flat[layer.offset + n : layer.offset + layer.size] = gb.reshape(-1)
        return flat


def _stack_coords(coords, input_dim: int):
    if isinstance(coords, ad.Var):
        coords = (coords,)
    coords = tuple(coords)
    if len(coords) == 1 and coords[0].shape[1] == input_dim:
        return coords[0]
    if len(coords) != input_dim:
        raise ContractError(f"expected {input_dim} coordinate channels, got {len(coords)}")
    return ad.concat_cols(*coords)


def forward(net: NetworkAssembly, task, coords: Sequence[ad.Var]) -> tuple[ad.Var, ...]:
    """Evaluate ``net`` for ``task`` on the tape that owns ``coords``."""
    coords = (coords,) if isinstance(coords, ad.Var) else tuple(coords)
    return net.bind(coords[0].tape).forward(task, coords)


def predict(net: NetworkAssembly, task, points: np.ndarray, chunk: int = 20_000) -> np.ndarray:
    """Network outputs at ``points`` of shape ``(n, input_dim)``, evaluated in chunks."""
    points = np.asarray(points, dtype=np.float64)
    out = np.empty((points.shape[0], net.arch.output_dim))
    for start in range(0, points.shape[0], chunk):
        block = points[start : start + chunk]
        tape = ad.Tape(block.shape[0])
        x = tape.input(block)
        ys = forward(net, task, (x,))
        out[start : start + chunk] = np.concatenate([y.value for y in ys], axis=1)
    return out


def gate_weights(net: NetworkAssembly, task, points: np.ndarray) -> np.ndarray:
    if net.mode not in ("mmoe", "ple"):
        raise ContractError(f"{net.mode} networks have no gates")
    tape = ad.Tape()
    x = tape.input(np.asarray(points, dtype=np.float64))
    return net.bind(tape).gate(task_name(task), x).value


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float64 parameters


def save_checkpoint(net: NetworkAssembly, path) -> None:
    header = {
        "format": "atlpinn-checkpoint-1",
        "mode": net.mode,
        "arch": net.arch.to_dict(),
        "seed": net.seed,
        "n_params": net.n_params,
        "partition": {
            "shared": list(net.partition.shared),
            **{k: list(v) for k, v in net.partition.private.items()},
        },
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(net.parameters.astype("<f8").tobytes())


def load_checkpoint(path) -> NetworkAssembly:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise FormatError("checkpoint has no header line")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from exc
    if header.get("format") != "atlpinn-checkpoint-1":
        raise FormatError("not an atlpinn checkpoint")
    n = header["n_params"]
    if len(payload) != 8 * n:
        raise FormatError(f"checkpoint payload holds {len(payload)} bytes, expected {8 * n}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return NetworkAssembly(ArchitectureSpec.from_dict(header["arch"]), params, header.get("seed"))
