"""Adam, the step-halving schedule, and the cosine-gated two-task update."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, TrainingError
from .nets import SHARED, TASKS, NetworkAssembly

# below this norm a gradient is treated as absent and the cosine is undefined
NORM_FLOOR = 1e-30


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    halve_every: int = 10_000

    def lr(self, iteration: int) -> float:
        return self.base_lr * 0.5 ** (iteration // self.halve_every)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not (params.shape == grads.shape == state.m.shape):
        raise ContractError("parameter, gradient and moment vectors differ in length")
    t = state.t + 1
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at step {t}", iteration=t)
    b1, b2 = state.betas
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * (grads * grads)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def cosine_similarity(g_main, g_aux) -> float | None:
    """Cosine of the angle between two gradients, or None when either vanishes."""
    a = np.asarray(g_main, dtype=np.float64)
    b = np.asarray(g_aux, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class GcsDecision:
    cosine: float | None
    aux_applied: bool


def gated_shared_gradient(g_main, g_aux, use_cosine: bool = True):
    """Effective gradient for the shared parameters.

    With the gate on, the auxiliary gradient is added only when the cosine is
    strictly positive; an undefined cosine counts as not positive. With the
    gate off, the sum is always used.
    """
    g_main = np.asarray(g_main, dtype=np.float64)
    g_aux = np.asarray(g_aux, dtype=np.float64)
    cos = cosine_similarity(g_main, g_aux)
    if not use_cosine:
        return g_main + g_aux, GcsDecision(cos, True)
    applied = cos is not None and cos > 0
    return (g_main + g_aux if applied else g_main.copy()), GcsDecision(cos, applied)


def init_states(net: NetworkAssembly) -> dict[str, AdamState]:
    p = net.partition
    return {cls: AdamState.zeros(p.size(cls)) for cls in p.classes()}


def _flat(net: NetworkAssembly, loss) -> np.ndarray:
    node = getattr(loss, "node", loss)
    if node is None:
        raise ContractError("loss carries no tape node")
    return net.bind(node.tape).flat_grad(node)


def gcs_update(net: NetworkAssembly, loss_main, loss_aux, states: dict[str, AdamState], lr: float,
               use_cosine: bool = True, grads: tuple[np.ndarray, np.ndarray] | None = None):
    """Two-task update: private parameters follow their own task, shared ones the gate.

    ``loss_main`` and ``loss_aux`` are scalar nodes (or loss breakdowns holding
    one) on live tapes; one reverse sweep per task yields all four gradient
    sets. ``grads`` may supply precomputed flat gradients instead. Each
    partition class has its own Adam state, fed with the gated raw gradient.
    Returns ``(new_net, new_states, decision)``.
    """
    p = net.partition
    if p.size(SHARED) == 0:
        raise ContractError("network has no shared parameters; use adam_step for single-task training")
    if grads is None:
        grads = (_flat(net, loss_main), _flat(net, loss_aux))
    g_main, g_aux = grads
    sh = p.indices(SHARED)
    g_shared, decision = gated_shared_gradient(g_main[sh], g_aux[sh], use_cosine)
    effective = {SHARED: g_shared, "main": g_main[p.indices("main")], "aux": g_aux[p.indices("aux")]}
    params = net.parameters.copy()
    new_states = dict(states)
    for cls in (SHARED, *TASKS):
        idx = p.indices(cls)
        params[idx], new_states[cls] = adam_step(states[cls], params[idx], effective[cls], lr)
    return net.with_parameters(params), new_states, decision
