"""Independent oracles shared by the test modules: central differences and small networks."""

import numpy as np

from atlpinn import autodiff as ad
from atlpinn import nets
from atlpinn.nets import ArchitectureSpec


def small_arch(mode, input_dim=2, output_dim=1, width=8, single_layers=3, expert_layers=2, tower_layers=2):
    return ArchitectureSpec.build_default(mode, input_dim, output_dim, width, single_layers, expert_layers,
                                          tower_layers)


def numpy_fn(net, task):
    """Plain-array evaluation of a network, used as the function under central differences."""
    return lambda pts: nets.predict(net, task, pts)


def central_first(f, pts, k, h=1e-5):
    e = np.zeros(pts.shape[1])
    e[k] = h
    return (f(pts + e) - f(pts - e)) / (2 * h)


def central_second(f, pts, k, h=1e-4):
    e = np.zeros(pts.shape[1])
    e[k] = h
    return (f(pts + e) - 2 * f(pts) + f(pts - e)) / h**2


def central_second_fourth(f, pts, k, h=1e-3):
    """Fourth-order five-point stencil for the second derivative."""
    e = np.zeros(pts.shape[1])
    e[k] = h
    return (-f(pts + 2 * e) + 16 * f(pts + e) - 30 * f(pts) + 16 * f(pts - e) - f(pts - 2 * e)) / (12 * h**2)


def norm_rel(ad_val, fd_val):
    """Relative error of a derivative field over a point set, in the 2-norm."""
    return np.linalg.norm(ad_val - fd_val) / np.linalg.norm(fd_val)


def ad_derivatives(net, task, pts):
    """First and second derivatives of every output w.r.t. every input channel via the tape.

    Returns arrays ``d1[k]`` and ``d2[k]`` of shape ``(n, output_dim)`` for channel ``k``.
    """
    tape = ad.Tape(pts.shape[0])
    chans = [tape.input(pts[:, k]) for k in range(pts.shape[1])]
    outs = nets.forward(net, task, chans)
    d1, d2 = [], []
    for k, c in enumerate(chans):
        d1.append(np.hstack([ad.input_derivative(o, c, 1).value for o in outs]))
        d2.append(np.hstack([ad.input_derivative(o, c, 2).value for o in outs]))
    return d1, d2


def pointwise_rel(ad_val, fd_val):
    return np.max(np.abs(ad_val - fd_val) / (np.abs(ad_val) + 1e-8))


def self_convergence(solver, ic, ns, problem, n_t=2, norm="max", **kw):
    """Fitted orders from successive grid differences ``u_N - u_2N`` on nested vertex grids.

    ``ns`` must double at each step; the order between consecutive differences
    is ``log2(|u_N - u_2N| / |u_2N - u_4N|)``. Errors use the final time slice.
    """
    from atlpinn.refsolve import SolverConfig

    sols = [solver(ic, SolverConfig((n, n_t)), problem, **kw).values[0, -1] for n in ns]
    diffs = []
    for coarse, fine in zip(sols, sols[1:]):
        e = coarse - fine[::2]
        diffs.append(np.max(np.abs(e)) if norm == "max" else np.sqrt(np.mean(e * e)))
    diffs = np.array(diffs)
    return np.log2(diffs[:-1] / diffs[1:]), diffs
