"""Independent reference computations used by the tests."""
import itertools
import math

import numpy as np

from lehd import tensor as T


def finite_difference(f, arrays, h=1e-4):
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(build, arrays):
    params = [T.parameter(a.copy()) for a in arrays]
    with T.Tape():
        loss = build(*params)
    T.backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / denom)


def brute_force_tsp(coords):
    """Minimum closed tour length by enumerating (n-1)!/2 orders with node 0 fixed."""
    n = len(coords)
    D = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    best = math.inf
    for perm in itertools.permutations(range(1, n)):
        if perm[0] > perm[-1]:
            continue
        order = (0, *perm)
        c = sum(D[order[i], order[i + 1]] for i in range(n - 1)) + D[order[-1], 0]
        best = min(best, c)
    return best


def brute_force_path(coords, nodes, start, end):
    D = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    inner = [v for v in nodes if v not in (start, end)]
    best = math.inf
    for perm in itertools.permutations(inner):
        order = (start, *perm, end)
        best = min(best, sum(D[order[i], order[i + 1]] for i in range(len(order) - 1)))
    return best


def model_gradient_error(model, loss_fn, h=1e-5):
    """Relative error between backprop and central differences over every
    parameter of ``model`` for the scalar ``loss_fn(model)``."""
    model.zero_grad()
    with T.Tape():
        loss = loss_fn(model)
    T.backward(loss)
    an = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in model.params.values()]
    fd = finite_difference(lambda *_: loss_fn(model).item(), [p.data for p in model.params.values()], h)
    return rel_error(np.concatenate([a.ravel() for a in an]), np.concatenate([f.ravel() for f in fd]))
