"""Independent reference computations used by several test modules."""

import numpy as np

from gaal import model as M


def reference_forward(state, modality, x):
    """Straight-line MLP + head forward, written without the library's encode()."""
    enc = state.encoder_image if modality == "I" else state.encoder_tabular
    h = np.array(x, dtype=np.float64)
    n = len(enc.weights)
    for k in range(n):
        z = np.einsum("oi,bi->bo", enc.weights[k], h) + enc.biases[k]
        h = np.where(z > 0, z, 0.0) if k < n - 1 else z
    return np.einsum("yd,bd->by", state.head.weight, h) + state.head.bias


def reference_loss(state, modality, x, y):
    z = reference_forward(state, modality, x)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


def fd_gradients(state, modality, x, y, h=1e-5):
    """Central differences of the loss w.r.t. every tensor of the active branch and the head."""
    enc = state.encoder_image if modality == "I" else state.encoder_tabular
    tensors = list(enc.tensors()) + [state.head.weight, state.head.bias]
    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t[i]
            t[i] = old + h
            lp = reference_loss(state, modality, x, y)
            t[i] = old - h
            lm = reference_loss(state, modality, x, y)
            t[i] = old
            g[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def analytic_gradients(state, modality, x, y):
    res = M.backward(state, modality, x, y)
    return list(res.encoder_grads.tensors()) + [res.head_grad.weight, res.head_grad.bias]


def qp_oracle(g, a, eps):
    """min 1/2|x-g|^2 s.t. a.x >= eps by active-set reasoning and a KKT solve.

    Either the unconstrained optimum is feasible, or the constraint is active
    and [[I, -a], [a^T, 0]] [x; mu] = [g; eps] gives the minimiser.
    """
    g = np.asarray(g, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a @ g >= eps:
        return g.copy()
    n = g.size
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = np.eye(n)
    kkt[:n, n] = -a
    kkt[n, :n] = a
    rhs = np.concatenate([g, [eps]])
    return np.linalg.solve(kkt, rhs)[:n]
