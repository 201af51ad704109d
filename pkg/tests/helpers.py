"""Shared oracles: central finite differences and loop references."""

import itertools

import numpy as np

from sscf.tensor import Tensor, backward, mul, sum_


def projected(fn, weights):
    """Scalar ``sum(fn(*xs) * weights)`` so one check covers the full Jacobian."""

    def loss(*xs):
        return sum_(mul(fn(*xs), Tensor(weights)))

    return loss


def numeric_grad(loss_fn, arrays, i, h=1e-5):
    """Central difference of ``loss_fn`` w.r.t. ``arrays[i]``."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[i][idx]
        base[i][idx] = orig + h
        fp = loss_fn(*[Tensor(a) for a in base]).item()
        base[i][idx] = orig - h
        fm = loss_fn(*[Tensor(a) for a in base]).item()
        base[i][idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def analytic_grads(loss_fn, arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(loss_fn(*ts))
    return [t.grad for t in ts]


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def gradcheck(loss_fn, arrays, h=1e-5):
    """Largest relative error over all inputs."""
    ana = analytic_grads(loss_fn, arrays)
    return max(rel_error(ana[i], numeric_grad(loss_fn, arrays, i, h)) for i in range(len(arrays)))


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[n, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = s + (0.0 if b is None else b[o])
    return out


def conv4d_loops(x, w, padding=1):
    """Direct-summation 4D correlation of ``[B,C,a,b,c,d]`` with ``[Co,C,3,3,3,3]``."""
    B, C = x.shape[:2]
    Co = w.shape[0]
    k = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 4)
    out_sp = tuple(n + 2 * padding - kk + 1 for n, kk in zip(x.shape[2:], k))
    out = np.zeros((B, Co) + out_sp)
    for n in range(B):
        for o in range(Co):
            for pos in itertools.product(*(range(m) for m in out_sp)):
                s = 0.0
                for c in range(C):
                    for tap in itertools.product(*(range(kk) for kk in k)):
                        src = tuple(p + t for p, t in zip(pos, tap))
                        s += xp[(n, c) + src] * w[(o, c) + tap]
                out[(n, o) + pos] = s
    return out
