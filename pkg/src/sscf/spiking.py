"""Leaky integrate-and-fire neurons with hard reset and a triangular surrogate.

Per step::

    U'  = tau * U + X            (leaky integration)
    S   = H(U' - v_th)           (Heaviside spike)
    U   = U' * (1 - S)           (hard reset to zero)

The backward pass replaces dH/du with the triangular surrogate and treats the
reset factor ``(1 - S)`` as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_op


@dataclass(frozen=True)
class LifParams:
    tau: float = 0.5
    v_th: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.v_th > 0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if not self.surrogate_width > 0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")


@dataclass
class LifState:
    membrane: Tensor

    @classmethod
    def zeros(cls, shape) -> "LifState":
        return cls(Tensor(np.zeros(shape)))


def surrogate_grad(u_minus_vth, width: float) -> np.ndarray:
    """Triangular pseudo-derivative ``max(0, 1 - |u - v_th| / width) / width``."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    d = u_minus_vth.data if isinstance(u_minus_vth, Tensor) else np.asarray(u_minus_vth, dtype=float)
    return np.maximum(0.0, 1.0 - np.abs(d) / width) / width


def _fire(u_pre: np.ndarray, v_th: float) -> np.ndarray:
    return (u_pre >= v_th).astype(np.float64)


def lif_step(state: LifState, x: Tensor, params: LifParams) -> tuple[Tensor, LifState]:
    """Advance one time step.  Returns ``(spikes, new_state)``.

    Gradient flows to ``x`` and to the incoming membrane through the
    surrogate; the returned membrane carries the detached reset gate.
    """
    x = as_tensor(x)
    mem = state.membrane
    if x.shape != mem.shape:
        raise ValueError(f"input shape {x.shape} does not match membrane shape {mem.shape}")
    u_pre = params.tau * mem.data + x.data
    spikes = _fire(u_pre, params.v_th)
    sg = surrogate_grad(u_pre - params.v_th, params.surrogate_width)
    keep = 1.0 - spikes
    tau = params.tau

    def bw_spike(g):
        gu = g * sg
        return gu, tau * gu

    def bw_mem(g):
        gu = g * keep
        return gu, tau * gu

    s = make_op(spikes, (x, mem), bw_spike, "lif_spike")
    m = make_op(u_pre * keep, (x, mem), bw_mem, "lif_membrane")
    return s, LifState(m)


def lif_forward(x_seq: np.ndarray, params: LifParams) -> tuple[np.ndarray, np.ndarray]:
    """Plain numpy unroll.  Returns ``(spikes, pre_reset_membranes)``."""
    T = x_seq.shape[0]
    spikes = np.empty_like(x_seq)
    u_pre = np.empty_like(x_seq)
    mem = np.zeros(x_seq.shape[1:])
    for t in range(T):
        u = params.tau * mem + x_seq[t]
        s = _fire(u, params.v_th)
        u_pre[t] = u
        spikes[t] = s
        mem = u * (1.0 - s)
    return spikes, u_pre


def lif_layer(x_seq: Tensor, params: LifParams) -> Tensor:
    """Unroll LIF over the leading time axis from a zero membrane.

    Fused into a single tape node; its backward runs the recurrence
    ``dU'_t = dS_t * sg_t + (1 - S_t) * tau * dU'_{t+1}`` in reverse time.
    """
    x_seq = as_tensor(x_seq)
    if x_seq.ndim < 1 or x_seq.shape[0] < 1:
        raise ValueError("lif_layer needs at least one time step")
    spikes, u_pre = lif_forward(x_seq.data, params)
    tau = params.tau
    width = params.surrogate_width
    v_th = params.v_th

    def bw(g):
        gx = np.empty_like(g)
        carry = np.zeros(g.shape[1:])
        for t in range(g.shape[0] - 1, -1, -1):
            gu = g[t] * surrogate_grad(u_pre[t] - v_th, width) + carry * (1.0 - spikes[t])
            gx[t] = gu
            carry = tau * gu
        return (gx,)

    return make_op(spikes, (x_seq,), bw, "lif_layer")
