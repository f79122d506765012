"""Fused loops for the ReLU layer of the UNF networks.

The numpy formulation allocates several (points x width) temporaries per
step, which dominates UNF training time.  Numba only vectorizes the loop over
hidden units when the short loop over input coordinates is unrolled, so one
kernel set is generated per input width ``k`` and cached.  Weights are passed
transposed, shape ``(k, m)``.
"""
import numba
import numpy as np

_TEMPLATE = '''
def forward(xbar, wt, b, a):
    n = xbar.shape[0]
    m = wt.shape[1]
    out = np.empty(n)
    h = np.empty(m)
    for p in range(n):
        {load_x}
        for r in range(m):
            u = b[r] {dot_w}
            h[r] = max(u, 0.0)
        out[p] = weighted_sum(a, h)
    return out


def forward_linearized(xbar, w0t, b0, dwt, db, a):
    n = xbar.shape[0]
    m = w0t.shape[1]
    out = np.empty(n)
    h = np.empty(m)
    for p in range(n):
        {load_x}
        for r in range(m):
            u = b0[r] {dot_w0}
            v = db[r] {dot_dw}
            h[r] = max(u, 0.0) + (v if u > 0.0 else 0.0)
        out[p] = weighted_sum(a, h)
    return out


def backward(xbar, wt, b, a, gn):
    n = xbar.shape[0]
    m = wt.shape[1]
    g = np.zeros(({k} + 1, m))
    for p in range(n):
        gp = gn[p]
        if gp == 0.0:
            continue
        {load_x}
        for r in range(m):
            u = b[r] {dot_w}
            s = gp if u > 0.0 else 0.0
            {acc_g}
            g[{k}, r] += s
    for c in range({k} + 1):
        for r in range(m):
            g[c, r] *= a[r]
    return g.T.copy()
'''

_CACHE = {}


@numba.njit(fastmath=True)
def _weighted_sum(a, h):
    acc = 0.0
    for r in range(a.shape[0]):
        acc += a[r] * h[r]
    return acc


def _build(k):
    src = _TEMPLATE.format(
        k=k,
        load_x="; ".join(f"x{c} = xbar[p, {c}]" for c in range(k)),
        dot_w="".join(f" + x{c} * wt[{c}, r]" for c in range(k)),
        dot_w0="".join(f" + x{c} * w0t[{c}, r]" for c in range(k)),
        dot_dw="".join(f" + x{c} * dwt[{c}, r]" for c in range(k)),
        acc_g="; ".join(f"g[{c}, r] += s * x{c}" for c in range(k)),
    )
    jit = numba.njit(fastmath=True)
    # one compiled reduction shared by both forwards keeps their summation
    # order identical, so zero offsets give bit-equal outputs
    ns = {"np": np, "weighted_sum": _weighted_sum}
    exec(compile(src, f"<flowlab relu kernels k={k}>", "exec"), ns)
    return {name: jit(ns[name]) for name in ("forward", "forward_linearized", "backward")}


def _kernels(k):
    if k not in _CACHE:
        _CACHE[k] = _build(k)
    return _CACHE[k]


def relu_forward(xbar, wt, b, a):
    """``sum_r a_r * relu(<w_r, xbar_p> + b_r)`` for every row ``p``."""
    return _kernels(xbar.shape[1])["forward"](xbar, wt, b, a)


def relu_forward_linearized(xbar, w0t, b0, dwt, db, a):
    """Pseudo-network value: ReLU gates frozen at the initial pre-activations."""
    return _kernels(xbar.shape[1])["forward_linearized"](xbar, w0t, b0, dwt, db, a)


def relu_backward(xbar, wt, b, a, gn):
    """Gradient of ``sum_p gn[p] * N(xbar[p])``; rows are ``[gw_r, gb_r]``."""
    return _kernels(xbar.shape[1])["backward"](xbar, wt, b, a, gn)
