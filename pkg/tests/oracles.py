"""Independent reference implementations used only by the tests.

Everything here is written with plain Python loops and shares no code with
the package beyond numpy arrays.
"""

from __future__ import annotations

import math

import numpy as np


class MacCounter:
    def __init__(self):
        self.count = 0


def naive_conv3d(x, w, stride, padding, counter: MacCounter | None = None):
    """x [Ci, D, H, W], w [Co, Ci, kz, kx, ky]; every multiply-accumulate over a
    kernel window is executed (and counted), padded taps included."""
    ci, d, h, wd = x.shape
    co, _, kz, kx, ky = w.shape
    sz, sx, sy = stride
    pz, px, py = padding
    do = (d + 2 * pz - kz) // sz + 1
    ho = (h + 2 * px - kx) // sx + 1
    wo = (wd + 2 * py - ky) // sy + 1
    out = np.zeros((co, do, ho, wo))
    for o in range(co):
        for a in range(do):
            for b in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for i in range(ci):
                        for p in range(kz):
                            for q in range(kx):
                                for r in range(ky):
                                    zz, yy, xx = a * sz + p - pz, b * sx + q - px, c * sy + r - py
                                    inside = 0 <= zz < d and 0 <= yy < h and 0 <= xx < wd
                                    val = x[i, zz, yy, xx] if inside else 0.0
                                    acc += val * w[o, i, p, q, r]
                                    if counter is not None:
                                        counter.count += 1
                    out[o, a, b, c] = acc
    return out


def conv_taps(in_shape, w_shape, stride, padding):
    """For each flattened output neuron of a 3-D conv, the list of
    (flat input index, weight index tuple) pairs that feed it."""
    ci, d, h, wd = in_shape
    co, _, kz, kx, ky = w_shape
    sz, sx, sy = stride
    pz, px, py = padding
    do = (d + 2 * pz - kz) // sz + 1
    ho = (h + 2 * px - kx) // sx + 1
    wo = (wd + 2 * py - ky) // sy + 1
    taps = []
    for o in range(co):
        for a in range(do):
            for b in range(ho):
                for c in range(wo):
                    lst = []
                    for i in range(ci):
                        for p in range(kz):
                            for q in range(kx):
                                for r in range(ky):
                                    zz, yy, xx = a * sz + p - pz, b * sx + q - px, c * sy + r - py
                                    if 0 <= zz < d and 0 <= yy < h and 0 <= xx < wd:
                                        flat = ((i * d + zz) * h + yy) * wd + xx
                                        lst.append((flat, (o, i, p, q, r)))
                    taps.append(lst)
    return taps


def dense_taps(n_in, n_out):
    return [[(j, (k, j)) for j in range(n_in)] for k in range(n_out)]


def naive_snn(x_flat, layers, T):
    """Time-major brute-force simulation.

    ``layers`` is a list of dicts with ``taps``, ``w`` and, for hidden layers,
    ``leak`` and ``threshold``; the last layer is the non-spiking accumulator.
    Returns (final output potentials, list of per-step spike lists per hidden layer).
    """
    hidden = layers[:-1]
    out = layers[-1]
    u = [[0.0] * len(L["taps"]) for L in hidden]
    o_prev = [[0.0] * len(L["taps"]) for L in hidden]
    u_out = [0.0] * len(out["taps"])
    record = [[] for _ in hidden]
    for _ in range(T):
        inp = list(x_flat)
        for li, L in enumerate(hidden):
            spikes = []
            for k, taps in enumerate(L["taps"]):
                drive = 0.0
                for j, widx in taps:
                    drive += inp[j] * L["w"][widx]
                uk = L["leak"] * u[li][k] + drive - L["threshold"] * o_prev[li][k]
                u[li][k] = uk
                z = uk / L["threshold"] - 1.0
                spikes.append(1.0 if z > 0 else 0.0)
            o_prev[li] = spikes
            record[li].append(spikes)
            inp = spikes
        for k, taps in enumerate(out["taps"]):
            drive = 0.0
            for j, widx in taps:
                drive += inp[j] * out["w"][widx]
            u_out[k] = u_out[k] + drive
    return u_out, record


# ---------------------------------------------------------------------------
# scalar reverse-mode tape


class Node:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = float(value)
        self.parents = list(parents)  # (node, local derivative)
        self.grad = 0.0


def add(*xs):
    return Node(sum(x.value for x in xs), [(x, 1.0) for x in xs])


def mul(a, b):
    return Node(a.value * b.value, [(a, b.value), (b, a.value)])


def mulc(a, c):
    return Node(a.value * c, [(a, c)])


def div(a, b):
    return Node(a.value / b.value, [(a, 1.0 / b.value), (b, -a.value / b.value**2)])


def backprop(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = 1.0
    for node in reversed(order):
        for p, d in node.parents:
            p.grad += node.grad * d


def _round_away(x):
    return math.copysign(math.floor(abs(x) + 0.5), x)


def affine_fake_quant(w, bits):
    lo, hi = float(np.min(w)), float(np.max(w))
    s = (2**bits - 1) / (hi - lo)
    z = -(2 ** (bits - 1)) - _round_away(s * lo)
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    out = np.empty_like(w, dtype=np.float64)
    for idx in np.ndindex(w.shape):
        q = min(max(_round_away(s * w[idx]) + z, qmin), qmax)
        out[idx] = (q - z) / s
    return out, lo, hi


def bptt_oracle(x_batch, labels, layers, T, gamma, bits=None):
    """Gradients of the mean cross-entropy over the batch, by unrolling the
    whole graph into scalar nodes and back-propagating.

    Spike nodes use the triangular surrogate as their local derivative;
    fake-quantized weights pass the gradient straight through (inside range).
    Returns ``(loss, {"w": [grad arrays], "v": [...], "leak": [...]})``.
    """
    w_nodes, w_hat = [], []
    for L in layers:
        nodes = np.empty(L["w"].shape, dtype=object)
        for idx in np.ndindex(L["w"].shape):
            nodes[idx] = Node(L["w"][idx])
        w_nodes.append(nodes)
        if bits is None:
            w_hat.append(nodes)
        else:
            fq, lo, hi = affine_fake_quant(L["w"], bits)
            hat = np.empty(L["w"].shape, dtype=object)
            for idx in np.ndindex(L["w"].shape):
                inside = 1.0 if lo <= L["w"][idx] <= hi else 0.0
                hat[idx] = Node(fq[idx], [(nodes[idx], inside)])
            w_hat.append(hat)
    hidden = layers[:-1]
    v_nodes = [Node(L["threshold"]) for L in hidden]
    l_nodes = [Node(L["leak"]) for L in hidden]

    total_terms = []
    loss_value = 0.0
    B = len(x_batch)
    for x_flat, label in zip(x_batch, labels):
        u = [[Node(0.0) for _ in L["taps"]] for L in hidden]
        o_prev = [[Node(0.0) for _ in L["taps"]] for L in hidden]
        u_out = [Node(0.0) for _ in layers[-1]["taps"]]
        x_nodes = [Node(v) for v in x_flat]
        for _ in range(T):
            inp = x_nodes
            for li, L in enumerate(hidden):
                v, lam = v_nodes[li], l_nodes[li]
                spikes, new_u = [], []
                for k, taps in enumerate(L["taps"]):
                    drive = add(*[mul(inp[j], w_hat[li][widx]) for j, widx in taps]) if taps else Node(0.0)
                    uk = add(mul(lam, u[li][k]), drive, mulc(mul(v, o_prev[li][k]), -1.0))
                    z = add(div(uk, v), Node(-1.0))
                    sg = gamma * max(0.0, 1.0 - abs(z.value))
                    spikes.append(Node(1.0 if z.value > 0 else 0.0, [(z, sg)]))
                    new_u.append(uk)
                u[li] = new_u
                o_prev[li] = spikes
                inp = spikes
            out_hat = w_hat[-1]
            u_out = [add(u_out[k], *[mul(inp[j], out_hat[widx]) for j, widx in taps])
                     for k, taps in enumerate(layers[-1]["taps"])]
        vals = np.array([n.value for n in u_out])
        m = vals.max()
        e = np.exp(vals - m)
        p = e / e.sum()
        loss_value += -math.log(p[label]) / B
        y = np.zeros_like(p)
        y[label] = 1.0
        total_terms.append(Node(-math.log(p[label]) / B, [(n, (p[k] - y[k]) / B) for k, n in enumerate(u_out)]))
    root = add(*total_terms)
    backprop(root)
    grads = {
        "w": [np.vectorize(lambda n: n.grad, otypes=[float])(nodes) for nodes in w_nodes],
        "v": [n.grad for n in v_nodes],
        "leak": [n.grad for n in l_nodes],
    }
    return loss_value, grads
