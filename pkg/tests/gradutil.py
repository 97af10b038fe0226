"""Finite-difference checks of end-to-end losses over network parameters."""

import numpy as np

from mkd.channel import dft_pilots, draw_channels, simulate_pilot_rx
from mkd.linalg import grad_check, rng_stream
from mkd.neural import build_networks
from mkd.training import end_to_end

# relative-error floor: entries with |g| below this are compared absolutely
GRAD_ATOL = 1e-6


def tiny_batch(cfg, size=8, seed=3):
    h = draw_channels(cfg, rng_stream(seed, "channel"), (size,))
    y = simulate_pilot_rx(h, dft_pilots(cfg), cfg, rng_stream(seed, "noise")).received
    return h, y


def check_network_gradients(cfg, feature, size=8, seed=3, indices_per_array=None, P=10.0):
    """Compare analytic and central-difference gradients of every parameter array.

    Returns a dict ``name -> GradCheckReport`` covering every receiver, the
    transmitter consumed by ``feature`` and the other transmitter (whose
    gradient must be exactly zero).
    """
    nets = build_networks(cfg, rng_stream(seed, "init"))
    h, y = tiny_batch(cfg, size, seed)
    tx_name, idle_name = ("auxiliary", "transmitter") if feature == "raw" else ("transmitter", "auxiliary")
    tx = getattr(nets, tx_name)
    res = end_to_end(nets, tx, h, y, P, feature)

    arrays, analytic, names = [], [], []
    for k, rx in enumerate(nets.receivers):
        for i, (a, g) in enumerate(zip(rx.arrays(), res.grads_rx[k])):
            arrays.append(a), analytic.append(g), names.append(f"rx{k + 1}.{i}")
    for i, (a, g) in enumerate(zip(tx.arrays(), res.grads_tx)):
        arrays.append(a), analytic.append(g), names.append(f"{tx_name}.{i}")

    def loss_of(arr):
        def f(x):
            saved = arr.copy()
            arr[...] = x.reshape(arr.shape)
            try:
                return end_to_end(nets, tx, h, y, P, feature, need_grad=False).loss
            finally:
                arr[...] = saved
        return f

    gen = np.random.default_rng(0)
    reports = {}
    for name, arr, g in zip(names, arrays, analytic):
        idx = None
        if indices_per_array is not None and arr.size > indices_per_array:
            idx = np.sort(gen.choice(arr.size, indices_per_array, replace=False))
        reports[name] = grad_check(loss_of(arr), arr.ravel().copy(), g.ravel(), step=1e-5, tolerance=1e-4,
                                   atol=GRAD_ATOL, indices=idx)

    # the transmitter not on this path receives no gradient: perturbing it leaves the loss unchanged
    idle = getattr(nets, idle_name)
    base = res.loss
    for a in idle.arrays():
        a += 1.0
    moved = end_to_end(nets, tx, h, y, P, feature, need_grad=False).loss
    for a in idle.arrays():
        a -= 1.0
    reports["idle_unchanged"] = moved == base
    return reports
