"""Central finite-difference checks of analytic gradients.

A central difference is only a valid oracle where the function is smooth
on [theta - h, theta + h]. ReLU and max-pool make the network piecewise
smooth, so every evaluation records the pattern of active units and pooling
winners; a probe whose perturbation flips that pattern is discarded and a
different entry is drawn in its place.
"""
from __future__ import annotations

import numpy as np

from .layers import MaxPool1d, ReLU


def relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def _kink_pattern(net):
    pattern = []
    for layer in net.layers:
        if isinstance(layer, ReLU):
            pattern.append(layer._cache.copy())
        elif isinstance(layer, MaxPool1d):
            pattern.append(layer._cache[0].copy())
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_network(net, x, loss_fn, *, h=1e-4, n_checks=12, train=True, seed=0,
                  check_input=True, floor_ratio=1e-3, max_draws=200):
    """Compare backprop against central differences on sampled entries.

    ``loss_fn(out) -> (loss, dloss/dout)``. Dropout masks are frozen by
    seeding the forward rng identically on every evaluation, and batch-norm
    running statistics are restored afterwards. Gradients smaller than
    ``floor_ratio`` times the largest analytic gradient in the network are
    compared on that absolute scale.

    Returns ``(errors, skipped)``: per-tensor max relative error (key
    ``"input"`` for the input gradient) and the number of probes discarded
    for crossing a kink.
    """
    pick = np.random.default_rng(seed + 1)
    x = np.array(x, dtype=np.float64)

    def run():
        saved = [{k: v.copy() for k, v in layer.buffers.items()} for layer in net.layers]
        out = net.forward(x, train=train, rng=np.random.default_rng(seed))
        loss, grad = loss_fn(out)
        pattern = _kink_pattern(net)
        for layer, buf in zip(net.layers, saved):
            layer.buffers.update(buf)
        return loss, grad, pattern

    net.zero_grad()
    _, grad, base = run()
    dx = net.backward(grad)
    analytic = {name: layer.grads[pname].copy() for name, layer, pname in net.named_parameters()}
    gmax = max([np.abs(g).max() for g in analytic.values()] + [np.abs(dx).max()])
    floor = max(floor_ratio * gmax, 1e-12)

    skipped = 0

    def probe(arr, grad_flat):
        nonlocal skipped
        flat_arr = arr.reshape(-1)
        order = pick.permutation(flat_arr.size)[:max_draws]
        got_a, got_n = [], []
        for flat in order:
            orig = flat_arr[flat]
            flat_arr[flat] = orig + h
            lp, _, pp = run()
            flat_arr[flat] = orig - h
            lm, _, pm = run()
            flat_arr[flat] = orig
            if not (_same_pattern(pp, base) and _same_pattern(pm, base)):
                skipped += 1
                continue
            got_a.append(grad_flat[flat])
            got_n.append((lp - lm) / (2 * h))
            if len(got_a) == min(n_checks, flat_arr.size):
                break
        if not got_a:
            raise RuntimeError("every probe crossed a kink; use a smaller step")
        return relative_error(got_a, got_n, floor)

    errors = {}
    for name, layer, pname in net.named_parameters():
        errors[name] = probe(layer.params[pname], analytic[name].reshape(-1))
    if check_input:
        errors["input"] = probe(x, dx.reshape(-1))
    return errors, skipped


def linear_probe_loss(shape, seed=0):
    """Random linear functional of the output: loss = sum(R * out)."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return lambda out: (float((r * out).sum()), r)


def quadratic_probe_loss(shape, seed=0):
    """loss = 0.5 * sum((out - R)**2)."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return lambda out: (float(0.5 * ((out - r) ** 2).sum()), out - r)
