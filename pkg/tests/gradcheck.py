"""Central-difference gradient checks that skip entries straddling a ReLU kink."""
import numpy as np

from gaussnet.layers import layer_forward
from gaussnet.train import loss_and_grad, loss_value


def relu_pattern(net, x):
    masks = []
    for layer in net.layers:
        out, cache = layer_forward(layer, x, keep=True)
        masks.append(cache.a > 0)
        x = out
    return masks


def same_pattern(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def check_network_gradients(net, x, labels, rng, per_param=6, h=1e-6):
    """Return ``(worst relative error, checked, skipped)`` over sampled parameter entries."""
    _, tape = loss_and_grad(net, x, labels)
    params = {k: v.astype(np.float64) for k, v in net.parameters().items()}
    worst, checked, skipped = 0.0, 0, 0
    for name, value in params.items():
        flat = value.ravel()
        picks = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for i in picks:
            plus, minus = dict(params), dict(params)
            vp, vm = flat.copy(), flat.copy()
            vp[i] += h
            vm[i] -= h
            plus[name], minus[name] = vp.reshape(value.shape), vm.reshape(value.shape)
            net_p, net_m = net.with_parameters(plus), net.with_parameters(minus)
            if not same_pattern(relu_pattern(net_p, x), relu_pattern(net_m, x)):
                skipped += 1
                continue
            fd = (loss_value(net_p, x, labels) - loss_value(net_m, x, labels)) / (2 * h)
            an = float(tape.grads[name].ravel()[i])
            scale = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / scale)
            checked += 1
    return worst, checked, skipped
