"""Finite-difference audit of every hand-written gradient in the package."""
from __future__ import annotations

import numpy as np

from .ipm import weighted_mmd2
from .model import RcfrModel, TrainConfig, objective_h_phi, objective_w
from .nn import Mlp, backward, forward, grad_check

TOLERANCE = 1e-4
STEP = 1e-5


def _nn_case(rng):
    net = Mlp.init((4, 6, 5, 2), ["elu", "elu", "linear"], rng)
    x = rng.standard_normal((7, 4))
    y = rng.standard_normal((7, 2))

    def f():
        out, cache = forward(net, x)
        r = out - y
        grads, _ = backward(net, cache, 2.0 * r / x.shape[0])
        return float((r * r).sum() / x.shape[0]), grads

    return grad_check(f, net.params(), STEP)


def _mmd_case(rng):
    zs = rng.standard_normal((5, 3))
    zt = rng.standard_normal((4, 3)) + 0.5
    w = rng.uniform(0.5, 1.5, 5)

    def f():
        r = weighted_mmd2(zs, w, zt)
        return r.value, [r.grad_src, r.grad_w, r.grad_tgt]

    return grad_check(f, [zs, w, zt], STEP)


def _toy_model(rng, n_arms, cfg):
    model = RcfrModel.init(3, n_arms, cfg, rng)
    # the default zero output layer would hide the weight network's inner gradients
    last = model.weight_net.layers[-1]
    last.weight[:] = rng.standard_normal(last.weight.shape)
    return model


def _objective_cases(rng):
    cfg = TrainConfig(lambda_h=0.1, lambda_w=0.5, bandwidth=1.0)
    out = {}
    n = 8
    for label, n_arms, with_target in (("cate", 2, False), ("da", 1, True)):
        model = _toy_model(rng, n_arms, cfg)
        x = rng.standard_normal((n, 3))
        t = np.arange(n) % n_arms
        y = rng.standard_normal(n)
        xt = rng.standard_normal((6, 3)) - 0.5 if with_target else None
        w = rng.uniform(0.5, 1.5, n)
        hp = model.rep_net.params() + [p for h in model.heads for p in h.params()]

        def fh():
            r = objective_h_phi(model, x, t, y, w, xt, cfg, 2.0)
            return r.value, r.rep_grads + [g for hg in r.head_grads for g in hg]

        def fw():
            r = objective_w(model, x, t, xt, cfg, 2.0)
            return r.value, r.weight_grads

        out[f"objective_h_phi[{label}]"] = grad_check(fh, hp, STEP)
        out[f"objective_w[{label}]"] = grad_check(fw, model.weight_net.params(), STEP)
    return out


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    """Worst relative error per component."""
    rng = np.random.default_rng(seed)
    report = {"nn.forward/backward": _nn_case(rng), "ipm.weighted_mmd2": _mmd_case(rng)}
    report.update(_objective_cases(rng))
    return report
