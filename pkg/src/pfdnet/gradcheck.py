"""Finite-difference gradient suites.

Analytic gradients are computed in float32 exactly as training computes
them. The central-difference oracle (step 1e-3) re-evaluates the same
forward pass in float64 on the same values, so the comparison measures the
backward pass and not float32 cancellation noise.

Rates are drawn at least 0.05 away from integers, where bilinear sampling
has kinks, and rate-map pre-activations at least 0.05 away from the clamp
at zero. ReLU, leaky-ReLU and max-pool kinks cannot be placed in advance,
so a composite sample whose stencil flips any activation pattern is
skipped and another entry drawn.

Relative error is |a - n| / max(|a|, |n|, floor) with the floor at 1e-3
of the largest analytic gradient in the same tensor.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .fdconv import ConvWeights, fdconv_backward, fdconv_forward
from .network import PFDNet, PfdnetConfig
from .penet import PENet, PENetConfig, l2_loss_grad, loss_s2s
from .perspective import RateParams, normalize_zeta, rate_backward, rate_from_perspective
from .tensor_core import Rng

STEP = 1e-3
KINK_MARGIN = 0.05
TOL_LAYER = 1e-2
TOL_COMPOSITE = 3e-2
CSV_HEADER = "suite,param,index,analytic,numeric,rel_err,tol,ok"


@dataclass
class Check:
    suite: str
    param: str
    index: tuple
    analytic: float
    numeric: float
    floor: float
    tol: float

    @property
    def rel_err(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), self.floor, 1e-12)
        return abs(self.analytic - self.numeric) / denom

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tol

    def csv(self) -> str:
        idx = ":".join(str(i) for i in self.index)
        return (f"{self.suite},{self.param},{idx},{self.analytic:.9g},{self.numeric:.9g},"
                f"{self.rel_err:.3e},{self.tol:g},{int(self.ok)}")


def _central(f, arr: np.ndarray, idx):
    """Central difference, or None when the stencil crosses a kink.

    ``f`` returns (loss, activation signature); the signature is None for
    smooth functions.
    """
    old = arr[idx]
    base_sig = f()[1]
    arr[idx] = old + STEP
    up, up_sig = f()
    arr[idx] = old - STEP
    down, down_sig = f()
    arr[idx] = old
    if base_sig is not None and not (base_sig == up_sig == down_sig):
        return None
    return (up - down) / (2 * STEP)


def _compare(suite, name, analytic, arr64, f, rng: Rng, count: int, tol) -> list[Check]:
    floor = 1e-3 * float(np.max(np.abs(analytic)))
    out = []
    for k in rng.permutation(analytic.size):
        if len(out) == count:
            break
        idx = tuple(int(i) for i in np.unravel_index(int(k), analytic.shape))
        numeric = _central(f, arr64, idx)
        if numeric is not None:
            out.append(Check(suite, name, idx, float(analytic[idx]), numeric, floor, tol))
    return out


def _signature(arrays) -> bytes:
    return b"".join(np.packbits(np.asarray(a) > 0).tobytes() for a in arrays)


def _off_kink(rng: Rng, shape, low: float, high: float) -> np.ndarray:
    out = rng.uniform(low, high, shape).astype(np.float64)
    bad = np.abs(out - np.round(out)) < KINK_MARGIN
    while bad.any():
        out[bad] = rng.uniform(low, high, int(bad.sum()))
        bad = np.abs(out - np.round(out)) < KINK_MARGIN
    return out.astype(np.float32)


# ---------------------------------------------------------------------------


def fdconv_suite(seed: int, samples: int = 20) -> list[Check]:
    rng = Rng(seed)
    x = rng.normal(0.0, 1.0, (2, 3, 7, 7))
    w = ConvWeights.gaussian(4, 3, 3, 0.5, rng)
    w.bias[:] = rng.normal(0.0, 0.5, w.bias.shape)
    rate = _off_kink(rng, (2, 7, 7), 0.3, 3.7)
    g = rng.normal(0.0, 1.0, (2, 4, 7, 7))
    grads = fdconv_backward(x, w, rate, g)

    x64, k64, b64, r64 = (a.astype(np.float64) for a in (x, w.kernel, w.bias, rate))
    g64 = g.astype(np.float64)

    def loss():
        return float((fdconv_forward(x64, ConvWeights(k64, b64), r64) * g64).sum()), None

    out = []
    out += _compare("fdconv", "input", grads.d_input, x64, loss, rng, samples, TOL_LAYER)
    out += _compare("fdconv", "weights", grads.d_weights.kernel, k64, loss, rng, samples, TOL_LAYER)
    out += _compare("fdconv", "bias", grads.d_weights.bias, b64, loss, rng, samples, TOL_LAYER)
    out += _compare("fdconv", "rate", grads.d_rate, r64, loss, rng, samples, TOL_LAYER)
    return out


def _rate_params_off_clamp(rng: Rng, s: np.ndarray) -> RateParams:
    for _ in range(1000):
        p = RateParams(rng.uniform(0.3, 1.5), rng.uniform(1.0, 5.0), rng.uniform(0.5, 3.0), rng.uniform(-1.0, 1.0))
        pre = p.gamma * normalize_zeta(s.astype(np.float64), p) + p.theta
        if np.all(np.abs(pre) >= KINK_MARGIN):
            return p
    raise GenerationError("could not draw rate parameters away from the clamp")


def perspective_suite(seed: int, samples: int = 20) -> list[Check]:
    rng = Rng(seed)
    s = rng.uniform(0.5, 8.0, (3, 5, 5)).astype(np.float32)
    p = _rate_params_off_clamp(rng, s)
    g = rng.normal(0.0, 1.0, s.shape)
    d_params, d_s = rate_backward(s, p, g)

    theta64 = np.array([p.alpha, p.beta, p.gamma, p.theta], dtype=np.float64)
    s64, g64 = s.astype(np.float64), g.astype(np.float64)

    def loss():
        return float((rate_from_perspective(s64, RateParams.from_array(theta64)) * g64).sum()), None

    out = []
    floor = 1e-3 * float(np.max(np.abs(d_params)))
    for i, name in enumerate(("alpha", "beta", "gamma", "theta")):
        out.append(Check("perspective", name, (i,), float(d_params[i]), _central(loss, theta64, (i,)), floor, TOL_LAYER))
    out += _compare("perspective", "s", d_s, s64, loss, rng, samples, TOL_LAYER)
    return out


def _as64(net):
    twin = copy.copy(net)
    twin.params = {k: v.astype(np.float64) for k, v in net.params.items()}
    return twin


def penet_suite(seed: int, per_tensor: int = 2) -> list[Check]:
    rng = Rng(seed)
    net = PENet(PENetConfig(width_mult=1 / 16), rng)
    net.set_phase("1")
    x = rng.uniform(1.0, 4.0, (1, 1, 64, 64))
    target = rng.uniform(1.0, 4.0, (1, 64, 64))
    pred, cache = net.forward(x, "s")
    grads, _ = net.backward(cache, l2_loss_grad(pred, target, 1))

    twin = _as64(net)
    x64, t64 = x.astype(np.float64), target.astype(np.float64)

    def loss():
        pred, c = twin.forward(x64, "s")
        return loss_s2s(pred, t64, 1), _signature(c["enc_pre"] + c["dec_pre"])

    out = []
    for name in net.trainable():
        out += _compare("penet", name, grads[name], twin.params[name], loss, rng, per_tensor, TOL_COMPOSITE)
    return out


def _tiny_pfdnet(rng: Rng):
    cfg = PfdnetConfig(backbone_channels=[4], pfc_channels=[4] * 6)
    for _ in range(200):
        model = PFDNet(cfg, rng)
        for j in range(6):
            model.params[f"pfc.{j}.rate"] += rng.uniform(-0.2, 0.2, 4).astype(np.float32)
        # lift the head off its ReLU kink so all five head scalars are checkable
        model.params["head.bias"][:] = 0.05
        image = rng.uniform(0.0, 1.0, (1, 3, 32, 32)).astype(np.float32)
        top = rng.uniform(0.5, 2.0)
        persp = np.repeat((top + rng.uniform(0.05, 0.2) * np.arange(32))[:, None], 32, axis=1)[None].astype(np.float32)
        _, rates, cache = model.forward(image, persp)
        s = cache["s_feat"]
        ok = True
        for j, r in enumerate(rates):
            p = model.rate_params(j)
            pre = p.gamma * normalize_zeta(s.astype(np.float64), p) + p.theta
            if np.any(np.abs(r - np.round(r)) < KINK_MARGIN) or np.any(np.abs(pre) < KINK_MARGIN):
                ok = False
                break
        if ok:
            return model, image, persp
    raise GenerationError("could not draw a composite instance away from rate kinks")


def pfdnet_suite(seed: int, per_class: int = 5) -> list[Check]:
    rng = Rng(seed)
    model, image, persp = _tiny_pfdnet(rng)
    dens, _, cache = model.forward(image, persp)
    grads, _ = model.backward(cache, np.ones_like(dens))

    twin = _as64(model)
    img64, p64 = image.astype(np.float64), persp.astype(np.float64)

    def loss():
        dens, _, c = twin.forward(img64, p64)
        acts = [pre for _, pre, _ in c["backbone"]] + [arg for _, _, args in c["backbone"] for arg in args]
        acts += [pre for _, _, pre in c["pfc"]] + [c["head_pre"]]
        return math.fsum(dens.ravel()), _signature(acts)

    classes = {
        "backbone": [k for k in model.params if k.startswith("backbone.")],
        "pfc.weight": [k for k in model.params if k.startswith("pfc.") and k.endswith(".weight")],
        "pfc.bias": [k for k in model.params if k.startswith("pfc.") and k.endswith(".bias")],
        "pfc.rate": [k for k in model.params if k.endswith(".rate")],
        "head": [k for k in model.params if k.startswith("head.")],
    }
    out = []
    for names in classes.values():
        pool = [(k, idx) for k in names for idx in np.ndindex(model.params[k].shape)]
        found = []
        for i in rng.permutation(len(pool)):
            if len(found) == per_class:
                break
            k, idx = pool[int(i)]
            numeric = _central(loss, twin.params[k], idx)
            if numeric is not None:
                floor = 1e-3 * float(np.max(np.abs(grads[k])))
                found.append(Check("pfdnet", k, idx, float(grads[k][idx]), numeric, floor, TOL_COMPOSITE))
        out += found
    return out


SUITES = {
    "fdconv": fdconv_suite,
    "perspective": perspective_suite,
    "penet": penet_suite,
    "pfdnet": pfdnet_suite,
}


def run_gradcheck(seed: int, suites=None) -> list[Check]:
    root = Rng(seed)
    out = []
    for i, name in enumerate(suites or SUITES):
        out += SUITES[name](int(root.spawn(i).integers(0, 2**31)))
    return out
