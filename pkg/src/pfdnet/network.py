"""Toy-scale PFDNet: plain conv backbone, six PFC blocks, x4 upsampling, density head.

    image (n, 3, H, W)
      -> backbone: 3x3 conv + ReLU stages, three 2x2 max-pools  -> stride 8
      -> 6 x [fractional-dilation conv + ReLU], each block with its own
         (alpha, beta, gamma, theta) turning the perspective map into a rate map
      -> bilinear x4 upsampling                                   -> stride 2
      -> 1x1 conv + ReLU                                          -> density (n, H/2, W/2)

The perspective map comes from the scene (``gt``), from its per-image
mean (``mean``), or from the image branch of a PENet fed the image at 1/8
resolution (``penet``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError, DomainError, InvalidStateError, ShapeError
from .fdconv import ConvWeights, fdconv_backward, fdconv_forward
from .penet import PENet
from .perspective import RATE_INIT, RateParams, mean_perspective, rate_backward, rate_from_perspective
from .tensor_core import DTYPE, Rng, reduce, resample_grid

PERSP_SOURCES = ("gt", "penet", "mean")
FEATURE_STRIDE = 8
N_POOLS = 3
BASELINE_RATE = 2.0
HEAD_INIT_STD = 0.01


@dataclass
class PfdnetConfig:
    backbone_channels: list = field(default_factory=lambda: [16, 32, 64])
    pfc_channels: list = field(default_factory=lambda: [64, 64, 64, 32, 32, 16])
    kernel: int = 3
    upsample_factor: int = 4
    persp_source: str = "gt"
    n_pfc: int = 6  # blocks beyond this keep a fixed integer rate

    def __post_init__(self):
        if len(self.pfc_channels) != 6:
            raise ConfigError("exactly six PFC blocks are required")
        if self.persp_source not in PERSP_SOURCES:
            raise ConfigError(f"persp_source must be one of {PERSP_SOURCES}, got {self.persp_source!r}")
        if not 0 <= self.n_pfc <= 6:
            raise ConfigError("n_pfc must be in 0..6")
        if self.upsample_factor * 2 != FEATURE_STRIDE:
            raise ConfigError("upsample factor must bring stride-8 features to half resolution")


def _pool_after(n_stages: int) -> list[int]:
    # pools follow stages 1..3; shallower backbones pool repeatedly after the last stage
    counts = [0] * n_stages
    for p in range(N_POOLS):
        counts[min(p, n_stages - 1)] += 1
    return counts


class PFDNet:
    def __init__(self, config: PfdnetConfig | None = None, rng: Rng | None = None, penet: PENet | None = None):
        self.config = config or PfdnetConfig()
        rng = rng or Rng(0)
        cfg = self.config
        self.params: dict[str, np.ndarray] = {}
        c_prev = 3
        for i, c in enumerate(cfg.backbone_channels):
            std = math.sqrt(2.0 / (c_prev * 9))
            self.params[f"backbone.{i}.weight"] = rng.normal(0.0, std, (c, c_prev, 3, 3))
            self.params[f"backbone.{i}.bias"] = np.zeros(c, dtype=DTYPE)
            c_prev = c
        for j, c in enumerate(cfg.pfc_channels):
            # He scaling: without batch-norm a 0.01 std stack collapses activations
            w = ConvWeights.gaussian(c, c_prev, cfg.kernel, math.sqrt(2.0 / (c_prev * cfg.kernel**2)), rng)
            self.params[f"pfc.{j}.weight"] = w.kernel
            self.params[f"pfc.{j}.bias"] = w.bias
            self.params[f"pfc.{j}.rate"] = np.array(RATE_INIT, dtype=DTYPE)
            c_prev = c
        # folded normal: the head reads non-negative features, so non-negative
        # weights keep its ReLU alive at initialization
        self.params["head.weight"] = np.abs(rng.normal(0.0, HEAD_INIT_STD, (1, c_prev, 1, 1)))
        self.params["head.bias"] = np.zeros(1, dtype=DTYPE)

        self.penet = penet
        if cfg.persp_source == "penet":
            if penet is None:
                raise ConfigError("persp_source=penet needs a PENet")
            for k, v in penet.params.items():
                self.params[f"penet.{k}"] = v
        self.version = 0

    # -- parameter bookkeeping ------------------------------------------------

    def rate_params(self, j: int) -> RateParams:
        return RateParams.from_array(self.params[f"pfc.{j}.rate"])

    def trainable(self) -> list[str]:
        names = [k for k in self.params if not k.startswith("penet.")]
        if self.penet is not None and self.config.persp_source == "penet":
            names += [f"penet.{k}" for k in self.penet.trainable()]
        return names

    def mark_updated(self) -> None:
        self.version += 1

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        for k, v in tensors.items():
            if k in self.params:
                if self.params[k].shape != v.shape:
                    raise ShapeError(f"checkpoint entry {k} has shape {v.shape}, expected {self.params[k].shape}")
                np.copyto(self.params[k], v)
        self.mark_updated()

    # -- forward / backward ---------------------------------------------------

    def feature_perspective(self, image: np.ndarray, persp):
        """Perspective map at feature resolution, plus the PENet cache if used."""
        n, _, h, w = image.shape
        fh, fw = h // FEATURE_STRIDE, w // FEATURE_STRIDE
        src = self.config.persp_source
        if src == "penet":
            if fh % 64 or fw % 64:
                raise ShapeError(f"penet perspective needs image dims divisible by {64 * FEATURE_STRIDE}, got {(h, w)}")
            small = resample_grid(image, fh, fw, "average-pool")
            s, cache = self.penet.forward(small, "image")
            return s, cache
        if persp is None:
            raise ConfigError(f"persp_source={src} needs a perspective map")
        persp = np.asarray(persp, dtype=image.dtype)
        if persp.ndim == 2:
            persp = np.broadcast_to(persp, (n, h, w))
        if persp.shape != (n, h, w):
            raise ShapeError(f"perspective shape {persp.shape} does not match image {(n, h, w)}")
        s = resample_grid(persp, fh, fw, "average-pool")
        if src == "mean":
            s = mean_perspective(s)
        return s, None

    def forward(self, image: np.ndarray, persp=None):
        """Return (density (n, H/2, W/2), rate maps list, cache)."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"image must be (n, 3, h, w), got {image.shape}")
        n, _, h, w = image.shape
        if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
            raise ShapeError(f"image dims must be divisible by {FEATURE_STRIDE}, got {(h, w)}")
        p = self.params
        cfg = self.config
        cache = {"version": self.version, "used": False, "backbone": [], "pfc": []}

        s_feat, penet_cache = self.feature_perspective(image, persp)
        cache["s_feat"] = s_feat
        cache["penet"] = penet_cache

        a = image
        pools = _pool_after(len(cfg.backbone_channels))
        for i in range(len(cfg.backbone_channels)):
            a_in = a
            pre = layers.conv2d_forward(a, p[f"backbone.{i}.weight"], p[f"backbone.{i}.bias"], 1, 1)
            a = layers.relu(pre)
            args = []
            for _ in range(pools[i]):
                a, arg = layers.maxpool2_forward(a)
                args.append(arg)
            cache["backbone"].append((a_in, pre, args))

        rates = []
        for j in range(6):
            if j < cfg.n_pfc:
                rate = rate_from_perspective(s_feat, self.rate_params(j)).astype(a.dtype)
            else:
                rate = np.full(s_feat.shape, BASELINE_RATE, dtype=a.dtype)
            rates.append(rate)
            weights = ConvWeights(p[f"pfc.{j}.weight"], p[f"pfc.{j}.bias"])
            pre = fdconv_forward(a, weights, rate)
            cache["pfc"].append((a, rate, pre))
            a = layers.relu(pre)

        up = layers.upsample_forward(a, cfg.upsample_factor)
        head_w = p["head.weight"][:, :, 0, 0].astype(a.dtype)
        pre = np.einsum("oc,nchw->nohw", head_w, up) + p["head.bias"].astype(a.dtype)[None, :, None, None]
        cache["up"] = up
        cache["head_pre"] = pre
        return layers.relu(pre)[:, 0], rates, cache

    def backward(self, cache, d_density: np.ndarray):
        """Gradients for every parameter (zeros for frozen ones), and dL/ds at feature resolution."""
        if cache.get("used") or cache.get("version") != self.version:
            raise InvalidStateError("stale forward cache: parameters changed or cache already consumed")
        cache["used"] = True
        p = self.params
        cfg = self.config
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        up = cache["up"]
        dt = up.dtype

        d_pre = layers.relu_backward(cache["head_pre"], d_density[:, None].astype(dt))
        grads["head.weight"] = np.einsum("nohw,nchw->oc", d_pre, up)[:, :, None, None].astype(dt)
        grads["head.bias"] = d_pre.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
        d_up = np.einsum("oc,nohw->nchw", p["head.weight"][:, :, 0, 0].astype(dt), d_pre)
        d = layers.upsample_backward(d_up, cfg.upsample_factor)

        s_feat = cache["s_feat"]
        d_s = np.zeros(s_feat.shape, dtype=np.float64)
        for j in reversed(range(6)):
            a_in, rate, pre = cache["pfc"][j]
            d = layers.relu_backward(pre, d)
            g = fdconv_backward(a_in, ConvWeights(p[f"pfc.{j}.weight"], p[f"pfc.{j}.bias"]), rate, d)
            grads[f"pfc.{j}.weight"] = g.d_weights.kernel
            grads[f"pfc.{j}.bias"] = g.d_weights.bias
            if j < cfg.n_pfc:
                d_rate_params, ds = rate_backward(s_feat, self.rate_params(j), g.d_rate)
                grads[f"pfc.{j}.rate"] = d_rate_params.astype(DTYPE)
                d_s += ds
            d = g.d_input

        for i in reversed(range(len(cfg.backbone_channels))):
            a_in, pre, args = cache["backbone"][i]
            for arg in reversed(args):
                d = layers.maxpool2_backward(arg, d)
            d = layers.relu_backward(pre, d)
            d, dw, db = layers.conv2d_backward(a_in, p[f"backbone.{i}.weight"], d, 1, 1)
            grads[f"backbone.{i}.weight"] = dw
            grads[f"backbone.{i}.bias"] = db

        if cache["penet"] is not None:
            pg, _ = self.penet.backward(cache["penet"], d_s.astype(dt))
            for k, v in pg.items():
                grads[f"penet.{k}"] = v
        return grads, d_s


def predict_count(density: np.ndarray) -> float:
    density = np.asarray(density)
    if np.any(density < 0):
        raise DomainError("density map has negative entries")
    return reduce(density, "sum")


def density_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """(1/2N) * sum_i ||pred_i - target_i||^2 over a batch of density maps."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(((pred - target) ** 2).sum() / (2.0 * pred.shape[0]))


def density_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return ((pred.astype(np.float64) - target) / pred.shape[0]).astype(pred.dtype)
