"""Perspective-estimation auto-encoder.

Six stride-2 3x3 convolutions (leaky ReLU, slope 0.2) encode the input
down to 1/64 resolution; six stride-2 3x3 transposed convolutions (ReLU)
decode back to a single-channel map at full resolution. Channel widths
are 32..1024 scaled by ``width_mult``.

Two encoders share one decoder: ``enc_s`` reads a perspective map,
``enc_i`` an RGB image. Training runs in phases:

    1            enc_s + dec on map -> map reconstruction
    2            enc_i only, decoder frozen, image -> map
    3-supervised enc_i only (decoder frozen), jointly with the counter
    3-weak       same, without perspective targets
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import DomainError, ShapeError
from .tensor_core import DTYPE, Rng

BASE_WIDTHS = (32, 64, 128, 256, 512, 1024)
PHASES = ("1", "2", "3-supervised", "3-weak")
PSNR_CAP = 99.0
IMAGE_STD_EPS = 1e-6


@dataclass
class PENetConfig:
    width_mult: float = 1 / 8
    image_channels: int = 3

    @property
    def widths(self) -> list[int]:
        return [max(1, int(round(c * self.width_mult))) for c in BASE_WIDTHS]


def standardize_image(x: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit variance over all channels and pixels.

    Raw [0, 1] images vary too little for the image encoder to leave the
    constant-output plateau.
    """
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(1, 2, 3), keepdims=True)
    std = x64.std(axis=(1, 2, 3), keepdims=True)
    return ((x64 - mean) / (std + IMAGE_STD_EPS)).astype(x.dtype)


class PENet:
    def __init__(self, config: PENetConfig | None = None, rng: Rng | None = None, zero_init: bool = False):
        self.config = config or PENetConfig()
        self.phase = "1"
        self.params: dict[str, np.ndarray] = {}
        widths = self.config.widths
        for prefix, c0 in (("enc_s", 1), ("enc_i", self.config.image_channels)):
            c_prev = c0
            for i, c in enumerate(widths):
                self._add(f"{prefix}.{i}", (c, c_prev, 3, 3), c, 2.0 / (1 + layers.LEAKY_SLOPE**2) / (c_prev * 9), rng, zero_init)
                c_prev = c
        dec_widths = list(reversed(widths[:-1])) + [1]
        c_prev = widths[-1]
        for i, c in enumerate(dec_widths):
            self._add(f"dec.{i}", (c_prev, c, 3, 3), c, 2.0 / (c_prev * 9), rng, zero_init)
            c_prev = c

    def _add(self, name, shape, c_out, var, rng, zero_init):
        if zero_init or rng is None:
            self.params[f"{name}.weight"] = np.zeros(shape, dtype=DTYPE)
        else:
            self.params[f"{name}.weight"] = rng.normal(0.0, math.sqrt(var), shape)
        self.params[f"{name}.bias"] = np.zeros(c_out, dtype=DTYPE)

    def names(self, part: str) -> list[str]:
        return [k for k in self.params if k.startswith(part + ".")]

    def trainable(self) -> list[str]:
        if self.phase == "1":
            return self.names("enc_s") + self.names("dec")
        return self.names("enc_i")

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise DomainError(f"unknown PENet phase {phase!r}")
        self.phase = phase

    def forward(self, x: np.ndarray, which: str = "s"):
        """Return (maps of shape (n, h, w), cache)."""
        prefix = {"s": "enc_s", "image": "enc_i"}.get(which)
        if prefix is None:
            raise DomainError(f"unknown encoder {which!r}")
        n, c, h, w = x.shape
        want = 1 if which == "s" else self.config.image_channels
        if c != want:
            raise ShapeError(f"encoder {which!r} expects {want} channels, got {c}")
        if h % 64 or w % 64:
            raise ShapeError(f"PENet input dims must be divisible by 64, got {(h, w)}")
        p = self.params
        cache = {"which": which, "enc_in": [], "enc_pre": [], "dec_in": [], "dec_pre": []}
        a = standardize_image(x) if which == "image" else x
        for i in range(6):
            cache["enc_in"].append(a)
            pre = layers.conv2d_forward(a, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"], stride=2, pad=1)
            cache["enc_pre"].append(pre)
            a = layers.leaky_relu(pre)
        for i in range(6):
            cache["dec_in"].append(a)
            pre = layers.conv_transpose2d_forward(a, p[f"dec.{i}.weight"], p[f"dec.{i}.bias"])
            cache["dec_pre"].append(pre)
            a = layers.relu(pre)
        return a[:, 0], cache

    def backward(self, cache, d_out: np.ndarray):
        """Return (grads, d_input). Decoder grads are zero outside phase 1.

        For the image encoder d_input is taken w.r.t. the standardized image.
        """
        prefix = "enc_s" if cache["which"] == "s" else "enc_i"
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        d = d_out[:, None].astype(cache["dec_pre"][-1].dtype)
        for i in reversed(range(6)):
            d = layers.relu_backward(cache["dec_pre"][i], d)
            d, dw, db = layers.conv_transpose2d_backward(cache["dec_in"][i], p[f"dec.{i}.weight"], d)
            if self.phase == "1":
                grads[f"dec.{i}.weight"] = dw
                grads[f"dec.{i}.bias"] = db
        for i in reversed(range(6)):
            d = layers.leaky_relu_backward(cache["enc_pre"][i], d)
            d, dw, db = layers.conv2d_backward(cache["enc_in"][i], p[f"{prefix}.{i}.weight"], d, stride=2, pad=1)
            grads[f"{prefix}.{i}.weight"] = dw
            grads[f"{prefix}.{i}.bias"] = db
        return grads, d

    def shape_trace(self, h: int, w: int) -> list[tuple[int, int, int]]:
        """(channels, h, w) after every stage, for a single input."""
        widths = self.config.widths
        out = []
        for i, c in enumerate(widths):
            out.append((c, h >> (i + 1), w >> (i + 1)))
        dec = list(reversed(widths[:-1])) + [1]
        for i, c in enumerate(dec):
            out.append((c, h >> (5 - i), w >> (5 - i)))
        return out


def penet_forward(x: np.ndarray, which_encoder: str, net: PENet) -> np.ndarray:
    return net.forward(x, which_encoder)[0]


def _l2_half_mean(pred, target, batch: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(((pred - target) ** 2).sum() / (2.0 * batch))


def loss_s2s(pred, target, batch: int) -> float:
    """Map -> map reconstruction loss, (1/2N) * sum ||pred - target||^2."""
    return _l2_half_mean(pred, target, batch)


def loss_i2s(pred_from_image, target, batch: int) -> float:
    """Image -> map loss; same form as loss_s2s, gradients reach enc_i only."""
    return _l2_half_mean(pred_from_image, target, batch)


def l2_loss_grad(pred, target, batch: int) -> np.ndarray:
    return ((np.asarray(pred, dtype=np.float64) - target) / batch).astype(np.asarray(pred).dtype)


def psnr(pred, target, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    if peak <= 0:
        raise DomainError("peak must be positive")
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_report(value: float) -> float:
    return min(value, PSNR_CAP)
