"""Training and evaluation loops for PENet and PFDNet."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import density_target, flip_scene
from .errors import ConfigError, UsageError
from .metrics import mae_rmse
from .network import PFDNet, PfdnetConfig, density_loss, density_loss_grad, predict_count
from .optim import Adam
from .penet import PENet, PENetConfig, l2_loss_grad, loss_i2s, loss_s2s, psnr
from .tensor_core import DTYPE, Rng, resample_grid

log = logging.getLogger(__name__)

PENET_DOWNSAMPLE = 8


# ---------------------------------------------------------------------------
# PENet


@dataclass
class PenetData:
    images: np.ndarray  # (n, 3, h, w)
    maps: np.ndarray  # (n, 1, h, w)

    @property
    def peak(self) -> float:
        return float(self.maps.max())


def penet_data(scenes, downsample: int = PENET_DOWNSAMPLE) -> PenetData:
    """Images and perspective maps of ``scenes`` average-pooled by ``downsample``."""
    images, maps = [], []
    for sc in scenes:
        h, w = sc.persp.shape
        if h % downsample or w % downsample:
            raise UsageError(f"scene size {(h, w)} not divisible by {downsample}")
        images.append(resample_grid(sc.image, h // downsample, w // downsample, "average-pool"))
        maps.append(resample_grid(sc.persp, h // downsample, w // downsample, "average-pool")[None])
    return PenetData(np.stack(images).astype(DTYPE), np.stack(maps).astype(DTYPE))


def evaluate_penet(net: PENet, data: PenetData, which: str, batch: int = 16) -> float:
    preds = []
    src = data.maps if which == "s" else data.images
    for i in range(0, len(src), batch):
        preds.append(net.forward(src[i:i + batch], which)[0])
    return psnr(np.concatenate(preds), data.maps[:, 0], data.peak)


@dataclass
class PenetHistory:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    optimizer: Adam | None = None
    rng_state: dict | None = None


def train_penet(phase: int, data: PenetData, net: PENet, epochs: int, batch: int, lr: float, seed: int,
                on_epoch=None) -> PenetHistory:
    """Phase 1: map -> map through enc_s + dec. Phase 2: image -> map through enc_i, decoder frozen."""
    if phase not in (1, 2):
        raise UsageError(f"PENet standalone training supports phases 1 and 2, got {phase}")
    net.set_phase(str(phase))
    which = "s" if phase == 1 else "image"
    loss_fn = loss_s2s if phase == 1 else loss_i2s
    src = data.maps if phase == 1 else data.images
    opt = Adam(lr=lr)
    rng = Rng(seed)
    hist = PenetHistory()
    names = net.trainable()
    n = len(src)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch):
            idx = np.sort(order[i:i + batch])
            x, target = src[idx], data.maps[idx, 0]
            pred, cache = net.forward(x, which)
            total += loss_fn(pred, target, len(idx)) * len(idx)
            grads, _ = net.backward(cache, l2_loss_grad(pred, target, len(idx)))
            opt.step(net.params, grads, names)
        hist.epochs.append(epoch)
        hist.loss.append(total / n)
        hist.psnr.append(evaluate_penet(net, data, which))
        if on_epoch is not None:
            on_epoch(epoch, hist.loss[-1], hist.psnr[-1])
    hist.optimizer, hist.rng_state = opt, rng.get_state()
    return hist


# ---------------------------------------------------------------------------
# PFDNet


@dataclass
class CountingData:
    images: np.ndarray  # (n, 3, h, w)
    persp: np.ndarray  # (n, h, w)
    density: np.ndarray  # (n, h/2, w/2)
    counts: np.ndarray  # (n,)
    ids: list


def counting_data(scenes) -> CountingData:
    images, persp, dens, counts, ids = [], [], [], [], []
    for sc in scenes:
        h, w = sc.image.shape[1:]
        images.append(sc.image)
        persp.append(sc.persp if sc.persp is not None else np.ones((h, w), dtype=DTYPE))
        dens.append(density_target(sc.heads, (h, w)))
        counts.append(len(sc.heads))
        ids.append(sc.heads.image_id)
    return CountingData(np.stack(images), np.stack(persp).astype(DTYPE), np.stack(dens), np.array(counts, dtype=np.float64), ids)


def predict_densities(model: PFDNet, data: CountingData, batch: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(data.images), batch):
        out.append(model.forward(data.images[i:i + batch], data.persp[i:i + batch])[0])
    return np.concatenate(out)


def evaluate_counts(model: PFDNet, data: CountingData) -> tuple[float, float]:
    dens = predict_densities(model, data)
    preds = [predict_count(d) for d in dens]
    gts = [float(np.asarray(d, dtype=np.float64).sum()) for d in data.density]
    return mae_rmse(preds, gts)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    mae_initial: float = math.nan
    mae_final: float = math.nan
    optimizer: Adam | None = None
    rng_state: dict | None = None


def train_pfdnet(model: PFDNet, data: CountingData, iters: int, batch: int, lr: float, seed: int,
                 penet_mode: str = "supervised", lambda_persp: float = 1.0, flip_prob: float = 0.5,
                 on_step=None) -> TrainHistory:
    """Minimise the density loss (plus lambda * image->map loss in supervised PENet mode)."""
    cfg = model.config
    if cfg.persp_source == "penet":
        if model.penet is None:
            raise UsageError("persp_source=penet needs a trained PENet")
        if penet_mode not in ("supervised", "weak"):
            raise ConfigError(f"penet_mode must be supervised or weak, got {penet_mode!r}")
        model.penet.set_phase("3-supervised" if penet_mode == "supervised" else "3-weak")
    opt = Adam(lr=lr)
    rng = Rng(seed)
    names = model.trainable()
    hist = TrainHistory()
    hist.mae_initial = evaluate_counts(model, data)[0]
    n = len(data.images)
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, iters + 1):
        if cursor + batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = np.sort(order[cursor:cursor + batch])
        cursor += batch
        imgs, persp, dens = data.images[idx].copy(), data.persp[idx].copy(), data.density[idx].copy()
        for b in range(len(idx)):
            if rng.random() < flip_prob:
                imgs[b], persp[b], dens[b] = flip_scene(imgs[b], persp[b], dens[b])

        pred, _, cache = model.forward(imgs, persp)
        loss = density_loss(pred, dens)
        grads, _ = model.backward(cache, density_loss_grad(pred, dens))
        if cfg.persp_source == "penet" and penet_mode == "supervised" and lambda_persp:
            fh, fw = cache["s_feat"].shape[1:]
            s_target = resample_grid(persp, fh, fw, "average-pool")
            s_pred = cache["s_feat"]
            loss += lambda_persp * loss_i2s(s_pred, s_target, len(idx))
            small = resample_grid(imgs, fh, fw, "average-pool")
            _, pcache = model.penet.forward(small, "image")
            pg, _ = model.penet.backward(pcache, lambda_persp * l2_loss_grad(s_pred, s_target, len(idx)))
            for k, v in pg.items():
                grads[f"penet.{k}"] = grads[f"penet.{k}"] + v
        opt.step(model.params, grads, names)
        model.mark_updated()

        batch_mae = float(np.mean([abs(predict_count(p) - float(d.astype(np.float64).sum())) for p, d in zip(pred, dens)]))
        hist.steps.append(step)
        hist.loss.append(loss)
        hist.mae.append(batch_mae)
        if on_step is not None:
            on_step(step, pred, dens, loss, batch_mae)
    hist.mae_final = evaluate_counts(model, data)[0]
    hist.optimizer, hist.rng_state = opt, rng.get_state()
    return hist


def build_pfdnet(config: PfdnetConfig, seed: int, penet: PENet | None = None) -> PFDNet:
    return PFDNet(config, Rng(seed), penet=penet)


def build_penet(width_mult: float, seed: int) -> PENet:
    return PENet(PENetConfig(width_mult=width_mult), Rng(seed))
