"""Weighted cross-entropy training with SGD-momentum updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingError, ValidationError
from .fcn import (CONV, SOFTMAX, Network, forward, nearest_resize,
                  network_input_dims, pad_to, prepare_input, scaled_dims)
from .tensor import col2im_batch, im2col_batch

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 4
    seed: int = 0
    alpha_mode: str = "dataset"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch size >= 1")

    # config-file keys -> attribute names
    KEYS = {"lr": "learning_rate", "momentum": "momentum", "epochs": "epochs",
            "batch": "batch_size", "seed": "seed", "alpha_mode": "alpha_mode"}

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.KEYS)
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        kw = {cls.KEYS[k]: v for k, v in data.items()}
        if "alpha_mode" in kw:
            kw["alpha_mode"] = str(kw["alpha_mode"])
        return cls(**kw)


@dataclass
class LossParams:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")


def compute_alpha(masks) -> float:
    """Iris-pixel fraction over a set of ground-truth masks."""
    masks = list(masks)
    if not masks:
        raise ValidationError("compute_alpha needs at least one mask")
    iris = sum(int(np.count_nonzero(m)) for m in masks)
    total = sum(int(np.size(m)) for m in masks)
    return iris / total


def weighted_bce_loss(probs, gt, params: LossParams) -> float:
    """Class-weighted binary cross-entropy averaged over pixels.

    ``probs`` is either the iris-probability map ``(H, W)`` or a two-channel
    softmax output whose channel 1 is the iris probability.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 3:
        probs = probs[1]
    y = np.asarray(gt, dtype=np.float64)
    if probs.shape != y.shape:
        raise DimensionError(f"probabilities {probs.shape} vs labels {y.shape}")
    p = np.clip(probs, PROB_EPS, 1 - PROB_EPS)
    a = params.alpha
    terms = (1 - a) * y * np.log(p) + a * (1 - y) * np.log(1 - p)
    return float(-terms.mean())


def _loss_and_dlogits(logits, y, alpha):
    """Batch-mean weighted BCE and its gradient w.r.t. ``(B, 2, H, W)`` logits."""
    bsz = logits.shape[0]
    hw = logits.shape[2] * logits.shape[3]
    d = logits[:, 1] - logits[:, 0]
    p = 0.5 * (1.0 + np.tanh(0.5 * d))
    inside = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    terms = (1 - alpha) * y * np.log(pc) + alpha * (1 - y) * np.log(1 - pc)
    loss = -terms.sum() / (hw * bsz)
    dd = -((1 - alpha) * y * (1 - p) - alpha * (1 - y) * p) / (hw * bsz)
    dd = np.where(inside, dd, 0.0)
    dlogits = np.stack([-dd, dd], axis=1)
    return float(loss), dlogits


def backward(net: Network, images, gt, params: LossParams):
    """Loss and gradients for a ``(B, 1, H, W)`` batch with ``(B, H, W)`` labels.

    Returns ``(loss, grads)`` where ``grads`` parallels ``net.params``.
    Shortcut connections route the incoming gradient to both the TCONV
    branch and the encoder partner.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    logits, outs, caches = forward(net, x, keep=True)
    if logits.shape[1] != 2 or logits.shape[2:] != y.shape[1:]:
        raise DimensionError(f"logits {logits.shape} vs labels {y.shape}")
    loss, dlog = _loss_and_dlogits(logits, y, params.alpha)

    n = len(net.layers)
    d_out = [None] * n
    d_out[n - 1] = dlog
    grads = [None] * n
    for i in range(n - 1, -1, -1):
        layer = net.layers[i]
        g = d_out[i]
        if layer.kind == SOFTMAX:
            d_out[i - 1] = g
            continue
        if g is None:
            raise DimensionError(f"layer {i} output is unused")
        if layer.skip_partner is not None:
            j = layer.skip_partner
            d_out[j] = g if d_out[j] is None else d_out[j] + g
        colcache, z, in_shape = caches[i]
        dz = g * (z > 0) if layer.relu else g
        w, _ = net.params[i]
        k = layer.filter
        db = dz.sum(axis=(0, 2, 3))
        if layer.kind == CONV:
            oc = w.shape[0]
            dzm = dz.transpose(1, 0, 2, 3).reshape(oc, -1)
            dw = (dzm @ colcache.T).reshape(w.shape)
            dcols = w.reshape(oc, -1).T @ dzm
            dx = col2im_batch(dcols, in_shape, k, layer.stride, layer.padding)
        else:
            c, oc = w.shape[0], w.shape[1]
            dcols = im2col_batch(dz, k, layer.stride, layer.padding)
            dwt = dcols @ colcache.T
            dw = dwt.reshape(oc, k, k, c).transpose(3, 0, 1, 2)
            wt = w.transpose(1, 2, 3, 0).reshape(oc * k * k, c)
            dxm = wt.T @ dcols
            b_, _, h_, w_ = in_shape
            dx = dxm.reshape(c, b_, h_, w_).transpose(1, 0, 2, 3)
        grads[i] = (dw, db)
        if i > 0:
            d_out[i - 1] = dx if d_out[i - 1] is None else d_out[i - 1] + dx
    return loss, grads


def sgd_momentum_step(weights, velocity, gradients, cfg: TrainConfig):
    """One momentum update: ``v' = beta*v - eta*g`` then ``W' = W + v'``.

    All three arguments are parallel lists of arrays; new lists are returned.
    """
    if not (len(weights) == len(velocity) == len(gradients)):
        raise DimensionError("weights, velocity and gradients must align")
    new_w, new_v = [], []
    for w, v, g in zip(weights, velocity, gradients):
        if w.shape != v.shape or w.shape != g.shape:
            raise DimensionError(f"shape mismatch {w.shape}/{v.shape}/{g.shape}")
        v2 = cfg.momentum * v - cfg.learning_rate * g
        new_v.append(v2)
        new_w.append(w + v2)
    return new_w, new_v


def _flat(params):
    out = []
    for p in params:
        if p is not None:
            out.extend(p)
    return out


def _unflat(template, flat):
    it = iter(flat)
    return [None if p is None else (next(it), next(it)) for p in template]


def prepare_pair(net: Network, image, mask):
    """Scale and pad an (image, mask) pair to the network's working resolution."""
    img = prepare_input(image)
    dims = img.shape
    sd = scaled_dims(dims, net.scale)
    ph, pw = network_input_dims(net, dims)
    small = nearest_resize(img, out_dims=sd) if sd != dims else img
    m = np.asarray(mask).astype(bool)
    ms = nearest_resize(m, out_dims=sd) if sd != dims else m
    return pad_to(small, ph, pw)[None], pad_to(ms, ph, pw)


@dataclass
class TrainResult:
    net: Network
    epoch_losses: list = field(default_factory=list)
    best_epoch: int = -1
    alpha: float = 0.5


def train(net: Network, dataset, cfg: TrainConfig, params: LossParams | None = None,
          progress=None) -> TrainResult:
    """Minibatch SGD-momentum training on ``(image, mask)`` pairs.

    The returned network is the end-of-epoch snapshot whose running loss
    (mean over that epoch's minibatches, measured as they were visited) was
    lowest.  Deterministic given ``cfg.seed``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("training set is empty")
    if params is None:
        if cfg.alpha_mode == "dataset":
            params = LossParams(compute_alpha(m for _, m in dataset))
        else:
            params = LossParams(float(cfg.alpha_mode))
    pairs = [prepare_pair(net, im, m) for im, m in dataset]
    shapes = {p[0].shape for p in pairs}
    if len(shapes) != 1:
        raise DimensionError(f"training images must share dims, got {sorted(shapes)}")
    xs = np.stack([p[0] for p in pairs]).astype(np.float64)
    ys = np.stack([p[1] for p in pairs]).astype(np.float64)

    work = Network(net.layers, [None if p is None else
                                (p[0].astype(np.float64), p[1].astype(np.float64))
                                for p in net.params],
                   net.scale, net.arch, net.input_dims, net.n_channels)
    flat_w = _flat(work.params)
    velocity = [np.zeros_like(w) for w in flat_w]
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net=net.copy(), alpha=params.alpha)
    best = np.inf
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xs))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward(work, xs[idx], ys[idx], params)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            flat_w, velocity = sgd_momentum_step(flat_w, velocity, _flat(grads), cfg)
            work.params = _unflat(work.params, flat_w)
            losses.append(loss * len(idx))
        epoch_loss = float(np.sum(losses) / len(xs))
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        result.epoch_losses.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        if progress is not None:
            progress(epoch, epoch_loss)
        if epoch_loss < best:
            best = epoch_loss
            result.best_epoch = epoch
            result.net = Network(net.layers,
                                 [None if p is None else (p[0].astype(np.float32),
                                                          p[1].astype(np.float32))
                                  for p in work.params],
                                 net.scale, net.arch, net.input_dims, net.n_channels)
    return result


def _relu_pattern(net: Network, x):
    _, _, caches = forward(net, x, keep=True)
    return [None if c is None else c[1] > 0 for c in caches]


def gradient_check(net: Network, images, gt, params: LossParams, samples: int = 100,
                   h: float = 1e-3, seed: int = 0, max_tries: int = 20):
    """Compare backprop against central differences on sampled parameters.

    Works on a float64 copy of ``net``.  A sampled parameter whose ``+/-h``
    probe flips any ReLU on/off is redrawn (up to ``max_tries`` times per
    sample), since the loss is not differentiable across the kink.  Returns
    a list of ``(layer, is_bias, index, analytic, numeric, rel_error)``.
    """
    work = Network(net.layers, [None if p is None else
                                (p[0].astype(np.float64), p[1].astype(np.float64))
                                for p in net.params],
                   net.scale, net.arch, net.input_dims, net.n_channels)
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    _, grads = backward(work, x, y, params)
    base = _relu_pattern(work, x)
    slots = [(i, j) for i, p in enumerate(work.params) if p is not None for j in (0, 1)]
    sizes = np.array([work.params[i][j].size for i, j in slots], dtype=np.float64)
    rng = np.random.default_rng(seed)

    def loss_at():
        logits = forward(work, x)
        return _loss_and_dlogits(logits, y, params.alpha)[0]

    def same_pattern():
        return all(a is None or np.array_equal(a, b)
                   for a, b in zip(base, _relu_pattern(work, x)))

    out = []
    for _ in range(samples):
        for _ in range(max_tries):
            i, j = slots[rng.choice(len(slots), p=sizes / sizes.sum())]
            arr = work.params[i][j]
            idx = tuple(int(v) for v in np.unravel_index(rng.integers(arr.size), arr.shape))
            orig = arr[idx]
            arr[idx] = orig + h
            lp, ok = loss_at(), same_pattern()
            arr[idx] = orig - h
            lm, ok = loss_at(), ok and same_pattern()
            arr[idx] = orig
            if ok:
                break
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[i][j][idx])
        denom = max(abs(analytic), abs(numeric))
        rel = 0.0 if denom == 0 else abs(analytic - numeric) / denom
        out.append((i, j == 1, idx, analytic, numeric, rel))
    return out
