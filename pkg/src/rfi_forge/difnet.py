"""U-shaped windowed-attention segmentation network for TF-map RFI masks.

Structure: 3x3 conv input projection, L encoder stages of pre-norm
window-attention blocks plus stride-2 downsampling, a bottleneck stack,
L decoder stages with transposed-conv upsampling and skip concatenation,
and a 1-channel output head.  Trained with a Charbonnier penalty against
binary masks, so the target depends only on interference geometry, not on
any sensor's amplitude scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LEAKY_SLOPE = 0.2


class TrainDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 16
    depth: int = 2
    win_size: int = 8
    heads_per_stage: tuple = (2, 4)
    blocks_per_stage: int = 2
    # A wide Charbonnier eps makes the loss quadratic near zero residual,
    # so already-correct background pixels contribute vanishing gradient
    # while wrong foreground pixels keep full gradient.  With the ~15%
    # positive-pixel rate of the simulated labels this asymmetry is what
    # keeps Adam from driving every logit into sigmoid saturation (the
    # all-zero mask is a stable attractor for eps << typical residuals).
    leff_hidden_ratio: float = 4.0
    eps_loss: float = 0.3
    threshold: float = 0.5

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.win_size < 1:
            raise ValueError("NetConfig: channels, depth, win_size must be positive")
        if len(self.heads_per_stage) != self.depth:
            raise ValueError("NetConfig: need one head count per encoder stage")
        if self.blocks_per_stage < 1 or self.leff_hidden_ratio <= 0:
            raise ValueError("NetConfig: blocks_per_stage >= 1, leff_hidden_ratio > 0")
        if self.eps_loss <= 0 or not (0.0 < self.threshold < 1.0):
            raise ValueError("NetConfig: eps_loss > 0 and threshold in (0, 1)")
        for l, h in enumerate(self.heads_per_stage):
            if self.stage_channels(l) % h:
                raise ValueError(f"NetConfig: heads {h} do not divide stage-{l} channels")

    def stage_channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    @property
    def bottleneck_heads(self) -> int:
        return 2 * self.heads_per_stage[-1]

    @property
    def size_multiple(self) -> int:
        return self.win_size * (2 ** self.depth)

    def to_items(self):
        return [("base_channels", self.base_channels), ("depth", self.depth),
                ("win_size", self.win_size),
                ("heads_per_stage", ",".join(str(h) for h in self.heads_per_stage)),
                ("blocks_per_stage", self.blocks_per_stage),
                ("leff_hidden_ratio", self.leff_hidden_ratio),
                ("eps_loss", self.eps_loss), ("threshold", self.threshold)]

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(base_channels=int(d["base_channels"]), depth=int(d["depth"]),
                   win_size=int(d["win_size"]),
                   heads_per_stage=tuple(int(h) for h in str(d["heads_per_stage"]).split(",")),
                   blocks_per_stage=int(d["blocks_per_stage"]),
                   leff_hidden_ratio=float(d["leff_hidden_ratio"]),
                   eps_loss=float(d["eps_loss"]), threshold=float(d["threshold"]))


# ---------------------------------------------------------------------------
# weight construction
# ---------------------------------------------------------------------------

def _conv_w(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in),
                  requires_grad=True, dtype=dtype)


def _lin_w(rng, n_in, n_out, dtype):
    # small truncated-normal init; keeps the residual stream near the input
    # scale through the many attention / feed-forward blocks
    std = 0.02
    vals = np.clip(rng.standard_normal((n_in, n_out)), -2.0, 2.0) * std
    return Tensor(vals, requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def _block_weights(rng, prefix, c, heads, cfg, dtype, out):
    m = cfg.win_size
    hid = int(round(cfg.leff_hidden_ratio * c))
    out[f"{prefix}ln1.g"] = _ones((c,), dtype)
    out[f"{prefix}ln1.b"] = _zeros((c,), dtype)
    out[f"{prefix}attn.wq"] = _lin_w(rng, c, c, dtype)
    out[f"{prefix}attn.wk"] = _lin_w(rng, c, c, dtype)
    out[f"{prefix}attn.wv"] = _lin_w(rng, c, c, dtype)
    out[f"{prefix}attn.wo"] = _lin_w(rng, c, c, dtype)
    out[f"{prefix}attn.wo_b"] = _zeros((c,), dtype)
    out[f"{prefix}attn.bias"] = _zeros(((2 * m - 1) ** 2, heads), dtype)
    out[f"{prefix}ln2.g"] = _ones((c,), dtype)
    out[f"{prefix}ln2.b"] = _zeros((c,), dtype)
    out[f"{prefix}leff.w1"] = _lin_w(rng, c, hid, dtype)
    out[f"{prefix}leff.b1"] = _zeros((hid,), dtype)
    out[f"{prefix}leff.dw"] = _conv_w(rng, (hid, 3, 3), dtype)
    out[f"{prefix}leff.dwb"] = _zeros((hid,), dtype)
    out[f"{prefix}leff.w2"] = _lin_w(rng, hid, c, dtype)
    out[f"{prefix}leff.b2"] = _zeros((c,), dtype)


def init_weights(cfg: NetConfig, seed: int, dtype=np.float32) -> dict:
    """Seeded parameter dict; names are stable and checkpoint-addressable."""
    rng = np.random.default_rng(seed)
    w: dict[str, Tensor] = {}
    c0 = cfg.base_channels
    w["input_proj.w"] = _conv_w(rng, (c0, 1, 3, 3), dtype)
    w["input_proj.b"] = _zeros((c0,), dtype)
    for l in range(cfg.depth):
        c = cfg.stage_channels(l)
        for i in range(cfg.blocks_per_stage):
            _block_weights(rng, f"enc{l}.block{i}.", c, cfg.heads_per_stage[l], cfg, dtype, w)
        w[f"enc{l}.down.w"] = _conv_w(rng, (2 * c, c, 4, 4), dtype)
        w[f"enc{l}.down.b"] = _zeros((2 * c,), dtype)
    cb = cfg.stage_channels(cfg.depth)
    for i in range(cfg.blocks_per_stage):
        _block_weights(rng, f"bott.block{i}.", cb, cfg.bottleneck_heads, cfg, dtype, w)
    for l in reversed(range(cfg.depth)):
        c = cfg.stage_channels(l)
        w[f"dec{l}.up.w"] = _conv_w(rng, (2 * c, c, 2, 2), dtype)
        w[f"dec{l}.up.b"] = _zeros((c,), dtype)
        w[f"dec{l}.fuse.w"] = _conv_w(rng, (c, 2 * c, 1, 1), dtype)
        w[f"dec{l}.fuse.b"] = _zeros((c,), dtype)
        for i in range(cfg.blocks_per_stage):
            _block_weights(rng, f"dec{l}.block{i}.", c, cfg.heads_per_stage[l], cfg, dtype, w)
    w["output_proj.w"] = _conv_w(rng, (1, c0, 3, 3), dtype)
    w["output_proj.b"] = _zeros((1,), dtype)
    return w


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

_REL_IDX_CACHE: dict[int, np.ndarray] = {}


def relative_index(m: int) -> np.ndarray:
    """(M^2, M^2) index into the (2M-1)^2 relative-position bias table."""
    if m not in _REL_IDX_CACHE:
        yy, xx = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        coords = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1)
        rel = coords[:, None, :] - coords[None, :, :] + (m - 1)
        _REL_IDX_CACHE[m] = rel[..., 0] * (2 * m - 1) + rel[..., 1]
    return _REL_IDX_CACHE[m]


def window_partition(x: Tensor, m: int) -> Tensor:
    """(N, C, H, W) -> (N * H*W/M^2, M*M, C) non-overlapping row-major tiles."""
    n, c, h, w = x.shape
    if h % m or w % m:
        raise ag.ShapeError(f"window size {m} does not divide {h}x{w}")
    x = ag.reshape(ag.permute(x, (0, 2, 3, 1)), (n, h // m, m, w // m, m, c))
    x = ag.permute(x, (0, 1, 3, 2, 4, 5))
    return ag.reshape(x, (n * (h // m) * (w // m), m * m, c))


def window_merge(windows: Tensor, h: int, w: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    b, t, c = windows.shape
    m = int(round(math.sqrt(t)))
    n = b * t // (h * w)
    if n * h * w != b * t or m * m != t:
        raise ag.ShapeError(f"cannot merge {b} windows of {t} tokens into {h}x{w}")
    x = ag.reshape(windows, (n, h // m, w // m, m, m, c))
    x = ag.permute(x, (0, 1, 3, 2, 4, 5))
    x = ag.reshape(x, (n, h, w, c))
    return ag.permute(x, (0, 3, 1, 2))


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes (T x d_k)."""
    return ag.attention_core(q, k, v, bias)


def _msa_tokens(tokens: Tensor, wts: dict, prefix: str, heads: int, m: int) -> Tensor:
    """Multi-head self-attention over (B, T, C) token windows."""
    b, t, c = tokens.shape
    dk = c // heads

    def split_heads(x):
        return ag.permute(ag.reshape(x, (b, t, heads, dk)), (0, 2, 1, 3))

    q = split_heads(ag.matmul(tokens, wts[f"{prefix}attn.wq"]))
    k = split_heads(ag.matmul(tokens, wts[f"{prefix}attn.wk"]))
    v = split_heads(ag.matmul(tokens, wts[f"{prefix}attn.wv"]))
    bias = ag.permute(ag.index_select(wts[f"{prefix}attn.bias"], relative_index(m)),
                      (2, 0, 1))          # (heads, T, T), broadcast over windows
    out = attention(q, k, v, bias)
    out = ag.reshape(ag.permute(out, (0, 2, 1, 3)), (b, t, c))
    out = ag.matmul(out, wts[f"{prefix}attn.wo"])
    return ag.add(out, wts[f"{prefix}attn.wo_b"])


def w_msa_forward(x: Tensor, wts: dict, prefix: str, m: int, heads: int) -> Tensor:
    """Window-partitioned multi-head attention on an (N, C, H, W) map."""
    n, c, h, w = x.shape
    windows = window_partition(x, m)
    out = _msa_tokens(windows, wts, prefix, heads, m)
    return window_merge(out, h, w)


def leff_forward(tokens: Tensor, wts: dict, prefix: str, hw: tuple) -> Tensor:
    """Locally-enhanced feed-forward: linear, depthwise 3x3 on the 2-d
    layout, linear; GELU after the first linear and after the conv."""
    b, t, c = tokens.shape
    h, w = hw
    if h * w != t:
        raise ag.ShapeError(f"leff: {t} tokens not reshapeable to {h}x{w}")
    x = ag.gelu(ag.add(ag.matmul(tokens, wts[f"{prefix}leff.w1"]), wts[f"{prefix}leff.b1"]))
    hid = x.shape[-1]
    x = ag.permute(ag.reshape(x, (b, h, w, hid)), (0, 3, 1, 2))
    x = ag.gelu(ag.depthwise_conv2d(x, wts[f"{prefix}leff.dw"], wts[f"{prefix}leff.dwb"], pad=1))
    x = ag.reshape(ag.permute(x, (0, 2, 3, 1)), (b, t, hid))
    return ag.add(ag.matmul(x, wts[f"{prefix}leff.w2"]), wts[f"{prefix}leff.b2"])


def lewin_block_forward(x: Tensor, wts: dict, prefix: str, m: int, heads: int) -> Tensor:
    """Pre-norm residual pair: window attention then local feed-forward."""
    n, c, h, w = x.shape

    def to_tokens(t):
        return ag.reshape(ag.permute(t, (0, 2, 3, 1)), (n, h * w, c))

    def to_map(t):
        return ag.permute(ag.reshape(t, (n, h, w, c)), (0, 3, 1, 2))

    tokens = to_tokens(x)
    a = ag.layer_norm(tokens, wts[f"{prefix}ln1.g"], wts[f"{prefix}ln1.b"])
    a = w_msa_forward(to_map(a), wts, prefix, m, heads)
    x1 = ag.add(tokens, to_tokens(a))
    f = ag.layer_norm(x1, wts[f"{prefix}ln2.g"], wts[f"{prefix}ln2.b"])
    f = leff_forward(f, wts, prefix, (h, w))
    return to_map(ag.add(x1, f))


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

def difnet_forward(x: Tensor, wts: dict, cfg: NetConfig) -> Tensor:
    """(N, 1, H, W) image -> (N, 1, H, W) mask logits; H, W must be
    multiples of win_size * 2**depth (use :func:`pad_to_multiple`)."""
    n, cin, h, w = x.shape
    mult = cfg.size_multiple
    if cin != 1 or h % mult or w % mult:
        raise ag.ShapeError(f"difnet_forward: input {x.shape} must be (N,1,k*{mult},k*{mult})")
    m = cfg.win_size
    x = ag.leaky_relu(ag.conv2d(x, wts["input_proj.w"], wts["input_proj.b"], pad=1),
                      LEAKY_SLOPE)
    skips = []
    for l in range(cfg.depth):
        for i in range(cfg.blocks_per_stage):
            x = lewin_block_forward(x, wts, f"enc{l}.block{i}.", m, cfg.heads_per_stage[l])
        skips.append(x)
        x = ag.conv2d(x, wts[f"enc{l}.down.w"], wts[f"enc{l}.down.b"], stride=2, pad=1)
    for i in range(cfg.blocks_per_stage):
        x = lewin_block_forward(x, wts, f"bott.block{i}.", m, cfg.bottleneck_heads)
    for l in reversed(range(cfg.depth)):
        x = ag.conv2d_transpose(x, wts[f"dec{l}.up.w"], wts[f"dec{l}.up.b"], stride=2)
        x = ag.concat([x, skips[l]], axis=1)
        x = ag.conv2d(x, wts[f"dec{l}.fuse.w"], wts[f"dec{l}.fuse.b"])
        for i in range(cfg.blocks_per_stage):
            x = lewin_block_forward(x, wts, f"dec{l}.block{i}.", m, cfg.heads_per_stage[l])
    return ag.conv2d(x, wts["output_proj.w"], wts["output_proj.b"], pad=1)


def pad_to_multiple(images: np.ndarray, mult: int) -> tuple:
    """Reflection-pad (N, H, W) images up to multiples of ``mult``."""
    n, h, w = images.shape
    ph = (-h) % mult
    pw = (-w) % mult
    padded = np.pad(images, ((0, 0), (0, ph), (0, pw)), mode="reflect") \
        if (ph or pw) else images
    return padded, (h, w)


def forward_images(images: np.ndarray, wts: dict, cfg: NetConfig) -> Tensor:
    """Pad, run the network, crop logits back to the input size."""
    if images.ndim == 2:
        images = images[None]
    padded, (h, w) = pad_to_multiple(np.asarray(images, dtype=np.float32), cfg.size_multiple)
    x = Tensor(padded[:, None, :, :])
    logits = difnet_forward(x, wts, cfg)
    if logits.shape[2] != h or logits.shape[3] != w:
        logits = ag.crop2d(logits, 0, 0, h, w)
    return logits


def charbonnier_mask_loss(logits: Tensor, label: np.ndarray, eps: float) -> Tensor:
    """Mean of sqrt((sigmoid(logit) - y)^2 + eps) over all pixels."""
    if eps <= 0:
        raise ValueError("charbonnier_mask_loss: eps must be positive")
    label = np.asarray(label, dtype=logits.dtype)
    if label.shape != logits.shape:
        raise ag.ShapeError(f"loss: label shape {label.shape} != logits {logits.shape}")
    d = ag.add(ag.sigmoid(logits), Tensor(-label))
    return ag.tmean(ag.sqrt(ag.add(ag.mul(d, d), Tensor(np.asarray(eps, dtype=logits.dtype)))))


def predict_mask(wts: dict, image: np.ndarray, cfg: NetConfig,
                 threshold: float | None = None) -> np.ndarray:
    """Thresholded sigmoid of the network logits; returns a uint8 mask."""
    th = cfg.threshold if threshold is None else threshold
    logits = forward_images(image[None] if image.ndim == 2 else image, wts, cfg)
    prob = 1.0 / (1.0 + np.exp(-logits.data))
    mask = (prob > th).astype(np.uint8)
    return mask[0, 0] if image.ndim == 2 else mask[:, 0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _targets_for(images, masks, loss_mode):
    if loss_mode == "mask":
        return masks.astype(np.float32)
    if loss_mode == "magnitude":
        # ablation: regress the clean TF magnitudes instead of the binary mask
        return (images * (1.0 - masks)).astype(np.float32)
    raise ValueError(f"unknown loss_mode {loss_mode!r}")


def implied_mask(images: np.ndarray, prob: np.ndarray, loss_mode: str,
                 threshold: float) -> np.ndarray:
    """Binary decision from network output under either loss mode."""
    if loss_mode == "mask":
        return (prob > threshold).astype(np.uint8)
    # magnitude regression: flag cells whose magnitude the net suppressed
    return ((images - prob) > 0.25).astype(np.uint8)


def train(dataset, cfg: NetConfig, seed: int, epochs: int = 30, lr: float = 1e-3,
          batch_size: int = 8, val_fraction: float = 0.2, loss_mode: str = "mask",
          log=None, init: dict | None = None, opt_state: dict | None = None,
          start_epoch: int = 0):
    """Mini-batch Adam on the mask loss; deterministic given the seed.

    ``dataset`` is a sequence of (image HxW float, mask HxW {0,1}) pairs.
    Returns (weights, history) where history holds per-epoch train/val loss
    and val IoU.

    The split and each epoch's shuffle are keyed on (seed, epoch) rather
    than a single evolving stream, so a run resumed at ``start_epoch`` from
    saved ``init`` weights and ``opt_state`` retraces the uninterrupted run
    exactly.  ``opt_state`` is updated in place when supplied.
    """
    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    images = np.stack([np.asarray(im, dtype=np.float32) for im, _ in dataset])
    masks = np.stack([np.asarray(mk, dtype=np.float32) for _, mk in dataset])
    targets = _targets_for(images, masks, loss_mode)

    order = np.random.default_rng((seed, 0)).permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    n_val = min(n_val, len(dataset) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]

    weights = init_weights(cfg, seed + 1) if init is None else init
    if init is None:
        # start the output head at the label prior; a head that opens deep in
        # sigmoid saturation stalls for hundreds of steps before learning
        prior = float(np.clip(targets.mean(), 1e-3, 1.0 - 1e-3))
        weights["output_proj.b"].data[:] = math.log(prior / (1.0 - prior))
    state = ag.adam_init(weights) if opt_state is None else opt_state
    history = []
    for epoch in range(start_epoch, epochs):
        erng = np.random.default_rng((seed, 1 + epoch))
        perm = train_idx[erng.permutation(len(train_idx))]
        losses = []
        for s in range(0, len(perm), batch_size):
            idx = perm[s:s + batch_size]
            logits = forward_images(images[idx], weights, cfg)
            loss = charbonnier_mask_loss(logits, targets[idx][:, None], cfg.eps_loss)
            lval = loss.item()
            if not math.isfinite(lval):
                raise TrainDivergedError(f"non-finite loss at epoch {epoch}")
            ag.backward(loss)
            grads = {k: w.grad for k, w in weights.items()}
            ag.adam_step(weights, grads, state, lr=lr)
            for w in weights.values():
                w.zero_grad()
            losses.append(lval)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if n_val:
            vloss, viou = evaluate_split(weights, cfg, images[val_idx],
                                         masks[val_idx], targets[val_idx], loss_mode)
            rec["val_loss"] = vloss
            rec["val_iou"] = viou
        history.append(rec)
        if log is not None:
            log(rec)
    return weights, history


def evaluate_split(weights, cfg, images, masks, targets, loss_mode="mask",
                   batch_size: int = 8):
    """Mean loss and mask IoU of a model over a held-out split."""
    from .metrics import iou as iou_metric
    losses, ious = [], []
    for s in range(0, len(images), batch_size):
        im = images[s:s + batch_size]
        logits = forward_images(im, weights, cfg)
        loss = charbonnier_mask_loss(logits, targets[s:s + batch_size][:, None],
                                     cfg.eps_loss)
        losses.append(loss.item())
        prob = 1.0 / (1.0 + np.exp(-logits.data[:, 0]))
        pred = implied_mask(im, prob, loss_mode, cfg.threshold)
        for p, t in zip(pred, masks[s:s + batch_size]):
            ious.append(iou_metric(p, t))
    return float(np.mean(losses)), float(np.mean(ious))
