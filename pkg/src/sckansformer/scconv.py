"""Spatial and channel reconstruction over the patch grid.

SRU: a group-norm-derived gate splits each feature map into informative and
redundant parts with hard binary masks, then cross-adds half-channel groups
so neither part is simply discarded. The indicator is not differentiable,
so the masks are treated as constants: gradients reach x through the
mask-times-x products only, and the gate's GN affine (gamma, beta) sits
outside the gradient graph by construction.

CRU: channels are split at ratio alpha, squeezed by 1x1 convs, transformed
by a rich branch (3x3 group-wise + point-wise) and a cheap branch
(point-wise + identity concat), then fused with per-channel two-way softmax
weights computed from global average pooling. The two weights are built as
sigmoid(s1 - s2) and its complement, which makes beta1 + beta2 == 1 exact
in floating point, not just analytically.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .glae import TokenSequence, i2s, s2i
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    concatenate,
    conv2d,
    global_avg_pool,
    group_norm,
    mul,
    no_grad,
    reshape,
    sigmoid,
    sub,
)
from .tensor import split as tsplit


class SruParams:
    def __init__(
        self,
        channels: int,
        gn_groups: int = 4,
        eps: float = 1e-5,
        gate_threshold: float = 0.5,
        dtype=None,
    ):
        if channels % gn_groups != 0:
            raise ConfigError(f"channels {channels} not divisible by gn_groups={gn_groups}")
        if channels % 2 != 0:
            raise ConfigError(f"cross-reconstruction needs an even channel count, got {channels}")
        if not 0.0 < gate_threshold < 1.0:
            raise ConfigError(f"gate threshold must lie in (0,1), got {gate_threshold}")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.channels = channels
        self.gn_groups = gn_groups
        self.eps = eps
        self.gate_threshold = gate_threshold
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)

    def parameters(self) -> list:
        return [self.gamma, self.beta]


def sru_masks(x: Tensor, p: SruParams) -> Tuple[np.ndarray, np.ndarray]:
    """Binary gate masks (W1, W2), computed outside the gradient graph."""
    with no_grad():
        gn = group_norm(x, p.gn_groups, p.gamma, p.beta, eps=p.eps).data
    w = p.gamma.data / p.gamma.data.sum()
    gate = 1.0 / (1.0 + np.exp(-(w.reshape(1, -1, 1, 1) * gn)))
    w1 = (gate > p.gate_threshold).astype(x.dtype)
    return w1, 1.0 - w1


def sru_gate_margin(x: Tensor, p: SruParams) -> float:
    """Smallest |gate - threshold| over the map; finite-difference checks
    are only meaningful when this is comfortably above the probe step."""
    with no_grad():
        gn = group_norm(x, p.gn_groups, p.gamma, p.beta, eps=p.eps).data
    w = p.gamma.data / p.gamma.data.sum()
    gate = 1.0 / (1.0 + np.exp(-(w.reshape(1, -1, 1, 1) * gn)))
    return float(np.abs(gate - p.gate_threshold).min())


def sru_forward(x: Tensor, p: SruParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"sru built for {p.channels} channels, got {x.shape}")
    w1, w2 = sru_masks(x, p)
    x1 = mul(x, Tensor(w1, dtype=x.dtype))
    x2 = mul(x, Tensor(w2, dtype=x.dtype))
    half = p.channels // 2
    x11, x12 = tsplit(x1, [half, half], axis=1)
    x21, x22 = tsplit(x2, [half, half], axis=1)
    return concatenate([add(x11, x22), add(x12, x21)], axis=1)


class CruParams:
    def __init__(
        self,
        channels: int,
        alpha: float = 0.5,
        squeeze_ratio: int = 2,
        gwc_groups: int = 2,
        rng: Optional[np.random.Generator] = None,
        dtype=None,
    ):
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0,1), got {alpha}")
        up_c = math.ceil(alpha * channels)
        low_c = channels - up_c
        if low_c < 1:
            raise ConfigError(f"alpha={alpha} leaves no channels for the low branch")
        s_up = up_c // squeeze_ratio
        s_low = low_c // squeeze_ratio
        if s_up < 1 or s_low < 1:
            raise ConfigError(
                f"squeeze_ratio={squeeze_ratio} collapses a branch ({up_c}->{s_up}, {low_c}->{s_low})"
            )
        if s_up % gwc_groups != 0 or channels % gwc_groups != 0:
            raise ConfigError(
                f"gwc_groups={gwc_groups} must divide squeezed-up width {s_up} and channels {channels}"
            )
        if channels - s_low < 1:
            raise ConfigError("low branch identity-concat leaves no room for its point-wise part")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.alpha = alpha
        self.up_c = up_c
        self.low_c = low_c
        self.s_up = s_up
        self.s_low = s_low
        self.gwc_groups = gwc_groups

        def conv_w(shape):
            fan_in = shape[1] * shape[2] * shape[3]
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True, dtype=dtype)

        self.sq_up = conv_w((s_up, up_c, 1, 1))
        self.sq_low = conv_w((s_low, low_c, 1, 1))
        self.gwc = conv_w((channels, s_up // gwc_groups, 3, 3))
        self.pwc_up = conv_w((channels, s_up, 1, 1))
        self.pwc_low = conv_w((channels - s_low, s_low, 1, 1))

    def parameters(self) -> list:
        return [self.sq_up, self.sq_low, self.gwc, self.pwc_up, self.pwc_low]


def fuse_weights(s1: Tensor, s2: Tensor) -> Tuple[Tensor, Tensor]:
    """Two-way per-channel softmax with an exact complement: beta1 + beta2 == 1."""
    beta1 = sigmoid(sub(s1, s2))
    beta2 = sub(Tensor(np.ones(()), dtype=beta1.dtype), beta1)
    return beta1, beta2


def cru_forward(xw: Tensor, p: CruParams) -> Tensor:
    if xw.ndim != 4 or xw.shape[1] != p.channels:
        raise ShapeError(f"cru built for {p.channels} channels, got {xw.shape}")
    b = xw.shape[0]
    x_up_raw, x_low_raw = tsplit(xw, [p.up_c, p.low_c], axis=1)
    x_up = conv2d(x_up_raw, p.sq_up)
    x_low = conv2d(x_low_raw, p.sq_low)
    y1 = add(conv2d(x_up, p.gwc, stride=1, padding=1, groups=p.gwc_groups), conv2d(x_up, p.pwc_up))
    y2 = concatenate([conv2d(x_low, p.pwc_low), x_low], axis=1)
    s1 = global_avg_pool(y1)
    s2 = global_avg_pool(y2)
    beta1, beta2 = fuse_weights(s1, s2)
    beta1 = reshape(beta1, (b, p.channels, 1, 1))
    beta2 = reshape(beta2, (b, p.channels, 1, 1))
    return add(mul(beta1, y1), mul(beta2, y2))


def scconv_patches(patches: Tensor, grid_h: int, grid_w: int, sru: SruParams, cru: CruParams) -> Tensor:
    """SRU then CRU over the patch grid; token count and width preserved."""
    img = s2i(patches, grid_h, grid_w)
    return i2s(cru_forward(sru_forward(img, sru), cru))


def scconv_encode(tokens: TokenSequence, sru: SruParams, cru: CruParams) -> TokenSequence:
    refined = scconv_patches(tokens.patches, tokens.grid_h, tokens.grid_w, sru, cru)
    return TokenSequence(tokens.cls, refined, tokens.grid_h, tokens.grid_w)
