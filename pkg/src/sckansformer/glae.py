"""Global-local attention encoder.

The block pairs MSA (long-range dependencies) with a Local Part module that
walks the tokens back into image layout (S2I), runs a pointwise-expand /
depthwise / pointwise-squeeze stack over the 2-D neighborhood, and returns
to sequence layout (I2S). The class token has no spatial position, so it
bypasses the Local Part entirely and must come out bit-identical.

The activation is named h_swish after the source formula, which defines it
as x * sigmoid(x) (the smooth swish form, not the piecewise-hard variant);
it is implemented exactly as that formula.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .attention import MsaParams, msa_forward
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    concatenate,
    conv2d,
    layer_norm,
    mul,
    reshape,
    sigmoid,
    transpose,
)
from .tensor import split as tsplit


def h_swish(x: Tensor) -> Tensor:
    return mul(x, sigmoid(x))


class TokenSequence:
    """cls [B,1,D] + patches [B,N,D] with the patch grid geometry."""

    def __init__(self, cls: Tensor, patches: Tensor, grid_h: int, grid_w: int):
        if cls.ndim != 3 or patches.ndim != 3 or cls.shape[1] != 1:
            raise ShapeError(f"expected cls [B,1,D] and patches [B,N,D], got {cls.shape}, {patches.shape}")
        if cls.shape[0] != patches.shape[0] or cls.shape[2] != patches.shape[2]:
            raise ShapeError(f"cls {cls.shape} and patches {patches.shape} disagree")
        if grid_h * grid_w != patches.shape[1]:
            raise ConfigError(f"grid {grid_h}x{grid_w} does not cover {patches.shape[1]} patches")
        self.cls = cls
        self.patches = patches
        self.grid_h = grid_h
        self.grid_w = grid_w

    @property
    def width(self) -> int:
        return self.patches.shape[2]


def split_sequence(z: Tensor, grid_h: int, grid_w: int) -> TokenSequence:
    """First row is cls, the rest are patches in row-major grid order."""
    if z.ndim == 2:
        z = reshape(z, (1,) + z.shape)
    if z.ndim != 3 or z.shape[1] < 2:
        raise ShapeError(f"sequence must be [B, N+1>=2, D], got {z.shape}")
    n = z.shape[1] - 1
    if grid_h * grid_w != n:
        raise ConfigError(f"grid {grid_h}x{grid_w} does not cover {n} patches")
    cls_part, patch_part = tsplit(z, [1, n], axis=1)
    return TokenSequence(cls_part, patch_part, grid_h, grid_w)


def full_sequence(ts: TokenSequence) -> Tensor:
    return concatenate([ts.cls, ts.patches], axis=1)


def s2i(patches: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """[B,N,D] -> [B,D,grid_h,grid_w], patch i at (i div grid_w, i mod grid_w)."""
    if patches.ndim != 3:
        raise ShapeError(f"s2i expects [B,N,D], got {patches.shape}")
    b, n, d = patches.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"s2i: {n} patches do not fill a {grid_h}x{grid_w} grid")
    return reshape(transpose(patches, (0, 2, 1)), (b, d, grid_h, grid_w))


def i2s(image: Tensor) -> Tensor:
    """[B,D,H,W] -> [B,H*W,D]; exact inverse of s2i."""
    if image.ndim != 4:
        raise ShapeError(f"i2s expects [B,D,H,W], got {image.shape}")
    b, d, h, w = image.shape
    return transpose(reshape(image, (b, d, h * w)), (0, 2, 1))


class BnState:
    """Learnable affine plus running statistics for one BatchNorm site."""

    def __init__(self, channels: int, dtype=None):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, train=train)

    def parameters(self) -> list:
        return [self.gamma, self.beta]


class LocalPartParams:
    """1x1 expand -> BN -> h_swish -> 3x3 depthwise -> 1x1 squeeze -> BN."""

    def __init__(self, d_model: int, expansion: int = 2, rng: Optional[np.random.Generator] = None, dtype=None):
        if expansion < 1:
            raise ConfigError(f"expansion factor must be >= 1, got {expansion}")
        rng = rng or np.random.default_rng(0)
        e = d_model * expansion
        self.d_model = d_model
        self.expansion = expansion

        def conv_w(shape, fan_in):
            return Tensor(rng.normal(0.0, (1.0 / fan_in) ** 0.5, size=shape), requires_grad=True, dtype=dtype)

        self.expand_kernel = conv_w((e, d_model, 1, 1), d_model)
        self.dw_kernel = conv_w((e, 1, 3, 3), 9)
        self.squeeze_kernel = conv_w((d_model, e, 1, 1), e)
        self.bn_expand = BnState(e, dtype=dtype)
        self.bn_squeeze = BnState(d_model, dtype=dtype)

    def parameters(self) -> list:
        return (
            [self.expand_kernel, self.dw_kernel, self.squeeze_kernel]
            + self.bn_expand.parameters()
            + self.bn_squeeze.parameters()
        )


def local_part_forward(z: TokenSequence, p: LocalPartParams, train: bool = True) -> TokenSequence:
    """Neighborhood mixing over the patch grid; cls passes through untouched."""
    if z.width != p.d_model:
        raise ShapeError(f"local part built for width {p.d_model}, sequence has {z.width}")
    img = s2i(z.patches, z.grid_h, z.grid_w)
    expanded = p.bn_expand(conv2d(img, p.expand_kernel), train)
    activated = h_swish(expanded)
    mixed = conv2d(activated, p.dw_kernel, stride=1, padding=1, groups=p.d_model * p.expansion)
    squeezed = p.bn_squeeze(conv2d(mixed, p.squeeze_kernel), train)
    return TokenSequence(z.cls, i2s(squeezed), z.grid_h, z.grid_w)


def _prenorm(z: Tensor) -> Tensor:
    # affine-free pre-norm on the MSA branch: GLAE checkpoints carry no
    # layer-norm tensors, so the affine pair stays constant
    d = z.shape[-1]
    return layer_norm(z, Tensor(np.ones(d), dtype=z.dtype), Tensor(np.zeros(d), dtype=z.dtype))


def glae_block_forward(
    z: Tensor,
    msa: MsaParams,
    lp: LocalPartParams,
    grid_h: int,
    grid_w: int,
    train: bool = True,
) -> Tensor:
    """u = z + MSA(norm(z)); patches of u get the Local Part residual."""
    squeeze = z.ndim == 2
    if squeeze:
        z = reshape(z, (1,) + z.shape)
    u = add(z, msa_forward(_prenorm(z), msa))
    seq = split_sequence(u, grid_h, grid_w)
    local = local_part_forward(seq, lp, train=train)
    out_patches = add(seq.patches, local.patches)
    out = concatenate([seq.cls, out_patches], axis=1)
    return reshape(out, out.shape[1:]) if squeeze else out
