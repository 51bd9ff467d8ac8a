"""Full classifier: patch embedding, SCConv refinement, class token and
positional table, GLAE block(s), the KAN-transformer encoder stack, and a
linear head on the class token.

Pipeline order: images are cut into non-overlapping P x P patches and
projected to width D; SCConv runs on the patch tokens while they still
have a grid layout (the class token has no spatial position, so it is
prepended only afterwards); the positional table is added once; GLAE
captures neighborhood structure; the encoder stack alternates pre-norm MSA
and pre-norm KAN sublayers, each wrapped in a residual; the head reads the
final class-token state.

Every learnable tensor and every piece of running state is reachable via
``named_parameters`` / ``state_tensors`` under a stable name, so checkpoints
are complete by construction and loading is a pure assignment.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .attention import MsaParams, msa_forward
from .glae import BnState, LocalPartParams, glae_block_forward
from .kan import KanStack, SplineGrid, kan_forward
from .scconv import CruParams, SruParams, scconv_patches
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concatenate,
    layer_norm,
    matmul,
    reshape,
    silu,
    transpose,
)
from .tensor import split as tsplit

_CONFIG_FIELDS = {
    "image_h": 32,
    "image_w": 32,
    "channels": 3,
    "patch_size": 4,
    "hidden": 64,
    "heads": 4,
    "kansformer_blocks": 2,
    "glae_blocks": 1,
    "kan_intervals": 5,
    "kan_order": 3,
    "kan_hidden_factor": 2,
    "num_classes": 8,
    "use_scconv": True,
    "use_glae": True,
    "use_kan": True,
    "scconv_gn_groups": 4,
    "glae_expansion": 2,
}


class ModelConfig:
    """Geometry and toggles; the desk-scale defaults train in minutes."""

    def __init__(self, **kw):
        unknown = set(kw) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        for name, default in _CONFIG_FIELDS.items():
            setattr(self, name, kw.get(name, default))
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch_size={self.patch_size}"
            )
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.kansformer_blocks < 1:
            raise ConfigError("encoder stack needs at least one block")
        if self.glae_blocks < 0:
            raise ConfigError("glae_blocks must be >= 0")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _CONFIG_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class LnParams:
    def __init__(self, width: int, dtype=None):
        self.gamma = Tensor(np.ones(width), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(width), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def parameters(self) -> list:
        return [self.gamma, self.beta]


class MlpParams:
    """Two transformation matrices with a silu between; the KAN ablation."""

    def __init__(self, width: int, hidden: int, rng, dtype=None):
        self.w1 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, hidden)), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, width)), requires_grad=True, dtype=dtype)

    def parameters(self) -> list:
        return [self.w1, self.w2]


class KansformerBlock:
    def __init__(self, cfg: ModelConfig, rng, dtype=None):
        d = cfg.hidden
        self.msa = MsaParams(d, cfg.heads, rng=rng, dtype=dtype)
        self.ln1 = LnParams(d, dtype=dtype)
        self.ln2 = LnParams(d, dtype=dtype)
        widths = [d, d * cfg.kan_hidden_factor, d]
        if cfg.use_kan:
            grid = SplineGrid(intervals=cfg.kan_intervals, order=cfg.kan_order)
            self.ffn = KanStack.from_widths(widths, grid=grid, rng=rng, dtype=dtype)
        else:
            self.ffn = MlpParams(widths[0], widths[1], rng, dtype=dtype)

    def parameters(self) -> list:
        return (
            self.msa.parameters() + self.ln1.parameters() + self.ln2.parameters() + self.ffn.parameters()
        )


def _ffn_forward(z: Tensor, ffn) -> Tensor:
    b, s, d = z.shape
    flat = reshape(z, (b * s, d))
    if isinstance(ffn, KanStack):
        out = kan_forward(flat, ffn)
    else:
        out = matmul(silu(matmul(flat, ffn.w1)), ffn.w2)
    return reshape(out, (b, s, d))


def kansformer_block_forward(z: Tensor, block: KansformerBlock) -> Tensor:
    """z += MSA(LN(z)); z += FFN(LN(z)) with the FFN applied row-wise."""
    z = add(z, msa_forward(block.ln1(z), block.msa))
    z = add(z, _ffn_forward(block.ln2(z), block.ffn))
    return z


class SCKansformerModel:
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.hidden
        flat_patch = cfg.patch_size * cfg.patch_size * cfg.channels
        self.patch_proj = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(flat_patch), size=(flat_patch, d)), requires_grad=True, dtype=dtype
        )
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True, dtype=dtype)
        self.pos_embed = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.num_patches + 1, d)), requires_grad=True, dtype=dtype
        )
        if cfg.use_scconv:
            self.sru = SruParams(d, gn_groups=cfg.scconv_gn_groups, dtype=dtype)
            self.cru = CruParams(d, rng=rng, dtype=dtype)
        else:
            self.sru = self.cru = None
        self.glae = []
        if cfg.use_glae:
            for _ in range(cfg.glae_blocks):
                msa = MsaParams(d, cfg.heads, rng=rng, dtype=dtype)
                lp = LocalPartParams(d, expansion=cfg.glae_expansion, rng=rng, dtype=dtype)
                self.glae.append((msa, lp))
        self.blocks = [KansformerBlock(cfg, rng, dtype=dtype) for _ in range(cfg.kansformer_blocks)]
        self.final_norm = LnParams(d, dtype=dtype)
        # zero head: initial logits are all zero, initial loss is ln(K)
        self.head = Tensor(np.zeros((d, cfg.num_classes)), requires_grad=True, dtype=dtype)

    # -- parameter plumbing --------------------------------------------

    def named_parameters(self) -> dict:
        named = {
            "patch_proj": self.patch_proj,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
            "head.w": self.head,
            "final_norm.gamma": self.final_norm.gamma,
            "final_norm.beta": self.final_norm.beta,
        }
        if self.sru is not None:
            named["scconv.sru.gamma"] = self.sru.gamma
            named["scconv.sru.beta"] = self.sru.beta
            for field in ("sq_up", "sq_low", "gwc", "pwc_up", "pwc_low"):
                named[f"scconv.cru.{field}"] = getattr(self.cru, field)
        for i, (msa, lp) in enumerate(self.glae):
            for field in ("wq", "wk", "wv", "wo"):
                named[f"glae.{i}.msa.{field}"] = getattr(msa, field)
            named[f"glae.{i}.lp.expand"] = lp.expand_kernel
            named[f"glae.{i}.lp.dw"] = lp.dw_kernel
            named[f"glae.{i}.lp.squeeze"] = lp.squeeze_kernel
            for tag, bn in (("bn1", lp.bn_expand), ("bn2", lp.bn_squeeze)):
                named[f"glae.{i}.lp.{tag}.gamma"] = bn.gamma
                named[f"glae.{i}.lp.{tag}.beta"] = bn.beta
        for b, block in enumerate(self.blocks):
            for field in ("wq", "wk", "wv", "wo"):
                named[f"msa.{b}.{field}"] = getattr(block.msa, field)
            for tag, ln in (("ln1", block.ln1), ("ln2", block.ln2)):
                named[f"{tag}.{b}.gamma"] = ln.gamma
                named[f"{tag}.{b}.beta"] = ln.beta
            if isinstance(block.ffn, KanStack):
                for l, layer in enumerate(block.ffn.layers):
                    named[f"kan.{b}.{l}.spline"] = layer.spline_coeffs
                    named[f"kan.{b}.{l}.base_w"] = layer.base_weight
            else:
                named[f"mlp.{b}.w1"] = block.ffn.w1
                named[f"mlp.{b}.w2"] = block.ffn.w2
        return named

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def _bn_sites(self) -> dict:
        sites = {}
        for i, (_, lp) in enumerate(self.glae):
            sites[f"glae.{i}.lp.bn1"] = lp.bn_expand
            sites[f"glae.{i}.lp.bn2"] = lp.bn_squeeze
        return sites

    def state_tensors(self) -> dict:
        """Everything a checkpoint must hold: parameters + running statistics."""
        state = {name: t.data for name, t in self.named_parameters().items()}
        for name, bn in self._bn_sites().items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state(self, tensors: dict) -> None:
        expected = self.state_tensors()
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise ShapeError(
                f"checkpoint mismatch: missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}"
            )
        named = self.named_parameters()
        for name, arr in tensors.items():
            target = named[name].data if name in named else expected[name]
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr


def patch_embed(image: Tensor, m: SCKansformerModel) -> Tensor:
    """[B,C,H,W] -> [B,N,D]: flatten each P x P block (channel-first) and project."""
    cfg = m.cfg
    if image.ndim != 4 or image.shape[1:] != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ShapeError(
            f"expected [B,{cfg.channels},{cfg.image_h},{cfg.image_w}], got {image.shape}"
        )
    b = image.shape[0]
    p, gh, gw = cfg.patch_size, cfg.grid_h, cfg.grid_w
    x = reshape(image, (b, cfg.channels, gh, p, gw, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))  # [B,gh,gw,C,p,p], patches in row-major order
    x = reshape(x, (b, gh * gw, cfg.channels * p * p))
    return matmul(x, m.patch_proj)


def forward(image: Tensor, m: SCKansformerModel, train: bool = True) -> Tensor:
    """Logits [B, num_classes]."""
    cfg = m.cfg
    x = patch_embed(image, m)
    if m.sru is not None:
        x = scconv_patches(x, cfg.grid_h, cfg.grid_w, m.sru, m.cru)
    b = x.shape[0]
    cls = broadcast_to(reshape(m.cls_token, (1, 1, cfg.hidden)), (b, 1, cfg.hidden))
    z = concatenate([cls, x], axis=1)
    z = add(z, m.pos_embed)
    for msa, lp in m.glae:
        z = glae_block_forward(z, msa, lp, cfg.grid_h, cfg.grid_w, train=train)
    for block in m.blocks:
        z = kansformer_block_forward(z, block)
    z = m.final_norm(z)
    cls_final, _ = tsplit(z, [1, cfg.num_patches], axis=1)
    return matmul(reshape(cls_final, (b, cfg.hidden)), m.head)


def ablation_variant(
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    scconv: bool = True,
    glae: bool = True,
    kan: bool = True,
) -> SCKansformerModel:
    """Build the model with selected modules replaced by their identity/MLP stand-ins."""
    d = cfg.to_dict()
    d["use_scconv"] = d["use_scconv"] and scconv
    d["use_glae"] = d["use_glae"] and glae
    d["use_kan"] = d["use_kan"] and kan
    return SCKansformerModel(ModelConfig(**d), rng=rng)
