"""Finite-difference verification suites: every differentiable op and every
composite block is checked against central differences (h=1e-5, float64)
over several seeds, reporting the worst relative error per check.

Inputs that feed threshold gates are seed-filtered so the probes stay off
mask discontinuities; everything else uses plain random draws.
"""

from __future__ import annotations

import numpy as np

from .attention import MsaParams, attention, msa_forward
from .glae import LocalPartParams, glae_block_forward, h_swish, local_part_forward, s2i, split_sequence
from .kan import KanLayer, KanStack, SplineGrid, kan_forward, kan_layer_forward, spline_basis_op
from .model import ModelConfig, SCKansformerModel, forward, kansformer_block_forward, patch_embed
from .scconv import CruParams, SruParams, cru_forward, scconv_patches, sru_forward, sru_gate_margin
from .tensor import (
    ConfigError,
    Tensor,
    add,
    batch_norm,
    broadcast_to,
    concatenate,
    conv2d,
    cross_entropy_with_logits,
    div,
    exp,
    global_avg_pool,
    group_norm,
    layer_norm,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    silu,
    softmax,
    split,
    sqrt,
    sub,
    softmax as _softmax,
    tmean,
    transpose,
    tsum,
)

GATE_MARGIN = 1e-3  # SRU gates must sit at least this far from threshold


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _sample_indices(size: int, limit: int) -> np.ndarray:
    if size <= limit:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, num=limit, dtype=np.int64))


def _scalarize(out: Tensor) -> Tensor:
    if out.ndim == 0:
        return out
    return tsum(mul(out, out))


def _worst_err(loss_fn, tensors, h: float, limit: int) -> float:
    """Analytic grads from one backward vs central differences on sampled entries."""
    loss = _scalarize(loss_fn())
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    with no_grad():
        for t, g in zip(tensors, grads):
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in _sample_indices(flat.size, limit):
                keep = flat[i]
                flat[i] = keep + h
                up = float(_scalarize(loss_fn()).data)
                flat[i] = keep - h
                down = float(_scalarize(loss_fn()).data)
                flat[i] = keep
                fd = (up - down) / (2.0 * h)
                worst = max(worst, _rel(float(gflat[i]), fd))
    for t in tensors:
        t.grad = None
    return worst


def _t(rng, *shape, scale=1.0, shift=0.0):
    return Tensor(rng.normal(size=shape) * scale + shift, requires_grad=True)


# -- per-module check builders -----------------------------------------------
# each builder: seed -> (loss_fn, tensors-to-probe)


def _tensor_checks():
    def binary(op, offset=0.0):
        def build(seed):
            rng = np.random.default_rng(seed)
            a = _t(rng, 3, 4)
            b = _t(rng, 3, 4, shift=offset)
            return (lambda: op(a, b)), [a, b]
        return build

    def binary_broadcast(op, offset=0.0):
        def build(seed):
            rng = np.random.default_rng(seed)
            a = _t(rng, 2, 3, 4)
            b = _t(rng, 4, shift=offset)
            return (lambda: op(a, b)), [a, b]
        return build

    def unary(op, scale=1.0, shift=0.0):
        def build(seed):
            rng = np.random.default_rng(seed)
            a = _t(rng, 3, 5, scale=scale, shift=shift)
            return (lambda: op(a)), [a]
        return build

    def positive_unary(op):
        def build(seed):
            rng = np.random.default_rng(seed)
            a = Tensor(np.abs(rng.normal(size=(3, 5))) + 0.5, requires_grad=True)
            return (lambda: op(a)), [a]
        return build

    def matmul_plain(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(rng, 3, 4), _t(rng, 4, 2)
        return (lambda: matmul(a, b)), [a, b]

    def matmul_batched(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 4, 2)
        return (lambda: matmul(a, b)), [a, b]

    def matmul_broadcast(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
        return (lambda: matmul(a, b)), [a, b]

    def reshape_chain(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 4)
        return (lambda: reshape(a, (2, 6))), [a]

    def transpose_axes(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 2, 3, 4)
        return (lambda: transpose(a, (2, 0, 1))), [a]

    def broadcast_expand(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 1)
        return (lambda: broadcast_to(a, (2, 3, 4))), [a]

    def concat_pair(seed):
        rng = np.random.default_rng(seed)
        a, b = _t(rng, 2, 3), _t(rng, 2, 2)
        return (lambda: concatenate([a, b], axis=1)), [a, b]

    def split_pieces(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 2, 5)

        def run():
            left, right = split(a, [2, 3], axis=1)
            return concatenate([mul(left, left), right], axis=1)
        return run, [a]

    def sum_axis(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 4, 2)
        return (lambda: tsum(a, axis=(1,))), [a]

    def sum_keepdims(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 4)
        return (lambda: tsum(a, axis=1, keepdims=True)), [a]

    def mean_all(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 4)
        return (lambda: tmean(a)), [a]

    def softmax_rows(seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, 3, 6)
        return (lambda: softmax(a, axis=-1)), [a]

    def conv_basic(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 3, 5, 5, scale=0.5)
        k = _t(rng, 4, 3, 3, 3, scale=0.5)
        return (lambda: conv2d(x, k, padding=1)), [x, k]

    def conv_strided(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 2, 6, 6, scale=0.5)
        k = _t(rng, 3, 2, 3, 3, scale=0.5)
        return (lambda: conv2d(x, k, stride=2, padding=1)), [x, k]

    def conv_grouped(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 4, 4, 4, scale=0.5)
        k = _t(rng, 6, 2, 3, 3, scale=0.5)
        return (lambda: conv2d(x, k, padding=1, groups=2)), [x, k]

    def conv_depthwise(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 4, 4, 4, scale=0.5)
        k = _t(rng, 4, 1, 3, 3, scale=0.5)
        return (lambda: conv2d(x, k, padding=1, groups=4)), [x, k]

    def ln(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 3, 4, 6)
        gamma = _t(rng, 6, shift=1.0, scale=0.1)
        beta = _t(rng, 6, scale=0.1)
        return (lambda: layer_norm(x, gamma, beta)), [x, gamma, beta]

    def gn(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 8, 3, 3)
        gamma = _t(rng, 8, shift=1.0, scale=0.1)
        beta = _t(rng, 8, scale=0.1)
        return (lambda: group_norm(x, 4, gamma, beta)), [x, gamma, beta]

    def bn_train(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 4, 3, 2, 2)
        gamma = _t(rng, 3, shift=1.0, scale=0.1)
        beta = _t(rng, 3, scale=0.1)

        def run():
            return batch_norm(x, gamma, beta, np.zeros(3), np.ones(3), train=True)
        return run, [x, gamma, beta]

    def gap(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 2, 3, 4, 4)
        return (lambda: global_avg_pool(x)), [x]

    def ce(seed):
        rng = np.random.default_rng(seed)
        logits = _t(rng, 4, 5)
        labels = np.random.default_rng(seed + 1).integers(0, 5, size=4)
        return (lambda: cross_entropy_with_logits(logits, labels)), [logits]

    return [
        ("add", binary(add)),
        ("add_broadcast", binary_broadcast(add)),
        ("sub", binary(sub)),
        ("mul", binary(mul)),
        ("div", binary(div, offset=3.0)),
        ("neg", unary(neg)),
        ("matmul", matmul_plain),
        ("matmul_batched", matmul_batched),
        ("matmul_broadcast", matmul_broadcast),
        ("reshape", reshape_chain),
        ("transpose", transpose_axes),
        ("broadcast_to", broadcast_expand),
        ("concatenate", concat_pair),
        ("split", split_pieces),
        ("sum", sum_axis),
        ("sum_keepdims", sum_keepdims),
        ("mean", mean_all),
        ("exp", unary(exp, scale=0.5)),
        ("log", positive_unary(log)),
        ("sqrt", positive_unary(sqrt)),
        ("sigmoid", unary(sigmoid)),
        ("silu", unary(silu)),
        ("softmax", softmax_rows),
        ("conv2d", conv_basic),
        ("conv2d_strided", conv_strided),
        ("conv2d_grouped", conv_grouped),
        ("conv2d_depthwise", conv_depthwise),
        ("layer_norm", ln),
        ("group_norm", gn),
        ("batch_norm_train", bn_train),
        ("global_avg_pool", gap),
        ("cross_entropy", ce),
    ]


def _kan_checks():
    def basis(seed):
        rng = np.random.default_rng(seed)
        grid = SplineGrid()
        x = Tensor(rng.uniform(-0.9, 0.9, size=10), requires_grad=True)
        return (lambda: spline_basis_op(x, grid)), [x]

    def layer(seed):
        rng = np.random.default_rng(seed)
        p = KanLayer(4, 3, rng=np.random.default_rng(seed + 1))
        x = Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)), requires_grad=True)
        return (lambda: kan_layer_forward(x, p)), [x, p.spline_coeffs, p.base_weight]

    def stack(seed):
        rng = np.random.default_rng(seed)
        s = KanStack.from_widths([4, 6, 2], grid=SplineGrid(), rng=np.random.default_rng(seed + 1))
        x = Tensor(rng.uniform(-0.8, 0.8, size=(3, 4)), requires_grad=True)
        probes = [x] + [t for layer in s.layers for t in (layer.spline_coeffs, layer.base_weight)]
        return (lambda: kan_forward(x, s)), probes

    return [("spline_basis", basis), ("kan_layer", layer), ("kan_stack", stack)]


def _attention_checks():
    def plain(seed):
        rng = np.random.default_rng(seed)
        q, k, v = _t(rng, 2, 5, 4), _t(rng, 2, 5, 4), _t(rng, 2, 5, 4)
        return (lambda: attention(q, k, v)), [q, k, v]

    def msa(seed):
        rng = np.random.default_rng(seed)
        p = MsaParams(8, 2, rng=np.random.default_rng(seed + 1))
        x = _t(rng, 2, 5, 8)
        return (lambda: msa_forward(x, p)), [x, p.wq, p.wk, p.wv, p.wo]

    return [("attention", plain), ("msa", msa)]


def _glae_checks():
    def hsw(seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, 3, 4)
        return (lambda: h_swish(x)), [x]

    def local(seed):
        rng = np.random.default_rng(seed)
        p = LocalPartParams(4, rng=np.random.default_rng(seed + 1))
        z = _t(rng, 2, 7, 4)  # 1 cls + 2x3 grid

        def run():
            seq = local_part_forward(split_sequence(z, 2, 3), p, train=True)
            return concatenate([seq.cls, seq.patches], axis=1)
        probes = [z, p.expand_kernel, p.dw_kernel, p.squeeze_kernel,
                  p.bn_expand.gamma, p.bn_expand.beta, p.bn_squeeze.gamma, p.bn_squeeze.beta]
        return run, probes

    def block(seed):
        rng = np.random.default_rng(seed)
        msa = MsaParams(4, 2, rng=np.random.default_rng(seed + 1))
        lp = LocalPartParams(4, rng=np.random.default_rng(seed + 2))
        z = _t(rng, 2, 7, 4)
        probes = [z, msa.wq, msa.wo, lp.expand_kernel, lp.dw_kernel, lp.squeeze_kernel]
        return (lambda: glae_block_forward(z, msa, lp, 2, 3, train=True)), probes

    return [("h_swish", hsw), ("local_part", local), ("glae_block", block)]


def _filtered_image(seed, shape, params, tries=60):
    """Random [B,C,H,W] draw whose SRU gates clear the threshold margin."""
    for k in range(tries):
        rng = np.random.default_rng(seed + 1000 * k)
        x = rng.normal(size=shape)
        if sru_gate_margin(Tensor(x), params) > GATE_MARGIN:
            return x
    raise ConfigError(f"no gate-safe draw found for seed {seed}")


def _scconv_checks():
    def sru(seed):
        p = SruParams(4, gn_groups=2)
        x = Tensor(_filtered_image(seed, (2, 4, 3, 3), p), requires_grad=True)
        return (lambda: sru_forward(x, p)), [x, p.gamma, p.beta]

    def cru(seed):
        rng = np.random.default_rng(seed)
        p = CruParams(8, rng=np.random.default_rng(seed + 1))
        xw = _t(rng, 2, 8, 3, 3)
        probes = [xw, p.sq_up, p.sq_low, p.gwc, p.pwc_up, p.pwc_low]
        return (lambda: cru_forward(xw, p)), probes

    def both(seed):
        sru_p = SruParams(8, gn_groups=2)
        cru_p = CruParams(8, rng=np.random.default_rng(seed + 1))
        img = _filtered_image(seed, (2, 8, 2, 2), sru_p)
        patches = Tensor(
            np.ascontiguousarray(img.reshape(2, 8, 4).transpose(0, 2, 1)), requires_grad=True
        )
        probes = [patches, cru_p.gwc, cru_p.pwc_up]
        return (lambda: scconv_patches(patches, 2, 2, sru_p, cru_p)), probes

    return [("sru", sru), ("cru", cru), ("scconv", both)]


def _model_checks():
    def block(seed):
        cfg = ModelConfig(image_h=8, image_w=8, patch_size=4, hidden=8, heads=2,
                          kansformer_blocks=1, glae_blocks=0, use_scconv=False,
                          use_glae=False, num_classes=2)
        m = SCKansformerModel(cfg, rng=np.random.default_rng(seed + 1))
        b = m.blocks[0]
        z = Tensor(np.random.default_rng(seed).normal(size=(2, 5, 8)) * 0.5, requires_grad=True)
        probes = [z, b.msa.wq, b.msa.wo, b.ln1.gamma, b.ln2.beta,
                  b.ffn.layers[0].spline_coeffs, b.ffn.layers[-1].base_weight]
        return (lambda: kansformer_block_forward(z, b)), probes

    def full(seed):
        cfg = ModelConfig(image_h=8, image_w=8, patch_size=4, hidden=8, heads=2,
                          kansformer_blocks=1, glae_blocks=1, num_classes=3)
        labels = np.random.default_rng(seed + 3).integers(0, 3, size=2)
        for k in range(60):
            m = SCKansformerModel(cfg, rng=np.random.default_rng(seed + 1 + 1000 * k))
            m.head.data[...] = np.random.default_rng(seed + 2).normal(size=m.head.shape) * 0.3
            x = Tensor(np.random.default_rng(seed + 1000 * k).normal(size=(2, 3, 8, 8)),
                       requires_grad=True)
            with no_grad():
                img = s2i(patch_embed(x, m), cfg.grid_h, cfg.grid_w)
            if sru_gate_margin(img, m.sru) > GATE_MARGIN:
                break
        else:
            raise ConfigError(f"no gate-safe model draw for seed {seed}")
        probes = [x] + list(m.named_parameters().values())
        return (lambda: cross_entropy_with_logits(forward(x, m, train=False), labels)), probes

    return [("kansformer_block", block), ("full_model", full)]


MODULES = {
    "tensor": _tensor_checks,
    "kan": _kan_checks,
    "attention": _attention_checks,
    "glae": _glae_checks,
    "scconv": _scconv_checks,
    "model": _model_checks,
}


def run_gradcheck(
    scope: str = "all",
    seeds=(0, 1, 2),
    h: float = 1e-5,
    tol: float = 1e-4,
    limit: int = 6,
    inject_fault: bool = False,
    log=print,
):
    """Run the suites; returns (all_ok, [(check_name, worst_err), ...])."""
    if scope == "all":
        names = list(MODULES)
    elif scope in MODULES:
        names = [scope]
    else:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; pick all|{'|'.join(MODULES)}")
    results = []
    all_ok = True
    for module in names:
        for check_name, builder in MODULES[module]():
            worst = 0.0
            for seed in seeds:
                loss_fn, tensors = builder(seed)
                worst = max(worst, _worst_err(loss_fn, tensors, h, limit))
            if inject_fault and check_name == "conv2d":
                worst += 1.0  # fault fixture: force a visible failure
            ok = worst < tol
            all_ok = all_ok and ok
            label = f"{module}.{check_name}"
            log(f"{label:32s} worst rel err {worst:.3e}  {'ok' if ok else 'FAIL'}")
            results.append((label, worst))
    return all_ok, results
