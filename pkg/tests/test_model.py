"""Model assembly tests: config validation, patch extraction against a loop
oracle, residual identity degeneracies, parameter enumeration completeness,
state round trips, batch independence, and a sampled finite-difference check
of the full forward pass."""

import numpy as np
import pytest

from sckansformer.glae import s2i
from sckansformer.kan import KanStack
from sckansformer.model import (
    ModelConfig,
    SCKansformerModel,
    ablation_variant,
    forward,
    kansformer_block_forward,
    patch_embed,
)
from sckansformer.scconv import sru_gate_margin
from sckansformer.tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concatenate,
    cross_entropy_with_logits,
    matmul,
    no_grad,
    reshape,
)

from oracles import rel_err


def small_config(**overrides):
    base = dict(
        image_h=8,
        image_w=8,
        patch_size=4,
        hidden=8,
        heads=2,
        kansformer_blocks=1,
        glae_blocks=1,
        num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestModelConfig:
    def test_defaults_round_trip(self):
        cfg = ModelConfig()
        assert cfg.grid_h == 8 and cfg.grid_w == 8 and cfg.num_patches == 64
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_patch_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_h=30)
        with pytest.raises(ConfigError):
            ModelConfig(image_w=33)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden=64, heads=5)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(depth=3)

    def test_class_and_block_bounds(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_classes=1)
        with pytest.raises(ConfigError):
            ModelConfig(kansformer_blocks=0)
        with pytest.raises(ConfigError):
            ModelConfig(glae_blocks=-1)


class TestPatchEmbed:
    def test_matches_loop_extraction_with_identity_projection(self):
        # P*P*C == D so the projection can be the identity
        cfg = ModelConfig(
            image_h=4, image_w=6, channels=2, patch_size=2, hidden=8, heads=2,
            kansformer_blocks=1, glae_blocks=0, use_scconv=False, use_glae=False,
            num_classes=2,
        )
        m = SCKansformerModel(cfg, rng=np.random.default_rng(0))
        m.patch_proj.data[...] = np.eye(8)
        rng = np.random.default_rng(1)
        img = rng.normal(size=(2, 2, 4, 6))
        out = patch_embed(Tensor(img), m).data
        for b in range(2):
            n = 0
            for r in range(2):
                for c in range(3):
                    block = img[b, :, r * 2:(r + 1) * 2, c * 2:(c + 1) * 2]
                    assert np.array_equal(out[b, n], block.reshape(-1))
                    n += 1

    def test_rejects_wrong_geometry(self):
        m = SCKansformerModel(small_config(), rng=np.random.default_rng(0))
        with pytest.raises(ShapeError):
            patch_embed(Tensor(np.zeros((2, 3, 8, 12))), m)
        with pytest.raises(ShapeError):
            patch_embed(Tensor(np.zeros((3, 8, 8))), m)


class TestForwardBasics:
    def test_logit_shape_and_zero_head_init(self):
        for cfg, b in ((ModelConfig(), 2), (small_config(), 3)):
            m = SCKansformerModel(cfg, rng=np.random.default_rng(0))
            x = Tensor(np.random.default_rng(1).normal(size=(b, cfg.channels, cfg.image_h, cfg.image_w)))
            logits = forward(x, m, train=True)
            assert logits.shape == (b, cfg.num_classes)
            # zero head makes the very first loss exactly ln(K)
            assert np.all(logits.data == 0.0)
            loss = cross_entropy_with_logits(logits, np.zeros(b, dtype=np.int64))
            assert loss.data == pytest.approx(np.log(cfg.num_classes), abs=0, rel=1e-15)

    def test_eval_forward_is_deterministic_and_leaves_state_alone(self):
        cfg = small_config()
        m = SCKansformerModel(cfg, rng=np.random.default_rng(3))
        m.head.data[...] = np.random.default_rng(4).normal(size=m.head.shape)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 8, 8)))
        bn = m.glae[0][1].bn_expand
        before = bn.running_mean.copy()
        a = forward(x, m, train=False).data
        b = forward(x, m, train=False).data
        assert np.array_equal(a, b)
        assert np.array_equal(bn.running_mean, before)
        forward(x, m, train=True)
        assert not np.array_equal(bn.running_mean, before)

    def test_eval_rows_are_batch_independent(self):
        cfg = small_config()
        m = SCKansformerModel(cfg, rng=np.random.default_rng(6))
        m.head.data[...] = np.random.default_rng(7).normal(size=m.head.shape)
        x = np.random.default_rng(8).normal(size=(3, 3, 8, 8))
        full = forward(Tensor(x), m, train=False).data
        for i in range(3):
            one = forward(Tensor(x[i:i + 1]), m, train=False).data
            assert np.max(np.abs(full[i] - one[0])) < 1e-12


def zero_residual_branches(m: SCKansformerModel) -> None:
    for msa, lp in m.glae:
        msa.wo.data[...] = 0.0
        lp.squeeze_kernel.data[...] = 0.0
    for block in m.blocks:
        block.msa.wo.data[...] = 0.0
        if isinstance(block.ffn, KanStack):
            last = block.ffn.layers[-1]
            last.spline_coeffs.data[...] = 0.0
            last.base_weight.data[...] = 0.0
        else:
            block.ffn.w2.data[...] = 0.0


def reference_without_branches(x: Tensor, m: SCKansformerModel):
    """What forward() must equal once every residual branch emits zero."""
    cfg = m.cfg
    t = patch_embed(x, m)
    if m.sru is not None:
        from sckansformer.scconv import scconv_patches

        t = scconv_patches(t, cfg.grid_h, cfg.grid_w, m.sru, m.cru)
    b = x.shape[0]
    cls = broadcast_to(reshape(m.cls_token, (1, 1, cfg.hidden)), (b, 1, cfg.hidden))
    z = add(concatenate([cls, t], axis=1), m.pos_embed)
    z = m.final_norm(z)
    from sckansformer.tensor import split as tsplit

    cls_f, _ = tsplit(z, [1, cfg.num_patches], axis=1)
    return matmul(reshape(cls_f, (b, cfg.hidden)), m.head)


class TestIdentityDegeneracies:
    @pytest.mark.parametrize("use_kan", [True, False])
    def test_zeroed_branches_make_encoder_an_identity(self, use_kan):
        cfg = small_config(use_kan=use_kan)
        m = SCKansformerModel(cfg, rng=np.random.default_rng(9))
        m.head.data[...] = np.random.default_rng(10).normal(size=m.head.shape)
        zero_residual_branches(m)
        x = Tensor(np.random.default_rng(11).normal(size=(2, 3, 8, 8)))
        with no_grad():
            got = forward(x, m, train=True).data
            want = reference_without_branches(x, m).data
        assert np.array_equal(got, want)

    def test_single_block_identity_without_glae(self):
        cfg = small_config(glae_blocks=0, use_glae=False, use_scconv=False)
        m = SCKansformerModel(cfg, rng=np.random.default_rng(12))
        zero_residual_branches(m)
        z = Tensor(np.random.default_rng(13).normal(size=(2, 5, 8)))
        with no_grad():
            out = kansformer_block_forward(z, m.blocks[0])
        assert np.array_equal(out.data, z.data)


class TestParameterEnumeration:
    def _reachable_tensors(self, obj, seen=None):
        """Walk attributes/containers and collect every grad-tracked Tensor."""
        if seen is None:
            seen = {}
        if isinstance(obj, Tensor):
            if obj.requires_grad:
                seen[id(obj)] = obj
            return seen
        if isinstance(obj, (list, tuple)):
            for item in obj:
                self._reachable_tensors(item, seen)
            return seen
        if isinstance(obj, dict):
            for item in obj.values():
                self._reachable_tensors(item, seen)
            return seen
        if hasattr(obj, "__dict__"):
            for item in vars(obj).values():
                self._reachable_tensors(item, seen)
        return seen

    @pytest.mark.parametrize("kw", [{}, {"kan": False}, {"scconv": False, "glae": False}])
    def test_named_parameters_cover_all_reachable(self, kw):
        m = ablation_variant(small_config(), rng=np.random.default_rng(14), **kw)
        named = m.named_parameters()
        assert len(named) == len({id(t) for t in named.values()})
        reachable = self._reachable_tensors(m)
        assert {id(t) for t in named.values()} == set(reachable)

    def test_state_tensors_add_running_stats(self):
        m = SCKansformerModel(small_config(), rng=np.random.default_rng(15))
        state = m.state_tensors()
        named = m.named_parameters()
        extras = set(state) - set(named)
        assert extras == {
            "glae.0.lp.bn1.running_mean",
            "glae.0.lp.bn1.running_var",
            "glae.0.lp.bn2.running_mean",
            "glae.0.lp.bn2.running_var",
        }


class TestStateRoundTrip:
    def test_load_restores_forward_bitwise(self):
        cfg = small_config()
        m = SCKansformerModel(cfg, rng=np.random.default_rng(16))
        m.head.data[...] = np.random.default_rng(17).normal(size=m.head.shape)
        x = Tensor(np.random.default_rng(18).normal(size=(2, 3, 8, 8)))
        forward(x, m, train=True)  # move BN running stats off their init
        saved = {k: v.copy() for k, v in m.state_tensors().items()}
        want = forward(x, m, train=False).data.copy()
        rng = np.random.default_rng(19)
        for t in m.parameters():
            t.data += rng.normal(size=t.shape)
        assert not np.array_equal(forward(x, m, train=False).data, want)
        m.load_state(saved)
        assert np.array_equal(forward(x, m, train=False).data, want)

    def test_mismatched_names_and_shapes_rejected(self):
        m = SCKansformerModel(small_config(), rng=np.random.default_rng(20))
        state = {k: v.copy() for k, v in m.state_tensors().items()}
        short = dict(state)
        short.pop("head.w")
        with pytest.raises(ShapeError):
            m.load_state(short)
        extra = dict(state)
        extra["stray"] = np.zeros(3)
        with pytest.raises(ShapeError):
            m.load_state(extra)
        bad = dict(state)
        bad["head.w"] = np.zeros((2, 2))
        with pytest.raises(ShapeError):
            m.load_state(bad)


class TestAblationVariants:
    def test_toggles_change_parameter_inventory(self):
        cfg = small_config()
        rng = lambda: np.random.default_rng(21)
        full = set(SCKansformerModel(cfg, rng=rng()).named_parameters())
        no_sc = set(ablation_variant(cfg, rng=rng(), scconv=False).named_parameters())
        no_gl = set(ablation_variant(cfg, rng=rng(), glae=False).named_parameters())
        no_kan = set(ablation_variant(cfg, rng=rng(), kan=False).named_parameters())
        assert not any(n.startswith("scconv.") for n in no_sc)
        assert any(n.startswith("scconv.") for n in full)
        assert not any(n.startswith("glae.") for n in no_gl)
        assert not any(n.startswith("kan.") for n in no_kan)
        assert any(n.startswith("mlp.") for n in no_kan)

    def test_every_variant_runs_and_matches_shape(self):
        cfg = small_config()
        x = Tensor(np.random.default_rng(22).normal(size=(2, 3, 8, 8)))
        for kw in ({}, {"scconv": False}, {"glae": False}, {"kan": False},
                   {"scconv": False, "glae": False, "kan": False}):
            mv = ablation_variant(cfg, rng=np.random.default_rng(23), **kw)
            assert forward(x, mv, train=True).shape == (2, 3)


class TestFullModelGradcheck:
    # picked so the SRU gates sit well away from the 0.5 threshold, keeping
    # the finite-difference probes off the mask discontinuity
    SEED = 3

    def _build(self):
        cfg = small_config()
        m = SCKansformerModel(cfg, rng=np.random.default_rng(self.SEED))
        m.head.data[...] = np.random.default_rng(self.SEED + 100).normal(
            size=m.head.shape) * 0.3
        x = Tensor(np.random.default_rng(self.SEED + 200).normal(size=(2, 3, 8, 8)))
        labels = np.array([0, 2])
        return cfg, m, x, labels

    def test_chosen_seed_has_gate_margin(self):
        cfg, m, x, _ = self._build()
        with no_grad():
            img = s2i(patch_embed(x, m), cfg.grid_h, cfg.grid_w)
        assert sru_gate_margin(img, m.sru) > 1e-3

    def test_sampled_entries_match_finite_differences(self):
        cfg, m, x, labels = self._build()

        def loss_value():
            return float(cross_entropy_with_logits(forward(x, m, train=False), labels).data)

        loss = cross_entropy_with_logits(forward(x, m, train=False), labels)
        loss.backward()
        named = m.named_parameters()
        probed = [
            "patch_proj", "cls_token", "pos_embed", "head.w",
            "scconv.cru.gwc", "glae.0.msa.wq", "glae.0.lp.dw",
            "msa.0.wv", "kan.0.0.spline", "kan.0.1.base_w",
            "ln1.0.gamma", "final_norm.beta",
        ]
        h = 1e-5
        for name in probed:
            t = named[name]
            assert t.grad is not None, name
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            idxs = np.linspace(0, flat.size - 1, num=min(4, flat.size), dtype=int)
            for i in idxs:
                keep = flat[i]
                flat[i] = keep + h
                up = loss_value()
                flat[i] = keep - h
                down = loss_value()
                flat[i] = keep
                fd = (up - down) / (2 * h)
                assert rel_err(np.array(gflat[i]), np.array(fd)) < 1e-4, (name, i)
