import math

import numpy as np
import pytest
from scipy.special import erf

from core.config import Config
from core.errors import ConfigError, GraphError, ShapeError
from ssf.adapters.ssf_ada import SsfConfig, attach
from ssf.model.config import ModelConfig, preset
from ssf.model.graph import SITE_KINDS, build_graph
from ssf.model.vit import (
    attention_block, build_model, count_backbone_params, forward, load_graph, parameter_shapes
)
from ssf.tensor import Tensor
from ssf.tensor.ops import patchify

from tests.helpers import random_images


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64))


class TestModelConfig:
    def test_presets_validate(self):
        for name in ("toy", "small", "vits16", "vitb16", "vitl16"):
            assert preset(name).d % preset(name).heads == 0

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=30, heads=4).validate()

    def test_rejects_indivisible_patches(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_side=18, patch_side=4).validate()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("resnet50")

    def test_vitb16_backbone_size(self):
        count = count_backbone_params(preset("vitb16", num_classes=100))
        assert count == 85_798_656
        assert abs(count - 85.8e6) < 0.3e6


class TestLayerGraph:
    def test_toy_graph_sites(self, toy_cfg):
        graph = build_graph(toy_cfg)
        assert len(graph) == 15
        assert [s.site_id for s in graph][:3] == ["embed", "blocks.0.ln1", "blocks.0.qkv"]
        assert graph.sites[-2].site_id == "final_ln" and graph.sites[-1].site_id == "head"
        assert {s.kind for s in graph} == set(SITE_KINDS)

    def test_site_widths(self, toy_cfg):
        graph = build_graph(toy_cfg)
        assert graph.site("blocks.1.qkv").out_dim == 3 * toy_cfg.d
        assert graph.site("blocks.1.fc1").out_dim == toy_cfg.mlp_hidden
        assert graph.site("head").out_dim == toy_cfg.num_classes

    def test_unknown_site(self, toy_cfg):
        with pytest.raises(GraphError):
            build_graph(toy_cfg).site("blocks.9.qkv")


class TestBuildModel:
    def test_deterministic_from_seed(self, toy_cfg):
        a, _ = build_model(toy_cfg)
        b, _ = build_model(toy_cfg)
        c, _ = build_model(preset("toy", seed=1))
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_shapes_follow_config(self, toy_model, toy_cfg):
        params, _ = toy_model
        for name, shape in parameter_shapes(toy_cfg).items():
            assert params[name].shape == shape
        assert params["blocks.0.ln1.weight"].data.tolist() == [1.0] * toy_cfg.d

    def test_load_graph_from_metadata(self, toy_model):
        params, graph = toy_model
        assert [s.site_id for s in load_graph(params)] == [s.site_id for s in graph]
        params.metadata.pop("model_config")
        with pytest.raises(ConfigError):
            load_graph(params)


class TestForward:
    def test_logit_shape_and_dtype(self, toy_model, toy_cfg):
        params, graph = toy_model
        logits = forward(params, graph, random_images(toy_cfg, 3))
        assert logits.shape == (3, toy_cfg.num_classes)
        assert logits.dtype == np.float32

    def test_bad_image_shape(self, toy_model):
        params, graph = toy_model
        with pytest.raises(ShapeError):
            forward(params, graph, np.zeros((2, 3, 8, 8)))

    def test_unknown_hook_site(self, toy_model, toy_cfg):
        params, graph = toy_model
        with pytest.raises(GraphError):
            forward(params, graph, random_images(toy_cfg, 1), hooks={"blocks.7.fc1": lambda x: x})

    def test_identity_ssf_hooks_are_exact(self, toy_model, toy_cfg):
        params, graph = toy_model
        images = random_images(toy_cfg, 20, seed=5)
        reference = forward(params, graph, images).data
        attachment = attach(graph, SsfConfig(init="constant"), params)
        hooked = forward(params, graph, images, attachment.hooks).data
        assert np.array_equal(reference, hooked)

    def test_hooks_see_every_site(self, toy_model, toy_cfg):
        params, graph = toy_model
        seen = []

        def spy(site_id):
            def hook(x):
                seen.append(site_id)
                return x
            return hook

        forward(params, graph, random_images(toy_cfg, 1), hooks={s.site_id: spy(s.site_id) for s in graph})
        assert seen == [s.site_id for s in graph]

    def test_full_width_scale_changes_attention(self):
        a, graph_a = build_model(preset("toy"))
        b, graph_b = build_model(preset("toy", full_width_scale=True))
        assert graph_b.config.attention_scale == pytest.approx(32 ** -0.5)
        images = random_images(graph_a.config, 2)
        assert not np.array_equal(forward(a, graph_a, images).data, forward(b, graph_b, images).data)


class TestAttention:
    def test_equal_keys_average_values(self):
        rng = np.random.default_rng(0)
        d = 4
        x = rng.standard_normal((1, 3, d))
        wqkv = np.concatenate([rng.standard_normal((d, d)), np.zeros((d, d)), np.eye(d)])
        bqkv = np.concatenate([np.zeros(d), np.full(d, 0.7), np.zeros(d)])
        out = attention_block(t64(x), t64(wqkv), t64(bqkv), t64(np.eye(d)), t64(np.zeros(d)), heads=1)
        expected = np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape)
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_single_token_passes_value_projection(self):
        rng = np.random.default_rng(1)
        d = 4
        x = rng.standard_normal((1, d))
        wqkv, bqkv = rng.standard_normal((3 * d, d)), rng.standard_normal(3 * d)
        wo, bo = rng.standard_normal((d, d)), rng.standard_normal(d)
        out = attention_block(t64(x), t64(wqkv), t64(bqkv), t64(wo), t64(bo), heads=2)
        v = x @ wqkv[2 * d:].T + bqkv[2 * d:]
        assert np.allclose(out.data, v @ wo.T + bo, atol=1e-12)

    def test_two_tokens_by_hand(self):
        x = t64([[1.0], [2.0]])
        out = attention_block(x, t64([[1.0], [1.0], [1.0]]), t64([0.0, 0.0, 0.0]), t64([[1.0]]), t64([0.0]), heads=1)
        e = math.e
        first = (1 * e + 2 * e ** 2) / (e + e ** 2)
        second = (1 * e ** 2 + 2 * e ** 4) / (e ** 2 + e ** 4)
        assert np.allclose(out.data[:, 0], [first, second], atol=1e-12)

    def test_indivisible_heads(self):
        with pytest.raises(ShapeError):
            attention_block(t64(np.zeros((1, 2, 6))), t64(np.zeros((18, 6))), t64(np.zeros(18)),
                            t64(np.zeros((6, 6))), t64(np.zeros(6)), heads=4)

    def test_permuting_patch_tokens_permutes_the_output(self):
        rng = np.random.default_rng(2)
        d, t = 8, 6
        x = rng.standard_normal((2, t, d))
        weights = [t64(rng.standard_normal(s)) for s in ((3 * d, d), (3 * d,), (d, d), (d,))]
        perm = np.concatenate([[0], 1 + rng.permutation(t - 1)])

        out = attention_block(t64(x), *weights, heads=2).data
        permuted = attention_block(t64(x[:, perm]), *weights, heads=2).data
        assert np.allclose(permuted, out[:, perm], atol=1e-12)


# =============================================================================
# Straight-line reference
# =============================================================================

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + Config.LN_EPS) * g + b


def reference_logits(params, cfg, images):
    """One-block ViT written directly in numpy"""
    p = {n: params[n].data for n in params.names()}
    batch, dh = images.shape[0], cfg.d // cfg.heads

    x = patchify(images, cfg.patch_side) @ p["patch_embed.weight"].T + p["patch_embed.bias"]
    cls = np.broadcast_to(p["cls_token"], (batch, 1, cfg.d))
    x = np.concatenate([cls, x], axis=1) + p["pos_embed"]
    tokens = x.shape[1]

    h = _layernorm(x, p["blocks.0.ln1.weight"], p["blocks.0.ln1.bias"])
    qkv = h @ p["blocks.0.attn.qkv.weight"].T + p["blocks.0.attn.qkv.bias"]
    q, k, v = qkv.reshape(batch, tokens, 3, cfg.heads, dh).transpose(2, 0, 3, 1, 4)
    scores = q @ k.transpose(0, 1, 3, 2) * cfg.attention_scale
    attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn /= attn.sum(axis=-1, keepdims=True)
    h = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, cfg.d)
    x = x + h @ p["blocks.0.attn.proj.weight"].T + p["blocks.0.attn.proj.bias"]

    h = _layernorm(x, p["blocks.0.ln2.weight"], p["blocks.0.ln2.bias"])
    h = h @ p["blocks.0.mlp.fc1.weight"].T + p["blocks.0.mlp.fc1.bias"]
    h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
    x = x + h @ p["blocks.0.mlp.fc2.weight"].T + p["blocks.0.mlp.fc2.bias"]

    x = _layernorm(x, p["norm.weight"], p["norm.bias"])
    return x[:, 0] @ p["head.weight"].T + p["head.bias"]


class TestReference:
    @pytest.fixture
    def one_block(self):
        params, graph = build_model(preset("toy", depth=1), "f64")
        rng = np.random.default_rng(9)
        for name in params.names():
            params[name].data += 0.1 * rng.standard_normal(params[name].shape)
        return params, graph

    def test_single_block_matches_numpy(self, one_block):
        params, graph = one_block
        images = random_images(graph.config, 3, seed=4)
        logits = forward(params, graph, images).data
        assert np.allclose(logits, reference_logits(params, graph.config, images), atol=1e-6)

    def test_empty_hooks_are_bit_stable(self, one_block):
        params, graph = one_block
        images = random_images(graph.config, 3, seed=4)
        first = forward(params, graph, images, hooks={}).data
        assert np.array_equal(first, forward(params, graph, images, hooks={}).data)
        assert np.array_equal(first, forward(params, graph, images).data)
