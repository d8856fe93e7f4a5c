"""
Unit tests for the slot encoder and the holistic baseline
"""

import math

import numpy as np
import pytest

from slotpolicy import tensor as T
from slotpolicy.errors import ConfigError, ShapeError
from slotpolicy.gradcheck import grad_check
from slotpolicy.rng import Stream
from slotpolicy.savi import (HolisticEncoder, Savi, SaviConfig, SlotAttention, SlotSet, build_encoder,
                             recon_loss, slot_history, stack_composites)
from slotpolicy.tensor import Tensor


def _scalar_slot_attention(sa, feats, slots):
    """One slot-attention iteration with explicit loops over locations, slots and channels."""
    p = {name: t.data for name, t in sa.named_parameters().items()}

    def ln(vec, prefix):
        mu = sum(vec) / len(vec)
        var = sum((v - mu) ** 2 for v in vec) / len(vec)
        return [(v - mu) / math.sqrt(var + 1e-5) * g + b
                for v, g, b in zip(vec, p[prefix + ".gain"], p[prefix + ".bias"])]

    def lin(vec, w, b=None):
        out = [sum(vec[i] * w[i][j] for i in range(len(vec))) for j in range(len(w[0]))]
        return out if b is None else [o + c for o, c in zip(out, b)]

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    n_loc, k_slots, d = len(feats), len(slots), len(slots[0])
    inputs = [ln(list(f), "norm_inputs") for f in feats]
    keys = [lin(x, p["to_k.weight"]) for x in inputs]
    vals = [lin(x, p["to_v.weight"]) for x in inputs]
    queries = [lin(ln(list(s), "norm_slots"), p["to_q.weight"]) for s in slots]

    attn = []
    for n in range(n_loc):
        logits = [sum(keys[n][c] * queries[k][c] for c in range(d)) / math.sqrt(d) for k in range(k_slots)]
        top = max(logits)
        e = [math.exp(v - top) for v in logits]
        attn.append([v / sum(e) for v in e])

    new_slots = []
    for k in range(k_slots):
        w = [attn[n][k] + sa.eps for n in range(n_loc)]
        update = [sum(w[n] / sum(w) * vals[n][c] for n in range(n_loc)) for c in range(d)]
        gi = lin(update, p["gru.w_ih"], p["gru.b_ih"])
        gh = lin(list(slots[k]), p["gru.w_hh"], p["gru.b_hh"])
        h = []
        for c in range(d):
            r = sig(gi[c] + gh[c])
            z = sig(gi[d + c] + gh[d + c])
            cand = math.tanh(gi[2 * d + c] + r * gh[2 * d + c])
            h.append((1.0 - z) * cand + z * slots[k][c])
        hidden = [max(0.0, v) for v in lin(ln(h, "norm_mlp"), p["mlp.fc1.weight"], p["mlp.fc1.bias"])]
        new_slots.append([a + b for a, b in zip(h, lin(hidden, p["mlp.fc2.weight"], p["mlp.fc2.bias"]))])
    return np.array(new_slots), np.array(attn)


@pytest.fixture
def clip():
    return Stream(7).generator().uniform(size=(2, 3, 8, 8, 3))


@pytest.fixture
def model(tiny_encoder_config):
    return Savi(tiny_encoder_config, Stream(0))


class TestSaviConfig:
    def test_defaults_valid(self):
        assert SaviConfig().validate().feature_size == 16

    @pytest.mark.parametrize("changes,match", [
        ({"kind": "vae"}, "kind"),
        ({"slots": 0}, "slots"),
        ({"image_size": 62}, "stride"),
        ({"decoder_grid": 24}, "power of two"),
        ({"slot_dim": 30}, "predictor_heads"),
        ({"cnn_strides": (2, 2)}, "same length"),
    ])
    def test_rejects(self, changes, match):
        with pytest.raises(ConfigError, match=match):
            SaviConfig(**changes).validate()


class TestUnroll:
    def test_shapes(self, model, clip, stream):
        slots, decoded = model.savi_unroll(clip, stream)
        assert len(slots) == len(decoded) == 3
        assert slots[0].slots.shape == (2, 2, 8)
        assert decoded[0].rgb.shape == (2, 2, 8, 8, 3)
        assert decoded[0].masks.shape == (2, 2, 8, 8)
        assert stack_composites(decoded).shape == (2, 3, 8, 8, 3)

    def test_masks_sum_to_one(self, model, clip, stream):
        _, decoded = model.savi_unroll(clip, stream)
        for d in decoded:
            assert np.allclose(d.masks.data.sum(axis=1), 1.0, atol=1e-6)

    def test_single_clip_without_batch_axis(self, model, clip, stream):
        slots, decoded = model.savi_unroll(clip[0], stream, decode=False)
        assert decoded is None
        assert slots[-1].slots.shape == (1, 2, 8)

    def test_same_stream_same_slots(self, model, clip):
        a, _ = model.savi_unroll(clip, Stream(5), decode=False)
        b, _ = model.savi_unroll(clip, Stream(5), decode=False)
        c, _ = model.savi_unroll(clip, Stream(6), decode=False)
        assert np.array_equal(a[-1].slots.data, b[-1].slots.data)
        assert not np.array_equal(a[-1].slots.data, c[-1].slots.data)

    def test_bad_frame_shape(self, model):
        with pytest.raises(ShapeError, match="expected images"):
            model.savi_unroll(np.zeros((1, 2, 6, 6, 3)), Stream(0))

    def test_gradients_reach_every_parameter(self, model, clip, stream):
        _, decoded = model.savi_unroll(clip, stream)
        recon_loss(stack_composites(decoded), clip).backward()
        missing = [name for name, p in model.named_parameters().items() if p.grad is None]
        assert missing == []


class TestSlotAttention:
    def test_empty_slot_set(self, model, clip):
        feats = model.encode_frame(clip[:, 0])
        with pytest.raises(ShapeError, match="K = 0"):
            model.slot_attention(feats, Tensor(np.zeros((2, 0, 8))), 1)

    @pytest.mark.parametrize("seed", range(10))
    def test_permuting_slots_permutes_output(self, tiny_encoder_config, seed):
        model = Savi(tiny_encoder_config, Stream(seed))
        frames = Stream(seed).split("frames").generator().uniform(size=(2, 8, 8, 3))
        feats = model.encode_frame(frames)
        init = Stream(seed).split("init").generator().normal(size=(2, 2, 8))
        out, attn = model.slot_attention(feats, Tensor(init), 2)
        out_swapped, attn_swapped = model.slot_attention(feats, Tensor(init[:, ::-1].copy()), 2)
        assert np.max(np.abs(out.slots.data[:, ::-1] - out_swapped.slots.data)) < 1e-6
        assert np.max(np.abs(attn.data[..., ::-1] - attn_swapped.data)) < 1e-6
        assert np.allclose(attn.data.sum(axis=-1), 1.0)

    def test_single_slot_takes_mean_of_values(self):
        sa = SlotAttention(3, 4, 5, Stream(9))
        rng = np.random.default_rng(9)
        feats, init = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 1, 4))
        out, attn = sa(Tensor(feats), Tensor(init), 1)
        assert np.allclose(attn.data, 1.0)
        mean_v = sa.to_v(sa.norm_inputs(Tensor(feats))).data.mean(axis=1)
        h = sa.gru(Tensor(mean_v), Tensor(init[:, 0]))
        expected = h + sa.mlp(sa.norm_mlp(h))
        assert np.allclose(out.data[:, 0], expected.data, atol=1e-12)

    def test_two_by_two_grid_matches_scalar_arithmetic(self):
        sa = SlotAttention(3, 2, 3, Stream(5))
        sa.to_k.weight.data = np.array([[0.5, -0.2], [0.1, 0.4], [-0.3, 0.2]])
        sa.to_v.weight.data = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])
        sa.to_q.weight.data = np.array([[0.7, 0.1], [-0.4, 0.9]])
        feats = np.array([[0.2, -1.0, 0.5], [1.5, 0.3, -0.2], [-0.7, 0.8, 0.1], [0.0, 0.4, -1.2]])
        slots = np.array([[0.3, -0.6], [-1.1, 0.2]])
        out, attn = sa(Tensor(feats[None]), Tensor(slots[None]), 1)
        want_slots, want_attn = _scalar_slot_attention(sa, feats, slots)
        assert np.allclose(attn.data[0], want_attn, atol=1e-12)
        assert np.allclose(out.data[0], want_slots, atol=1e-12)

    def test_composite_invariant_to_slot_order(self, model):
        slots = Stream(4).generator().normal(size=(1, 2, 8))
        a = model.decode_slots(Tensor(slots))
        b = model.decode_slots(Tensor(slots[:, ::-1].copy()))
        assert np.allclose(a.composite.data, b.composite.data, atol=1e-10)


class TestHolistic:
    def test_single_token(self, tiny_encoder_config, clip, stream):
        config = SaviConfig(**{**tiny_encoder_config.__dict__, "kind": "holistic"})
        encoder = build_encoder(config, Stream(0))
        assert isinstance(encoder, HolisticEncoder)
        slots, decoded = encoder.savi_unroll(clip, stream)
        assert slots[0].K == 1
        assert np.allclose(decoded[0].masks.data, 1.0)

    def test_build_default_is_savi(self, tiny_encoder_config):
        assert isinstance(build_encoder(tiny_encoder_config, Stream(0)), Savi)


def test_recon_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        recon_loss(np.zeros((1, 2, 3)), np.zeros((1, 3, 2)))


def test_recon_loss_value():
    assert recon_loss(np.full((2, 2), 0.5), np.zeros((2, 2))).item() == pytest.approx(0.25)


def test_slot_history_is_detached(model, clip, stream):
    history = slot_history(model, clip, stream)
    assert history.shape == (2, 3, 2, 8)
    assert not history.requires_grad
    assert T.grad_enabled()


def test_decode_predicted_shape(model, stream):
    slots = SlotSet(Tensor(Stream(2).generator().normal(size=(1, 2, 8))))
    assert model.decode_predicted(slots).composite.shape == (1, 8, 8, 3)


@pytest.mark.parametrize("seed", range(20))
def test_grad_recon_loss_through_unroll(tiny_encoder_config, seed):
    model = Savi(tiny_encoder_config, Stream(seed))
    frames = Stream(seed).split("frames").generator().uniform(size=(1, 2, 8, 8, 3))
    init = Stream(seed).split("init")

    def loss(_):
        _, decoded = model.savi_unroll(frames, init)
        return recon_loss(stack_composites(decoded), frames)

    assert grad_check(loss, model.slot_mu) < 1e-3
