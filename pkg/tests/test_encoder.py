import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xreid import tensor as T
from xreid.encoder import ConfigError, Encoder, EncoderConfig, patchify, tap
from xreid.gradcheck import grad_check
from xreid.nn import Linear
from xreid.synthdata import IR, VIS
from xreid.tensor import Tensor


def test_patchify_shapes_and_order():
    frame = np.arange(32 * 16, dtype=float).reshape(32, 16)
    p = patchify(frame, 8)
    assert p.shape == (8, 64)
    # patch 1 is the top-right 8x8 block, flattened row-major
    np.testing.assert_array_equal(p[1], frame[0:8, 8:16].ravel())
    np.testing.assert_array_equal(p[2], frame[8:16, 0:8].ravel())


def test_patchify_constant_and_impulse():
    assert (patchify(np.full((32, 16), 0.3), 8) == 0.3).all()
    f = np.zeros((32, 16))
    f[0, 0] = 1.0
    p = patchify(f, 8)
    assert p[0].sum() == 1.0 and p[1:].sum() == 0.0


def test_patchify_bad_dims():
    with pytest.raises(ConfigError):
        patchify(np.zeros((30, 16)), 8)
    with pytest.raises(ConfigError):
        EncoderConfig(H=30)
    with pytest.raises(ConfigError):
        EncoderConfig(D=30, heads=4)


def test_encode_frame_shapes_and_determinism():
    enc = Encoder(EncoderConfig())
    frame = np.random.default_rng(0).uniform(size=(32, 16))
    cls, patches = enc.encode_frame(frame)
    assert cls.shape == (64,) and patches.shape == (8, 64)
    cls2, patches2 = Encoder(EncoderConfig()).encode_frame(frame.copy())
    np.testing.assert_array_equal(cls.data, cls2.data)
    np.testing.assert_array_equal(patches.data, patches2.data)
    tokens = enc.encode(np.stack([frame, frame]), [VIS, VIS]).data
    np.testing.assert_array_equal(tokens[0], tokens[1])


def test_modality_embedding_changes_only_the_input_cls():
    enc = Encoder(EncoderConfig())
    frame = np.random.default_rng(1).uniform(size=(32, 16))
    vis = enc.encode(frame[None], [VIS]).data
    ir = enc.encode(frame[None], [IR]).data
    assert not np.array_equal(vis, ir)
    enc.modality_embed.data[IR] = enc.modality_embed.data[VIS]
    np.testing.assert_array_equal(enc.encode(frame[None], [IR]).data, vis)


def test_encode_rejects_wrong_frame_shape():
    with pytest.raises(ConfigError):
        Encoder(EncoderConfig()).encode(np.zeros((2, 16, 16)), 0)


def test_encoder_gradient_wrt_pixels():
    enc = Encoder(EncoderConfig())
    rng = np.random.default_rng(2)
    frame = Tensor(rng.uniform(size=(32, 16)))
    # the final layer norm makes a plain sum of cls constant; weight it instead
    w = rng.normal(size=64)
    rep = grad_check(lambda f: T.tsum(enc.encode_frame(f)[0] * w), frame)
    assert rep.max_rel_err < 1e-5


def test_end_to_end_pixels_to_projection():
    enc = Encoder(EncoderConfig(L=1))
    frames = Tensor(np.random.default_rng(3).uniform(size=(2, 32, 16)))
    rep = grad_check(lambda f: T.tsum(tap(enc.project(T.slice_axis(enc.encode(f, [VIS, VIS]), 1, 0, 1)))), frames)
    assert rep.max_rel_err < 1e-5


def test_projection_examples():
    rng = np.random.default_rng(4)
    proj = Linear(64, 32, rng)
    proj.b.data[...] = 0.0
    np.testing.assert_array_equal(proj(Tensor(np.zeros(64))).data, np.zeros(32))
    ident = Linear(8, 8, rng)
    ident.w.data[...] = np.eye(8)
    ident.b.data[...] = 0.0
    x = rng.normal(size=8)
    np.testing.assert_array_equal(ident(Tensor(x)).data, x)
    enc = Encoder(EncoderConfig())
    rep = grad_check(lambda c, w: T.tsum(T.tanh(T.matmul(c, w))), [Tensor(rng.normal(size=(3, 64))), enc.proj.w])
    assert rep.max_rel_err < 1e-6


def test_tap_examples():
    np.testing.assert_array_equal(tap(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))).data, [2.0, 3.0])
    x = np.array([[0.5, -1.0, 2.0]])
    np.testing.assert_array_equal(tap(Tensor(x)).data, x[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_tap_permutation_invariant(Tn, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(Tn, 5))
    p = rng.permutation(Tn)
    np.testing.assert_allclose(tap(Tensor(x[p])).data, tap(Tensor(x)).data, atol=1e-15)


def test_parameter_names():
    names = Encoder(EncoderConfig()).named_parameters()
    for key in ("patch_embed.w", "cls_token", "pos_embed", "modality_embed", "layers.1.attn.q.w", "proj.w"):
        assert key in names
    assert names["pos_embed"].shape == (9, 64)
