import numpy as np
import pytest

from kmaxseg import tensor as T
from kmaxseg.decoder import KMaxDecoderBlock, decoder_forward, stack_forward
from kmaxseg.errors import ConfigError
from kmaxseg.kernels import PixelFeatures
from kmaxseg.tensor import Tensor


def _pixels(rng, h, w, d):
    return PixelFeatures(Tensor(rng.normal(size=(h * w, d))), h, w)


def _numpy_softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def test_zero_block_passes_centers_through():
    rng = np.random.default_rng(0)
    block = KMaxDecoderBlock.zeros(4, num_classes=3)
    c = Tensor(rng.normal(size=(2, 4)))
    p = _pixels(rng, 2, 3, 4)
    out, aux = decoder_forward(block, c, p)
    assert np.array_equal(out.data, c.data)
    assert np.array_equal(aux.mask_logits.data, np.zeros((6, 2)))
    # zero mask logits give uniform per-pixel mask softmax
    z = _numpy_softmax(aux.mask_logits.data, axis=1)
    assert np.allclose(z, 0.5)


def test_softmax_block_matches_reimplementation():
    rng = np.random.default_rng(1)
    block = KMaxDecoderBlock(np.random.default_rng(2), 4, num_classes=3,
                             kernel="softmax", ffn_hidden=8)
    c = rng.normal(size=(2, 4))
    p = _pixels(rng, 2, 3, 4)
    out, aux = decoder_forward(block, Tensor(c), p)

    def ln(x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * gain.data + bias.data

    def proj(x, w, b):
        return x @ w.data + b.data

    scale = 4 ** -0.5  # standard transformer logit scaling at d=4
    # self-attention, output-normalized residual
    x = ln(c, block.sa_ln.gain, block.sa_ln.bias)
    q = proj(x, block.sa_proj.wq, block.sa_proj.bq)
    k = proj(x, block.sa_proj.wk, block.sa_proj.bk)
    v = proj(x, block.sa_proj.wv, block.sa_proj.bv)
    upd = _numpy_softmax(scale * (q @ k.T), axis=1) @ v
    c1 = c + ln(upd, block.sa_ln_out.gain, block.sa_ln_out.bias)
    # cross-attention
    q2 = proj(ln(c1, block.ker_ln_c.gain, block.ker_ln_c.bias), block.ker_proj.wq, block.ker_proj.bq)
    pin = ln(p.values.data, block.ker_ln_p.gain, block.ker_ln_p.bias)
    k2 = proj(pin, block.ker_proj.wk, block.ker_proj.bk)
    v2 = proj(pin, block.ker_proj.wv, block.ker_proj.bv)
    upd2 = _numpy_softmax(scale * (q2 @ k2.T), axis=1) @ v2
    c2 = c1 + ln(upd2, block.ker_ln_out.gain, block.ker_ln_out.bias)
    # ffn
    def gelu_np(x):
        from scipy.special import erf
        return 0.5 * x * (1 + erf(x / np.sqrt(2)))
    h = gelu_np(proj(ln(c2, block.ffn_ln.gain, block.ffn_ln.bias), block.ffn_w1, block.ffn_b1))
    c3 = c2 + ln(proj(h, block.ffn_w2, block.ffn_b2),
                 block.ffn_ln_out.gain, block.ffn_ln_out.bias)

    assert np.allclose(out.data, c3, atol=1e-12)
    mask_ref = scale * ((q2 @ block.mask_w.data + block.mask_b.data) @ k2.T)
    assert np.allclose(aux.mask_logits.data, mask_ref.T, atol=1e-12)
    cls_ref = ln(c3, block.head_ln.gain, block.head_ln.bias) @ block.class_w.data + block.class_b.data
    assert np.allclose(aux.class_logits.data, cls_ref, atol=1e-12)


def test_stacked_blocks_change_centers():
    rng = np.random.default_rng(3)
    blocks = [KMaxDecoderBlock(np.random.default_rng(10 + i), 4, 3) for i in range(2)]
    c = Tensor(rng.normal(size=(3, 4)))
    p = _pixels(rng, 2, 2, 4)
    out, aux = stack_forward(blocks, c, [p, p], (1, 1))
    assert np.max(np.abs(out.data - c.data)) > 0
    assert len(aux) == 2


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    block = KMaxDecoderBlock(np.random.default_rng(5), 4, 3)
    c = Tensor(rng.normal(size=(3, 4)))
    p = _pixels(rng, 2, 2, 4)
    a1, aux1 = decoder_forward(block, c, p)
    a2, aux2 = decoder_forward(block, c, p)
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(aux1.class_logits.data, aux2.class_logits.data)


def test_schedule_shapes_and_errors():
    rng = np.random.default_rng(6)
    d = 4
    mk = lambda n: [KMaxDecoderBlock(np.random.default_rng(20 + i), d, 3) for i in range(n)]
    pyramid = [_pixels(rng, 1, 2, d), _pixels(rng, 2, 2, d), _pixels(rng, 2, 4, d)]
    c = Tensor(rng.normal(size=(3, d)))
    # (1,1,1) consumes the pyramid coarse-to-fine, one aux per block
    _, aux = stack_forward(mk(3), c, pyramid, (1, 1, 1))
    assert [a.height * a.width for a in aux] == [2, 4, 8]
    assert [a.source for a in aux] == [0, 1, 2]
    # (2,2,2) -> six auxiliary predictions
    _, aux6 = stack_forward(mk(6), c, pyramid, (2, 2, 2))
    assert len(aux6) == 6
    with pytest.raises(ConfigError):
        stack_forward(mk(3), c, pyramid, ())
    with pytest.raises(ConfigError):
        stack_forward(mk(3), c, pyramid, (1, 1))
    with pytest.raises(ConfigError):
        stack_forward(mk(4), c, pyramid, (1, 1, 1))


def test_aux_count_equals_schedule_sum():
    rng = np.random.default_rng(7)
    d = 4
    pyramid = [_pixels(rng, 2, 2, d)] * 3
    blocks = [KMaxDecoderBlock(np.random.default_rng(30 + i), d, 3) for i in range(9)]
    _, aux = stack_forward(blocks, Tensor(rng.normal(size=(2, d))), pyramid, (3, 3, 3))
    assert len(aux) == 9


def test_kmeans_block_grad_reaches_wq_only_via_aux_logits():
    rng = np.random.default_rng(8)
    block = KMaxDecoderBlock(np.random.default_rng(9), 6, 3, kernel="kmeans")
    c = Tensor(rng.normal(size=(4, 6)))
    p = _pixels(rng, 3, 3, 6)

    out, aux = decoder_forward(block, c, p)
    T.reduce_sum(T.mul(out, out)).backward()
    assert block.ker_proj.wq.grad is None
    assert block.ker_proj.wk.grad is None

    out2, aux2 = decoder_forward(block, c, p)
    loss = T.add(T.reduce_sum(T.mul(out2, out2)),
                 T.reduce_sum(T.mul(aux2.mask_logits, aux2.mask_logits)))
    loss.backward()
    assert np.linalg.norm(block.ker_proj.wq.grad) > 0
    assert np.linalg.norm(block.ker_proj.wk.grad) > 0
