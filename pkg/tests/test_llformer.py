import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from lldif.llformer import (
    DGNet,
    DMNet,
    FusionHead,
    LLFormer,
    MHCAEncoder,
    ce_loss,
    cross_window_attention,
    epd_modulate,
    window_partition,
    window_reverse,
)
from tests.conftest import tiny_config


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis, keepdims=True))
    return e / e.sum(axis, keepdims=True)


def linear(i, o, w=None, b=None):
    lin = nn.Linear(i, o).double()
    with torch.no_grad():
        if w is not None:
            lin.weight.copy_(torch.as_tensor(w))
        if b is not None:
            lin.bias.copy_(torch.as_tensor(b))
    return lin


# ---- modulation ----------------------------------------------------------

def test_modulate_zero_prior_gives_zero():
    f = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    w1, w2 = linear(5, 3, b=np.zeros(3)), linear(5, 3, b=np.zeros(3))
    assert torch.equal(epd_modulate(f, torch.zeros(2, 5, dtype=torch.float64), w1, w2), torch.zeros_like(f))


def test_modulate_identity_scale_gives_layer_norm():
    f = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    w1 = linear(2, 3, np.zeros((3, 2)), np.ones(3))
    w2 = linear(2, 3, np.zeros((3, 2)), np.zeros(3))
    out = epd_modulate(f, torch.randn(1, 2, dtype=torch.float64), w1, w2)
    x = f.numpy()
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-12)


def test_modulate_hand_oracle():
    f = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [2.0, 0.0]]])  # C''=2, 2x2
    z = np.array([0.3, -0.7])
    W1, b1 = np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0.1, 0.2])
    W2, b2 = np.array([[0.0, 1.0], [1.0, 1.0]]), np.array([-0.3, 0.4])
    scale, shift = W1 @ z + b1, W2 @ z + b2
    ref = np.zeros_like(f)
    for i in range(2):
        for j in range(2):
            v = f[:, i, j]
            mu, var = v.mean(), ((v - v.mean()) ** 2).mean()
            ref[:, i, j] = scale * (v - mu) / math.sqrt(var + 1e-5) + shift
    out = epd_modulate(torch.tensor(f)[None], torch.tensor(z)[None], linear(2, 2, W1, b1), linear(2, 2, W2, b2))
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-6)


def test_modulate_dim_error():
    with pytest.raises(ValueError):
        epd_modulate(torch.randn(1, 3, 2, 2), torch.randn(1, 4), nn.Linear(5, 3), nn.Linear(5, 3))


# ---- DMNet ---------------------------------------------------------------

def test_dmnet_zero_value_is_residual():
    net = DMNet(4, 2.0).double()
    with torch.no_grad():
        net.qkv.weight[8:] = 0
    f = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    assert torch.equal(net(torch.randn_like(f), f), f)


def test_dmnet_rows_normalised():
    net = DMNet(6, 3.0)
    f = torch.randn(2, 6, 3, 3)
    net(torch.randn_like(f), f)
    assert net.last_attn.shape == (2, 6, 6)
    torch.testing.assert_close(net.last_attn.sum(-1), torch.ones(2, 6), atol=1e-6, rtol=0)


def test_dmnet_hand_oracle():
    net = DMNet(2, 1.5).double()
    Wq, Wk, Wv = np.array([[1.0, 0.5], [0.0, 2.0]]), np.array([[0.3, 0.0], [1.0, 1.0]]), np.array([[1.0, -1], [2, 0.5]])
    Wp = np.array([[0.7, 0.1], [-0.2, 1.0]])
    with torch.no_grad():
        net.qkv.weight.copy_(torch.tensor(np.concatenate([Wq, Wk, Wv]))[:, :, None, None])
        net.proj.weight.copy_(torch.tensor(Wp)[:, :, None, None])
    fm, f = np.array([0.4, -1.2]), np.array([2.0, 3.0])
    q, k, v = Wq @ fm, Wk @ fm, Wv @ fm
    A = softmax(np.outer(q, k) / 1.5, axis=1)
    ref = Wp @ (A @ v) + f
    out = net(torch.tensor(fm).view(1, 2, 1, 1), torch.tensor(f).view(1, 2, 1, 1))
    np.testing.assert_allclose(out.view(2).detach().numpy(), ref, atol=1e-6)


def test_dmnet_shape_mismatch():
    with pytest.raises(ValueError):
        DMNet(2, 1.0)(torch.randn(1, 2, 2, 2), torch.randn(1, 2, 3, 3))


# ---- DGNet ---------------------------------------------------------------

@pytest.mark.parametrize("branch", ["c1", "c2"])
def test_dgnet_zero_branch_is_residual(branch):
    net = DGNet(3).double()
    nn.init.zeros_(getattr(net, branch).weight)
    f = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert torch.equal(net(torch.randn_like(f), f), f)


def conv_dense(x, w, groups=1):
    """Direct zero-padded 'same' convolution, loop form."""
    c_out, c_in_g, kh, kw = w.shape
    c, h, wd = x.shape
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, h, wd))
    per = c_out // groups
    for o in range(c_out):
        g = o // per
        for ci in range(c_in_g):
            src = g * c_in_g + ci
            for i in range(h):
                for j in range(wd):
                    out[o, i, j] += (xp[src, i:i + kh, j:j + kw] * w[o, ci]).sum()
    return out


def test_dgnet_dense_conv_oracle():
    torch.manual_seed(5)
    net = DGNet(2).double()
    fm = np.random.default_rng(0).normal(size=(2, 3, 3))
    f = np.random.default_rng(1).normal(size=(2, 3, 3))
    W = {k: v.detach().numpy() for k, v in net.state_dict().items()}
    a = conv_dense(conv_dense(fm, W["c1.weight"]), W["d1.weight"], groups=2)
    b = conv_dense(conv_dense(fm, W["c2.weight"]), W["d2.weight"], groups=2)
    gelu = 0.5 * a * (1 + np.vectorize(math.erf)(a / math.sqrt(2)))
    ref = gelu * b + f
    out = net(torch.tensor(fm)[None], torch.tensor(f)[None])[0].detach().numpy()
    np.testing.assert_allclose(out, ref, atol=1e-6)


# ---- windows and cross-window attention ----------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_window_partition_roundtrip(h, w, win):
    x = torch.randn(2, 3, h, w)
    ws = window_partition(x, win)
    gh, gw = ws.grid
    wh, ww = ws.window
    assert gh * wh == h + ws.pad[0] and gw * ww == w + ws.pad[1]
    assert ws.windows.shape == (2, gh * gw, ws.m, 3)
    assert int(ws.valid.sum()) == h * w
    assert torch.equal(window_reverse(ws), x)


def test_cross_window_hand_oracle():
    xfl = np.array([[1.0, 0.0], [0.5, -1.0]])
    xll = np.array([[0.2, 0.4], [-0.3, 1.0]])
    wq, wk = np.array([[1.0, 0.2], [0.0, 1.0]]), np.array([[0.5, 0.0], [0.3, 1.0]])
    wv, wo = np.array([[1.0, 1.0], [0.0, 2.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])
    Q, K, V = xfl @ wq, xll @ wk, xll @ wv
    ref = softmax(Q @ K.T / math.sqrt(2)) @ V @ wo
    t = lambda a: torch.tensor(a)
    out, attn = cross_window_attention(t(xfl)[None, None], t(xll)[None, None], t(wq), t(wk), t(wv), t(wo))
    np.testing.assert_allclose(out[0, 0].numpy(), ref, atol=1e-6)
    torch.testing.assert_close(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6, rtol=0)


def test_cross_window_zero_value_gives_zero():
    x = torch.randn(1, 4, 4, 6)
    w = torch.randn(6, 6)
    out, _ = cross_window_attention(x, torch.randn(1, 4, 4, 6), w, w, torch.zeros(6, 6), w, torch.zeros(6), heads=2)
    assert torch.equal(out, torch.zeros_like(out))


def test_cross_window_shape_errors():
    w = torch.randn(4, 4)
    with pytest.raises(ValueError):
        cross_window_attention(torch.randn(1, 1, 4, 3), torch.randn(1, 1, 4, 4), w, w, w, w)
    with pytest.raises(ValueError):
        cross_window_attention(torch.randn(1, 1, 3, 4), torch.randn(1, 1, 4, 4), w, w, w, w)


def _zero_encoder(enc):
    with torch.no_grad():
        for p in (enc.w_v, enc.b_o, enc.mlp[2].weight, enc.mlp[2].bias):
            p.zero_()


def test_mhca_encoder_identity_and_shape():
    enc = MHCAEncoder(4, 2, 2).double()
    x, lm = torch.randn(2, 4, 5, 3, dtype=torch.float64), torch.randn(2, 4, 5, 3, dtype=torch.float64)
    assert enc(x, lm).shape == x.shape
    _zero_encoder(enc)
    assert torch.equal(enc(x, lm), x)


def test_mhca_encoder_composition_oracle():
    torch.manual_seed(2)
    enc = MHCAEncoder(2, 1, 2).double()
    with torch.no_grad():
        enc.pos_bias.normal_()
    x, lm = torch.randn(1, 2, 4, 4, dtype=torch.float64), torch.randn(1, 2, 4, 4, dtype=torch.float64)
    ll, fl = window_partition(x, 2), window_partition(lm, 2)
    o, _ = cross_window_attention(fl.windows, ll.windows, enc.w_q, enc.w_k, enc.w_v, enc.w_o, enc.b_o,
                                  enc.pos_bias, 1)
    x1 = window_reverse(ll, o) + x
    t = x1.permute(0, 2, 3, 1)
    x2 = (enc.mlp(enc.norm(t)) + t).permute(0, 3, 1, 2)
    torch.testing.assert_close(enc(x, lm), x2, atol=1e-12, rtol=0)


def test_mhca_padded_windows_mask_keys():
    enc = MHCAEncoder(4, 2, 4)
    x = torch.randn(1, 4, 5, 5)
    enc(x, torch.randn_like(x))
    attn = enc.last_attn  # (1, nW, heads, M, M)
    ws = window_partition(x, 4)
    masked = ~ws.valid  # (nW, M)
    assert masked.any()
    for wi in range(masked.shape[0]):
        assert torch.all(attn[0, wi][..., masked[wi]] == 0)


# ---- fusion, U-Net and end-to-end ----------------------------------------

def test_unet_symmetry_and_logit_dim(tiny_batch):
    cfg = tiny_config(n_classes=7, channels=(4, 8, 16))
    model = LLFormer(cfg)
    images, lm, _ = tiny_batch(cfg, 2)
    logits = model(images, lm, torch.randn(2, cfg.epd_dim))
    assert logits.shape == (2, 7) and torch.isfinite(logits).all()
    shapes = model.dtnet.last_shapes
    assert shapes["enc"] == shapes["dec"] == [(8, 8), (4, 4), (2, 2)]
    torch.testing.assert_close(logits.softmax(-1).sum(-1), torch.ones(2), atol=1e-6, rtol=0)


def test_batch_permutation_equivariance(tiny_cfg, tiny_batch):
    model = LLFormer(tiny_cfg).double().eval()
    images, lm, _ = tiny_batch(tiny_cfg, 4)
    images, lm = images.double(), lm.double()
    z = torch.randn(4, tiny_cfg.epd_dim, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(model(images, lm, z)[perm], model(images[perm], lm[perm], z[perm]), atol=1e-12, rtol=0)


def test_fusion_step_by_step_oracle(tiny_cfg):
    torch.manual_seed(3)
    head = FusionHead(tiny_cfg).double()
    fs = [torch.randn(1, c, s, s, dtype=torch.float64) for c, s in zip(tiny_cfg.channels, tiny_cfg.scale_sizes())]
    os_ = [torch.randn_like(f) for f in fs]
    P = {k: v.detach().numpy() for k, v in head.state_dict().items()}
    toks = []
    for s, (f, o) in enumerate(zip(fs, os_)):
        x = np.concatenate([f[0].numpy(), o[0].numpy()])
        g = head.grids[s]
        k = x.shape[-1] // g
        pooled = x.reshape(x.shape[0], g, k, g, k).mean((2, 4)).reshape(x.shape[0], -1).T
        toks.append(pooled @ P[f"proj.{s}.weight"].T + P[f"proj.{s}.bias"])
    X = np.concatenate(toks) + P["pos"]
    qkv = X @ P["w_qkv.weight"].T
    d = X.shape[1]
    heads, dh = head.heads, d // head.heads
    out = np.zeros_like(X)
    for hh in range(heads):
        sl = slice(hh * dh, (hh + 1) * dh)
        q, k, v = qkv[:, sl], qkv[:, d:][:, sl], qkv[:, 2 * d:][:, sl]
        out[:, sl] = softmax(q @ k.T / math.sqrt(dh)) @ v
    X1 = out @ P["w_o.weight"].T + P["w_o.bias"] + X
    mu, var = X1.mean(1, keepdims=True), X1.var(1, keepdims=True)
    ln = (X1 - mu) / np.sqrt(var + 1e-5) * P["norm.weight"] + P["norm.bias"]
    h = ln @ P["mlp.0.weight"].T + P["mlp.0.bias"]
    h = 0.5 * h * (1 + np.vectorize(math.erf)(h / math.sqrt(2)))
    Y = h @ P["mlp.2.weight"].T + P["mlp.2.bias"] + X1
    ref = Y.mean(0) @ P["head.weight"].T + P["head.bias"]
    np.testing.assert_allclose(head(fs, os_)[0].detach().numpy(), ref, atol=1e-6)


def test_fusion_missing_scale(tiny_cfg):
    head = FusionHead(tiny_cfg)
    with pytest.raises(ValueError):
        head([torch.randn(1, 4, 8, 8)], [torch.randn(1, 4, 8, 8)])


def test_all_attention_maps_normalised(tiny_cfg, tiny_batch):
    model = LLFormer(tiny_cfg)
    images, lm, _ = tiny_batch(tiny_cfg, 2)
    model(images, lm, torch.randn(2, tiny_cfg.epd_dim))
    maps = [m.last_attn for m in model.modules() if getattr(m, "last_attn", None) is not None]
    assert len(maps) == 3 + 2 + 1  # DMNet x3 (enc, bottleneck, dec), MHCA x2, MSA
    for a in maps:
        torch.testing.assert_close(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-6, rtol=0)


# ---- CE loss -------------------------------------------------------------

def test_ce_examples():
    assert ce_loss(torch.zeros(1, 7), torch.tensor([0])).item() == pytest.approx(math.log(7), abs=1e-6)
    big = torch.tensor([[1e4, 0.0, 0.0]])
    assert ce_loss(big, torch.tensor([0])).item() == 0.0


def test_ce_sum_oracle():
    rng = np.random.default_rng(6)
    logits, labels = rng.normal(size=(3, 4)), np.array([0, 3, 1])
    p = softmax(logits)
    ref = -sum(np.log(p[i, labels[i]]) for i in range(3))
    got = ce_loss(torch.tensor(logits), torch.tensor(labels), "sum").item()
    assert got == pytest.approx(ref, abs=1e-7)
    assert ce_loss(torch.tensor(logits), torch.tensor(labels), "mean").item() == pytest.approx(ref / 3, abs=1e-7)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(2, 3), torch.tensor([0, 3]))
