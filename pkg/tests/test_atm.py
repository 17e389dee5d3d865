import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import relative_grad_error
from sgdm.atm import ATM, AtmConfig, TrainConfig, epochs_to_array, semantic_loss, train_semantic
from sgdm.errors import InvalidInput
from sgdm.synth import make_synthetic_dataset

SMALL = AtmConfig(n_channels=4, n_samples=40, embed_dim=6, feature_dim=3, embed_kernel=5, embed_stride=5,
                  key_dim=4, hidden_dim=8, dropout=0.0)


def small_model(cfg=SMALL, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return ATM(cfg).to(dtype).eval()


def x_small(b=3, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(b, 4, 40)))


def test_embed_zero_input_gives_positions():
    m = small_model()
    h = m.embed_channels(torch.zeros(2, 4, 40, dtype=torch.float64))
    assert torch.equal(h, m.front.embed.pos.expand_as(h))


def test_embed_linear():
    m = small_model()
    x = x_small()
    pos = m.front.embed.pos.detach()
    assert torch.allclose(m.embed_channels(2 * x) - pos, 2 * (m.embed_channels(x) - pos), atol=1e-12)


def test_embed_matches_sliding_dot_product():
    m = small_model()
    x = x_small(b=1)[0]
    w = m.front.embed.conv.weight.detach()[:, 0, :]  # [d, k]
    h = m.embed_channels(x[None])[0].detach()
    pos = m.front.embed.pos.detach()
    for c in range(4):
        for t in range(SMALL.n_steps):
            seg = x[c, t * 5:t * 5 + 5]
            for j in range(3):
                want = float((w[j] * seg).sum()) + float(pos[t, j])
                assert abs(float(h[c, t, j]) - want) < 1e-6


def test_embed_rejects_short_input():
    m = small_model()
    with pytest.raises(InvalidInput):
        m.embed_channels(torch.zeros(1, 4, 3, dtype=torch.float64))


def test_attention_zero_value_is_identity():
    m = small_model()
    h = torch.randn(2, 4, SMALL.n_steps, 3, dtype=torch.float64)
    with torch.no_grad():
        m.front.attention.w_v.weight.zero_()
    assert torch.equal(m.channel_attention(h), h)


def test_attention_rows_sum_to_one():
    m = small_model()
    h = torch.randn(5, 4, SMALL.n_steps, 3, dtype=torch.float64)
    _, attn = m.front.attention(h, return_weights=True)
    assert attn.shape == (5, 4, 4)
    assert torch.allclose(attn.sum(-1), torch.ones(5, 4, dtype=torch.float64), atol=1e-6)


def test_attention_two_channel_oracle():
    cfg = AtmConfig(n_channels=2, n_samples=40, embed_dim=4, feature_dim=3, embed_kernel=5, embed_stride=5,
                    key_dim=4, hidden_dim=8, dropout=0.0)
    m = small_model(cfg)
    att = m.front.attention
    h = torch.randn(1, 2, cfg.n_steps, 3, dtype=torch.float64)
    tok = h.flatten(2)[0].numpy()
    wq, wk, wv = (p.weight.detach().numpy() for p in (att.w_q, att.w_k, att.w_v))
    q, k, v = tok @ wq.T, tok @ wk.T, tok @ wv.T
    out = np.zeros_like(tok)
    for i in range(2):
        s = np.array([q[i] @ k[j] for j in range(2)]) / math.sqrt(4)
        a = np.exp(s - s.max())
        a /= a.sum()
        out[i] = a[0] * v[0] + a[1] * v[1] + tok[i]
    got = att(h).flatten(2)[0].detach().numpy()
    assert np.allclose(got, out, atol=1e-6)


def test_conv_nonnegative_and_identity():
    m = small_model()
    h = torch.randn(2, 4, SMALL.n_steps, 3, dtype=torch.float64)
    assert (m.temporal_spatial_conv(h) >= 0).all()
    conv = m.conv
    with torch.no_grad():
        conv.w_s.zero_()
        conv.b.zero_()
        conv.w_t.weight.zero_()
        conv.w_t.weight[:, :, 1] = torch.eye(3)
    hp = h.abs()
    assert torch.allclose(m.temporal_spatial_conv(hp), hp, atol=1e-12)


def test_conv_matches_naive_loops():
    m = small_model()
    conv = m.conv
    h = torch.randn(1, 4, SMALL.n_steps, 3, dtype=torch.float64)
    got = m.temporal_spatial_conv(h)[0].detach().numpy()
    hn = h[0].numpy()
    wt = conv.w_t.weight.detach().numpy()  # [out, in, k]
    ws = conv.w_s.detach().numpy()
    b = conv.b.detach().numpy()
    c_n, t_n, d_n = hn.shape
    want = np.zeros_like(hn)
    for c in range(c_n):
        for t in range(t_n):
            for o in range(d_n):
                acc = b[o]
                for tap in range(3):
                    tt = t + tap - 1
                    if 0 <= tt < t_n:
                        acc += sum(wt[o, i, tap] * hn[c, tt, i] for i in range(d_n))
                acc += sum(ws[c, cc] * hn[cc, t, o] for cc in range(c_n))
                want[c, t, o] = max(acc, 0.0)
    assert np.allclose(got, want, atol=1e-6)


def test_projector_shapes_and_degenerate_weights():
    m = small_model()
    f = torch.rand(2, 4, SMALL.n_steps, 3, dtype=torch.float64)
    assert m.project_semantic(f).shape == (2, SMALL.embed_dim)
    p = m.projector
    with torch.no_grad():
        p.w1.weight.zero_()
        p.w1.bias.zero_()
        p.w2.weight.zero_()
    assert torch.allclose(m.project_semantic(f), p.w2.bias.expand(2, -1), atol=1e-12)
    with pytest.raises(InvalidInput):
        m.project_semantic(torch.rand(2, 5, dtype=torch.float64))


def test_forward_batch_vs_single():
    m = small_model()
    x = x_small(b=4)
    batch = m(x)
    single = torch.cat([m(x[i:i + 1]) for i in range(4)])
    assert torch.allclose(batch, single, atol=1e-6)


def test_channel_permutation_covariance():
    m = small_model()
    x = x_small(b=2)
    perm = torch.tensor([2, 0, 3, 1])
    moved = small_model()
    with torch.no_grad():
        moved.conv.w_s.copy_(m.conv.w_s[perm][:, perm])
        # flatten order is (channel, time, feature): permute channel blocks of the projector input
        width = SMALL.n_steps * SMALL.feature_dim
        cols = (perm[:, None] * width + torch.arange(width)[None]).reshape(-1)
        moved.projector.w1.weight.copy_(m.projector.w1.weight[:, cols])
        moved.projector.ln_in.weight.copy_(m.projector.ln_in.weight[cols])
        moved.projector.ln_in.bias.copy_(m.projector.ln_in.bias[cols])
    assert torch.allclose(m.encode(x), moved.encode(x[:, perm]), atol=1e-6)


def test_semantic_loss_cases():
    z = F.normalize(torch.randn(4, 6, dtype=torch.float64), dim=-1)
    assert semantic_loss(z, z, 0.0, 1.0, 0.07).item() == pytest.approx(0.0, abs=1e-12)
    e = torch.eye(2, dtype=torch.float64)
    assert semantic_loss(e, e, 2.0, 0.0, 1.0).item() == pytest.approx(2.0 * 0.31326168751822286, abs=1e-12)


def test_semantic_loss_gradient_all_groups():
    m = small_model()
    x = x_small(b=4, seed=1)
    y = F.normalize(torch.randn(4, SMALL.embed_dim, dtype=torch.float64), dim=-1)
    fn = lambda: semantic_loss(m(x), y, 1.0, 0.5, 0.5)
    assert relative_grad_error(fn, m.parameters()) < 1e-4


def test_train_errors():
    with pytest.raises(InvalidInput):
        train_semantic(np.zeros((0, 4, 40)), np.zeros((0, 6)), small_model())
    with pytest.raises(InvalidInput):
        ATM(AtmConfig(lambda1=0.0, lambda2=0.0))


def code_targets(stimuli, dim=16):
    proj = np.random.default_rng(99).normal(size=(49, dim))
    z = np.stack([s.cognitive_code.ravel() for s in stimuli]) @ proj
    z -= z.mean(0)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def noiseless():
    stimuli, epochs, _ = make_synthetic_dataset(160, 1, noise_sigma=0.0, seed=2)
    return epochs_to_array(epochs), code_targets(stimuli)


def test_training_reduces_loss(noiseless):
    x, y = noiseless
    torch.manual_seed(0)
    m = ATM(AtmConfig(embed_dim=16))
    train_semantic(x[:128], y[:128], m, TrainConfig(epochs=20))
    assert m.losses[20] < m.losses[0]


def test_noiseless_retrieval(noiseless):
    x, y = noiseless
    torch.manual_seed(0)
    m = ATM(AtmConfig(embed_dim=16, dropout=0.0))
    train_semantic(x[:120], y[:120], m, TrainConfig(epochs=40))
    z = m.embed(x[120:])
    yt = y[120:]
    rng = np.random.default_rng(0)
    hits = []
    for i in range(len(z)):
        others = rng.choice(np.delete(np.arange(len(z)), i), size=9, replace=False)
        cand = np.concatenate([[i], others])
        hits.append(cand[np.argmax(yt[cand] @ z[i])] == i)
    assert np.mean(hits) >= 0.8
