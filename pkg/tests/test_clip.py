import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import relative_grad_error
from sgdm.clip import (END, PAD, DualEncoder, DualEncoderConfig, DualTrainConfig, Vocabulary, finetune_dual,
                       info_nce_loss, tokenize)
from sgdm.errors import InvalidInput
from sgdm.synth import make_corpus

TINY = DualEncoderConfig(embed_dim=16, max_len=16, text_layers=2, text_width=32, text_heads=4,
                         image_layers=2, image_width=32, image_heads=4, image_size=32, patch_size=8)
VOCAB = Vocabulary.from_corpus(["a dog with a tail", "a house with a roof", "person leg arm head"])


def model(seed=0, cfg=TINY):
    torch.manual_seed(seed)
    return DualEncoder(cfg, VOCAB).eval()


def test_tokenize_rules():
    with pytest.raises(InvalidInput):
        tokenize("", VOCAB)
    with pytest.raises(InvalidInput):
        tokenize("   ", VOCAB)
    assert tokenize("a dog", VOCAB) == tokenize("a dog", VOCAB)
    long = tokenize("dog " * 125, VOCAB, max_len=77)  # 500 bytes
    assert len(long) == 77 and long.token_ids[76] == END and long.end_index == 76
    short = tokenize("a dog", VOCAB, max_len=77)
    assert short.end_index == 3 and short.token_ids.count(END) == 1


def test_text_embedding_norm_and_pad_mask():
    m = model()
    with torch.no_grad():
        z = m.encode_text(["a dog with a tail"])
        assert torch.linalg.norm(z, dim=-1).item() == pytest.approx(1.0, abs=1e-6)
        ids, end = m.tokenize(["a dog"])
        other = ids.clone()
        other[0, end[0] + 1:] = 7  # garbage after the end sentinel
        assert torch.allclose(m.text(ids, end), m.text(other, end), atol=1e-6)


def test_text_batch_vs_single():
    m = model()
    texts = ["a dog", "a house with a roof", "person", "leg arm head tail"]
    with torch.no_grad():
        batch = m.encode_text(texts)
        single = torch.cat([m.encode_text([t]) for t in texts])
    assert torch.allclose(batch, single, atol=1e-6)


def test_image_embedding():
    m = model()
    imgs = np.random.default_rng(0).random((5, 3, 32, 32)).astype(np.float32)
    batch = m.embed_images(imgs)
    single = np.concatenate([m.embed_images(im) for im in imgs])
    assert np.allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-6)
    assert np.allclose(batch, single, atol=1e-6)
    with pytest.raises(InvalidInput):
        m.encode_image(np.zeros((3, 30, 30)))


def test_batch_permutation_equivariant():
    m = model()
    imgs = np.random.default_rng(1).random((6, 3, 32, 32)).astype(np.float32)
    perm = np.random.default_rng(2).permutation(6)
    assert np.allclose(m.embed_images(imgs)[perm], m.embed_images(imgs[perm]), atol=1e-6)


def test_paper_patch_grid():
    cfg = DualEncoderConfig(embed_dim=8, image_layers=1, image_width=16, image_heads=2, image_size=224,
                            patch_size=14, text_layers=1, text_width=16, text_heads=2)
    m = model(cfg=cfg)
    with torch.no_grad():
        tok = m.image.tokens(torch.zeros(1, 3, 224, 224))
    assert tok.shape[1] == 256 + 1


def test_info_nce_identical_rows():
    z = F.normalize(torch.randn(1, 8, dtype=torch.float64), dim=-1).repeat(5, 1)
    assert info_nce_loss(z, z, 0.3).item() == pytest.approx(math.log(5), abs=1e-12)


def test_info_nce_two_orthogonal():
    z = torch.eye(2, dtype=torch.float64)
    want = -math.log(math.e / (math.e + 1))
    assert info_nce_loss(z, z, 1.0).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.3133, abs=1e-4)


def test_info_nce_monotone_in_off_diagonal():
    def loss(s):
        # image 0 keeps similarity 0.8 with text 0; only its similarity with text 1 moves
        zi = torch.eye(3, 4, dtype=torch.float64)
        zi[0] = torch.tensor([0.8, s, 0.0, math.sqrt(1 - 0.64 - s * s)], dtype=torch.float64)
        return info_nce_loss(torch.eye(3, 4, dtype=torch.float64), zi, 1.0).item()

    assert loss(0.1) < loss(0.3) < loss(0.5)


def test_info_nce_errors():
    z = torch.eye(2)
    with pytest.raises(InvalidInput):
        info_nce_loss(z, z, 0.0)
    with pytest.raises(InvalidInput):
        info_nce_loss(z[:1], z[:1], 1.0)


def test_info_nce_gradient():
    torch.manual_seed(0)
    a = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    tau = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    fn = lambda: info_nce_loss(F.normalize(a, dim=-1), F.normalize(b, dim=-1), tau)
    assert relative_grad_error(fn, [a, b, tau]) < 1e-4


@pytest.fixture(scope="module")
def pairs():
    corpus = make_corpus(64, seed=5, size=32)
    return [(r.image, ", ".join(r.annotations)) for r in corpus]


def corpus_vocab(pairs):
    return Vocabulary.from_corpus([t for _, t in pairs])


def test_finetune_freezes_prefix(pairs):
    torch.manual_seed(0)
    m = DualEncoder(TINY, corpus_vocab(pairs))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    cfg = DualTrainConfig(steps=50, batch_size=64, lr=1e-3, k_trainable=1, fixed_batch=True)
    finetune_dual(pairs, m, cfg)
    after = m.state_dict()
    for k in before:
        frozen = ".blocks.0." in k or k.startswith(("text.token", "text.pos", "image.patch", "image.cls", "image.pos"))
        if frozen:
            assert torch.equal(before[k], after[k]), k
    assert not torch.equal(before["text.blocks.1.attn.qkv.weight"], after["text.blocks.1.attn.qkv.weight"])
    assert cfg.losses[-1] < cfg.losses[0]


def test_finetune_k0_moves_only_heads(pairs):
    torch.manual_seed(0)
    m = DualEncoder(TINY, corpus_vocab(pairs))
    before = {k: v.clone() for k, v in m.state_dict().items()}
    finetune_dual(pairs, m, DualTrainConfig(steps=5, k_trainable=0))
    after = m.state_dict()
    for k in before:
        if ".blocks." in k:
            assert torch.equal(before[k], after[k]), k
    assert not torch.equal(before["text.proj.weight"], after["text.proj.weight"])


def test_finetune_errors(pairs):
    m = DualEncoder(TINY, corpus_vocab(pairs))
    with pytest.raises(InvalidInput):
        finetune_dual(pairs, m, DualTrainConfig(steps=1, k_trainable=3))
    with pytest.raises(InvalidInput):
        finetune_dual([], m, DualTrainConfig(steps=1))
