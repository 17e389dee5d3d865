import numpy as np
import pytest
import torch

from sgdm.errors import InvalidInput, InvalidState
from sgdm.generator import (GenConfig, GenTrainConfig, Generator, denoise_step, generate, generate_latents,
                            train_generator)
from sgdm.structure import RefVAE, VaeConfig

SMALL = dict(latent_size=8, channels=(8, 16), embed_dim=8, n_tokens=2, attn_dim=8, train_steps=20)


def small_gen(seed=0, **kw):
    torch.manual_seed(seed)
    return Generator(GenConfig(**{**SMALL, **kw})).eval()


def randomize_branch_outputs(gen):
    """Give the zero-initialized projections non-zero weights, as after training."""
    with torch.no_grad():
        for conv in list(gen.unet.branch.zero) + [gen.unet.branch.zero_mid]:
            conv.weight.normal_(0, 0.1)
            conv.bias.normal_(0, 0.1)


def inputs(b=2, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(b, 4, 8, 8)).astype(np.float32), rng.normal(size=(b, 8)).astype(np.float32),
            rng.normal(size=(b, 4, 8, 8)).astype(np.float32))


def test_fresh_init_ignores_structure():
    gen = small_gen()
    x, z, s = inputs()
    other = np.random.default_rng(9).normal(size=s.shape).astype(np.float32)
    assert np.array_equal(denoise_step(x, 10, z, s, 1.0, gen), denoise_step(x, 10, z, other, 1.0, gen))


def test_zero_rate_equals_zero_structure():
    gen = small_gen()
    randomize_branch_outputs(gen)
    x, z, s = inputs()
    a = denoise_step(x, 10, z, s, 0.0, gen)
    assert np.array_equal(a, denoise_step(x, 10, z, np.zeros_like(s), 0.0, gen))
    assert not np.array_equal(denoise_step(x, 10, z, s, 1.0, gen), a)


def test_residuals_independent_of_rate_and_continuous():
    gen = small_gen()
    randomize_branch_outputs(gen)
    x, z, s = (torch.as_tensor(a) for a in inputs())
    t = torch.tensor([5, 5])
    with torch.no_grad():
        _, r0 = gen.unet(x, t, z, s, 0.2, return_residuals=True)
        _, r1 = gen.unet(x, t, z, s, 0.9, return_residuals=True)
        assert all(torch.equal(a, b) for a, b in zip(r0, r1))
        outs = [gen.unet(x, t, z, s, r) for r in (0.5, 0.5 + 1e-3, 0.5 + 1e-5)]
    assert (outs[2] - outs[0]).abs().max() < (outs[1] - outs[0]).abs().max() + 1e-7
    assert (outs[2] - outs[0]).abs().max() < 1e-3


def test_denoise_deterministic_and_validated():
    gen = small_gen()
    x, z, s = inputs()
    assert np.array_equal(denoise_step(x, 10, z, s, 0.5, gen), denoise_step(x, 10, z, s, 0.5, gen))
    with pytest.raises(InvalidInput):
        denoise_step(x, 10, z, s[:, :, :4], 0.5, gen)
    with pytest.raises(InvalidInput):
        denoise_step(x, 10, z, s, 1.5, gen)
    with pytest.raises(InvalidInput):
        GenConfig(control_rate=-0.1)


def trained_flag_vae(seed=0):
    torch.manual_seed(seed)
    vae = RefVAE(VaeConfig(image_size=64, downsample=2, hidden=8)).freeze()
    vae.trained = True
    return vae


def test_generate_shapes_and_determinism():
    gen = small_gen(latent_size=16)
    vae = trained_flag_vae()
    rng = np.random.default_rng(0)
    z, s = rng.normal(size=(3, 8)), rng.normal(size=(3, 4, 16, 16))
    for n in (2, 3, 4):
        img = generate(z, s, n, 0.5, gen, vae, seed=1)
        assert img.shape == (3, 3, 64, 64) and img.min() >= 0 and img.max() <= 1
    assert np.array_equal(generate(z, s, 4, 0.5, gen, vae, seed=1), generate(z, s, 4, 0.5, gen, vae, seed=1))
    with pytest.raises(InvalidState):
        generate(z, s, 2, 0.5, gen, None)
    with pytest.raises(InvalidState):
        generate(z, s, 2, 0.5, gen, RefVAE(VaeConfig(downsample=2)))
    with pytest.raises(InvalidInput):
        generate_latents(z, s, 0, 0.5, gen)


def toy_data(n=48, seed=0):
    """Latents whose structure is a blurred copy and whose embedding is a fixed projection."""
    rng = np.random.default_rng(seed)
    lat = rng.normal(size=(n, 4, 8, 8)).astype(np.float32)
    lat[:, :, 2:6, 2:6] += 2.0 * rng.random((n, 1, 1, 1)).astype(np.float32)
    z = lat.reshape(n, -1) @ rng.normal(size=(256, 8)).astype(np.float32) / 16
    return lat, z, lat.copy()


def test_training_reduces_loss_and_keeps_vae():
    lat, z, s = toy_data()
    vae = trained_flag_vae()
    before = {k: v.clone() for k, v in vae.state_dict().items()}
    gen = small_gen()
    train_generator(lat, z, s, gen, vae, None, GenTrainConfig(epochs=20, batch_size=8, lr=2e-3))
    assert np.mean(gen.losses[-3:]) < gen.losses[0]
    assert all(torch.equal(before[k], v) for k, v in vae.state_dict().items())
    assert not any(p.requires_grad for p in gen.parameters())


def test_training_requires_frozen_upstream():
    lat, z, s = toy_data(8)
    vae = trained_flag_vae()
    for p in vae.parameters():
        p.requires_grad_(True)
    with pytest.raises(InvalidState):
        train_generator(lat, z, s, small_gen(), vae, None, GenTrainConfig(epochs=1))
    untrained = RefVAE(VaeConfig(downsample=2)).freeze()
    with pytest.raises(InvalidState):
        train_generator(lat, z, s, small_gen(), untrained, None, GenTrainConfig(epochs=1))


@pytest.mark.parametrize("global_semantic", [False, True])
def test_full_semantic_dropout_gives_unconditional_model(global_semantic):
    lat, z, s = toy_data(32)
    gen = small_gen(semantic_dropout=1.0, global_semantic=global_semantic)
    train_generator(lat, z, s, gen, trained_flag_vae(), None, GenTrainConfig(epochs=3, batch_size=8))
    x, _, s2 = inputs()
    z_a, z_b = np.random.default_rng(1).normal(size=(2, 2, 8)).astype(np.float32)
    assert np.array_equal(denoise_step(x, 10, z_a, s2, 0.7, gen), denoise_step(x, 10, z_b, s2, 0.7, gen))


def test_generate_rejects_wrong_structure_shape():
    gen = small_gen()
    with pytest.raises(InvalidInput):
        generate_latents(np.zeros((2, 8)), np.zeros((2, 4, 4, 4)), 2, 0.5, gen)


def randomize_semantic_outputs(gen):
    with torch.no_grad():
        for m in gen.unet.modules():
            if hasattr(m, "out_ip"):
                m.out_ip.weight.normal_(0, 0.1)


def test_guidance_limits():
    gen = small_gen()
    randomize_semantic_outputs(gen)
    randomize_branch_outputs(gen)
    x, z, s = inputs()
    other = np.random.default_rng(5).normal(size=z.shape).astype(np.float32)
    plain = denoise_step(x, 10, z, s, 0.5, gen)
    assert np.array_equal(denoise_step(x, 10, z, s, 0.5, gen, guidance=1.0), plain)
    assert np.allclose(denoise_step(x, 10, z, s, 0.5, gen, guidance=0.0),
                       denoise_step(x, 10, other, s, 0.5, gen, guidance=0.0), atol=1e-6)
    assert not np.allclose(denoise_step(x, 10, z, s, 0.5, gen, guidance=3.0), plain, atol=1e-6)
    assert np.array_equal(denoise_step(x, 10, z, s, 0.0, gen, guidance=3.0),
                          denoise_step(x, 10, z, np.zeros_like(s), 0.0, gen, guidance=3.0))
    with pytest.raises(InvalidInput):
        generate_latents(z, None, 2, 0.5, gen, guidance=-1.0)
