import pytest

from sgdm.pipeline import RunConfig

TINY = {
    "synth": {"n_stimuli": 30, "n_subjects": 2, "corpus_size": 60},
    "classifier": {"epochs": 1},
    "vae": {"model": {"downsample": 2, "hidden": 8}, "train": {"epochs": 1}, "corpus_images": 10},
    "clip": {"model": {"max_len": 16, "text_layers": 1, "text_width": 16, "text_heads": 2, "image_layers": 1,
                       "image_width": 16, "image_heads": 2, "embed_dim": 16},
             "pretrain_steps": 3, "finetune_steps": 3, "k_trainable": 1, "batch_size": 16},
    "eeg": {"model": {"embed_dim": 16, "hidden_dim": 16}, "train": {"epochs": 1}},
    "prior": {"model": {"embed_dim": 16, "hidden_dim": 16, "steps": 10}, "train": {"epochs": 1}},
    "struct": {"model": {"n_doublings": 4}, "train": {"epochs": 1}},
    "gen": {"model": {"latent_size": 16, "channels": [8, 16], "attn_dim": 8, "train_steps": 20},
            "train": {"epochs": 1}, "corpus_images": 0},
}


def tiny_config(out_dir, **kw) -> RunConfig:
    d = dict(TINY, out_dir=str(out_dir), **kw)
    return RunConfig.from_dict(d)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path / "run")
