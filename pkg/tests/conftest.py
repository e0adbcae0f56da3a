import numpy as np
import pytest

from texsplat.denoiser import TrainConfig, save_weights, train_denoiser
from texsplat.latent import encode_latent
from texsplat.textures import token_vocabulary, training_corpus


@pytest.fixture(scope="session")
def tiny_weights_path(tmp_path_factory):
    """A briefly trained denoiser shared by pipeline-level tests."""
    vocab = token_vocabulary()
    corpus = [(encode_latent(img), np.atleast_2d(vocab[name]), name)
              for img, name in training_corpus(99, size=32, variants=1)]
    model, _ = train_denoiser(corpus, TrainConfig(steps=60, batch_size=2),
                              seed=99)
    path = tmp_path_factory.mktemp("weights") / "tiny.bin"
    save_weights(path, model)
    return str(path)
