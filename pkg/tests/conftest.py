import pytest

import os

import torch

import hita
import hita.data
import hita.tokenizer


@pytest.fixture()
def root_dir():
    return os.path.join(os.path.dirname(__file__), os.path.pardir)


@pytest.fixture()
def configs_dir(root_dir):
    return os.path.join(root_dir, 'configs')


@pytest.fixture()
def desk_config():
    return hita.PROFILES['desk']


@pytest.fixture()
def tiny_config():
    return hita.build_config(dict(
        embed_dim='32', base_channels='16', semantic_dim='16', samples_per_class='8',
        ar_width='32', ar_heads='2', ar_layers='1'))


@pytest.fixture()
def synthetic_corpus(tiny_config):
    return hita.data.synthetic_corpus(tiny_config)


@pytest.fixture()
def synthetic_batch(synthetic_corpus):
    return synthetic_corpus.head(8)


@pytest.fixture()
def tokenizer(tiny_config):
    torch.manual_seed(0)
    return hita.tokenizer.HitaTokenizer(tiny_config).eval()
