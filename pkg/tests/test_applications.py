import pytest

import dataclasses
import os

import numpy as np
import torch

import hita.applications as apps
import hita.data
import hita.train
from hita.checkpoint import parameter_checksum
from hita.data import ImageBatch
from hita.errors import ConfigError, ShapeError, ValidationError
from hita.gpt import ARModel, generate
from hita.providers import get_provider

RUN_SLOW = os.environ.get('HITA_RUN_SLOW') == '1'


@pytest.fixture()
def model(tiny_config):
    torch.manual_seed(1)
    model = ARModel(tiny_config).eval()
    with torch.no_grad():
        model.head.weight.normal_(std=0.5)
    return model


@pytest.fixture()
def mixed_batch(synthetic_corpus):
    index = [0, 8, 16, 24, 1, 9, 17, 25]
    return ImageBatch(torch.from_numpy(synthetic_corpus.images[index]),
                      torch.from_numpy(synthetic_corpus.labels[index]))


def test_applications_style_transfer_self(tokenizer, synthetic_batch):
    transferred = apps.style_transfer(tokenizer, synthetic_batch, synthetic_batch)
    assert torch.equal(transferred.pixels, tokenizer.reconstruct(synthetic_batch).pixels)


def test_applications_transfer_tokens(tokenizer, synthetic_corpus):
    content = synthetic_corpus.head(4)
    reference = ImageBatch(torch.from_numpy(synthetic_corpus.images[-4:].copy()))
    holistic, patch = apps.transfer_tokens(tokenizer, content, reference)
    assert torch.equal(holistic, tokenizer.encode(reference)[0])
    assert torch.equal(patch, tokenizer.encode(content)[1])
    assert apps.style_transfer(tokenizer, content, reference).pixels.shape == content.pixels.shape


def test_applications_transfer_tokens_shape(tokenizer, synthetic_corpus):
    with pytest.raises(ValidationError):
        apps.transfer_tokens(tokenizer, synthetic_corpus.head(2), synthetic_corpus.head(3))


def test_applications_visible_rows(tiny_config):
    assert apps.visible_rows(0.5, tiny_config) == (2, 16)
    assert apps.visible_rows(1.0, tiny_config) == (4, 32)
    for fraction in (0.1, 0.0, 1.5):
        with pytest.raises(ValidationError):
            apps.visible_rows(fraction, tiny_config)


def test_applications_mask_lower(synthetic_batch):
    masked = apps.mask_lower(synthetic_batch, 16)
    assert torch.equal(masked.pixels[:, :16], synthetic_batch.pixels[:, :16])
    assert (masked.pixels[:, 16:] == 0).all()
    assert torch.equal(masked.labels, synthetic_batch.labels)


def test_applications_inpaint_full_visibility(tokenizer, synthetic_batch):
    completed = apps.inpaint(tokenizer, None, synthetic_batch, 1.0, synthetic_batch.labels)
    assert torch.equal(completed.pixels, tokenizer.reconstruct(synthetic_batch).pixels)


def test_applications_inpaint_needs_model(tokenizer, synthetic_batch):
    with pytest.raises(ConfigError):
        apps.inpaint(tokenizer, None, synthetic_batch, 0.5, synthetic_batch.labels)


def test_applications_inpaint_prefix(tokenizer, model, synthetic_batch):
    generator = torch.Generator().manual_seed(0)
    ids, fixed_mask = apps.inpaint_tokens(tokenizer, model, synthetic_batch, 0.5,
                                          synthetic_batch.labels, generator=generator)
    holistic, patch = tokenizer.encode(apps.mask_lower(synthetic_batch, 16))

    assert tuple(ids.shape) == (8, 20)
    assert fixed_mask[:, :12].all() and not fixed_mask[:, 12:].any()
    assert torch.equal(ids[:, :4], holistic)
    assert torch.equal(ids[:, 4:12], patch[:, :8])
    assert int(ids.min()) >= 0 and int(ids.max()) < 64


def test_applications_inpaint_generate_holistic(tokenizer, model, synthetic_batch):
    _, fixed_mask = apps.inpaint_tokens(tokenizer, model, synthetic_batch, 0.5,
                                        synthetic_batch.labels, generate_holistic=True,
                                        generator=torch.Generator().manual_seed(0))
    assert not fixed_mask[:, :4].any()
    assert fixed_mask[:, 4:12].all()


def test_applications_consistency_score(synthetic_batch):
    provider = get_provider('frozen-random-conv', out_dim=16)
    same = apps.consistency_score(synthetic_batch, synthetic_batch, provider)
    assert same == pytest.approx(1.0, abs=1e-5)

    linear = get_provider('frozen-linear', out_dim=8)
    flipped = ImageBatch(-synthetic_batch.pixels)
    assert apps.consistency_score(synthetic_batch, flipped, linear) == pytest.approx(-1.0, abs=1e-5)

    other = ImageBatch(synthetic_batch.pixels.flip(0))
    forward = apps.consistency_score(synthetic_batch, other, provider)
    backward = apps.consistency_score(other, synthetic_batch, provider)
    assert forward == pytest.approx(backward, abs=1e-6)
    assert abs(forward) <= 1 + 1e-6


def test_applications_consistency_score_needs_provider(synthetic_batch):
    with pytest.raises(ConfigError):
        apps.consistency_score(synthetic_batch, synthetic_batch, None)
    with pytest.raises(ConfigError):
        apps.consistency_score(synthetic_batch, synthetic_batch, get_provider('off'))


def test_applications_linear_probe_chance():
    rng = np.random.RandomState(0)
    labels = np.repeat(np.arange(4), 500)
    features = rng.randn(len(labels), 8)
    assert abs(apps.linear_probe(features, labels) - 0.25) <= 0.10


def test_applications_linear_probe_oracle():
    rng = np.random.RandomState(1)
    labels = np.repeat(np.arange(4), 50)
    features = np.eye(4)[labels] + 0.01 * rng.randn(len(labels), 4)
    classifier, accuracy = apps.fit_linear_probe(features, labels)
    assert accuracy == 1.0
    assert classifier.predict(np.eye(4)).tolist() == [0, 1, 2, 3]


def test_applications_linear_probe_single_class():
    with pytest.raises(ValidationError):
        apps.linear_probe(np.random.randn(20, 4), np.zeros(20, dtype=int))


def test_applications_probe_tokenizer(tokenizer, synthetic_corpus):
    features, labels = apps.corpus_features(tokenizer, synthetic_corpus)
    assert features.shape == (32, 32)
    assert labels.tolist() == synthetic_corpus.labels.tolist()
    assert 0 <= apps.probe_tokenizer(tokenizer, synthetic_corpus) <= 1


def test_applications_inpainting_sweep(tokenizer, model, mixed_batch):
    provider = get_provider('frozen-random-conv', out_dim=16)
    with torch.no_grad():
        pooled = provider.pooled(mixed_batch.pixels).numpy()
    classifier, _ = apps.fit_linear_probe(np.concatenate([pooled, pooled]),
                                          np.concatenate([mixed_batch.labels.numpy()] * 2),
                                          held_out=0.5)

    points = apps.inpainting_sweep(tokenizer, model, mixed_batch, [0.5, 1.0], provider,
                                   classifier=classifier)
    assert [p['visible_rows'] for p in points] == [2, 4]
    assert all(abs(p['consistency']) <= 1 + 1e-6 for p in points)
    assert all(0 <= p['accuracy'] <= 1 for p in points)

    reconstructed = tokenizer.reconstruct(mixed_batch)
    expected = apps.consistency_score(mixed_batch, reconstructed, provider)
    assert points[1]['consistency'] == pytest.approx(expected, abs=1e-6)
    assert points[1]['frechet'] == pytest.approx(
        apps.feature_distance(mixed_batch, reconstructed, provider), abs=1e-6)


def test_applications_leave_parameters_untouched(tokenizer, model, synthetic_corpus):
    before = parameter_checksum(tokenizer), parameter_checksum(model)
    batch = synthetic_corpus.head(4)

    apps.style_transfer(tokenizer, batch, ImageBatch(batch.pixels.flip(0)))
    apps.inpaint(tokenizer, model, batch, 0.5, batch.labels,
                 generator=torch.Generator().manual_seed(0))
    apps.probe_tokenizer(tokenizer, synthetic_corpus)

    assert (parameter_checksum(tokenizer), parameter_checksum(model)) == before


def test_applications_inpaint_prefix_never_overwritten(tokenizer, model, mixed_batch):
    batch = mixed_batch.select(slice(0, 4))
    prefix = None
    for seed in range(100):
        ids, fixed_mask = apps.inpaint_tokens(tokenizer, model, batch, 0.5, batch.labels,
                                              temperature=2.0,
                                              generator=torch.Generator().manual_seed(seed))
        if prefix is None:
            prefix = ids[fixed_mask]
        assert torch.equal(ids[fixed_mask], prefix)


def test_applications_frechet_distance_identical():
    features = np.random.RandomState(2).randn(200, 4)
    assert apps.frechet_distance(features, features) == pytest.approx(0.0, abs=1e-6)


def test_applications_frechet_distance_shift():
    rng = np.random.RandomState(3)
    a = rng.randn(500, 3)
    b = a + 2.0
    # same covariance: only the mean term is left
    assert apps.frechet_distance(a, b) == pytest.approx(12.0, rel=1e-6)
    assert apps.frechet_distance(b, a) == pytest.approx(apps.frechet_distance(a, b))

    wider = a * 3.0
    assert apps.frechet_distance(a, wider) > apps.frechet_distance(a, a * 1.5) > 0


def test_applications_frechet_distance_invalid():
    with pytest.raises(ShapeError):
        apps.frechet_distance(np.zeros((4, 3)), np.zeros((4, 2)))
    with pytest.raises(ValidationError):
        apps.frechet_distance(np.zeros((1, 3)), np.zeros((4, 3)))


def test_applications_feature_distance(mixed_batch):
    provider = get_provider('frozen-random-conv', out_dim=16)
    assert apps.feature_distance(mixed_batch, mixed_batch, provider) == \
        pytest.approx(0.0, abs=1e-4)
    single = mixed_batch.select(slice(0, 1))
    assert apps.feature_distance(single, single, provider) is None
    with pytest.raises(ConfigError):
        apps.feature_distance(mixed_batch, mixed_batch, get_provider('off'))


def test_applications_inpainting_sweep_unscored(tokenizer, mixed_batch):
    points, completions = apps.inpainting_sweep(tokenizer, None, mixed_batch, [1.0],
                                                get_provider('off'), keep_images=True)
    assert points[0]['consistency'] is None
    assert points[0]['frechet'] is None
    assert torch.equal(completions[0].pixels, tokenizer.reconstruct(mixed_batch).pixels)


@pytest.fixture(scope='module')
def desk_pipeline():
    config = hita.PROFILES['desk']
    train, held_out = hita.data.synthetic_corpus(config).split()
    tokenizer = hita.train.train_tokenizer(config, train).tokenizer
    holistic, patch, labels = hita.train.tokenize_corpus(tokenizer, train)
    model = hita.train.train_ar(config, holistic, patch, labels).model.eval()
    return config, tokenizer, model, held_out


@pytest.mark.skipif(not RUN_SLOW, reason='set HITA_RUN_SLOW=1 for long training runs')
def test_applications_consistency_grows_with_visibility(desk_pipeline):
    config, tokenizer, model, held_out = desk_pipeline
    provider = get_provider(config.perceptual_provider, out_dim=config.semantic_dim)
    images = held_out.stratified(32)
    points = apps.inpainting_sweep(tokenizer, model, images, [0.25, 0.5, 0.75], provider,
                                   cfg_scale=config.cfg_scale, seed=config.seed)
    scores = [p['consistency'] for p in points]
    assert scores[0] <= scores[1] + 0.01
    assert scores[1] <= scores[2] + 0.01


@pytest.mark.skipif(not RUN_SLOW, reason='set HITA_RUN_SLOW=1 for long training runs')
def test_applications_generation_separates_classes(desk_pipeline):
    config, tokenizer, model, _ = desk_pipeline
    generator = torch.Generator().manual_seed(config.seed)
    means, spreads = [], []
    for class_id in range(config.num_classes):
        class_ids = torch.full((8,), class_id, dtype=torch.long)
        ids = generate(model, class_ids, config.cfg_scale, config.temperature, config.top_k,
                       generator)
        m = config.num_holistic
        pixels = tokenizer.decode_tokens(ids[:, :m], ids[:, m:]).pixels.reshape(8, -1)
        mean = pixels.mean(dim=0)
        means.append(mean)
        spreads.append(float((pixels - mean).norm(dim=1).mean()))

    inter = [float((means[a] - means[b]).norm())
             for a in range(len(means)) for b in range(a + 1, len(means))]
    assert np.mean(inter) > np.mean(spreads)

@pytest.mark.skipif(not RUN_SLOW, reason='set HITA_RUN_SLOW=1 for long training runs')
def test_applications_probe_direction():
    base = hita.PROFILES['desk']
    gaps = []
    for seed in range(3):
        config = dataclasses.replace(base, seed=seed)
        baseline = dataclasses.replace(config, use_queries=False, selection_k=0)
        corpus = hita.data.synthetic_corpus(config)

        trained = hita.train.train_tokenizer(config, corpus).tokenizer
        plain = hita.train.train_tokenizer(baseline, corpus).tokenizer
        gaps.append(apps.probe_tokenizer(trained, corpus, seed=seed)
                    - apps.probe_tokenizer(plain, corpus, seed=seed))
    assert np.mean(gaps) >= 0.10
