"""Training-free procedures on a frozen tokenizer (and AR model):
style transfer, inpainting, completion consistency, feature distance and
linear probing.
"""
import logging

import numpy as np
import scipy.linalg
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
import torch
import torch.nn.functional as F

from .data import ImageBatch
from .errors import ConfigError, ShapeError, ValidationError
from .gpt import generate
from .models import SweepPoint

logger = logging.getLogger("hita.applications")


def transfer_tokens(tokenizer, content, reference):
    '''Holistic ids of `reference` with patch ids of `content`.'''
    if content.pixels.shape != reference.pixels.shape:
        raise ValidationError('content {} and reference {} differ in shape'.format(
            tuple(content.pixels.shape), tuple(reference.pixels.shape)))
    _, content_patch = tokenizer.encode(content)
    reference_holistic, _ = tokenizer.encode(reference)
    return reference_holistic, content_patch


def style_transfer(tokenizer, content, reference):
    '''Decode the reference's holistic tokens over the content's patch tokens.'''
    return tokenizer.decode_tokens(*transfer_tokens(tokenizer, content, reference))


def visible_rows(fraction, config):
    '''Number of patch rows lying entirely inside the visible top region.

    Returns
    -------
    rows : int
    visible_px : int
    '''
    if not 0 < fraction <= 1:
        raise ValidationError('visible fraction {} outside (0, 1]'.format(fraction))
    visible_px = int(round(fraction * config.image_size))
    rows = visible_px // config.downsample_factor
    if rows == 0:
        raise ValidationError('visible fraction {} leaves no complete patch row'.format(fraction))
    return rows, visible_px


def mask_lower(images, visible_px):
    '''Zero every pixel row at or below `visible_px`.'''
    pixels = images.pixels.clone()
    pixels[:, visible_px:] = 0
    return ImageBatch(pixels, images.labels)


def inpaint_tokens(tokenizer, model, partial, visible_fraction, class_ids, cfg_scale=1.0,
                   temperature=1.0, top_k=0, generator=None, generate_holistic=False):
    '''Complete a token sequence from the visible top of an image.

    The prefix is every holistic id of the masked image (unless
    `generate_holistic`) plus the patch ids of fully visible rows; the AR
    model samples the remainder.

    Returns
    -------
    ids : torch.LongTensor, B x (M + G)

    fixed_mask : torch.BoolTensor, B x (M + G)
        Positions copied from the partial image.
    '''
    config = tokenizer.config
    rows, visible_px = visible_rows(visible_fraction, config)
    holistic, patch = tokenizer.encode(mask_lower(partial, visible_px))
    ids = torch.cat([holistic, patch], dim=1)

    m = config.num_holistic
    fixed_mask = torch.zeros_like(ids, dtype=torch.bool)
    fixed_mask[:, m:m + rows * config.grid_side] = True
    if not generate_holistic:
        fixed_mask[:, :m] = True

    if bool(fixed_mask.all()):
        return ids, fixed_mask
    if model is None:
        raise ConfigError('inpainting below the visible rows needs an AR model')

    completed = generate(model, class_ids, cfg_scale, temperature, top_k, generator,
                         fixed_ids=ids, fixed_mask=fixed_mask)
    return completed, fixed_mask


def inpaint(tokenizer, model, partial, visible_fraction, class_ids, cfg_scale=1.0,
            temperature=1.0, top_k=0, generator=None, generate_holistic=False):
    '''Inpainted images; see `inpaint_tokens`.'''
    ids, _ = inpaint_tokens(tokenizer, model, partial, visible_fraction, class_ids,
                            cfg_scale, temperature, top_k, generator, generate_holistic)
    m = tokenizer.config.num_holistic
    return tokenizer.decode_tokens(ids[:, :m], ids[:, m:])


def consistency_score(original, completed, provider):
    '''Mean cosine similarity of pooled provider features, in [-1, 1].'''
    if provider is None or provider.out_dim == 0:
        raise ConfigError('consistency score needs a feature provider with pooled features')
    with torch.no_grad():
        a = provider.pooled(original.pixels)
        b = provider.pooled(completed.pixels)
    return float(F.cosine_similarity(a, b, dim=-1).mean())


def frechet_distance(reference, candidate, eps=1e-6):
    '''Fréchet distance between Gaussians fitted to two feature sets.

    Parameters
    ----------
    reference, candidate : array, n x d
        At least two rows each.

    Returns
    -------
    distance : float
        |mu_r - mu_c|^2 + Tr(S_r + S_c - 2 (S_r S_c)^1/2), zero for
        identical sets.

    Raises
    ------
    ShapeError if the feature widths differ.
    ValidationError if either set has fewer than two rows.
    '''
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError('feature sets {} and {} are not comparable'.format(a.shape, b.shape))
    if len(a) < 2 or len(b) < 2:
        raise ValidationError('feature distance needs at least 2 samples per set')

    diff = a.mean(axis=0) - b.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False))
    covmean = scipy.linalg.sqrtm(sigma_a.dot(sigma_b))
    if not np.isfinite(covmean).all():
        logger.warning('singular covariance product, adding %g to the diagonals', eps)
        offset = np.eye(a.shape[1]) * eps
        covmean = scipy.linalg.sqrtm((sigma_a + offset).dot(sigma_b + offset))
    covmean = np.real(covmean)

    distance = diff.dot(diff) + np.trace(sigma_a) + np.trace(sigma_b) - 2 * np.trace(covmean)
    return max(float(distance), 0.0)


def feature_distance(original, completed, provider):
    '''Fréchet distance of provider-pooled features; None for a single image.'''
    if provider is None or provider.out_dim == 0:
        raise ConfigError('feature distance needs a feature provider with pooled features')
    if original.batch_size < 2:
        return None
    with torch.no_grad():
        a = provider.pooled(original.pixels).double().numpy()
        b = provider.pooled(completed.pixels).double().numpy()
    return frechet_distance(a, b)


def fit_linear_probe(features, labels, seed=0, held_out=0.25):
    '''Fit a linear classifier on frozen features.

    Parameters
    ----------
    features : array, n x d

    labels : array, n

    Returns
    -------
    classifier : sklearn Pipeline
        Standardization followed by logistic regression.

    accuracy : float
        Top-1 accuracy on a stratified held-out split.
    '''
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValidationError('linear probe needs at least 2 classes')

    x_train, x_test, y_train, y_test = train_test_split(
        features, labels, test_size=held_out, random_state=seed, stratify=labels)
    classifier = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    classifier.fit(x_train, y_train)
    return classifier, float(classifier.score(x_test, y_test))


def linear_probe(features, labels, seed=0, held_out=0.25):
    return fit_linear_probe(features, labels, seed, held_out)[1]


def corpus_features(tokenizer, corpus, batch_size=None):
    features, labels = [], []
    for batch in corpus.batches(batch_size, shuffle=False):
        features.append(tokenizer.probe_features(batch).numpy())
        labels.append(batch.labels.numpy())
    return np.concatenate(features), np.concatenate(labels)


def probe_tokenizer(tokenizer, corpus, seed=0, batch_size=None):
    '''Linear-probe accuracy of a frozen tokenizer on a labelled corpus.'''
    tokenizer.eval()
    features, labels = corpus_features(tokenizer, corpus, batch_size)
    accuracy = linear_probe(features, labels, seed=seed)
    logger.info('probe accuracy %.3f on %d images', accuracy, len(labels))
    return accuracy


def inpainting_sweep(tokenizer, model, images, fractions, provider, cfg_scale=1.0,
                     temperature=1.0, top_k=0, seed=0, classifier=None, class_ids=None,
                     generate_holistic=False, keep_images=False):
    '''Consistency, feature distance and optionally classifier accuracy per
    visible fraction.

    Parameters
    ----------
    images : ImageBatch
        Labelled originals.

    provider : FeatureProvider
        Without pooled features, consistency and feature distance stay None.

    classifier : fitted classifier, optional
        Scores provider-pooled features of the completions against the
        original labels.

    class_ids : torch.LongTensor, optional
        Conditioning classes; defaults to the image labels.

    keep_images : bool
        Also return the completed ImageBatch of every fraction.

    Returns
    -------
    points : list of SweepPoint

    completions : list of ImageBatch
        Only with `keep_images`.
    '''
    class_ids = images.labels if class_ids is None else class_ids
    scored = provider is not None and provider.out_dim > 0
    points, completions = [], []
    for fraction in fractions:
        generator = torch.Generator().manual_seed(seed)
        completed = inpaint(tokenizer, model, images, fraction, class_ids, cfg_scale,
                            temperature, top_k, generator, generate_holistic)
        accuracy = None
        if classifier is not None:
            with torch.no_grad():
                features = provider.pooled(completed.pixels).numpy()
            accuracy = float(classifier.score(features, images.labels.numpy()))
        rows, _ = visible_rows(fraction, tokenizer.config)
        point = SweepPoint(fraction, rows, None, accuracy)
        if scored:
            point['consistency'] = consistency_score(images, completed, provider)
            point['frechet'] = feature_distance(images, completed, provider)
        logger.info('inpainting %s', point)
        points.append(point)
        completions.append(completed)
    if keep_images:
        return points, completions
    return points
