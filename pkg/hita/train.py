"""Training loops for the tokenizer and the AR model, plus corpus-level
evaluation helpers.
"""
import dataclasses
import json
import logging
import math
import sys

import numpy as np
import torch
import tqdm

from .applications import frechet_distance
from .errors import TrainingDivergedError
from .gpt import ARModel, ar_loss
from .losses import (PatchDiscriminator, adversarial_terms, combine, make_report,
                     perceptual_loss, reconstruction_loss)
from .models import ARReport, StatsReport, TokenRecord, UsageReport
from .providers import get_provider
from .quantizer import codebook_perplexity, reseed_dead_codes, usage_stats
from .tokenizer import HitaTokenizer

logger = logging.getLogger("hita.train")


@dataclasses.dataclass
class TokenizerRun:
    tokenizer: HitaTokenizer
    reports: list
    usage: list


@dataclasses.dataclass
class ARRun:
    model: ARModel
    reports: list


def emit(record, fp=None):
    '''Write one record as a line of JSON.'''
    fp = fp or sys.stdout
    fp.write(json.dumps(record) + '\n')
    fp.flush()


def cosine_schedule(optimizer, steps):
    total = max(1, steps)
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total)))


def usage_report(tokenizer, step):
    '''UsageReport over the current window; books that never reach the
    decoder report None.'''
    books = tokenizer.codebooks()
    holistic = books.get('holistic')
    patch = books['patch'] if tokenizer.patch_book_active else None
    return UsageReport(
        step,
        holistic=usage_stats(holistic) if holistic is not None else None,
        patch=usage_stats(patch) if patch is not None else None,
        holistic_perplexity=codebook_perplexity(holistic) if holistic is not None else None,
        patch_perplexity=codebook_perplexity(patch) if patch is not None else None)


def reseed_active_books(tokenizer, out, threshold):
    '''Reseed dead codes of the books whose codes reach the decoder.

    Returns
    -------
    placed : dict
        Codes moved per book role.
    '''
    placed = dict()
    if tokenizer.holistic_book_active:
        placed['holistic'] = reseed_dead_codes(tokenizer.holistic_vq.book, out.pre_holistic,
                                               threshold)
    if tokenizer.patch_book_active:
        placed['patch'] = reseed_dead_codes(tokenizer.patch_vq.book, out.pre_patch, threshold)
    if any(placed.values()):
        logger.info('reseeded dead codes %s', placed)
    return placed


def train_tokenizer(config, corpus, steps=None, log_fp=None, progress=False):
    '''Optimize the tokenizer on a corpus.

    Parameters
    ----------
    config : PipelineConfig

    corpus : ImageCorpus

    steps : int, optional
        Overrides `config.steps`.

    log_fp : file-like, optional
        Receives every LossReport and UsageReport as NDJSON.

    Returns
    -------
    run : TokenizerRun

    Raises
    ------
    TrainingDivergedError when any loss term turns non-finite.
    '''
    steps = config.steps if steps is None else steps
    torch.manual_seed(config.seed)

    tokenizer = HitaTokenizer(config)
    perceptual = get_provider(config.perceptual_provider, out_dim=config.semantic_dim,
                              command=config.semantic_command)
    discriminator = PatchDiscriminator() if config.lambda_g > 0 else None

    optimizer = torch.optim.Adam(tokenizer.trainable_parameters(), lr=config.learning_rate)
    scheduler = cosine_schedule(optimizer, steps)
    d_optimizer = (torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate)
                   if discriminator is not None else None)

    reports, usage = [], []
    batches = corpus.forever(config.batch_size)
    tokenizer.train()
    tokenizer.reset_usage()

    for step in tqdm.trange(steps, disable=not progress):
        batch = next(batches)
        out = tokenizer(batch)
        l2 = reconstruction_loss(batch, out.reconstruction)
        perc = perceptual_loss(batch, out.reconstruction, perceptual)
        adversarial_on = discriminator is not None and step >= config.disc_start_step
        g_loss, d_loss = adversarial_terms(batch, out.reconstruction,
                                           discriminator if adversarial_on else None)

        report = make_report(step, config, l2, perc, g_loss, out.vq_holistic, out.vq_patch)
        if not all(math.isfinite(v) for k, v in report.items() if k != 'step'):
            logger.error('diverged: %s', report)
            raise TrainingDivergedError(report)

        total = combine(config, l2, perc, g_loss, out.vq_holistic, out.vq_patch)
        optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(tokenizer.trainable_parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        tokenizer.renormalize()

        if adversarial_on:
            d_optimizer.zero_grad()
            d_loss.backward()
            d_optimizer.step()

        reports.append(report)
        if log_fp is not None:
            emit(report, log_fp)

        if (step + 1) % config.usage_interval == 0 or step + 1 == steps:
            window = usage_report(tokenizer, step)
            usage.append(window)
            logger.info('step %d usage holistic=%s patch=%s', step, window['holistic'],
                        window['patch'])
            if log_fp is not None:
                emit(window, log_fp)
            if config.reseed_dead_codes and step + 1 < steps:
                reseed_active_books(tokenizer, out, config.reseed_threshold)
            tokenizer.reset_usage()

    tokenizer.eval()
    return TokenizerRun(tokenizer, reports, usage)


def tokenize_corpus(tokenizer, corpus, batch_size=None):
    '''Encode a corpus in its stored order.

    Returns
    -------
    holistic_ids : np.ndarray, n x M
    patch_ids : np.ndarray, n x G
    labels : np.ndarray, n
    '''
    tokenizer.eval()
    holistic, patch, labels = [], [], []
    for batch in corpus.batches(batch_size, shuffle=False):
        h, p = tokenizer.encode(batch)
        holistic.append(h.numpy())
        patch.append(p.numpy())
        labels.append(batch.labels.numpy())
    return np.concatenate(holistic), np.concatenate(patch), np.concatenate(labels)


def token_records(config, holistic_ids, patch_ids, labels=None):
    fingerprint = config.fingerprint32()
    if labels is None:
        labels = -np.ones(len(patch_ids), dtype=np.int64)
    return [TokenRecord(config.num_holistic, config.num_patches, config.codebook_size,
                        fingerprint, int(y), h, p)
            for h, p, y in zip(holistic_ids, patch_ids, labels)]


def train_ar(config, holistic_ids, patch_ids, labels, steps=None, log_fp=None,
             progress=False):
    '''Next-token training on tokenized sequences.

    Unlabelled sequences (label -1) train under the null class.

    Returns
    -------
    run : ARRun
    '''
    steps = config.ar_steps if steps is None else steps
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    ids = torch.from_numpy(np.concatenate([holistic_ids, patch_ids], axis=1).astype(np.int64))
    labels = np.asarray(labels, dtype=np.int64)
    labels = torch.from_numpy(np.where(labels < 0, config.num_classes, labels))

    model = ARModel(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.ar_learning_rate)
    scheduler = cosine_schedule(optimizer, steps)
    model.train()

    reports = []
    for step in tqdm.trange(steps, disable=not progress):
        index = torch.randint(0, len(ids), (config.batch_size,), generator=generator)
        loss = ar_loss(model, ids[index], labels[index], config.class_dropout_prob, generator)
        if not math.isfinite(float(loss)):
            raise TrainingDivergedError(dict(step=step, cross_entropy=float(loss)))

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        report = ARReport(step, float(loss), scheduler.get_last_lr()[0])
        scheduler.step()

        reports.append(report)
        if log_fp is not None:
            emit(report, log_fp)

    model.eval()
    return ARRun(model, reports)


def evaluate_reconstruction(tokenizer, corpus, batch_size=None, provider=None):
    '''Reconstruction error and codebook usage over one unshuffled pass.

    Parameters
    ----------
    provider : FeatureProvider, optional
        When it yields pooled features, the report also carries the
        Fréchet distance between originals and reconstructions.

    Returns
    -------
    report : StatsReport
    '''
    config = tokenizer.config
    tokenizer.eval()
    tokenizer.reset_usage()
    measure = provider is not None and provider.out_dim > 0

    total, count = 0.0, 0
    originals, reconstructions = [], []
    for batch in corpus.batches(batch_size, shuffle=False):
        holistic_ids, patch_ids = tokenizer.encode(batch, track=True)
        recon = tokenizer.decode_tokens(holistic_ids, patch_ids)
        total += float(reconstruction_loss(batch, recon)) * batch.batch_size
        count += batch.batch_size
        if measure:
            with torch.no_grad():
                originals.append(provider.pooled(batch.pixels).double().numpy())
                reconstructions.append(provider.pooled(recon.pixels).double().numpy())

    frechet = None
    if measure and count > 1:
        frechet = frechet_distance(np.concatenate(originals), np.concatenate(reconstructions))

    window = usage_report(tokenizer, step=0)
    n = config.codebook_size
    return StatsReport(
        num_images=count, num_holistic=config.num_holistic,
        num_patches=config.num_patches, seq_len=config.seq_len, codebook_size=n,
        holistic_usage=window['holistic'], patch_usage=window['patch'],
        holistic_bound=min(1.0, count * config.num_holistic / float(n)),
        patch_bound=min(1.0, count * config.num_patches / float(n)),
        l2=total / count, fingerprint=config.fingerprint(), frechet=frechet)
