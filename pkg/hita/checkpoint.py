"""Checkpoint archives.

Tensors are stored as a safetensors file. The CheckpointManifest rides in
the file's string metadata, one JSON-encoded value per manifest field.
"""
import hashlib
import json
import logging
import os

import safetensors.torch
from safetensors import SafetensorError, safe_open

from .errors import CheckpointError
from .gpt import ARModel
from .models import CheckpointManifest
from .tokenizer import HitaTokenizer

logger = logging.getLogger("hita.checkpoint")

FORMAT_VERSION = 2
TOKENIZER = 'tokenizer'
AR_MODEL = 'ar'


def save_checkpoint(path, module, config, kind, step=0, usage=None):
    '''Write a module's state dict with its manifest.

    Parameters
    ----------
    kind : str
        `tokenizer` or `ar`.

    usage : dict, optional
        Last codebook usage snapshot.

    Returns
    -------
    manifest : CheckpointManifest
    '''
    entries = [dict(name=name, shape=list(tensor.shape), dtype=str(tensor.dtype))
               for name, tensor in module.state_dict().items()]
    manifest = CheckpointManifest(FORMAT_VERSION, kind, config.fingerprint(),
                                  config.to_dict(), entries, usage=usage, step=step)
    metadata = {key: json.dumps(value, sort_keys=True) for key, value in manifest.items()}

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    safetensors.torch.save_model(module, path, metadata=metadata, force_contiguous=True)
    logger.info('wrote %s checkpoint %s (%d tensors)', kind, path, len(entries))
    return manifest


def read_manifest(path):
    '''Manifest of a checkpoint, without touching its tensors.

    Raises
    ------
    CheckpointError if the file is not a readable checkpoint.
    '''
    try:
        with safe_open(path, framework='pt') as fp:
            metadata = fp.metadata() or dict()
    except (SafetensorError, OSError, ValueError) as derp:
        raise CheckpointError('{}: not a checkpoint archive ({})'.format(path, derp))

    missing = [key for key in CheckpointManifest.FIELDS if key not in metadata]
    if missing:
        raise CheckpointError('{}: manifest lacks {}'.format(path, ', '.join(missing)))
    try:
        return CheckpointManifest(**{key: json.loads(metadata[key])
                                     for key in CheckpointManifest.FIELDS})
    except ValueError as derp:
        raise CheckpointError('{}: unreadable manifest ({})'.format(path, derp))


def load_checkpoint(path, module, config, kind):
    '''Restore a module in place.

    Raises
    ------
    CheckpointError if the archive is malformed, holds another kind of
    module, or was written under a config with a different fingerprint.
    '''
    manifest = read_manifest(path)
    if manifest['kind'] != kind:
        raise CheckpointError('{}: holds a {} checkpoint, expected {}'.format(
            path, manifest['kind'], kind))
    if manifest['fingerprint'] != config.fingerprint():
        raise CheckpointError('{}: config fingerprint {} does not match {}'.format(
            path, manifest['fingerprint'], config.fingerprint()))

    try:
        safetensors.torch.load_model(module, path, strict=True)
    except (SafetensorError, OSError, RuntimeError, ValueError) as derp:
        raise CheckpointError('{}: {}'.format(path, derp))
    return manifest


def load_tokenizer(path, config):
    tokenizer = HitaTokenizer(config)
    manifest = load_checkpoint(path, tokenizer, config, TOKENIZER)
    return tokenizer.eval(), manifest


def load_ar_model(path, config):
    model = ARModel(config)
    manifest = load_checkpoint(path, model, config, AR_MODEL)
    return model.eval(), manifest


def parameter_checksum(module):
    '''sha256 over every state-dict entry name and its bytes.'''
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
