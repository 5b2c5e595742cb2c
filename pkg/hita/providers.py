"""Frozen feature providers, keyed by string id.

One registry serves three consumers: semantic injection into the
holistic mixer, the perceptual loss, and the consistency score. Every
provider is frozen; no gradient ever reaches its parameters, although
gradients do flow through it to its inputs.

Registered ids
--------------
frozen-random-conv : fixed-seed random conv net (desk default)
frozen-linear      : fixed-seed bias-free 1x1 projection, linear in pixels
none / off         : empty provider; no tokens, no feature maps
file-exchange      : external program exchanging .npy files
"""
import logging
import os
import shlex
import subprocess
import tempfile

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

logger = logging.getLogger("hita.providers")

PROVIDER_SEED = 1234
PROVIDERS = dict()


def register_provider(provider_id, factory):
    PROVIDERS[provider_id] = factory
    return factory


def get_provider(provider_id, **kwargs):
    '''Instantiate a registered provider.

    Raises
    ------
    ConfigError if the id is unknown.
    '''
    if provider_id not in PROVIDERS:
        raise ConfigError("unknown feature provider '{}' (known: {})".format(
            provider_id, ', '.join(sorted(PROVIDERS))))
    return PROVIDERS[provider_id](**kwargs)


def _seeded_init_(module, seed):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            fan_in = param[0].numel() if param.dim() > 1 else param.numel()
            param.copy_(torch.randn(param.shape, generator=generator) / fan_in ** 0.5)


class FeatureProvider(nn.Module):
    provider_id = None
    out_dim = 0

    def freeze(self):
        self.requires_grad_(False)
        return self.eval()

    def train(self, mode=True):
        return super().train(False)

    def _prepare(self, pixels):
        '''B x H x W x 3 pixels to channels-first in the provider dtype.'''
        params = list(self.parameters())
        dtype = params[0].dtype if params else pixels.dtype
        return pixels.permute(0, 3, 1, 2).to(dtype)

    def feature_maps(self, pixels):
        return []

    def tokens(self, pixels):
        '''B x S x out_dim feature tokens.'''
        maps = self.feature_maps(pixels)
        if not maps:
            return pixels.new_zeros(pixels.shape[0], 0, 0)
        last = maps[-1]
        return last.flatten(2).transpose(1, 2)

    def pooled(self, pixels):
        if self.out_dim == 0:
            raise ConfigError("provider '{}' yields no pooled features".format(self.provider_id))
        return self.tokens(pixels).mean(dim=1)


class NullProvider(FeatureProvider):
    provider_id = 'none'

    def __init__(self, **kwargs):
        super().__init__()


class FrozenRandomConvProvider(FeatureProvider):
    provider_id = 'frozen-random-conv'

    def __init__(self, out_dim=64, seed=PROVIDER_SEED, **kwargs):
        super().__init__()
        self.out_dim = out_dim
        self.layers = nn.ModuleList([
            nn.Conv2d(3, 32, kernel_size=3, stride=2, padding=1),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.Conv2d(64, out_dim, kernel_size=3, stride=1, padding=1)])
        _seeded_init_(self, seed)
        self.freeze()

    def feature_maps(self, pixels):
        x = self._prepare(pixels)
        maps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
            maps.append(x)
        return maps


class FrozenLinearProvider(FeatureProvider):
    provider_id = 'frozen-linear'

    def __init__(self, out_dim=32, seed=PROVIDER_SEED, **kwargs):
        super().__init__()
        self.out_dim = out_dim
        self.proj = nn.Conv2d(3, out_dim, kernel_size=1, bias=False)
        _seeded_init_(self, seed)
        self.freeze()

    def feature_maps(self, pixels):
        return [self.proj(self._prepare(pixels))]


class FileExchangeProvider(FeatureProvider):
    '''Features computed by an external program.

    The command template receives `{input}` (a .npy of B x H x W x 3
    float32 pixels) and `{output}` (where it must write B x S x D float32
    features). Outputs carry no gradient.
    '''
    provider_id = 'file-exchange'

    def __init__(self, command='', out_dim=None, **kwargs):
        super().__init__()
        if not command:
            raise ConfigError("provider 'file-exchange' needs semantic_command")
        self.command = command
        self.out_dim = out_dim or 0

    def tokens(self, pixels):
        with tempfile.TemporaryDirectory() as workdir:
            input_path = os.path.join(workdir, 'input.npy')
            output_path = os.path.join(workdir, 'output.npy')
            np.save(input_path, pixels.detach().cpu().float().numpy())
            cmd = shlex.split(self.command.format(input=input_path, output=output_path))
            logger.debug('running %s', cmd)
            subprocess.run(cmd, check=True)
            features = np.load(output_path)

        if features.ndim != 3 or features.shape[0] != pixels.shape[0]:
            raise ShapeError('external features have shape {}, expected B x S x D'
                             .format(features.shape))
        return torch.from_numpy(features.astype(np.float32)).to(pixels.device)


register_provider('none', NullProvider)
register_provider('off', NullProvider)
register_provider('frozen-random-conv', FrozenRandomConvProvider)
register_provider('frozen-linear', FrozenLinearProvider)
register_provider('file-exchange', FileExchangeProvider)
