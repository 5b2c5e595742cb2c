"""Convolutional encoder E(.) and decoder D(.) around the patch grid."""
import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ImageBatch
from .errors import ShapeError

RASTER = 'raster'
# GroupNorm over a 1 x 1 slot needs enough channels per group.
LOCAL_GROUP_SIZE = 16


def _groups(channels):
    for groups in (32, 16, 8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


def normalize(channels, min_group_size=1):
    groups = _groups(channels)
    while groups > 1 and channels // groups < min_group_size:
        groups //= 2
    return nn.GroupNorm(num_groups=groups, num_channels=channels, eps=1e-6)


def stage_channels(config):
    '''Channel width at the input of each stage, plus the bottleneck width.'''
    base = config.base_channels
    return [base * min(2 ** i, 4) for i in range(config.num_stages + 1)]


@dataclasses.dataclass(frozen=True)
class PatchGrid:
    '''Channels-last feature grid, B x (H/f) x (W/f) x C, raster ordered.

    Position (r, c) flattens to index r * (W/f) + c.
    '''
    features: torch.Tensor
    flattened_order: str = RASTER

    @property
    def side(self):
        return self.features.shape[1]

    def flatten(self):
        b, h, w, c = self.features.shape
        return self.features.reshape(b, h * w, c)

    @classmethod
    def from_sequence(cls, sequence, side):
        b, length, c = sequence.shape
        if length != side * side:
            raise ShapeError('{} positions cannot fill a {}x{} grid'.format(length, side, side))
        return cls(sequence.reshape(b, side, side, c))


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels=None, min_group_size=1):
        super().__init__()
        out_channels = out_channels or in_channels
        self.norm1 = normalize(in_channels, min_group_size)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = normalize(out_channels, min_group_size)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.skip = (nn.Conv2d(in_channels, out_channels, kernel_size=1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x_in):
        x = self.conv1(F.silu(self.norm1(x_in)))
        x = self.conv2(F.silu(self.norm2(x)))
        return x + self.skip(x_in)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=0)

    def forward(self, x):
        return self.conv(F.pad(x, (0, 1, 0, 1), mode='constant', value=0))


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode='nearest'))


class Encoder(nn.Module):
    '''log2(f) residual stages, each halving the spatial side.'''

    def __init__(self, config):
        super().__init__()
        channels = stage_channels(config)
        self.conv_in = nn.Conv2d(3, channels[0], kernel_size=3, padding=1)
        stages = []
        for i in range(config.num_stages):
            stages += [ResBlock(channels[i], channels[i + 1]), Downsample(channels[i + 1])]
        self.stages = nn.Sequential(*stages)
        self.mid = ResBlock(channels[-1])
        self.norm_out = normalize(channels[-1])
        self.conv_out = nn.Conv2d(channels[-1], config.embed_dim, kernel_size=1)

    def forward(self, x):
        x = self.mid(self.stages(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(x)))


class Decoder(nn.Module):
    '''Mirror of the encoder, ending in tanh so pixels stay in [-1, 1].

    With `config.local_decoder` every grid slot is decoded on its own into
    the f x f tile it covers, so a tile depends on its slot only.
    '''

    def __init__(self, config):
        super().__init__()
        self.local = config.local_decoder
        groups = LOCAL_GROUP_SIZE if self.local else 1
        channels = stage_channels(config)
        self.conv_in = nn.Conv2d(config.embed_dim, channels[-1], kernel_size=3, padding=1)
        self.mid = ResBlock(channels[-1], min_group_size=groups)
        stages = []
        for i in reversed(range(config.num_stages)):
            stages += [Upsample(channels[i + 1]),
                       ResBlock(channels[i + 1], channels[i], min_group_size=groups)]
        self.stages = nn.Sequential(*stages)
        self.norm_out = normalize(channels[0], groups)
        self.conv_out = nn.Conv2d(channels[0], 3, kernel_size=3, padding=1)

    def _decode(self, x):
        x = self.stages(self.mid(self.conv_in(x)))
        return torch.tanh(self.conv_out(F.silu(self.norm_out(x))))

    def forward(self, x):
        if not self.local:
            return self._decode(x)
        b, c, h, w = x.shape
        tiles = self._decode(x.permute(0, 2, 3, 1).reshape(b * h * w, c, 1, 1))
        f = tiles.shape[-1]
        tiles = tiles.reshape(b, h, w, 3, f, f).permute(0, 3, 1, 4, 2, 5)
        return tiles.reshape(b, 3, h * f, w * f)


def encode_patches(encoder, images, config):
    '''Z_2D = E(I) as a raster-ordered PatchGrid.

    Raises
    ------
    ShapeError if the images do not match the config geometry.
    '''
    images.check(config)
    features = encoder(images.channels_first())
    return PatchGrid(features.permute(0, 2, 3, 1))


def decode_grid(decoder, grid, config):
    '''Reconstruct pixels from a grid of side image_size / f.'''
    features = grid.features
    if (features.dim() != 4 or grid.side != config.grid_side
            or features.shape[2] != config.grid_side):
        raise ShapeError('grid is {}, config expects side {}'.format(
            tuple(features.shape), config.grid_side))
    if features.shape[-1] != config.embed_dim:
        raise ShapeError('grid has {} channels, config expects {}'.format(
            features.shape[-1], config.embed_dim))
    pixels = decoder(features.permute(0, 3, 1, 2))
    return ImageBatch(pixels.permute(0, 2, 3, 1))
