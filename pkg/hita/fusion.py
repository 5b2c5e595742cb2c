"""Causal token fusion and decoder-grid assembly.

The fusion transformer sees [holistic codes ++ patch codes] under a causal
mask. The decoder grid then takes, in raster order, the last k holistic
outputs followed by the first G - k patch outputs:

    slot t  <-  holistic[M - k + t]   for t < k
    slot t  <-  patch[t - k]          for t >= k

Two ablation variants replace patch slots with a learned mask token
before fusion: `partial` masks the first k slots, `full` masks all G.
"""
import dataclasses

import torch
import torch.nn as nn

from .autoencoder import PatchGrid
from .errors import ShapeError, ValidationError
from .transformer import Transformer

SELECT = 'select'
PARTIAL = 'partial'
FULL = 'full'


@dataclasses.dataclass(frozen=True)
class FusedSequence:
    holistic: torch.Tensor
    patch: torch.Tensor


class TokenFusion(nn.Module):

    def __init__(self, config):
        super().__init__()
        dim = config.embed_dim
        self.num_holistic = config.num_holistic
        self.num_patches = config.num_patches
        self.pos_embed = nn.Parameter(torch.randn(config.seq_len, dim) * 0.02)
        self.transformer = Transformer(dim, config.transformer_depth, config.num_heads)
        self.mask_token = (nn.Parameter(torch.zeros(dim))
                           if config.fusion_mode in (PARTIAL, FULL) else None)

    def fuse(self, holistic, patch):
        '''Causal attention over the dequantized holistic and patch codes.

        Raises
        ------
        ShapeError if either stream length disagrees with the config.
        '''
        if holistic.shape[1] != self.num_holistic or patch.shape[1] != self.num_patches:
            raise ShapeError('fusion expects ({}, {}) positions, got ({}, {})'.format(
                self.num_holistic, self.num_patches, holistic.shape[1], patch.shape[1]))
        x = torch.cat([holistic, patch], dim=1) + self.pos_embed
        out = self.transformer(x, causal=True)
        return FusedSequence(out[:, :self.num_holistic], out[:, self.num_holistic:])

    def forward(self, holistic, patch):
        return self.fuse(holistic, patch)


def select_and_assemble(fused, k, side):
    '''Grid of the last k holistic outputs then the first G - k patch outputs.

    Parameters
    ----------
    fused : FusedSequence

    k : int
        Selection length, 0 <= k <= min(M, G).

    side : int
        Grid side, image_size / f.

    Returns
    -------
    grid : PatchGrid
    '''
    m = fused.holistic.shape[1]
    g = side * side
    if fused.patch.shape[1] != g:
        raise ShapeError('{} patch outputs for a {}x{} grid'.format(
            fused.patch.shape[1], side, side))
    if not 0 <= k <= min(m, g):
        raise ValidationError('selection length k={} outside [0, {}]'.format(k, min(m, g)))

    slots = torch.cat([fused.holistic[:, m - k:], fused.patch[:, :g - k]], dim=1)
    return PatchGrid.from_sequence(slots, side)


def assemble_variant(fusion, holistic, patch, mode, k, side):
    '''Fuse and assemble under one of the fusion modes.

    `select` is `select_and_assemble(fusion.fuse(holistic, patch), k)`.
    `partial` replaces the first k patch inputs with the mask token, and
    `full` replaces all of them; in both cases the grid is the G fused
    patch outputs, so each masked slot decodes from mask token plus its
    positional embedding, conditioned on the holistic prefix.

    Raises
    ------
    ValidationError on an unknown mode or out-of-range k.
    '''
    if mode == SELECT:
        return select_and_assemble(fusion.fuse(holistic, patch), k, side)
    if mode not in (PARTIAL, FULL):
        raise ValidationError("unknown fusion mode '{}'".format(mode))
    if fusion.mask_token is None:
        raise ValidationError("fusion module was built without a mask token for mode '{}'"
                              .format(mode))

    g = side * side
    num_masked = g if mode == FULL else k
    if not 0 <= num_masked <= g:
        raise ValidationError('selection length k={} outside [0, {}]'.format(k, g))

    b, _, dim = patch.shape
    mask = fusion.mask_token.expand(b, num_masked, dim)
    patch = torch.cat([mask, patch[:, num_masked:]], dim=1)
    fused = fusion.fuse(holistic, patch)
    return PatchGrid.from_sequence(fused.patch, side)
