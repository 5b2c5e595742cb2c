"""Learnable query bank, semantic injection and the pre-quantization
transformers.

    Q, Z   = mixer(Q ++ E(I) ++ H(I))        full attention, H(I) dropped
    Qb, Zb = aligner(Q ++ Z)                 causal attention

Holistic positions always precede patch positions, which follow raster
order.
"""
import dataclasses
import logging

import torch
import torch.nn as nn

from .errors import ShapeError, StateError
from .transformer import Transformer

logger = logging.getLogger("hita.holistic")

MIXED = 'mixed'
ALIGNED = 'causal_aligned'


@dataclasses.dataclass(frozen=True)
class SemanticFeatures:
    '''Frozen provider tokens, B x S x D. S may be zero.'''
    features: torch.Tensor
    provider_id: str

    @property
    def num_tokens(self):
        return self.features.shape[1]


@dataclasses.dataclass(frozen=True)
class LatentSequence:
    holistic: torch.Tensor
    patch: torch.Tensor
    stage: str

    @property
    def num_holistic(self):
        return self.holistic.shape[1]

    def concat(self):
        return torch.cat([self.holistic, self.patch], dim=1)


def semantic_features(images, provider):
    '''H(I) from a frozen provider.

    Parameters
    ----------
    images : ImageBatch

    provider : FeatureProvider
        See `hita.providers.get_provider`.

    Returns
    -------
    sem : SemanticFeatures
    '''
    with torch.no_grad():
        tokens = provider.tokens(images.pixels)
    return SemanticFeatures(tokens.detach(), provider.provider_id)


class HolisticExtractor(nn.Module):
    '''Query bank plus the mixer and causal aligner.

    Parameters
    ----------
    config : PipelineConfig

    semantic_dim : int
        Token width of the semantic provider; 0 disables injection.
    '''

    def __init__(self, config, semantic_dim=0):
        super().__init__()
        dim = config.embed_dim
        self.num_holistic = config.num_holistic
        self.semantic_dim = semantic_dim if config.use_mixer else 0

        self.queries = (nn.Parameter(torch.randn(self.num_holistic, dim) * 0.02)
                        if self.num_holistic else None)
        self.patch_pos = nn.Parameter(torch.randn(config.num_patches, dim) * 0.02)

        if self.semantic_dim:
            self.semantic_proj = nn.Linear(self.semantic_dim, dim)
            self.semantic_segment = nn.Parameter(torch.zeros(dim))
        else:
            self.semantic_proj = None

        self.mixer = (Transformer(dim, config.transformer_depth, config.num_heads)
                      if config.use_mixer else None)
        self.aligner = (Transformer(dim, config.transformer_depth, config.num_heads)
                        if config.use_causal_aligner else None)

    def query_bank(self, batch_size):
        if self.queries is None:
            return self.patch_pos.new_zeros(batch_size, 0, self.patch_pos.shape[-1])
        return self.queries.unsqueeze(0).expand(batch_size, -1, -1)

    def mix(self, patches, sem=None):
        '''Full attention over queries, patches and projected semantic tokens.

        Raises
        ------
        ShapeError if the semantic token width does not match the projection.
        '''
        z = patches.flatten()
        b, g, _ = z.shape
        if g != self.patch_pos.shape[0]:
            raise ShapeError('{} patch positions, expected {}'.format(g, self.patch_pos.shape[0]))

        q = self.query_bank(b)
        z = z + self.patch_pos
        if self.mixer is None:
            return LatentSequence(q, z, MIXED)

        parts = [q, z]
        if sem is not None and sem.num_tokens and self.semantic_proj is not None:
            if sem.features.shape[-1] != self.semantic_dim:
                raise ShapeError('semantic features have width {}, projection expects {}'
                                 .format(sem.features.shape[-1], self.semantic_dim))
            s = self.semantic_proj(sem.features.to(z.dtype)) + self.semantic_segment
            parts.append(s)

        out = self.mixer(torch.cat(parts, dim=1))
        m = q.shape[1]
        return LatentSequence(out[:, :m], out[:, m:m + g], MIXED)

    def causal_align(self, seq):
        if seq.stage != MIXED:
            raise StateError('causal_align expects a {} sequence, got {}'.format(MIXED, seq.stage))
        if self.aligner is None:
            return LatentSequence(seq.holistic, seq.patch, ALIGNED)

        m = seq.num_holistic
        out = self.aligner(seq.concat(), causal=True)
        return LatentSequence(out[:, :m], out[:, m:], ALIGNED)

    def forward(self, patches, sem=None):
        return self.causal_align(self.mix(patches, sem))
