"""The holistic-to-local tokenizer: encoder, query extractor, two
quantizers, causal fusion and decoder in one module.
"""
import dataclasses
import logging

import torch
import torch.nn as nn

from .autoencoder import Decoder, Encoder, decode_grid, encode_patches
from .fusion import SELECT, FULL, TokenFusion, assemble_variant, select_and_assemble
from .holistic import HolisticExtractor, semantic_features
from .providers import get_provider
from .quantizer import HOLISTIC, PATCH, VectorQuantizer

logger = logging.getLogger("hita.tokenizer")


@dataclasses.dataclass(frozen=True)
class TokenizerOutput:
    reconstruction: object
    holistic: object
    patch: object
    pre_holistic: torch.Tensor
    pre_patch: torch.Tensor
    vq_holistic: torch.Tensor
    vq_patch: torch.Tensor


class HitaTokenizer(nn.Module):
    '''Image <-> (M holistic ids, G patch ids).

    Parameters
    ----------
    config : PipelineConfig
    '''

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.semantic_provider = get_provider(
            config.semantic_provider, out_dim=config.semantic_dim,
            command=config.semantic_command)
        self.extractor = HolisticExtractor(config, self.semantic_provider.out_dim)
        self.holistic_vq = (VectorQuantizer(config.embed_dim, config.holistic_code_dim,
                                            config.codebook_size, HOLISTIC)
                            if config.num_holistic else None)
        self.patch_vq = VectorQuantizer(config.embed_dim, config.patch_code_dim,
                                        config.codebook_size, PATCH)
        self.fusion = TokenFusion(config)

    def codebooks(self):
        books = dict(patch=self.patch_vq.book)
        if self.holistic_vq is not None:
            books['holistic'] = self.holistic_vq.book
        return books

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def renormalize(self):
        for book in self.codebooks().values():
            book.renormalize()

    def reset_usage(self):
        for book in self.codebooks().values():
            book.reset_usage()

    def _empty_holistic(self, like):
        return like.new_zeros(like.shape[0], 0, self.config.embed_dim)

    def assemble(self, holistic, patch):
        config = self.config
        if config.fusion_mode == SELECT:
            return select_and_assemble(self.fusion.fuse(holistic, patch),
                                       config.selection_k, config.grid_side)
        return assemble_variant(self.fusion, holistic, patch, config.fusion_mode,
                                config.selection_k, config.grid_side)

    def forward(self, images, track=True):
        '''Full training pass.

        Returns
        -------
        output : TokenizerOutput
            Reconstruction, both token sets, pre-quantized latents and the
            two VQ losses.
        '''
        config = self.config
        grid = encode_patches(self.encoder, images, config)
        sem = (semantic_features(images, self.semantic_provider)
               if self.extractor.semantic_proj is not None else None)
        seq = self.extractor(grid, sem)

        pre_p, tokens_p, z_hat, loss_p = self.patch_vq(seq.patch, config.beta, track=track)
        if self.holistic_vq is not None:
            pre_h, tokens_h, q_hat, loss_h = self.holistic_vq(seq.holistic, config.beta,
                                                              track=track)
        else:
            pre_h, tokens_h = seq.holistic, None
            q_hat = self._empty_holistic(z_hat)
            loss_h = z_hat.new_zeros(())

        reconstruction = decode_grid(self.decoder, self.assemble(q_hat, z_hat), config)
        return TokenizerOutput(reconstruction, tokens_h, tokens_p, pre_h, pre_p,
                               loss_h, loss_p)

    def encode(self, images, track=False):
        '''Discrete ids for a batch.

        Returns
        -------
        holistic_ids : torch.LongTensor, B x M (M = 0 without queries)

        patch_ids : torch.LongTensor, B x G
        '''
        with torch.no_grad():
            out = self.forward(images, track=track)
        holistic = (out.holistic.ids if out.holistic is not None else
                    out.patch.ids.new_zeros(out.patch.ids.shape[0], 0))
        return holistic, out.patch.ids

    def dequantize(self, holistic_ids, patch_ids):
        z_hat = self.patch_vq.dequantize(patch_ids)
        if self.holistic_vq is None:
            return self._empty_holistic(z_hat), z_hat
        return self.holistic_vq.dequantize(holistic_ids), z_hat

    def decode_tokens(self, holistic_ids, patch_ids):
        '''Decode ids through fusion, assembly and the decoder.'''
        with torch.no_grad():
            q_hat, z_hat = self.dequantize(holistic_ids, patch_ids)
            return decode_grid(self.decoder, self.assemble(q_hat, z_hat), self.config)

    def reconstruct(self, images):
        return self.decode_tokens(*self.encode(images))

    def probe_features(self, images):
        '''Mean-pooled fused holistic outputs, or mean-pooled dequantized
        patch codes when the tokenizer has no queries.'''
        holistic_ids, patch_ids = self.encode(images)
        with torch.no_grad():
            q_hat, z_hat = self.dequantize(holistic_ids, patch_ids)
            if not q_hat.shape[1]:
                return z_hat.mean(dim=1)
            return self.fusion.fuse(q_hat, z_hat).holistic.mean(dim=1)

    @property
    def patch_book_active(self):
        return self.config.fusion_mode != FULL

    @property
    def holistic_book_active(self):
        '''True when holistic outputs fill grid slots or condition masked ones.'''
        config = self.config
        return (self.holistic_vq is not None
                and (config.selection_k > 0 or config.fusion_mode != SELECT))
