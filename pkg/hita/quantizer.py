"""Two independent l2-normalized codebooks with nearest-code lookup.

Inputs and code vectors are both unit norm, so the Euclidean argmin is
the cosine argmax. Ties resolve to the lowest index.

Token dumps are a stream of little-endian int32 records, one per image:

    M, G, N, fingerprint32, class_id, M holistic ids, G patch ids

with class_id = -1 for unlabelled images.
"""
import dataclasses
import logging
import os

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError, ShapeError, StateError, ValidationError
from .models import TokenRecord

logger = logging.getLogger("hita.quantizer")

HOLISTIC = 'holistic'
PATCH = 'patch'
EPS = 1e-8
HEADER_SIZE = 5
DUMP_DTYPE = np.dtype('<i4')


class Codebook(nn.Module):
    '''N x D unit vectors plus per-row usage counters.'''

    def __init__(self, size, dim, role):
        super().__init__()
        self.role = role
        vectors = torch.randn(size, dim)
        self.vectors = nn.Parameter(vectors / vectors.norm(dim=-1, keepdim=True))
        self.register_buffer('usage_counts', torch.zeros(size, dtype=torch.long))

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def renormalize(self):
        with torch.no_grad():
            self.vectors.div_(self.vectors.norm(dim=-1, keepdim=True).clamp_min(EPS))

    def reset_usage(self):
        self.usage_counts.zero_()


@dataclasses.dataclass(frozen=True)
class QuantizedTokens:
    ids: torch.Tensor
    codes: torch.Tensor
    role: str


def project_and_normalize(latents, projection):
    '''Project C -> D and scale every row to unit norm.'''
    z = projection(latents)
    return z / (z.norm(dim=-1, keepdim=True) + EPS)


def quantize_nearest(inputs, book, track=True, chunk_size=4096, max_elements=2 ** 24):
    '''Map every input row to its nearest code.

    Parameters
    ----------
    inputs : torch.Tensor, B x L x D

    book : Codebook

    track : bool
        Increment `book.usage_counts` with the assigned ids.

    max_elements : int
        Cap on the chunk x N x D distance buffer. Rows per chunk shrink
        with the book so memory stays bounded at large N.

    Returns
    -------
    tokens : QuantizedTokens
        `codes[b, l]` is exactly `book.vectors[ids[b, l]]`.
    '''
    if inputs.shape[-1] != book.dim:
        raise ShapeError('{} inputs have width {}, book expects {}'.format(
            book.role, inputs.shape[-1], book.dim))

    flat = inputs.detach().reshape(-1, book.dim)
    vectors = book.vectors.detach().to(flat.dtype)
    rows = max(1, min(chunk_size, max_elements // (book.size * book.dim)))
    ids = []
    for start in range(0, flat.shape[0], rows):
        chunk = flat[start:start + rows]
        distance = ((chunk[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
        ids.append(distance.argmin(dim=1))
    ids = torch.cat(ids) if ids else flat.new_zeros(0, dtype=torch.long)

    if track and ids.numel():
        with torch.no_grad():
            book.usage_counts += torch.bincount(ids, minlength=book.size)

    ids = ids.reshape(inputs.shape[:-1])
    return QuantizedTokens(ids, book.vectors[ids], book.role)


class _StraightThrough(torch.autograd.Function):

    @staticmethod
    def forward(ctx, pre, codes):
        return codes.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(pre, codes):
    '''Forward value `codes`, gradient passed to `pre` unchanged.'''
    if pre.shape != codes.shape:
        raise ShapeError('straight-through shapes differ: {} vs {}'.format(
            tuple(pre.shape), tuple(codes.shape)))
    return _StraightThrough.apply(pre, codes)


def vq_loss(pre, codes, beta):
    '''Codebook term plus beta-weighted commitment term, mean over positions.'''
    codebook_term = ((pre.detach() - codes) ** 2).sum(-1).mean()
    commitment_term = ((codes.detach() - pre) ** 2).sum(-1).mean()
    return codebook_term + beta * commitment_term


def usage_stats(book):
    '''Fraction of rows hit at least once since the last reset.'''
    counts = book.usage_counts
    if int(counts.sum()) == 0:
        raise StateError('{} usage is undefined over an empty window'.format(book.role))
    return float((counts > 0).sum()) / book.size


def codebook_perplexity(book):
    counts = book.usage_counts.double()
    total = counts.sum()
    if total == 0:
        raise StateError('{} perplexity is undefined over an empty window'.format(book.role))
    probs = counts / total
    entropy = -(probs[probs > 0] * probs[probs > 0].log()).sum()
    return float(entropy.exp())


def reseed_dead_codes(book, inputs, threshold=0.0):
    '''Move never-hit codes onto the inputs worst served by the live ones.

    Dead codes are placed one at a time on the input row farthest from
    every live or already placed code, while that squared distance is
    above `threshold`. Dead codes left over keep their vectors.

    Parameters
    ----------
    inputs : torch.Tensor, ... x D
        Pre-quantized unit rows of one batch.

    threshold : float
        Squared chord distance below which an input counts as covered.

    Returns
    -------
    num_reseeded : int
    '''
    dead = (book.usage_counts == 0).nonzero().flatten()
    flat = inputs.detach().reshape(-1, book.dim).to(book.vectors.dtype)
    if dead.numel() == 0 or flat.shape[0] == 0:
        return 0

    live = book.vectors.detach()[book.usage_counts > 0]
    if live.shape[0]:
        nearest = ((flat[:, None, :] - live[None, :, :]) ** 2).sum(-1).min(dim=1).values
    else:
        nearest = torch.full((flat.shape[0],), float('inf'), dtype=flat.dtype)

    placed = 0
    with torch.no_grad():
        for index in dead.tolist():
            far = int(nearest.argmax())
            if nearest[far] <= threshold:
                break
            book.vectors[index] = flat[far]
            nearest = torch.minimum(nearest, ((flat - flat[far]) ** 2).sum(-1))
            placed += 1
    if placed:
        book.renormalize()
        logger.debug('reseeded %d of %d dead %s codes', placed, dead.numel(), book.role)
    return placed


class VectorQuantizer(nn.Module):
    '''Projection C -> D, one codebook, and the inverse projection D -> C.'''

    def __init__(self, embed_dim, code_dim, codebook_size, role):
        super().__init__()
        self.role = role
        self.project = nn.Linear(embed_dim, code_dim)
        self.book = Codebook(codebook_size, code_dim, role)
        self.expand = nn.Linear(code_dim, embed_dim)

    def forward(self, latents, beta, track=True):
        '''
        Returns
        -------
        pre : torch.Tensor
            Unit-norm projected latents.

        tokens : QuantizedTokens

        expanded : torch.Tensor
            Straight-through codes projected back to width C.

        loss : torch.Tensor
            vq_loss(pre, codes, beta).
        '''
        pre = project_and_normalize(latents, self.project)
        tokens = quantize_nearest(pre, self.book, track=track)
        loss = vq_loss(pre, tokens.codes, beta)
        expanded = self.expand(straight_through(pre, tokens.codes))
        return pre, tokens, expanded, loss

    def dequantize(self, ids):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.book.size):
            raise ValidationError('{} ids outside [0, {})'.format(self.role, self.book.size))
        return self.expand(self.book.vectors[ids])


def write_token_dump(path, records, append=False):
    '''Write TokenRecords as little-endian int32 records.'''
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'ab' if append else 'wb') as fp:
        for record in records:
            header = [record['num_holistic'], record['num_patches'],
                      record['codebook_size'], record['fingerprint'],
                      record['class_id']]
            row = header + list(record['holistic_ids']) + list(record['patch_ids'])
            fp.write(np.asarray(row, dtype=np.int64).astype(DUMP_DTYPE).tobytes())
    return path


def read_token_dump(path, fingerprint=None):
    '''Read every record of a token dump.

    Parameters
    ----------
    fingerprint : int, optional
        If given, every record must carry this 32-bit config fingerprint.

    Returns
    -------
    records : list of TokenRecord

    Raises
    ------
    DataError on truncated files or mismatched fingerprints.
    '''
    data = np.fromfile(path, dtype=DUMP_DTYPE)
    records = []
    pos = 0
    while pos < len(data):
        if pos + HEADER_SIZE > len(data):
            raise DataError('{}: truncated header at word {}'.format(path, pos))
        m, g, n, fp32, class_id = (int(x) for x in data[pos:pos + HEADER_SIZE])
        body = data[pos + HEADER_SIZE:pos + HEADER_SIZE + m + g]
        if len(body) != m + g:
            raise DataError('{}: truncated record at word {}'.format(path, pos))
        fp32 &= 0xffffffff
        if fingerprint is not None and fp32 != fingerprint:
            raise DataError('{}: token dump fingerprint {:08x} does not match config {:08x}'
                            .format(path, fp32, fingerprint))
        records.append(TokenRecord(m, g, n, fp32, class_id,
                                   body[:m].tolist(), body[m:].tolist()))
        pos += HEADER_SIZE + m + g
    return records
