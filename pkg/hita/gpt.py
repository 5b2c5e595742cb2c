"""Class-conditional decoder-only transformer over token sequences.

Sequence layout (length L = M + G):

    input   [class] x_0 ... x_{L-2}
    target  x_0     x_1 ... x_{L-1}

Targets 0..M-1 are holistic ids, M..L-1 are raster patch ids. One
embedding table holds three segments: holistic ids at [0, N), patch ids
at [N, 2N) and class tokens at [2N, 2N + classes], the last row being the
null class used for guidance. The output head spans [0, 2N) and the
segment that cannot occur at a position is masked out.

Holistic inputs add learned absolute embeddings; patch inputs carry 2D
rotary phases (row on the first half of each head, column on the
second). Class and holistic positions have zero phase.
"""
import functools
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .transformer import Transformer

logger = logging.getLogger("hita.gpt")

MASK_VALUE = -1e9
ROPE_BASE = 10000.0


def rotary_angles(positions, dim, base=ROPE_BASE):
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return positions.to(torch.float64)[:, None] * freqs[None, :]


def _rotate_pairs(x, angles):
    cos = angles.cos().to(x.dtype)
    sin = angles.sin().to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def apply_rotary_2d(x, rows, cols, base=ROPE_BASE):
    '''Rotate (..., L, head_dim) queries or keys by grid position.

    Parameters
    ----------
    x : torch.Tensor
        Last dimension divisible by 4.

    rows, cols : torch.Tensor, length L
        Grid coordinates of each position.
    '''
    half = x.shape[-1] // 2
    return torch.cat([_rotate_pairs(x[..., :half], rotary_angles(rows, half, base)),
                      _rotate_pairs(x[..., half:], rotary_angles(cols, half, base))],
                     dim=-1)


class ARModel(nn.Module):
    '''
    Parameters
    ----------
    config : PipelineConfig
        Uses the `ar_*` fields, the tokenizer geometry, `codebook_size`
        and `num_classes`.
    '''

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.codebook_size = config.codebook_size
        self.num_holistic = config.num_holistic
        self.num_patches = config.num_patches
        self.seq_len = config.seq_len
        self.num_classes = config.num_classes
        self.null_class = config.num_classes

        width = config.ar_width
        self.tok_embed = nn.Embedding(2 * self.codebook_size + self.num_classes + 1, width)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        self.holistic_pos = nn.Parameter(torch.randn(self.num_holistic, width) * 0.02)
        self.blocks = Transformer(width, config.ar_layers, config.ar_heads, config.ar_dropout)
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 2 * self.codebook_size)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        # input position t > M holds patch t - 1 - M
        t = torch.arange(self.seq_len)
        patch_index = (t - 1 - self.num_holistic).clamp_min(0)
        is_patch = t > self.num_holistic
        side = config.grid_side
        self.register_buffer('rows', (patch_index // side) * is_patch, persistent=False)
        self.register_buffer('cols', (patch_index % side) * is_patch, persistent=False)

    def kinds(self):
        '''Per-position kind of the target sequence.'''
        return ['holistic'] * self.num_holistic + ['patch'] * self.num_patches

    def forbidden(self, positions):
        '''Boolean (len(positions), 2N) mask of the wrong vocabulary segment.'''
        predicts_holistic = positions < self.num_holistic
        vocab = torch.arange(2 * self.codebook_size, device=positions.device)
        patch_vocab = vocab >= self.codebook_size
        return predicts_holistic[:, None] == patch_vocab[None, :]

    def mask_segments(self, logits, positions):
        return logits.masked_fill(self.forbidden(positions), MASK_VALUE)

    def check_ids(self, ids):
        n = self.codebook_size
        if ids.shape[1] > self.seq_len:
            raise ValidationError('sequence of length {} exceeds {}'.format(
                ids.shape[1], self.seq_len))
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n):
            raise ValidationError('token ids outside [0, {})'.format(n))

    def check_classes(self, class_ids, allow_null=True):
        upper = self.num_classes + (1 if allow_null else 0)
        if class_ids.numel() and (int(class_ids.min()) < 0 or int(class_ids.max()) >= upper):
            raise ValidationError('class ids outside [0, {})'.format(upper))

    def embed(self, prefix, class_ids):
        '''(B, P) raw ids plus class ids -> (B, P + 1, width) inputs.'''
        n, m = self.codebook_size, self.num_holistic
        p = prefix.shape[1]
        offsets = (torch.arange(p, device=prefix.device) >= m).long() * n
        tokens = self.tok_embed(prefix + offsets)
        num_h = min(p, m)
        tokens = torch.cat([tokens[:, :num_h] + self.holistic_pos[:num_h],
                            tokens[:, num_h:]], dim=1)
        cls = self.tok_embed(class_ids + 2 * n)[:, None]
        return torch.cat([cls, tokens], dim=1)

    def logits_from_embeddings(self, h):
        length = h.shape[1]
        rotary = functools.partial(apply_rotary_2d, rows=self.rows[:length],
                                   cols=self.cols[:length])
        x = self.norm(self.blocks(h, causal=True, rotary=rotary))
        positions = torch.arange(length, device=h.device)
        return self.mask_segments(self.head(x), positions)

    def prefix_logits(self, prefix, class_ids):
        self.check_ids(prefix)
        self.check_classes(class_ids)
        return self.logits_from_embeddings(self.embed(prefix, class_ids))

    def forward_logits(self, ids, class_ids):
        '''Next-token logits for every position of full (B, L) sequences.'''
        if ids.shape[1] != self.seq_len:
            raise ValidationError('expected sequences of length {}, got {}'.format(
                self.seq_len, ids.shape[1]))
        return self.prefix_logits(ids[:, :-1], class_ids)

    def next_logits(self, prefix, class_ids):
        return self.prefix_logits(prefix, class_ids)[:, -1]

    def targets(self, ids):
        offsets = (torch.arange(ids.shape[1], device=ids.device) >= self.num_holistic).long()
        offsets = offsets * self.codebook_size
        return ids + offsets

    def forward(self, ids, class_ids):
        return self.forward_logits(ids, class_ids)


def ar_loss(model, ids, class_ids, class_dropout_prob=0.0, generator=None):
    '''Mean next-token cross-entropy over all M + G positions.

    With probability `class_dropout_prob` a sequence's class is replaced
    by the null class.
    '''
    if class_dropout_prob > 0:
        drop = torch.rand(class_ids.shape[0], generator=generator) < class_dropout_prob
        class_ids = torch.where(drop.to(class_ids.device),
                                torch.full_like(class_ids, model.null_class), class_ids)
    logits = model.forward_logits(ids, class_ids)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                           model.targets(ids).reshape(-1))


def guide_logits(cond, uncond, scale):
    '''uncond + scale * (cond - uncond); scale 1 returns cond unchanged.'''
    if scale == 1:
        return cond.clone()
    return uncond + scale * (cond - uncond)


def sample_next(logits, temperature=1.0, top_k=0, generator=None):
    '''Draw one index per row; temperature 0 is argmax.'''
    if temperature == 0:
        return logits.argmax(dim=-1)
    logits = logits / temperature
    if top_k:
        kth = torch.topk(logits, min(top_k, logits.shape[-1]), dim=-1).values[..., -1:]
        logits = logits.masked_fill(logits < kth, float('-inf'))
    probs = logits.softmax(dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


def generate(model, class_ids, cfg_scale=1.0, temperature=1.0, top_k=0, generator=None,
             fixed_ids=None, fixed_mask=None):
    '''Sample complete token sequences.

    Parameters
    ----------
    model : ARModel

    class_ids : torch.LongTensor, B
        Classes in [0, num_classes).

    cfg_scale : float
        Guidance scale s >= 1; s = 1 skips the unconditional pass.

    fixed_ids, fixed_mask : torch.Tensor, B x L, optional
        Positions where `fixed_mask` is set are copied from `fixed_ids` and
        never sampled.

    Returns
    -------
    ids : torch.LongTensor, B x L
        Raw ids; the first M are holistic, the rest patch.
    '''
    if cfg_scale < 1:
        raise ValidationError('cfg_scale must be >= 1')
    model.check_classes(class_ids, allow_null=False)

    b, length, n = class_ids.shape[0], model.seq_len, model.codebook_size
    seq = torch.zeros(b, length, dtype=torch.long)
    null = torch.full_like(class_ids, model.null_class)
    guided = cfg_scale != 1

    model.eval()
    with torch.no_grad():
        for t in range(length):
            if fixed_mask is not None and bool(fixed_mask[:, t].all()):
                seq[:, t] = fixed_ids[:, t]
                continue

            prefix = seq[:, :t]
            if guided:
                both = model.next_logits(torch.cat([prefix, prefix]), torch.cat([class_ids, null]))
                cond, uncond = both[:b], both[b:]
                logits = guide_logits(cond, uncond, cfg_scale)
                logits = model.mask_segments(logits[:, None], torch.tensor([t]))[:, 0]
            else:
                logits = model.next_logits(prefix, class_ids)

            index = sample_next(logits, temperature, top_k, generator)
            raw = index - n if t >= model.num_holistic else index
            if fixed_mask is not None:
                raw = torch.where(fixed_mask[:, t], fixed_ids[:, t], raw)
            seq[:, t] = raw
    return seq
