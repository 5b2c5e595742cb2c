"""Pre-norm transformer blocks shared by the tokenizer and the AR model.

Attention is written out explicitly (no fused kernel) so that a causal
mask yields exactly zero weight, and exactly zero gradient, on future
positions.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

MLP_RATIO = 4


def causal_mask(length, device=None):
    '''Boolean L x L mask, True where attention is forbidden.'''
    return torch.ones(length, length, dtype=torch.bool, device=device).triu(1)


class Attention(nn.Module):
    def __init__(self, dim, num_heads, dropout=0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, causal=False, rotary=None):
        b, length, dim = x.shape
        qkv = self.qkv(x).reshape(b, length, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)

        if rotary is not None:
            q, k = rotary(q), rotary(k)

        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        if causal:
            scores = scores.masked_fill(causal_mask(length, x.device), float('-inf'))
        weights = self.dropout(scores.softmax(dim=-1))

        out = torch.matmul(weights, v).transpose(1, 2).reshape(b, length, dim)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, MLP_RATIO * dim)
        self.fc2 = nn.Linear(MLP_RATIO * dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(F.gelu(self.fc1(x))))


class Block(nn.Module):
    def __init__(self, dim, num_heads, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dropout)

    def forward(self, x, causal=False, rotary=None):
        x = x + self.attn(self.norm1(x), causal=causal, rotary=rotary)
        return x + self.mlp(self.norm2(x))


class Transformer(nn.Module):
    '''A stack of pre-norm blocks; no final norm, so zeroed output
    projections make the stack an exact identity.'''

    def __init__(self, dim, depth, num_heads, dropout=0.0):
        super().__init__()
        self.blocks = nn.ModuleList([Block(dim, num_heads, dropout) for _ in range(depth)])

    def forward(self, x, causal=False, rotary=None):
        for block in self.blocks:
            x = block(x, causal=causal, rotary=rotary)
        return x
