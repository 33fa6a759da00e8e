"""Query, moment, and location encoders.

Queries go through trainable token embeddings and a three-layer unidirectional
LSTM; the final top-layer hidden state is the query vector. Moments are encoded
by stacked max pooling over projected clip features into a d x T x T tensor.
Locations get a fixed sinusoidal embedding of their (start, end) timestamps.
"""

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from .grid import MomentGrid, TemporalInterval


def positional_embedding(loc: TemporalInterval, d: int, max_period: float = 10000.0) -> np.ndarray:
    """Non-learnable d-dim sinusoidal code of (start, end); entries in [-1, 1].

    Each timestamp gets d/2 dims of interleaved (sin, cos) pairs; pair i uses
    angular frequency max_period^(-2i/(d/2)).
    """
    if d % 4 != 0:
        raise ValueError(f"embedding dimension must be divisible by 4, got {d}")
    return _sinusoid(np.array([[loc.start, loc.end]]), d, max_period)[0]


def _sinusoid(ts: np.ndarray, d: int, max_period: float) -> np.ndarray:
    """(n, 2) timestamp pairs -> (n, d) codes."""
    half = d // 2
    freqs = max_period ** (-2.0 * np.arange(half // 2) / half)  # (half/2,)
    out = np.empty((ts.shape[0], d), dtype=np.float64)
    for k in range(2):
        angles = ts[:, k:k + 1] * freqs  # (n, half/2)
        block = out[:, k * half:(k + 1) * half]
        block[:, 0::2] = np.sin(angles)
        block[:, 1::2] = np.cos(angles)
    return out


def positional_bank(grid: MomentGrid, d: int, max_period: float = 10000.0) -> np.ndarray:
    """(N, d) positional codes for every candidate, in candidate_list order."""
    if d % 4 != 0:
        raise ValueError(f"embedding dimension must be divisible by 4, got {d}")
    ai, bi = grid.candidate_indices()
    ts = np.stack([ai * grid.clip_duration, (bi + 1) * grid.clip_duration], axis=1)
    return _sinusoid(ts, d, max_period)


def resample_clips(features: np.ndarray, num_clips: int) -> np.ndarray:
    """Fixed-interval selection of num_clips rows; identity when counts match."""
    n = features.shape[0]
    if n == num_clips:
        return features
    idx = np.minimum((np.arange(num_clips) + 0.5) * n // num_clips, n - 1).astype(np.int64)
    return features[idx]


class QueryEncoder(nn.Module):
    """Token embedding + 3-layer unidirectional LSTM; returns the last hidden state."""

    def __init__(self, vocab_size: int, d: int, word_dim: int = 300, num_layers: int = 3):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, word_dim, padding_idx=0)
        self.lstm = nn.LSTM(word_dim, d, num_layers=num_layers, batch_first=True)
        self.d = d

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """token_ids (B, L) padded with 0; lengths (B,) true lengths. Returns (B, d)."""
        if token_ids.numel() == 0 or int(lengths.min()) < 1:
            raise ValueError("queries must contain at least one token")
        emb = self.embedding(token_ids)
        packed = pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        return h_n[-1]

    def load_pretrained(self, path):
        """Rows of 'word v1 ... vK' update matching embedding rows; returns hit count."""
        vocab = getattr(self, "token_index", None)
        if vocab is None:
            raise RuntimeError("attach token_index (token -> row) before loading vectors")
        hits = 0
        dim = self.embedding.embedding_dim
        with open(path) as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    continue
                row = vocab.get(parts[0])
                if row is None:
                    continue
                with torch.no_grad():
                    self.embedding.weight[row] = torch.tensor(
                        [float(x) for x in parts[1:]], dtype=self.embedding.weight.dtype)
                hits += 1
        return hits


def stacked_max_pool(clips: torch.Tensor) -> torch.Tensor:
    """(B, T, d) clip features -> (B, T, T, d) where cell (a, b) = max over clips a..b.

    Column b reuses column b-1: pool(a, b) = max(pool(a, b-1), clip b), so the
    whole map costs O(T^2) element-wise maxima.
    """
    B, T, d = clips.shape
    cols = []
    prev = None  # (B, b, d): rows a < b of the previous column
    for b in range(T):
        xb = clips[:, b:b + 1]
        col = xb if prev is None else torch.cat([torch.maximum(prev, xb), xb], dim=1)
        cols.append(nn.functional.pad(col, (0, 0, 0, T - 1 - b)))
        prev = col
    return torch.stack(cols, dim=2)  # (B, T, T, d), zeros below the diagonal


class MomentEncoder(nn.Module):
    """Project clips to d, stack-pool every span, project again: (B, d, T, T)."""

    def __init__(self, feature_dim: int, d: int):
        super().__init__()
        self.in_proj = nn.Linear(feature_dim, d)
        self.out_proj = nn.Linear(d, d)
        self.d = d

    def forward(self, clips: torch.Tensor, grid: MomentGrid) -> torch.Tensor:
        B, T, f = clips.shape
        if T != grid.num_clips:
            raise ValueError(f"clip count {T} does not match grid T={grid.num_clips}")
        if f != self.in_proj.in_features:
            raise ValueError(f"feature dim {f} does not match encoder dim {self.in_proj.in_features}")
        pooled = stacked_max_pool(self.in_proj(clips))
        out = self.out_proj(pooled)
        mask = torch.from_numpy(grid.valid_mask).to(out.device)
        out = out * mask[None, :, :, None]
        return out.permute(0, 3, 1, 2)
