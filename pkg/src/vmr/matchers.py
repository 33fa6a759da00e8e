"""Cross-modal matching heads and the end-to-end scoring model.

Two heads are provided. CMI runs one activation-free convolution over the
intervened moment tensor and fuses with the query by element-wise product and
sum before a joint projection. TCN fuses first (query times cell feature) and
runs a rectified multi-layer 2D CNN over the fused tensor. Both end in a
sigmoid, so with the expected location effect added per cell, one forward pass
realizes sigma(E_l[f]) under the NWGM approximation.

Model modes: 'dcm' (disentangle + intervene), 'baseline' (raw moment features,
positive-pair training only), 'blind' (cells replaced by positional codes of
their own span; never reads clip features).
"""

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import VideoSample, Vocabulary
from .disentangle import Disentangler
from .encoders import MomentEncoder, QueryEncoder, positional_bank, resample_clips
from .grid import MomentGrid, grid_for_video
from .intervention import Intervention

MODES = ("dcm", "baseline", "blind")
HEADS = ("cmi", "tcn")


def transform_inputs(q: torch.Tensor, content: torch.Tensor, location: torch.Tensor,
                     w2: nn.Linear, w3: nn.Linear):
    """q_bar = W3 q; v_bar = content + W2 location."""
    return w3(q), content + w2(location)


class CmiHead(nn.Module):
    """Single activation-free conv over the moment tensor, then joint fusion."""

    def __init__(self, d: int, kernel_size: int = 3, w1_bias: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(d, d, kernel_size, padding=kernel_size // 2, bias=False)
        self.conv.to(memory_format=torch.channels_last)
        self.w1 = nn.Linear(2 * d, d, bias=w1_bias)
        self.w = nn.Parameter(torch.zeros(d))

    def forward(self, q_bar: torch.Tensor, tensor: torch.Tensor, mask: torch.Tensor):
        """q_bar (B, d); tensor (B, d, T, T) of per-cell v_bar + E; mask (T, T) bool."""
        x = tensor * mask[None, None]
        phi = self.conv(x.contiguous(memory_format=torch.channels_last))
        phi = phi.permute(0, 2, 3, 1)  # (B, T, T, d)
        qb = q_bar[:, None, None, :]
        fused = torch.cat([qb * phi, qb + phi], dim=-1)
        logits = self.w1(fused) @ self.w
        scores = torch.sigmoid(logits) * mask[None]
        return scores, logits


class TcnHead(nn.Module):
    """Element-wise query fusion, then a rectified stack of 2D convolutions."""

    def __init__(self, d: int, num_layers: int = 3, kernel_size: int = 5,
                 relu: bool = True, conv_bias: bool = True):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(d, d, kernel_size, padding=kernel_size // 2, bias=conv_bias)
            for _ in range(num_layers))
        for conv in self.convs:
            conv.to(memory_format=torch.channels_last)
        self.relu = relu
        self.w = nn.Parameter(torch.zeros(d))

    def forward(self, q_bar: torch.Tensor, tensor: torch.Tensor, mask: torch.Tensor):
        h = (tensor * q_bar[:, :, None, None]).contiguous(memory_format=torch.channels_last)
        for conv in self.convs:
            h = conv(h * mask[None, None])
            if self.relu:
                torch.relu_(h)
        logits = h.permute(0, 2, 3, 1) @ self.w
        scores = torch.sigmoid(logits) * mask[None]
        return scores, logits


@dataclass
class ModelOutput:
    scores: torch.Tensor  # (B, T, T), 0 at invalid cells
    logits: torch.Tensor  # (B, T, T), unmasked
    content: torch.Tensor = None  # (B, N, d) when disentangling ran
    location: torch.Tensor = None  # (B, N, d) when disentangling ran
    mask: torch.Tensor = None  # (T, T) bool


class MatchModel(nn.Module):
    def __init__(self, vocab_size: int, d: int, num_clips: int, feature_dim: int,
                 word_dim: int = 300, head: str = "tcn", mode: str = "dcm",
                 prior_mode: str = "absorbed", no_loc_feat: bool = False,
                 no_interv: bool = False, no_disent: bool = False,
                 cmi_kernel: int = 3, tcn_kernel: int = 5, tcn_layers: int = 3,
                 tcn_relu: bool = True, w1_bias: bool = False,
                 max_period: float = 10000.0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {head!r}")
        self.d, self.num_clips, self.feature_dim = d, num_clips, feature_dim
        self.mode, self.head_name, self.max_period = mode, head, max_period
        self.no_loc_feat, self.no_interv, self.no_disent = no_loc_feat, no_interv, no_disent
        self.query_encoder = QueryEncoder(vocab_size, d, word_dim=word_dim)
        self.moment_encoder = MomentEncoder(feature_dim, d)
        self.disentangler = Disentangler(d)
        self.intervention = Intervention(d, prior_mode=prior_mode)
        self.w2 = nn.Linear(d, d, bias=False)
        self.w3 = nn.Linear(d, d, bias=False)
        if head == "cmi":
            self.head = CmiHead(d, kernel_size=cmi_kernel, w1_bias=w1_bias)
        else:
            self.head = TcnHead(d, num_layers=tcn_layers, kernel_size=tcn_kernel, relu=tcn_relu)
        self.vocab = None  # attach a Vocabulary before encoding raw tokens

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor,
                clips: torch.Tensor, pos_bank: torch.Tensor, grid: MomentGrid) -> ModelOutput:
        """clips (B, T, f); pos_bank (B, N, d) positional codes per candidate."""
        dtype, device = pos_bank.dtype, pos_bank.device
        mask_b = torch.from_numpy(grid.valid_mask).to(device=device)
        ai, bi = grid.candidate_indices()
        mask = mask_b.to(dtype)
        q = self.query_encoder(token_ids, lengths)
        q_bar = self.w3(q)
        content = location = None

        if self.mode == "blind":
            cell_feats = pos_bank
        else:
            tensor_v = self.moment_encoder(clips, grid)
            cells = tensor_v[:, :, ai, bi].transpose(1, 2)  # (B, N, d)
            if self.mode == "baseline":
                cell_feats = cells
            else:
                if self.no_disent:
                    # without disentangling the confounder set falls back to
                    # positional codes of the raw candidate spans
                    bank = pos_bank
                    v_bar = cells
                    att_content = cells
                else:
                    content, location = self.disentangler(cells)
                    bank = location
                    att_content = content
                    v_bar = content if self.no_loc_feat else content + self.w2(location)
                if self.no_interv:
                    cell_feats = v_bar
                else:
                    cell_feats = v_bar + self.intervention(q, att_content, bank, self.w2)

        B, N, d = cell_feats.shape
        tensor = cell_feats.new_zeros((B, grid.num_clips, grid.num_clips, d))
        tensor[:, ai, bi] = cell_feats
        scores, logits = self.head(q_bar, tensor.permute(0, 3, 1, 2), mask)
        return ModelOutput(scores=scores, logits=logits, content=content,
                           location=location, mask=mask_b)


def relu_expectation_gap(values: torch.Tensor, weights: torch.Tensor) -> float:
    """Diagnostic |E[relu(x)] - relu(E[x])| for the rectifier/expectation swap.

    values (N, d) are per-location effects, weights (N,) their distribution.
    Reported, never asserted: the TCN head moves the expectation inside its
    rectifiers, which is exact only for a linear head.
    """
    e_relu = (weights[:, None] * torch.relu(values)).sum(0)
    relu_e = torch.relu((weights[:, None] * values).sum(0))
    return float((e_relu - relu_e).abs().mean())


def _param_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2s(f"{seed}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def init_parameters(model: nn.Module, seed: int):
    """Uniform fan-in init for all weights, zero biases; per-name seeding makes
    each parameter's draw independent of module registration order."""
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            gen = torch.Generator().manual_seed(_param_seed(seed, name))
            if name.endswith("embedding.weight"):
                p.copy_(torch.empty_like(p).uniform_(-0.1, 0.1, generator=gen))
                p[0].zero_()  # padding row
            elif "bias" in name:
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else p.shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
    return model


def encode_tokens(vocab: Vocabulary, token_seqs, device=None):
    """Pad a batch of token sequences to (B, L) ids plus a length vector."""
    ids = [vocab.encode(t) for t in token_seqs]
    L = max(len(i) for i in ids)
    out = torch.zeros((len(ids), L), dtype=torch.long, device=device)
    for r, seq in enumerate(ids):
        out[r, :len(seq)] = torch.tensor(seq, dtype=torch.long)
    lengths = torch.tensor([len(i) for i in ids], dtype=torch.long)
    return out, lengths


def predict(model: MatchModel, query_tokens, video: VideoSample, dtype=torch.float32) -> np.ndarray:
    """Score one (query, video) pair; returns the (T, T) map with 0 at invalid cells."""
    if model.vocab is None:
        raise RuntimeError("model has no vocabulary attached")
    grid = grid_for_video(model.num_clips, video.duration)
    clips = resample_clips(video.clip_features, model.num_clips)
    token_ids, lengths = encode_tokens(model.vocab, [tuple(query_tokens)])
    bank = positional_bank(grid, model.d, model.max_period)
    with torch.no_grad():
        out = model(token_ids, lengths,
                    torch.as_tensor(clips, dtype=dtype).unsqueeze(0),
                    torch.as_tensor(bank, dtype=dtype).unsqueeze(0), grid)
    return out.scores[0].numpy()
