"""Backdoor adjustment over the in-video location confounder set.

The confounder set is the bank of disentangled location vectors of all moment
candidates. For a (query, candidate) pair, scaled dot-product attention places
weights on every bank entry and the expectation of the location effect is the
attention-weighted sum of the projected bank. In 'absorbed' mode the uniform
location prior is treated as absorbed into those weights; 'literal' mode
multiplies the summed output by 1/N as well.
"""

import math

import torch
import torch.nn as nn

from .grid import MomentGrid

PRIOR_MODES = ("absorbed", "literal")


def build_location_bank(moment_tensor: torch.Tensor, grid: MomentGrid, disentangler) -> torch.Tensor:
    """Row k = g_l(v_k) for the k-th valid candidate; (B, N, d), candidate_list order."""
    ai, bi = grid.candidate_indices()
    cells = moment_tensor[:, :, ai, bi].transpose(1, 2)  # (B, N, d)
    _, location = disentangler(cells)
    return location


def location_attention(m: torch.Tensor, keys: torch.Tensor, values: torch.Tensor):
    """Scaled dot-product attention of queries m over the bank.

    m (..., d); keys, values (N, d) or broadcastable (..., N, d).
    Returns (weights over N, weighted sum of values).
    """
    d = m.shape[-1]
    logits = (m.unsqueeze(-2) * keys).sum(-1) / math.sqrt(d)  # (..., N)
    weights = torch.softmax(logits, dim=-1)
    out = (weights.unsqueeze(-1) * values).sum(-2)  # (..., d)
    return weights, out


class Intervention(nn.Module):
    """Computes the expected location effect E_l[h_qv(l)] against a location bank."""

    def __init__(self, d: int, prior_mode: str = "absorbed"):
        super().__init__()
        if prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {prior_mode!r}")
        self.w5 = nn.Linear(d, d, bias=False)
        self.w6 = nn.Linear(d, d, bias=False)
        self.w7 = nn.Linear(d, d, bias=False)
        self.prior_mode = prior_mode

    def forward(self, q: torch.Tensor, content: torch.Tensor, bank: torch.Tensor,
                w2: nn.Linear) -> torch.Tensor:
        """q (B, d); content (B, N, d) per candidate; bank (B, N, d). Returns (B, N, d).

        w2 is the shared location map also used in the matcher's v_bar; the bank
        is projected through it to form the attention values.
        """
        if bank.shape[-2] == 0:
            raise ValueError("location bank is empty")
        m = self.w5(q).unsqueeze(-2) + self.w6(content)  # (B, N, d)
        keys = self.w7(bank)  # (B, N, d)
        values = w2(bank)  # (B, N, d)
        logits = m @ keys.transpose(-1, -2) / math.sqrt(q.shape[-1])  # (B, N, N)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ values
        if self.prior_mode == "literal":
            out = out / bank.shape[-2]
        return out


def expected_location_effect(q: torch.Tensor, content: torch.Tensor, bank: torch.Tensor,
                             intervention: Intervention, w2: nn.Linear) -> torch.Tensor:
    """Single-pair form: q (d,), content (d,), bank (N, d) -> (d,)."""
    out = intervention(q.unsqueeze(0), content.unsqueeze(0).unsqueeze(0), bank.unsqueeze(0), w2)
    return out[0, 0]
