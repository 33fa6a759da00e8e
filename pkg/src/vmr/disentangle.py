"""Content/location factorization of moment vectors and its two training signals.

A moment vector v is split by two fully connected maps into content g_c(v) and
location g_l(v). The location factor is pulled toward the fixed positional code
of the true span (reconstruction), and the two factors are pushed toward
statistical independence by penalizing their distance correlation over a batch.
"""

import torch
import torch.nn as nn


class Disentangler(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.g_c = nn.Linear(d, d)
        self.g_l = nn.Linear(d, d)

    def forward(self, v: torch.Tensor):
        """(..., d) -> content (..., d), location (..., d)."""
        if v.shape[-1] != self.g_c.in_features:
            raise ValueError(f"expected last dim {self.g_c.in_features}, got {v.shape[-1]}")
        return self.g_c(v), self.g_l(v)


def recon_loss(location: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Euclidean norm ||location - target||_2 over the last dim (not squared)."""
    if location.shape[-1] != target.shape[-1]:
        raise ValueError(f"dimension mismatch: {location.shape[-1]} vs {target.shape[-1]}")
    return torch.linalg.vector_norm(location - target, dim=-1)


_SQRT_GUARD = 1e-12


def _pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)).clamp_min(0.0)
    # +1 on the diagonal keeps sqrt smooth there; the mask restores exact zeros.
    eye = torch.eye(x.shape[0], dtype=x.dtype, device=x.device)
    guarded = torch.sqrt(d2 + _SQRT_GUARD + eye) * (1.0 - eye)
    if not x.requires_grad:
        return torch.sqrt(d2 + eye) * (1.0 - eye)
    # exact forward value, guarded backward: coincident rows (max-pooled moment
    # features genuinely coincide for adjacent candidates) would otherwise give
    # an unbounded sqrt gradient
    exact = torch.sqrt(d2.detach() + eye) * (1.0 - eye)
    return guarded + (exact - guarded.detach())


def _double_center(m: torch.Tensor) -> torch.Tensor:
    return m - m.mean(dim=0, keepdim=True) - m.mean(dim=1, keepdim=True) + m.mean()


def distance_correlation(x: torch.Tensor, y: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Biased-estimator distance correlation of paired rows, in [0, 1].

    dCor = dCov(x, y) / sqrt(dVar(x) * dVar(y) + eps) from doubly centered
    pairwise distance matrices; returns 0 when either dVar falls below eps.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"expected paired 2-d batches, got {tuple(x.shape)} and {tuple(y.shape)}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    a = _double_center(_pairwise_distances(x))
    b = _double_center(_pairwise_distances(y))
    dcov2_xy = (a * b).mean()
    dvar_x = torch.sqrt((a * a).mean())
    dvar_y = torch.sqrt((b * b).mean())
    if float(dvar_x.detach()) < eps or float(dvar_y.detach()) < eps:
        return x.new_zeros(())
    dcov = torch.sqrt(dcov2_xy.clamp_min(0.0))
    return dcov / torch.sqrt(dvar_x * dvar_y + eps)
