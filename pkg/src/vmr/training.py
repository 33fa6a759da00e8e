"""Losses, counterfactual negative sampling, the optimization loop, and
finite-difference gradient verification.

The objective is L = L_bce(positive) + L_bce(counterfactual) + lambda1 * recon
+ lambda2 * dcor, averaged over a training batch. Counterfactual pairs match a
query with a video whose annotations share no content with it, supervised with
all-zero labels. Baseline and blind modes train on the positive term alone.
"""

import hashlib
import json
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .data import DatasetSplit, Vocabulary, content_key
from .disentangle import distance_correlation, recon_loss
from .encoders import positional_bank, resample_clips
from .grid import enumerate_candidates, grid_for_video, scaled_labels
from .matchers import MatchModel, encode_tokens, init_parameters

EPS_SCORE = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    d: int = 512
    num_clips: int = 16
    feature_dim: int = 32
    word_dim: int = 300
    lambda1: float = 1.0
    lambda2: float = 0.001
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    prior_mode: str = "absorbed"
    head: str = "tcn"
    mode: str = "dcm"
    t_min: float = 0.5
    t_max: float = 1.0
    no_loc_feat: bool = False
    no_interv: bool = False
    no_disent: bool = False
    no_counterf: bool = False
    precision: str = "single"
    max_period: float = 10000.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be single or double, got {self.precision!r}")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double" else torch.float32


def build_model(cfg: TrainConfig, vocab: Vocabulary, **head_overrides) -> MatchModel:
    model = MatchModel(
        vocab_size=len(vocab), d=cfg.d, num_clips=cfg.num_clips,
        feature_dim=cfg.feature_dim, word_dim=cfg.word_dim, head=cfg.head,
        mode=cfg.mode, prior_mode=cfg.prior_mode, no_loc_feat=cfg.no_loc_feat,
        no_interv=cfg.no_interv, no_disent=cfg.no_disent,
        max_period=cfg.max_period, **head_overrides)
    init_parameters(model, cfg.seed)
    model.vocab = vocab
    model.query_encoder.token_index = vocab.index
    return model.to(cfg.dtype)


def bce_loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over valid cells of -(y log s + (1-y) log(1-s)); batch maps averaged.

    labels carry a negative sentinel at invalid cells; scores are clamped to
    [EPS_SCORE, 1 - EPS_SCORE].
    """
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: scores {tuple(scores.shape)} vs labels {tuple(labels.shape)}")
    valid = labels >= 0
    s = scores.clamp(EPS_SCORE, 1.0 - EPS_SCORE)
    y = labels.clamp_min(0.0)
    per_cell = -(y * torch.log(s) + (1.0 - y) * torch.log1p(-s)) * valid
    n_valid = valid.sum(dim=(-1, -2)).clamp_min(1)
    per_map = per_cell.sum(dim=(-1, -2)) / n_valid
    return per_map.mean()


class NegativeSampler:
    """Uniform draws of counterfactual videos that share no content with the query."""

    def __init__(self, split: DatasetSplit):
        keys_per_video = [frozenset(content_key(t) for t, _ in s.annotations)
                          for s in split.samples]
        self._eligible = {}
        all_keys = set().union(*keys_per_video) if keys_per_video else set()
        for key in all_keys:
            self._eligible[key] = np.array(
                [i for i, ks in enumerate(keys_per_video) if key not in ks], dtype=np.int64)
        self.skipped = 0

    def draw(self, query_tokens, rng: np.random.Generator):
        """Index of a negative video for the query, or None when none exists."""
        pool = self._eligible.get(content_key(query_tokens))
        if pool is None or len(pool) == 0:
            self.skipped += 1
            warnings.warn("no eligible counterfactual video for query; pair skipped")
            return None
        return int(pool[rng.integers(len(pool))])


def sample_counterfactual(batch_tokens, split: DatasetSplit, rng: np.random.Generator,
                          sampler: NegativeSampler = None):
    """Negative video index per query in the batch (None where ineligible)."""
    if len(split.samples) < 2:
        raise ValueError("counterfactual sampling needs a corpus of at least 2 videos")
    sampler = sampler or NegativeSampler(split)
    return [sampler.draw(tokens, rng) for tokens in batch_tokens]


@dataclass
class LossTerms:
    bce_pos: torch.Tensor
    bce_neg: torch.Tensor
    recon: torch.Tensor
    dcor: torch.Tensor
    lambda1: float
    lambda2: float

    def total(self) -> torch.Tensor:
        for name in ("bce_pos", "bce_neg", "recon", "dcor"):
            t = getattr(self, name)
            if not torch.isfinite(t):
                raise TrainingError(f"non-finite loss term {name!r}: {float(t.detach())}")
        loss = self.bce_pos + self.bce_neg
        # zero-weighted terms stay out of the graph so a pathological backward
        # cannot leak NaN through a 0 * grad product
        if self.lambda1 > 0:
            loss = loss + self.lambda1 * self.recon
        if self.lambda2 > 0:
            loss = loss + self.lambda2 * self.dcor
        return loss


@dataclass
class _PreparedSplit:
    """Per-pair tensors shared across epochs (features, labels, codes)."""

    tokens: list
    token_ids: torch.Tensor  # (P, L) padded, long
    lengths: torch.Tensor  # (P,) long
    clips: np.ndarray  # (P, T, f) float32
    labels: np.ndarray  # (P, T, T) float32, -1 at invalid
    banks: np.ndarray  # (P, N, d) float32 positional codes
    durations: np.ndarray
    gts: list
    video_index: np.ndarray  # pair -> sample index


def prepare_split(split: DatasetSplit, cfg: TrainConfig, vocab: Vocabulary = None) -> _PreparedSplit:
    T = cfg.num_clips
    tokens, clips, labels, banks, durations, gts, vidx = [], [], [], [], [], [], []
    for i, s in enumerate(split.samples):
        feats = resample_clips(s.clip_features, T)
        g = grid_for_video(T, s.duration)
        bank = positional_bank(g, cfg.d, cfg.max_period).astype(np.float32)
        for toks, iv in s.annotations:
            tokens.append(toks)
            clips.append(feats)
            labels.append(scaled_labels(iv, g, cfg.t_min, cfg.t_max).astype(np.float32))
            banks.append(bank)
            durations.append(s.duration)
            gts.append(iv)
            vidx.append(i)
    vocab = vocab or Vocabulary.from_split(split)
    token_ids, lengths = encode_tokens(vocab, tokens)
    return _PreparedSplit(tokens=tokens, token_ids=token_ids, lengths=lengths,
                          clips=np.stack(clips), labels=np.stack(labels),
                          banks=np.stack(banks), durations=np.asarray(durations),
                          gts=gts, video_index=np.asarray(vidx, dtype=np.int64))


def _batch_inputs(prep: _PreparedSplit, idx, dtype):
    clips = torch.from_numpy(prep.clips[idx]).to(dtype)
    banks = torch.from_numpy(prep.banks[idx]).to(dtype)
    return prep.token_ids[idx], prep.lengths[idx], clips, banks


def compute_losses(model: MatchModel, grid, cfg: TrainConfig, prep: _PreparedSplit,
                   idx: np.ndarray, neg_video: list = None,
                   neg_clips: np.ndarray = None, neg_banks: np.ndarray = None) -> LossTerms:
    """One fused forward over positive (and optional counterfactual) pairs."""
    dtype = next(model.parameters()).dtype
    token_ids, lengths, clips, banks = _batch_inputs(prep, idx, dtype)
    labels = torch.from_numpy(prep.labels[idx]).to(dtype)
    B = len(idx)

    n_neg = 0
    if neg_video is not None:
        keep = [k for k, j in enumerate(neg_video) if j is not None]
        n_neg = len(keep)
        if n_neg:
            token_ids = torch.cat([token_ids, prep.token_ids[idx[keep]]])
            lengths = torch.cat([lengths, prep.lengths[idx[keep]]])
            sel = [neg_video[k] for k in keep]
            clips = torch.cat([clips, torch.from_numpy(neg_clips[sel]).to(dtype)])
            banks = torch.cat([banks, torch.from_numpy(neg_banks[sel]).to(dtype)])

    out = model(token_ids, lengths, clips, banks, grid)
    zero = clips.new_zeros(())
    bce_pos = bce_loss(out.scores[:B], labels)
    if n_neg:
        neg_labels = torch.where(out.mask, zero, -torch.ones_like(out.scores[:n_neg]))
        bce_neg = bce_loss(out.scores[B:], neg_labels)
    else:
        bce_neg = zero

    rec = zero
    dcor = zero
    if out.location is not None:
        pos_bank_target = banks[:B]
        rec = recon_loss(out.location[:B], pos_bank_target).mean()
        ai, bi = grid.candidate_indices()
        cell_labels = labels[:, ai, bi]
        sel = cell_labels >= 0.5
        if int(sel.sum()) >= 2:
            loc_rows, con_rows = out.location[:B][sel], out.content[:B][sel]
            if cfg.lambda2 <= 0:  # traced only, keep it out of the graph
                loc_rows, con_rows = loc_rows.detach(), con_rows.detach()
            dcor = distance_correlation(loc_rows, con_rows)
    lam1 = cfg.lambda1 if out.location is not None else 0.0
    lam2 = cfg.lambda2 if out.location is not None else 0.0
    return LossTerms(bce_pos=bce_pos, bce_neg=bce_neg, recon=rec, dcor=dcor,
                     lambda1=lam1, lambda2=lam2)


@dataclass
class TrainResult:
    model: MatchModel
    config: TrainConfig
    trace: list
    best_epoch: int
    best_val_miou: float
    skipped_negatives: int
    best_state: dict = field(repr=False, default=None)
    rng_state: dict = field(repr=False, default=None)


def _val_miou(model, prep: _PreparedSplit, grid, cfg, batch_size=128) -> float:
    from .evaluation import evaluate, top1_intervals_prepared
    preds = top1_intervals_prepared(model, prep, grid, cfg.dtype, batch_size)
    return evaluate(preds, prep.gts, thresholds=(0.5,)).miou


def train(cfg: TrainConfig, splits: dict, quiet: bool = True) -> TrainResult:
    """Deterministic training given (config, data); returns the best-on-validation model."""
    train_split = splits["train"]
    val_split = splits.get("val")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261]))

    vocab = Vocabulary.from_split(train_split)
    model = build_model(cfg, vocab)
    grid = enumerate_candidates(cfg.num_clips)
    prep = prepare_split(train_split, cfg, vocab)
    val_prep = (prepare_split(val_split, cfg, vocab)
                if val_split is not None and len(val_split) else None)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    use_negatives = cfg.mode == "dcm" and not cfg.no_counterf
    sampler = NegativeSampler(train_split) if use_negatives else None

    n_pairs = len(prep.tokens)
    trace = []
    best_state, best_epoch, best_val = None, -1, -np.inf
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n_pairs)
        sums = {"l_bce_pos": 0.0, "l_bce_neg": 0.0, "l_recon": 0.0, "l_indep": 0.0, "dcor": 0.0}
        n_steps = 0
        for lo in range(0, n_pairs, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            negs = None
            if use_negatives:
                negs = [sampler.draw(prep.tokens[i], rng) for i in idx]
            terms = compute_losses(model, grid, cfg, prep, idx, neg_video=negs,
                                   neg_clips=prep.clips, neg_banks=prep.banks)
            loss = terms.total()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["l_bce_pos"] += float(terms.bce_pos.detach())
            sums["l_bce_neg"] += float(terms.bce_neg.detach())
            sums["l_recon"] += float(terms.recon.detach()) * terms.lambda1
            sums["l_indep"] += float(terms.dcor.detach()) * terms.lambda2
            sums["dcor"] += (float(terms.dcor.detach())
                             if model.mode == "dcm" and not cfg.no_disent else np.nan)
            n_steps += 1
        row = {"epoch": epoch}
        row.update({k: v / n_steps for k, v in sums.items()})
        row["val_miou"] = _val_miou(model, val_prep, grid, cfg) if val_prep else np.nan
        trace.append(row)
        if not quiet:
            print("  ".join(f"{k}={v:.4g}" for k, v in row.items()))
        if val_prep and row["val_miou"] > best_val:
            best_val = row["val_miou"]
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is None:  # no validation split: keep the final parameters
        best_epoch = cfg.epochs - 1
        best_val = trace[-1]["val_miou"] if trace else np.nan
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    import base64
    rng_state = {"numpy": rng.bit_generator.state,
                 "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()}
    return TrainResult(model=model, config=cfg, trace=trace, best_epoch=best_epoch,
                       best_val_miou=float(best_val),
                       skipped_negatives=sampler.skipped if sampler else 0,
                       best_state=best_state, rng_state=rng_state)


TRACE_COLUMNS = ("epoch", "l_bce_pos", "l_bce_neg", "l_recon", "l_indep", "dcor", "val_miou")


def write_trace(trace: list, path):
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            fh.write(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in TRACE_COLUMNS) + "\n")


def read_trace(path) -> list:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            row = {k: (int(v) if k == "epoch" else float(v)) for k, v in zip(header, vals)}
            rows.append(row)
    return rows


# -- checkpointing ------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: MatchModel, cfg: TrainConfig, epoch: int,
                    rng_state: dict = None):
    """Zip archive: JSON manifest + one raw little-endian float64 block of all params."""
    names, blocks, offsets = [], [], []
    offset = 0
    state = model.state_dict()
    for name in sorted(state):
        arr = state[name].detach().to(torch.float64).numpy()
        blocks.append(arr.astype("<f8").tobytes())
        names.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = {
        "format": "vmr-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "epoch": epoch,
        "vocab": model.vocab.to_list() if model.vocab else None,
        "params": names,
        "rng_state": rng_state,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        zf.writestr("params.bin", b"".join(blocks))


def load_checkpoint(path):
    """Returns (model, config, epoch); the model carries its vocabulary."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("params.bin")
    if manifest.get("format") != "vmr-checkpoint":
        raise ValueError(f"{path} is not a vmr checkpoint")
    cfg = TrainConfig(**manifest["config"])
    vocab = Vocabulary()
    tokens = manifest["vocab"] or []
    vocab.index = {t: i for i, t in enumerate(tokens)}
    model = build_model(cfg, vocab)
    state = {}
    for meta in manifest["params"]:
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=meta["offset"]).reshape(meta["shape"])
        state[meta["name"]] = torch.from_numpy(arr.copy()).to(cfg.dtype)
    model.load_state_dict(state)
    return model, cfg, manifest["epoch"]


# -- gradient verification -----------------------------------------------------


@dataclass
class GradCheckReport:
    groups: dict  # group -> {"max_rel_err", "n_coords", "scale", "connected"}

    @property
    def max_rel_err(self) -> float:
        vals = [g["max_rel_err"] for g in self.groups.values() if g["connected"]]
        return max(vals) if vals else 0.0

    def format(self) -> str:
        lines = [f"{'group':24s} {'max_rel_err':>12s} {'coords':>7s} {'scale':>10s}"]
        for name in sorted(self.groups):
            g = self.groups[name]
            err = f"{g['max_rel_err']:12.3e}" if g["connected"] else "        none"
            lines.append(f"{name:24s} {err} {g['n_coords']:7d} {g['scale']:10.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, model: torch.nn.Module, n_coords: int = 50,
               eps: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Central differences vs autograd on sampled coordinates of each parameter group.

    loss_fn() must rebuild the scalar loss from the model's current parameters.
    The relative error of a group is the max coordinate disagreement normalized
    by the group's gradient magnitude scale. Requires double precision.
    """
    params = dict(model.named_parameters())
    if any(p.dtype != torch.float64 for p in params.values()):
        raise ValueError("grad_check requires a double-precision model")
    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else None)
             for n, p in params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6fd]))

    groups = {}
    by_group = {}
    for name in sorted(params):
        by_group.setdefault(name.split(".")[0], []).append(name)
    for group, names in by_group.items():
        connected = any(grads[n] is not None and float(grads[n].abs().sum()) > 0 for n in names)
        if not connected:
            groups[group] = {"max_rel_err": 0.0, "n_coords": 0, "scale": 0.0, "connected": False}
            continue
        sizes = np.array([params[n].numel() for n in names])
        total = int(sizes.sum())
        take = min(n_coords, total)
        flat_idx = rng.choice(total, size=take, replace=False)
        pairs = []
        bounds = np.cumsum(sizes)
        for fi in sorted(flat_idx):
            which = int(np.searchsorted(bounds, fi, side="right"))
            pairs.append((names[which], int(fi - (bounds[which - 1] if which else 0))))
        worst = 0.0
        scale = 0.0
        with torch.no_grad():
            for name, ci in pairs:
                p = params[name]
                # multi-index assignment works for any memory layout
                coord = tuple(int(c) for c in np.unravel_index(ci, p.shape)) if p.ndim else ()
                orig = float(p[coord]) if p.ndim else float(p)
                h = eps * max(1.0, abs(orig))
                p[coord] = orig + h
                f_plus = float(loss_fn())
                p[coord] = orig - h
                f_minus = float(loss_fn())
                p[coord] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                g = grads[name]
                analytic = float(g[coord]) if g is not None else 0.0
                worst = max(worst, abs(analytic - numeric))
                scale = max(scale, abs(analytic), abs(numeric))
        groups[group] = {"max_rel_err": worst / max(scale, 1e-12), "n_coords": take,
                         "scale": scale, "connected": True}
    return GradCheckReport(groups=groups)


def probe_grad_check(cfg: TrainConfig, splits: dict, n_coords: int = 50,
                     seed: int = 0, warmup_steps: int = 25) -> GradCheckReport:
    """Run grad_check on the full training loss over one small batch.

    A short warm-up moves the model off the symmetric init, where the head
    path's activations (hence gradients) are small enough to drown in
    finite-difference noise.
    """
    cfg = replace(cfg, precision="double")
    vocab = Vocabulary.from_split(splits["train"])
    model = build_model(cfg, vocab)
    grid = enumerate_candidates(cfg.num_clips)
    prep = prepare_split(splits["train"], cfg, vocab)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7261]))
    idx = np.arange(min(len(prep.tokens), cfg.batch_size))
    negs = None
    if cfg.mode == "dcm" and not cfg.no_counterf:
        sampler = NegativeSampler(splits["train"])
        negs = [sampler.draw(prep.tokens[i], rng) for i in idx]

    def loss_fn():
        return compute_losses(model, grid, cfg, prep, idx, neg_video=negs,
                              neg_clips=prep.clips, neg_banks=prep.banks).total()

    if warmup_steps:
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        for _ in range(warmup_steps):
            loss = loss_fn()
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.zero_grad()

    return grad_check(loss_fn, model, n_coords=n_coords, seed=seed)


def param_checksum(model: torch.nn.Module) -> str:
    h = hashlib.blake2s()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()
