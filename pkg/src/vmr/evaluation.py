"""Metrics, the OOD testing transform, bias-exploiting reference predictors,
and bias/length analyses.

R@1(IoU>m) counts queries whose top-1 IoU strictly exceeds m; mIoU averages
the top-1 IoU. OOD testing prepends rho seconds of standard-normal clip
features to each test video and shifts every annotation by exactly rho,
changing the location distribution while preserving the matching relationship.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DatasetSplit, VideoSample
from .encoders import positional_bank, resample_clips
from .grid import TemporalInterval, grid_for_video, iou
from .matchers import MatchModel, encode_tokens

DEFAULT_THRESHOLDS = (0.5, 0.7)


@dataclass
class MetricsRecord:
    r1_at: dict  # IoU threshold -> fraction
    miou: float
    n_queries: int
    split_tag: str = "iid"

    def to_json(self) -> dict:
        return {"r1_at": {repr(float(k)): v for k, v in sorted(self.r1_at.items())},
                "miou": self.miou, "n_queries": self.n_queries, "split_tag": self.split_tag}

    @classmethod
    def from_json(cls, doc) -> "MetricsRecord":
        return cls(r1_at={float(k): v for k, v in doc["r1_at"].items()},
                   miou=doc["miou"], n_queries=doc["n_queries"], split_tag=doc["split_tag"])


def _as_gt_lists(gts):
    return [g if isinstance(g, (list, tuple)) else [g] for g in gts]


def top1_ious(predictions, gts) -> np.ndarray:
    """Per-query IoU of the prediction against its best-matching ground truth."""
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions vs {len(gts)} ground truths")
    return np.array([max(iou(p, g) for g in gs)
                     for p, gs in zip(predictions, _as_gt_lists(gts))])


def evaluate(predictions, gts, thresholds=DEFAULT_THRESHOLDS, split_tag="iid") -> MetricsRecord:
    ious = top1_ious(predictions, gts)
    r1 = {float(m): float(np.mean(ious > m)) for m in thresholds}
    return MetricsRecord(r1_at=r1, miou=float(ious.mean()), n_queries=len(ious),
                         split_tag=split_tag)


# -- model inference over a split ----------------------------------------------


def score_pairs(model: MatchModel, token_seqs, clip_batch, bank_batch, grid,
                dtype=torch.float32, token_ids=None, lengths=None) -> np.ndarray:
    if token_ids is None:
        token_ids, lengths = encode_tokens(model.vocab, token_seqs)
    with torch.no_grad():
        out = model(token_ids, lengths,
                    torch.as_tensor(clip_batch, dtype=dtype),
                    torch.as_tensor(bank_batch, dtype=dtype), grid)
    return out.scores.numpy()


def argmax_interval(score_map: np.ndarray, grid_duration: float) -> TemporalInterval:
    """Best valid cell of a (T, T) map, as a concrete interval of the video."""
    T = score_map.shape[0]
    g = grid_for_video(T, grid_duration)
    masked = np.where(g.valid_mask, score_map, -np.inf)
    flat = int(np.argmax(masked))
    return g.cell_interval(flat // T, flat % T)


def top1_intervals_prepared(model, prep, grid, dtype=torch.float32, batch_size=128,
                            with_scores=False):
    """Top-1 predictions for a prepared split (see training.prepare_split)."""
    preds, top_scores = [], []
    n = len(prep.tokens)
    model.eval()
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        scores = score_pairs(model, None, prep.clips[idx], prep.banks[idx], grid, dtype,
                             token_ids=prep.token_ids[idx], lengths=prep.lengths[idx])
        for k, i in enumerate(idx):
            preds.append(argmax_interval(scores[k], prep.durations[i]))
            top_scores.append(float(scores[k].max()))
    return (preds, top_scores) if with_scores else preds


def predict_split(model: MatchModel, split: DatasetSplit, cfg, batch_size=128,
                  with_scores=False):
    """(predictions, gts, durations) of every annotation pair in the split."""
    from .training import prepare_split
    from .grid import enumerate_candidates
    prep = prepare_split(split, cfg, model.vocab)
    grid = enumerate_candidates(cfg.num_clips)
    out = top1_intervals_prepared(model, prep, grid, cfg.dtype, batch_size,
                                  with_scores=with_scores)
    if with_scores:
        preds, scores = out
        return preds, prep.gts, list(prep.durations), scores
    return out, prep.gts, list(prep.durations)


# -- OOD transform ---------------------------------------------------------------


def ood_transform(split: DatasetSplit, rho: float, rng: np.random.Generator,
                  where: str = "begin") -> DatasetSplit:
    """Insert rho seconds of standard-normal clips; annotations shift by exactly rho.

    where="begin" (the protocol used everywhere) prepends and shifts every
    annotation; where="end" appends, leaving annotations untouched
    (experimental, not part of the acceptance protocol).
    """
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    if where not in ("begin", "end"):
        raise ValueError(f"where must be 'begin' or 'end', got {where!r}")
    if rho == 0:
        return split
    shift = rho if where == "begin" else 0.0
    out = []
    for s in split.samples:
        anns = [(tokens, TemporalInterval(iv.start + shift, iv.end + shift))
                for tokens, iv in s.annotations]
        feats = s.clip_features
        if feats is not None:
            row_dur = s.duration / feats.shape[0]
            k = max(1, int(round(rho / row_dur)))
            noise = rng.standard_normal((k, feats.shape[1])).astype(feats.dtype)
            parts = [noise, feats] if where == "begin" else [feats, noise]
            feats = np.concatenate(parts, axis=0)
        out.append(VideoSample(video_id=s.video_id, duration=s.duration + rho,
                               clip_features=feats, annotations=anns))
    return DatasetSplit(name=f"{split.name}-ood", samples=out)


# -- bias-exploiting reference predictors ---------------------------------------


@dataclass
class FreqPrior:
    """Query-independent predictor scoring cells by training-annotation frequency."""

    counts: np.ndarray
    num_clips: int
    scores: np.ndarray = field(init=False)

    def __post_init__(self):
        total = self.counts.sum()
        self.scores = self.counts / total if total else self.counts.astype(np.float64)

    @classmethod
    def fit(cls, train: DatasetSplit, num_clips: int) -> "FreqPrior":
        if len(train) == 0:
            raise ValueError("freq prior needs a non-empty training split")
        counts = np.zeros((num_clips, num_clips), dtype=np.int64)
        for s, _, interval in train.annotation_pairs():
            a, b = grid_for_video(num_clips, s.duration).best_cell(interval)
            counts[a, b] += 1
        return cls(counts=counts, num_clips=num_clips)

    def score_map(self) -> np.ndarray:
        return self.scores

    def predict(self, duration: float) -> TemporalInterval:
        return argmax_interval(self.scores, duration)

    def predict_split(self, split: DatasetSplit):
        preds, gts = [], []
        for s, _, interval in split.annotation_pairs():
            preds.append(self.predict(s.duration))
            gts.append(interval)
        return preds, gts


def blind_score(model: MatchModel, query_tokens, duration: float) -> np.ndarray:
    """Score map of a blind matcher; depends on the query and duration only."""
    if model.mode != "blind":
        raise ValueError("blind_score requires a model built in blind mode")
    from .matchers import predict
    dummy = VideoSample(video_id="_", duration=duration,
                        clip_features=np.zeros((model.num_clips, model.feature_dim),
                                               dtype=np.float32))
    return predict(model, query_tokens, dummy)


# -- bias and length analyses -----------------------------------------------------


def bias_heatmap(split: DatasetSplit, num_clips: int) -> np.ndarray:
    """(T, T) counts of annotations mapped to their highest-IoU cell."""
    counts = np.zeros((num_clips, num_clips), dtype=np.int64)
    for s, _, interval in split.annotation_pairs():
        a, b = grid_for_video(num_clips, s.duration).best_cell(interval)
        counts[a, b] += 1
    return counts


def save_heatmap_csv(counts: np.ndarray, path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(counts.tolist())


def save_heatmap_png(counts: np.ndarray, path, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(counts, cmap="viridis")
    ax.set_xlabel("end clip")
    ax.set_ylabel("start clip")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_predictions_csv(path, query_ids, intervals, scores):
    """Per-query top-1 predictions: query_id, start, end, score."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "start", "end", "score"])
        for qid, iv, sc in zip(query_ids, intervals, scores):
            writer.writerow([qid, repr(float(iv.start)), repr(float(iv.end)),
                             repr(float(sc))])


def load_predictions_csv(path):
    query_ids, intervals, scores = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for qid, s, e, sc in reader:
            query_ids.append(qid)
            intervals.append(TemporalInterval(float(s), float(e)))
            scores.append(float(sc))
    return query_ids, intervals, scores


def normalized_lengths(gts, durations) -> np.ndarray:
    firsts = [gs[0] for gs in _as_gt_lists(gts)]
    return np.array([g.length / d for g, d in zip(firsts, durations)])


def filter_long_moments(predictions, gts, durations, max_norm_length=0.5):
    """Drop queries whose (first) annotation spans >= max_norm_length of the video."""
    keep = normalized_lengths(gts, durations) < max_norm_length
    sel = lambda xs: [x for x, k in zip(xs, keep) if k]
    return sel(predictions), sel(gts), sel(durations)


def length_report(predictions, gts, durations, bin_edges=(0.2, 0.4, 0.6, 0.8),
                  thresholds=DEFAULT_THRESHOLDS):
    """Per-length-bin metrics plus each bin's share of the queries.

    Bins partition (0, 1] of normalized moment length at the given edges.
    """
    norm = normalized_lengths(gts, durations)
    edges = [0.0] + list(bin_edges) + [1.0]
    rows = []
    n = len(norm)
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (norm > lo) & (norm <= hi)
        share = float(mask.sum()) / n if n else 0.0
        if mask.any():
            rec = evaluate([p for p, m in zip(predictions, mask) if m],
                           [g for g, m in zip(gts, mask) if m],
                           thresholds, split_tag=f"len({lo:.2g},{hi:.2g}]")
        else:
            rec = MetricsRecord(r1_at={float(m): float("nan") for m in thresholds},
                                miou=float("nan"), n_queries=0,
                                split_tag=f"len({lo:.2g},{hi:.2g}]")
        rows.append({"lo": lo, "hi": hi, "share": share, "metrics": rec})
    return rows
