"""Synthetic confounded datasets and annotation-file ingestion.

The generator plants two biases seen in real moment-retrieval corpora:
long-tailed temporal locations of annotations and verb-specific location
preferences. Content is made retrievable by adding a (verb, object) signature
vector to the clip features inside the target span, so a matcher *can* solve
the task from content, while a lazy matcher can score well IID from location
alone.
"""

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import TemporalInterval

REGIONS = ("head", "middle", "tail")

DEFAULT_VERBS = ("open", "close", "take", "put", "leave", "enter", "hold", "throw")
DEFAULT_OBJECTS = ("door", "book", "box", "cup", "bag", "window", "phone", "broom")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class ParseError(ValueError):
    """Malformed annotation input; carries the offending line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(ValueError):
    """Annotations inconsistent with their declared videos."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


def tokenize(sentence: str) -> tuple:
    """Lowercase word/punctuation tokens: 'a person sits.' -> (a, person, sits, .)."""
    return tuple(_TOKEN_RE.findall(sentence.lower()))


@dataclass(frozen=True)
class BiasSpec:
    """Generative law for annotation locations.

    region_probs maps each verb to (head, middle, tail) probabilities for the
    region containing the moment's center; region_edges split [0, 1] of the
    video duration into the three regions. Moment length is drawn from a
    normal law expressed as a fraction of video duration. head_bias records
    the marginal probability mass on the head region.
    """

    verb_vocab: tuple
    region_probs: dict
    region_edges: tuple = (1 / 3, 2 / 3)
    duration_mean: float = 0.25
    duration_sigma: float = 0.08
    head_bias: float = 0.8

    def __post_init__(self):
        e1, e2 = self.region_edges
        if not 0.0 < e1 < e2 < 1.0:
            raise ValueError(f"region edges must satisfy 0 < e1 < e2 < 1, got {self.region_edges}")
        for verb in self.verb_vocab:
            if verb not in self.region_probs:
                raise ValueError(f"verb {verb!r} missing from region_probs")
        for verb, probs in self.region_probs.items():
            if len(probs) != 3 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"region probabilities for {verb!r} must be a 3-way distribution, got {probs}")

    @classmethod
    def head_biased(cls, verbs=DEFAULT_VERBS, head_bias=0.8, **kwargs):
        """Every verb places `head_bias` mass on the head region, remainder split evenly."""
        rest = (1.0 - head_bias) / 2.0
        probs = {v: (head_bias, rest, rest) for v in verbs}
        return cls(verb_vocab=tuple(verbs), region_probs=probs, head_bias=head_bias, **kwargs)

    @classmethod
    def verb_correlated(cls, verbs=DEFAULT_VERBS, home_bias=0.8, **kwargs):
        """Verb k prefers region k mod 3, coupling query wording to location."""
        rest = (1.0 - home_bias) / 2.0
        probs = {}
        head_mass = 0.0
        for k, v in enumerate(verbs):
            p = [rest, rest, rest]
            p[k % 3] = home_bias
            probs[v] = tuple(p)
            head_mass += p[0]
        return cls(verb_vocab=tuple(verbs), region_probs=probs,
                   head_bias=head_mass / len(verbs), **kwargs)


def region_of(interval: TemporalInterval, duration: float, edges=(1 / 3, 2 / 3)) -> str:
    """Region containing the interval's center."""
    c = 0.5 * (interval.start + interval.end) / duration
    if c < edges[0]:
        return "head"
    if c < edges[1]:
        return "middle"
    return "tail"


def sample_biased_location(spec: BiasSpec, verb: str, duration: float,
                           rng: np.random.Generator) -> TemporalInterval:
    """Draw an interval whose center falls in the verb's sampled region."""
    if verb not in spec.region_probs:
        raise ValueError(f"unknown verb {verb!r}; not in bias spec vocabulary")
    region = rng.choice(3, p=np.asarray(spec.region_probs[verb], dtype=np.float64))
    edges = (0.0, spec.region_edges[0], spec.region_edges[1], 1.0)
    lo, hi = edges[region] * duration, edges[region + 1] * duration
    center = rng.uniform(lo, hi)
    min_len = max(0.02 * duration, 1e-3)
    length = float(np.clip(duration * rng.normal(spec.duration_mean, spec.duration_sigma),
                           min_len, duration))
    start, end = center - length / 2.0, center + length / 2.0
    if start < 0:
        start, end = 0.0, length
    elif end > duration:
        start, end = duration - length, duration
    return TemporalInterval(start, end)


@dataclass
class VideoSample:
    """One retrievable video: clip features plus (query, moment) annotations."""

    video_id: str
    duration: float
    clip_features: np.ndarray = None  # (n_clips, f) float32, None until features attached
    annotations: list = field(default_factory=list)  # [(tokens, TemporalInterval)]

    def validate(self):
        for tokens, interval in self.annotations:
            if interval.start < 0 or interval.end > self.duration + 1e-9:
                raise ValidationError(
                    f"annotation {interval} outside video {self.video_id} of duration {self.duration}",
                    offenders=[(self.video_id, interval)])
        if self.clip_features is not None and not np.all(np.isfinite(self.clip_features)):
            raise ValidationError(f"non-finite clip features in video {self.video_id}",
                                  offenders=[self.video_id])


@dataclass
class DatasetSplit:
    name: str
    samples: list = field(default_factory=list)

    def __post_init__(self):
        ids = [s.video_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate video ids in split {self.name!r}")

    def __len__(self):
        return len(self.samples)

    def annotation_pairs(self):
        """Flat (sample, tokens, interval) triples over the split."""
        for s in self.samples:
            for tokens, interval in s.annotations:
                yield s, tokens, interval


@dataclass(frozen=True)
class GenerateConfig:
    bias: BiasSpec
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    num_clips: int = 16
    feature_dim: int = 32
    signal_strength: float = 6.0
    noise_sigma: float = 1.0
    location_strength: float = 2.0
    object_vocab: tuple = DEFAULT_OBJECTS
    duration_range: tuple = (24.0, 40.0)
    n_distractors: int = 1

    def __post_init__(self):
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ValueError("split sizes must be >= 1 (val may be 0)")
        if self.signal_strength < 0 or self.location_strength < 0:
            raise ValueError("signal and location strengths must be >= 0")


def content_signature(verb: str, obj: str, feature_dim: int) -> np.ndarray:
    """Deterministic unit feature vector identifying a (verb, object) content."""
    digest = hashlib.blake2s(f"{verb}|{obj}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest, "little")))
    v = rng.standard_normal(feature_dim)
    return (v / np.linalg.norm(v)).astype(np.float64)


_TIME_CODE_PERIOD = 100.0


def time_code(t: float, feature_dim: int) -> np.ndarray:
    """Sinusoidal code of an absolute timestamp; the latent location factor
    entangled into clip features (the confounder's edge into the video side)."""
    half = feature_dim // 2
    freqs = _TIME_CODE_PERIOD ** (-2.0 * np.arange(half) / feature_dim)
    out = np.zeros(feature_dim)
    out[0:2 * half:2] = np.sin(t * freqs)
    out[1:2 * half:2] = np.cos(t * freqs)
    return out


def _clip_span(interval: TemporalInterval, clip_duration: float, num_clips: int):
    """Clip indices with positive overlap against the interval."""
    first = int(np.floor(interval.start / clip_duration))
    last = int(np.ceil(interval.end / clip_duration)) - 1
    return max(first, 0), min(last, num_clips - 1)


def _generate_sample(cfg: GenerateConfig, split_name: str, index: int, seed: int) -> VideoSample:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_TAGS[split_name], index]))
    verbs, objects = cfg.bias.verb_vocab, cfg.object_vocab
    verb = verbs[rng.integers(len(verbs))]
    obj = objects[rng.integers(len(objects))]
    duration = float(rng.uniform(*cfg.duration_range))
    gt = sample_biased_location(cfg.bias, verb, duration, rng)

    T, f = cfg.num_clips, cfg.feature_dim
    clip_dur = duration / T
    feats = rng.normal(0.0, cfg.noise_sigma, size=(T, f))
    if cfg.location_strength > 0:
        for i in range(T):
            feats[i] += cfg.location_strength * time_code((i + 0.5) * clip_dur, f)
    lo, hi = _clip_span(gt, clip_dur, T)
    feats[lo:hi + 1] += cfg.signal_strength * content_signature(verb, obj, f)

    # distractor segments carry other contents at unbiased locations
    for _ in range(cfg.n_distractors):
        while True:
            dv = verbs[rng.integers(len(verbs))]
            do = objects[rng.integers(len(objects))]
            if (dv, do) != (verb, obj):
                break
        dlen = float(np.clip(duration * rng.normal(cfg.bias.duration_mean, cfg.bias.duration_sigma),
                             0.02 * duration, duration))
        dstart = float(rng.uniform(0.0, duration - dlen))
        dlo, dhi = _clip_span(TemporalInterval(dstart, dstart + dlen), clip_dur, T)
        feats[dlo:dhi + 1] += cfg.signal_strength * content_signature(dv, do, f)

    tokens = ("person", verb, obj)
    return VideoSample(video_id=f"{split_name}_{index:05d}", duration=duration,
                       clip_features=feats.astype(np.float32), annotations=[(tokens, gt)])


_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}


def generate_dataset(cfg: GenerateConfig, seed: int) -> dict:
    """Deterministic splits keyed by name; identical (cfg, seed) gives identical bytes."""
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    splits = {}
    for name, n in sizes.items():
        if n == 0:
            continue
        samples = [_generate_sample(cfg, name, i, seed) for i in range(n)]
        splits[name] = DatasetSplit(name=name, samples=samples)
    return splits


class Vocabulary:
    """Token index with reserved padding (0) and unknown (1) entries."""

    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, tokens=()):
        self.index = {self.PAD: 0, self.UNK: 1}
        for t in tokens:
            self.index.setdefault(t, len(self.index))

    @classmethod
    def from_split(cls, split: DatasetSplit):
        seen = []
        for _, tokens, _ in split.annotation_pairs():
            seen.extend(tokens)
        return cls(sorted(set(seen)))

    def __len__(self):
        return len(self.index)

    def encode(self, tokens) -> list:
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty token sequence")
        return [self.index.get(t, 1) for t in tokens]

    def to_list(self) -> list:
        return [t for t, _ in sorted(self.index.items(), key=lambda kv: kv[1])]


def _fmt_float(x: float) -> str:
    # decimal with full precision (17 significant digits round-trips doubles)
    return format(float(x), ".17e")


def save_annotations(split: DatasetSplit, path):
    """Canonical annotation JSON; float fields keep full precision."""
    parts = ['{"videos":[']
    vids = []
    for s in split.samples:
        anns = []
        for tokens, iv in s.annotations:
            anns.append('{"tokens":%s,"start":%s,"end":%s}'
                        % (json.dumps(list(tokens)), _fmt_float(iv.start), _fmt_float(iv.end)))
        vids.append('{"id":%s,"duration":%s,"annotations":[%s]}'
                    % (json.dumps(s.video_id), _fmt_float(s.duration), ",".join(anns)))
    parts.append(",".join(vids))
    parts.append("]}")
    with open(path, "w") as fh:
        fh.write("".join(parts))


def _load_canonical(path) -> DatasetSplit:
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        warnings.warn(f"empty annotation file {path}; returning empty split")
        return DatasetSplit(name="empty")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(str(e), line=e.lineno) from e
    samples, offenders = [], []
    for v in doc.get("videos", []):
        anns = []
        for a in v.get("annotations", []):
            iv = TemporalInterval(float(a["start"]), float(a["end"]))
            if iv.end > float(v["duration"]) + 1e-9:
                offenders.append((v["id"], iv))
            anns.append((tuple(a["tokens"]), iv))
        samples.append(VideoSample(video_id=str(v["id"]), duration=float(v["duration"]),
                                   annotations=anns))
    if offenders:
        raise ValidationError(
            f"{len(offenders)} annotation(s) outside their video duration: {offenders[:5]}",
            offenders=offenders)
    return DatasetSplit(name="loaded", samples=samples)


def _load_charades_text(path) -> DatasetSplit:
    """Lines of the form 'video_id start end##sentence'.

    The format declares no durations, so each video's duration is inferred as
    the max annotated end time.
    """
    by_video = {}
    n_lines = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            n_lines += 1
            if "##" not in line:
                raise ParseError(f"missing '##' separator in {line!r}", line=lineno)
            head, sentence = line.split("##", 1)
            fields = head.split()
            if len(fields) != 3:
                raise ParseError(f"expected 'video_id start end', got {head!r}", line=lineno)
            vid, s, e = fields
            try:
                start, end = float(s), float(e)
            except ValueError:
                raise ParseError(f"non-numeric timestamps in {head!r}", line=lineno) from None
            try:
                iv = TemporalInterval(start, end)
            except ValueError as err:
                raise ParseError(str(err), line=lineno) from None
            by_video.setdefault(vid, []).append((tokenize(sentence), iv))
    if n_lines == 0:
        warnings.warn(f"empty annotation file {path}; returning empty split")
        return DatasetSplit(name="empty")
    samples = [VideoSample(video_id=vid, duration=max(iv.end for _, iv in anns), annotations=anns)
               for vid, anns in by_video.items()]
    return DatasetSplit(name="loaded", samples=samples)


def load_annotations(path, fmt: str = "canonical-json") -> DatasetSplit:
    if fmt == "canonical-json":
        return _load_canonical(path)
    if fmt == "charades-text":
        return _load_charades_text(path)
    raise ValueError(f"unknown annotation format {fmt!r}")


def content_key(tokens) -> tuple:
    """Identity of what a query/annotation is about, for negative-pair eligibility.

    Templated queries are 'person VERB OBJECT'; anything else falls back to the
    full token tuple.
    """
    tokens = tuple(tokens)
    if len(tokens) >= 3 and tokens[0] == "person":
        return tokens[1:3]
    return tokens


def with_samples(split: DatasetSplit, samples) -> DatasetSplit:
    return replace(split, samples=list(samples))
