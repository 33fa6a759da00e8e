"""End-to-end experiment pipeline: configuration, (method x seed) cells,
IID + OOD evaluation rounds, persistence, and aggregation.

A cell trains one method on one seed's data, evaluates it on the IID test
split, then on each OOD round. Cells are independent and may run as worker
processes (VMR_NUM_WORKERS). All randomness is derived from the cell seed, so
a fixed config yields a byte-identical metrics.json.
"""

import json
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .data import (BiasSpec, DEFAULT_OBJECTS, DEFAULT_VERBS, GenerateConfig,
                   generate_dataset, load_annotations)
from .evaluation import (MetricsRecord, bias_heatmap, evaluate, filter_long_moments,
                         ood_transform, predict_split, save_heatmap_csv, save_heatmap_png)
from .tensorio import attach_features
from .training import TrainConfig, train, write_trace

BASE_METHODS = {
    "freq_prior": None,
    "blind": ("tcn", "blind"),
    "cmi": ("cmi", "baseline"),
    "cmi_dcm": ("cmi", "dcm"),
    "tcn": ("tcn", "baseline"),
    "tcn_dcm": ("tcn", "dcm"),
}

ABLATION_FLAGS = ("no_disent", "no_indep", "no_recon", "no_loc_feat", "no_counterf", "no_interv")


def _bias_from_json(doc: dict) -> BiasSpec:
    doc = dict(doc or {})
    kind = doc.pop("kind", "head_biased")
    verbs = tuple(doc.pop("verbs", DEFAULT_VERBS))
    if kind == "head_biased":
        return BiasSpec.head_biased(verbs, **doc)
    if kind == "verb_correlated":
        return BiasSpec.verb_correlated(verbs, **doc)
    if kind == "explicit":
        probs = {v: tuple(p) for v, p in doc.pop("region_probs").items()}
        return BiasSpec(verb_vocab=verbs, region_probs=probs, **doc)
    raise ValueError(f"unknown bias kind {kind!r}")


def _bias_to_json(spec: BiasSpec) -> dict:
    return {"kind": "explicit", "verbs": list(spec.verb_vocab),
            "region_probs": {v: list(p) for v, p in sorted(spec.region_probs.items())},
            "region_edges": list(spec.region_edges), "duration_mean": spec.duration_mean,
            "duration_sigma": spec.duration_sigma, "head_bias": spec.head_bias}


def _generate_from_json(doc: dict) -> GenerateConfig:
    doc = dict(doc or {})
    bias = _bias_from_json(doc.pop("bias", {}))
    known = {f.name for f in fields(GenerateConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown synthetic-data fields: {sorted(unknown)}")
    if "object_vocab" in doc:
        doc["object_vocab"] = tuple(doc["object_vocab"])
    if "duration_range" in doc:
        doc["duration_range"] = tuple(doc["duration_range"])
    return GenerateConfig(bias=bias, **doc)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    synthetic: GenerateConfig = None
    annotations: dict = None  # {"train": path, "val": path, "test": path}
    features_dir: str = None
    annotation_format: str = "canonical-json"
    methods: tuple = ("tcn", "tcn_dcm")
    ablations: tuple = ()
    ood_rhos: tuple = (10.0, 15.0)
    seeds: tuple = (0,)
    thresholds: tuple = (0.5, 0.7)
    ood_exclude_long: bool = False
    save_checkpoints: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.synthetic is None and self.annotations is None:
            object.__setattr__(self, "synthetic", GenerateConfig(bias=BiasSpec.head_biased()))
        for label in self.cell_labels():
            _parse_label(label)

    def cell_labels(self) -> list:
        labels = list(self.methods)
        for a in self.ablations:
            labels.append(a if ":" in a else f"tcn_dcm:{a}")
        return labels

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        train = TrainConfig(**doc.pop("train", {}))
        synthetic = None
        annotations = doc.pop("annotations", None)
        if "synthetic" in doc:
            synthetic = _generate_from_json(doc.pop("synthetic"))
        for key in ("methods", "ablations", "ood_rhos", "seeds", "thresholds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment config fields: {sorted(unknown)}")
        return cls(train=train, synthetic=synthetic, annotations=annotations, **doc)

    def to_json(self) -> dict:
        doc = {"train": asdict(self.train),
               "methods": list(self.methods), "ablations": list(self.ablations),
               "ood_rhos": list(self.ood_rhos), "seeds": list(self.seeds),
               "thresholds": list(self.thresholds),
               "ood_exclude_long": self.ood_exclude_long,
               "save_checkpoints": self.save_checkpoints,
               "annotation_format": self.annotation_format}
        if self.synthetic is not None:
            sy = asdict(self.synthetic)
            sy["bias"] = _bias_to_json(self.synthetic.bias)
            sy["object_vocab"] = list(self.synthetic.object_vocab)
            sy["duration_range"] = list(self.synthetic.duration_range)
            doc["synthetic"] = sy
        if self.annotations is not None:
            doc["annotations"] = dict(self.annotations)
            doc["features_dir"] = self.features_dir
        return doc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_json(json.load(fh))


def _parse_label(label: str):
    base, _, flag = label.partition(":")
    if base not in BASE_METHODS:
        raise ValueError(f"unknown method {base!r}; expected one of {sorted(BASE_METHODS)}")
    if flag:
        if flag not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation flag {flag!r}; expected one of {ABLATION_FLAGS}")
        if BASE_METHODS[base] is None or BASE_METHODS[base][1] != "dcm":
            raise ValueError(f"ablation {flag!r} applies to dcm methods only, got {base!r}")
    return base, flag or None


def cell_train_config(cfg: ExperimentConfig, label: str, seed: int) -> TrainConfig:
    base, flag = _parse_label(label)
    head, mode = BASE_METHODS[base]
    tc = replace(cfg.train, head=head, mode=mode, seed=seed)
    if flag == "no_indep":
        tc = replace(tc, lambda2=0.0)
    elif flag == "no_recon":
        tc = replace(tc, lambda1=0.0)
    elif flag is not None:
        tc = replace(tc, **{flag: True})
    return tc


def load_splits(cfg: ExperimentConfig, seed: int) -> dict:
    """Per-seed synthetic generation, or one fixed load of real annotation files."""
    if cfg.synthetic is not None:
        return generate_dataset(cfg.synthetic, seed)
    splits = {}
    for name, path in cfg.annotations.items():
        split = load_annotations(path, cfg.annotation_format)
        if cfg.features_dir:
            attach_features(split, cfg.features_dir)
        splits[name] = split
    return splits


def environment_fingerprint() -> dict:
    import torch
    return {"python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__, "platform": sys.platform,
            "machine": platform.machine(), "vmr": __version__}


def _evaluate_rounds(predict_fn, test_split, cfg: ExperimentConfig, seed: int) -> list:
    """IID metrics plus one record per OOD round; predict_fn(split) -> (preds, gts, durs)."""
    records = []
    preds, gts, durs = predict_fn(test_split)
    records.append(evaluate(preds, gts, cfg.thresholds, split_tag="iid"))
    for i, rho in enumerate(cfg.ood_rhos):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x00D, i]))
        shifted = ood_transform(test_split, rho, rng)
        preds, gts, durs = predict_fn(shifted)
        if cfg.ood_exclude_long:
            preds, gts, durs = filter_long_moments(preds, gts, durs)
        records.append(evaluate(preds, gts, cfg.thresholds, split_tag=f"ood-{i + 1}"))
    return records


def run_cell(cfg: ExperimentConfig, label: str, seed: int, out_dir=None,
             quiet: bool = True, with_heatmap: bool = False) -> dict:
    """Train/fit one method on one seed and evaluate it on every split tag."""
    splits = load_splits(cfg, seed)
    result = {"method": label, "seed": seed, "status": "ok", "error": None,
              "records": [], "trace": [], "best_epoch": None, "skipped_negatives": 0}
    if with_heatmap:
        result["heatmap"] = bias_heatmap(splits["train"], cfg.train.num_clips).tolist()
    if label == "freq_prior":
        prior = FreqPriorCell(cfg)
        prior.fit(splits["train"])
        records = _evaluate_rounds(prior.predict_split, splits["test"], cfg, seed)
    else:
        tc = cell_train_config(cfg, label, seed)
        tr = train(tc, splits, quiet=quiet)
        result["trace"] = tr.trace
        result["best_epoch"] = tr.best_epoch
        result["skipped_negatives"] = tr.skipped_negatives
        if out_dir and cfg.save_checkpoints:
            from .training import save_checkpoint
            ck_dir = os.path.join(out_dir, "checkpoints")
            os.makedirs(ck_dir, exist_ok=True)
            save_checkpoint(os.path.join(ck_dir, f"{label.replace(':', '-')}__s{seed}.ckpt"),
                            tr.model, tc, tr.best_epoch, rng_state=tr.rng_state)
        records = _evaluate_rounds(
            lambda split: predict_split(tr.model, split, tc), splits["test"], cfg, seed)
    result["records"] = [r.to_json() for r in records]
    return result


class FreqPriorCell:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.prior = None

    def fit(self, train_split):
        from .evaluation import FreqPrior
        self.prior = FreqPrior.fit(train_split, self.cfg.train.num_clips)

    def predict_split(self, split):
        preds, gts = self.prior.predict_split(split)
        durs = [s.duration for s, _, _ in split.annotation_pairs()]
        return preds, gts, durs


def _cell_job(args):
    cfg_doc, label, seed, with_heatmap, out_dir = args
    import torch
    workers = int(os.environ.get("VMR_NUM_WORKERS", "1"))
    if workers > 1:
        torch.set_num_threads(max(1, (os.cpu_count() or 1) // workers))
    cfg = ExperimentConfig.from_json(cfg_doc)
    try:
        return run_cell(cfg, label, seed, out_dir=out_dir, with_heatmap=with_heatmap)
    except Exception as e:  # cell failures are recorded, not fatal
        return {"method": label, "seed": seed, "status": "error",
                "error": f"{type(e).__name__}: {e}\n{traceback.format_exc()}",
                "records": [], "trace": [], "best_epoch": None, "skipped_negatives": 0}


@dataclass
class ExperimentReport:
    config: dict
    environment: dict
    cells: list
    aggregates: list = field(default_factory=list)

    @property
    def status(self) -> str:
        states = [c["status"] for c in self.cells]
        if all(s == "ok" for s in states):
            return "ok"
        return "failed" if all(s == "error" for s in states) else "partial"

    def metrics_cells(self):
        for cell in self.cells:
            for rec in cell["records"]:
                yield cell["method"], cell["seed"], MetricsRecord.from_json(rec)

    def find(self, method: str, seed: int, split_tag: str) -> MetricsRecord:
        for m, s, rec in self.metrics_cells():
            if (m, s, rec.split_tag) == (method, seed, split_tag):
                return rec
        raise KeyError(f"no cell ({method}, {seed}, {split_tag})")

    def trace(self, method: str, seed: int) -> list:
        for cell in self.cells:
            if cell["method"] == method and cell["seed"] == seed:
                return cell["trace"]
        raise KeyError(f"no cell ({method}, {seed})")


def compute_aggregates(cells, thresholds) -> list:
    """Mean and population std across seeds per (method, split_tag)."""
    by_key = {}
    for cell in cells:
        if cell["status"] != "ok":
            continue
        for rec_doc in cell["records"]:
            rec = MetricsRecord.from_json(rec_doc)
            by_key.setdefault((cell["method"], rec.split_tag), []).append(rec)
    out = []
    for (method, tag), recs in sorted(by_key.items()):
        mious = np.array([r.miou for r in recs])
        agg = {"method": method, "split_tag": tag, "n_seeds": len(recs),
               "miou_mean": float(mious.mean()), "miou_std": float(mious.std())}
        for m in thresholds:
            vals = np.array([r.r1_at[float(m)] for r in recs])
            agg[f"r1@{m:g}_mean"] = float(vals.mean())
            agg[f"r1@{m:g}_std"] = float(vals.std())
        out.append(agg)
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, quiet: bool = True) -> ExperimentReport:
    labels = cfg.cell_labels()
    jobs = []
    for seed in cfg.seeds:
        for k, label in enumerate(labels):
            jobs.append((cfg.to_json(), label, seed, k == 0, out_dir))
    workers = int(os.environ.get("VMR_NUM_WORKERS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        cells = []
        for job in jobs:
            if not quiet:
                print(f"[cell] method={job[1]} seed={job[2]}", flush=True)
            cells.append(_cell_job(job))
    cells.sort(key=lambda c: (c["method"], c["seed"]))
    report = ExperimentReport(config=cfg.to_json(), environment=environment_fingerprint(),
                              cells=cells,
                              aggregates=compute_aggregates(cells, cfg.thresholds))
    if out_dir:
        write_report(report, out_dir)
    return report


# -- persistence -----------------------------------------------------------------


def _metrics_payload(report: ExperimentReport) -> dict:
    cells = [{k: v for k, v in cell.items() if k not in ("trace", "heatmap")}
             for cell in report.cells]
    return {"config": report.config, "environment": report.environment,
            "cells": cells, "aggregates": report.aggregates}


def write_report(report: ExperimentReport, out_dir):
    """metrics.json + per-seed CSV + traces + heatmaps + plain-text summary.

    metrics.json carries no timestamps, so identical runs write identical bytes.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(_metrics_payload(report), fh, sort_keys=True, indent=1)

    thresholds = report.config.get("thresholds", [0.5, 0.7])
    with open(os.path.join(out_dir, "cells.csv"), "w") as fh:
        heads = [f"r1@{m:g}" for m in thresholds]
        fh.write(",".join(["method", "seed", "split_tag", "miou"] + heads + ["n_queries"]) + "\n")
        for method, seed, rec in report.metrics_cells():
            r1 = [repr(rec.r1_at[float(m)]) for m in thresholds]
            fh.write(",".join([method, str(seed), rec.split_tag, repr(rec.miou)]
                              + r1 + [str(rec.n_queries)]) + "\n")

    traces_dir = os.path.join(out_dir, "traces")
    os.makedirs(traces_dir, exist_ok=True)
    for cell in report.cells:
        if cell["trace"]:
            name = f"{cell['method'].replace(':', '-')}__s{cell['seed']}.csv"
            write_trace(cell["trace"], os.path.join(traces_dir, name))

    heat_dir = os.path.join(out_dir, "heatmaps")
    for cell in report.cells:
        if "heatmap" in cell:
            os.makedirs(heat_dir, exist_ok=True)
            counts = np.asarray(cell["heatmap"])
            base = os.path.join(heat_dir, f"train_seed{cell['seed']}")
            save_heatmap_csv(counts, base + ".csv")
            save_heatmap_png(counts, base + ".png",
                             title=f"train annotations, seed {cell['seed']}")

    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(format_summary(report))


def format_summary(report: ExperimentReport) -> str:
    lines = [f"status: {report.status}", ""]
    thresholds = report.config.get("thresholds", [0.5, 0.7])
    header = f"{'method':28s} {'split':7s} {'mIoU':>14s}" + "".join(
        f" {'R@1>' + format(m, 'g'):>14s}" for m in thresholds)
    lines.append(header)
    lines.append("-" * len(header))
    for agg in report.aggregates:
        row = (f"{agg['method']:28s} {agg['split_tag']:7s} "
               f"{agg['miou_mean']:7.4f}±{agg['miou_std']:.4f}")
        for m in thresholds:
            row += f" {agg[f'r1@{m:g}_mean']:7.4f}±{agg[f'r1@{m:g}_std']:.4f}"
        lines.append(row)
    errors = [c for c in report.cells if c["status"] != "ok"]
    if errors:
        lines.append("")
        lines.append("failed cells:")
        for c in errors:
            first = (c["error"] or "").splitlines()[0] if c["error"] else "unknown"
            lines.append(f"  {c['method']} seed={c['seed']}: {first}")
    return "\n".join(lines) + "\n"


def load_report(path) -> ExperimentReport:
    """Read metrics.json back; verifies aggregates match the per-seed rows."""
    if os.path.isdir(path):
        path = os.path.join(path, "metrics.json")
    with open(path) as fh:
        doc = json.load(fh)
    report = ExperimentReport(config=doc["config"], environment=doc["environment"],
                              cells=doc["cells"], aggregates=doc["aggregates"])
    thresholds = report.config.get("thresholds", [0.5, 0.7])
    recomputed = compute_aggregates(report.cells, thresholds)
    for a, b in zip(recomputed, report.aggregates):
        for k, v in a.items():
            w = b[k]
            if isinstance(v, float) and not (abs(v - w) <= 1e-12):
                raise ValueError(f"aggregate mismatch on {k}: {v} vs {w}")
            if not isinstance(v, float) and v != w:
                raise ValueError(f"aggregate mismatch on {k}: {v} vs {w}")
    return report
