"""Synthetic desk-scale benchmark, ROC metrics and the noise ablation."""

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._validation import ContractError
from .anomaly_map import SmoothingSpec, anomap, image_score
from .corruption import CorruptionConfig, corrupt
from .imageio import read_pnm, write_pnm
from .training import TrainSchedule, substream, train


class UndefinedMetricError(ValueError):
    """AUROC requested for data containing a single class."""


def auroc(scores, labels):
    """Mann-Whitney AUROC with ties counted 1/2 (midranks)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, gt, per_image=False):
    """Pixel-level AUROC over pooled pixels (or averaged per image).

    With ``per_image=True`` images lacking either class are skipped.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    gt = [np.asarray(g) > 0 for g in gt]
    if len(maps) != len(gt):
        raise ContractError("maps and masks differ in number")
    if not per_image:
        return auroc(np.concatenate([m.ravel() for m in maps]),
                     np.concatenate([g.ravel() for g in gt]))
    vals = [auroc(m, g) for m, g in zip(maps, gt) if 0 < g.sum() < g.size]
    if not vals:
        raise UndefinedMetricError("no image contains both pixel classes")
    return float(np.mean(vals))


@dataclass
class LabeledSample:
    image: np.ndarray
    label: int
    gt_mask: np.ndarray
    clean: np.ndarray = field(default=None, repr=False)


def heldout_corruption():
    """Held-out corruption ranges, disjoint from the training defaults."""
    return CorruptionConfig(
        area_min=0.01, area_max=0.2,
        ellipse_count=(1, 1), ellipse_radius=(0.19, 0.24),
        elastic_amplitude=(4.5, 6.0),
        curve_prob=0.5, curve_count=(1, 1), curve_length=(0.65, 0.8),
        curve_thickness=(5, 5),
        noise_cell=(18.0, 28.0), stripe_period=(14.0, 24.0),
        octave_weights=(1.0, 0.3),
        texture_kinds=("noise", "stripes"),
        opacity=(0.5, 0.9), opaque_prob=0.5,
        noise_max=0.0, clean_prob=0.0)


@dataclass(frozen=True)
class BenchmarkConfig:
    size: int = 64
    channels: int = 1
    n_train: int = 200
    n_test: int = 100
    anomaly_fraction: float = 0.5
    period: float = 8.0
    orientation: float = 0.5
    contrast: float = 0.25
    brightness_jitter: float = 0.05
    grain: float = 0.02
    train_corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    test_corruption: CorruptionConfig = field(default_factory=heldout_corruption)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def normal_image(rng, cfg):
    """One sample of the normal class: a jittered grating with fine grain."""
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    arg = 2 * np.pi * (xx * np.cos(cfg.orientation) + yy * np.sin(cfg.orientation)) / cfg.period
    base = 0.5 + rng.uniform(-1.0, 1.0) * cfg.brightness_jitter
    img = base + cfg.contrast * np.sin(arg + phase)
    img = img + cfg.grain * rng.standard_normal((n, n))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], cfg.channels, axis=2)


def synth_dataset(cfg, seed):
    """Training images (normal only) and a labeled test set.

    Test anomalies are drawn with ``cfg.test_corruption`` from a random
    stream that no training corruption uses.
    """
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise ContractError("dataset counts must be >= 1")
    train_rng = substream(seed, "bench-train")
    normal_rng = substream(seed, "bench-test-normal")
    anomaly_rng = substream(seed, "bench-test-anomaly")
    train_set = [normal_image(train_rng, cfg) for _ in range(cfg.n_train)]
    n_anom = int(round(cfg.n_test * cfg.anomaly_fraction))
    test = []
    for i in range(cfg.n_test):
        x = normal_image(normal_rng, cfg)
        if i < n_anom:
            x_hat, m = corrupt(x, cfg.test_corruption, anomaly_rng)
            gt = (m > 0).astype(np.float64)
            test.append(LabeledSample(x_hat, 1, gt, clean=x))
        else:
            test.append(LabeledSample(x, 0, np.zeros((cfg.size, cfg.size)), clean=x))
    return train_set, test


@dataclass
class MetricsReport:
    i_auroc: float
    p_auroc: float
    scores: list
    labels: list
    degenerate: bool = False
    config_digest: str = ""
    seed: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["i_auroc", repr(self.i_auroc)])
            w.writerow(["p_auroc", repr(self.p_auroc)])
            w.writerow(["degenerate", int(self.degenerate)])
            w.writerow(["config_digest", self.config_digest])
            w.writerow(["seed", self.seed])
            w.writerow([])
            w.writerow(["index", "label", "score"])
            for i, (lab, s) in enumerate(zip(self.labels, self.scores)):
                w.writerow([i, lab, repr(float(s))])


def _safe_auroc(fn, *args):
    try:
        return fn(*args), False
    except UndefinedMetricError:
        return 0.5, True


def evaluate(params, test, kind="mse", spec=SmoothingSpec(), reduction="sum",
             config_digest="", seed=0, return_maps=False, per_image=False):
    """Anomaly maps, image scores and both AUROCs for a test set.

    ``params`` is anything with a ``forward`` method on flat vectors. A
    metric whose inputs are all tied is reported as 0.5 and flags the
    report as degenerate.
    """
    maps = [anomap(s.image, params, kind, spec) for s in test]
    scores = [image_score(m, reduction) for m in maps]
    labels = [int(s.label) for s in test]
    i_val, i_deg = _safe_auroc(auroc, scores, labels)
    p_val, p_deg = _safe_auroc(pixel_auroc, maps, [s.gt_mask for s in test], per_image)
    flat = np.concatenate([m.ravel() for m in maps])
    degenerate = i_deg or p_deg or bool(np.all(flat == flat[0]))
    report = MetricsReport(i_val, p_val, scores, labels, degenerate, config_digest, seed)
    return (report, maps) if return_maps else report


@dataclass
class AblationReport:
    seeds: list
    with_noise: list
    without_noise: list

    @property
    def mean_with(self):
        return float(np.mean(self.with_noise))

    @property
    def mean_without(self):
        return float(np.mean(self.without_noise))

    @property
    def spread_with(self):
        return float(np.std(self.with_noise))

    @property
    def spread_without(self):
        return float(np.std(self.without_noise))

    @property
    def improvement(self):
        return self.mean_with - self.mean_without

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "p_auroc_with_noise", "p_auroc_without_noise", "improvement"])
            for s, a, b in zip(self.seeds, self.with_noise, self.without_noise):
                w.writerow([s, repr(a), repr(b), repr(a - b)])
            w.writerow(["mean", repr(self.mean_with), repr(self.mean_without),
                        repr(self.improvement)])
            w.writerow(["std", repr(self.spread_with), repr(self.spread_without), ""])


def run_benchmark(bench, net_config, schedule, seed, kind="mse",
                  spec=SmoothingSpec(), reduction="sum"):
    """Generate data for ``seed``, train, evaluate; returns (params, report)."""
    train_set, test = synth_dataset(bench, seed)
    sched = TrainSchedule(**{**asdict(schedule), "seed": seed})
    params, _ = train(train_set, net_config, bench.train_corruption, sched)
    report = evaluate(params, test, kind, spec, reduction, bench.digest(), seed)
    return params, report


def _arm_job(args):
    bench, net_config, schedule, seed, kind, spec = args
    return run_benchmark(bench, net_config, schedule, seed, kind, spec)[1].p_auroc


def ablation(bench, net_config, schedule, seeds, noise_max=None, kind="mse",
             spec=SmoothingSpec(), workers=1):
    """P-AUROC with noise (``noise_max``) and without (``0``) per seed.

    Runs are independent; with ``workers > 1`` they execute in separate
    processes and the results are identical to a sequential run.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ContractError("ablation needs at least two seeds")
    r = bench.train_corruption.noise_max if noise_max is None else noise_max
    jobs = []
    for sigma in (r, 0.0):
        b = BenchmarkConfig(**{**_shallow(bench),
                               "train_corruption": bench.train_corruption.replace(noise_max=sigma)})
        jobs += [(b, net_config, schedule, s, kind, spec) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(_arm_job, jobs))
    else:
        vals = [_arm_job(j) for j in jobs]
    return AblationReport(seeds, vals[:len(seeds)], vals[len(seeds):])


def _shallow(dc):
    return {f: getattr(dc, f) for f in dc.__dataclass_fields__}


def _ext(img):
    return ".ppm" if img.ndim == 3 and img.shape[2] == 3 else ".pgm"


def export_dataset(train_set, test, directory):
    """Write images and masks as PNM files plus ``train_index.csv`` and
    ``test_index.csv`` (columns ``path,label,mask_path``, relative paths)."""
    for sub in ("train", "test"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    with open(os.path.join(directory, "train_index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path"])
        for i, img in enumerate(train_set):
            rel = f"train/train_{i:04d}{_ext(img)}"
            write_pnm(os.path.join(directory, rel), img)
            w.writerow([rel])
    with open(os.path.join(directory, "test_index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "mask_path"])
        for i, s in enumerate(test):
            rel = f"test/test_{i:04d}{_ext(s.image)}"
            mrel = f"test/mask_{i:04d}.pgm"
            write_pnm(os.path.join(directory, rel), s.image)
            write_pnm(os.path.join(directory, mrel), s.gt_mask)
            w.writerow([rel, s.label, mrel])


def load_index(path):
    """Labeled samples from an index CSV; an empty mask path means all-normal."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_pnm(os.path.join(base, row["path"]))
            label = int(row.get("label") or 0)
            mpath = row.get("mask_path") or ""
            if mpath:
                gt = (read_pnm(os.path.join(base, mpath))[:, :, 0] > 0).astype(np.float64)
            else:
                gt = np.zeros(img.shape[:2])
            if label != int(gt.any()):
                raise ContractError(f"{path}: label of {row['path']} disagrees with its mask")
            samples.append(LabeledSample(img, label, gt))
    return samples
