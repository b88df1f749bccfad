"""Flat key-value run configuration with a fixed schema.

File format: one ``key = value`` per line, ``#`` starts a comment, blank
lines are ignored. Lists are comma separated. Command-line overrides use
``--key=value`` and win over the file. Unknown keys are rejected.
"""

import os
import re
from dataclasses import dataclass

from ._validation import ContractError
from .anomaly_map import SmoothingSpec
from .corruption import CorruptionConfig
from .evaluation import BenchmarkConfig, heldout_corruption
from .network import conv_autoencoder, dense_autoencoder
from .training import TrainSchedule


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s):
        s = s.strip()
        return tuple(conv(p) for p in s.split(",") if p.strip()) if s else ()
    parse.__name__ = f"list[{conv.__name__}]"
    return parse


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s
    parse.__name__ = "|".join(options)
    return parse


def _str(s):
    return s.strip()


_TRAIN = TrainSchedule()
_CORR = CorruptionConfig()
_BENCH = BenchmarkConfig()

# key -> (parser, default, help)
SCHEMA = {
    # run
    "seed": (int, 0, "root seed; all randomness derives from it"),
    "out": (_str, "run", "output directory"),
    "workers": (int, 1, "worker processes for ablation arms"),
    # data
    "train_dir": (_str, "", "directory of normal PPM/PGM images (empty: synthetic)"),
    "test_index": (_str, "", "test index CSV (path,label,mask_path); empty: synthetic"),
    "size": (int, _BENCH.size, "synthetic image size"),
    "channels": (int, _BENCH.channels, "synthetic image channels"),
    "n_train": (int, _BENCH.n_train, "synthetic training images"),
    "n_test": (int, _BENCH.n_test, "synthetic test images"),
    "anomaly_fraction": (float, _BENCH.anomaly_fraction, "anomalous share of the test set"),
    # gen
    "gen_mode": (_choice("pairs", "benchmark"), "pairs", "what `gen` writes"),
    "count": (int, 8, "number of pairs written by `gen`"),
    # network
    "arch": (_choice("dense", "conv"), "dense", "network family"),
    "hidden": (_list(int), (256,), "dense hidden sizes"),
    "filters": (int, 8, "conv channels"),
    "kernel": (int, 3, "conv kernel size"),
    "depth": (int, 3, "conv layers"),
    "downsample": (int, 0, "strided conv stages"),
    "activation": (_choice("tanh", "sigmoid", "relu", "identity"), "tanh", "hidden activation"),
    "final_activation": (_choice("tanh", "sigmoid", "relu", "identity"), "identity",
                         "output activation"),
    # training
    "steps": (int, 1000, "optimizer steps"),
    "batch_size": (int, _TRAIN.batch_size, "pairs per step"),
    "lr": (float, _TRAIN.lr, "Adam learning rate"),
    "loss": (_choice("fae", "dae", "weighted"), _TRAIN.loss, "training objective"),
    "weight_lambda": (float, _TRAIN.weight_lambda, "corrupted-region weight of the weighted loss"),
    "log_every": (int, _TRAIN.log_every, "loss logging interval"),
    "save_every": (int, 0, "extra checkpoint interval (0: final only)"),
    # corruption
    "area_min": (float, _CORR.area_min, "minimum corrupted area fraction"),
    "area_max": (float, _CORR.area_max, "maximum corrupted area fraction"),
    "elastic_amplitude": (_list(float), _CORR.elastic_amplitude, "warp amplitude range, pixels"),
    "curve_prob": (float, _CORR.curve_prob, "probability of added curves"),
    "opacity": (_list(float), _CORR.opacity, "transparent opacity range"),
    "opaque_prob": (float, _CORR.opaque_prob, "probability of a fully opaque occlusion"),
    "noise_max": (float, _CORR.noise_max, "sigma ~ Uniform(0, noise_max)"),
    "clean_prob": (float, _CORR.clean_prob, "probability of a corruption-free pair"),
    "texture": (_str, _CORR.texture, "'procedural' or a directory of texture images"),
    # detection
    "checkpoint": (_str, "", "checkpoint for eval/verify (default: <out>/model.ckpt)"),
    "delta": (_choice("mse", "ssim", "gms"), "mse", "difference map"),
    "k": (int, SmoothingSpec().k, "mean filter size"),
    "n": (int, SmoothingSpec().n, "mean filter repetitions"),
    "reduction": (_choice("sum", "max"), "sum", "image score reduction"),
    "per_image": (_bool, False, "average pixel AUROC per image instead of pooling"),
    "heatmaps": (_bool, True, "write heatmap PGMs in eval"),
    "dump_maps": (_bool, False, "write raw anomaly maps as CSV in eval"),
    # verify
    "sigmas": (_list(float), (0.01, 0.05, 0.1), "sigma values of the affine checks"),
    "slope_sigmas": (_list(float), (0.2, 0.1, 0.05, 0.025), "sigma values of the slope fit"),
    "samples": (int, 100_000, "antithetic pairs per Monte-Carlo estimate"),
    "n_affine": (int, 20, "random affine networks"),
    "fixture_dim": (int, 4, "dimension of the polynomial fixtures"),
    "net_dim": (int, 16, "dimension of the tanh verification network"),
    # ablate
    "seeds": (_list(int), (0, 1, 2), "seeds of the ablation"),
}

_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key, raw, origin):
    if key not in SCHEMA:
        raise ContractError(f"{origin}: unknown key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ContractError(f"{origin}: bad value for {key!r}: {exc}") from None


def parse_text(text, origin="<config>"):
    values = {}
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if m is None:
            raise ContractError(f"{origin}:{i}: expected 'key = value'")
        values[m.group(1)] = _convert(m.group(1), m.group(2), f"{origin}:{i}")
    return values


def parse_overrides(args):
    values = {}
    for a in args:
        if not a.startswith("--") or "=" not in a:
            raise ContractError(f"override must look like --key=value, got {a!r}")
        key, raw = a[2:].split("=", 1)
        values[key.replace("-", "_")] = _convert(key.replace("-", "_"), raw, "command line")
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def out(self):
        return self.values["out"]

    def dumps(self):
        lines = [f"{k} = {format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def echo(self, directory, command="run"):
        """Write the effective configuration to ``<directory>/config_<command>.txt``.

        The file is a valid configuration file that reproduces the run.
        """
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"config_{command}.txt")
        with open(path, "w") as fh:
            fh.write(self.dumps())
        return path

    # builders for the library objects

    def network(self):
        shape = (self["size"], self["size"], self["channels"])
        return self.network_for(shape)

    def network_for(self, shape):
        if self["arch"] == "dense":
            return dense_autoencoder(shape, self["hidden"] or None, self["activation"],
                                     self["final_activation"])
        return conv_autoencoder(shape, self["filters"], self["kernel"], self["depth"],
                                self["activation"], self["final_activation"],
                                self["downsample"])

    def corruption(self):
        return _CORR.replace(
            area_min=self["area_min"], area_max=self["area_max"],
            elastic_amplitude=_pair(self["elastic_amplitude"], "elastic_amplitude"),
            curve_prob=self["curve_prob"], opacity=_pair(self["opacity"], "opacity"),
            opaque_prob=self["opaque_prob"], noise_max=self["noise_max"],
            clean_prob=self["clean_prob"], texture=self["texture"])

    def schedule(self):
        return TrainSchedule(steps=self["steps"], batch_size=self["batch_size"], lr=self["lr"],
                             loss=self["loss"], weight_lambda=self["weight_lambda"],
                             log_every=self["log_every"], seed=self["seed"])

    def benchmark(self):
        return BenchmarkConfig(size=self["size"], channels=self["channels"],
                               n_train=self["n_train"], n_test=self["n_test"],
                               anomaly_fraction=self["anomaly_fraction"],
                               train_corruption=self.corruption(),
                               test_corruption=heldout_corruption())

    def smoothing(self):
        return SmoothingSpec(self["k"], self["n"])


def _pair(t, key):
    if len(t) != 2:
        raise ContractError(f"{key} needs two values")
    return tuple(t)


def defaults():
    return {k: v[1] for k, v in SCHEMA.items()}


def load(path=None, overrides=()):
    """Defaults, then the file at ``path`` (if any), then ``--key=value`` overrides."""
    values = defaults()
    if path:
        with open(path) as fh:
            values.update(parse_text(fh.read(), path))
    values.update(parse_overrides(overrides))
    cfg = RunConfig(values)
    # build once so invalid combinations fail before any work starts
    cfg.corruption()
    cfg.schedule()
    cfg.smoothing()
    return cfg
