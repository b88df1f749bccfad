"""Command-line entry point: ``fae {gen,train,eval,verify,ablate}``.

Every command takes ``--config FILE`` plus any number of ``--key=value``
overrides, writes its effective configuration to ``<out>/config_<command>.txt`` and
draws all randomness from named substreams of the root ``seed``.

Exit status: 0 success, 1 a declared check failed, 2 bad usage or
configuration, 3 runtime failure (missing input, I/O error, divergence).
"""

import argparse
import csv
import os
import sys

import numpy as np

from . import config as config_mod
from ._validation import ContractError
from .corruption import CorruptionError, corrupt
from .evaluation import (ablation, evaluate, export_dataset, load_index,
                         normal_image, synth_dataset)
from .imageio import list_pnm, read_pnm, write_pnm
from .network import NetworkConfig, ParamVector, load_checkpoint, save_checkpoint
from .theory import (ElementwisePolynomial, affine_network, affine_parts,
                     bishop_terms, expansion_report, gaussian_moment_check, idempotency_gap,
                     mc_fae_loss, odd_moment_check, rcae_penalty, remainder_slope,
                     write_reports_csv)
from .training import TrainingDivergence, substream, train, write_loss_csv

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class CommandError(RuntimeError):
    pass


def _say(msg):
    print(msg, flush=True)


def _ext(img):
    return ".ppm" if img.ndim == 3 and img.shape[2] == 3 else ".pgm"


def _train_images(cfg):
    if cfg["train_dir"]:
        try:
            files = list_pnm(cfg["train_dir"])
        except OSError as exc:
            raise CommandError(f"train_dir: {exc}") from None
        if not files:
            raise CommandError(f"train_dir {cfg['train_dir']!r} has no PGM/PPM files")
        return [read_pnm(f) for f in files]
    return synth_dataset(cfg.benchmark(), cfg.seed)[0]


def _test_set(cfg):
    if cfg["test_index"]:
        if not os.path.exists(cfg["test_index"]):
            raise CommandError(f"test index {cfg['test_index']!r} not found")
        return load_index(cfg["test_index"])
    return synth_dataset(cfg.benchmark(), cfg.seed)[1]


def _checkpoint_path(cfg):
    return cfg["checkpoint"] or os.path.join(cfg.out, "model.ckpt")


# ---------------------------------------------------------------- gen


def cmd_gen(cfg):
    out = cfg.out
    if cfg["gen_mode"] == "benchmark":
        train_set, test = synth_dataset(cfg.benchmark(), cfg.seed)
        export_dataset(train_set, test, out)
        _say(f"wrote {len(train_set)} training and {len(test)} test images to {out}")
        return EXIT_OK
    corruption = cfg.corruption()
    bench = cfg.benchmark()
    sources = _train_images(cfg) if cfg["train_dir"] else None
    img_rng = substream(cfg.seed, "gen-normal")
    cor_rng = substream(cfg.seed, "gen-corrupt")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "clean", "corrupted", "mask", "area_fraction", "max_mask"])
        for i in range(cfg["count"]):
            if sources:
                x = sources[i % len(sources)]
            else:
                x = normal_image(img_rng, bench)
            x_hat, m = corrupt(x, corruption, cor_rng)
            names = [f"clean_{i:04d}{_ext(x)}", f"corrupted_{i:04d}{_ext(x)}", f"mask_{i:04d}.pgm"]
            for name, img in zip(names, (x, x_hat, m)):
                write_pnm(os.path.join(out, name), img)
            w.writerow([i, *names, repr(float(np.count_nonzero(m) / m.size)),
                        repr(float(m.max()))])
    _say(f"wrote {cfg['count']} corrupted pairs to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(cfg):
    images = _train_images(cfg)
    net = cfg.network_for(images[0].shape)
    if any(im.shape != images[0].shape for im in images):
        raise CommandError("training images differ in shape")
    out = cfg.out
    every = cfg["save_every"]
    if every:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)

    def save(step, params, loss, sigma):
        if every and step % every == 0:
            save_checkpoint(os.path.join(out, "checkpoints", f"step_{step:06d}.ckpt"), params)

    schedule = cfg.schedule()
    if every and schedule.log_every > 1 and every % schedule.log_every:
        raise ContractError("save_every must be a multiple of log_every")
    params, history = train(images, net, cfg.corruption(), schedule, callback=save)
    save_checkpoint(os.path.join(out, "model.ckpt"), params)
    write_loss_csv(os.path.join(out, "loss.csv"), history)
    final = history[-1][1] if history else float("nan")
    _say(f"trained {schedule.steps} steps, final loss {final:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def write_heatmap(path, m):
    """16-bit min-max normalized PGM plus a ``.txt`` sidecar with the scale."""
    lo, hi = float(np.min(m)), float(np.max(m))
    scaled = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    write_pnm(path, scaled)
    with open(os.path.splitext(path)[0] + ".txt", "w") as fh:
        fh.write(f"min = {lo!r}\nmax = {hi!r}\n")


def cmd_eval(cfg):
    path = _checkpoint_path(cfg)
    if not os.path.exists(path):
        raise CommandError(f"checkpoint {path!r} not found")
    params = load_checkpoint(path)
    test = _test_set(cfg)
    report, maps = evaluate(params, test, cfg["delta"], cfg.smoothing(), cfg["reduction"],
                            cfg.benchmark().digest(), cfg.seed, return_maps=True,
                            per_image=cfg["per_image"])
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    report.write_csv(os.path.join(out, "metrics.csv"))
    if cfg["heatmaps"]:
        os.makedirs(os.path.join(out, "heatmaps"), exist_ok=True)
        for i, m in enumerate(maps):
            write_heatmap(os.path.join(out, "heatmaps", f"map_{i:04d}.pgm"), m)
    if cfg["dump_maps"]:
        os.makedirs(os.path.join(out, "maps"), exist_ok=True)
        for i, m in enumerate(maps):
            np.savetxt(os.path.join(out, "maps", f"map_{i:04d}.csv"), m, delimiter=",",
                       fmt="%.17g")
    summary = (f"i_auroc = {report.i_auroc:.6f}\np_auroc = {report.p_auroc:.6f}\n"
               f"degenerate = {str(report.degenerate).lower()}\n")
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(summary)
    _say(summary.rstrip())
    return EXIT_OK


# ---------------------------------------------------------------- verify


class _Checks:
    def __init__(self):
        self.rows = []

    def add(self, name, passed, value, detail="", mandatory=True):
        status = "pass" if passed else ("fail" if mandatory else "info")
        if passed is None:
            status = "inconclusive"
        self.rows.append((name, status, value, detail))
        _say(f"[{status.upper():>12}] {name}: {detail}")

    @property
    def failed(self):
        return any(r[1] == "fail" for r in self.rows)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["check", "status", "value", "detail"])
            for r in self.rows:
                w.writerow([r[0], r[1], repr(float(r[2])), r[3]])


def _tanh_net(rng, d):
    cfg = NetworkConfig((d, 1, 1), ({"type": "dense", "units": d},
                                    {"type": "act", "fn": "tanh"},
                                    {"type": "dense", "units": d},
                                    {"type": "act", "fn": "identity"}))
    return ParamVector.initialize(cfg, rng)


def cmd_verify(cfg):
    seed, samples = cfg.seed, cfg["samples"]
    checks = _Checks()
    reports = []
    fix_rng = substream(seed, "fixtures")

    def mc(name):
        return substream(seed, "mc-" + name)

    # symmetric-noise expansion is exact for affine maps
    worst = 0.0
    ok = True
    rng = mc("affine")
    for i in range(cfg["n_affine"]):
        d = 2 + i % 15
        net = affine_network(fix_rng, d)
        x_hat, x = fix_rng.random(d), fix_rng.random(d)
        A, _ = affine_parts(net)
        for s in cfg["sigmas"]:
            rep = expansion_report(net, x_hat, x, s, samples, rng)
            closed = rep.term_r2 + s * s * float(np.sum((A - np.eye(d)) ** 2))
            z = abs(rep.mc_loss - closed) / rep.mc_stderr if rep.mc_stderr > 0 else 0.0
            worst = max(worst, z)
            ok &= z <= 3.0
            reports.append(rep)
    checks.add("affine_exactness", ok, worst, f"max |mc - closed form| / stderr = {worst:.3f}")

    net = affine_network(fix_rng, 6)
    x_hat, x = fix_rng.random(6), fix_rng.random(6)
    r = net.forward(x_hat) - x
    val, se = mc_fae_loss(net, x_hat, x, 0.0, 2, mc("zero"))
    checks.add("sigma_zero", val == float(r @ r) and se == 0.0, val, "deterministic loss at sigma=0")

    # remainder order on the quartic fixture
    d = cfg["fixture_dim"]
    quartic = ElementwisePolynomial.quartic(0.5, d)
    qx = fix_rng.uniform(-0.5, 0.5, d)
    qx_hat = qx + fix_rng.uniform(-0.3, 0.3, d)
    fit = remainder_slope(quartic, qx_hat, qx, cfg["slope_sigmas"], samples, mc("quartic"))
    reports += fit.reports
    ok = fit.status == "ok" and 3.5 <= fit.slope <= 4.5 and fit.r_squared > 0.98
    checks.add("quartic_remainder_slope", ok, fit.slope,
               f"slope {fit.slope:.3f}, r2 {fit.r_squared:.4f}, status {fit.status}")

    # a small tanh network; inconclusive is an accepted outcome here
    tnet = _tanh_net(fix_rng, cfg["net_dim"])
    tx = fix_rng.random(cfg["net_dim"])
    tx_hat = tx + 0.2 * fix_rng.standard_normal(cfg["net_dim"])
    tfit = remainder_slope(tnet, tx_hat, tx, cfg["slope_sigmas"], samples, mc("tanh"),
                           max_samples=4 * samples)
    reports += tfit.reports
    tanh_ok = None if tfit.status != "ok" else bool(3.5 <= tfit.slope <= 4.5)
    checks.add("tanh_remainder_slope", tanh_ok, tfit.slope,
               f"slope {tfit.slope:.3f}, status {tfit.status}", mandatory=False)

    # Gaussian fourth moment
    ok, worst = True, 0.0
    for d_, s in ((1, 1.0), (3, 0.5), (16, 0.1)):
        m = gaussian_moment_check(d_, s, max(samples, 10_000), mc(f"moment-{d_}"))
        worst = max(worst, abs(m.mean - m.expected) / m.stderr)
        ok &= m.passed
    m0 = gaussian_moment_check(4, 0.0, 10_000, mc("moment-0"))
    ok &= m0.mean == 0.0
    checks.add("gaussian_fourth_moment", ok, worst, f"max deviation {worst:.3f} stderr")

    # clean-target contrast: penalty on J, not on J - I
    ok, worst, anchored = True, 0.0, 0
    rng = mc("bishop")
    for i in range(cfg["n_affine"]):
        d_ = 2 + i % 15
        anet = affine_network(fix_rng, d_)
        xb, yb = fix_rng.random(d_), fix_rng.random(d_)
        s = cfg["sigmas"][-1]
        rep = bishop_terms(anet, xb, yb, s, samples, rng)
        worst = max(worst, abs(rep.mc_loss - rep.prediction) / rep.mc_stderr)
        ok &= rep.agrees
        anchored += rep.anchored_smaller
    checks.add("bishop_contrast", ok, worst,
               f"max deviation {worst:.3f} stderr; ||J-I|| < ||J|| in {anchored}/"
               f"{cfg['n_affine']} fixtures")

    # odd-order cross term vanishes
    cubic = ElementwisePolynomial.cubic(0.7, d)
    rep_c = odd_moment_check(cubic, fix_rng.uniform(-1, 1, d), 0.1, samples, mc("odd-cubic"))
    rep_t = odd_moment_check(tnet, tx_hat, 0.1, samples, mc("odd-tanh"))
    ok = rep_c.passed and rep_t.passed
    checks.add("odd_moment", ok, max(abs(rep_c.mean) / max(rep_c.stderr, 1e-300),
                                     abs(rep_t.mean) / max(rep_t.stderr, 1e-300)),
               f"cubic {rep_c.mean:.3g}+-{rep_c.stderr:.2g}, "
               f"tanh {rep_t.mean:.3g}+-{rep_t.stderr:.2g}")

    # idempotency decomposition bound
    idem = idempotency_gap(tnet, tx_hat, tx)
    checks.add("idempotency_bound", bool(idem.holds), idem.gap,
               f"gap {idem.gap:.4g} <= bound {idem.bound:.4g}")
    rec, jac = rcae_penalty(tnet, tx)
    checks.add("contractive_terms", True, jac, f"||f(x)-x||^2 {rec:.4g}, ||J||_F^2 {jac:.4g}",
               mandatory=False)

    ckpt = cfg["checkpoint"]
    if ckpt:
        if not os.path.exists(ckpt):
            raise CommandError(f"checkpoint {ckpt!r} not found")
        params = load_checkpoint(ckpt)
        anomalies = [s for s in _test_set(cfg) if s.label == 1 and s.clean is not None][:8]
        gaps = [idempotency_gap(params, s.image, s.clean, with_bound=False).gap
                for s in anomalies]
        if gaps:
            checks.add("checkpoint_idempotency", True, float(np.mean(gaps)),
                       f"mean gap over {len(gaps)} anomalies", mandatory=False)

    out = cfg.out
    os.makedirs(out, exist_ok=True)
    write_reports_csv(os.path.join(out, "expansion.csv"), reports)
    checks.write(os.path.join(out, "checks.csv"))
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        for name, status, _, detail in checks.rows:
            fh.write(f"{status:>12}  {name}: {detail}\n")
    return EXIT_CHECK if checks.failed else EXIT_OK


# ---------------------------------------------------------------- ablate


def cmd_ablate(cfg):
    seeds = list(cfg["seeds"])
    if len(seeds) < 2:
        raise ContractError("ablation needs at least two seeds")
    bench = cfg.benchmark()
    net = cfg.network()
    rep = ablation(bench, net, cfg.schedule(), seeds, kind=cfg["delta"], spec=cfg.smoothing(),
                   workers=cfg["workers"])
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    rep.write_csv(os.path.join(out, "ablation.csv"))
    direction = rep.mean_with >= rep.mean_without
    lines = [f"with noise    : {rep.mean_with:.6f} +- {rep.spread_with:.6f}",
             f"without noise : {rep.mean_without:.6f} +- {rep.spread_without:.6f}",
             f"improvement   : {rep.improvement:+.6f}",
             f"direction     : {'pass' if direction else 'fail'}",
             f"spread without >= with : {rep.spread_without >= rep.spread_with}"]
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        _say(line)
    return EXIT_OK if direction else EXIT_CHECK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "ablate": cmd_ablate}


def build_parser():
    p = argparse.ArgumentParser(
        prog="fae", description="Filtering autoencoder anomaly detection toolkit.",
        epilog="Any schema key can be overridden as --key=value; see `fae keys`.")
    p.add_argument("command", choices=sorted(COMMANDS) + ["keys"])
    p.add_argument("--config", help="key = value configuration file")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    if args.command == "keys":
        for key, (_, default, help_) in config_mod.SCHEMA.items():
            _say(f"{key:<18} {config_mod.format_value(default):<22} {help_}")
        return EXIT_OK
    try:
        cfg = config_mod.load(args.config, rest)
    except (ContractError, OSError) as exc:
        print(f"fae: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg.echo(cfg.out, args.command)
        _say(f"fae {args.command}: seed {cfg.seed}, out {cfg.out}")
        return COMMANDS[args.command](cfg)
    except ContractError as exc:
        print(f"fae {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CommandError, TrainingDivergence, CorruptionError, OSError, ValueError) as exc:
        print(f"fae {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
