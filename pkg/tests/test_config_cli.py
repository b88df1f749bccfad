import csv
import os

import numpy as np
import pytest

from fae import cli
from fae import config as config_mod
from fae._validation import ContractError
from fae.evaluation import AblationReport
from fae.imageio import read_pnm
from fae.network import NetworkConfig, ParamVector, load_checkpoint, save_checkpoint

TINY = ["--size=16", "--n_train=4", "--n_test=6", "--hidden=8", "--batch_size=2",
        "--log_every=2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree_bytes(root):
    # the echoed config records the output path, so it is left out
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            if f.startswith("config_"):
                continue
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


# ---------------------------------------------------------------- config


def test_parse_text_comments_and_types():
    v = config_mod.parse_text("seed = 3  # root seed\n\n# full comment\nhidden = 4, 2\n"
                              "per_image = yes\nlr=0.01\n")
    assert v == {"seed": 3, "hidden": (4, 2), "per_image": True, "lr": 0.01}


@pytest.mark.parametrize("text", ["sedd = 1", "seed 1", "seed = x", "delta = l1",
                                  "per_image = maybe"])
def test_parse_text_rejects(text):
    with pytest.raises(ContractError):
        config_mod.parse_text(text)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 3\nsteps = 10\n")
    cfg = config_mod.load(str(p), ["--steps=20", "--noise-max=0.2"])
    assert cfg.seed == 3 and cfg["steps"] == 20 and cfg["noise_max"] == 0.2
    assert cfg["k"] == config_mod.SCHEMA["k"][1]
    with pytest.raises(ContractError):
        config_mod.load(None, ["steps=3"])


def test_load_validates_combinations():
    with pytest.raises(ContractError):
        config_mod.load(None, ["--area_min=0.5", "--area_max=0.1"])
    with pytest.raises(ContractError):
        config_mod.load(None, ["--opacity=0.5"])


def test_echo_round_trip(tmp_path):
    cfg = config_mod.load(None, ["--seed=7", "--hidden=12,6", "--lr=0.000123", "--heatmaps=false"])
    path = cfg.echo(str(tmp_path), "train")
    assert os.path.basename(path) == "config_train.txt"
    assert config_mod.load(path).values == cfg.values


def test_builders_follow_keys():
    cfg = config_mod.load(None, ["--size=8", "--channels=3", "--hidden=5", "--k=3", "--n=1",
                                 "--noise_max=0.3", "--steps=4"])
    net = cfg.network()
    assert net.input_shape == (8, 8, 3) and net.layers[0]["units"] == 5
    assert cfg.corruption().noise_max == 0.3
    assert cfg.schedule().steps == 4
    assert (cfg.smoothing().k, cfg.smoothing().n) == (3, 1)
    assert cfg.benchmark().size == 8


# ---------------------------------------------------------------- cli


def test_keys_lists_schema(capsys):
    assert cli.main(["keys"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert all(k in out for k in config_mod.SCHEMA)


def test_unknown_key_is_usage_error(tmp_path):
    assert cli.main(["train", f"--out={tmp_path}", "--stepz=3"]) == cli.EXIT_USAGE


def test_bad_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_gen_zero_count_writes_header_only(tmp_path):
    out = tmp_path / "g"
    assert cli.main(["gen", f"--out={out}", "--count=0", "--size=16"]) == cli.EXIT_OK
    assert read_csv(out / "index.csv") == [["index", "clean", "corrupted", "mask",
                                            "area_fraction", "max_mask"]]


def test_gen_pairs_deterministic_and_masks_consistent(tmp_path):
    args = ["gen", "--count=4", "--size=32", "--seed=5"]
    assert cli.main(args + [f"--out={tmp_path / 'a'}"]) == cli.EXIT_OK
    assert cli.main(args + [f"--out={tmp_path / 'b'}"]) == cli.EXIT_OK
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 3 * 4 + 1
    cfg = config_mod.load(None, args[1:])
    rows = read_csv(tmp_path / "a" / "index.csv")[1:]
    for row in rows:
        m = read_pnm(str(tmp_path / "a" / row[3]))
        frac = np.count_nonzero(m) / m.size
        assert frac == pytest.approx(float(row[4]), abs=1e-12)
        assert cfg["area_min"] <= frac <= cfg["area_max"]
        clean = read_pnm(str(tmp_path / "a" / row[1]))
        bad = read_pnm(str(tmp_path / "a" / row[2]))
        # outside the mask only the shared noise remains, which gen leaves out
        assert np.allclose(clean[m == 0], bad[m == 0], atol=1 / 255)


def test_gen_benchmark_export(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["gen", "--gen_mode=benchmark", f"--out={out}", *TINY]) == cli.EXIT_OK
    assert len(read_csv(out / "train_index.csv")) == 5
    test_rows = read_csv(out / "test_index.csv")
    assert test_rows[0] == ["path", "label", "mask_path"] and len(test_rows) == 7


def test_train_zero_steps_then_eval(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", f"--out={out}", "--steps=0", *TINY]) == cli.EXIT_OK
    p = load_checkpoint(str(out / "model.ckpt"))
    init = ParamVector.initialize(p.network.config, cli.substream(0, "init"))
    assert np.array_equal(p.theta, init.theta)
    assert read_csv(out / "loss.csv") == [["step", "loss", "sigma_mean"]]
    assert cli.main(["eval", f"--out={out}", *TINY]) == cli.EXIT_OK
    assert (out / "config_train.txt").exists() and (out / "config_eval.txt").exists()
    assert len(read_csv(out / "metrics.csv")) > 1
    assert len(list((out / "heatmaps").glob("map_*.pgm"))) == 6


def test_train_save_every(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", f"--out={out}", "--steps=4", "--save_every=2", *TINY]) == 0
    names = sorted(os.listdir(out / "checkpoints"))
    assert names == ["step_000002.ckpt", "step_000004.ckpt"]
    assert cli.main(["train", f"--out={out}", "--steps=4", "--save_every=3", *TINY]) == \
        cli.EXIT_USAGE


def test_eval_identity_checkpoint_is_degenerate(tmp_path):
    d = 16 * 16
    cfg = NetworkConfig((16, 16, 1), ({"type": "dense", "units": d},
                                      {"type": "act", "fn": "identity"}))
    p = ParamVector.initialize(cfg, np.random.default_rng(0))
    p = p.copy(np.concatenate([np.eye(d).ravel(), np.zeros(d)]))
    ck = tmp_path / "id.ckpt"
    save_checkpoint(str(ck), p)
    out = tmp_path / "e"
    assert cli.main(["eval", f"--out={out}", f"--checkpoint={ck}", "--dump_maps=true",
                     *TINY]) == cli.EXIT_OK
    assert "degenerate = true" in (out / "summary.txt").read_text()
    m = np.loadtxt(out / "maps" / "map_0000.csv", delimiter=",")
    assert m.shape == (16, 16) and np.all(m == 0)


def test_eval_missing_checkpoint_is_runtime_error(tmp_path):
    assert cli.main(["eval", f"--out={tmp_path}", *TINY]) == cli.EXIT_RUNTIME


def test_eval_on_exported_index(tmp_path):
    data = tmp_path / "bench"
    cli.main(["gen", "--gen_mode=benchmark", f"--out={data}", *TINY])
    out = tmp_path / "r"
    assert cli.main(["train", f"--out={out}", "--steps=2", f"--train_dir={data / 'train'}",
                     *TINY]) == cli.EXIT_OK
    assert cli.main(["eval", f"--out={out}", f"--test_index={data / 'test_index.csv'}",
                     "--heatmaps=false", *TINY]) == cli.EXIT_OK
    assert not (out / "heatmaps").exists()


def test_empty_train_dir_is_runtime_error(tmp_path):
    assert cli.main(["train", f"--out={tmp_path}", f"--train_dir={tmp_path}"]) == \
        cli.EXIT_RUNTIME


@pytest.mark.slow
def test_verify_passes(tmp_path):
    out = tmp_path / "v"
    assert cli.main(["verify", f"--out={out}"]) == cli.EXIT_OK
    rows = read_csv(out / "checks.csv")
    assert rows[0] == ["check", "status", "value", "detail"]
    assert all(r[1] != "fail" for r in rows[1:])
    assert (out / "expansion.csv").exists()


def test_ablate_identical_arms(tmp_path):
    out = tmp_path / "a"
    code = cli.main(["ablate", f"--out={out}", "--noise_max=0", "--steps=2", "--seeds=0,1",
                     *TINY])
    assert code == cli.EXIT_OK
    rows = read_csv(out / "ablation.csv")
    for r in rows[1:3]:
        assert r[1] == r[2] and float(r[3]) == 0.0


def test_ablate_direction_fail_exit(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "ablation",
                        lambda *a, **k: AblationReport([0, 1], [0.8, 0.8], [0.9, 0.9]))
    assert cli.main(["ablate", f"--out={tmp_path}", "--seeds=0,1", *TINY]) == cli.EXIT_CHECK
    assert "direction     : fail" in (tmp_path / "summary.txt").read_text()


def test_ablate_needs_two_seeds(tmp_path):
    assert cli.main(["ablate", f"--out={tmp_path}", "--seeds=0", *TINY]) == cli.EXIT_USAGE
