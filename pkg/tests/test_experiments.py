import configparser
import csv
import io
import math
import random
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from noisylab.cli import main
from noisylab.encoders import EncoderConfig
from noisylab.experiments import (
    RUNS_HEADER,
    ConfigError,
    ExperimentConfig,
    RunRecord,
    aggregate,
    post_peak_decline,
    read_runs_csv,
    run_duration_sweep,
    run_extended_training,
    run_main_sweep,
    write_runs_csv,
)
from noisylab.plots import line_chart
from noisylab.ssl import SslConfig
from noisylab.training import FinetuneConfig

TINY_INI = """\
[dataset]
train = synthetic:K=2,n=16,H=8
test = synthetic:K=2,n=8,H=8

[encoder]
stem_width = 4
widths = 4,6

[ssl]
methods = simclr
epochs = 2
batch_size = 8
proj_dim = 4

[finetune]
epochs = 2
batch_size = 8

[experiment]
noise_grid = 0.0,0.5
seeds = 0,1
milestones = 0,1,2
extended_epochs = 20
"""


def tiny(tmp_path, **kw) -> ExperimentConfig:
    cfg = ExperimentConfig.from_text(TINY_INI)
    return replace(cfg, out_dir=str(tmp_path), **kw)


def record(seed=0, acc=50.0, **kw):
    base = dict(run_id=f"r{seed}", experiment="main", method="baseline", eta=0.4,
                pretrain_epochs=0, seed=seed, finetune_epochs=2, accuracy=acc, f1=0.5,
                balanced_accuracy=0.6, tp=1, fp=2, tn=3, fn=4, train_loss=(0.7, 0.5),
                test_accuracy=(40.0, acc))
    base.update(kw)
    return RunRecord(**base)


# ----------------------------------------------------------------- config


def test_config_round_trip():
    cfg = ExperimentConfig(
        encoder=EncoderConfig(stem_width=8, widths=(8, 12)),
        ssl=SslConfig(temperature=0.1 + 0.2, lam=1 / 3, epochs=7),
        methods=("simclr", "barlow_twins"),
        finetune=FinetuneConfig(epochs=3, lr=2.5e-4),
        noise_grid=(0.0, 0.1 + 0.2, 1.0), test_eta=0.25, seeds=(3, 1), workers=2,
    )
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.ssl.temperature == 0.1 + 0.2  # floats survive bit-exactly
    assert ExperimentConfig.from_text(ExperimentConfig().to_text()) == ExperimentConfig()


@pytest.mark.parametrize("section,key,value", [
    ("experiment", "milestones", "5,0,25"),
    ("experiment", "noise_grid", "0.0,1.2"),
    ("experiment", "seeds", ""),
    ("ssl", "methods", "moco"),
    ("ssl", "temperature", "abc"),
])
def test_config_rejects(section, key, value):
    text = _override(ExperimentConfig().to_text(), section, key, value)
    with pytest.raises((ConfigError, ValueError)):
        ExperimentConfig.from_text(text)


def _override(text, section, key, value):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cp[section][key] = value
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def test_unsorted_milestones_fail_before_compute(tmp_path):
    with pytest.raises(ConfigError, match="ascending"):
        run_duration_sweep(tiny(tmp_path, milestones=(2, 1)))
    assert not any(tmp_path.iterdir())


def test_extended_needs_long_finetune(tmp_path):
    with pytest.raises(ConfigError, match=">= 20"):
        run_extended_training(tiny(tmp_path, extended_epochs=0))


# ------------------------------------------------------------ run records


def test_csv_rows_parse_back(tmp_path):
    recs = [record(0), record(1, acc=62.5, status="error: X: boom, bad")]
    text = write_runs_csv(recs, tmp_path / "runs.csv")
    assert text.splitlines()[0] == ",".join(RUNS_HEADER)
    assert read_runs_csv(tmp_path / "runs.csv") == recs


def test_post_peak_decline():
    assert post_peak_decline([50, 70, 60, 65]) == 5
    assert post_peak_decline([1, 2, 3]) == 0
    assert post_peak_decline([]) == 0


# -------------------------------------------------------------- aggregate


def test_aggregate_mean_and_standard_error():
    rows = aggregate([record(s, acc=a) for s, a in enumerate([1.0, 2.0, 3.0])])
    (row,) = rows
    assert row["accuracy_mean"] == 2.0
    assert row["accuracy_se"] == pytest.approx(1 / math.sqrt(3))
    assert row["n_seeds"] == 3 and not row["single_seed"]


def test_aggregate_single_seed_flag():
    (row,) = aggregate([record(0)])
    assert row["single_seed"] and row["accuracy_se"] == 0.0 and "single seed" in row["note"]


def test_aggregate_permutation_invariant():
    recs = [record(s, acc=float(a), eta=e) for s, a in enumerate(range(10, 16)) for e in (0.0, 0.4)]
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    assert aggregate(recs) == aggregate(shuffled)


def test_aggregate_warns_on_failed_condition():
    (row,) = aggregate([record(0, status="error: RuntimeError: x")])
    assert row["n_seeds"] == 0 and row["note"].startswith("warning")


# ----------------------------------------------------------------- sweeps


def test_zero_epoch_ssl_equals_baseline(tmp_path):
    cfg = tiny(tmp_path, noise_grid=(0.0,), seeds=(0,),
               ssl=replace(tiny(tmp_path).ssl, epochs=0),
               finetune=replace(tiny(tmp_path).finetune, epochs=0))
    base, ssl = run_main_sweep(cfg)
    assert (base.method, ssl.method) == ("baseline", "simclr")
    assert base.accuracy == ssl.accuracy and base.f1 == ssl.f1


def test_main_sweep_deterministic_and_ordered(tmp_path):
    a = run_main_sweep(tiny(tmp_path / "a"))
    b = run_main_sweep(tiny(tmp_path / "b", reuse_checkpoints=False))
    assert write_runs_csv(a, tmp_path / "a.csv") == write_runs_csv(b, tmp_path / "b.csv")
    assert [(r.eta, r.method, r.seed) for r in a] == sorted((r.eta, r.method, r.seed) for r in a)
    assert len(a) == 2 * 2 * 2 and all(r.ok for r in a)
    for r in a:
        assert 0 <= r.accuracy <= 100
        assert len(r.train_loss) == len(r.test_accuracy) == r.finetune_epochs
        assert r.tp + r.fp + r.tn + r.fn == 8
    ckpts = sorted(p.name for p in (tmp_path / "a" / "checkpoints").iterdir())
    assert len(ckpts) == 2 * 3  # milestones 0, 1, 2 for each seed
    loss = list(csv.reader(open(tmp_path / "a" / "pretrain_loss.csv")))
    assert loss[0] == ["run_id", "epoch", "mean_loss"] and len(loss) == 1 + 2 * 2


def test_worker_pool_matches_sequential(tmp_path):
    seq = run_main_sweep(tiny(tmp_path / "s", noise_grid=(0.5,)))
    par = run_main_sweep(tiny(tmp_path / "p", noise_grid=(0.5,), workers=2))
    assert seq == par


def test_duration_sweep_milestone_zero_is_baseline(tmp_path):
    cfg = tiny(tmp_path, seeds=(0,), duration_eta=0.5)
    dur = run_duration_sweep(cfg)
    assert [r.pretrain_epochs for r in dur] == [0, 1, 2]
    main_runs = run_main_sweep(replace(cfg, noise_grid=(0.5,)))
    baseline = next(r for r in main_runs if r.method == "baseline")
    assert (dur[0].accuracy, dur[0].f1) == (baseline.accuracy, baseline.f1)


def test_extended_traces_have_epoch_length(tmp_path):
    recs = run_extended_training(tiny(tmp_path, seeds=(0,)))
    assert [r.method for r in recs] == ["baseline", "simclr"]
    assert all(len(r.test_accuracy) == len(r.train_loss) == 20 for r in recs)


def test_failed_run_is_recorded_and_sweep_continues(tmp_path, monkeypatch):
    from noisylab import experiments

    real = experiments.finetune

    def flaky(encoder, train, cfg, seed, test=None):
        if seed == 1:
            raise RuntimeError("synthetic failure")
        return real(encoder, train, cfg, seed, test)

    monkeypatch.setattr(experiments, "finetune", flaky)
    recs = run_main_sweep(tiny(tmp_path, noise_grid=(0.0,)))
    bad = [r for r in recs if not r.ok]
    assert len(recs) == 4 and len(bad) == 2
    assert all(r.seed == 1 and "synthetic failure" in r.status for r in bad)


# ------------------------------------------------------------------ plots


def test_svg_contains_series_and_error_bars():
    svg = line_chart({"baseline": [(0.0, 80.0, 1.0), (0.4, 70.0, 2.0)],
                      "simclr": [(0.0, 82.0, 0.0), (0.4, 75.0, 1.5)]}, "t", "x", "y")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 2 and "baseline" in svg and "simclr" in svg
    assert svg.count("<circle") == 4


# -------------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, capsys):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    out = tmp_path / "out"
    assert main(["sweep-main", "--config", str(ini), "--out", str(out), "--seed", "0", "--quiet"]) == 0
    for name in ("runs.csv", "summary.csv", "accuracy_vs_eta.svg", "config.ini"):
        assert (out / name).exists()
    assert main(["sweep-duration", "--config", str(ini), "--out", str(out / "d"), "--seed", "0",
                 "--quiet"]) == 0
    assert (out / "d" / "f1_vs_pretrain_epochs.svg").exists()
    assert main(["finetune", "--config", str(ini), "--out", str(out / "f"), "--seed", "0",
                 "--eta", "0.5", "--quiet"]) == 0
    npz = out / "f" / "predictions-s0.npz"
    assert main(["detect", str(npz), "--out", str(out / "f")]) == 0
    with np.load(npz) as z:
        assert z["probs"].shape == (8, 2)
    assert main(["aggregate", str(out / "runs.csv"), str(out / "d" / "runs.csv"),
                 "--out", str(out / "agg")]) == 0
    assert main(["plot", str(out / "agg" / "summary.csv"), "--out", str(out / "agg")]) == 0
    assert (out / "agg" / "accuracy_vs_eta.svg").exists()
    assert main(["pretrain", "--config", str(ini), "--out", str(out / "p"), "--seed", "1",
                 "--quiet"]) == 0
    assert len(list((out / "p" / "checkpoints").iterdir())) == 3


def test_cli_config_error_exit_code(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text(TINY_INI.replace("milestones = 0,1,2", "milestones = 2,1"))
    assert main(["sweep-duration", "--config", str(ini), "--out", str(tmp_path)]) == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "noisylab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("pretrain", "finetune", "detect", "sweep-main", "sweep-duration", "extended",
                "aggregate", "plot"):
        assert sub in res.stdout


def test_training_paths_never_touch_the_mask():
    from noisylab.data import generate_synthetic, inject_noise
    from noisylab.encoders import Encoder
    from noisylab.training import finetune

    split = inject_noise(generate_synthetic(2, 4, 8, 0), 0.5, 0)

    class Guarded:
        images, noisy_labels, num_classes = split.images, split.noisy_labels, split.num_classes

        def __getattr__(self, name):
            raise AssertionError(f"training read {name}")

    res = finetune(Encoder(EncoderConfig(stem_width=4, widths=(4,))), Guarded(),
                   FinetuneConfig(epochs=1, batch_size=4), seed=0)
    assert len(res.train_loss) == 1
