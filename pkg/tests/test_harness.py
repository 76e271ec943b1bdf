import json
import math

import numpy as np
import pytest

from attn_tta import autodiff as ad
from attn_tta import cli, harness
from attn_tta.analysis import (attention_tail_histogram, binned_curve, entropy_accuracy_curve,
                               log_edges, tail_histogram)
from attn_tta.config import ConfigFileError, ExperimentConfig, load_config
from attn_tta.data import generate_dataset, make_stream
from attn_tta.engine import AdaptationPolicy, EpisodeRecord
from attn_tta.optim import OptimizerConfig
from attn_tta.training import accuracy, cross_entropy, train_clean
from attn_tta.vit import VisionTransformer, VitConfig

SMALL = dict(image_size=8, patch_size=4, embed_dim=8, num_heads=2, num_layers=1,
             num_register_tokens=1, train_per_class=2, test_per_class=4, epochs=1,
             corruptions=["contrast", "pixelate"], entropy_bins=4)


def small_cfg(tmp_path=None, **kw):
    cfg = ExperimentConfig(**{**SMALL, **kw})
    if tmp_path is not None:
        cfg.out_dir = str(tmp_path)
    return cfg


@pytest.fixture(scope="module")
def toy():
    cfg = small_cfg()
    model = VisionTransformer(cfg.vit_config())
    _, test = harness.build_data(cfg)
    return cfg, model, test


# ---------------------------------------------------------------- training

def test_cross_entropy_of_uniform_logits():
    logits = ad.constant(np.zeros((3, 10)))
    ce = cross_entropy(logits, np.array([0, 4, 9]))
    assert float(ce.values) == pytest.approx(math.log(10), abs=1e-12)
    assert float(ce.values) == pytest.approx(2.302585, abs=1e-6)


def test_train_smoke():
    cfg = VitConfig(image_size=8, patch_size=4, embed_dim=8, num_heads=2, num_layers=1,
                    num_register_tokens=1)
    data = generate_dataset(samples_per_class=1, image_size=8, seed=0)
    model, log = train_clean(cfg, data, epochs=1, batch_size=4)
    assert len(log.epoch_loss) == 1 and np.isfinite(log.epoch_loss[0])
    assert not log.diverged
    assert 0.0 <= accuracy(model, data) <= 100.0


def test_training_reduces_loss():
    cfg = VitConfig(image_size=8, patch_size=4, embed_dim=16, num_heads=2, num_layers=1,
                    num_register_tokens=1)
    data = generate_dataset(samples_per_class=8, image_size=8, seed=0)
    _, log = train_clean(cfg, data, epochs=6, batch_size=16, lr=3e-3)
    assert log.epoch_loss[-1] < log.epoch_loss[0]


# ---------------------------------------------------------------- evaluation and search

def test_streams_are_alphabetical_and_pooled(toy):
    cfg, _, test = toy
    streams = harness.corruption_streams(small_cfg(corruptions=["pixelate", "contrast"]), test, "eval")
    assert list(streams) == ["contrast", "pixelate"]
    assert len(streams["contrast"]) == 36
    assert {s.severity for s in streams["contrast"]} == {1, 2, 3, 4, 5}


def test_zero_lr_evaluation_matches_baseline(toy):
    cfg, model, test = toy
    pol = AdaptationPolicy(OptimizerConfig("adam", 0.0))
    report, records = harness.evaluate(model, pol, harness.corruption_streams(cfg, test, "eval"),
                                       harness.clean_stream(cfg, test, "eval"))
    assert report.per_corruption == report.per_corruption_baseline
    assert report.mca == pytest.approx(np.mean(list(report.per_corruption.values())), abs=1e-12)
    assert report.clean_accuracy == report.clean_accuracy_baseline
    assert report.valid and report.failure_rate == 0.0
    assert set(records) == {"contrast", "pixelate", "clean"}
    baseline = 100.0 * np.mean([r.baseline_correct for r in records["contrast"]])
    assert report.per_corruption_baseline["contrast"] == pytest.approx(baseline)


def test_report_files(tmp_path, toy):
    cfg, model, test = toy
    report, records = harness.evaluate(model, cfg.policy(),
                                       harness.corruption_streams(cfg, test, "eval"),
                                       harness.clean_stream(cfg, test, "eval"))
    harness.write_report(report, records, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["mca"] == pytest.approx(report.mca)
    rows = (tmp_path / "per_corruption.csv").read_text().splitlines()
    assert rows[0].startswith("corruption") and rows[-1].startswith("clean")
    assert len((tmp_path / "episodes.jsonl").read_text().splitlines()) == sum(map(len, records.values()))
    assert "mCA" in harness.format_table(report)


def test_default_grid_contains_reference_settings():
    grid = harness.default_grid(ExperimentConfig())
    fams = {(harness.family(p), p.optimizer.lr) for p in grid}
    assert ("adam/never", 1e-4) in fams
    assert ("sgd", 1e-3) in fams
    assert {harness.family(p) for p in grid} == {"adam/never", "adam/per-sample", "sgd"}


def test_search_of_one_and_empty(toy):
    cfg, model, test = toy
    streams = harness.corruption_streams(cfg, test, "search")
    pol = AdaptationPolicy(OptimizerConfig("sgd", 1e-3), reset_optimizer_state="per-sample")
    res = harness.hyperparameter_search(model, streams, [pol])
    assert res.best == {"sgd": pol}
    with pytest.raises(ValueError):
        harness.hyperparameter_search(model, streams, [])


def test_search_picks_argmax(toy):
    cfg, model, test = toy
    streams = harness.corruption_streams(cfg, test, "search")
    grid = [AdaptationPolicy(OptimizerConfig("adam", lr)) for lr in (0.0, 1e-2, 1.0)]
    res = harness.hyperparameter_search(model, streams, grid)
    scores = [row["mca"] for row in res.grid]
    assert res.best_mca["adam/never"] == max(scores)
    assert res.best["adam/never"] is grid[int(np.argmax(scores))]
    again = harness.policy_from_dict(json.loads(res.to_json())["best"]["adam/never"])
    assert again == res.best["adam/never"]


def test_severity_sweep_shape(toy):
    cfg, model, test = toy
    sweep = harness.severity_sweep(model, test, ["pixelate"], (1, 5))
    assert list(sweep) == ["pixelate"] and list(sweep["pixelate"]) == [1, 5]


# ---------------------------------------------------------------- analysis

def test_equal_frequency_bins_example():
    curve = binned_curve(np.arange(10.0), [True] * 10, 3)
    assert curve.counts.tolist() == [4, 3, 3]
    assert (curve.accuracy == 100.0).all()
    with pytest.raises(ValueError):
        binned_curve([0.1, 0.2], [True, False], 3)


def test_step_fixture_curve_is_non_increasing():
    rng = np.random.default_rng(0)
    ent = rng.uniform(0, 3, 1000)
    curve = binned_curve(ent, ent < 1.5, 10)
    assert (np.diff(curve.accuracy) <= 0).all()
    assert curve.accuracy[0] == 100.0 and curve.accuracy[-1] == 0.0


def test_curve_from_records(tmp_path):
    recs = [EpisodeRecord(i, 0, 0 if i < 5 else 1, 0 if i < 3 else 1, float(i), float(i) / 2,
                          [], [], 0.0) for i in range(10)]
    before = entropy_accuracy_curve(recs, 2, "before")
    after = entropy_accuracy_curve(recs, 2, "after")
    assert before.accuracy.tolist() == [60.0, 0.0]
    assert after.accuracy.tolist() == [100.0, 0.0]
    before.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("bin,")


def test_uniform_weights_fall_in_one_bucket():
    hist = tail_histogram(np.full((4, 16), 1 / 16))
    assert (hist.counts > 0).sum() == 1 and hist.total == 64
    edges = hist.edges[np.nonzero(hist.counts)[0][0]:][:2]
    assert edges[0] <= 1 / 16 < edges[1]


def test_tail_edges_cover_unit_interval():
    e = log_edges(1e-6, 4)
    assert e[0] == 0.0 and e[1] == pytest.approx(1e-6) and e[-1] == 1.0
    assert len(e) == 6 * 4 + 2
    hist = tail_histogram(np.array([0.0, 1e-9, 1.0, 0.9]))
    assert hist.counts[0] == 2 and hist.counts[-1] == 2


def test_tail_histogram_conserves_entries(tmp_path, toy):
    cfg, model, test = toy
    stream = make_stream(test, None, "all")
    hist = attention_tail_histogram(model, stream, sample_fraction=0.25)
    assert hist.num_samples == 10
    assert hist.total == cfg.num_heads * 4 * hist.num_samples
    hist.to_csv(tmp_path / "t.csv")
    freqs = [float(r.split(",")[3]) for r in (tmp_path / "t.csv").read_text().splitlines()[1:]]
    assert sum(freqs) == pytest.approx(1.0)


# ---------------------------------------------------------------- config and CLI

def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# comment\nlr = 3e-4\ncorruptions = contrast, pixelate\npooled = yes\n")
    cfg = load_config(path, ["lr=1e-3", "severities=2,4"])
    assert cfg.lr == 1e-3 and cfg.pooled is True
    assert cfg.corruptions == ["contrast", "pixelate"] and cfg.severities == [2, 4]
    assert load_config(None, [line for line in cfg.to_text().splitlines()]) == cfg


@pytest.mark.parametrize("override", ["bogus=1", "lr=fast", "corruptions=fog", "patch_size=5",
                                      "reset_optimizer_state=sometimes"])
def test_bad_config_rejected(override):
    with pytest.raises(ValueError):
        load_config(None, [override])
    assert issubclass(ConfigFileError, ValueError)


def write_cfg(tmp_path):
    path = tmp_path / "run.cfg"
    lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}" for k, v in SMALL.items()]
    lines += [f"out_dir = {tmp_path / 'out'}", "search_adam_lrs = 1e-3", "search_sgd_lrs = 1e-3",
              "search_adam_resets = never"]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_cli_end_to_end(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["train", "--config", cfg]) == 0
    assert (out / "checkpoint.json").exists() and (out / "train_log.json").exists()
    assert cli.main(["search", "--config", cfg]) == 0
    assert set(json.loads((out / "search.json").read_text())["best"]) == {"adam/never", "sgd"}
    assert cli.main(["adapt-eval", "-c", cfg, "--set", "policy_source=search"]) == 0
    assert json.loads((out / "report.json").read_text())["policy"]["optimizer"]["lr"] == 1e-3
    assert cli.main(["analyze-entropy", "-c", cfg]) == 0
    assert len((out / "entropy_bins.csv").read_text().splitlines()) == 1 + 4
    assert cli.main(["analyze-tail", "-c", cfg]) == 0
    assert (out / "tail_hist.csv").exists()
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(last)["entries"] > 0


def test_cli_errors_are_json(tmp_path, capsys):
    assert cli.main(["train", "--set", "nonsense=1"]) == cli.EXIT_CONFIG
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigFileError" and "nonsense" in err["message"]
    code = cli.main(["adapt-eval", "--set", f"out_dir={tmp_path / 'missing'}"])
    assert code == cli.EXIT_RUNTIME
    assert "message" in json.loads(capsys.readouterr().err.strip())


def test_run_seed_tiny():
    from attn_tta.experiments import run_robustness, severity_inversions
    cfg = small_cfg(train_per_class=3, search_adam_lrs=[1e-3], search_sgd_lrs=[1e-3],
                    search_adam_resets=["never"])
    summary = run_robustness(cfg, seeds=(0,), families=("adam/never",))
    res = summary.per_seed[0]
    assert set(res.reports) == {"adam/never"}
    assert sum(res.tail_counts) > 0 and len(res.tail_edges) == len(res.tail_counts) + 1
    assert set(summary.mean_severity()) == {"contrast", "pixelate"}
    assert json.loads(summary.to_json())["seeds"] == [0]
    assert severity_inversions({1: 90.0, 2: 91.0, 3: 80.0}) == [1.0]
