import csv
import json
import re

import numpy as np
import pytest

from calo_opt import optloop as ol
from calo_opt.harness import cli
from calo_opt.harness.config import ConfigError, StudyConfig, convert, parse_config, read_ini
from calo_opt.harness.report import emit_report, read_summary, render_svg, rerender
from calo_opt.harness.runner import AggregateTrace, StudyFailure, aggregate, run_replicas

FAST_MODELS = {"reco": {"stages": ((1e-3, 2),)}, "flow": {"stages": ((1e-3, 2),)}}


def tiny_study(**changes):
    base = dict(study="custom", variant="reco", events=40, candidates=4, iterations=2, runs=2,
                models=FAST_MODELS)
    base.update(changes)
    return StudyConfig(**base)


@pytest.fixture(scope="module")
def replicas():
    return run_replicas(tiny_study(runs=3))


# ------------------------------------------------------------------ config

def test_base_preset():
    cfg = parse_config(study="base", layers=1)
    loop = cfg.loop_config()
    assert loop.n_features == 2 and loop.events == 700 and loop.candidates == 30
    assert loop.energy_range == (1.0, 20.0) and cfg.runs == 3
    assert parse_config(study="base", variant="mi").loop_config().candidates == 117
    assert parse_config(study="energy").energy_range == (1.0, 100.0)
    assert parse_config(study="transfer", events=5).runs == 10


def test_mi_rejects_five_events():
    with pytest.raises(ConfigError) as info:
        parse_config(study="transfer", events=5, variant="mi")
    assert info.value.key == "study.events"


@pytest.mark.parametrize("flags,key", [
    (dict(study="base", events=100), "study.events"),
    (dict(study="base", energy_range=(1.0, 100.0)), "study.energy_range"),
    (dict(layers=4), "study.layers"),
    (dict(study="nope"), "study.study"),
    (dict(runs=0), "study.runs"),
])
def test_invariant_violations_name_the_key(flags, key):
    with pytest.raises(ConfigError) as info:
        parse_config(**flags)
    assert info.value.key == key


def test_desk_profile_allows_other_event_counts():
    cfg = parse_config(study="base", events=100, profile="desk")
    loop = cfg.loop_config()
    assert loop.reco.stages == ((4e-4, 50), (1e-5, 50))
    assert loop.mine.width == 32 and loop.mine.batch_size is None


def test_empty_file_uses_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    cfg = parse_config(path, study="base", variant="reco")
    assert cfg.events == 700 and cfg.layers == 1


def test_ini_sections_and_flag_precedence(tmp_path):
    path = tmp_path / "study.ini"
    path.write_text("[study]\nstudy = custom\nevents = 60\ntransfer = off\nenergy_range = 2, 30\n"
                    "[loop]\nepsilon = 1.0\npenalty = 4\n[reco]\nstages = 1e-3:5, 1e-4:5\n"
                    "[mine]\nbatch_size = none\n")
    raw = read_ini(path)
    assert raw["loop"] == {"epsilon": 1.0, "penalty": 4.0}
    cfg = parse_config(path, events=80)
    loop = cfg.loop_config()
    assert cfg.events == 80 and loop.events == 80
    assert loop.transfer is False and loop.energy_range == (2.0, 30.0)
    assert loop.epsilon == 1.0 and loop.reco.stages == ((1e-3, 5), (1e-4, 5))
    assert loop.mine.batch_size is None


@pytest.mark.parametrize("text,key", [
    ("[study]\nbogus = 1\n", "study.bogus"),
    ("[loop]\nsigma_x = 1\n", "loop.sigma_x"),
    ("[flow]\nbins = 3\n", "flow.bins"),
    ("[study]\nevents = many\n", "study.events"),
    ("[weird]\na = 1\n", "weird"),
])
def test_ini_errors(tmp_path, text, key):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert info.value.key == key


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.ini")


def test_convert():
    assert convert("on", "bool") is True
    assert convert("3", "int") == 3
    assert convert("none", "int | None") is None
    assert convert("1, 20", "tuple[float, float]") == (1.0, 20.0)


def test_loop_seed_offsets_by_run():
    cfg = parse_config(seed=10)
    assert [cfg.loop_config(r).seed for r in range(3)] == [10, 11, 12]


# ------------------------------------------------------------------ runner

def test_replicas_aggregate(replicas):
    trace = replicas.aggregate
    assert trace.runs == 3 and len(trace.iterations) == 3
    thetas = np.array([r.thetas for r in replicas.records])
    np.testing.assert_allclose(trace.mean["theta_2"], thetas[:, :, 1].mean(axis=0))
    np.testing.assert_allclose(trace.std["theta_2"], thetas[:, :, 1].std(axis=0))
    assert [r.rows[0].seed for r in replicas.records] == [0, 1, 2]


def test_replicas_are_reproducible(replicas):
    again = run_replicas(tiny_study(runs=3))
    for name in replicas.aggregate.columns:
        assert again.aggregate.mean[name].tobytes() == replicas.aggregate.mean[name].tobytes()


def test_single_run_has_zero_spread():
    result = run_replicas(tiny_study(runs=1, iterations=1))
    for name in result.aggregate.columns:
        stds = result.aggregate.std[name]
        assert np.all((stds == 0) | np.isnan(stds))


def _fail_run(monkeypatch, failing):
    import calo_opt.harness.runner as runner
    real = runner.run_study

    def maybe_fail(loop, run=0, **kwargs):
        record = real(loop, run=run, **kwargs)
        if run in failing:
            record.failure = "RuntimeError: injected"
        return record

    monkeypatch.setattr(runner, "run_study", maybe_fail)


def test_degraded_mode(monkeypatch):
    _fail_run(monkeypatch, {1})
    result = run_replicas(tiny_study(runs=3, iterations=1))
    assert result.aggregate.runs == 2
    assert any("2 of 3" in w for w in result.warnings)


def test_too_many_failures(monkeypatch):
    _fail_run(monkeypatch, {0, 2})
    with pytest.raises(StudyFailure):
        run_replicas(tiny_study(runs=3, iterations=1))


def test_aggregate_truncates_and_skips_nan():
    a = ol.EvolutionRecord(2, 0)
    b = ol.EvolutionRecord(2, 1)
    for rec, vals in ((a, [np.nan, 1.0, 2.0]), (b, [np.nan, 3.0])):
        for i, v in enumerate(vals):
            rec.append(ol.IterationRow(i, rec.run, np.array([1.0, float(i)]), v, v, 0))
    trace = aggregate([a, b])
    assert len(trace.iterations) == 2
    assert np.isnan(trace.mean["objective"][0]) and trace.mean["objective"][1] == 2.0


# ------------------------------------------------------------------ report

def test_report_files(replicas, tmp_path):
    paths = emit_report(replicas, tmp_path)
    assert set(paths) == {"evolution.csv", "evolution_sum.csv", "evolution.svg", "metadata.json"}
    with open(paths["evolution.csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 3
    for row in rows:
        assert float(row["scint_sum"]) == float(row["theta_2"])
        assert float(row["abs_sum"]) == float(row["theta_1"])
    meta = json.loads(paths["metadata.json"].read_text())
    assert meta["seeds"] == [0, 1, 2]
    assert meta["decisions"]["locality_metric"] == "euclidean"
    assert meta["loop"]["epsilon"] == 1.5
    # the manifest alone reproduces the study
    again = run_replicas(StudyConfig(**{k: tuple(v) if k == "energy_range" else v
                                        for k, v in meta["study"].items()}))
    emit_report(again, tmp_path / "again")
    assert (tmp_path / "again" / "evolution.csv").read_bytes() == paths["evolution.csv"].read_bytes()


def test_two_pair_columns(tmp_path):
    result = run_replicas(tiny_study(layers=2, runs=1, iterations=1))
    paths = emit_report(result, tmp_path)
    header = paths["evolution.csv"].read_text().splitlines()[0].split(",")
    assert header == ["iter", "run", "theta_1", "theta_2", "theta_3", "theta_4", "objective",
                      "surrogate_pred", "scint_sum", "abs_sum", "seed"]
    row = next(csv.DictReader(open(paths["evolution.csv"])))
    assert float(row["scint_sum"]) == pytest.approx(float(row["theta_2"]) + float(row["theta_4"]))
    assert "scint_sum_mean" in paths["evolution_sum.csv"].read_text().splitlines()[0]


def _single_point_trace():
    trace = AggregateTrace(np.array([0]), 2, 1)
    for name, v in (("theta_1", 1.0), ("theta_2", 2.0), ("objective", 0.5), ("surrogate_pred", 0.4),
                    ("scint_sum", 2.0), ("abs_sum", 1.0)):
        trace.mean[name] = np.array([v])
        trace.std[name] = np.array([0.0])
    return trace


def test_single_point_svg():
    svg = render_svg(_single_point_trace())
    assert 'viewBox="0 0 1200 800"' in svg
    assert svg.count("<circle") == 4
    assert "<polygon" not in svg


def test_svg_is_a_view_of_the_summary(replicas, tmp_path):
    emit_report(replicas, tmp_path)
    before = (tmp_path / "evolution.svg").read_text()
    trace = read_summary(tmp_path / "evolution_sum.csv")
    for name in trace.columns:
        np.testing.assert_array_equal(trace.mean[name], replicas.aggregate.mean[name])
    rerender(tmp_path)
    after = (tmp_path / "evolution.svg").read_text()
    strip = lambda s: re.sub(r"<text[^>]*font-size=\"18\">.*?</text>", "", s)
    assert strip(before) == strip(after)
    assert before.count("<polygon") > 0


# --------------------------------------------------------------------- cli

def test_cli_run_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run", "--study", "custom", "--events", "40", "--candidates", "4", "--iterations", "1",
                     "--runs", "1", "--profile", "desk", "--out", str(out)])
    assert code == 0
    assert (out / "evolution.svg").is_file()
    assert cli.main(["report", str(out)]) == 0
    assert cli.main(["report", str(tmp_path / "missing")]) == 3


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["run", "--study", "transfer", "--events", "5", "--variant", "mi"]) == 2
    assert "study.events" in capsys.readouterr().err
    assert cli.main(["run", "--tl", "maybe"]) == 2
    assert cli.main(["frobnicate"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[study]\nnope = 1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2


def test_cli_run_failure(tmp_path, monkeypatch):
    _fail_run(monkeypatch, {0, 1})
    code = cli.main(["run", "--study", "custom", "--events", "40", "--candidates", "4", "--iterations", "1",
                     "--runs", "2", "--out", str(tmp_path / "x")])
    assert code == 3


def test_cli_validate_exit_codes(monkeypatch):
    import calo_opt.harness.validate as val
    monkeypatch.setattr(val, "SUITE", (lambda: val.Check("ok", 0.0, "-", True),))
    assert cli.main(["validate"]) == 0
    monkeypatch.setattr(val, "SUITE", (lambda: val.Check("bad", 1.0, "-", False),))
    assert cli.main(["validate"]) == 4
