import csv
import json

import pytest

from vamppi.cli import main, validate_invariants
from vamppi.config import (ConfigError, RunConfig, dump_config, load_config, parse_config,
                           with_overrides)


def test_default_config_round_trips():
    cfg = RunConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_config_sections_and_overrides():
    cfg = parse_config("[run]\nscenario = alleyway\nn_reps = 3\n[mppi]\nJ = 128\nlam = 0.5\n"
                       "[visibility]\ngamma = 0.2\n")
    assert cfg.scenario == "alleyway" and cfg.n_reps == 3
    assert cfg.mppi.J == 128 and cfg.mppi.lam == 0.5 and cfg.visibility.gamma == 0.2
    assert parse_config(dump_config(cfg)) == cfg
    out = with_overrides(cfg, samples=64, base_seed=9, variant=None)
    assert out.mppi.J == 64 and out.base_seed == 9 and out.variant == cfg.variant


@pytest.mark.parametrize("text,needle", [
    ("[mppi]\nJ = many\n", "J"),
    ("[mppi]\nbogus = 1\n", "bogus"),
    ("[nonsense]\na = 1\n", "nonsense"),
    ("[run]\nvariant = fast\n", "variant"),
    ("[visibility]\nkernel_size = 4\n", "kernel_size"),
])
def test_config_errors_name_the_field(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_load_config_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ini"):
        load_config(tmp_path / "nope.ini")


def test_variants_all():
    assert [v.value for v in RunConfig(variant="all").variants()] == ["prescient", "det", "va"]


def test_validate_default_passes(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5


def test_validate_negative_gamma_fails(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[visibility]\ngamma = -0.3\n")
    assert main(["validate", "--config", str(p)]) != 0
    assert "decay" in capsys.readouterr().err


def test_validate_zero_sigma_rejected():
    results = dict((n, ok) for n, ok, _ in validate_invariants(kernel_sigma=0.0))
    assert not results["kernel_normalization"]


def test_run_missing_scenario_file(tmp_path, capsys):
    missing = tmp_path / "nowhere.txt"
    code = main(["run", "--scenario", str(missing), "--out", str(tmp_path / "o")])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_run_bad_config_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "c.ini"
    p.write_text("[mppi]\nJ = -4\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "mppi" in capsys.readouterr().err


def test_run_all_variants_and_figures(tmp_path):
    cfgp = tmp_path / "c.ini"
    cfgp.write_text("[run]\ntimeout = 0.3\n[mppi]\nN = 10\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfgp), "--scenario", "alleyway", "--variant", "all",
                 "--samples", "16", "--reps", "1", "--seed", "7", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["variant"] for r in rows] == ["prescient", "det", "va"]
    assert all(r["J"] == "16" for r in rows)
    lines = (out / "episodes.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["seed"] == 7
    assert load_config(out / "config.ini").mppi.J == 16
    first = (out / "episodes.jsonl").read_bytes()
    out2 = tmp_path / "run2"
    main(["run", "--config", str(cfgp), "--scenario", "alleyway", "--variant", "all",
          "--samples", "16", "--reps", "1", "--seed", "7", "--out", str(out2)])
    assert (out2 / "episodes.jsonl").read_bytes() == first
    assert (out2 / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()

    figs = tmp_path / "figs"
    assert main(["figures", str(out), "--out", str(figs)]) == 0
    for name in ("failures.csv", "time_to_goal.csv", "trajectories.csv", "min_surface_cost.csv"):
        assert (figs / name).exists()


def test_figures_empty_log(tmp_path):
    (tmp_path / "episodes.jsonl").write_text("")
    assert main(["figures", str(tmp_path), "--out", str(tmp_path / "f")]) != 0
    assert main(["figures", str(tmp_path / "absent"), "--out", str(tmp_path / "f")]) == 2
