import json
from pathlib import Path

import pytest

from cafe_fl import cli, runner
from cafe_fl.config import build_config, parse_config
from cafe_fl.errors import ConfigError, InputError

SMALL = """
seeds = [0, 1]
baseline_method = "fedavg"

[method]
method = "{method}"
total_rounds = 3
epochs = 1
cycle = 1
base_lr = 0.05

[model]
layer_widths = [8, 4, 1]

[data]
fixture = "disparity"
n_total = {n_total}
n_persons = [6, 3]

[partition]
client_compositions = [[2, 1], [2, 1]]
"""


def write_cfg(tmp_path, name="c.toml", method="cafe", n_total=300):
    path = tmp_path / name
    path.write_text(SMALL.format(method=method, n_total=n_total))
    return path


def minimal_raw():
    return {"model": {"layer_widths": [8, 4, 1]}, "partition": {"client_compositions": [[4, 1]]}}


class TestConfig:
    def test_defaults(self):
        cfg = build_config(minimal_raw())
        assert (cfg.method.alpha, cfg.method.epsilon, cfg.method.cycle) == (0.92, 0.005, 5)
        assert cfg.method.method == "cafe" and cfg.baseline_method == "fedavg"

    def test_alpha_out_of_range(self):
        raw = minimal_raw() | {"method": {"alpha": 1.3}}
        with pytest.raises(ConfigError) as exc:
            build_config(raw)
        assert any("alpha" in p and "[0, 1]" in p for p in exc.value.problems)

    def test_unknown_key(self):
        raw = minimal_raw() | {"method": {"alpah": 0.5}}
        with pytest.raises(ConfigError) as exc:
            build_config(raw)
        assert any("alpah" in p for p in exc.value.problems)

    def test_all_problems_reported(self):
        raw = {"bogus": 1, "method": {"alpha": 2.0, "cycle": 0}, "partition": {}}
        with pytest.raises(ConfigError) as exc:
            build_config(raw)
        text = "\n".join(exc.value.problems)
        for needle in ("bogus", "alpha", "cycle", "layer_widths", "client_compositions"):
            assert needle in text

    def test_missing_csv(self, tmp_path):
        raw = minimal_raw() | {"data": {"path": "nope.csv"}}
        with pytest.raises(ConfigError, match="not found"):
            build_config(raw, base_dir=tmp_path)

    def test_hash_changes_with_config(self):
        a = build_config(minimal_raw())
        b = build_config(minimal_raw() | {"method": {"alpha": 0.9}})
        assert a.config_hash() != b.config_hash()
        assert a.config_hash() == build_config(minimal_raw()).config_hash()

    def test_shipped_configs_valid(self):
        for name in ("cafe_disparity.toml", "fedavg_disparity.toml"):
            parse_config(Path(__file__).resolve().parents[1] / "configs" / name)


class TestCli:
    def test_validate(self, tmp_path, capsys):
        assert cli.main(["validate", "--config", str(write_cfg(tmp_path))]) == 0
        assert "ok:" in capsys.readouterr().out

    def test_validate_failure(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[method]\nalpha = 1.3\n")
        assert cli.main(["validate", "--config", str(path)]) == 1
        err = capsys.readouterr().err
        assert "alpha" in err and "layer_widths" in err

    def test_missing_file(self, tmp_path):
        assert cli.main(["validate", "--config", str(tmp_path / "none.toml")]) == 1

    def test_run_is_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path)
        for out in ("a", "b"):
            assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        for name in ("metrics_seed0.jsonl", "metrics_seed1.jsonl", "summary.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_run_artifacts(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--seed-override", "5"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [5] and len(manifest["config_hash"]) == 64
        lines = (out / "metrics_seed5.jsonl").read_text().splitlines()
        assert [json.loads(l)["round"] for l in lines] == [0, 1, 2]
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["seeds"]) == {"5"} and summary["failed_seeds"] == {}

    def test_fedavg_fate_zero_against_itself(self, tmp_path):
        out = tmp_path / "fa"
        assert cli.main(["run", "--config", str(write_cfg(tmp_path, method="fedavg")), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert all(s["fate"] == 0.0 for s in summary["seeds"].values())

    def test_manifest_hash_tracks_config(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(write_cfg(tmp_path, "x.toml", "fedavg")), "--out", str(a), "--seed-override", "0"])
        cli.main(["run", "--config", str(write_cfg(tmp_path, "y.toml", "fedsam")), "--out", str(b), "--seed-override", "0"])
        ha = json.loads((a / "manifest.json").read_text())["config_hash"]
        hb = json.loads((b / "manifest.json").read_text())["config_hash"]
        assert ha != hb

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(blocker / "sub")]) == 2

    def test_report(self, tmp_path, capsys):
        fa, ca = tmp_path / "fedavg", tmp_path / "cafe"
        cli.main(["run", "--config", str(write_cfg(tmp_path, "f.toml", "fedavg")), "--out", str(fa)])
        cli.main(["run", "--config", str(write_cfg(tmp_path, "c.toml", "cafe")), "--out", str(ca)])
        table = tmp_path / "table.txt"
        assert cli.main(["report", str(fa), str(ca), "--out", str(table)]) == 0
        result = json.loads(table.with_suffix(".json").read_text())
        rows = {r["method"]: r for r in result["rows"]}
        assert rows["fedavg"]["fate"] == 0.0
        cafe_summary = json.loads((ca / "summary.json").read_text())["aggregate"]
        fa_summary = json.loads((fa / "summary.json").read_text())["aggregate"]
        expected = (cafe_summary["f1"]["mean"] - fa_summary["f1"]["mean"]) / fa_summary["f1"]["mean"] - (
            cafe_summary["eo_gap"]["mean"] - fa_summary["eo_gap"]["mean"]
        ) / fa_summary["eo_gap"]["mean"]
        assert rows["cafe"]["fate"] == pytest.approx(expected, rel=1e-12)
        assert "fedavg" in capsys.readouterr().out

    def test_report_refuses_different_datasets(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cli.main(["run", "--config", str(write_cfg(tmp_path, "x.toml", n_total=300)), "--out", str(a), "--seed-override", "0"])
        cli.main(["run", "--config", str(write_cfg(tmp_path, "y.toml", n_total=320)), "--out", str(b), "--seed-override", "0"])
        assert cli.main(["report", str(a), str(b), "--out", str(tmp_path / "t.txt")]) == 2
        with pytest.raises(InputError, match="fingerprints"):
            runner.report([a, b], tmp_path / "t2.txt")

    def test_report_incomplete_run(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert cli.main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "t.txt")]) == 2
