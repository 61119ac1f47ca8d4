import csv
import json

import numpy as np
import pytest

from softmoe import cli
from softmoe.config import ExperimentConfig, config_keys, format_config, parse_config, parse_config_text
from softmoe.errors import ConfigError, NumericalFailure
from softmoe.experiment import default_run_dir, run_experiment
from softmoe.svg import MID, color, emit_heatmap, heatmap_svg, read_matrix

SMALL = [
    "--model.m", "2", "--model.m_star", "1", "--model.d", "12", "--train.t_max_coeff", "8",
    "--train.batch", "2048", "--prune.batch", "8192", "--finetune.steps", "100", "--seed", "0",
]
CSVS = ("trajectory.csv", "alignments_final_g1.csv", "alignments_final_g2.csv", "prune.csv", "finetune.csv")


class TestParseConfig:
    def test_empty_file_is_reference_preset(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg == ExperimentConfig()
        assert (cfg.model.m, cfg.model.m_star, cfg.model.d) == (25, 5, 1000)

    def test_explicit_preset(self):
        cfg = parse_config_text("model.d = 1000\nmodel.m = 25\nmodel.m_star = 5\n")
        assert cfg == ExperimentConfig()

    def test_comments_and_types(self):
        cfg = parse_config_text(
            "# header\n\nseed = 3  # trailing\ntrain.eta = 0.1\ntrain.use_norms_pairing = false\n"
            "teacher.mode = random_orthogonal\nprune.margin = 0.01\n"
        )
        assert cfg.seed == 3 and cfg.train.eta == 0.1 and cfg.train.use_norms_pairing is False
        assert cfg.teacher.mode == "random_orthogonal" and cfg.prune.margin == 0.01

    @pytest.mark.parametrize(
        "text, line",
        [
            ("seed = 1\nmodel.width = 3\n", 2),
            ("seed = 1\n\nmodel.d = ten\n", 3),
            ("model.m_star = 10\nmodel.d = 12\n", 1),
            ("model.m = 3\n", 1),
            ("train.gradient = adam\n", 1),
            ("train.eta = -1\n", 1),
            ("seed 4\n", 1),
            ("seed = 1\nseed = 2\n", 2),
        ],
    )
    def test_errors_cite_line(self, text, line):
        with pytest.raises(ConfigError) as info:
            parse_config_text(text)
        assert info.value.line == line
        assert f"line {line}" in str(info.value)

    def test_overrides_win(self):
        cfg = parse_config_text("model.d = 100\n", {"model.d": "200", "seed": "5"})
        assert cfg.model.d == 200 and cfg.seed == 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            parse_config(tmp_path / "absent.txt")

    def test_format_round_trip(self):
        cfg = parse_config_text("seed = 9\ntrain.eta = 0.125\nprune.margin = none\n")
        text = format_config(cfg)
        assert parse_config_text(text) == cfg
        assert len(text.splitlines()) == len(config_keys())


class TestSvg:
    def test_palette_endpoints(self):
        assert color(-1) == "#2166ac" and color(0) == "#f7f7f7" and color(1) == "#b2182b"
        assert color(5) == color(1)

    def test_identity_and_zero(self, tmp_path):
        svg = heatmap_svg(np.eye(2))
        assert svg.count('fill="#b2182b"') == 2 and svg.count('fill="#f7f7f7"') == 2
        assert ">i<" in svg and ">j<" in svg and "<title>i=1 j=1: 1.0000</title>" in svg
        path = tmp_path / "z.csv"
        path.write_text("a,b\n0,0\n0,0\n")
        out = emit_heatmap(path, tmp_path / "z.svg")
        assert out.read_text().count('fill="#{:02x}{:02x}{:02x}"'.format(*MID)) == 4

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n0,x\n")
        with pytest.raises(ValueError, match="non-numeric"):
            read_matrix(path)
        assert cli.main(["render", str(path)]) == 2


class TestCli:
    def test_config_errors_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("seed = 1\nmodel.colour = red\n")
        assert cli.main(["simulate", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == 2
        assert "line 2" in capsys.readouterr().err
        assert cli.main(["simulate", "--config", str(tmp_path / "none.txt")]) == 2
        assert cli.main(["simulate", "--model.m_star", "10", "--model.d", "12", "--model.m", "10"]) == 2
        assert cli.main(["prune"]) == 2

    def test_numerical_failure_exit_3(self, monkeypatch, tmp_path):
        def boom(*args, **kwargs):
            raise NumericalFailure("non-finite parameters at step 1")

        monkeypatch.setattr(cli, "run_experiment", boom)
        assert cli.main(["simulate", "--run-dir", str(tmp_path)]) == 3

    def test_check_sigmoid(self, tmp_path, capsys):
        assert cli.main(["check-sigmoid", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader((tmp_path / "sigmoid_check.csv").open()))
        assert rows[0] == ["rho", "value"] and len(rows) == 202
        assert max(float(v) for _, v in rows[1:]) <= 1e-6
        assert "cs_ratio_pass = True" in capsys.readouterr().out

    def test_hermite_table(self, tmp_path, capsys):
        assert cli.main(["hermite-table", "--K", "12", "--out", str(tmp_path / "h.csv")]) == 0
        rows = list(csv.reader((tmp_path / "h.csv").open()))
        assert len(rows) == 1 + 16 and float(rows[1][1]) == pytest.approx(0.5)

    def test_verify(self, capsys):
        assert cli.main(["verify"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_stop_after_train(self, tmp_path):
        run = tmp_path / "run"
        assert cli.main(["simulate", *SMALL, "--run-dir", str(run), "--stop-after", "train"]) == 0
        assert (run / "trajectory.csv").exists() and (run / "checkpoint_final.txt").exists()
        assert not (run / "prune.csv").exists() and not (run / "finetune.csv").exists()
        summary = json.loads((run / "summary.json").read_text())
        assert list(summary["stages"]) == ["train"]
        # later stages can be resumed from the stored config
        assert cli.main(["prune", "--run-dir", str(run)]) == 0
        assert (run / "prune.csv").exists()
        assert cli.main(["finetune", "--run-dir", str(run)]) == 0
        assert (run / "finetune.csv").exists()

    def test_strict_flags(self, tmp_path):
        code = cli.main(["simulate", *SMALL, "--run-dir", str(tmp_path / "r"), "--strict"])
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert code == (0 if all(v for v in summary["flags"].values() if v is not None) else 4)

    def test_default_run_dir_uses_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOFTMOE_RUNS", str(tmp_path))
        cfg = parse_config_text("", {"model.m": "2", "model.m_star": "1", "model.d": "12"})
        assert default_run_dir(cfg) == tmp_path / "m2-ms1-d12-seed0"


class TestRunDirectory:
    def test_layout_and_schemas(self, tmp_path):
        assert cli.main(["simulate", *SMALL, "--run-dir", str(tmp_path)]) == 0
        header = (tmp_path / "trajectory.csv").read_text().splitlines()[0]
        assert header == "t,loss,loss_se,g1_pair_1,g2_pair_1,max_offpair,max_eps_agg"
        assert (tmp_path / "prune.csv").read_text().startswith("tau,removed_index,loss,loss_se\n0,-1,")
        assert (tmp_path / "finetune.csv").read_text().startswith("t,dist_sq\n")
        g2 = read_matrix(tmp_path / "alignments_final_g2.csv")
        assert g2.shape == (2, 1)
        assert parse_config(tmp_path / "config.txt").model.d == 12
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert set(summary["stages"]) == {"train", "prune", "finetune"}
        assert {"recovered_pairs", "shape_ok", "order_ok", "prune_ok", "finetune_ok"} <= set(summary["flags"])

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["simulate", *SMALL, "--run-dir", str(a)]) == 0
        assert cli.main(["simulate", "--config", str(a / "config.txt"), "--run-dir", str(b)]) == 0
        for name in CSVS:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()

    def test_rerun_in_place_clears_stale_outputs(self, tmp_path):
        cfg = parse_config_text("", dict(zip([k[2:] for k in SMALL[::2]], SMALL[1::2])))
        run_experiment(cfg, tmp_path)
        art = run_experiment(cfg, tmp_path, stop_after="train")
        assert not (tmp_path / "prune.csv").exists()
        assert list(art.summary["stages"]) == ["train"]
