import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from seqco import cli
from seqco.gradcheck import GradcheckReport
from seqco.ppm import read_pgm

TINY_MODEL = {"d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "queries": 5, "proj_dim": 8,
              "ffn_hidden": 16}


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["masks", "--out", "x", "--bogus"]) == 1
    assert cli.main(["synth"]) == 1          # --out is required
    assert "usage" in capsys.readouterr().err


def test_bad_log_level_is_usage_error(monkeypatch, tmp_path):
    monkeypatch.setenv("SEQCO_LOG", "loud")
    assert cli.main(["synth", "--count", "1", "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_documents_every_flag(command, capsys):
    assert cli.main([command, "--help"]) == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.default not in (None, False) and action.dest != "help":
            assert "default" in text


def test_runtime_errors_exit_two(tmp_path):
    assert cli.main(["views", "--image", str(tmp_path / "none.ppm"), "--out", str(tmp_path / "v")]) == 2
    assert cli.main(["eval", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"steps": 0}')
    assert cli.main(["pretrain", "--config", str(bad)]) == 2


def test_synth(tmp_path):
    assert cli.main(["synth", "--count", "3", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d").glob("*.ppm"))) == 3
    assert len(list((tmp_path / "d").glob("*.gt.json"))) == 3


def test_masks_are_reproducible_and_black_is_masked(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["masks", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    for branch in ("momentum", "online"):
        assert (tmp_path / f"a.{branch}.pgm").read_bytes() == (tmp_path / f"b.{branch}.pgm").read_bytes()
    mom, onl = read_pgm(tmp_path / "a.momentum.pgm"), read_pgm(tmp_path / "a.online.pgm")
    assert set(np.unique(onl)) <= {0.0, 1.0}
    assert (onl == 0).sum() == 11 * 256 and (mom == 0).sum() == 5 * 256
    assert np.all((mom == 0) ^ (onl == 0))


def test_match_matches_reference_solver(tmp_path, rng):
    cost = rng.normal(size=(6, 4))          # queries x targets
    (tmp_path / "c.json").write_text(json.dumps({"cost": cost.tolist()}))
    assert cli.main(["match", "--cost", str(tmp_path / "c.json"), "--out", str(tmp_path / "a.json")]) == 0
    out = json.loads((tmp_path / "a.json").read_text())
    r, c = linear_sum_assignment(cost)
    assert out["cost"] == pytest.approx(cost[r, c].sum())
    assert len(out["assignment"]) == 4


def test_match_to_stdout(tmp_path, capsys):
    (tmp_path / "c.json").write_text("[[1, 0], [0, 1]]")
    assert cli.main(["match", "--cost", str(tmp_path / "c.json")]) == 0
    assert json.loads(capsys.readouterr().out)["cost"] == 0.0


def test_views_and_proposals(tmp_path):
    d = tmp_path / "d"
    cli.main(["synth", "--count", "2", "--out", str(d)])
    img = str(d / "scene_00000.ppm")
    for name in ("a", "b"):
        assert cli.main(["views", "--image", img, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    for v in ("view1", "view2"):
        assert (tmp_path / f"a.{v}.ppm").read_bytes() == (tmp_path / f"b.{v}.ppm").read_bytes()
    assert cli.main(["proposals", str(d), "--mode", "random", "--top", "5", "--out", str(tmp_path / "p.json")]) == 0
    props = json.loads((tmp_path / "p.json").read_text())
    assert set(props) == {"scene_00000.ppm", "scene_00001.ppm"}
    assert all(len(v) == 5 for v in props.values())
    assert (d / "scene_00000.props.json").exists()


def test_gradcheck_exit_code_follows_tolerance(monkeypatch, capsys):
    from seqco import gradcheck as G
    monkeypatch.setattr(G, "gradcheck", lambda seed, h: GradcheckReport(2e-4, "w", (0,), 10))
    assert cli.main(["gradcheck"]) == 2
    assert "FAIL" in capsys.readouterr().out
    monkeypatch.setattr(G, "gradcheck", lambda seed, h: GradcheckReport(5e-5, "w", (0,), 10))
    assert cli.main(["gradcheck"]) == 0
    assert "max relative error: 5.000e-05" in capsys.readouterr().out


def test_pretrain_and_eval(tmp_path, capsys):
    d = tmp_path / "d"
    cli.main(["synth", "--count", "4", "--out", str(d)])
    cfg = {"model": TINY_MODEL, "proposal_mode": "ground_truth", "steps": 3, "batch_size": 2,
           "dataset": str(d), "checkpoint": str(tmp_path / "r" / "ck.seqc"),
           "metrics": str(tmp_path / "r" / "m.ndjson")}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["pretrain", "--config", str(tmp_path / "cfg.json"), "--print-config", "--steps", "2"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown["steps"] == 2 and shown["model"]["d_model"] == 16
    assert cli.main(["pretrain", "--config", str(tmp_path / "cfg.json")]) == 0
    lines = (tmp_path / "r" / "m.ndjson").read_text().splitlines()
    assert [json.loads(s)["step"] for s in lines] == [1, 2, 3]
    assert (tmp_path / "r" / "ck.seqc").exists()
    assert cli.main(["eval", "--config", str(tmp_path / "cfg.json"), "--checkpoint", str(tmp_path / "r" / "ck.seqc"),
                     "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["scenes"] == 4 and np.isfinite(rep["pair_l2"])


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "seqco.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
