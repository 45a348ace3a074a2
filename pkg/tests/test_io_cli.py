import os
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from strategies import boxes
from uoi.boxes import Box
from uoi.cli import main
from uoi.evaluation import GroundTruthBox
from uoi.grouping import Detection
from uoi.io import (FormatError, format_config, format_detections, format_ground_truth,
                    load_config, parse_detections, parse_ground_truth)
from uoi.simulator import Pipeline, RegressorMode, SimConfig

FIXTURES = Path(__file__).parent / "fixtures"


def run(*args, env=None):
    full_env = dict(os.environ, **(env or {}))
    return subprocess.run([sys.executable, "-m", "uoi.cli", *args], capture_output=True, text=True,
                          env=full_env)


@given(st.lists(st.tuples(boxes(), st.floats(0, 1), st.integers(0, 5), st.integers(0, 3),
                          st.none() | boxes()), max_size=6))
def test_detection_round_trip_is_exact(items):
    dets = [Detection(b, s, c, i, p) for b, s, c, i, p in items]
    assert parse_detections(format_detections(dets).splitlines()) == dets


def test_ground_truth_round_trip_and_duplicates():
    gts = [GroundTruthBox(Box(0.1, 0.2, 0.30000000000000004, 1 / 3), 1, 2, 3)]
    assert parse_ground_truth(format_ground_truth(gts).splitlines()) == gts
    dup = format_ground_truth(gts * 2).splitlines()
    with pytest.raises(FormatError, match=":2: duplicate"):
        parse_ground_truth(dup)


@pytest.mark.parametrize("line,msg", [
    ('{"image_id": 0, "class_id": 0, "score": 1.5, "box": [0, 0, 1, 1]}', "score"),
    ('{"image_id": 0, "class_id": 0, "score": 0.5, "box": [2, 0, 1, 1]}', "out of order"),
    ('{"image_id": 0, "class_id": 0, "score": 0.5, "box": [0, 0, 1]}', "4 numbers"),
    ('{"image_id": 0, "score": 0.5, "box": [0, 0, 1, 1]}', "class_id"),
    ('{"image_id": 0, "class_id": 0, "score": 0.5, "box": [0, 0, 1, NaN]}', "4 numbers|non-finite"),
    ("not json", "not valid JSON"),
])
def test_parse_errors_name_the_line(line, msg):
    good = '{"image_id": 0, "class_id": 0, "score": 0.5, "box": [0, 0, 1, 1]}'
    with pytest.raises(FormatError, match=r"f:3: .*(" + msg + ")"):
        parse_detections([good, "", line], "f")


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\nn_scenes = 12\nproposal_iou_band = 0.3, 0.5\n"
                    "regressor_mode = fullbox\nm = 3\nper_class = false\n")
    cfg = load_config(path, ["k=0.4", "pipeline=wta"], seed=99)
    assert cfg.n_scenes == 12 and cfg.proposal_iou_band == (0.3, 0.5)
    assert cfg.regressor_mode is RegressorMode.FULL_BOX and cfg.pipeline is Pipeline.WTA
    assert cfg.postprocess.m == 3 and cfg.postprocess.k == 0.4 and not cfg.postprocess.per_class
    assert cfg.rng_seed == 99
    again = tmp_path / "again.conf"
    again.write_text(format_config(cfg))
    assert load_config(again) == cfg


def test_config_errors_are_listed_together(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("n_scenes = -1\nwhat = 3\nsigma0 = abc\njunk line\nk = 1.5\n")
    with pytest.raises(FormatError) as err:
        load_config(path)
    msg = str(err.value)
    for part in ("n_scenes", "unknown key 'what'", "sigma0", "junk line", "k:"):
        assert part in msg


def test_postprocess_uoi_m1_matches_nms(tmp_path):
    raw = str(FIXTURES / "raw_dets.jsonl")
    nms = run("postprocess", "--method", "nms", "--in", raw)
    uoi = run("postprocess", "--method", "uoi", "--m", "1", "--in", raw)
    assert nms.returncode == 0 and uoi.stdout == nms.stdout
    assert nms.stdout == (FIXTURES / "nms_out.jsonl").read_text()
    full = run("postprocess", "--method", "uoi", "--in", raw)
    assert len(full.stdout.splitlines()) == len(nms.stdout.splitlines())
    for method in ("soft-nms", "cluster-nms", "box-voting"):
        out = tmp_path / f"{method}.jsonl"
        assert run("postprocess", "--method", method, "--in", raw, "--out", str(out)).returncode == 0
        assert out.read_text()


def test_postprocess_needs_proposals(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"image_id": 0, "class_id": 0, "score": 0.5, "box": [0, 0, 1, 1]}\n')
    r = run("postprocess", "--method", "uoi", "--in", str(path), "--out", str(tmp_path / "o"))
    assert r.returncode != 0 and "proposal" in r.stderr
    assert not (tmp_path / "o").exists()
    r = run("postprocess", "--method", "nms", "--in", str(path))
    assert r.returncode == 0 and '"proposal"' not in r.stdout


def test_postprocess_empty_and_unknown(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    r = run("postprocess", "--method", "uoi", "--in", str(path))
    assert r.returncode == 0 and r.stdout == ""
    assert run("postprocess", "--method", "bogus", "--in", str(path)).returncode != 0


def test_eval_command(tmp_path, capsys):
    gts = [GroundTruthBox(Box(0, 0, 10, 10), 0, 0, 0), GroundTruthBox(Box(50, 50, 200, 200), 1, 1, 0)]
    g = tmp_path / "g.jsonl"
    d = tmp_path / "d.jsonl"
    g.write_text(format_ground_truth(gts))
    d.write_text(format_detections([Detection(x.box, 1.0, x.class_id, x.image_id) for x in gts]))
    assert main(["eval", "--dets", str(d), "--gts", str(g)]) == 0
    out = capsys.readouterr().out
    assert "map=1.0" in out and "ap50=1.0" in out and "ap75=1.0" in out
    assert "lrp=0.0" in out
    assert main(["eval", "--dets", str(d), "--gts", str(tmp_path / "missing")]) != 0
    assert "missing" in capsys.readouterr().err


def test_eval_no_shared_images(tmp_path, capsys):
    g = tmp_path / "g.jsonl"
    d = tmp_path / "d.jsonl"
    g.write_text(format_ground_truth([GroundTruthBox(Box(0, 0, 1, 1), 0, 5, 0)]))
    d.write_text(format_detections([Detection(Box(0, 0, 1, 1), 0.5, 0, 6)]))
    assert main(["eval", "--dets", str(d), "--gts", str(g)]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err and "map=0.0" in captured.out


def test_eval_fixture_pair():
    r = run("eval", "--dets", str(FIXTURES / "nms_out.jsonl"), "--gts", str(FIXTURES / "gts.jsonl"))
    assert r.returncode == 0 and "loc_miou=" in r.stdout


def test_simulate_command(capsys):
    assert main(["simulate", "--set", "n_scenes=5", "--seed", "4", "--pipeline", "voting"]) == 0
    assert "cls_acc=" in capsys.readouterr().out
    assert main(["simulate", "--set", "n_scenes=-5"]) != 0
    assert "n_scenes" in capsys.readouterr().err


def test_sweep_golden_and_threads():
    args = ("sweep", "--config", str(FIXTURES / "ablation.conf"), "--axis", "group-size",
            "--values", "2,5,8")
    one = run(*args, env={"UOI_THREADS": "1"})
    four = run(*args, env={"UOI_THREADS": "4"})
    assert one.returncode == 0 and one.stdout == four.stdout
    assert one.stdout == (FIXTURES / "sweep_group_size.csv").read_text()
    assert one.stdout.splitlines()[0] == \
        "axis_value,pipeline,map,ap50,ap75,lrp,lrp_loc,lrp_fp,lrp_fn,loc_miou,cls_acc"


def test_sweep_errors_produce_no_output():
    r = run("sweep", "--axis", "threshold-k", "--values", "0.3,1.2", "--set", "n_scenes=2")
    assert r.returncode != 0 and r.stdout == "" and "1.2" in r.stderr
    r = run("sweep", "--axis", "proposal-quality", "--values", "0.3-0.5", "--set", "n_scenes=2")
    assert r.returncode != 0 and "lo:hi" in r.stderr
    r = run("sweep", "--axis", "group-size", "--values", "2", "--pipelines", "wta,foo")
    assert r.returncode != 0
    r = run("sweep", "--axis", "nope", "--values", "2")
    assert r.returncode != 0


def test_sweep_proposal_bands(capsys):
    assert main(["sweep", "--axis", "proposal-quality", "--values", "0.3:0.5,0.5:0.7",
                 "--set", "n_scenes=4", "--pipelines", "uoi"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["0.3:0.5", "0.5:0.7"]
