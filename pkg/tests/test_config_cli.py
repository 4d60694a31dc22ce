import csv
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tubemae.cli import main
from tubemae.config import RunConfig, load_config, parse_config, render_config
from tubemae.errors import ConfigError

TINY = Path(__file__).parent / "fixtures" / "tiny.ini"


def test_defaults_and_sections():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.model.tube().r_s == 0.5 and cfg.mask.ratio == 0.75
    cfg = parse_config("[loss]\nobjectives = B1\n[train]\nepochs = 3\nwarmup_epochs = 1\n")
    assert cfg.loss.build().enabled == ("geo",)
    assert cfg.train.epochs == 3


@pytest.mark.parametrize("text,line,needle", [
    ("[data]\nframes = 8\n[modle]\nwidth = 4\n", 3, "unknown section"),
    ("[data]\nframes = 8\n\n[model]\nwidth = 4\ncolour = red\n", 6, "unknown key"),
    ("[train]\nepochs = many\n", 2, "bad value"),
    ("[mask]\nratio = 0.5\n[data]\npoints = 1.5\n", 4, "bad value"),
])
def test_parse_errors_name_the_line(text, line, needle):
    with pytest.raises(ConfigError, match=rf"c\.ini:{line}: {needle}"):
        parse_config(text, "c.ini")


def test_invariant_violations_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="warmup"):
        parse_config("[train]\nepochs = 2\nwarmup_epochs = 2\n")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "absent.ini")


@given(width=st.sampled_from([8, 16, 32]), ratio=st.floats(0.05, 0.95), tau=st.floats(0.01, 1.0),
       seed=st.integers(0, 2**31 - 1), names=st.lists(st.sampled_from(["geo", "lat", "motion", "global"]),
                                                      min_size=1, max_size=4, unique=True))
def test_render_parse_round_trip(width, ratio, tau, seed, names):
    cfg = load_config(TINY).with_overrides({"model": {"width": width}, "mask": {"ratio": ratio},
                                            "loss": {"tau": tau, "objectives": tuple(names)}})
    cfg = cfg.seeded(seed)
    assert parse_config(render_config(cfg, ["note"])) == cfg


def run_cli(tmp_path, name, *args):
    run = tmp_path / name
    code = main([args[0], "--config", str(TINY), "--run-dir", str(run), *args[1:]])
    return code, run


def test_pretrain_replays_byte_identically(tmp_path):
    outs = []
    for name in ("a", "b"):
        code, run = run_cli(tmp_path, name, "pretrain", "--seed", "7", "--epochs", "2")
        assert code == 0
        outs.append(run)
    for f in ("pretrain_metrics.csv", "checkpoint.u4dc", "config.ini"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    rows = list(csv.reader(open(outs[0] / "pretrain_metrics.csv")))
    assert rows[0] == ["epoch", "lr", "geo", "lat", "motion", "global", "total"] and len(rows) == 3
    # the snapshot config alone reproduces the run
    code = main(["pretrain", "--config", str(outs[0] / "config.ini"), "--run-dir", str(tmp_path / "c")])
    assert code == 0
    assert (tmp_path / "c" / "pretrain_metrics.csv").read_bytes() == (outs[0] / "pretrain_metrics.csv").read_bytes()


def test_grad_check_report(tmp_path):
    code, run = run_cli(tmp_path, "g", "grad-check")
    assert code == 0
    rows = list(csv.DictReader(open(run / "grad_check.csv")))
    assert {r["check"] for r in rows} >= {"geo", "lat", "global", "total"}
    assert all(float(r["max_rel_err"]) < 1e-4 and r["result"] == "pass" for r in rows)


def test_fewshot_manifest_lists_five_videos(tmp_path):
    code, run = run_cli(tmp_path, "f", "fewshot", "--n-way", "5", "--m-shot", "1", "--split-only")
    assert code == 0
    lines = (run / "train_manifest.tsv").read_text().splitlines()
    assert len(lines) == 5
    assert len({line.split("\t")[1] for line in lines}) == 5
    assert all((run / line.split("\t")[0]).exists() for line in lines)
    held = (run / "eval_manifest.tsv").read_text().splitlines()
    assert not set(lines) & set(held)


def test_bad_inputs_exit_nonzero(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nwidht = 4\n")
    assert main(["probe", "--config", str(bad), "--run-dir", str(tmp_path / "x")]) == 2
    proc = subprocess.run([sys.executable, "-m", "tubemae.cli", "probe", "--config", str(TINY),
                           "--checkpoint", str(tmp_path / "missing.u4dc"), "--run-dir", str(tmp_path / "y")],
                          capture_output=True, text=True)
    assert proc.returncode != 0 and "missing.u4dc" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "tubemae.cli", "pretrain", "--config", str(bad),
                           "--run-dir", str(tmp_path / "z")], capture_output=True, text=True)
    assert proc.returncode == 2 and "bad.ini:2" in proc.stderr


def test_checkpoint_from_another_model_is_refused(tmp_path):
    code, run = run_cli(tmp_path, "p", "pretrain", "--epochs", "2")
    assert code == 0
    other = tmp_path / "wide.ini"
    other.write_text(TINY.read_text().replace("width = 16", "width = 8"))
    code = main(["probe", "--config", str(other), "--checkpoint", str(run / "checkpoint.u4dc"),
                 "--run-dir", str(tmp_path / "q")])
    assert code == 2
    code, probe_run = run_cli(tmp_path, "ok", "probe", "--checkpoint", str(run / "checkpoint.u4dc"))
    assert code == 0
    assert next(csv.reader(open(probe_run / "metrics.csv"))) == ["metric", "value", "threshold"]
