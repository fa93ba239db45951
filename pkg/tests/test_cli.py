import csv
import json
import subprocess
import sys

import pytest

from qhedge import cli
from qhedge.pricing import bs_price

TINY = ["--epochs", "4", "--batch", "16", "--hidden", "3", "--R", "4", "--eval-size", "50"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_price_bs_analytic(capsys):
    code, out, _ = run(capsys, "price", "--model", "bs", "--route", "analytic")
    assert code == 0
    res = json.loads(out)
    assert res["price"] == pytest.approx(0.500, abs=5e-4)
    assert list(res) == ["method", "price", "stderr", "n_paths", "seed", "signed_measure_used", "params"]


def test_price_merton_series(capsys):
    code, out, _ = run(capsys, "price", "--model", "merton", "--route", "series")
    assert code == 0 and json.loads(out)["price"] == pytest.approx(0.515, abs=1e-3)


def test_price_bsmb_analytic_uses_total_volatility(capsys):
    _, out, _ = run(capsys, "price", "--model", "bsmb", "--route", "analytic")
    assert json.loads(out)["price"] == pytest.approx(bs_price(0, 1, 0.0402 ** 0.5, 0, 1, 0.5))


def test_price_mc_small(capsys):
    _, out, _ = run(capsys, "price", "--model", "merton", "--route", "mc", "--M", "20000", "--seed", "3")
    res = json.loads(out)
    assert res["n_paths"] == 20000 and res["seed"] == 3
    assert abs(res["price"] - 0.5193229) < 4 * res["stderr"]


def test_kou_mc_refused(capsys):
    code, _, err = run(capsys, "price", "--model", "kou", "--route", "mc")
    assert code == 2 and "G(e^Y - 1) > -1" in err


def test_series_on_kou_refused(capsys):
    code, _, _ = run(capsys, "price", "--model", "kou", "--route", "series")
    assert code == 2


def test_unknown_config_key(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[model]\ntype = bs\nvolatility = 0.3\n")
    code, _, err = run(capsys, "price", "--config", str(cfg), "--route", "analytic")
    assert code == 2 and "volatility" in err


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[model]\ntype = bs\nsigma0 = 0.3\n[claim]\nK = 0.9\n")
    _, out, _ = run(capsys, "price", "--config", str(cfg), "--route", "analytic")
    assert json.loads(out)["price"] == pytest.approx(bs_price(0, 1, 0.3, 0, 1, 0.9))
    _, out, _ = run(capsys, "price", "--config", str(cfg), "--route", "analytic", "--K", "0.5")
    assert json.loads(out)["price"] == pytest.approx(bs_price(0, 1, 0.3, 0, 1, 0.5))


def test_seed_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("QHEDGE_SEED", "11")
    _, out, _ = run(capsys, "price", "--model", "bs", "--route", "mc", "--M", "2000")
    assert json.loads(out)["seed"] == 11
    _, out, _ = run(capsys, "price", "--model", "bs", "--route", "mc", "--M", "2000", "--seed", "4")
    assert json.loads(out)["seed"] == 4


def test_help_lists_every_key():
    text = cli.build_parser().format_help()
    for section, keys in cli.DEFAULTS.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"{key}=" in text
    for kind, params in cli.MODEL_DEFAULTS.items():
        for key in params:
            assert f"{key}=" in text
    assert "lr=0.0005" in text and "batch=256" in text and "eval_size=10000" in text


def test_simulate_writes_paths(capsys, tmp_path):
    code, _, _ = run(capsys, "simulate", "--model", "merton", "--R", "6", "--paths", "3", "--increments",
                     "--out-dir", str(tmp_path))
    assert code == 0
    assert (tmp_path / "increments.bin").exists()
    rows = list(csv.reader(open(tmp_path / "paths.csv")))
    assert len(rows) > 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = cli.main(["train", "--model", "merton", *TINY, "--out-dir", str(out)])
    assert code == 0
    return out


def test_train_artifacts(trained):
    rows = list(csv.reader(open(trained / "loss_curve.csv")))
    assert rows[0] == ["epoch", "loss", "x0"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert (trained / "merton_1_4_0.ckpt").exists()


def test_evaluate_and_compare(capsys, trained):
    ck = str(trained / "merton_1_4_0.ckpt")
    code, out, _ = run(capsys, "evaluate", "--model", "merton", "--R", "4", "--eval-size", "50", "--checkpoint", ck)
    assert code == 0 and json.loads(out)["eval_size"] == 50
    code, _, _ = run(capsys, "compare", "--model", "merton", "--R", "4", "--paths", "40", "--checkpoint", ck,
                     "--out-dir", str(trained))
    assert code == 0
    rows = list(csv.reader(open(trained / "residuals.csv")))
    assert {r[0] for r in rows[1:]} == {"learned", "merton_delta"}


def test_missing_or_mismatched_checkpoint(capsys, trained, tmp_path):
    code, _, _ = run(capsys, "evaluate", "--model", "merton", "--checkpoint", str(tmp_path / "nope.ckpt"))
    assert code == 2
    code, _, _ = run(capsys, "evaluate", "--model", "bsmb", "--R", "4",
                     "--checkpoint", str(trained / "merton_1_4_0.ckpt"))
    assert code == 2


def test_train_byte_identical(tmp_path, trained):
    cli.main(["train", "--model", "merton", *TINY, "--out-dir", str(tmp_path)])
    assert (tmp_path / "loss_curve.csv").read_bytes() == (trained / "loss_curve.csv").read_bytes()
    assert (tmp_path / "merton_1_4_0.ckpt").read_bytes() == (trained / "merton_1_4_0.ckpt").read_bytes()


def test_sweep_nine_rows_reproducible(capsys, tmp_path):
    args = ["sweep", "--model", "bs", "--grid", "T=0.5,1,2;R=2,3,4", "--epochs", "2", "--batch", "8",
            "--hidden", "2", "--eval-size", "20"]
    assert cli.main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "sweep.csv").read_bytes()
    assert a == (tmp_path / "b" / "sweep.csv").read_bytes()
    assert len(a.decode().splitlines()) == 10


def test_parse_grid_errors():
    assert cli.parse_grid("T=1;R=4,8") == [(1.0, 4), (1.0, 8)]
    with pytest.raises(cli.ConfigInvalid):
        cli.parse_grid("T=1")


def test_console_script_exit_code():
    res = subprocess.run([sys.executable, "-m", "qhedge.cli", "price", "--model", "nope"],
                         capture_output=True, text=True)
    assert res.returncode == 2
