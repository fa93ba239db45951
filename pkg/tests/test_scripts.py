import csv
import runpy
import sys
from pathlib import Path


SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"


def run_script(name, *args, monkeypatch):
    monkeypatch.setattr(sys, "argv", [name, *args])
    runpy.run_path(str(SCRIPTS / name), run_name="__main__")


def test_pricing_table(tmp_path, monkeypatch):
    run_script("pricing_table.py", "--M", "2000", "--cross-M", "200", "--out", str(tmp_path / "p.csv"),
               monkeypatch=monkeypatch)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["model", "quantity", "price", "stderr"] and len(rows) == 11


def test_price_surfaces(tmp_path, monkeypatch):
    run_script("price_surfaces.py", "--M", "1000", "--points", "2", "--out-dir", str(tmp_path),
               monkeypatch=monkeypatch)
    rows = list(csv.reader(open(tmp_path / "surface_lambda_mu.csv")))
    assert rows[0] == ["param1", "param2", "price_merton", "price_mv", "diff"] and len(rows) == 5


def test_train_tables(tmp_path, monkeypatch):
    run_script("train_tables.py", "--models", "bs,merton", "--epochs", "2", "--R", "3", "--hidden", "2",
               "--batch", "8", "--eval-size", "20", "--residual-paths", "20", "--out-dir", str(tmp_path),
               monkeypatch=monkeypatch)
    rows = list(csv.DictReader(open(tmp_path / "train_table.csv")))
    assert [r["model"] for r in rows] == ["bs", "merton"]
    assert (tmp_path / "residuals_merton.csv").exists()


def test_scalability(tmp_path, monkeypatch):
    run_script("scalability.py", "--T", "0.5,1", "--R", "2,3", "--epochs", "2", "--hidden", "2", "--batch", "8",
               "--eval-size", "20", "--ref-paths", "2000", "--out-dir", str(tmp_path), monkeypatch=monkeypatch)
    for name in ("bs", "merton"):
        assert len(open(tmp_path / f"sweep_{name}.csv").read().splitlines()) == 5
