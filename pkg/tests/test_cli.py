import csv

from spurion.cli import _parse_grid, main


def test_parse_grid():
    assert _parse_grid("lr=1e-3,1e-4; l1=1e-2") == {"lr": (1e-3, 1e-4), "l1": (1e-2,)}


def test_run_writes_results(tmp_path, capsys):
    cfg = tmp_path / "online.cfg"
    cfg.write_text("# short run\ntrain_steps = 10000\neval_steps = 2000\n")
    assert main(["run", "online", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "online_results.csv").open()))
    assert rows[1][:2] == ["online", "3"]
    assert "unseen" in capsys.readouterr().out


def test_grid_writes_grid_csv(tmp_path):
    cfg = tmp_path / "g.cfg"
    cfg.write_text("train_steps=5000\neval_steps=1000\nseeds=0\n")
    code = main(["grid", "online", "--config", str(cfg), "--grid", "lr=1e-3,1e-4",
                 "--out", str(tmp_path), "--min-seen", "0.7"])
    assert code == 0
    lines = (tmp_path / "online_grid.csv").read_text().splitlines()
    assert len(lines) == 3


def test_bad_config_returns_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key=1\n")
    assert main(["run", "online", "--config", str(cfg)]) == 1
    assert main(["run", "online", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_missing_mnist_dir_returns_error(tmp_path):
    assert main(["run", "pwb-star", "--mnist-dir", str(tmp_path / "nope")]) == 1


def test_report_writes_tables(tmp_path, monkeypatch):
    import spurion.harness as harness

    monkeypatch.setattr(harness, "PAPER_TABLES", {"table1": [("Online Learning", "online")]})
    code = main(["report", "--paper-tables", str(tmp_path), "--seeds", "1",
                 "--train-steps", "5000"])
    assert code == 0
    rows = list(csv.reader((tmp_path / "table1.csv").open()))
    assert rows[1][:2] == ["Online Learning", "online"]
