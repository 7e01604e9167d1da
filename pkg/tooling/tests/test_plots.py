import pytest

from ssdr_tooling.cli import main as cli_main
from ssdr_tooling.plots import PlotSpec, SchemaError, plot


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def table1_csv(tmp_path):
    rows = []
    for n in (10, 50, 150):
        for mode in ("transfer", "scratch"):
            for seed in (0, 1):
                acc = (0.6 if mode == "transfer" else 0.3) + n / 1000 + seed / 100
                rows.append([n, mode, seed, f"{acc:.6f}"])
    return write_csv(tmp_path / "table1.csv", ["n", "mode", "seed", "accuracy"], rows)


def test_table1_curve(table1_csv, tmp_path):
    out = tmp_path / "fig" / "table1.png"
    plot(PlotSpec(str(table1_csv), "table1_curve", str(out)))
    assert out.exists() and out.stat().st_size > 0


def test_input_csv_not_mutated(table1_csv, tmp_path):
    before = table1_csv.read_bytes()
    plot(PlotSpec(str(table1_csv), "table1_curve", str(tmp_path / "x.png")))
    assert table1_csv.read_bytes() == before


def test_bars_and_curves(tmp_path):
    t3 = write_csv(tmp_path / "t3.csv", ["condition", "seed", "accuracy"],
                   [["original", 0, 0.66], ["combined", 0, 0.86]])
    plot(PlotSpec(str(t3), "table3_bars", str(tmp_path / "t3.png")))
    t4 = write_csv(tmp_path / "t4.csv", ["method", "seed", "accuracy"],
                   [["gaussian", 0, 0.86], ["xavier", 0, 0.92]])
    plot(PlotSpec(str(t4), "table4_bars", str(tmp_path / "t4.png")))
    nz = write_csv(tmp_path / "nz.csv", ["n", "snr", "seed", "accuracy"],
                   [[10, "none", 0, 0.86], [10, "30", 0, 0.96], [10, "5", 0, 0.80],
                    [50, "none", 0, 0.94], [50, "30", 0, 0.95], [50, "5", 0, 0.90]])
    plot(PlotSpec(str(nz), "noise_curves", str(tmp_path / "nz.png")))
    hist = write_csv(tmp_path / "h.csv", ["update", "loss", "lr"],
                     [[1, 1.8, 0.02], [2, 1.5, 0.02], [3, 1.2, 0.02]])
    plot(PlotSpec(str(hist), "loss_history", str(tmp_path / "h.png")))
    for name in ("t3.png", "t4.png", "nz.png", "h.png"):
        assert (tmp_path / name).exists()


def test_schema_mismatch_refused(tmp_path):
    bad = write_csv(tmp_path / "bad.csv", ["n", "seed", "accuracy"], [[10, 0, 0.5]])
    out = tmp_path / "out.png"
    with pytest.raises(SchemaError, match="mode"):
        plot(PlotSpec(str(bad), "table1_curve", str(out)))
    assert not out.exists()


def test_empty_csv_refused(tmp_path):
    empty = write_csv(tmp_path / "empty.csv", ["update", "loss", "lr"], [])
    out = tmp_path / "out.png"
    with pytest.raises(SchemaError, match="no data"):
        plot(PlotSpec(str(empty), "loss_history", str(out)))
    assert not out.exists()


def test_unknown_kind_refused(tmp_path):
    with pytest.raises(SchemaError, match="kind"):
        PlotSpec("x.csv", "pie", "y.png")


def test_cli_plot(table1_csv, tmp_path, capsys):
    out = tmp_path / "cli.png"
    assert cli_main(["plot", "--csv", str(table1_csv), "--kind", "table1_curve",
                     "--out", str(out)]) == 0
    assert out.exists()
    assert cli_main(["plot", "--csv", str(table1_csv), "--kind", "noise_curves",
                     "--out", str(tmp_path / "z.png")]) == 1
    assert "header" in capsys.readouterr().err
