import csv
import os

import numpy as np
import pytest

from mspg import cli
from mspg.analysis import CSV_FIELDS, TIMING_FIELDS


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _strip_timing(rows):
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in rows]


def test_ideal_check(capsys):
    assert cli.main(["ideal-check", "--coarse-levels", "2", "--fine-level", "5"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if "max discrepancy" in l]
    assert len(lines) == 2
    for l in lines:
        assert float(l.split("max discrepancy ")[1].split()[0]) <= 1e-8


def test_homogenize1d_csv(tmp_path):
    out = str(tmp_path / "o")
    assert cli.main(["homogenize1d", "--coarse-levels", "3,4", "--fine-level", "9",
                     "--ell", "1,2", "--eps", "2^-5", "--out", out]) == 0
    rows = _rows(os.path.join(out, "homogenize1d.csv"))
    assert len(rows) == 4 and list(rows[0]) == list(CSV_FIELDS)
    assert {r["ell"] for r in rows} == {"1", "2"}
    for r in rows:
        assert float(r["err_L2_rel"]) < float(r["err_fem_L2_rel"])


def test_rerun_with_cache_is_byte_identical(tmp_path):
    cache = str(tmp_path / "cache")
    args = ["homogenize2d", "--coarse-levels", "1,2", "--fine-level", "6", "--ell", "1",
            "--seed", "3", "--cache-dir", cache]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert len(os.listdir(cache)) == 2
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    a = _rows(tmp_path / "a" / "homogenize2d.csv")
    b = _rows(tmp_path / "b" / "homogenize2d.csv")
    assert _strip_timing(a) == _strip_timing(b)


def test_workers_do_not_change_numbers(tmp_path):
    base = ["helmholtz1d", "--kappa", "16", "--coarse-levels", "4", "--fine-level", "8", "--ell", "1..2"]
    assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
    a = _rows(tmp_path / "a" / "helmholtz1d.csv")
    b = _rows(tmp_path / "b" / "helmholtz1d.csv")
    assert _strip_timing(a) == _strip_timing(b)


def test_cache_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "envcache"))
    args = cli.build_parser().parse_args(["decay"])
    assert args.cache_dir == str(tmp_path / "envcache")


def test_corrupted_cache_is_reported_and_rebuilt(tmp_path, caplog):
    cache = tmp_path / "c"
    args = ["homogenize1d", "--coarse-levels", "3", "--fine-level", "8", "--ell", "1",
            "--cache-dir", str(cache), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 0
    (f,) = list(cache.iterdir())
    f.write_bytes(f.read_bytes()[:-5])
    assert cli.main(args) == 0
    assert "corrupted" in caplog.text
    assert len(list(cache.iterdir())) == 1


def test_dumps(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["scatter2d", "--kappa", "4", "--coarse-levels", "2", "--fine-level", "3",
                     "--ell", "1", "--out", str(out), "--dump-mesh", "--dump-fields",
                     "--dump-matrix"]) == 0
    names = sorted(os.listdir(out))
    assert "mesh_scattering_2d_L2.txt" in names and "mesh_scattering_2d_L3.txt" in names
    assert any(n.endswith("_reference.txt") for n in names)
    assert any(n.endswith("_ell1_msfem.txt") for n in names)
    assert any(n.endswith(".coo") for n in names)
    ref = [n for n in names if n.endswith("_reference.txt")][0]
    first = (out / ref).read_text().splitlines()[0].split()
    assert len(first) == 4  # x y re im
    header = (out / "mesh_scattering_2d_L2.txt").read_text().splitlines()[0]
    assert header == "2 25 28"  # the scatterer removes no lattice nodes at this level


def test_config_file(tmp_path):
    cfg = tmp_path / "p.ini"
    cfg.write_text("[problem]\nname = helmholtz_1d\nkappa = 4\n\n[run]\ncoarse_levels = 3\n"
                   "fine_level = 7\nell = 2\n")
    out = tmp_path / "o"
    assert cli.main(["helmholtz1d", "--config", str(cfg), "--out", str(out)]) == 0
    (row,) = _rows(out / "helmholtz1d.csv")
    assert row["kappa_or_eps"] == "4.0" and row["H"] == "0.125" and row["ell"] == "2"


@pytest.mark.parametrize("argv", [
    ["homogenize1d", "--fine-level", "7"],  # eps = 2^-5 unresolved
    ["homogenize2d", "--coarse-levels", "4", "--fine-level", "4"],
    ["scatter2d", "--coarse-levels", "1", "--fine-level", "4"],  # hole not representable
    ["decay", "--ell", "0"],
    ["homogenize2d", "--fine-level", "5"],  # checkerboard grid unresolved
])
def test_invalid_runs_exit_nonzero(argv, capsys):
    assert cli.main(argv) == 2
    assert "mspg: error:" in capsys.readouterr().err


def test_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_unwritable_cache_dir_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    assert cli.main(["ideal-check", "--cache-dir", str(blocker / "sub")]) == 3
