import json

import numpy as np
import pytest

from platoonsec.config import load_config
from platoonsec.engine import summarize
from platoonsec.logio import LogFormatError, log_header, read_log, summary_json, write_log, write_plotdata

from conftest import bundled_run


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    log, report = bundled_run("case-study-2")
    path = tmp_path_factory.mktemp("log") / "log.csv"
    write_log(log, path)
    return log, report, path


def test_header_layout():
    cols = log_header(2)
    assert cols[0] == "t" and cols[-1] == "v2i_flag"
    assert cols[1:4] == ["pos_0", "v_0", "a_0"] and len(cols) == 2 + 2 * 9


def test_round_trip_is_exact(written):
    log, _, path = written
    back = read_log(path)
    for name in ("t", "pos", "v", "a", "u", "h", "mode", "rc", "gamma", "v2x_flag", "v2i_flag"):
        np.testing.assert_array_equal(getattr(back, name), getattr(log, name), err_msg=name)


def test_summary_from_disk_matches(written):
    log, report, path = written
    again = summarize(read_log(path), load_config("case-study-2"))
    assert summary_json(again) == summary_json(report)
    assert json.loads(summary_json(report))["detection"]["vehicle"] == 8


def test_truncated_log_names_last_good_row(written, tmp_path):
    _, _, path = written
    lines = path.read_text().splitlines()
    cut = tmp_path / "cut.csv"
    cut.write_text("\n".join(lines[:11]) + "\n" + lines[11][:40] + "\n")
    with pytest.raises(LogFormatError, match=r"row 12: .*last good row is row 11"):
        read_log(cut)


def test_bad_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("time,a,b\n0,1,2\n")
    with pytest.raises(LogFormatError, match="row 1"):
        read_log(p)


def test_time_must_increase(written, tmp_path):
    _, _, path = written
    lines = path.read_text().splitlines()
    p = tmp_path / "dup.csv"
    p.write_text("\n".join(lines[:4] + [lines[3]]) + "\n")
    with pytest.raises(LogFormatError, match="row 5: time is not increasing"):
        read_log(p)


def test_plotdata_files(written, tmp_path):
    log, _, _ = written
    names = write_plotdata(log, tmp_path / "plot")
    assert names == ["headway.csv", "position.csv", "residual_ds.csv", "residual_is.csv", "velocity.csv"]
    v = np.loadtxt(tmp_path / "plot" / "velocity.csv", delimiter=",", skiprows=1)
    assert v.shape == (log.n_rows, 1 + log.n_vehicles)
