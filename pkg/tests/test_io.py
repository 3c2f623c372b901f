"""CSV parsing with line numbers, graphs and model archives."""

import numpy as np
import pytest

from core import io
from core.errors import ArgumentError, IngestionError
from core.mtc_batch import Diagnostics
from core.multiversion import EventLog
from core.regularization import LocationGraph
from core.tensor_core import FactorSet


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_events(tmp_path):
    path = _write(tmp_path / "e.csv", "location,feature,gd,ld,count\n0,1,2,3,4.5\n1, 0, 1, 1, 2\n")
    log = io.read_events(path)
    assert log.location.tolist() == [0, 1]
    assert log.ld.tolist() == [3, 1]
    assert log.count.tolist() == [4.5, 2.0]


def test_event_round_trip_is_exact(tmp_path, rng):
    log = EventLog([0, 2], [1, 0], [1, 3], [2, 3], rng.uniform(size=2) / 3)
    io.write_events(log, tmp_path / "e.csv")
    back = io.read_events(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.count, log.count)
    np.testing.assert_array_equal(back.gd, log.gd)


def test_wrong_header_is_line_one(tmp_path):
    path = _write(tmp_path / "e.csv", "loc,feature,gd,ld,count\n0,0,1,1,1\n")
    with pytest.raises(IngestionError, match="line 1") as err:
        io.read_events(path)
    assert err.value.line == 1


@pytest.mark.parametrize(
    "row,field",
    [("0,0,1.5,2,1", "gd"), ("0,0,1,2,abc", "count"), ("0,0,1,2,", "count"), ("0,0,1,2,inf", "count")],
)
def test_malformed_cell_reports_its_line(tmp_path, row, field):
    path = _write(tmp_path / "e.csv", f"location,feature,gd,ld,count\n0,0,1,1,1\n{row}\n")
    with pytest.raises(IngestionError, match=f"line 3: .*invalid {field}") as err:
        io.read_events(path)
    assert err.value.line == 3 and err.value.record == 1


def test_integers_keep_every_digit(tmp_path):
    big = 2**62 + 1
    path = _write(tmp_path / "e.csv", f"location,feature,gd,ld,count\n0,0,1,{big},1\n0,0,2.0,3,1\n")
    log = io.read_events(path)
    assert log.ld.tolist() == [big, 3]
    assert log.gd.tolist() == [1, 2]


@pytest.mark.parametrize("ld", ["9223372036854775808", "99999999999999999999999", "-9223372036854775809"])
def test_integer_outside_int64_is_invalid(tmp_path, ld):
    path = _write(tmp_path / "e.csv", f"location,feature,gd,ld,count\n0,0,1,{ld},1\n")
    with pytest.raises(IngestionError, match="line 2: .*invalid ld") as err:
        io.read_events(path)
    assert err.value.line == 2


def test_non_utf8_file_is_an_ingestion_error(tmp_path):
    path = tmp_path / "e.csv"
    path.write_bytes(b"location,feature,gd,ld,count\n0,0,1,1,\xff\xfe\n")
    with pytest.raises(IngestionError, match="UTF-8"):
        io.read_events(path)
    truth = tmp_path / "t.csv"
    truth.write_bytes(b"location,feature,gd,true_count\n0,0,1,\xff\n")
    with pytest.raises(IngestionError, match="UTF-8"):
        io.read_values(truth)


def test_negative_count_reports_its_line(tmp_path):
    path = _write(tmp_path / "e.csv", "location,feature,gd,ld,count\n0,0,1,1,-2\n")
    with pytest.raises(IngestionError, match="line 2"):
        io.read_events(path)


def test_loading_before_generation_reports_its_line(tmp_path):
    path = _write(tmp_path / "e.csv", "location,feature,gd,ld,count\n0,0,1,1,1\n0,0,1,1,1\n0,0,5,4,1\n")
    with pytest.raises(IngestionError, match="line 4"):
        io.read_events(path)


def test_empty_file(tmp_path):
    with pytest.raises(IngestionError):
        io.read_events(_write(tmp_path / "e.csv", ""))


def test_header_only_file_has_no_events(tmp_path):
    assert len(io.read_events(_write(tmp_path / "e.csv", "location,feature,gd,ld,count\n"))) == 0


def test_read_values_accepts_either_table(tmp_path):
    truth = _write(tmp_path / "t.csv", "location,feature,gd,true_count\n1,0,4,7.5\n")
    est = _write(tmp_path / "z.csv", "gd,location,feature,estimate\n4,1,0,7.0\n")
    a, b = io.read_values(truth), io.read_values(est)
    assert list(a.columns) == list(b.columns) == ["location", "feature", "gd", "value"]
    assert a.iloc[0].tolist() == [1, 0, 4, 7.5]
    assert b.iloc[0].tolist() == [1, 0, 4, 7.0]


def test_read_values_rejects_other_headers(tmp_path):
    with pytest.raises(IngestionError, match="line 1"):
        io.read_values(_write(tmp_path / "x.csv", "a,b\n1,2\n"))


def test_estimates_frame_layout():
    Z = np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3)
    frame = io.estimates_frame(Z, [2, 3])
    assert list(frame.columns) == io.ESTIMATE_COLUMNS
    assert frame["gd"].tolist() == [2, 2, 2, 2, 3, 3, 3, 3]
    assert frame["location"].tolist()[:4] == [0, 0, 1, 1]
    first = frame.iloc[0]
    assert first["estimate"] == Z[0, 0, 1]


def test_graph_round_trip(tmp_path):
    graph = LocationGraph.from_edges(4, [(0, 3, 2.0), (1, 2, 0.5)])
    io.write_graph(graph, tmp_path / "g.csv")
    back = io.read_graph(tmp_path / "g.csv", 4)
    np.testing.assert_array_equal(back.adjacency, graph.adjacency)


def test_graph_node_outside_locations(tmp_path):
    path = _write(tmp_path / "g.csv", "u,v,weight\n0,5,1.0\n")
    with pytest.raises(ArgumentError, match="g.csv"):
        io.read_graph(path, 3)


def test_model_round_trip(tmp_path, rng):
    theta = FactorSet(*(rng.uniform(size=(d, 2)) for d in (3, 2, 2, 4)))
    io.save_model(tmp_path / "m.npz", theta, {"scale": 2.5, "seed": 1})
    back, metadata = io.load_model(tmp_path / "m.npz")
    for M, N in zip(back.as_list(), theta.as_list()):
        np.testing.assert_array_equal(M, N)
    assert metadata == {"scale": 2.5, "seed": 1}


def test_model_without_factors_is_rejected(tmp_path):
    np.savez(tmp_path / "m.npz", A=np.ones((2, 1)))
    with pytest.raises(ArgumentError, match="lacks"):
        io.load_model(tmp_path / "m.npz")


def test_diagnostics_csv(tmp_path):
    diag = Diagnostics(objective_trace=[3.0, 2.0, 1.5], residual_trace=[0.1, 0.01], iteration_seconds=[0.2, 0.3])
    diag.phase_seconds["init"] = 0.5
    io.write_diagnostics(diag, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "iter,objective,residual,seconds"
    assert lines[1] == "0,3,,0.5"
    assert lines[3].startswith("2,1.5,0.01")
