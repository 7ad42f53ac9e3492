import json

import numpy as np
import pandas as pd
import pytest

from conftest import make_spec
from penmig.io import DataError, emit_results, ingest_csv, samples_frame, to_jsonable, write_json
from penmig.sampler import SamplerConfig, run_chains


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestIngest:
    def test_typing(self, tmp_path):
        p = write(tmp_path, "a,b,c\n1,x,2.5\n2,y,NA\n3,x,1e3\n")
        data, report = ingest_csv(p)
        assert data["a"].dtype == float
        assert isinstance(data["b"].dtype, pd.CategoricalDtype)
        assert np.isnan(data["c"][1])
        assert report.n_rows_read == 3

    def test_unparseable_cells_reported_by_line(self, tmp_path):
        p = write(tmp_path, "a,b\n1,2\n2,oops\n3,4\n4,bad\n")
        with pytest.raises(DataError) as info:
            ingest_csv(p)
        assert info.value.problems == [(3, "b", "oops"), (5, "b", "bad")]
        assert "line 3" in str(info.value)

    def test_uci_factors_and_drop(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 60
        df = pd.DataFrame(
            {
                "y": rng.normal(size=n),
                "k": rng.integers(0, 5, n),
                "x": rng.normal(size=n),
                "s": rng.lognormal(0, 1.5, n),
            }
        )
        df["k"] = df["k"].astype(float)
        df.loc[0, "k"] = np.nan
        df.loc[3, "x"] = np.nan
        df.loc[5:9, "k"] = [0.0, 1.0, 2.0, 3.0, 4.0]
        p = tmp_path / "d.csv"
        df.to_csv(p, index=False)
        data, report = ingest_csv(p, preprocess="uci", exclude=["y"])
        assert report.n_rows_dropped == 2 and len(data) == n - 2
        assert report.factors == ["k"]
        assert isinstance(data["k"].dtype, pd.CategoricalDtype)
        assert report.log_transformed == ["s"]
        np.testing.assert_allclose(data["x"].mean(), 0, atol=1e-12)
        np.testing.assert_allclose(data["x"].std(ddof=1), 1)
        np.testing.assert_allclose(data["y"], df["y"].drop(index=[0, 3]).to_numpy(), rtol=1e-14)
        assert any("dropped 2" in s for s in report.steps)

    def test_six_levels_stay_numeric(self, tmp_path):
        vals = np.tile(np.arange(6.0), 5)
        p = tmp_path / "d.csv"
        pd.DataFrame({"x": vals, "y": np.arange(30.0)}).to_csv(p, index=False)
        data, report = ingest_csv(p, preprocess="uci")
        assert report.factors == []
        assert data["x"].dtype == float

    def test_log_shift_for_nonpositive(self, tmp_path):
        x = np.r_[np.zeros(30), np.geomspace(1, 1e4, 30)]
        p = tmp_path / "d.csv"
        pd.DataFrame({"x": x, "y": np.arange(60.0)}).to_csv(p, index=False)
        data, report = ingest_csv(p, preprocess="uci", exclude=["y"])
        assert report.log_transformed == ["x"]
        assert np.all(np.isfinite(data["x"]))

    def test_constant_column_rejected(self, tmp_path):
        p = write(tmp_path, "a,b\n1,5\n2,5\n3,5\n")
        with pytest.raises(DataError, match="constant"):
            ingest_csv(p)
        data, _ = ingest_csv(p, exclude=["b"])
        assert list(data.columns) == ["a", "b"]

    def test_schema(self, tmp_path):
        p = write(tmp_path, "a,b\n1,2\n2,3\n")
        data, _ = ingest_csv(p, schema={"a": "factor"})
        assert isinstance(data["a"].dtype, pd.CategoricalDtype)
        with pytest.raises(DataError):
            ingest_csv(p, schema={"zz": "numeric"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            ingest_csv(tmp_path / "none.csv")

    def test_header_only(self, tmp_path):
        with pytest.raises(DataError, match="no data rows"):
            ingest_csv(write(tmp_path, "a,b\n"))


class TestSerialization:
    def test_to_jsonable(self):
        out = to_jsonable({"a": np.array([1.0, np.nan]), "b": np.int64(3), 4: (np.inf, True)})
        assert out == {"a": [1.0, None], "b": 3, "4": [None, True]}

    def test_write_json_sorted(self, tmp_path):
        p = write_json(tmp_path / "x.json", {"b": 1, "a": float("nan")})
        text = p.read_text()
        assert "NaN" not in text
        assert text.index('"a"') < text.index('"b"')

    def test_emit_results(self, tmp_path):
        spec = make_spec(dims=(1, 2))
        chains, summary = run_chains(spec, SamplerConfig(n_chains=2, burn_in=5, iterations=20, thin=2))
        table, meta = samples_frame(spec, chains)
        assert len(table) == 20
        assert {"chain", "draw", "w", "sigma2", "alpha[b0]", "gamma[b1]", "beta[b1][1]"} <= set(table.columns)
        assert [b["label"] for b in meta["blocks"]] == ["b0", "b1"]
        assert meta["columns"] == list(table.columns)
        files = emit_results(
            tmp_path / "out", summary, table, meta, {"curve a": pd.DataFrame({"x": [1.0]})}, [("W_X", "hi")]
        )
        names = sorted(p.name for p in files)
        assert names == ["curve_a.csv", "log.txt", "samples.csv", "samples.json", "summary.json"]
        assert (tmp_path / "out" / "log.txt").read_text() == "W_X: hi\n"
        loaded = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert loaded["labels"] == ["b0", "b1"]
        back = pd.read_csv(tmp_path / "out" / "samples.csv", float_precision="round_trip")
        np.testing.assert_array_equal(back["w"].to_numpy(), table["w"].to_numpy())

    def test_emit_error_names_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match=str(blocker)):
            emit_results(blocker / "sub", {})
