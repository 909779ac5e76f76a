import math

import numpy as np
import pytest

from mitune.adapter import inject
from mitune.checkpoint import (MAGIC, CheckpointError, load_adapters, load_base, params_digest,
                               save_adapters, save_base)
from mitune.denoiser import MlpDenoiser
from mitune.io import (MI_HEADER, read_csv, write_csv, write_loss_trace, write_mi_table,
                       write_samples, write_schedule)
from mitune.schedule import build_schedule

S = build_schedule(20, 1e-3, 0.2)


class TestBaseCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        net = MlpDenoiser(2, 3, hidden=(5, 4), seed=1)
        save_base(tmp_path / "a.ckpt", net, S.params())
        loaded, header = load_base(tmp_path / "a.ckpt", S.params())
        assert header["conditions"] == ["0", "1", "2", "null"]
        assert header["format_version"] == 1
        for k in net.params:
            np.testing.assert_array_equal(loaded.params[k], net.params[k])
        assert params_digest(loaded.params) == params_digest(net.params)

    def test_bytes_deterministic(self, tmp_path):
        net = MlpDenoiser(2, 3, seed=1)
        save_base(tmp_path / "a.ckpt", net, S.params())
        save_base(tmp_path / "b.ckpt", net, S.params())
        data = (tmp_path / "a.ckpt").read_bytes()
        assert data == (tmp_path / "b.ckpt").read_bytes()
        assert data[:8] == MAGIC

    def test_schedule_mismatch(self, tmp_path):
        save_base(tmp_path / "a.ckpt", MlpDenoiser(2, 2), S.params())
        with pytest.raises(CheckpointError, match="schedule mismatch"):
            load_base(tmp_path / "a.ckpt", build_schedule(21, 1e-3, 0.2).params())

    def test_corruption_detected(self, tmp_path):
        p = tmp_path / "a.ckpt"
        save_base(p, MlpDenoiser(2, 2), S.params())
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_base(p)
        p.write_bytes(data + b"x")
        with pytest.raises(CheckpointError, match="trailing"):
            load_base(p)
        p.write_bytes(b"NOTACKPT" + data[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_base(p)
        with pytest.raises(CheckpointError, match="not found"):
            load_base(tmp_path / "missing.ckpt")


class TestAdapterCheckpoint:
    def test_round_trip(self, tmp_path):
        base = MlpDenoiser(2, 2, hidden=(6, 6), seed=2)
        ad = inject(base, rank=2, variant="magnitude_normalized")
        ad.adapters[0].up += 0.1
        save_adapters(tmp_path / "ad.ckpt", ad, S.params(), {"round": 1})
        loaded, header = load_adapters(tmp_path / "ad.ckpt", base, S.params())
        assert header["meta"] == {"round": 1} and header["kind"] == "adapter"
        z = np.random.default_rng(0).standard_normal((7, 2))
        np.testing.assert_array_equal(loaded.eps(z, 1, 3), ad.eps(z, 1, 3))

    def test_wrong_base_and_kind(self, tmp_path):
        base = MlpDenoiser(2, 2, hidden=(6,), seed=2)
        save_adapters(tmp_path / "ad.ckpt", inject(base, rank=2), S.params())
        with pytest.raises(CheckpointError, match="different base"):
            load_adapters(tmp_path / "ad.ckpt", MlpDenoiser(2, 2, hidden=(6,), seed=3))
        with pytest.raises(CheckpointError, match="expected a base"):
            load_base(tmp_path / "ad.ckpt")


class TestCsv:
    def test_version_line_and_round_trip(self, tmp_path):
        vals = [0.1, 1 / 3, math.pi * 1e-20]
        p = write_csv(tmp_path / "x.csv", "demo", ["i", "v"], enumerate(vals))
        assert p.read_text().splitlines()[0] == "# mitune-csv v1 demo"
        kind, rows = read_csv(p)
        assert kind == "demo"
        assert [float(r["v"]) for r in rows] == vals

    def test_missing_version_line(self, tmp_path):
        (tmp_path / "y.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_csv(tmp_path / "y.csv")

    def test_writers(self, tmp_path):
        _, rows = read_csv(write_loss_trace(tmp_path / "l.csv", [3.0, 2.0]))
        assert rows[1] == {"iteration": "1", "loss": "2.0"}
        _, rows = read_csv(write_samples(tmp_path / "s.csv", [0, 1], np.ones((2, 2)), [5, 6]))
        assert list(rows[0]) == ["seed", "label", "z0", "z1"]
        _, rows = read_csv(write_mi_table(tmp_path / "m.csv", [(0, 0, 9, 0.5, float("nan"), 0.5)]))
        assert list(rows[0]) == MI_HEADER
        _, rows = read_csv(write_schedule(tmp_path / "sc.csv", S))
        assert len(rows) == 20 and float(rows[0]["kappa"]) == S.kappas[0]
