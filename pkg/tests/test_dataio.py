"""File-format round trips, atomic writes, and malformed-input rejection."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdlearn.dataio import (
    atomic_write_text,
    checkpoint_dict,
    fmt_float,
    metric_table_csv,
    read_checkpoint,
    read_detectors_jsonl,
    read_field,
    read_scenario_json,
    read_trajectories_csv,
    sha256_file,
    write_checkpoint,
    write_colocated_csv,
    write_detectors_jsonl,
    write_field,
    write_scenario_json,
    write_trajectories_csv,
)
from fdlearn.errors import ConfigError, DataError, ModelShapeError
from fdlearn.fd_models import FdModel, GreenshieldsParams, NeuralFdParams
from fdlearn.neural_net import MlpSpec, init_weights, softplus_inv
from fdlearn.ode import ControlSeries
from fdlearn.traffic_sim import DensityField, DetectorLog, ScenarioConfig, Trajectory


def two_trajectories():
    a = Trajectory(
        vehicle_id=7,
        t0=3.0,
        dt=1.0,
        positions=np.array([0.0, 12.5, 31.25]),
        speeds=np.array([10.0, 15.0, 22.5]),
    )
    b = Trajectory(
        vehicle_id="probe-b",
        t0=0.0,
        dt=1.0,
        positions=np.array([100.0, 140.0]),
        speeds=np.array([40.0, 40.0]),
    )
    return [a, b]


class TestAtomicWrites:
    def test_overwrites_completely(self, tmp_path):
        target = tmp_path / "out.txt"
        atomic_write_text(target, "long placeholder content\n")
        atomic_write_text(target, "x\n")
        assert target.read_text() == "x\n"
        assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]

    def test_failed_write_leaves_no_temp_files(self, tmp_path, monkeypatch):
        def explode(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", explode)
        with pytest.raises(OSError):
            atomic_write_text(tmp_path / "out.txt", "data")
        assert list(tmp_path.iterdir()) == []


class TestFloatFormatting:
    @given(
        st.floats(allow_nan=False, allow_infinity=False, width=64)
    )
    @settings(max_examples=200)
    def test_round_trip_is_exact(self, value):
        assert float(fmt_float(value)) == value

    def test_numpy_scalars_format_like_python_floats(self):
        assert fmt_float(np.float64(0.1)) == fmt_float(0.1) == "0.1"

    def test_sha256_matches_hashlib(self, tmp_path):
        import hashlib

        path = tmp_path / "blob"
        path.write_bytes(b"abc123")
        assert sha256_file(path) == hashlib.sha256(b"abc123").hexdigest()


class TestTrajectoriesCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "trajectories.csv"
        originals = two_trajectories()
        write_trajectories_csv(path, originals)
        restored = read_trajectories_csv(path)
        # Reader orders by stringified id: "7" > "probe-b" is False, so
        # numeric ids sort before alphabetic ones here.
        assert [t.vehicle_id for t in restored] == [7, "probe-b"]
        for orig, back in zip(originals, restored):
            assert back.t0 == orig.t0 and back.dt == orig.dt
            np.testing.assert_array_equal(back.positions, orig.positions)
            np.testing.assert_array_equal(back.speeds, orig.speeds)

    def test_write_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_trajectories_csv(a, two_trajectories())
        write_trajectories_csv(b, two_trajectories())
        assert a.read_bytes() == b.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_trajectories_csv(tmp_path / "absent.csv")

    def test_bad_header(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("time,x,v\n")
        with pytest.raises(DataError):
            read_trajectories_csv(path)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,t,x,v\n1,0.0,5.0\n")
        with pytest.raises(DataError, match=":2"):
            read_trajectories_csv(path)

    def test_non_numeric_field(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,t,x,v\n1,0.0,abc,4.0\n")
        with pytest.raises(DataError, match=":2"):
            read_trajectories_csv(path)

    def test_single_sample_vehicle(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,t,x,v\n1,0.0,5.0,4.0\n")
        with pytest.raises(DataError, match="fewer than 2"):
            read_trajectories_csv(path)

    def test_non_uniform_grid(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text(
            "vehicle_id,t,x,v\n1,0.0,0.0,1.0\n1,1.0,1.0,1.0\n1,2.5,2.0,1.0\n"
        )
        with pytest.raises(DataError, match="non-uniform"):
            read_trajectories_csv(path)

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("vehicle_id,t,x,v\n1,0.0,0.0,1.0\n\n1,1.0,1.0,1.0\n")
        assert len(read_trajectories_csv(path)) == 1


class TestDetectorsJsonl:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "detectors.jsonl"
        logs = [
            DetectorLog(position=0.0, crossing_times=np.array([1.5, 3.25, 7.0])),
            DetectorLog(position=100.0, crossing_times=np.array([], dtype=float)),
        ]
        write_detectors_jsonl(path, logs)
        restored = read_detectors_jsonl(path)
        assert [log.position for log in restored] == [0.0, 100.0]
        np.testing.assert_array_equal(restored[0].crossing_times, [1.5, 3.25, 7.0])
        assert restored[1].crossing_times.size == 0

    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "detectors.jsonl"
        write_detectors_jsonl(path, [])
        assert path.read_text() == ""
        assert read_detectors_jsonl(path) == []

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "detectors.jsonl"
        path.write_text('{"position": 0.0, "crossings": [1.0]}\nnot json\n')
        with pytest.raises(DataError, match=":2"):
            read_detectors_jsonl(path)

    def test_missing_key(self, tmp_path):
        path = tmp_path / "detectors.jsonl"
        path.write_text('{"position": 0.0}\n')
        with pytest.raises(DataError):
            read_detectors_jsonl(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_detectors_jsonl(tmp_path / "absent.jsonl")


class TestDensityField:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        field = DensityField(
            cell_width=10.0, sim_dt=0.1, rho=rng.uniform(0, 0.05, (7, 11))
        )
        write_field(tmp_path, field)
        restored = read_field(tmp_path)
        assert restored.cell_width == 10.0 and restored.sim_dt == 0.1
        np.testing.assert_array_equal(restored.rho, field.rho)

    def test_truncated_binary(self, tmp_path):
        field = DensityField(cell_width=10.0, sim_dt=0.1, rho=np.zeros((4, 4)))
        write_field(tmp_path, field)
        blob = (tmp_path / "field.bin").read_bytes()
        (tmp_path / "field.bin").write_bytes(blob[:-8])
        with pytest.raises(DataError):
            read_field(tmp_path)

    def test_missing_header(self, tmp_path):
        with pytest.raises(DataError):
            read_field(tmp_path)


class TestColocatedCsv:
    def test_layout(self, tmp_path):
        traj = two_trajectories()[0]
        density = ControlSeries(t0=3.0, dt=1.0, values=np.array([0.01, 0.02, 0.03]))
        path = tmp_path / "c.csv"
        write_colocated_csv(path, traj, density)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,x,v,rho"
        assert lines[1] == "3.0,0.0,10.0,0.01"
        assert len(lines) == 4

    def test_length_mismatch(self, tmp_path):
        traj = two_trajectories()[0]
        density = ControlSeries(t0=3.0, dt=1.0, values=np.array([0.01, 0.02]))
        with pytest.raises(DataError):
            write_colocated_csv(tmp_path / "c.csv", traj, density)


class TestCheckpoints:
    def neural_model(self, variant):
        arity = 1 if variant == "nn1" else 2
        spec = MlpSpec((arity, 5, 1))
        return FdModel(
            variant=variant,
            params=NeuralFdParams(
                spec=spec,
                weights=init_weights(spec, seed=9),
                u0_raw=softplus_inv(47.3),
                rho_j_ref=0.05,
                x_ref=1000.0 if variant == "nn2" else None,
            ),
        )

    def test_greenshields_round_trip(self, tmp_path):
        for variant in ("greenshields-ls", "greenshields-traj"):
            model = FdModel(
                variant=variant, params=GreenshieldsParams(u0=43.7, rho_j=0.051)
            )
            path = tmp_path / f"{variant}.json"
            write_checkpoint(path, model)
            restored = read_checkpoint(path)
            assert restored == model

    def test_neural_round_trip_is_bit_exact(self, tmp_path):
        for variant in ("nn1", "nn2"):
            model = self.neural_model(variant)
            path = tmp_path / f"{variant}.json"
            write_checkpoint(path, model)
            restored = read_checkpoint(path)
            assert restored.variant == variant
            assert restored.params.spec == model.params.spec
            assert restored.params.u0_raw == model.params.u0_raw
            assert restored.params.x_ref == model.params.x_ref
            np.testing.assert_array_equal(
                restored.params.weights, model.params.weights
            )

    def test_rewrite_is_byte_identical(self, tmp_path):
        model = self.neural_model("nn2")
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_checkpoint(a, model)
        write_checkpoint(b, model)
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_variant_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        raw = checkpoint_dict(
            FdModel(variant="greenshields-ls", params=GreenshieldsParams(40, 0.05))
        )
        raw["variant"] = "quadratic"
        path.write_text(json.dumps(raw))
        with pytest.raises((ModelShapeError, DataError)):
            read_checkpoint(path)

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"format": "fd-checkpoint-v1", "variant": "nn1"}))
        with pytest.raises(DataError, match="malformed checkpoint"):
            read_checkpoint(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{truncated")
        with pytest.raises(DataError, match="invalid JSON"):
            read_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="missing checkpoint"):
            read_checkpoint(tmp_path / "absent.json")


class TestMetricTable:
    def test_absent_split_marked_na(self):
        text = metric_table_csv(
            [("nn1", "train", 12.5), ("nn1", "test", None)]
        )
        assert text == "model,split,loss_ft2\nnn1,train,12.5\nnn1,test,NA\n"


class TestScenarioJson:
    def config(self):
        return ScenarioConfig.from_dict(
            {
                "roadway_length": 100.0,
                "cell_width": 10.0,
                "sim_dt": 0.1,
                "horizon": 10.0,
                "record_dt": 1.0,
                "true_fd": {"u0": 44.0, "rho_j": 0.05},
                "inflow": [[0.0, 0.1]],
                "signal": {"green_s": 5.0, "red_s": 5.0, "offset_s": 0.0},
                "blockages": [],
                "detector_spacing": 50.0,
                "probe_count": 3,
                "seed": 0,
                "initial_density": 0.0,
            }
        )

    def test_round_trip(self, tmp_path):
        path = tmp_path / "scenario.json"
        cfg = self.config()
        write_scenario_json(path, cfg)
        assert read_scenario_json(path).to_dict() == cfg.to_dict()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            read_scenario_json(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text("]")
        with pytest.raises(ConfigError):
            read_scenario_json(path)
