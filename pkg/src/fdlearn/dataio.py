"""Flat-file formats shared by the CLI stages.

Everything is plain CSV/JSON/JSONL plus one raw binary grid, written
atomically (temp file + rename) and with full float precision (Python's
shortest round-trip repr), so identical runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ModelShapeError
from .fd_models import (
    FdModel,
    GreenshieldsParams,
    NeuralFdParams,
    VARIANTS,
)
from .neural_net import MlpSpec
from .ode import ControlSeries
from .traffic_sim import DensityField, DetectorLog, Trajectory

CHECKPOINT_FORMAT = "fd-checkpoint-v1"


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(value) -> str:
    """Shortest round-trip decimal form of a scalar, numpy or native."""
    return repr(float(value))


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# --- trajectories ---------------------------------------------------------

def write_trajectories_csv(path: Path, trajectories: list[Trajectory]) -> None:
    lines = ["vehicle_id,t,x,v"]
    for traj in trajectories:
        times = traj.times()
        for k in range(len(traj)):
            lines.append(
                f"{traj.vehicle_id},{fmt_float(times[k])},"
                f"{fmt_float(traj.positions[k])},{fmt_float(traj.speeds[k])}"
            )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajectories_csv(path: Path) -> list[Trajectory]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing trajectory file {path}")
    by_vehicle: dict[str, list[tuple[float, float, float]]] = {}
    with open(path) as handle:
        header = handle.readline().strip()
        if header != "vehicle_id,t,x,v":
            raise DataError(f"unexpected trajectory header {header!r} in {path}")
        for line_no, line in enumerate(handle, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 fields")
            try:
                vid, t, x, v = parts[0], float(parts[1]), float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
            by_vehicle.setdefault(vid, []).append((t, x, v))

    out = []
    for vid, rows in by_vehicle.items():
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        if times.size < 2:
            raise DataError(f"vehicle {vid}: fewer than 2 samples")
        dts = np.diff(times)
        dt = float(dts[0])
        if np.any(np.abs(dts - dt) > 1e-9):
            raise DataError(f"vehicle {vid}: non-uniform time grid")
        key: int | str = int(vid) if vid.lstrip("-").isdigit() else vid
        out.append(
            Trajectory(
                vehicle_id=key,
                t0=float(times[0]),
                dt=dt,
                positions=np.array([r[1] for r in rows]),
                speeds=np.array([r[2] for r in rows]),
            )
        )
    out.sort(key=lambda t: str(t.vehicle_id))
    return out


# --- detector logs --------------------------------------------------------

def write_detectors_jsonl(path: Path, logs: list[DetectorLog]) -> None:
    lines = [
        json.dumps(
            {
                "position": float(log.position),
                "crossings": log.crossing_times.tolist(),
            }
        )
        for log in logs
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_detectors_jsonl(path: Path) -> list[DetectorLog]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing detector file {path}")
    logs = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                logs.append(
                    DetectorLog(
                        position=float(raw["position"]),
                        crossing_times=np.asarray(raw["crossings"], dtype=float),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from exc
    return logs


# --- density field --------------------------------------------------------

def write_field(dir_path: Path, field: DensityField) -> None:
    """Raw float64 grid (C order) plus a JSON header describing it."""
    dir_path = Path(dir_path)
    header = {
        "cell_width": field.cell_width,
        "sim_dt": field.sim_dt,
        "shape": list(field.rho.shape),
        "dtype": "float64",
        "order": "C",
    }
    atomic_write_bytes(dir_path / "field.bin", field.rho.astype(np.float64).tobytes())
    atomic_write_text(dir_path / "field.json", json.dumps(header, indent=2) + "\n")


def read_field(dir_path: Path) -> DensityField:
    dir_path = Path(dir_path)
    try:
        header = json.loads((dir_path / "field.json").read_text())
        shape = tuple(int(n) for n in header["shape"])
        raw = np.fromfile(dir_path / "field.bin", dtype=np.dtype(header["dtype"]))
        if raw.size != shape[0] * shape[1]:
            raise DataError(
                f"field.bin holds {raw.size} values, header says {shape}"
            )
        return DensityField(
            cell_width=float(header["cell_width"]),
            sim_dt=float(header["sim_dt"]),
            rho=raw.reshape(shape),
        )
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read density field from {dir_path}: {exc}") from exc


# --- co-located samples ---------------------------------------------------

def write_colocated_csv(
    path: Path, traj: Trajectory, density: ControlSeries
) -> None:
    if traj.positions.size != density.values.size:
        raise DataError("trajectory and density series lengths differ")
    lines = ["t,x,v,rho"]
    times = traj.times()
    for k in range(len(traj)):
        lines.append(
            f"{fmt_float(times[k])},{fmt_float(traj.positions[k])},"
            f"{fmt_float(traj.speeds[k])},{fmt_float(density.values[k])}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- checkpoints ----------------------------------------------------------

def checkpoint_dict(model: FdModel) -> dict:
    if isinstance(model.params, GreenshieldsParams):
        return {
            "format": CHECKPOINT_FORMAT,
            "variant": model.variant,
            "u0": float(model.params.u0),
            "rho_j": float(model.params.rho_j),
        }
    p = model.params
    out = {
        "format": CHECKPOINT_FORMAT,
        "variant": model.variant,
        "layer_sizes": [int(n) for n in p.spec.layer_sizes],
        "weights": p.weights.tolist(),
        "u0_raw": float(p.u0_raw),
        "rho_j_ref": float(p.rho_j_ref),
    }
    if model.variant == "nn2":
        out["x_ref"] = float(p.x_ref)
    return out


def model_from_checkpoint_dict(raw: dict) -> FdModel:
    try:
        variant = raw["variant"]
        if variant not in VARIANTS:
            raise ModelShapeError(f"unknown variant {variant!r} in checkpoint")
        if variant.startswith("greenshields"):
            params: GreenshieldsParams | NeuralFdParams = GreenshieldsParams(
                u0=float(raw["u0"]), rho_j=float(raw["rho_j"])
            )
        else:
            params = NeuralFdParams(
                spec=MlpSpec(tuple(int(n) for n in raw["layer_sizes"])),
                weights=np.asarray(raw["weights"], dtype=float),
                u0_raw=float(raw["u0_raw"]),
                rho_j_ref=float(raw["rho_j_ref"]),
                x_ref=float(raw["x_ref"]) if variant == "nn2" else None,
            )
        return FdModel(variant=variant, params=params)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc


def write_checkpoint(path: Path, model: FdModel) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(model), indent=2) + "\n")


def read_checkpoint(path: Path) -> FdModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    return model_from_checkpoint_dict(raw)


# --- metric table ---------------------------------------------------------

def metric_table_csv(rows: list[tuple[str, str, float | None]]) -> str:
    lines = ["model,split,loss_ft2"]
    for name, split, value in rows:
        cell = "NA" if value is None else fmt_float(value)
        lines.append(f"{name},{split},{cell}")
    return "\n".join(lines) + "\n"


# --- scenario config ------------------------------------------------------

def read_scenario_json(path: Path):
    from .traffic_sim import ScenarioConfig

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing scenario config {path}")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return ScenarioConfig.from_dict(raw)


def write_scenario_json(path: Path, cfg) -> None:
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2) + "\n")
