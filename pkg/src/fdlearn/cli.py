"""Command-line pipeline: simulate -> fit -> evaluate -> export.

Every command is a pure function of its input files, flags, and seed; a run
manifest (inputs, parameters, output hashes) is written last, atomically.
Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or validation
error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    atomic_write_text,
    fmt_float,
    metric_table_csv,
    read_checkpoint,
    read_detectors_jsonl,
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
from .errors import (
    ContractError,
    DataError,
    FdError,
    NumericalFailure,
    RangeError,
    VALIDATION_ERRORS,
)
from .fd_models import (
    DEFAULT_RHO_J_REF,
    FdModel,
    GreenshieldsParams,
    NeuralFdParams,
    eval_flux,
    eval_speed,
)
from .sensing import DEFAULT_U_FLOOR, colocate
from .traffic_sim import run_scenario
from .training import (
    Dataset,
    TrainConfig,
    decompose_steps,
    evaluate,
    fit_greenshields_ls,
    initial_model,
    pooled_points,
    train,
)

MODEL_CHOICES = ("greenshields-ls", "greenshields-traj", "nn1", "nn2")


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(tz=timezone.utc)
    return moment.isoformat()


def _write_manifest(
    out_dir: Path,
    command: str,
    inputs: dict[str, str],
    parameters: dict,
    output_names: list[str],
) -> None:
    manifest = {
        "tool": "fdlearn",
        "version": __version__,
        "command": command,
        "created_utc": _timestamp(),
        "inputs": inputs,
        "parameters": parameters,
        "outputs": {name: sha256_file(out_dir / name) for name in sorted(output_names)},
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = read_scenario_json(Path(args.config))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_scenario(cfg)
    write_trajectories_csv(out_dir / "trajectories.csv", result.trajectories)
    write_detectors_jsonl(out_dir / "detectors.jsonl", result.detector_logs)
    write_field(out_dir, result.field)
    write_scenario_json(out_dir / "scenario.json", cfg)
    _write_manifest(
        out_dir,
        "simulate",
        inputs={Path(args.config).name: sha256_file(Path(args.config))},
        parameters={"seed": cfg.seed},
        output_names=[
            "trajectories.csv",
            "detectors.jsonl",
            "field.bin",
            "field.json",
            "scenario.json",
        ],
    )
    print(
        f"simulated {len(result.trajectories)} probe trajectories, "
        f"{len(result.detector_logs)} detectors -> {out_dir}"
    )
    return 0


def _load_split(
    data_dir: Path,
    train_n: int,
    test_n: int,
    seed: int,
    rho_j_ref: float,
    u_floor: float,
):
    """Read a dataset directory and produce seeded, co-located splits."""
    trajectories = read_trajectories_csv(data_dir / "trajectories.csv")
    logs = read_detectors_jsonl(data_dir / "detectors.jsonl")
    if len(trajectories) < train_n + test_n:
        raise DataError(
            f"need {train_n + test_n} trajectories "
            f"({train_n} train + {test_n} test), dataset has {len(trajectories)}"
        )
    dts = {t.dt for t in trajectories}
    if len(dts) > 1:
        raise DataError(f"mixed sampling intervals in dataset: {sorted(dts)}")
    delta_t = trajectories[0].dt

    split_ss, init_ss = np.random.SeedSequence(seed).spawn(2)
    perm = np.random.default_rng(split_ss).permutation(len(trajectories))
    train_trajs = [trajectories[i] for i in perm[:train_n]]
    test_trajs = [trajectories[i] for i in perm[train_n : train_n + test_n]]

    pairs_train = colocate(train_trajs, logs, rho_j_ref, u_floor)
    pairs_test = colocate(test_trajs, logs, rho_j_ref, u_floor)
    data = Dataset(train=tuple(pairs_train), test=tuple(pairs_test), delta_t=delta_t)
    init_seed = int(init_ss.generate_state(1)[0])
    return data, init_seed


def _roadway_length(data_dir: Path) -> float | None:
    scenario_path = data_dir / "scenario.json"
    if not scenario_path.exists():
        return None
    return read_scenario_json(scenario_path).roadway_length


def cmd_fit(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, init_seed = _load_split(
        data_dir, args.train, args.test, args.seed, args.rho_j_ref, args.u_floor
    )
    if args.decompose != "off":
        data = decompose_steps(data, include_original=args.decompose == "augment")

    status = "closed-form"
    report_dict: dict
    if args.model == "greenshields-ls":
        rho, speed = pooled_points(data.train)
        params = fit_greenshields_ls(rho, speed)
        model = FdModel(variant="greenshields-ls", params=params)
        rows = evaluate([("greenshields-ls", model)], data)
        report_dict = {
            "variant": "greenshields-ls",
            "status": status,
            "n_train": len(data.train),
            "n_test": len(data.test),
            "losses": {f"{split}": value for _, split, value in rows},
            "u0": params.u0,
            "rho_j": params.rho_j,
        }
    else:
        x_ref = None
        if args.model == "nn2":
            x_ref = args.x_ref if args.x_ref is not None else _roadway_length(data_dir)
            if x_ref is None:
                raise DataError(
                    "nn2 needs a position scale: provide --x-ref or a "
                    "scenario.json in the data directory"
                )
        hidden = tuple(int(n) for n in args.hidden.split(",") if n)
        start = initial_model(
            args.model,
            data,
            hidden=hidden,
            rho_j_ref=args.rho_j_ref,
            x_ref=x_ref,
            seed=init_seed,
        )
        cfg = TrainConfig(
            learning_rate=args.lr,
            max_epochs=args.max_epochs,
            convergence_eps=args.convergence_eps,
            patience=args.patience,
            weighting=args.weighting,
            residual=args.residual,
        )
        report = train(start, data, cfg)
        model = report.model
        status = report.status
        report_dict = report.to_dict()

    write_checkpoint(out_dir / "checkpoint.json", model)
    atomic_write_text(
        out_dir / "report.json", json.dumps(report_dict, indent=2) + "\n"
    )
    if args.dump_colocated:
        colocated_dir = out_dir / "colocated"
        colocated_dir.mkdir(exist_ok=True)
        for split_name, pairs in (("train", data.train), ("test", data.test)):
            for traj, density in pairs:
                write_colocated_csv(
                    colocated_dir / f"{split_name}-{traj.vehicle_id}.csv",
                    traj,
                    density,
                )

    inputs = {
        "trajectories.csv": sha256_file(data_dir / "trajectories.csv"),
        "detectors.jsonl": sha256_file(data_dir / "detectors.jsonl"),
    }
    if (data_dir / "scenario.json").exists():
        inputs["scenario.json"] = sha256_file(data_dir / "scenario.json")
    _write_manifest(
        out_dir,
        "fit",
        inputs=inputs,
        parameters={
            "model": args.model,
            "train": args.train,
            "test": args.test,
            "seed": args.seed,
            "lr": args.lr,
            "max_epochs": args.max_epochs,
            "convergence_eps": args.convergence_eps,
            "patience": args.patience,
            "weighting": args.weighting,
            "residual": args.residual,
            "decompose": args.decompose,
            "rho_j_ref": args.rho_j_ref,
            "u_floor": args.u_floor,
            "hidden": args.hidden,
        },
        output_names=["checkpoint.json", "report.json"],
    )
    print(f"fit {args.model}: {status} -> {out_dir / 'checkpoint.json'}")
    if status.startswith("aborted"):
        print(f"error: training halted: {status}", file=sys.stderr)
        return 1
    return 0


def _sensing_params_from_models(
    models: list[FdModel], data_dir: Path, fallback_rho_j_ref: float
) -> float:
    """All neural checkpoints must agree on rho_j_ref and match the roadway."""
    refs = {
        m.params.rho_j_ref for m in models if isinstance(m.params, NeuralFdParams)
    }
    if len(refs) > 1:
        raise ContractError(
            f"checkpoints disagree on rho_j_ref: {sorted(refs)}"
        )
    length = _roadway_length(data_dir)
    for m in models:
        if m.variant == "nn2" and length is not None:
            x_ref = m.params.x_ref
            if abs(x_ref - length) > 1e-6 * max(length, 1.0):
                raise ContractError(
                    f"nn2 checkpoint x_ref {x_ref} does not match roadway "
                    f"length {length}"
                )
    return refs.pop() if refs else fallback_rho_j_ref


def cmd_evaluate(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    models = [read_checkpoint(Path(p)) for p in args.ckpt]
    rho_j_ref = _sensing_params_from_models(models, data_dir, args.rho_j_ref)
    data, _ = _load_split(
        data_dir, args.train, args.test, args.seed, rho_j_ref, args.u_floor
    )
    rows = evaluate([(m.variant, m) for m in models], data)
    text = metric_table_csv(rows)
    if args.out:
        atomic_write_text(Path(args.out), text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    model = read_checkpoint(Path(args.ckpt))
    if args.rho_steps < 2:
        raise RangeError("--rho-steps must be at least 2")

    if isinstance(model.params, GreenshieldsParams):
        rho_cap = model.params.rho_j
    else:
        rho_cap = model.params.rho_j_ref
    rho_max = args.rho_max if args.rho_max is not None else rho_cap
    if not 0.0 < rho_max <= rho_cap * (1.0 + 1e-12):
        raise RangeError(
            f"--rho-max must lie in (0, {rho_cap}] for this model, got {rho_max}"
        )
    rho_grid = np.linspace(0.0, rho_max, args.rho_steps)

    lines = []
    if model.variant == "nn2":
        x_ref = model.params.x_ref
        if args.slice:
            xs = np.array(sorted(args.slice), dtype=float)
            if np.any(xs < 0) or np.any(xs > x_ref):
                raise RangeError(
                    f"slice positions must lie in [0, {x_ref}], got {args.slice}"
                )
        else:
            if args.x_steps < 2:
                raise RangeError("--x-steps must be at least 2")
            xs = np.linspace(0.0, x_ref, args.x_steps)
        lines.append("rho,x,speed,flux")
        for x in xs:
            speeds = eval_speed(model, rho_grid, np.full_like(rho_grid, x))
            fluxes = rho_grid * speeds
            for r, u, q in zip(rho_grid, speeds, fluxes):
                lines.append(
                    f"{fmt_float(r)},{fmt_float(x)},{fmt_float(u)},{fmt_float(q)}"
                )
    else:
        if args.slice:
            raise RangeError(f"--slice only applies to nn2, not {model.variant}")
        speeds = np.atleast_1d(eval_speed(model, rho_grid))
        fluxes = np.atleast_1d(eval_flux(model, rho_grid))
        lines.append("rho,speed,flux")
        for r, u, q in zip(rho_grid, speeds, fluxes):
            lines.append(f"{fmt_float(r)},{fmt_float(u)},{fmt_float(q)}")

    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(Path(args.out), text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdlearn",
        description="Calibrate fundamental diagrams from probe trajectories.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a roadway scenario to files")
    p_sim.add_argument("--config", required=True, help="scenario JSON")
    p_sim.add_argument("--out", required=True, help="output dataset directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit an FD model to a dataset")
    p_fit.add_argument("--data", required=True, help="dataset directory")
    p_fit.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--train", type=int, default=500)
    p_fit.add_argument("--test", type=int, default=100)
    p_fit.add_argument("--lr", type=float, default=0.1)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--max-epochs", type=int, default=4000)
    p_fit.add_argument("--convergence-eps", type=float, default=1e-5)
    p_fit.add_argument("--patience", type=int, default=10)
    p_fit.add_argument("--hidden", default="10,10", help="hidden layer sizes")
    p_fit.add_argument("--rho-j-ref", type=float, default=DEFAULT_RHO_J_REF)
    p_fit.add_argument("--u-floor", type=float, default=DEFAULT_U_FLOOR)
    p_fit.add_argument("--x-ref", type=float, default=None)
    p_fit.add_argument(
        "--weighting", choices=("per-trajectory", "per-point"),
        default="per-trajectory",
    )
    p_fit.add_argument("--residual", choices=("sum", "mean"), default="sum")
    p_fit.add_argument(
        "--decompose", choices=("off", "replace", "augment"), default="off",
        help="split trajectories into 1-step pieces before training",
    )
    p_fit.add_argument(
        "--dump-colocated", action="store_true",
        help="also write per-trajectory co-located CSVs",
    )
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("evaluate", help="loss table for checkpoints")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument(
        "--ckpt", action="append", required=True, help="repeatable checkpoint path"
    )
    p_eval.add_argument("--train", type=int, default=500)
    p_eval.add_argument("--test", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--rho-j-ref", type=float, default=DEFAULT_RHO_J_REF)
    p_eval.add_argument("--u-floor", type=float, default=DEFAULT_U_FLOOR)
    p_eval.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_eval.set_defaults(func=cmd_evaluate)

    p_exp = sub.add_parser("export", help="tabulate a checkpoint's FD surface")
    p_exp.add_argument("--ckpt", required=True)
    p_exp.add_argument("--rho-steps", type=int, default=101)
    p_exp.add_argument("--x-steps", type=int, default=21)
    p_exp.add_argument(
        "--slice", action="append", type=float, default=None,
        help="repeatable fixed-x slice position (nn2 only)",
    )
    p_exp.add_argument("--rho-max", type=float, default=None)
    p_exp.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_exp.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
