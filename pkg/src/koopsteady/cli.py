"""Config-driven runner: ``simulate``, ``fit``, ``program``, ``verify``, ``pipeline``.

Exit codes: 0 success, 1 an acceptance threshold was missed, 2 bad
configuration or I/O.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .deepdmd import KoopmanModel, TrainConfig, multi_step_predict, train, trajectory_errors, write_loss_curve
from .dmdc import fit_dmdc
from .numerics import NumericsError, Trajectory
from .ssprog import (
    FORMS,
    OptimizerConfig,
    SteadyStateProblem,
    SteadyStateSolution,
    UnsolvableError,
    brute_force_oracle,
    solve,
    verify,
)
from .systems import (
    ConfigurationError,
    InputSignal,
    assemble_snapshots,
    generate_dataset,
    make_system,
    read_dataset,
    split_indices,
    write_dataset,
    write_trajectory_csv,
)

log = logging.getLogger("koopsteady")

EXIT_OK, EXIT_THRESHOLD, EXIT_CONFIG = 0, 1, 2
BUNDLED = ("iffl", "promoter", "linear")

DEFAULTS = {
    "seed": 0,
    "system": {"name": None, "params": {}, "options": {}},
    "dataset": {
        "n_traj": 100,
        "n_steps": 100,
        "dt": 0.1,
        "ic_box": [0.0, 2.0],
        "input_kind": "step",
        "input_box": None,
        "ramp_tau": None,
        "train_fraction": 0.75,
    },
    "fit": {
        "estimator": "deepdmd",
        "horizon": None,
        "error_ceiling": 0.10,
        "val_fraction": 0.2,
        "rank_tol": 1e-10,
        "train": {},
    },
    "program": {
        "targets": [0],
        "input_box": None,
        "constraint_form": "no_mixed",
        "optimizer": {},
    },
    "verify": {
        "n_random": 20,
        "grid_per_dim": 21,
        "horizon": 1000,
        "x0": 1.0,
        "tol": 1e-6,
        "rel_tol": 0.05,
        "trajectory_csvs": True,
    },
}
_OPEN_SECTIONS = {("system", "params"), ("system", "options"), ("fit", "train"), ("program", "optimizer")}


# -------------------------------------------------------------------- config


def _merge(base, override, path=()):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            dotted = ".".join(path + (key,))
            raise ConfigurationError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and path + (key,) not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {'.'.join(path + (key,))!r} must be a mapping")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def bundled_config_path(name: str) -> Path:
    return Path(str(resources.files("koopsteady") / "configs" / f"{name}.yaml"))


def load_config(source, seed=None) -> dict:
    """Read a YAML config (path or bundled name), fill defaults and validate."""
    path = Path(source)
    if not path.exists() and str(source) in BUNDLED:
        path = bundled_config_path(str(source))
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {source}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {source} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def _box(value, dim, what):
    box = np.asarray(value, dtype=float)
    if box.shape == (2,):
        box = np.tile(box, (dim, 1))
    if box.shape != (dim, 2):
        raise ConfigurationError(f"{what} needs {dim} rows of [lo, hi]")
    if np.any(box[:, 0] >= box[:, 1]):
        raise ConfigurationError(f"{what} needs lo < hi in every row")
    return box


def _x0(value, n):
    x0 = np.asarray(value, dtype=float).reshape(-1)
    if x0.size == 1:
        x0 = np.full(n, float(x0[0]))
    if x0.size != n:
        raise ConfigurationError(f"verify.x0 needs {n} entries")
    return x0


def validate_config(cfg) -> None:
    """Raise ConfigurationError on anything that would fail later."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigurationError("seed must be a nonnegative integer")
    sysc = cfg["system"]
    if not sysc["name"]:
        raise ConfigurationError("system.name is required")
    spec = make_system(sysc["name"], sysc["params"] or None, **sysc["options"])
    n, m = spec.state_dim, spec.input_dim

    ds = cfg["dataset"]
    if int(ds["n_traj"]) < 1 or int(ds["n_steps"]) < 1:
        raise ConfigurationError("dataset needs n_traj >= 1 and n_steps >= 1")
    if not float(ds["dt"]) > 0:
        raise ConfigurationError("dataset.dt must be positive")
    if ds["input_kind"] not in ("step", "ramp"):
        raise ConfigurationError("dataset.input_kind must be 'step' or 'ramp'")
    if ds["input_box"] is None:
        raise ConfigurationError("dataset.input_box is required")
    _box(ds["input_box"], m, "dataset.input_box")
    _box(ds["ic_box"], n, "dataset.ic_box")
    if not 0.0 < float(ds["train_fraction"]) < 1.0:
        raise ConfigurationError("dataset.train_fraction must be in (0, 1)")

    fit = cfg["fit"]
    if fit["estimator"] not in ("dmdc", "deepdmd"):
        raise ConfigurationError("fit.estimator must be 'dmdc' or 'deepdmd'")
    if not 0.0 <= float(fit["val_fraction"]) < 1.0:
        raise ConfigurationError("fit.val_fraction must be in [0, 1)")
    if fit["horizon"] is not None and not 1 <= int(fit["horizon"]) <= int(ds["n_steps"]):
        raise ConfigurationError("fit.horizon must be in [1, dataset.n_steps]")
    if fit["estimator"] == "deepdmd":
        try:
            train_config(cfg).validate(n, m)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"fit.train: {exc}") from exc

    prog = cfg["program"]
    if prog["constraint_form"] not in FORMS:
        raise ConfigurationError(
            f"program.constraint_form {prog['constraint_form']!r} is not one of {FORMS}"
        )
    targets = prog["targets"]
    if not targets or any(not isinstance(i, int) or not 0 <= i < n for i in targets):
        raise ConfigurationError(f"program.targets must be state indices in [0, {n})")
    _box(program_box(cfg), m, "program.input_box")
    try:
        optimizer_config(cfg)
    except TypeError as exc:
        raise ConfigurationError(f"program.optimizer: {exc}") from exc

    ver = cfg["verify"]
    if int(ver["n_random"]) < 0 or int(ver["grid_per_dim"]) < 2 or int(ver["horizon"]) < 1:
        raise ConfigurationError("verify needs n_random >= 0, grid_per_dim >= 2, horizon >= 1")
    if ver["tol"] is not None and not float(ver["tol"]) > 0:
        raise ConfigurationError("verify.tol must be positive or null")
    _x0(ver["x0"], n)


def train_config(cfg) -> TrainConfig:
    kw = dict(cfg["fit"]["train"])
    kw.setdefault("seed", cfg["seed"])
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    return TrainConfig(**kw)


def optimizer_config(cfg) -> OptimizerConfig:
    kw = dict(cfg["program"]["optimizer"])
    kw.setdefault("seed", cfg["seed"])
    return OptimizerConfig(**kw)


def program_box(cfg):
    box = cfg["program"]["input_box"]
    return cfg["dataset"]["input_box"] if box is None else box


def system_from_config(cfg):
    s = cfg["system"]
    return make_system(s["name"], s["params"] or None, **s["options"])


# ------------------------------------------------------------------- helpers


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def write_series_csv(path, times, series: dict) -> None:
    """Long-format plot data with columns ``t,series_id,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "series_id", "value"])
        for sid, values in series.items():
            for t, v in zip(times, values):
                w.writerow([repr(float(t)), sid, repr(float(v))])


def _split(cfg, n_traj):
    return split_indices(n_traj, float(cfg["dataset"]["train_fraction"]), cfg["seed"])


# ------------------------------------------------------------------ commands


def cmd_simulate(cfg, out: Path) -> dict:
    spec = system_from_config(cfg)
    ds = cfg["dataset"]
    dt = float(ds["dt"])
    ic_box = _box(ds["ic_box"], spec.state_dim, "dataset.ic_box")
    in_box = _box(ds["input_box"], spec.input_dim, "dataset.input_box")
    tau = float(ds["ramp_tau"]) if ds["ramp_tau"] is not None else 10.0 * dt

    def ic(rng):
        return rng.uniform(ic_box[:, 0], ic_box[:, 1])

    def inputs(rng):
        return InputSignal(ds["input_kind"], rng.uniform(in_box[:, 0], in_box[:, 1]), tau=tau)

    trajs = generate_dataset(spec, int(ds["n_traj"]), int(ds["n_steps"]), dt, ic, inputs, cfg["seed"])
    write_dataset(out / "dataset", spec, trajs, dt, cfg["seed"],
                  {"input_kind": ds["input_kind"], "ramp_tau": tau})
    print(f"simulate: wrote {len(trajs)} trajectories to {out / 'dataset'}")
    return {"n_traj": len(trajs), "n_steps": int(ds["n_steps"])}


def cmd_fit(cfg, out: Path, dataset=None) -> tuple[dict, bool]:
    dataset = Path(dataset) if dataset else out / "dataset"
    if not (dataset / "manifest.json").exists():
        raise ConfigurationError(f"no dataset at {dataset} (run simulate first)")
    _, trajs = read_dataset(dataset)
    if len(trajs) < 2:
        raise ConfigurationError("fitting needs at least two trajectories (train and test)")
    tr_idx, te_idx = _split(cfg, len(trajs))
    train_trajs = [trajs[i] for i in tr_idx]
    test_trajs = [trajs[i] for i in te_idx]
    fit = cfg["fit"]
    report = {"estimator": fit["estimator"], "n_train": len(train_trajs), "n_test": len(test_trajs)}

    if fit["estimator"] == "dmdc":
        lin = fit_dmdc(assemble_snapshots(train_trajs), float(fit["rank_tol"]))
        model = KoopmanModel.from_linear(lin)
        report["residual"] = lin.residual
        report["rank_deficient"] = lin.rank_deficient
        (out / "model.json").write_text(lin.to_json() + "\n")
    else:
        tcfg = train_config(cfg)
        # validation trajectories come out of the training share only
        vf = float(fit["val_fraction"])
        fit_trajs, val_trajs = train_trajs, []
        if vf > 0 and len(train_trajs) > 1:
            a, b = split_indices(len(train_trajs), 1.0 - vf, cfg["seed"] + 1)
            fit_trajs = [train_trajs[i] for i in a]
            val_trajs = [train_trajs[i] for i in b]
        model = train(tcfg, assemble_snapshots(fit_trajs),
                      assemble_snapshots(val_trajs) if val_trajs else None)
        write_loss_curve(out / "loss_curve.csv", model.metadata["loss_curve"])
        (out / "model.json").write_text(model.to_json() + "\n")
        report["n_fit"], report["n_val"] = len(fit_trajs), len(val_trajs)
        report["best_val_loss"] = model.metadata["best_val_loss"]
        report["unit_eigenvalue"] = model.metadata["unit_eigenvalue"]
    report["max_abs_eigenvalue"] = float(np.max(np.abs(model.eigenvalues())))

    horizon = int(fit["horizon"]) if fit["horizon"] is not None else int(cfg["dataset"]["n_steps"]) - 1
    horizon = max(horizon, 1)
    errs = trajectory_errors(model, test_trajs, horizon)
    report.update({
        "horizon": horizon,
        "median_error": float(np.median(errs)),
        "max_error": float(np.max(errs)),
        "errors": [float(e) for e in errs],
        "error_ceiling": float(fit["error_ceiling"]),
    })
    passed = report["median_error"] <= report["error_ceiling"]
    report["passed"] = passed
    _write_json(out / "fit_report.json", report)

    first = test_trajs[0]
    pred = multi_step_predict(model, first.states[0], first.inputs, horizon)
    t = first.times[: horizon + 1]
    series = {}
    for j in range(model.n):
        series[f"true_x{j}"] = first.states[: horizon + 1, j]
        series[f"pred_x{j}"] = pred[:, j]
    write_series_csv(out / "prediction_plot.csv", t, series)
    extra = f", residual {report['residual']:.3e}" if "residual" in report else ""
    print(f"fit: {fit['estimator']} median {horizon}-step error {report['median_error']:.4g} "
          f"(ceiling {report['error_ceiling']:.3g}){extra}")
    return report, passed


def _load_model(path) -> KoopmanModel:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"no model at {path} (run fit first)")
    try:
        return KoopmanModel.from_dict(_read_json(path))
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"cannot load model {path}: {exc}") from exc


def cmd_program(cfg, out: Path, model_path=None) -> dict:
    model = _load_model(model_path or out / "model.json")
    box = _box(program_box(cfg), model.m, "program.input_box")
    form = cfg["program"]["constraint_form"]
    opt = optimizer_config(cfg)
    results = {}
    for i in cfg["program"]["targets"]:
        try:
            sol = solve(SteadyStateProblem(model, i, box, form), opt)
        except (UnsolvableError, NumericsError) as exc:
            _write_json(out / f"solution_x{i}.json", {"target_index": i, "error": str(exc)})
            print(f"program: x{i} unsolvable: {exc}")
            results[i] = None
            continue
        _write_json(out / f"solution_x{i}.json", sol.to_dict())
        print(f"program: x{i} u* = {np.array2string(sol.u_star, precision=6)} "
              f"predicted {sol.predicted_value:.6g}")
        results[i] = sol
    return results


def _verify_one(cfg, out: Path, spec, sol: SteadyStateSolution) -> dict:
    ver = cfg["verify"]
    i = sol.target_index
    dt = float(cfg["dataset"]["dt"])
    box = _box(program_box(cfg), spec.input_dim, "program.input_box")
    x0 = _x0(ver["x0"], spec.state_dim)
    horizon = int(ver["horizon"])
    tol = None if ver["tol"] is None else float(ver["tol"])
    oracle = brute_force_oracle(spec, box, int(ver["grid_per_dim"]), x0, horizon, i, dt, tol)
    rep = verify(spec, sol, int(ver["n_random"]), x0, horizon, cfg["seed"], box=box, dt=dt,
                 oracle=oracle, rel_tol=float(ver["rel_tol"]), tol=tol)
    d = rep.to_dict(starts=sol.starts)
    d["equilibrium_residual"] = sol.equilibrium_residual
    _write_json(out / f"verify_x{i}.json", d)
    write_series_csv(out / f"verify_x{i}_plot.csv", rep.times,
                     {label: states[:, i] for label, (_, states) in rep.trajectories.items()})
    if ver["trajectory_csvs"]:
        tdir = out / f"verify_x{i}"
        tdir.mkdir(exist_ok=True)
        for label, (u, states) in rep.trajectories.items():
            write_trajectory_csv(tdir / f"{label}.csv",
                                 Trajectory(dt, states, np.tile(u, (horizon, 1))))
    print(f"verify: x{i} achieved {rep.achieved_value:.6g} oracle {rep.oracle_value:.6g} "
          f"gap {rep.oracle_gap:.4f} beats {rep.beats_fraction:.2f} -> "
          f"{'PASS' if rep.passed() else 'FAIL'}")
    return d


def cmd_verify(cfg, out: Path, solutions=None) -> tuple[list, bool]:
    spec = system_from_config(cfg)
    if solutions is None:
        solutions = {}
        for i in cfg["program"]["targets"]:
            path = out / f"solution_x{i}.json"
            if not path.exists():
                raise ConfigurationError(f"no solution at {path} (run program first)")
            d = _read_json(path)
            solutions[i] = None if "error" in d else SteadyStateSolution.from_dict(d)
    reports, ok = [], True
    for i, sol in solutions.items():
        if sol is None:
            reports.append({"target_index": i, "passed": False, "error": "program unsolvable"})
            ok = False
            continue
        d = _verify_one(cfg, out, spec, sol)
        reports.append(d)
        ok = ok and d["passed"]
    return reports, ok


def config_digest(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def cmd_pipeline(cfg, out: Path) -> tuple[dict, bool]:
    cmd_simulate(cfg, out)
    fit_report, fit_ok = cmd_fit(cfg, out)
    sols = cmd_program(cfg, out)
    reports, ver_ok = cmd_verify(cfg, out, sols)
    keep = ("target_index", "u_star", "predicted_value", "achieved_value", "oracle_u",
            "oracle_value", "oracle_gap", "beats_fraction", "beats_fraction_strict",
            "equilibrium_residual", "passed", "error")
    summary = {
        "system": cfg["system"]["name"],
        "config_sha256": config_digest(cfg),
        "seed": cfg["seed"],
        "fit": {k: fit_report[k] for k in ("estimator", "horizon", "median_error", "max_error",
                                           "error_ceiling", "max_abs_eigenvalue", "passed")},
        "targets": [{k: r[k] for k in keep if k in r} for r in reports],
    }
    summary["passed"] = bool(fit_ok and ver_ok)
    _write_json(out / "summary.json", summary)
    print(f"pipeline: {'PASS' if summary['passed'] else 'FAIL'} (summary in {out / 'summary.json'})")
    return summary, summary["passed"]


# ---------------------------------------------------------------------- main


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML config path or bundled name (iffl, promoter, linear)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="koopsteady", parents=[common],
                                description="Koopman steady-state programming pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a trajectory dataset")
    f = sub.add_parser("fit", parents=[common], help="fit a model to the dataset")
    f.add_argument("--dataset", help="dataset directory (default: OUT/dataset)")
    pr = sub.add_parser("program", parents=[common], help="solve the steady-state programs")
    pr.add_argument("--model", help="model JSON (default: OUT/model.json)")
    sub.add_parser("verify", parents=[common], help="check solutions on the true system")
    sub.add_parser("pipeline", parents=[common], help="simulate, fit, program and verify")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "config"):
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(getattr(args, "out", "out"))
    try:
        cfg = load_config(args.config, getattr(args, "seed", None))
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
            return EXIT_OK
        if args.command == "fit":
            _, ok = cmd_fit(cfg, out, args.dataset)
        elif args.command == "program":
            sols = cmd_program(cfg, out, args.model)
            ok = all(s is not None for s in sols.values())
        elif args.command == "verify":
            _, ok = cmd_verify(cfg, out)
        else:
            _, ok = cmd_pipeline(cfg, out)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if ok else EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
