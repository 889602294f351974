"""Command-line front end: ``qfc simulate|estimate|control|sweep|train``.

Every command reads one TOML config, applies ``--set key=value`` overrides
(dotted keys address nested tables, flags win over the file) and writes
versioned CSV tables, a flat ``summary.txt`` and SVG charts into ``--out``.
Outputs depend only on the config, the input files and the seed, so a rerun
reproduces them byte for byte.

Config layout::

    seed = 7                      # or --seed
    [scenario]
    name = "qho"                  # plus any scenario parameter, e.g. kappa = 0.1
    [run]
    steps = 6000                  # default: scenario horizon / dt
    ensemble = 1                  # trajectories
    stride = 10                   # sample every `stride` steps
    stages = "estimate_then_control"
    delay_steps = 0
    estimator_init = "random"     # "matched" or a state recipe; default per scenario
    [controller]
    law = "damping"               # none | damping | two_qubit_sym | two_qubit_asym
    gain = 1.0                    #   | qubit_reset | parametric_policy
    [estimator]
    record = "out/record.csv"     # estimate: input record
    truth = "out/truth_states.npy"
    lambda_scale = 1.0
    [sweep]
    axis = "eta"                  # eta | kappa | lambda_scale | delay_steps
    values = [0.25, 0.5, 1.0]
    [cem]
    population = 16
    generations = 20
    eval_delays = [0, 5, 20]
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .controllers import PolicyLaw, make_law
from .estimator import DEFAULT_THRESHOLD, DEFAULT_WINDOW, MismatchSpec, run_estimation
from .hilbert import expectation_real, fidelity_batch, purity
from .plots import chart_from_table
from .policy import CemConfig, cem_train, evaluate_population, n_weights
from .protocol import STAGES, run_protocol
from .scenarios import build, leakage_guard, simulate
from .sme import MeasurementRecord, ensemble_increments, lindblad_solve

COMMANDS = ("simulate", "estimate", "control", "sweep", "train")
SWEEP_AXES = ("eta", "kappa", "lambda_scale", "delay_steps")
EVAL_OFFSET = 1_000_000  # evaluation episodes never reuse training noise


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- config


def _table(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(value)


def _check_files(config: dict) -> None:
    paths = [v for k, v in _table(config, "scenario").items() if k.endswith("_file")]
    paths += [config.get("estimator", {}).get(k) for k in ("record", "truth")]
    paths.append(config.get("controller", {}).get("weights"))
    paths.append(config.get("cem", {}).get("init_weights"))
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"referenced file {p!r} does not exist")


def resolve_config(path, overrides, seed) -> dict:
    config = io.apply_overrides(io.load_config(path), overrides or [])
    if seed is not None:
        config["seed"] = seed
    if "seed" not in config:
        raise ConfigError("a seed is required (--seed or top-level `seed` in the config)")
    if not isinstance(config["seed"], int) or config["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {config['seed']!r}")
    _check_files(config)
    return config


def scenario_from(config: dict):
    sc = _table(config, "scenario")
    name = sc.pop("name", None)
    if name is None:
        raise ConfigError("[scenario] needs a `name`")
    sc["seed"] = config["seed"]
    return build(name, sc)


def _run_options(config: dict, spec) -> dict:
    run = _table(config, "run")
    steps = run.pop("steps", None)
    n_steps = int(round(spec.horizon / spec.cfg.dt)) if steps is None else int(steps)
    if n_steps < 1:
        raise ConfigError("run.steps must be at least 1")
    opts = dict(
        n_steps=n_steps,
        ensemble=int(run.pop("ensemble", 1)),
        stride=int(run.pop("stride", 1)),
        stages=run.pop("stages", "estimate_then_control"),
        delay_steps=int(run.pop("delay_steps", 0)),
        estimator_init=run.pop("estimator_init", None),
        budget=run.pop("estimation_budget", None),
        threshold=float(run.pop("threshold", DEFAULT_THRESHOLD)),
        window=int(run.pop("window", DEFAULT_WINDOW)),
        first_index=int(run.pop("first_index", 0)),
        observables=run.pop("observables", None),
    )
    if run:
        raise ConfigError(f"unknown [run] key(s): {sorted(run)}")
    if opts["ensemble"] < 1 or opts["stride"] < 1:
        raise ConfigError("run.ensemble and run.stride must be positive")
    if opts["stages"] not in STAGES:
        raise ConfigError(f"run.stages must be one of {STAGES}")
    return opts


def _law_from(config: dict):
    ctl = _table(config, "controller")
    variant = ctl.pop("law", "none")
    weights = ctl.pop("weights", None)
    if variant == "parametric_policy":
        if weights is None:
            raise ConfigError("parametric_policy needs controller.weights (a weights file)")
        ctl["weights"] = io.read_vector(weights)
    return make_law(variant, **ctl)


def _observables(spec, names) -> dict:
    if names is None:
        return {k: op for k, op in sorted(spec.ops.items()) if np.allclose(op, op.conj().T)}
    missing = [n for n in names if n not in spec.ops]
    if missing:
        raise ConfigError(f"scenario {spec.name!r} has no operator(s) {missing}; known: {sorted(spec.ops)}")
    return {n: spec.ops[n] for n in names}


def _estimator_start(how):
    if how is None or isinstance(how, str):
        return how
    raise ConfigError("run.estimator_init must be 'matched' or a state recipe")


# --------------------------------------------------------------- commands


def cmd_simulate(config: dict, out: Path) -> dict:
    """Record and true trajectory of one run, or ensemble means against the master equation."""
    spec = scenario_from(config)
    opts = _run_options(config, spec)
    n, stride = opts["n_steps"], opts["stride"]
    if opts["ensemble"] > 1:
        return _simulate_ensemble(spec, opts, out)
    history, record = simulate(spec, n, index=opts["first_index"], stride=1)
    record.write_csv(out / "record.csv")
    kept = history[::stride]
    obs = _observables(spec, opts["observables"])
    rows = []
    for st in kept:
        rows.append([st.t, expectation_real(spec.A, st.rho), purity(st.rho)] + [expectation_real(op, st.rho) for op in obs.values()])
    io.write_table(out / "truth.csv", ["t", "expA_true", "purity_true"] + list(obs), rows)
    np.save(out / "truth_states.npy", np.array([st.rho for st in history]))
    chart_from_table(out / "truth.svg", out / "truth.csv", "t", ["expA_true", "purity_true"], title=f"{spec.name}: true state", xlabel="t")
    leak = leakage_guard(spec, [spec.leakage(st.rho) for st in kept], action="warn")
    summary = dict(command="simulate", scenario=spec.name, seed=config["seed"], steps=n, dt=spec.cfg.dt, leakage_max=leak)
    io.write_summary(out / "summary.txt", summary)
    return summary


def _simulate_ensemble(spec, opts, out):
    n, B, stride = opts["n_steps"], opts["ensemble"], opts["stride"]
    cfg = spec.cfg
    rho0 = spec.initial_state(np.random.default_rng(np.random.SeedSequence([cfg.seed, opts["first_index"], 1])))
    obs = _observables(spec, opts["observables"])
    obs = {"A": spec.A, **obs}
    dWs = ensemble_increments(cfg.seed, range(opts["first_index"], opts["first_index"] + B), n, cfg.dt, len(spec.channels))
    rho = np.broadcast_to(rho0, (B,) + rho0.shape).copy()
    times, means = [0.0], [[float(np.mean(expectation_real(op, rho))) for op in obs.values()]]
    for k in range(n):
        rho = spec.step(rho, spec.H0, dWs[k].reshape(B, -1))
        if (k + 1) % stride == 0:
            times.append((k + 1) * cfg.dt)
            means.append([float(np.mean(expectation_real(op, rho))) for op in obs.values()])
    c_ops = [(Aj, rate) for Aj, rate, _ in spec.channels] + list(cfg.extra_dissipators)
    exact = lindblad_solve(rho0, spec.H0, c_ops, times)
    ref = np.array([[expectation_real(op, r) for op in obs.values()] for r in exact])
    means = np.array(means)
    cols = ["t"] + [f"mean_{k}" for k in obs] + [f"lindblad_{k}" for k in obs]
    io.write_table(out / "ensemble.csv", cols, np.column_stack([times, means, ref]))
    chart_from_table(
        out / "ensemble.svg", out / "ensemble.csv", "t", ["mean_A", "lindblad_A"], title=f"{spec.name}: ensemble mean of A", xlabel="t"
    )
    summary = dict(command="simulate", scenario=spec.name, seed=cfg.seed, steps=n, dt=cfg.dt, ensemble=B)
    for j, k in enumerate(obs):
        summary[f"max_dev_{k}"] = float(np.max(np.abs(means[:, j] - ref[:, j])))
    io.write_summary(out / "summary.txt", summary)
    return summary


def cmd_estimate(config: dict, out: Path) -> dict:
    """Replay a recorded current through the estimator."""
    spec = scenario_from(config)
    est = _table(config, "estimator")
    opts = _run_options(config, spec)
    if "record" not in est:
        raise ConfigError("estimate needs estimator.record (a record CSV)")
    _, data = io.read_table(est["record"])
    # a single row carries no spacing, so fall back to the scenario step
    record = MeasurementRecord.read_csv(est["record"], spec.cfg.kappa, spec.cfg.eta, None if len(data) > 1 else spec.cfg.dt)
    if len(record) == 0:
        raise ConfigError(f"{est['record']}: record has no rows")
    if record.channels != len(spec.channels):
        raise ConfigError(f"record has {record.channels} current column(s); scenario {spec.name!r} has {len(spec.channels)} channel(s)")
    truth = None
    if "truth" in est:
        truth = np.load(est["truth"])
        if truth.shape[1:] != (spec.dim, spec.dim):
            raise ConfigError(f"truth states are {truth.shape[1:]}, scenario dimension is {spec.dim}")
        if len(truth) < len(record) + 1:
            raise ConfigError(f"truth holds {len(truth)} states, record needs {len(record) + 1}")
        truth = truth[: len(record) + 1]
    init = _estimator_start(est.get("init", opts["estimator_init"]))
    if init == "matched":
        rho_e0 = truth[0] if truth is not None else spec.initial_state(
            np.random.default_rng(np.random.SeedSequence([spec.cfg.seed, opts["first_index"], 1]))
        )
    else:
        how = spec.estimator_init if init is None else init
        rho_e0 = spec._resolve(how, np.random.default_rng(np.random.SeedSequence([spec.cfg.seed, opts["first_index"], 2])))
    mismatch = MismatchSpec(float(est.get("lambda_scale", 1.0)))
    history, report = run_estimation(record, spec, rho_e0, mismatch, opts["threshold"], opts["window"], truth)
    rows = []
    dev = 0.0
    for k, st in enumerate(history):
        if truth is not None:
            r = truth[k]
            dev = max(dev, float(np.max(np.abs(st.rho_e - r))))
            f, a_true = fidelity_batch(r, st.rho_e), expectation_real(spec.A, r)
        else:
            f = a_true = None
        if k % opts["stride"] == 0 or k == len(history) - 1:
            rows.append([st.t, f, a_true, expectation_real(spec.A, st.rho_e), purity(st.rho_e)])
    io.write_table(out / "estimation.csv", ["t", "fidelity", "expA_true", "expA_est", "purity_est"], rows)
    series = ["fidelity", "expA_est"] if truth is not None else ["expA_est", "purity_est"]
    chart_from_table(out / "estimation.svg", out / "estimation.csv", "t", series, title=f"{spec.name}: estimator", xlabel="t")
    summary = dict(
        command="estimate",
        scenario=spec.name,
        seed=config["seed"],
        rows=len(record),
        lambda_scale=mismatch.lambda_scale,
        t_f=report.t_f,
        final_fidelity=report.final_fidelity if truth is not None else None,
        max_abs_deviation=dev if truth is not None else None,
    )
    io.write_summary(out / "summary.txt", summary)
    return summary


def _output_rows(spec, res, b: int):
    """OutputRow table of trajectory ``b``: one row per sample."""
    s = res.series
    n_samples = len(res.times)
    cur = res.currents
    stride = int(round((res.times[1] - res.times[0]) / spec.cfg.dt)) if n_samples > 1 else 1
    n_ch = 1 if cur is None or cur.ndim == 2 else cur.shape[-1]
    cur_cols = ["current"] if n_ch == 1 else [f"current_{j}" for j in range(n_ch)]
    cols = ["t"] + cur_cols + ["expA_true", "expA_est", "fidelity_to_truth", "fidelity_to_target", "purity_true", "purity_est"]
    cols += [f"u_{name}" for name in spec.control_names]
    rows = []
    for i in range(n_samples):
        k = i * stride
        if cur is not None and k < len(cur):
            c = list(np.atleast_1d(cur[k, b]))
        else:
            c = [None] * n_ch
        tgt = s["fidelity_target"][i, b] if "fidelity_target" in s else None
        rows.append(
            [res.times[i]]
            + c
            + [s["expA_true"][i, b], s["expA_est"][i, b], s["fidelity"][i, b], tgt, s["purity_true"][i, b], s["purity_est"][i, b]]
            + list(res.controls[i, b])
        )
    return cols, rows


def _write_run(spec, res, out: Path, b: int = 0) -> None:
    cols, rows = _output_rows(spec, res, b)
    io.write_table(out / "run.csv", cols, rows)
    fid = ["fidelity_to_truth"] + (["fidelity_to_target"] if spec.target is not None else [])
    chart_from_table(out / "fidelity.svg", out / "run.csv", "t", fid, title=f"{spec.name}: fidelity", xlabel="t")
    chart_from_table(out / "expA.svg", out / "run.csv", "t", ["expA_true", "expA_est"], title=f"{spec.name}: <A>", xlabel="t")
    if spec.control_names:
        chart_from_table(
            out / "controls.svg", out / "run.csv", "t", [f"u_{n}" for n in spec.control_names], title=f"{spec.name}: controls", xlabel="t"
        )


def _protocol(spec, opts, law, horizon_steps=None, mismatch=MismatchSpec(), delay=None, indices=None, keep_currents=True, obs=None):
    n = opts["n_steps"] if horizon_steps is None else horizon_steps
    return run_protocol(
        spec,
        n_traj=opts["ensemble"],
        horizon=n * spec.cfg.dt,
        stages=opts["stages"],
        law=law,
        estimation_budget=opts["budget"],
        rho_e0=_estimator_start(opts["estimator_init"]),
        mismatch=mismatch,
        delay_steps=opts["delay_steps"] if delay is None else delay,
        stride=opts["stride"],
        indices=indices,
        first_index=opts["first_index"],
        threshold=opts["threshold"],
        window=opts["window"],
        keep_currents=keep_currents,
        observables=obs,
    )


def _trajectory_table(spec, res, obs, out: Path) -> dict:
    """Per-trajectory outcomes and their medians."""
    cols = ["index", "t_switch", "t_f", "pulsed", "final_fidelity_to_truth", "final_quarter_fidelity_to_truth"]
    has_target = "fidelity_target" in res.series
    if has_target:
        cols += ["final_fidelity_to_target", "final_quarter_fidelity_to_target"]
    cols += [f"final_quarter_{k}" for k in obs] + ["leakage_max"]
    fq = {k: res.final_quarter_mean(k) for k in ["fidelity"] + (["fidelity_target"] if has_target else []) + list(obs)}
    leak = res.series["leakage"].max(axis=0)
    rows = []
    for b in range(res.rho.shape[0]):
        row = [b, res.t_switch[b], res.t_f[b], bool(res.pulsed[b]), res.series["fidelity"][-1, b], fq["fidelity"][b]]
        if has_target:
            row += [res.series["fidelity_target"][-1, b], fq["fidelity_target"][b]]
        row += [fq[k][b] for k in obs] + [leak[b]]
        rows.append(row)
    io.write_table(out / "trajectories.csv", cols, rows)
    summary = dict(
        n_traj=len(rows),
        converged=int(np.sum(~np.isnan(res.t_f))),
        median_t_f=float(np.nanmedian(res.t_f)) if np.any(~np.isnan(res.t_f)) else None,
        pulsed=int(res.pulsed.sum()),
        median_final_quarter_fidelity_to_truth=float(np.median(fq["fidelity"])),
    )
    if has_target:
        summary["median_final_quarter_fidelity_to_target"] = float(np.median(fq["fidelity_target"]))
    for k in obs:
        summary[f"median_final_quarter_{k}"] = float(np.median(fq[k]))
    summary["leakage_max"] = leakage_guard(spec, leak, action="warn")
    return summary


def cmd_control(config: dict, out: Path) -> dict:
    """Two-stage run: estimation, then feedback from the estimated state."""
    spec = scenario_from(config)
    opts = _run_options(config, spec)
    law = _law_from(config)
    obs = _observables(spec, opts["observables"])
    lam = float(_table(config, "estimator").get("lambda_scale", 1.0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = _protocol(spec, opts, law, mismatch=MismatchSpec(lam), obs=obs)
    for w in caught:
        print(f"qfc: warning: {w.message}", file=sys.stderr)
    _write_run(spec, res, out)
    summary = dict(command="control", scenario=spec.name, seed=config["seed"], law=law.variant, stages=opts["stages"])
    summary.update(_trajectory_table(spec, res, obs, out))
    transitions = res.law_log.get("transitions")
    if transitions is not None:
        io.write_table(out / "transitions.csv", ["step", "trajectory", "from_region", "to_region", "overlap"], transitions)
        summary["transitions"] = len(transitions)
    io.write_summary(out / "summary.txt", summary)
    return summary


def cmd_sweep(config: dict, out: Path) -> dict:
    """Median convergence time and fidelities along one axis, common noise across points."""
    sw = _table(config, "sweep")
    axis = sw.get("axis")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = sw.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("sweep.values must be a non-empty list")
    config = io.apply_overrides(config, [])
    config.setdefault("run", {}).setdefault("stages", "estimate_only")
    base = scenario_from(config)
    opts = _run_options(config, base)
    law = _law_from(config)
    horizon = opts["n_steps"] * base.cfg.dt
    rows = []
    for v in values:
        spec, lam, delay = base, 1.0, None
        if axis in ("eta", "kappa"):
            spec = base.with_config(**{axis: float(v)})
        elif axis == "lambda_scale":
            lam = float(v)
        else:
            delay = int(v)
        n = int(round(horizon / spec.cfg.dt))
        res = _protocol(spec, opts, law, horizon_steps=n, mismatch=MismatchSpec(lam), delay=delay, keep_currents=False)
        tf = np.where(np.isnan(res.t_f), horizon, res.t_f)
        tgt = float(np.median(res.final_quarter_mean("fidelity_target"))) if "fidelity_target" in res.series else None
        rows.append(
            [v, opts["ensemble"], int(np.sum(~np.isnan(res.t_f))), float(np.median(tf)), float(np.median(res.final_quarter_mean("fidelity"))), tgt]
        )
    cols = ["value", "n_seeds", "n_converged", "median_t_f", "median_plateau_fidelity", "median_fidelity_to_target"]
    io.write_table(out / "sweep.csv", cols, rows)
    chart_from_table(out / "sweep.svg", out / "sweep.csv", "value", ["median_t_f"], title=f"median t_f vs {axis}", xlabel=axis)
    chart_from_table(
        out / "sweep_fidelity.svg",
        out / "sweep.csv",
        "value",
        ["median_plateau_fidelity", "median_fidelity_to_target"],
        title=f"fidelity vs {axis}",
        xlabel=axis,
    )
    summary = dict(command="sweep", scenario=base.name, seed=config["seed"], axis=axis, points=len(rows), horizon=horizon)
    io.write_summary(out / "summary.txt", summary)
    return summary


def cmd_train(config: dict, out: Path) -> dict:
    """Cross-entropy policy search, then evaluation of the frozen best weights."""
    spec = scenario_from(config)
    opts = _run_options(config, spec)
    cem_opts = _table(config, "cem")
    eval_delays = [int(d) for d in cem_opts.pop("eval_delays", [opts["delay_steps"]])]
    n_eval = int(cem_opts.pop("eval_episodes", 32))
    init_file = cem_opts.pop("init_weights", None)
    cem_opts.setdefault("seed", config["seed"])
    cem_opts.setdefault("episode_steps", opts["n_steps"])
    try:
        cem = CemConfig(**cem_opts)
    except TypeError as exc:
        raise ConfigError(f"bad [cem] table: {exc}") from None
    init = io.read_vector(init_file) if init_file else None
    result = cem_train(spec, cem, init_mean=init)
    io.write_table(out / "curve.csv", ["generation", "mean_fidelity", "best_fidelity"], result.curve)
    if result.curve:
        chart_from_table(
            out / "curve.svg", out / "curve.csv", "generation", ["mean_fidelity", "best_fidelity"], title=f"{spec.name}: training", xlabel="generation"
        )
    weights = result.best_weights if cem.generations else (init if init is not None else np.zeros(n_weights(spec)))
    io.write_vector(out / "weights.txt", weights)

    episodes = EVAL_OFFSET + np.arange(n_eval)
    rows = []
    for d in eval_delays:
        mean, final, aborted = evaluate_population(weights[None], spec, episodes, cem.episode_steps, delay_steps=d)
        rows.append([d, n_eval, mean[0], final[0], bool(aborted[0])])
    io.write_table(out / "evaluation.csv", ["delay_steps", "episodes", "mean_fidelity", "final_fidelity", "aborted"], rows)

    eval_opts = dict(opts, stages="closed_loop_from_t0", estimator_init="matched", ensemble=1, first_index=EVAL_OFFSET)
    res = _protocol(spec, eval_opts, PolicyLaw(weights), horizon_steps=cem.episode_steps, delay=eval_delays[0])
    _write_run(spec, res, out)
    summary = dict(
        command="train",
        scenario=spec.name,
        seed=config["seed"],
        generations=cem.generations,
        population=cem.population,
        n_weights=len(weights),
        best_training_fidelity=result.best_fidelity,
    )
    for d, _, m, _, _ in rows:
        summary[f"eval_mean_fidelity_delay_{d}"] = m
    io.write_summary(out / "summary.txt", summary)
    return summary


HANDLERS = dict(simulate=cmd_simulate, estimate=cmd_estimate, control=cmd_control, sweep=cmd_sweep, train=cmd_train)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfc", description="Continuous-measurement state estimation and feedback control.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="master seed (required unless set in the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = HANDLERS[args.command](config, out)
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"qfc: error: {msg}", file=sys.stderr)
        return 1
    for key, value in summary.items():
        print(f"{key} = {io.format_value(value) if value is None or isinstance(value, float) else value}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
