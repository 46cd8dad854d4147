"""Command-line front end: design, simulate, verify, reproduce-paper.

Configuration is a single YAML document; unknown keys are rejected and
every report embeds the full effective configuration including defaults,
so reports are re-runnable.  Exit codes: 0 success, 1 configuration or
I/O error, 2 infeasible synthesis or a failed experiment expectation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .lti import StateSpace, is_stable
from .relay import (
    CouplingChannel,
    RelayParams,
    build_generalized_plant,
    scalar_block,
    uncertainty_weight,
)
from .lifting import fsfh_lift, sampled_data_norm
from .synthesis import (
    Controller,
    SynthesisError,
    build_robust_plant,
    robust_stability_sweep,
    synthesize_nominal,
    synthesize_robust,
    verify_design,
)
from .sim import InputSpec, SimConfig, metrics, simulate_closed_loop

__all__ = ["main", "load_config", "effective_config", "cmd_design",
           "cmd_simulate", "cmd_verify", "cmd_reproduce_paper",
           "cmd_lift_check"]

_DESIGN_DEFAULTS = {
    "mode": "nominal",
    "N": 16,
    "n_q": 8,
    "grid_size": 256,
    "margin": 0.05,
    "epsilon": 0.01,
    "tol": 1e-3,
}
_SIM_DEFAULTS = {
    "duration": 100.0,
    "oversample": 64,
    "seed": 0,
}
_INPUT_DEFAULTS = {
    "kind": "random_rect",
    "period": 4.0,
    "filter": "through_P",
}

# perturbation used by the reference divergence/robustness experiments
_FIG10_PERTURBATION = {"r_factor": 0.07, "L_factor": 1.1}
_FIG_OVERSAMPLE_PERTURBED = 80  # L1 = 1.1 h must land on the fine grid


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _tf_block(entry, where: str) -> StateSpace:
    if not isinstance(entry, dict):
        raise ConfigError(f"{where} must be a num/den mapping")
    _check_keys(entry, {"num", "den"}, where)
    try:
        return scalar_block(entry["num"], entry["den"])
    except KeyError as exc:
        raise ConfigError(f"{where} needs both num and den") from exc


def effective_config(raw: dict) -> dict:
    """Validate a raw config mapping and fill in the defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    _check_keys(raw, {"relay", "channel", "design", "sim"}, "config")
    for section in ("relay", "channel"):
        if section not in raw:
            raise ConfigError(f"missing config section {section!r}")

    relay = dict(raw["relay"])
    _check_keys(relay, {"h", "f", "a1", "a2", "W", "F", "P"}, "relay")
    for key in ("h", "f", "a1", "a2", "W", "F", "P"):
        if key not in relay:
            raise ConfigError(f"relay section is missing {key!r}")
    for key in ("h", "f", "a1", "a2"):
        relay[key] = float(relay[key])
    for key in ("W", "F", "P"):
        blk = dict(relay[key])
        _check_keys(blk, {"num", "den"}, f"relay.{key}")
        blk["num"] = [float(x) for x in blk["num"]]
        blk["den"] = [float(x) for x in blk["den"]]
        relay[key] = blk

    channel = dict(raw["channel"])
    _check_keys(channel, {"r", "L", "extra_paths"}, "channel")
    channel["r"] = float(channel["r"])
    channel["L"] = float(channel["L"])
    extras = []
    for i, p in enumerate(channel.get("extra_paths", []) or []):
        _check_keys(p, {"r", "L"}, f"channel.extra_paths[{i}]")
        extras.append({"r": float(p["r"]), "L": float(p["L"])})
    channel["extra_paths"] = extras

    design = {**_DESIGN_DEFAULTS, **(raw.get("design") or {})}
    _check_keys(design, _DESIGN_DEFAULTS, "design")
    if design["mode"] not in ("nominal", "robust"):
        raise ConfigError("design.mode must be nominal or robust")
    design["N"] = int(design["N"])
    design["n_q"] = int(design["n_q"])
    design["grid_size"] = int(design["grid_size"])
    for key in ("margin", "epsilon", "tol"):
        design[key] = float(design[key])

    sim = {**_SIM_DEFAULTS, **(raw.get("sim") or {})}
    _check_keys(sim, set(_SIM_DEFAULTS) | {"input"}, "sim")
    sim["duration"] = float(sim["duration"])
    sim["oversample"] = int(sim["oversample"])
    sim["seed"] = int(sim["seed"])
    inp = {**_INPUT_DEFAULTS, **(sim.get("input") or {})}
    _check_keys(inp, _INPUT_DEFAULTS, "sim.input")
    inp["period"] = float(inp["period"])
    sim["input"] = inp

    return {"relay": relay, "channel": channel, "design": design, "sim": sim}


def resolve_config_path(name: str) -> Path:
    """Accept a filesystem path or the bare name of a bundled config."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("relaycancel") / "configs" / f"{name}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {name!r} not found (no such file or bundled config)")


def load_config(name: str) -> dict:
    path = resolve_config_path(name)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return effective_config(raw)


def config_objects(cfg: dict):
    relay = cfg["relay"]
    params = RelayParams(
        h=relay["h"], f=relay["f"], a1=relay["a1"], a2=relay["a2"],
        W=_tf_block(relay["W"], "relay.W"),
        F=_tf_block(relay["F"], "relay.F"),
        P=_tf_block(relay["P"], "relay.P"),
    )
    ch = cfg["channel"]
    channel = CouplingChannel(
        r=ch["r"], L=ch["L"],
        extra_paths=tuple((p["r"], p["L"]) for p in ch["extra_paths"]),
    )
    return params, channel


def _input_spec(cfg: dict) -> InputSpec:
    inp = cfg["sim"]["input"]
    return InputSpec(kind=inp["kind"], period=inp["period"],
                     filter=inp["filter"])


# ---------------------------------------------------------------------------
# serialization


def _matrix(M: np.ndarray):
    return [[float(x) for x in row] for row in np.atleast_2d(M)]


def controller_to_dict(K: Controller) -> dict:
    return {
        "A": _matrix(K.sys.A),
        "B": _matrix(K.sys.B),
        "C": _matrix(K.sys.C),
        "D": _matrix(K.sys.D),
        "period": float(K.sys.dt),
        "gamma_achieved": K.gamma_achieved,
        "method": K.method,
        "meta": K.meta,
    }


def controller_from_dict(d: dict) -> Controller:
    sys = StateSpace(np.array(d["A"]), np.array(d["B"]), np.array(d["C"]),
                     np.array(d["D"]), dt=float(d["period"]))
    return Controller(sys=sys, gamma_achieved=d.get("gamma_achieved"),
                      method=d.get("method", "unknown"),
                      meta=d.get("meta", {}))


def write_controller(K: Controller, path: Path):
    path.write_text(yaml.safe_dump(controller_to_dict(K),
                                   default_flow_style=None, sort_keys=True))


def read_controller(path) -> Controller:
    try:
        return controller_from_dict(yaml.safe_load(Path(path).read_text()))
    except (OSError, yaml.YAMLError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read controller {path}: {exc}") from exc


def write_trace_csv(trace, path: Path):
    cols = ["t", "v_I", "v_Q", "u_I", "u_Q", "err_I", "err_Q"]
    rows = [",".join(cols)]
    data = np.vstack([trace.t, trace.v, trace.u, trace.err])
    for j in range(data.shape[1]):
        rows.append(",".join(f"{x:.12g}" for x in data[:, j]))
    path.write_text("\n".join(rows) + "\n")


def _write_json(obj: dict, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def _design(cfg: dict):
    params, channel = config_objects(cfg)
    spec = build_generalized_plant(params, channel)
    d = cfg["design"]
    if d["mode"] == "nominal":
        lp = fsfh_lift(spec, d["N"])
        K = synthesize_nominal(lp, tol=d["tol"], n_q=d["n_q"],
                               grid_size=d["grid_size"])
    else:
        W2 = uncertainty_weight(channel, d["epsilon"])
        rp = build_robust_plant(spec, W2, d["N"])
        K = synthesize_robust(rp, n_q=d["n_q"], grid_size=d["grid_size"],
                              margin=d["margin"], tol=d["tol"])
        K.meta["epsilon"] = d["epsilon"]
    return spec, K


def cmd_design(config: str, out: str) -> int:
    cfg = load_config(config)
    t0 = time.perf_counter()
    try:
        spec, K = _design(cfg)
    except SynthesisError as exc:
        print(f"synthesis infeasible: {exc}", file=sys.stderr)
        return 2
    t_design = time.perf_counter() - t0
    t0 = time.perf_counter()
    report_verify = verify_design(spec, K, N_verify=2 * cfg["design"]["N"])
    t_verify = time.perf_counter() - t0
    out_path = Path(out)
    ctrl_path = out_path.with_suffix(".controller.yaml")
    report = {
        "config": cfg,
        "controller": controller_to_dict(K),
        "gamma_achieved": K.gamma_achieved,
        "method": K.method,
        "controller_stable": bool(is_stable(K.sys)),
        "verification": report_verify,
        "timings_s": {"design": t_design, "verify": t_verify},
        "controller_file": str(ctrl_path),
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report, out_path)
    write_controller(K, ctrl_path)
    print(f"design written to {out_path} (controller: {ctrl_path})")
    return 0


def cmd_simulate(config: str, controller: str, out_prefix: str,
                 seed: int | None = None,
                 oversample: int | None = None) -> int:
    cfg = load_config(config)
    K = read_controller(controller)
    params, channel = config_objects(cfg)
    sim_cfg = SimConfig(
        params=params, channel=channel, K=K,
        duration=cfg["sim"]["duration"],
        oversample=oversample or cfg["sim"]["oversample"],
        input=_input_spec(cfg),
        seed=seed if seed is not None else cfg["sim"]["seed"],
    )
    trace = simulate_closed_loop(sim_cfg)
    # the induced-gain bound applies to unit-energy shaped disturbances only
    gamma = (K.gamma_achieved
             if isinstance(K.gamma_achieved, float)
             and sim_cfg.input.kind == "unit_norm_l2" else None)
    m = metrics(trace, gamma=gamma)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_suffix(".csv")
    write_trace_csv(trace, csv_path)
    _write_json({"config": cfg, "metrics": m}, prefix.with_suffix(".metrics.json"))
    print(f"trace written to {csv_path}; diverged={m['diverged']}")
    return 0


def cmd_verify(config: str, controller: str, out: str | None = None) -> int:
    cfg = load_config(config)
    K = read_controller(controller)
    params, channel = config_objects(cfg)
    spec = build_generalized_plant(params, channel)
    report = verify_design(spec, K, N_verify=2 * cfg["design"]["N"])
    report["config"] = cfg
    if K.method == "robust_qparam" and channel.extra_paths:
        sweep = robust_stability_sweep(spec, K, n_cases=50, seed=0,
                                       N=cfg["design"]["N"])
        report["perturbation_sweep"] = {
            "n_cases": sweep["n_cases"],
            "all_stable": sweep["all_stable"],
            "n_unstable": sweep["n_unstable"],
        }
    if out:
        _write_json(report, Path(out))
    print(json.dumps({k: v for k, v in report.items() if k != "config"},
                     indent=2, sort_keys=True, default=str))
    ok = report["closed_loop_stable"] and report.get("small_gain_certified",
                                                     True)
    ok = ok and report.get("perturbation_sweep", {}).get("all_stable", True)
    return 0 if ok else 2


def _fig10_channel(channel: CouplingChannel) -> CouplingChannel:
    return CouplingChannel(
        r=channel.r, L=channel.L,
        extra_paths=((_FIG10_PERTURBATION["r_factor"] * channel.r,
                      _FIG10_PERTURBATION["L_factor"] * channel.L),),
    )


def cmd_reproduce_paper(out_dir: str) -> int:
    """Run the three reference experiments end to end with pinned seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    failures = []

    # experiment 1: nominal design, nominal channel, filtered rect input
    cfg9 = load_config("nominal_60db")
    spec9, K9 = _design(cfg9)
    params9, channel9 = config_objects(cfg9)
    trace9 = simulate_closed_loop(SimConfig(
        params=params9, channel=channel9, K=K9,
        duration=cfg9["sim"]["duration"], oversample=cfg9["sim"]["oversample"],
        input=_input_spec(cfg9), seed=cfg9["sim"]["seed"]))
    write_trace_csv(trace9, out / "fig9.csv")
    m9 = metrics(trace9)
    summary["fig9"] = {"stable": not trace9.diverged,
                       "gamma": K9.gamma_achieved, **m9}
    if trace9.diverged:
        failures.append("fig9: nominal cancelation diverged")

    # experiment 2: nominal design at the lower transmit gain, perturbed
    # channel: the unmodeled detour path destabilizes the loop
    cfg10 = load_config("nominal_40db")
    spec10, K10 = _design(cfg10)
    params10, channel10 = config_objects(cfg10)
    pert = _fig10_channel(channel10)
    trace10 = simulate_closed_loop(SimConfig(
        params=params10, channel=pert, K=K10,
        duration=cfg10["sim"]["duration"],
        oversample=_FIG_OVERSAMPLE_PERTURBED,
        input=_input_spec(cfg10), seed=cfg10["sim"]["seed"]))
    write_trace_csv(trace10, out / "fig10.csv")
    summary["fig10"] = {"diverged": trace10.diverged,
                        "gamma": K10.gamma_achieved,
                        **metrics(trace10)}
    if not trace10.diverged:
        failures.append("fig10: perturbed nominal loop did not diverge")

    # experiment 3: robust design under the same perturbation stays stable
    cfg11 = load_config("robust_40db")
    spec11, K11 = _design(cfg11)
    params11, channel11 = config_objects(cfg11)
    trace11 = simulate_closed_loop(SimConfig(
        params=params11, channel=pert, K=K11,
        duration=cfg11["sim"]["duration"],
        oversample=_FIG_OVERSAMPLE_PERTURBED,
        input=_input_spec(cfg11), seed=cfg11["sim"]["seed"]))
    write_trace_csv(trace11, out / "fig11.csv")
    summary["fig11"] = {"stable": not trace11.diverged,
                        "gamma1": K11.gamma_achieved["gamma1"],
                        "gamma2": K11.gamma_achieved["gamma2"],
                        "small_gain": K11.gamma_achieved["gamma2"] <= 1.0,
                        **metrics(trace11)}
    if trace11.diverged:
        failures.append("fig11: robust cancelation diverged")

    summary["criteria"] = {
        "fig9": "stable" if summary["fig9"]["stable"] else "diverged",
        "fig10": "diverged" if summary["fig10"]["diverged"] else "stable",
        "fig11": "stable" if summary["fig11"]["stable"] else "diverged",
    }
    summary["all_passed"] = not failures
    summary["failures"] = failures
    _write_json(summary, out / "summary.json")
    if failures:
        for f in failures:
            print(f"FAILED {f}", file=sys.stderr)
        return 2
    print(f"all three experiments reproduced; outputs in {out}")
    return 0


def cmd_lift_check(config: str, out: str | None, n_list) -> int:
    cfg = load_config(config)
    spec, K = _design(cfg)
    gammas = {}
    for N in n_list:
        gammas[int(N)] = sampled_data_norm(spec, K.sys, int(N))
    ns = sorted(gammas)
    diffs = {
        f"{a}->{b}": abs(gammas[b] - gammas[a]) / gammas[a]
        for a, b in zip(ns, ns[1:])
    }
    report = {"config": cfg, "gamma_by_N": gammas,
              "relative_successive_change": diffs}
    if out:
        _write_json(report, Path(out))
    print(json.dumps({"gamma_by_N": gammas,
                      "relative_successive_change": diffs},
                     indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relaycancel",
        description="design and simulate digital coupling-wave cancelers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="synthesize a canceler from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("simulate", help="run the closed-loop simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--controller", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--oversample", type=int, default=None)

    p = sub.add_parser("verify", help="re-check a design on a finer lifting")
    p.add_argument("--config", required=True)
    p.add_argument("--controller", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("reproduce-paper",
                       help="run the three reference experiments")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("lift-check", help="FSFH convergence study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--n-list", default="8,16,32",
                   help="comma-separated fast-rate factors")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "design":
            return cmd_design(args.config, args.out)
        if args.command == "simulate":
            return cmd_simulate(args.config, args.controller, args.out,
                                seed=args.seed, oversample=args.oversample)
        if args.command == "verify":
            return cmd_verify(args.config, args.controller, args.out)
        if args.command == "reproduce-paper":
            return cmd_reproduce_paper(args.out)
        if args.command == "lift-check":
            n_list = [int(x) for x in args.n_list.split(",") if x]
            return cmd_lift_check(args.config, args.out, n_list)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
