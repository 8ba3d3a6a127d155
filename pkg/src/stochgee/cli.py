"""Command-line front end.

Commands: ``simulate``, ``fit``, ``diagnose``, ``study-consistency``,
``study-optimality``. Every output file embeds the resolved configuration
and seed; repeated runs with identical flags are byte-identical and do
not depend on ``--jobs``.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys

import numpy as np

from .diagnostics import (
    DiagnosticsParams,
    condition_trajectories,
    consistency_study,
    optimality_study,
)
from .estimating import resolve_estimator
from .exceptions import ConfigError, DatasetParseError, StochGeeError
from .model import load_dataset, sidecar_path, write_dataset
from .simulation import (
    GENERATOR_ID,
    RegressorProcess,
    ScenarioConfig,
    SizeSchedule,
    TruthSpec,
    effective_truth,
    parallel_map,
    simulate_scenario,
)
from .solver import solve_gee

_DEFAULT_SCENARIO = """\
[scenario]
link = identity
beta0 = 0.0
n = 100
m_max = 1
seed = 0
response_family = gaussian_link_moments

[sizes]
kind = constant
m = 1
; kind = cyclic needs: sizes = 2, 3
; kind = random needs: lo = 1, hi = 3

[regressors]
kind = iid
loc = 0.0
scale = 1.0
phi = 0.0
gain = 0.0

[truth]
kind = independence
rho = 0.0

[estimators]
names = independence

[diagnostics]
delta = 0.25
r_grid = 0.5, 0.25, 0.1
"""


def _floats(text):
    return tuple(float(v.strip()) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v.strip()) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def parse_scenario(path: str) -> tuple:
    """Read a scenario INI file; returns (config, estimator names, diag kwargs)."""
    if not os.path.exists(path):
        raise ConfigError(f"scenario file {path} does not exist", field="scenario")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as fh:
        parser.read_file(fh)
    try:
        sc = parser["scenario"]
    except KeyError:
        raise ConfigError("missing [scenario] section", field="scenario") from None

    def section(name):
        return parser[name] if parser.has_section(name) else {}

    sizes_raw = section("sizes")
    sizes = SizeSchedule(
        kind=sizes_raw.get("kind", "constant"),
        m=int(sizes_raw.get("m", 1)),
        sizes=_ints(sizes_raw.get("sizes", "")) if sizes_raw.get("sizes") else (),
        lo=int(sizes_raw.get("lo", 1)),
        hi=int(sizes_raw.get("hi", 1)),
    )
    reg_raw = section("regressors")
    regressors = RegressorProcess(
        kind=reg_raw.get("kind", "iid"),
        loc=float(reg_raw.get("loc", 0.0)),
        scale=float(reg_raw.get("scale", 1.0)),
        phi=float(reg_raw.get("phi", 0.0)),
        gain=float(reg_raw.get("gain", 0.0)),
    )
    truth_raw = section("truth")
    truth = TruthSpec(
        kind=truth_raw.get("kind", "independence"),
        rho=float(truth_raw.get("rho", 0.0)),
    )
    try:
        config = ScenarioConfig(
            link=sc.get("link", "identity"),
            beta0=_floats(sc.get("beta0", "0.0")),
            n=int(sc.get("n", 100)),
            m_max=int(sc.get("m_max", str(sizes.max_size))),
            sizes=sizes,
            regressors=regressors,
            truth=truth,
            response_family=sc.get("response_family", "gaussian_link_moments"),
            seed=int(sc.get("seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad scenario value: {exc}", field="scenario") from None
    est_raw = section("estimators")
    estimators = _names(est_raw.get("names", "independence"))
    diag_raw = section("diagnostics")
    diag = {
        "delta": float(diag_raw.get("delta", 0.25)),
        "r_grid": _floats(diag_raw.get("r_grid", "0.5, 0.25, 0.1")),
    }
    return config, estimators, diag


def _resolved_payload(config: ScenarioConfig, command: str, extra=None) -> dict:
    payload = {
        "command": command,
        "config": config.to_dict(),
        "scenario_digest": config.digest(),
        "seed": config.seed,
        "generator": GENERATOR_ID,
    }
    if extra:
        payload.update(extra)
    return payload


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(path: str, rows, columns, payload: dict) -> None:
    buf = io.StringIO()
    buf.write(f"# config: {json.dumps(payload, sort_keys=True)}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(_cell(row.get(c)) for c in columns) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _need_truth(names) -> bool:
    return any(n.split(":")[0] in ("truth", "quasi", "quasi_score") for n in names)


def _resolve_all(names, config: ScenarioConfig):
    truth = effective_truth(config) if _need_truth(names) else None
    return [(n, resolve_estimator(n, config.m_max, truth)) for n in names]


def _spec_only(names, config: ScenarioConfig):
    pairs = _resolve_all(names, config)
    out = []
    for name, kind in pairs:
        if kind.variant == "independence":
            spec = resolve_estimator("identity", config.m_max).spec
        elif kind.variant == "gee_star":
            spec = kind.spec
        else:
            raise ConfigError(
                f"estimator {name!r} has no working-correlation proxy to study",
                field="estimators",
            )
        out.append((name, spec))
    return out


def _cmd_simulate(args) -> int:
    config, _, _ = parse_scenario(args.scenario)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    dataset = simulate_scenario(config)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.csv")
    write_dataset(dataset, path)
    meta_path = sidecar_path(path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    meta.update(_resolved_payload(config, "simulate"))
    _write_json(meta_path, meta)
    print(path)
    return 0


def _cmd_fit(args) -> int:
    if args.data:
        dataset = load_dataset(args.data)
        if dataset.link is None:
            raise ConfigError(
                "dataset sidecar does not declare a link", field="data"
            )
        config = None
        names = [args.estimator or "independence"]
        estimators = [(names[0], resolve_estimator(names[0], dataset.m_max))]
        payload = {
            "command": "fit",
            "data": os.path.abspath(args.data),
            "estimator": names[0],
            "generator": GENERATOR_ID,
        }
        link = dataset.link
    else:
        config, scenario_estimators, _ = parse_scenario(args.scenario)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        dataset = simulate_scenario(config)
        name = args.estimator or scenario_estimators[0]
        estimators = _resolve_all([name], config)
        payload = _resolved_payload(config, "fit", {"estimator": name})
        link = config.link
    name, kind = estimators[0]
    fit = solve_gee(dataset, kind, link)
    os.makedirs(args.out, exist_ok=True)
    payload.update(
        {
            "beta_hat": [float(v) for v in fit.beta_hat],
            "converged": bool(fit.converged),
            "iterations": int(fit.iterations),
            "final_residual_norm": float(fit.final_residual_norm),
            "residual_trace": [float(t[1]) for t in fit.trace],
        }
    )
    _write_json(os.path.join(args.out, "fit.json"), payload)
    print(os.path.join(args.out, "fit.json"))
    return 0 if fit.converged else 3


def _diagnose_worker(payload):
    config, rep, spec, diag_params = payload
    ds = simulate_scenario(config, rep)
    truth = config.truth.template(config.m_max)
    report = condition_trajectories(
        ds, config.beta0_array, config.link, spec, truth=truth, params=diag_params
    )
    return report.to_json_dict()


def _cmd_diagnose(args) -> int:
    if args.data:
        dataset = load_dataset(args.data)
        if dataset.link is None or dataset.beta0 is None:
            raise ConfigError(
                "diagnosing a raw dataset needs link and beta0 in the sidecar",
                field="data",
            )
        names = [args.estimator or "identity"]
        spec = _spec_only(
            names,
            ScenarioConfig(
                link=dataset.link,
                beta0=tuple(float(b) for b in dataset.beta0),
                n=dataset.n,
                m_max=dataset.m_max,
                sizes=SizeSchedule(kind="constant", m=dataset.m_max),
            ),
        )[0][1]
        n_grid = _ints(args.n_grid) if args.n_grid else (dataset.n,)
        params = DiagnosticsParams(delta=args.delta, n_grid=tuple(sorted(set(n_grid))))
        report = condition_trajectories(
            dataset, dataset.beta0, dataset.link, spec, truth=None, params=params
        )
        payload = {
            "command": "diagnose",
            "data": os.path.abspath(args.data),
            "generator": GENERATOR_ID,
            "report": report.to_json_dict(),
        }
    else:
        config, est_names, diag = parse_scenario(args.scenario)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        name = args.estimator or est_names[0]
        spec = _spec_only([name], config)[0][1]
        n_grid = _ints(args.n_grid) if args.n_grid else (config.n,)
        params = DiagnosticsParams(
            delta=args.delta if args.delta is not None else diag["delta"],
            r_grid=diag["r_grid"],
            n_grid=tuple(sorted(set(n_grid))),
        )
        payloads = [(config, rep, spec, params) for rep in range(args.reps)]
        reports = parallel_map(_diagnose_worker, payloads, args.jobs)
        payload = _resolved_payload(
            config,
            "diagnose",
            {"estimator": name, "reps": args.reps, "report": reports[0]},
        )
        if args.reps > 1:
            payload["ensemble"] = _ensemble_summary(reports)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "report.json")
    _write_json(out_path, payload)
    print(out_path)
    return 0


def _ensemble_summary(reports) -> dict:
    summary: dict = {}
    names = reports[0]["series"].keys()
    for name in names:
        rows = []
        for rep in reports:
            rows.append(
                [v if isinstance(v, float) else np.nan for v in rep["series"][name]]
            )
        arr = np.asarray(rows, dtype=float)
        with np.errstate(all="ignore"):
            q1, med, q3 = np.nanpercentile(arr, [25.0, 50.0, 75.0], axis=0)
        summary[name] = {
            "q25": [_num(v) for v in q1],
            "median": [_num(v) for v in med],
            "q75": [_num(v) for v in q3],
        }
    return summary


def _num(v):
    v = float(v)
    return "nan" if np.isnan(v) else v


def _cmd_study_consistency(args) -> int:
    config, est_names, _ = parse_scenario(args.scenario)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    names = args.estimator or list(est_names)
    estimators = _resolve_all(names, config)
    n_grid = _ints(args.n_grid) if args.n_grid else (config.n,)
    result = consistency_study(
        config, estimators, args.reps, n_grid, jobs=args.jobs
    )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "consistency.csv")
    _write_table(
        out_path,
        result.rows,
        [
            "estimator",
            "n",
            "median_err",
            "q1_err",
            "q3_err",
            "converged_fraction",
            "replications_used",
        ],
        result.meta,
    )
    print(out_path)
    if result.meta["failures"] >= args.reps:
        return 3
    return 0


def _cmd_study_optimality(args) -> int:
    config, est_names, _ = parse_scenario(args.scenario)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    names = args.estimator or list(est_names)
    specs = _spec_only(names, config)
    n_grid = _ints(args.n_grid) if args.n_grid else (config.n,)
    result = optimality_study(
        config,
        specs,
        args.reps,
        n_grid,
        perturbed=not args.no_perturbed,
        jobs=args.jobs,
    )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "optimality.csv")
    columns = ["spec", "n", "det_ratio_h", "det_ratio_m"]
    if not args.no_perturbed:
        columns += ["det_ratio_h_perturbed", "det_ratio_m_perturbed"]
    _write_table(out_path, result.rows, columns, result.meta)
    print(out_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochgee",
        description="GEE solvers, simulation, and asymptotic-condition "
        "diagnostics for longitudinal data with stochastic regressors.",
    )
    parser.add_argument(
        "--print-defaults",
        action="store_true",
        help="print the fully resolved default scenario file and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p, scenario_required=True):
        p.add_argument("--scenario", help="scenario INI file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    p_sim = sub.add_parser("simulate", help="write a dataset CSV + metadata")
    common(p_sim)

    p_fit = sub.add_parser("fit", help="solve the estimating equation")
    common(p_fit)
    p_fit.add_argument("--data", help="existing dataset CSV (bypasses simulation)")
    p_fit.add_argument("--estimator", help="estimator name, e.g. exchangeable:0.4")

    p_diag = sub.add_parser("diagnose", help="write a condition report JSON")
    common(p_diag)
    p_diag.add_argument("--data", help="existing dataset CSV")
    p_diag.add_argument("--estimator", help="proxy whose conditions are tracked")
    p_diag.add_argument("--delta", type=float, default=None)
    p_diag.add_argument("--n-grid", dest="n_grid", help="comma list of checkpoints")
    p_diag.add_argument("--reps", type=int, default=1)

    p_cons = sub.add_parser("study-consistency", help="estimation-error table")
    common(p_cons)
    p_cons.add_argument("--estimator", action="append", default=None)
    p_cons.add_argument("--n-grid", dest="n_grid")
    p_cons.add_argument("--reps", type=int, default=100)

    p_opt = sub.add_parser("study-optimality", help="determinant-ratio table")
    common(p_opt)
    p_opt.add_argument("--estimator", action="append", default=None)
    p_opt.add_argument("--n-grid", dest="n_grid")
    p_opt.add_argument("--reps", type=int, default=100)
    p_opt.add_argument("--no-perturbed", action="store_true")
    return parser


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "diagnose": _cmd_diagnose,
    "study-consistency": _cmd_study_consistency,
    "study-optimality": _cmd_study_optimality,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(_DEFAULT_SCENARIO)
        return 0
    if not args.command:
        parser.print_help()
        return 2
    if args.command != "fit" and args.command != "diagnose":
        if not args.scenario:
            sys.stderr.write("error: --scenario is required\n")
            return 2
    elif not args.scenario and not args.data:
        sys.stderr.write("error: one of --scenario/--data is required\n")
        return 2
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetParseError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except StochGeeError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
