"""Batch command-line interface.

Subcommands: ``simulate``, ``make-synthetic``, ``fit``, ``predict`` and
``summarize``.  Every option has a default; values may also come from an INI
style ``--config`` file whose section is named after the subcommand (``fit``
additionally reads ``[sampler]`` and ``[priors]``).  Command-line flags take
precedence over the file.  The output directory is ``--output-dir``, else
``$PROCCONV_OUTPUT_DIR``, else the file's ``output_dir``, else ``.``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from .exceptions import DomainError, NumericalError, PreconditionError, SamplerAbort
from .fields import LatticeSpec, simulate_realization, spawn_seeds
from .mcmc import SamplerConfig, run_chain
from .model import SCALAR_PARAMS, HyperPriors
from .predict import kernel_summary, posterior_summaries, predict_surface
from .synthetic import SyntheticConfig, make_synthetic

log = logging.getLogger("procconv")

OUTPUT_DIR_ENV = "PROCCONV_OUTPUT_DIR"


class UsageError(Exception):
    pass


def _opt(name, type_, default, help_, section=None):
    return {"name": name, "type": type_, "default": default, "help": help_, "section": section}


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


LATTICE_OPTS = [
    _opt("x_min", float, 0.0, "lattice x lower bound"),
    _opt("x_max", float, 20.0, "lattice x upper bound"),
    _opt("y_min", float, 0.0, "lattice y lower bound"),
    _opt("y_max", float, 20.0, "lattice y upper bound"),
    _opt("nx", int, 21, "lattice nodes along x"),
    _opt("ny", int, 21, "lattice nodes along y"),
]

SIMULATE_OPTS = LATTICE_OPTS + [
    _opt("tau_psi", float, 10.0, "range of the focus fields"),
    _opt("tau_z", float, 1.0, "kernel scale"),
    _opt("area", float, 3.5, "unscaled one-sd ellipse area"),
    _opt("scale", float, 1.0, "marginal sd of the surface"),
    _opt("shrink_factor", float, 10.0, "display shrink applied to ellipses"),
    _opt("n_boundary", int, 36, "boundary points per ellipse"),
    _opt("seed", int, 0, "random seed"),
]

SYNTHETIC_OPTS = [
    _opt(name, type_, getattr(SyntheticConfig, name), help_) for name, type_, help_ in [
        ("n", int, "number of observation sites"),
        ("domain", float, "side of the square domain"),
        ("mu", float, "true mean"),
        ("lambda_y", float, "true error precision"),
        ("lambda_z", float, "true spatial precision"),
        ("tau_z", float, "true kernel scale"),
        ("tau_psi", float, "range of the focus perturbation field"),
        ("area", float, "unscaled one-sd ellipse area"),
        ("stationary", _bool, "zero foci and no channel"),
        ("channel_radius", float, "radius of the channel arc about (0, 0)"),
        ("channel_width", float, "width of the channel band"),
        ("channel_amplitude", float, "mean uplift along the channel"),
        ("psi_magnitude", float, "focus length along the channel"),
        ("psi_noise_sd", float, "sd of the focus perturbation field"),
        ("truth_nx", int, "truth grid nodes along x"),
        ("truth_ny", int, "truth grid nodes along y"),
        ("seed", int, "random seed"),
    ]
]

_SC = SamplerConfig()
SAMPLER_OPTS = [
    _opt(name, type(getattr(_SC, name)), getattr(_SC, name), help_, "sampler")
    for name, help_ in [
        ("n_iter", "sweeps in total"), ("burn_in", "sweeps discarded"), ("thin", "keep every k-th sweep"),
        ("scale_mu", "proposal sd for mu"), ("scale_lambda_y", "proposal sd for log lambda_y"),
        ("scale_lambda_z", "proposal sd for log lambda_z"), ("scale_tau_z", "proposal sd for tau_z"),
        ("scale_tau_psi", "proposal sd for tau_psi"),
        ("scale_psi", "focus step in units of its conditional prior sd"),
        ("psi_block_size", "sites per focus block"), ("seed", "random seed"),
        ("adapt_window", "sweeps per burn-in adaptation step (0 disables)"),
    ]
]

_HP = HyperPriors()
PRIOR_OPTS = [
    _opt("a_y", float, _HP.a_y, "Gamma shape for lambda_y", "priors"),
    _opt("b_y", float, _HP.b_y, "Gamma rate for lambda_y", "priors"),
    _opt("a_z", float, _HP.a_z, "Gamma shape for lambda_z", "priors"),
    _opt("b_z", float, _HP.b_z, "Gamma rate for lambda_z", "priors"),
    _opt("tau_z_min", float, _HP.tau_z_bounds[0], "lower bound for tau_z", "priors"),
    _opt("tau_z_max", float, _HP.tau_z_bounds[1], "upper bound for tau_z", "priors"),
    _opt("tau_psi_min", float, _HP.tau_psi_bounds[0], "lower bound for tau_psi", "priors"),
    _opt("tau_psi_max", float, _HP.tau_psi_bounds[1], "upper bound for tau_psi", "priors"),
    _opt("area", float, _HP.area, "unscaled one-sd ellipse area", "priors"),
]

FIT_OPTS = [
    _opt("data", str, None, "observations file (x,y,value)"),
    _opt("log_transform", _bool, False, "take natural logs of the value column"),
    _opt("tau_psi_fixed", _optional_float, None, "hold tau_psi at this value"),
    _opt("chains", int, 1, "independent chains with split seeds"),
] + SAMPLER_OPTS + PRIOR_OPTS

PREDICT_OPTS = [
    _opt("data", str, None, "observations file (x,y,value)"),
    _opt("trace", str, None, "trace file written by fit"),
    _opt("log_transform", _bool, False, "take natural logs of the value column"),
    _opt("x_min", _optional_float, None, "grid x lower bound (default: data extent)"),
    _opt("x_max", _optional_float, None, "grid x upper bound (default: data extent)"),
    _opt("y_min", _optional_float, None, "grid y lower bound (default: data extent)"),
    _opt("y_max", _optional_float, None, "grid y upper bound (default: data extent)"),
    _opt("nx", int, 10, "grid nodes along x"),
    _opt("ny", int, 10, "grid nodes along y"),
    _opt("max_samples", int, 0, "use at most this many evenly spaced trace samples (0 = all)"),
    _opt("psi_mode", str, "draw", "grid foci: 'draw' from the conditional or its 'mean'"),
    _opt("include_nugget", _bool, False, "add measurement-error variance to the sd"),
    _opt("area", float, 3.5, "unscaled one-sd ellipse area"),
    _opt("seed", int, 0, "random seed for grid focus draws"),
    _opt("kernel_summaries", _bool, False, "write modal, mean-foci and radial kernel files"),
    _opt("shrink_factor", float, 4.0, "display shrink for kernel ellipses"),
    _opt("modal_tau_psi", str, "25,50", "comma-separated tau_psi values for modal kernels"),
    _opt("modal_max_sweeps", int, 50, "coordinate-ascent sweeps for modal kernels"),
    _opt("n_angles", int, 72, "directions in radial averages"),
    _opt("n_boundary", int, 36, "boundary points per ellipse"),
]

SUMMARIZE_OPTS = [
    _opt("trace", str, None, "trace file written by fit"),
    _opt("acceptance", str, None, "acceptance report (default: acceptance.json beside the trace)"),
]

COMMANDS = {
    "simulate": (SIMULATE_OPTS, "draw one non-stationary surface on a lattice"),
    "make-synthetic": (SYNTHETIC_OPTS, "generate a synthetic observation scene with ground truth"),
    "fit": (FIT_OPTS, "sample the posterior by MCMC"),
    "predict": (PREDICT_OPTS, "posterior surface on a grid and kernel summaries"),
    "summarize": (SUMMARIZE_OPTS, "posterior summary table of a trace"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procconv", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="INI-style configuration file")
        p.add_argument("--output-dir", help=f"output directory (env: {OUTPUT_DIR_ENV})")
        p.add_argument("-v", "--verbose", action="store_true")
        seen = set()
        for o in opts:
            if o["name"] in seen:
                continue
            seen.add(o["name"])
            flag = "--" + o["name"].replace("_", "-")
            kw = {"dest": o["name"], "default": None,
                  "help": f"{o['help']} (default: {o['default']})"}
            if o["type"] is _bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
            else:
                p.add_argument(flag, type=o["type"], **kw)
    return parser


def resolve(args, command: str) -> dict:
    """Merge defaults, the config file and command-line flags for ``command``."""
    cfg = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg.read(args.config)
    out = {}
    for o in COMMANDS[command][0]:
        name = o["name"]
        value = getattr(args, name)
        if value is None:
            for section in (o["section"], command):
                if section and cfg.has_option(section, name):
                    try:
                        value = o["type"](cfg.get(section, name))
                    except ValueError as exc:
                        raise UsageError(f"config [{section}] {name}: {exc}") from None
                    break
        out[name] = o["default"] if value is None else value
    out_dir = (args.output_dir or os.environ.get(OUTPUT_DIR_ENV)
               or (cfg.get(command, "output_dir") if cfg.has_option(command, "output_dir") else None)
               or ".")
    out["output_dir"] = out_dir
    return out


def _output_dir(conf) -> Path:
    d = Path(conf["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _metadata(command, conf, outputs, **extra):
    meta = {"command": command, "version": __version__, "seed": conf.get("seed"),
            "config": {k: v for k, v in conf.items() if k != "output_dir"},
            "outputs": [Path(p).name for p in outputs]}
    meta.update(extra)
    return meta


def _require_file(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(conf) -> list:
    try:
        lattice = LatticeSpec(conf["x_min"], conf["x_max"], conf["y_min"], conf["y_max"],
                              conf["nx"], conf["ny"])
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    out = _output_dir(conf)
    real = simulate_realization(lattice, conf["tau_psi"], conf["tau_z"], conf["area"],
                                conf["seed"], conf["scale"], conf["shrink_factor"])
    files = [
        io.write_csv(out / "surface.csv", ["x", "y", "z"],
                     ([s[0], s[1], v] for s, v in zip(real.sites, real.values))),
        io.write_csv(out / "ellipses.csv", io.ELLIPSE_HEADER,
                     io.ellipse_rows(real.kernel_ellipses, conf["n_boundary"])),
    ]
    files.append(io.write_json(out / "metadata.json", _metadata("simulate", conf, files)))
    return files


def cmd_make_synthetic(conf) -> list:
    fields = {k: conf[k] for k in SyntheticConfig.__dataclass_fields__}
    try:
        config = SyntheticConfig(**fields)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    scene = make_synthetic(config)
    out = _output_dir(conf)
    files = [
        io.write_observations(out / "observations.csv", scene.data),
        io.write_csv(out / "truth_surface.csv", ["x", "y", "z"],
                     ([s[0], s[1], v] for s, v in zip(scene.truth_sites, scene.truth_surface))),
        io.write_csv(out / "truth_foci.csv", ["x", "y", "psi_x", "psi_y"],
                     ([s[0], s[1], a, b] for s, a, b in
                      zip(scene.data.sites, scene.psi_x, scene.psi_y))),
        io.write_json(out / "truth.json", scene.truth_parameters()),
    ]
    files.append(io.write_json(out / "metadata.json", _metadata("make-synthetic", conf, files)))
    return files


def _priors(conf) -> HyperPriors:
    return HyperPriors(conf["a_y"], conf["b_y"], conf["a_z"], conf["b_z"],
                       (conf["tau_z_min"], conf["tau_z_max"]),
                       (conf["tau_psi_min"], conf["tau_psi_max"]), conf["area"])


def _run_one(args):
    data, priors, sampler = args
    return run_chain(data, priors, sampler)


def cmd_fit(conf) -> list:
    _require_file(conf["data"], "data")
    data = io.ingest_observations(conf["data"], conf["log_transform"])
    try:
        priors = _priors(conf)
        fixed = {} if conf["tau_psi_fixed"] is None else {"tau_psi": conf["tau_psi_fixed"]}
        base = {o["name"]: conf[o["name"]] for o in SAMPLER_OPTS}
        if conf["chains"] < 1:
            raise DomainError("chains must be at least 1")
        if conf["chains"] == 1:
            seeds = [conf["seed"]]
        else:
            seeds = [int(s.generate_state(1)[0]) for s in spawn_seeds(conf["seed"], conf["chains"])]
        configs = [SamplerConfig(**{**base, "seed": s}, fixed=fixed) for s in seeds]
    except DomainError as exc:
        raise UsageError(str(exc)) from None

    jobs = [(data, priors, c) for c in configs]
    if len(jobs) == 1:
        traces = [_run_one(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
            traces = list(pool.map(_run_one, jobs))

    out = _output_dir(conf)
    files, report = [], {"chains": []}
    for k, tr in enumerate(traces):
        name = "trace.csv" if len(traces) == 1 else f"trace_chain{k}.csv"
        files.append(io.write_trace(out / name, tr))
        report["chains"].append({
            "trace": name, "seed": tr.seed, "n_samples": len(tr),
            "acceptance_rates": tr.acceptance_rates, "accepted": tr.accepted,
            "proposals": tr.proposals, "rejected": tr.rejected,
            "final_scales": tr.final_scales, "factorization_failures": tr.factorization_failures,
        })
    files.append(io.write_json(out / "acceptance.json", report))
    files.append(io.write_json(out / "metadata.json", _metadata("fit", conf, files, n_sites=data.n)))
    return files


def _grid_for(conf, data) -> LatticeSpec:
    lo, hi = data.sites.min(axis=0), data.sites.max(axis=0)
    bounds = [conf["x_min"], conf["x_max"], conf["y_min"], conf["y_max"]]
    default = [lo[0], hi[0], lo[1], hi[1]]
    b = [d if v is None else v for v, d in zip(bounds, default)]
    return LatticeSpec(b[0], b[1], b[2], b[3], conf["nx"], conf["ny"])


def cmd_predict(conf) -> list:
    _require_file(conf["data"], "data")
    _require_file(conf["trace"], "trace")
    data = io.ingest_observations(conf["data"], conf["log_transform"])
    trace = io.read_trace(conf["trace"])
    if len(trace) == 0:
        raise UsageError("trace is empty")
    if trace.samples[0].n != data.n:
        raise UsageError(f"trace has {trace.samples[0].n} sites but the data has {data.n}")
    try:
        grid = _grid_for(conf, data)
        if conf["psi_mode"] not in ("draw", "mean"):
            raise DomainError("psi_mode must be 'draw' or 'mean'")
        modal_taus = [float(t) for t in str(conf["modal_tau_psi"]).split(",") if t.strip()]
    except (DomainError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if conf["max_samples"] and len(trace) > conf["max_samples"]:
        keep = np.unique(np.linspace(0, len(trace) - 1, conf["max_samples"]).round().astype(int))
        trace.samples = [trace.samples[i] for i in keep]
        trace.log_posts = trace.log_posts[keep]
        trace.iterations = trace.iterations[keep]

    pred = predict_surface(data, trace, grid, conf["seed"], conf["area"], conf["psi_mode"],
                           conf["include_nugget"])
    out = _output_dir(conf)
    sites = grid.sites()
    files = [io.write_csv(out / "prediction.csv", ["x", "y", "mean", "sd"],
                          ([s[0], s[1], m, sd] for s, m, sd in zip(sites, pred.mean, pred.sd)))]
    if conf["kernel_summaries"]:
        priors = HyperPriors(area=conf["area"])
        ks = kernel_summary(data, trace, priors, modal_taus, conf["n_angles"],
                            conf["shrink_factor"], conf["modal_max_sweeps"])
        files.append(io.write_csv(out / "kernels_mean_foci.csv", io.ELLIPSE_HEADER,
                                  io.ellipse_rows(ks.mean_foci, conf["n_boundary"])))
        rows = []
        for i, prof in enumerate(ks.radial):
            sx, sy = data.sites[i]
            for angle, r in prof:
                r_disp = r / ks.shrink_factor
                rows.append([i, sx, sy, angle, r, sx + r_disp * math.cos(angle),
                             sy + r_disp * math.sin(angle)])
        files.append(io.write_csv(out / "kernels_radial.csv",
                                  ["site", "site_x", "site_y", "angle", "radius", "bx", "by"], rows))
        modal_info = {}
        for t, mk in ks.modal.items():
            name = f"kernels_modal_tau{t:g}.csv"
            files.append(io.write_csv(out / name, io.ELLIPSE_HEADER,
                                      io.ellipse_rows(mk.ellipses, conf["n_boundary"])))
            modal_info[name] = {"tau_psi": t, "objective": mk.objective,
                                "converged": mk.converged, "sweeps": mk.sweeps}
    else:
        modal_info = {}
    files.append(io.write_json(out / "metadata.json", _metadata(
        "predict", conf, files, n_samples_used=pred.n_samples, samples_skipped=pred.skipped,
        modal=modal_info)))
    return files


SUMMARY_HEADER = ["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "acceptance_rate"]


def cmd_summarize(conf) -> list:
    _require_file(conf["trace"], "trace")
    trace = io.read_trace(conf["trace"])
    if len(trace) == 0:
        raise UsageError("trace is empty")
    acc_path = conf["acceptance"] or str(Path(conf["trace"]).with_name("acceptance.json"))
    rates = {}
    if Path(acc_path).is_file():
        report = json.loads(Path(acc_path).read_text())
        name = Path(conf["trace"]).name
        for chain in report.get("chains", []):
            if chain.get("trace") == name or len(report["chains"]) == 1:
                rates = chain.get("acceptance_rates", {})
    summ = posterior_summaries(trace)
    rows = []
    for param, s in summ.items():
        block = "psi" if param.startswith("psi_") else param
        rate = rates.get(block)
        rows.append([param, s.mean, s.sd, s.q025, s.q50, s.q975,
                     math.nan if rate is None else rate])
    out = _output_dir(conf)
    files = [io.write_csv(out / "summary.csv", SUMMARY_HEADER, rows)]
    files.append(io.write_json(out / "metadata.json", _metadata("summarize", conf, files)))
    print(format_table(rows))
    return files


def format_table(rows) -> str:
    cells = [SUMMARY_HEADER] + [[r[0]] + [f"{v:.4g}" for v in r[1:]] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_HEADER))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


HANDLERS = {"simulate": cmd_simulate, "make-synthetic": cmd_make_synthetic, "fit": cmd_fit,
            "predict": cmd_predict, "summarize": cmd_summarize}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = resolve(args, args.command)
        files = HANDLERS[args.command](conf)
    except (UsageError, io.InputError, PreconditionError) as exc:
        print(f"procconv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, SamplerAbort) as exc:
        print(f"procconv {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 1
    except DomainError as exc:
        print(f"procconv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for f in files:
        log.info("wrote %s", f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
