"""Command-line interface.

Four subcommands:

* ``fit``: one penalized (or unpenalized) fit on a two-file dataset, with
  sandwich standard errors and the mode's information criterion.
* ``tune``: grid search over lambda, reporting the criterion path and the
  chosen fit.
* ``simulate``: write one simulated dataset as a units/pairs CSV file pair.
* ``replicate``: run a selection study and print the summary table
  (lambda mean, correct selections, false discoveries).

Every option can also come from a ``key=value`` config file (``--config``);
explicit flags win. Outputs are deterministic for a given seed and config,
carry their resolved configuration as '#' header lines, and are written via a
temporary file so failed runs leave nothing behind.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import ConfigError, Hpgee2Error
from .io import load_dataset, report_fit, report_fit_csv, write_dataset
from .penalty import PenaltyConfig
from .simulate import StudyConfig, SelectionMetrics, replicate_study, simulate_dataset
from .solver import AnalysisMode, fit_hpgee2
from .tuning import bic_for_mode, grid_search, log_grid, sandwich_covariance

_MODES = {"mean": AnalysisMode.MEAN_ONLY, "assoc": AnalysisMode.ASSOC_ONLY, "joint": AnalysisMode.JOINT}
_PENALTIES = ("none", "lasso", "scad")


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cli: cannot parse boolean value {text!r}")


def _grid(text):
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ConfigError(f"cli: grid must be LO:HI:N, got {text!r}")
    try:
        lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError(f"cli: grid must be LO:HI:N with numeric parts, got {text!r}") from None
    return log_grid(lo, hi, num)


# sentinel default marking an option the user must supply
_REQUIRED = object()

# option name -> (converter, default)
_SPECS = {
    "fit": {
        "units": (str, _REQUIRED),
        "pairs": (str, _REQUIRED),
        "mode": (str, "joint"),
        "penalty": (str, "none"),
        "lam": (float, None),
        "a": (float, 3.7),
        "tol": (float, 1e-6),
        "max_outer": (int, 100),
        "intercept": (_bool, True),
        "link": (str, []),
        "out": (str, ""),
        "format": (str, "text"),
    },
    "tune": {
        "units": (str, _REQUIRED),
        "pairs": (str, _REQUIRED),
        "mode": (str, "joint"),
        "penalty": (str, "scad"),
        "grid": (_grid, ""),
        "a": (float, 3.7),
        "tol": (float, 1e-6),
        "max_outer": (int, 100),
        "intercept": (_bool, True),
        "link": (str, []),
        "out": (str, ""),
        "format": (str, "text"),
    },
    "simulate": {
        "n_clusters": (int, _REQUIRED),
        "cluster_size": (int, 5),
        "seed": (int, 0),
        "out": (str, _REQUIRED),
    },
    "replicate": {
        "n_clusters": (int, _REQUIRED),
        "cluster_size": (int, 5),
        "replicates": (int, 100),
        "mode": (str, "joint"),
        "penalty": (str, ""),
        "grid": (_grid, ""),
        "seed": (int, 0),
        "a": (float, 3.7),
        "tol": (float, 1e-6),
        "out": (str, ""),
        "format": (str, "text"),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpgee2",
        description="Penalized second-order estimating equations for clustered binary data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_fit(p, tune):
        p.add_argument("--units", help="units CSV file")
        p.add_argument("--pairs", help="pairs CSV file")
        p.add_argument("--mode", choices=sorted(_MODES))
        p.add_argument("--penalty", choices=_PENALTIES)
        if tune:
            p.add_argument("--grid", help="lambda grid LO:HI:N (log spaced)")
        else:
            p.add_argument("--lambda", dest="lam", type=float, help="penalty tuning parameter")
        p.add_argument("--a", type=float, help="SCAD shape parameter")
        p.add_argument("--tol", type=float, help="outer convergence tolerance")
        p.add_argument("--max-outer", dest="max_outer", type=int)
        p.add_argument(
            "--no-intercept",
            dest="intercept",
            action="store_const",
            const=False,
            help="files already contain intercept columns",
        )
        p.add_argument(
            "--link",
            action="append",
            help="hierarchy constraint MEAN_NAME:ASSOC_NAME[,ASSOC_NAME...] (repeatable)",
        )
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=("text", "csv"))
        p.add_argument("--config", help="key=value config file; flags override")

    p_fit = sub.add_parser("fit", help="fit at a fixed penalty")
    add_common_fit(p_fit, tune=False)
    p_tune = sub.add_parser("tune", help="grid search over lambda")
    add_common_fit(p_tune, tune=True)

    p_sim = sub.add_parser("simulate", help="write one simulated dataset")
    p_sim.add_argument("--n-clusters", dest="n_clusters", type=int)
    p_sim.add_argument("--cluster-size", dest="cluster_size", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--out", help="output prefix; writes PREFIX_units.csv and PREFIX_pairs.csv")
    p_sim.add_argument("--config", help="key=value config file; flags override")

    p_rep = sub.add_parser("replicate", help="run a selection study")
    p_rep.add_argument("--n-clusters", dest="n_clusters", type=int)
    p_rep.add_argument("--cluster-size", dest="cluster_size", type=int)
    p_rep.add_argument("--replicates", type=int)
    p_rep.add_argument("--mode", choices=sorted(_MODES))
    p_rep.add_argument("--penalty", choices=_PENALTIES, help="default: run lasso and scad")
    p_rep.add_argument("--grid", help="lambda grid LO:HI:N (log spaced)")
    p_rep.add_argument("--seed", type=int)
    p_rep.add_argument("--a", type=float)
    p_rep.add_argument("--tol", type=float)
    p_rep.add_argument("--out", help="output file (default: stdout)")
    p_rep.add_argument("--format", choices=("text", "csv"))
    p_rep.add_argument("--config", help="key=value config file; flags override")
    return parser


def _read_config_file(path):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
                key, _, val = text.partition("=")
                values[key.strip().replace("-", "_")] = val.strip()
    except OSError as exc:
        raise ConfigError(f"cli: cannot read config file {path}: {exc}") from None
    return values


def _resolve(args) -> dict:
    """Merge CLI flags over config-file values over defaults."""
    spec = _SPECS[args.command]
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_values) - set(spec)
    if unknown:
        raise ConfigError(
            f"cli: unknown config keys {sorted(unknown)}; valid keys: {sorted(spec)}"
        )
    resolved = {}
    for key, (conv, default) in spec.items():
        flag_val = getattr(args, key, None)
        if key == "link" and flag_val is not None:
            resolved[key] = list(flag_val)
            continue
        if flag_val is not None:
            # argparse leaves grid/intercept flags as raw strings; normalize
            # them with the same converter config-file values go through
            resolved[key] = conv(flag_val) if isinstance(flag_val, str) else flag_val
        elif key in file_values:
            raw = file_values[key]
            resolved[key] = [s for s in raw.split(";") if s] if key == "link" else conv(raw)
        else:
            if default is _REQUIRED:
                raise ConfigError(f"cli: missing required option --{key.replace('_', '-')}")
            resolved[key] = list(default) if isinstance(default, list) else default
    return resolved


def _echo_header(command, resolved) -> str:
    parts = []
    for key in sorted(resolved):
        val = resolved[key]
        if key == "grid" and isinstance(val, np.ndarray):
            val = f"{val[0]:.6g}:{val[-1]:.6g}:{val.size}"
        if key == "link":
            val = ";".join(val) if val else "-"
        if val is None or val == "":
            val = "-"
        parts.append(f"{key.replace('_', '-')}={val}")
    return f"# hpgee2 {command}\n# " + " ".join(parts) + "\n"


def _emit(text, out_path):
    if not out_path:
        sys.stdout.write(text)
        return
    tmp = out_path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, out_path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _parse_links(link_specs, mean_names, assoc_names):
    cmap = {}
    for spec in link_specs:
        head, sep, tail = spec.partition(":")
        if not sep or not tail:
            raise ConfigError(f"cli: --link must be MEAN:ASSOC[,ASSOC...], got {spec!r}")
        mname = head.strip()
        if mname not in mean_names:
            raise ConfigError(f"cli: --link mean coefficient {mname!r} not in {mean_names}")
        targets = []
        for aname in tail.split(","):
            aname = aname.strip()
            if aname not in assoc_names:
                raise ConfigError(
                    f"cli: --link association coefficient {aname!r} not in {assoc_names}"
                )
            targets.append(assoc_names.index(aname))
        cmap.setdefault(mean_names.index(mname), []).extend(targets)
    return cmap or None


def _load_for_fit(opt):
    dataset, mean_names, assoc_names = load_dataset(
        opt["units"], opt["pairs"], add_intercept=opt["intercept"]
    )
    cmap = _parse_links(opt["link"], mean_names, assoc_names)
    exclude = frozenset({0}) if opt["intercept"] else frozenset()
    return dataset, mean_names, assoc_names, cmap, exclude


def _cmd_fit(opt) -> str:
    dataset, mean_names, assoc_names, cmap, exclude = _load_for_fit(opt)
    mode = _MODES[opt["mode"]]
    kind = opt["penalty"]
    if kind != "none" and opt["lam"] is None:
        raise ConfigError("cli: a penalized fit needs --lambda (or use the tune command)")
    lam = float(opt["lam"] or 0.0)
    none_cfg = PenaltyConfig("none", 0.0, opt["a"], exclude)
    pen_cfg = PenaltyConfig(kind, lam, opt["a"], exclude)
    cfg_mean = none_cfg if (kind == "none" or mode == AnalysisMode.ASSOC_ONLY) else pen_cfg
    cfg_assoc = none_cfg if (kind == "none" or mode == AnalysisMode.MEAN_ONLY) else pen_cfg
    fit = fit_hpgee2(
        dataset,
        mode=mode,
        cfg_mean=cfg_mean,
        cfg_assoc=cfg_assoc,
        constraint_map=cmap,
        tol=opt["tol"],
        max_outer=opt["max_outer"],
    )
    fit.bic = bic_for_mode(dataset, fit)
    sc = sandwich_covariance(dataset, fit)
    fit.se_beta, fit.se_alpha = sc.se_beta, sc.se_alpha
    render = report_fit_csv if opt["format"] == "csv" else report_fit
    return _echo_header("fit", opt) + render(fit, mean_names, assoc_names)


def _cmd_tune(opt) -> str:
    dataset, mean_names, assoc_names, cmap, exclude = _load_for_fit(opt)
    mode = _MODES[opt["mode"]]
    if opt["penalty"] == "none":
        raise ConfigError("cli: tune requires --penalty lasso or scad")
    grid = opt["grid"] if isinstance(opt["grid"], np.ndarray) else None
    report = grid_search(
        dataset,
        mode=mode,
        kind=opt["penalty"],
        grid=grid,
        a=opt["a"],
        exclude_mean=exclude,
        exclude_assoc=exclude,
        constraint_map=cmap,
        tol=opt["tol"],
        max_outer=opt["max_outer"],
    )
    fit = report.chosen_fit
    sc = sandwich_covariance(dataset, fit)
    fit.se_beta, fit.se_alpha = sc.se_beta, sc.se_alpha

    lines = [_echo_header("tune", opt).rstrip("\n")]
    if opt["format"] == "csv":
        lines.append("lambda,bic,n_active_mean,n_active_assoc,error")
        for pt in report.path:
            na_b = "" if pt.active_beta is None else str(pt.active_beta.size)
            na_a = "" if pt.active_alpha is None else str(pt.active_alpha.size)
            bic_s = "" if not np.isfinite(pt.bic) else f"{pt.bic:.10g}"
            err = pt.error.replace(",", ";") if pt.error else ""
            lines.append(f"{pt.lam:.10g},{bic_s},{na_b},{na_a},{err}")
        lines.append(f"# chosen lambda={report.chosen_lambda:.10g}")
        lines.append(report_fit_csv(fit, mean_names, assoc_names).rstrip("\n"))
    else:
        lines.append(f"chosen lambda: {report.chosen_lambda:.6g} "
                     f"(criterion {report.chosen_fit.bic:.3f}, {report.n_failures} grid failures)")
        lines.append("")
        lines.append(f"  {'lambda':>10}{'criterion':>14}{'active':>8}")
        for pt in report.path:
            if pt.error:
                lines.append(f"  {pt.lam:>10.4g}{'failed':>14}{'':>8}")
            else:
                n_active = pt.active_beta.size + pt.active_alpha.size
                marker = " *" if pt.lam == report.chosen_lambda else ""
                lines.append(f"  {pt.lam:>10.4g}{pt.bic:>14.3f}{n_active:>8}{marker}")
        lines.append("")
        lines.append(report_fit(fit, mean_names, assoc_names).rstrip("\n"))
    return "\n".join(lines) + "\n"


def _cmd_simulate(opt) -> str:
    config = StudyConfig(
        n_clusters=opt["n_clusters"],
        cluster_size=opt["cluster_size"],
        seed=opt["seed"],
    )
    dataset, _, diag = simulate_dataset(config, opt["seed"])
    prefix = opt["out"]
    mean_names = ["intercept"] + [f"x{i}" for i in range(1, 6)] + [f"z{i}" for i in range(1, 6)]
    assoc_names = ["intercept"] + [f"w{i}" for i in range(1, 6)] + [f"v{i}" for i in range(1, 6)]
    comments = [
        "hpgee2 simulate",
        f"n-clusters={opt['n_clusters']} cluster-size={opt['cluster_size']} seed={opt['seed']}",
        "beta-true=" + ",".join(f"{v:g}" for v in config.beta_true),
        "alpha-true=" + ",".join(f"{v:g}" for v in config.alpha_true),
    ]
    units_path = f"{prefix}_units.csv"
    pairs_path = f"{prefix}_pairs.csv"
    tmp_units, tmp_pairs = units_path + ".tmp", pairs_path + ".tmp"
    try:
        write_dataset(dataset, tmp_units, tmp_pairs, mean_names, assoc_names, comments=comments)
        os.replace(tmp_units, units_path)
        os.replace(tmp_pairs, pairs_path)
    finally:
        for tmp in (tmp_units, tmp_pairs):
            if os.path.exists(tmp):
                os.remove(tmp)
    return (
        _echo_header("simulate", opt)
        + f"wrote {units_path} ({dataset.total_units} units) and "
        + f"{pairs_path} ({dataset.total_pairs} pairs); "
        + f"mean clipped pmf mass {diag.mean_clipped:.4f}\n"
    )


def _study_row(metrics: SelectionMetrics, penalty, n):
    return {
        "penalty": penalty,
        "n": n,
        "lambda_mean": metrics.lambda_mean,
        "ps_mean": metrics.ps_mean,
        "ps_sd": metrics.ps_sd,
        "fd_mean": metrics.fd_mean,
        "fd_sd": metrics.fd_sd,
        "failures": metrics.n_failures,
    }


def _cmd_replicate(opt) -> str:
    penalties = [opt["penalty"]] if opt["penalty"] else ["lasso", "scad"]
    grid = opt["grid"] if isinstance(opt["grid"], np.ndarray) else None
    rows = []
    for kind in penalties:
        config = StudyConfig(
            n_clusters=opt["n_clusters"],
            cluster_size=opt["cluster_size"],
            mode=_MODES[opt["mode"]],
            penalty=kind,
            grid=grid,
            replicates=opt["replicates"],
            seed=opt["seed"],
            a=opt["a"],
            tol=opt["tol"],
        )
        rows.append(_study_row(replicate_study(config), kind, opt["n_clusters"]))

    lines = [_echo_header("replicate", opt).rstrip("\n")]
    if opt["format"] == "csv":
        lines.append("penalty,n,lambda_mean,ps_mean,ps_sd,fd_mean,fd_sd,failures")
        for r in rows:
            lines.append(
                f"{r['penalty']},{r['n']},{r['lambda_mean']:.10g},{r['ps_mean']:.10g},"
                f"{r['ps_sd']:.10g},{r['fd_mean']:.10g},{r['fd_sd']:.10g},{r['failures']}"
            )
    else:
        lines.append(
            f"  {'penalty':<9}{'n':>6}{'lambda':>10}{'PS':>8}{'(sd)':>8}{'FD':>8}{'(sd)':>8}{'fail':>6}"
        )
        for r in rows:
            lines.append(
                f"  {r['penalty']:<9}{r['n']:>6}{r['lambda_mean']:>10.3f}"
                f"{r['ps_mean']:>8.3f}{r['ps_sd']:>8.3f}{r['fd_mean']:>8.3f}"
                f"{r['fd_sd']:>8.3f}{r['failures']:>6}"
            )
    return "\n".join(lines) + "\n"


_COMMANDS = {
    "fit": _cmd_fit,
    "tune": _cmd_tune,
    "simulate": _cmd_simulate,
    "replicate": _cmd_replicate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opt = _resolve(args)
        text = _COMMANDS[args.command](opt)
        _emit(text, opt.get("out") if args.command != "simulate" else "")
    except Hpgee2Error as exc:
        print(f"hpgee2: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
