"""Dataset files and fit reports.

A dataset is two CSV files sharing cluster ids:

* units file: ``cluster_id, unit_id, y, <mean covariates...>`` with one row
  per unit. Cluster order and within-cluster unit order follow file order.
* pairs file: ``cluster_id, unit_j, unit_k, <association covariates...>``
  with one row per within-cluster pair, listed in lexicographic order of the
  cluster's unit positions and oriented earlier-unit-first.

Both files require a header row, are UTF-8 and comma-delimited, and may carry
leading comment lines starting with ``#`` (the simulate command writes its
provenance there). An intercept column is prepended to both design blocks on
load by default, so files carry only the real covariates.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import ClusterData, Dataset
from .errors import DataFormatError
from .solver import FitResult

UNIT_FIXED = ("cluster_id", "unit_id", "y")
PAIR_FIXED = ("cluster_id", "unit_j", "unit_k")


def _read_rows(path):
    """Yield (line_number, row) from a CSV file, skipping leading '#' comments."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        in_preamble = True
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if in_preamble and (not stripped or stripped.startswith("#")):
                continue
            in_preamble = False
            if not stripped:
                continue
            rows.append((lineno, next(csv.reader([line]))))
    if not rows:
        raise DataFormatError(f"{path}: no header row found")
    return rows


def _check_header(path, header, fixed):
    if len(header) < len(fixed) or tuple(h.strip() for h in header[: len(fixed)]) != fixed:
        raise DataFormatError(
            f"{path}: header must start with {', '.join(fixed)}; got {header[:len(fixed)]}"
        )
    return [h.strip() for h in header[len(fixed):]]


def _parse_floats(path, lineno, cells, names):
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise DataFormatError(
            f"{path}:{lineno}: non-numeric covariate value ({exc})"
        ) from None


def load_dataset(units_path, pairs_path, add_intercept: bool = True):
    """Read the two-file dataset. Returns (dataset, mean_names, assoc_names)."""
    unit_rows = _read_rows(units_path)
    mean_names = _check_header(units_path, unit_rows[0][1], UNIT_FIXED)
    n_ucols = len(UNIT_FIXED) + len(mean_names)

    # cluster_id -> {"units": [unit_id...], "y": [...], "x": [...]}
    clusters: dict[str, dict] = {}
    for lineno, row in unit_rows[1:]:
        if len(row) != n_ucols:
            raise DataFormatError(
                f"{units_path}:{lineno}: expected {n_ucols} columns, got {len(row)}"
            )
        cid, uid, y_raw = row[0].strip(), row[1].strip(), row[2].strip()
        if not cid or not uid:
            raise DataFormatError(f"{units_path}:{lineno}: empty cluster_id or unit_id")
        try:
            y = float(y_raw)
        except ValueError:
            raise DataFormatError(f"{units_path}:{lineno}: outcome {y_raw!r} is not numeric") from None
        if y not in (0.0, 1.0):
            raise DataFormatError(f"{units_path}:{lineno}: outcome must be 0 or 1, got {y_raw!r}")
        entry = clusters.setdefault(cid, {"units": [], "y": [], "x": []})
        if uid in entry["units"]:
            raise DataFormatError(
                f"{units_path}:{lineno}: duplicate unit {uid!r} in cluster {cid!r}"
            )
        entry["units"].append(uid)
        entry["y"].append(y)
        entry["x"].append(_parse_floats(units_path, lineno, row[3:], mean_names))

    pair_rows = _read_rows(pairs_path)
    assoc_names = _check_header(pairs_path, pair_rows[0][1], PAIR_FIXED)
    n_pcols = len(PAIR_FIXED) + len(assoc_names)

    pair_data: dict[str, list] = {cid: [] for cid in clusters}
    for lineno, row in pair_rows[1:]:
        if len(row) != n_pcols:
            raise DataFormatError(
                f"{pairs_path}:{lineno}: expected {n_pcols} columns, got {len(row)}"
            )
        cid, uj, uk = row[0].strip(), row[1].strip(), row[2].strip()
        if cid not in clusters:
            raise DataFormatError(
                f"{pairs_path}:{lineno}: cluster {cid!r} does not appear in the units file"
            )
        units = clusters[cid]["units"]
        if uj not in units or uk not in units:
            raise DataFormatError(
                f"{pairs_path}:{lineno}: pair references unknown unit in cluster {cid!r}"
            )
        j, k = units.index(uj), units.index(uk)
        if j >= k:
            raise DataFormatError(
                f"{pairs_path}:{lineno}: pair ({uj!r}, {uk!r}) must list the earlier "
                f"unit of cluster {cid!r} first"
            )
        pair_data[cid].append((lineno, j, k, _parse_floats(pairs_path, lineno, row[3:], assoc_names)))

    out = []
    for cid, entry in clusters.items():
        n_i = len(entry["units"])
        expected = [(j, k) for j in range(n_i) for k in range(j + 1, n_i)]
        got = pair_data[cid]
        if len(got) != len(expected):
            raise DataFormatError(
                f"{pairs_path}: cluster {cid!r} needs {len(expected)} pair rows "
                f"(size {n_i}), found {len(got)}"
            )
        for (lineno, j, k, _), (ej, ek) in zip(got, expected):
            if (j, k) != (ej, ek):
                raise DataFormatError(
                    f"{pairs_path}:{lineno}: cluster {cid!r} pair rows out of "
                    f"lexicographic order (expected units at positions {ej},{ek})"
                )
        x = np.asarray(entry["x"], dtype=float)
        z = (
            np.asarray([covs for (_, _, _, covs) in got], dtype=float)
            if got
            else np.empty((0, len(assoc_names)))
        )
        if add_intercept:
            x = np.hstack([np.ones((x.shape[0], 1)), x])
            z = np.hstack([np.ones((z.shape[0], 1)), z])
        out.append(ClusterData(cluster_id=cid, y=np.asarray(entry["y"]), x=x, z=z))

    names_mean = (["intercept"] + mean_names) if add_intercept else mean_names
    names_assoc = (["intercept"] + assoc_names) if add_intercept else assoc_names
    return Dataset(out), names_mean, names_assoc


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(
    dataset: Dataset,
    units_path,
    pairs_path,
    mean_names,
    assoc_names,
    intercept: bool = True,
    comments=(),
):
    """Write the two-file representation of ``dataset``.

    ``mean_names``/``assoc_names`` describe the stored design columns. With
    ``intercept=True`` the first column of each design must be the constant 1
    and is dropped (the loader re-adds it). ``comments`` are echoed as '#'
    lines ahead of each header. Unit ids are written as within-cluster
    positions.
    """
    if len(mean_names) != dataset.p or len(assoc_names) != dataset.q:
        raise DataFormatError(
            "write_dataset: names must match design dimensions "
            f"(p={dataset.p}, q={dataset.q})"
        )
    start = 1 if intercept else 0
    if intercept:
        for c in dataset.clusters:
            if not np.all(c.x[:, 0] == 1.0) or (c.z.size and not np.all(c.z[:, 0] == 1.0)):
                raise DataFormatError(
                    f"write_dataset: cluster {c.cluster_id!r} lacks a leading "
                    "intercept column; pass intercept=False"
                )

    with open(units_path, "w", encoding="utf-8", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(list(UNIT_FIXED) + list(mean_names[start:]))
        for c in dataset.clusters:
            for u in range(c.size):
                w.writerow([c.cluster_id, str(u), _fmt(c.y[u])] + [_fmt(v) for v in c.x[u, start:]])

    with open(pairs_path, "w", encoding="utf-8", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(list(PAIR_FIXED) + list(assoc_names[start:]))
        for c in dataset.clusters:
            row_idx = 0
            for j in range(c.size):
                for k in range(j + 1, c.size):
                    w.writerow(
                        [c.cluster_id, str(j), str(k)] + [_fmt(v) for v in c.z[row_idx, start:]]
                    )
                    row_idx += 1


def _block_lines(title, names, estimate, se):
    width = max(12, max((len(n) for n in names), default=0) + 2)
    lines = [title]
    header = f"  {'coefficient':<{width}}{'estimate':>12}"
    if se is not None:
        header += f"{'std.err':>12}"
    lines.append(header)
    for i, name in enumerate(names):
        val = estimate[i]
        est_str = "0" if val == 0.0 else f"{val:.3f}"
        line = f"  {name:<{width}}{est_str:>12}"
        if se is not None:
            se_str = "" if (val == 0.0 or not np.isfinite(se[i])) else f"{se[i]:.3f}"
            line += f"{se_str:>12}"
        lines.append(line)
    return lines


def report_fit(fit: FitResult, mean_names, assoc_names) -> str:
    """Human-readable two-block coefficient table (3 decimals, exact zeros as 0)."""
    lines = []
    lines.append(f"mode: {fit.mode.value}")
    lines.append(
        f"penalty (mean): {fit.cfg_mean.kind}"
        + (f" lambda={fit.cfg_mean.lam:.6g}" if fit.cfg_mean.kind != "none" else "")
    )
    lines.append(
        f"penalty (association): {fit.cfg_assoc.kind}"
        + (f" lambda={fit.cfg_assoc.lam:.6g}" if fit.cfg_assoc.kind != "none" else "")
    )
    lines.append(f"clusters: {fit.n_clusters}")
    if fit.bic is not None:
        lines.append(f"bic: {fit.bic:.3f}")
    conv = [f"initializer={'yes' if fit.alr_diagnostics.converged else 'NO'}"]
    if fit.stage_mean is not None:
        conv.append(f"mean stage={'yes' if fit.stage_mean.converged else 'NO'}")
    if fit.stage_assoc is not None:
        conv.append(f"association stage={'yes' if fit.stage_assoc.converged else 'NO'}")
    lines.append("converged: " + ", ".join(conv))
    if fit.constraint_log:
        pretty = ", ".join(
            f"{mean_names[mi]} -> {assoc_names[ai]}" for mi, ai in fit.constraint_log
        )
        lines.append(f"hierarchy constraints enforced: {pretty}")
    lines.append("")
    lines.extend(_block_lines("Mean model (logit link):", mean_names, fit.beta, fit.se_beta))
    lines.append("")
    lines.extend(
        _block_lines(
            "Association model (log odds ratio link):", assoc_names, fit.alpha, fit.se_alpha
        )
    )
    return "\n".join(lines) + "\n"


def report_fit_csv(fit: FitResult, mean_names, assoc_names) -> str:
    """Machine-readable coefficient table: block,name,estimate,se."""
    rows = ["block,name,estimate,se"]
    for block, names, est, se in (
        ("mean", mean_names, fit.beta, fit.se_beta),
        ("association", assoc_names, fit.alpha, fit.se_alpha),
    ):
        for i, name in enumerate(names):
            est_str = "0" if est[i] == 0.0 else f"{est[i]:.10g}"
            se_str = ""
            if se is not None and est[i] != 0.0 and np.isfinite(se[i]):
                se_str = f"{se[i]:.10g}"
            rows.append(f"{block},{name},{est_str},{se_str}")
    return "\n".join(rows) + "\n"
