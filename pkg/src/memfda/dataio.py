"""CSV ingestion and export.

Counts travel in a long format (subject_id, day, slot, count) with an empty
count field for missing values; covariates in a wide companion file
(subject_id, Y, then one column per error-free covariate).  Every exported
file starts with '# key=value' comment lines carrying its resolved
configuration; ingestion reads them back, so an export -> ingest -> export
round trip is byte-identical.

Ingestion applies the non-wear rule (a run of at least `run_threshold`
consecutive zero counts becomes missing), aggregates slots into grid bins,
drops subjects observed on fewer than `min_days` days, and truncates
everyone to the common number of replicate days.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import FunctionalGrid, MultiLevelSample
from .metrics import METRIC_COLUMNS, MetricReport

REPORT_COLUMNS = ("estimator",) + METRIC_COLUMNS


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if np.isnan(xf):
        return ""
    if xf == int(xf) and abs(xf) < 1e15:
        return str(int(xf))
    return f"{xf:.17g}"


def _write_csv(path, columns, rows, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for key in sorted(meta or {}):
            if not str(key).startswith("_"):
                fh.write(f"# {key}={meta[key]}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _read_csv(path):
    """Returns (meta, header, rows, line_numbers); comment lines feed meta."""
    meta = {}
    header = None
    rows, line_nos = [], []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    meta[key.strip()] = val.strip()
                continue
            if not line.strip():
                continue
            cells = line.split(",")
            if header is None:
                header = cells
            else:
                rows.append(cells)
                line_nos.append(lineno)
    if header is None:
        raise ValueError(f"{path}: no header row found")
    return meta, header, rows, line_nos


# ---------------------------------------------------------------------------
# Non-wear detection
# ---------------------------------------------------------------------------


def nonwear_mask(minute_counts, run_threshold: int = 60) -> np.ndarray:
    """True at every position inside a maximal run of zeros whose length
    reaches run_threshold.  NaN (already-missing) entries break runs and are
    never marked."""
    x = np.asarray(minute_counts, dtype=float)
    if x.ndim != 1:
        raise ValueError("minute counts must be a 1-d vector")
    finite = np.isfinite(x)
    if np.any(x[finite] < 0) or np.any(x[finite] != np.round(x[finite])):
        raise ValueError("counts must be nonnegative integers")
    mask = np.zeros(x.size, dtype=bool)
    run_start = None
    for i in range(x.size + 1):
        is_zero = i < x.size and finite[i] and x[i] == 0
        if is_zero and run_start is None:
            run_start = i
        elif not is_zero and run_start is not None:
            if i - run_start >= run_threshold:
                mask[run_start:i] = True
            run_start = None
    return mask


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _parse_counts(path, slots_per_day):
    meta, header, rows, line_nos = _read_csv(path)
    if header != ["subject_id", "day", "slot", "count"]:
        raise ValueError(f"{path}: expected header subject_id,day,slot,count, got {header}")
    per_subject = {}
    seen = set()
    for cells, lineno in zip(rows, line_nos):
        if len(cells) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(cells)}")
        sid, day_s, slot_s, count_s = cells
        try:
            day = int(day_s)
            slot = int(slot_s)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad day/slot: {exc}") from None
        if day < 1:
            raise ValueError(f"{path}:{lineno}: day must be >= 1, got {day}")
        if not (0 <= slot < slots_per_day):
            raise ValueError(
                f"{path}:{lineno}: slot {slot} outside [0, {slots_per_day})"
            )
        if count_s == "":
            count = np.nan
        else:
            try:
                count = int(count_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad count {count_s!r}") from None
            if count < 0:
                raise ValueError(f"{path}:{lineno}: negative count {count}")
        key = (sid, day, slot)
        if key in seen:
            raise ValueError(f"{path}:{lineno}: duplicate (subject, day, slot) {key}")
        seen.add(key)
        per_subject.setdefault(sid, {}).setdefault(day, {})[slot] = count
    return meta, per_subject


def _parse_covariates(path):
    meta, header, rows, line_nos = _read_csv(path)
    if len(header) < 2 or header[0] != "subject_id" or header[1] != "Y":
        raise ValueError(f"{path}: expected header subject_id,Y,..., got {header}")
    z_names = header[2:]
    table = {}
    for cells, lineno in zip(rows, line_nos):
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields")
        sid = cells[0]
        if sid in table:
            raise ValueError(f"{path}:{lineno}: duplicate subject {sid!r}")
        try:
            y = int(cells[1])
            z = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value: {exc}") from None
        if y not in (0, 1):
            raise ValueError(f"{path}:{lineno}: Y must be 0/1, got {y}")
        table[sid] = (y, z)
    return meta, z_names, table


def ingest(
    counts_path,
    covariates_path,
    slots_per_day: int = 1440,
    n_bins: int = 24,
    run_threshold: int = 60,
    min_days: int = 4,
    truth_path=None,
) -> MultiLevelSample:
    """Build an analysis sample from long-format counts and a covariate file.

    Aggregation sums the unmasked slots of each bin; a bin is missing only
    when every slot in it is masked or absent.  Days with no wear time left
    after masking do not count toward min_days.
    """
    if slots_per_day % n_bins != 0:
        raise ValueError(f"slots_per_day={slots_per_day} not divisible by n_bins={n_bins}")
    width = slots_per_day // n_bins
    meta, per_subject = _parse_counts(counts_path, slots_per_day)
    _, z_names, cov_table = _parse_covariates(covariates_path)

    missing_cov = sorted(set(per_subject) - set(cov_table))
    if missing_cov:
        raise ValueError(
            f"subjects present in counts but not covariates: {missing_cov[:5]}"
        )

    kept = {}
    dropped_days = 0
    for sid in sorted(per_subject):
        day_curves = []
        for day in sorted(per_subject[sid]):
            slots = np.full(slots_per_day, np.nan)
            for slot, count in per_subject[sid][day].items():
                slots[slot] = count
            slots[nonwear_mask(slots, run_threshold)] = np.nan
            if not np.any(np.isfinite(slots)):
                continue  # fully masked day: no wear data
            binned = np.full(n_bins, np.nan)
            for b in range(n_bins):
                chunk = slots[b * width : (b + 1) * width]
                if np.any(np.isfinite(chunk)):
                    binned[b] = np.nansum(chunk)
            day_curves.append(binned)
        if len(day_curves) >= min_days:
            kept[sid] = day_curves

    if not kept:
        raise ValueError(f"no subject has at least {min_days} days of wear data")
    J = min(len(v) for v in kept.values())
    subject_ids = sorted(kept)
    W = np.empty((len(subject_ids), J, n_bins))
    for i, sid in enumerate(subject_ids):
        dropped_days += len(kept[sid]) - J
        W[i] = np.stack(kept[sid][:J])

    Y = np.array([cov_table[sid][0] for sid in subject_ids])
    Z = np.array([cov_table[sid][1] for sid in subject_ids], dtype=float)
    if Z.size == 0:
        Z = Z.reshape(len(subject_ids), 0)

    X = eta = None
    if truth_path is not None:
        X, eta = _read_truth(truth_path, subject_ids, n_bins)

    meta = dict(meta)
    meta["_ingest_dropped_days"] = dropped_days
    return MultiLevelSample(
        W=W,
        Z=Z,
        Y=Y,
        grid=FunctionalGrid.uniform(n_bins),
        X=X,
        eta=eta,
        subject_ids=subject_ids,
        z_names=z_names,
        meta=meta,
    )


def _read_truth(path, subject_ids, T):
    _, header, rows, _ = _read_csv(path)
    expected = ["subject_id", "eta"] + [f"x{l}" for l in range(T)]
    if header != expected:
        raise ValueError(f"{path}: unexpected truth header")
    table = {cells[0]: [float(c) for c in cells[1:]] for cells in rows}
    missing = [s for s in subject_ids if s not in table]
    if missing:
        raise ValueError(f"truth file lacks subjects {missing[:5]}")
    full = np.array([table[sid] for sid in subject_ids], dtype=float)
    return full[:, 1:], full[:, 0]


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_dataset(sample: MultiLevelSample, outdir, meta=None) -> dict:
    """Write counts.csv / covariates.csv (+ truth.csv when latent curves are
    known) into outdir; returns the paths."""
    outdir = Path(outdir)
    meta = {**{k: v for k, v in sample.meta.items() if not str(k).startswith("_")},
            **(meta or {})}
    sids = sample.subject_ids or [f"s{i:06d}" for i in range(sample.n)]

    def count_rows():
        for i, sid in enumerate(sids):
            for j in range(sample.n_replicates):
                for l in range(sample.grid.size):
                    v = sample.W[i, j, l]
                    yield (sid, j + 1, l, "" if not np.isfinite(v) else int(v))

    paths = {
        "counts": _write_csv(
            outdir / "counts.csv", ["subject_id", "day", "slot", "count"], count_rows(), meta
        ),
        "covariates": _write_csv(
            outdir / "covariates.csv",
            ["subject_id", "Y"] + (sample.z_names or [f"Z{j+1}" for j in range(sample.Z.shape[1])]),
            ((sid, int(sample.Y[i]), *sample.Z[i]) for i, sid in enumerate(sids)),
            meta,
        ),
    }
    if sample.X is not None:
        eta = sample.eta if sample.eta is not None else np.full(sample.n, np.nan)
        paths["truth"] = _write_csv(
            outdir / "truth.csv",
            ["subject_id", "eta"] + [f"x{l}" for l in range(sample.grid.size)],
            ((sid, eta[i], *sample.X[i]) for i, sid in enumerate(sids)),
            meta,
        )
    return paths


def export_reconstruction(rec, grid, path, meta=None):
    """Wide subject-by-time CSV of reconstructed values."""
    columns = ["subject"] + [f"x{l}" for l in range(rec.values.shape[1])]
    header = {"method": rec.method, **(meta or {})}
    if rec.window is not None:
        header["window"] = rec.window
    rows = ((i, *rec.values[i]) for i in range(rec.values.shape[0]))
    return _write_csv(path, columns, rows, header)


def export_curve(t, curve, path, meta=None, lower=None, upper=None):
    """(t, estimate[, lower, upper]) rows for the coefficient curve."""
    if lower is None:
        rows = zip(t, curve)
        cols = ["t", "beta_hat"]
    else:
        rows = zip(t, curve, lower, upper)
        cols = ["t", "beta_hat", "lower", "upper"]
    return _write_csv(path, cols, rows, meta)


def export_coef_table(names, estimates, path, meta=None, lower=None, upper=None):
    """Scalar-coefficient table: one row per term, intercept first."""
    if lower is None:
        rows = zip(names, estimates)
        cols = ["term", "estimate"]
    else:
        rows = zip(names, estimates, lower, upper)
        cols = ["term", "estimate", "lower", "upper"]
    return _write_csv(path, cols, rows, meta)


def export_bands(bands, path, meta=None):
    header = {"level": bands.level, "method": bands.method, **(meta or {})}
    rows = zip(bands.t, bands.lower, bands.estimate, bands.upper)
    return _write_csv(path, ["t", "lower", "estimate", "upper"], rows, header)


def export_report(report: MetricReport, path, meta=None):
    """Per-estimator metric table; scenario settings go into the header."""
    header = {**report.scenario, **(meta or {})}
    for est, cnt in report.failures.items():
        if cnt:
            header[f"failures_{est}"] = cnt
    rows = (
        (est, *(report.rows[est][m] for m in METRIC_COLUMNS))
        for est in report.estimators
    )
    return _write_csv(path, list(REPORT_COLUMNS), rows, header)
