"""Deterministic readers and writers for run outputs.

Every writer produces byte-identical files for identical inputs: floats
are written with ``repr`` (shortest round-trip form), archives carry a
fixed timestamp and JSON keys are sorted.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import tempfile
import zipfile
from contextlib import contextmanager

import numpy as np

from .engine import MvnEstimate, PosteriorDrawSet
from .errors import DataError

_EPOCH = (1980, 1, 1, 0, 0, 0)
NA = "NA"


def fmt(x) -> str:
    """Text form of a scalar: ``repr`` for finite floats, ``NA`` for NaN."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return NA
    if math.isinf(x):
        return "Inf" if x > 0 else "-Inf"
    return repr(x)


def _parse(c: str) -> float:
    c = c.strip()
    if c in (NA, "", "NaN", "nan"):
        return math.nan
    if c in ("Inf", "inf"):
        return math.inf
    if c in ("-Inf", "-inf"):
        return -math.inf
    return float(c)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in r])
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


# -- point estimates ---------------------------------------------------------

def summary_text(est: MvnEstimate) -> str:
    """``param,<labels>`` header, a ``mu`` row, then one row of ``Sigma`` per label."""
    rows = [["mu", *est.mu]]
    rows += [[lab, *est.sigma[i]] for i, lab in enumerate(est.labels)]
    return csv_text(["param", *est.labels], rows)


def read_summary(path) -> MvnEstimate:
    header, body = read_csv(path)
    labels = header[1:]
    m = len(labels)
    if header[0] != "param" or len(body) != m + 1 or body[0][0] != "mu":
        raise DataError(f"{path}: not a summary file (expected a 'mu' row and {m} covariance rows)")
    try:
        mu = np.array([_parse(c) for c in body[0][1:]])
        S = np.array([[_parse(c) for c in r[1:]] for r in body[1:]])
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    if mu.shape != (m,) or S.shape != (m, m):
        raise DataError(f"{path}: ragged summary table")
    return MvnEstimate(mu, S, labels)


def matrix_text(M, row_labels, col_labels, corner="") -> str:
    return csv_text([corner, *col_labels], [[r, *M[i]] for i, r in enumerate(row_labels)])


# -- draws archive -----------------------------------------------------------

def _npy_bytes(a) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def draws_bytes(d: PosteriorDrawSet) -> bytes:
    """Columnar ``.npz`` archive of a draw set with fixed member timestamps."""
    arrays = {
        "mu": d.mu, "sigma": d.sigma, "logpost": d.logpost,
        "labels": np.array(d.labels, dtype=str),
        "pred_labels": np.array(d.pred_labels, dtype=str),
        "gaps": d.gaps,
        "gap_cells": np.array(d.gap_cells, dtype=np.int64).reshape(-1, 2),
    }
    if d.nu is not None:
        arrays["nu"] = d.nu
    if d.inclusion is not None:
        arrays["inclusion"] = d.inclusion
        arrays["predictor_mask"] = d.predictor_mask
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as z:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            z.writestr(info, _npy_bytes(arrays[name]))
    return buf.getvalue()


def read_draws(path) -> PosteriorDrawSet:
    try:
        with np.load(path, allow_pickle=False) as z:
            a = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise DataError(f"{path}: not a draws archive ({e})") from None
    for k in ("mu", "sigma", "labels"):
        if k not in a:
            raise DataError(f"{path}: draws archive lacks {k!r}")
    return PosteriorDrawSet(
        a["mu"], a["sigma"], [str(s) for s in a["labels"]], a.get("nu"),
        a.get("inclusion"), a.get("predictor_mask"),
        [str(s) for s in a.get("pred_labels", [])],
        a.get("gaps", np.zeros((a["mu"].shape[0], 0))),
        [tuple(int(v) for v in c) for c in a.get("gap_cells", np.zeros((0, 2), int))],
        a.get("logpost", np.zeros(a["mu"].shape[0])))


def draws_csv_texts(d: PosteriorDrawSet) -> dict:
    """Flat CSV export: one row per draw for ``mu`` and the upper triangle of ``Sigma``."""
    iu = np.triu_indices(d.m)
    sig_names = [f"{d.labels[i]}:{d.labels[j]}" for i, j in zip(*iu)]
    out = {
        "draws_mu.csv": csv_text(["draw", *d.labels], [[t, *d.mu[t]] for t in range(d.T)]),
        "draws_sigma.csv": csv_text(["draw", *sig_names],
                                    [[t, *d.sigma[t][iu]] for t in range(d.T)]),
    }
    if d.nu is not None:
        out["draws_nu.csv"] = csv_text(["draw", *d.labels], [[t, *d.nu[t]] for t in range(d.T)])
    return out


# -- manifests and staged output ---------------------------------------------

def manifest_text(command: str, config: dict, outputs: dict, version: str) -> str:
    """JSON manifest with the resolved configuration and output checksums."""
    doc = {
        "command": command,
        "config": _jsonable(config),
        "outputs": {k: hashlib.sha256(v if isinstance(v, bytes) else v.encode()).hexdigest()
                    for k, v in sorted(outputs.items())},
        "version": version,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else fmt(x)
    return x


@contextmanager
def staged_output(out_dir):
    """Collect files in a scratch directory and move them into ``out_dir`` on success.

    Yields a dict to fill with ``name -> str | bytes``. Nothing is written
    to ``out_dir`` if the body raises.
    """
    files: dict = {}
    yield files
    os.makedirs(out_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".staging-", dir=out_dir)
    try:
        for name, content in files.items():
            mode = "wb" if isinstance(content, bytes) else "w"
            kw = {} if isinstance(content, bytes) else {"newline": "", "encoding": "utf-8"}
            with open(os.path.join(tmp, name), mode, **kw) as fh:
                fh.write(content)
        for name in files:
            os.replace(os.path.join(tmp, name), os.path.join(out_dir, name))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def rank_table_text(table) -> str:
    """``min``/``mean``/``max`` rank rows, one column per estimator."""
    summ = table.summary()
    return csv_text(["stat", *table.names],
                    [[stat, *[summ[nm][stat] for nm in table.names]]
                     for stat in ("min", "mean", "max")])
