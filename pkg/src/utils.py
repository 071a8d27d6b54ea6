import os
import hashlib
import tempfile

from dataclasses import dataclass

import numpy as np
import pandas as pd
from openpyxl import load_workbook

from . import __version__
from .errors import InputError


class dotdict(dict):
    """dot.notation access to dictionary attributes"""
    __getattr__ = dict.get
    __setattr__ = dict.__setitem__
    __delattr__ = dict.__delitem__
    def copy(self):
        return dotdict(super().copy())


def _bool(value):
    key = str(value).strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value}")


def _int_list(value):
    return [int(v) for v in str(value).replace(";", ",").split(",") if v.strip()]


def _float_list(value):
    return [float(v) for v in str(value).replace(";", ",").split(",") if v.strip()]


def _str_list(value):
    return [v.strip() for v in str(value).replace(";", ",").split(",") if v.strip()]


CONFIG_KEYS = {
    "q": int,
    "q_min": int,
    "q_max": int,
    "kernel": _str_list,
    "seed": int,
    "restarts": int,
    "folds": int,
    "censor_frac": float,
    "metric": str,
    "no_survival": _bool,
    "rho_lb": float,
    "nu_lb": float,
    "max_outer": int,
    "tol_outer": float,
    "gtol": float,
    "kappa0": float,
    "alpha0": float,
    "kappa1": float,
    "alpha1": float,
    "sigma0": float,
    "sigma1": float,
    "noise_var": _float_list,
    "sigma": _float_list,
    "lengthscale": _float_list,
    "d": _int_list,
    "n": int,
    "b": _float_list,
    "rho": float,
    "nu": float,
    "latent": str,
    "preset": str,
    "workers": int,
    "optimize_hyper": _bool,
    "standardize": _bool,
    "starts": int,
}


def read_config(filename):
    """Flat key=value file. Blank lines and lines starting with # are skipped."""
    config = dotdict()
    with open(filename, encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"{filename}:{line_no}: expected key=value, got '{line}'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_").lower()
            if key not in CONFIG_KEYS:
                raise InputError(f"{filename}:{line_no}: unknown config key '{key}'")
            try:
                config[key] = CONFIG_KEYS[key](value)
            except ValueError as e:
                raise InputError(f"{filename}:{line_no}: invalid value for '{key}': {e}") from None
    return config


def read_excel_data(filename):
    workbook = load_workbook(filename, data_only=True, read_only=True)
    sheet = workbook.active
    data = [row for row in sheet.iter_rows(values_only=True)]
    workbook.close()

    if len(data) == 0:
        raise InputError(f"No data found in the excel file {filename}")
    if len(data) == 1:
        raise InputError(f"Only header found in the excel file {filename}. No data found")

    header = [str(h).strip().lower() if h is not None else "" for h in data[0]]
    return header, data[1:]


def read_table(filename):
    ext = os.path.splitext(filename)[1].lower()
    if ext in (".xlsx", ".xlsm"):
        header, rows = read_excel_data(filename)
        return pd.DataFrame.from_records(rows, columns=header)
    try:
        frame = pd.read_csv(filename, comment="#")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"Could not parse {filename}: {e}") from None
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    return frame


@dataclass
class Dataset:
    """Covariate sources, grouped by column prefix (s1_*, s2_*, ...), with optional survival columns."""
    ids: list
    source_names: list
    columns: list
    Y_set: list
    times: np.ndarray = None
    events: np.ndarray = None

    @property
    def n(self):
        return len(self.ids)

    @property
    def has_survival(self):
        return self.times is not None

    def rows(self):
        """Per-individual list of per-source vectors; None where a whole source is missing."""
        out = []
        for i in range(self.n):
            row = []
            for Y in self.Y_set:
                y = Y[i]
                row.append(None if np.all(np.isnan(y)) else y)
            out.append(row)
        return out

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(
            ids=[self.ids[i] for i in index],
            source_names=self.source_names,
            columns=self.columns,
            Y_set=[Y[index] for Y in self.Y_set],
            times=None if self.times is None else self.times[index],
            events=None if self.events is None else self.events[index],
        )


def dataset_from_frame(frame, require_survival=True, allow_missing_sources=False, filename="dataset"):
    columns = list(frame.columns)
    if not columns or columns[0] != "id":
        raise InputError(f"{filename}: the first column must be 'id'")
    covariates = [c for c in columns[1:] if c not in ("time", "event")]
    if not covariates:
        raise InputError(f"{filename}: no covariate columns found")

    source_names, grouped = [], {}
    for c in covariates:
        if "_" not in c:
            raise InputError(f"{filename}: covariate column '{c}' has no source prefix (expected e.g. s1_{c})")
        prefix = c.split("_", 1)[0]
        if prefix not in grouped:
            source_names.append(prefix)
            grouped[prefix] = []
        grouped[prefix].append(c)

    Y_set = []
    for name in source_names:
        try:
            Y = frame[grouped[name]].apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
        except (ValueError, TypeError) as e:
            raise InputError(f"{filename}: non-numeric value in source '{name}': {e}") from None
        missing = np.isnan(Y)
        partial = missing.any(axis=1) & ~missing.all(axis=1)
        if partial.any():
            row = int(np.argmax(partial)) + 2
            raise InputError(f"{filename}: row {row} has missing cells in source '{name}'; only whole sources may be missing")
        if missing.any() and not allow_missing_sources:
            row = int(np.argmax(missing.any(axis=1))) + 2
            raise InputError(f"{filename}: row {row} has missing covariates in source '{name}'")
        Y_set.append(Y)

    times = events = None
    if "time" in columns and "event" in columns:
        times = pd.to_numeric(frame["time"], errors="coerce").to_numpy(dtype=float)
        events = pd.to_numeric(frame["event"], errors="coerce").to_numpy(dtype=float)
        if np.any(~np.isfinite(times)) or np.any(times <= 0):
            row = int(np.argmax(~np.isfinite(times) | (times <= 0))) + 2
            raise InputError(f"{filename}: row {row} has a missing or non-positive time")
        if not np.all(np.isin(events, (0, 1))):
            row = int(np.argmax(~np.isin(events, (0, 1)))) + 2
            raise InputError(f"{filename}: row {row} has an event indicator other than 0 or 1")
        events = events.astype(int)
    elif require_survival:
        raise InputError(f"{filename}: 'time' and 'event' columns are required")

    return Dataset(
        ids=[str(i) for i in frame["id"]],
        source_names=source_names,
        columns=[grouped[name] for name in source_names],
        Y_set=Y_set,
        times=times,
        events=events,
    )


def read_dataset(filename, require_survival=True, allow_missing_sources=False):
    if not os.path.exists(filename):
        raise InputError(f"File not found: {filename}")
    frame = read_table(filename)
    return dataset_from_frame(frame, require_survival, allow_missing_sources, filename)


def dataset_frame(ids, Y_set, source_names=None, times=None, events=None):
    source_names = source_names or [f"s{k + 1}" for k in range(len(Y_set))]
    data = {"id": list(ids)}
    for name, Y in zip(source_names, Y_set):
        for j in range(Y.shape[1]):
            data[f"{name}_{j + 1}"] = Y[:, j]
    if times is not None:
        data["time"] = times
        data["event"] = events
    return pd.DataFrame(data)


@dataclass
class Standardizer:
    """Per-source column centring and scaling fitted on training data."""
    means: list
    scales: list

    @classmethod
    def fit(cls, Y_set):
        means = [np.mean(Y, axis=0) for Y in Y_set]
        scales = [np.where(np.std(Y, axis=0) > 0, np.std(Y, axis=0), 1.0) for Y in Y_set]
        return cls(means, scales)

    @classmethod
    def identity(cls, Y_set):
        return cls([np.zeros(Y.shape[1]) for Y in Y_set], [np.ones(Y.shape[1]) for Y in Y_set])

    def transform(self, Y_set):
        return [(Y - m) / s for Y, m, s in zip(Y_set, self.means, self.scales)]

    def transform_row(self, row):
        return [None if y is None else (np.asarray(y) - m) / s for y, m, s in zip(row, self.means, self.scales)]


def fingerprint(columns, Y_set, times=None, events=None):
    h = hashlib.sha256()
    for cols in columns:
        h.update(",".join(cols).encode("utf-8"))
        h.update(b"|")
    for Y in Y_set:
        h.update(np.ascontiguousarray(Y, dtype="<f8").tobytes())
    if times is not None:
        h.update(np.ascontiguousarray(times, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(events, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def atomic_write_text(filename, text):
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(filename))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, filename)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_table(frame: pd.DataFrame, filename, seed=None, extra=None):
    header = [f"# gplvm-wphm {__version__}"]
    if seed is not None:
        header.append(f"# seed={seed}")
    for key, value in (extra or {}).items():
        header.append(f"# {key}={value}")
    body = frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    atomic_write_text(filename, "\n".join(header) + "\n" + body)
