"""Series ingestion, weekly block maxima, member subsampling and synthetic data.

Series CSV schema (UTF-8, comma separated, header required)::

    timestamp,member,<site 1>,...,<site d>

``timestamp`` is ISO-8601 (``YYYY-MM-DD`` or ``YYYY-MM-DDTHH:MM[:SS]``),
``member`` is a free-form ensemble member id and each site column holds a
decimal number or the token ``NA``. Within a member, timestamps must be
strictly increasing; members may be interleaved.
"""

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional

import numpy as np
from scipy import stats

from .errors import (
    InsufficientDataError,
    NonPositiveDataError,
    ParameterDomainError,
    ParseError,
    ShapeError,
)
from .gpd import gpd_quantile

log = logging.getLogger(__name__)

NA_TOKEN = "NA"
BLOCK = timedelta(days=7)
MIN_COVERAGE = 0.8
DEFAULT_WINDOWS = ((1980, 2009), (2010, 2039), (2040, 2069), (2070, 2099))


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def format_float(v):
    return NA_TOKEN if np.isnan(v) else repr(float(v))


@dataclass
class ObservationMatrix:
    """Block-maximum observations ``values`` (n, d) with labels.

    ``members`` holds the ensemble member id of every row.
    """

    values: np.ndarray
    site_names: tuple = ()
    window: str = ""
    members: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ShapeError("values must be a 2-d array")
        n, d = values.shape
        if n == 0 or d == 0:
            raise InsufficientDataError("observation matrix is empty")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise NonPositiveDataError("observations must be finite and strictly positive")
        names = tuple(self.site_names) if self.site_names else tuple(f"site{i + 1}" for i in range(d))
        if len(names) != d:
            raise ShapeError(f"{len(names)} site names for {d} columns")
        members = np.full(n, "0", dtype=object) if self.members is None else np.asarray(self.members, dtype=object)
        if members.shape != (n,):
            raise ShapeError("one member id per row is required")
        self.values, self.site_names, self.members = values, names, members

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def member_order(self):
        """Distinct member ids in order of first appearance."""
        return list(dict.fromkeys(self.members.tolist()))

    def subset(self, mask):
        return ObservationMatrix(self.values[mask], self.site_names, self.window, self.members[mask])


@dataclass(frozen=True)
class GapRecord:
    line: int
    member: str
    timestamp: datetime
    site: str


@dataclass
class SeriesTable:
    """Raw multi-site, multi-member series; missing values are NaN."""

    timestamps: np.ndarray
    members: np.ndarray
    values: np.ndarray
    site_names: tuple
    gaps: list = field(default_factory=list)

    def __len__(self):
        return self.values.shape[0]

    def member_order(self):
        return list(dict.fromkeys(self.members.tolist()))


def _parse_timestamp(text, line):
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", line) from None


def read_series_csv(path):
    """Parse a series CSV into a :class:`SeriesTable`."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        if len(header) < 3 or [h.strip() for h in header[:2]] != ["timestamp", "member"]:
            raise ParseError("header must be 'timestamp,member,<site>,...'", 1)
        sites = tuple(h.strip() for h in header[2:])
        if any(not s for s in sites) or len(set(sites)) != len(sites):
            raise ParseError("site names must be non-empty and distinct", 1)
        times, members, rows, gaps = [], [], [], []
        last = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            ts = _parse_timestamp(row[0], line)
            member = row[1].strip()
            if not member:
                raise ParseError("empty member id", line)
            if member in last and ts <= last[member]:
                raise ParseError(f"timestamps for member {member!r} are not increasing", line)
            last[member] = ts
            vals = []
            for site, cell in zip(sites, row[2:]):
                cell = cell.strip()
                if cell == NA_TOKEN or cell == "":
                    vals.append(np.nan)
                    gaps.append(GapRecord(line, member, ts, site))
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"bad number {cell!r} in column {site!r}", line) from None
                if not np.isfinite(v):
                    raise ParseError(f"non-finite value in column {site!r}", line)
                vals.append(v)
            times.append(ts)
            members.append(member)
            rows.append(vals)
    values = np.array(rows, dtype=float).reshape(-1, len(sites))
    return SeriesTable(np.array(times, dtype=object), np.array(members, dtype=object), values, sites, gaps)


def series_csv_text(series):
    rows = (
        [ts.isoformat(), m, *(format_float(v) for v in vals)]
        for ts, m, vals in zip(series.timestamps, series.members, series.values)
    )
    return csv_text(["timestamp", "member", *series.site_names], rows)


def write_series_csv(path, series):
    atomic_write_text(path, series_csv_text(series))


def window_bounds(window):
    """``(start, end)`` datetimes (end exclusive) and a label for a window.

    ``window`` is an inclusive year pair ``(1980, 2009)`` or a pair of
    datetimes.
    """
    a, b = window
    if isinstance(a, datetime):
        return a, b, f"{a.isoformat()}/{b.isoformat()}"
    a, b = int(a), int(b)
    if b < a:
        raise ParameterDomainError("window end precedes its start")
    return datetime(a, 1, 1), datetime(b + 1, 1, 1), f"{a}-{b}"


def parse_window_label(label):
    a, b = str(label).split("-")
    return int(a), int(b)


def weekly_maxima(series, window, min_coverage=MIN_COVERAGE):
    """Per-member 7-day block maxima over ``window``.

    Blocks are anchored at the window start and trailing partial blocks are
    dropped. A block is kept when every site has at least ``min_coverage``
    of its expected samples (expected count from the member's median time
    step); otherwise it is dropped and logged.
    """
    start, end, label = window_bounds(window)
    n_blocks = (end - start) // BLOCK
    if n_blocks < 1:
        raise InsufficientDataError(f"window {label} is shorter than one block")
    out_vals, out_members = [], []
    for member in series.member_order():
        rows = np.flatnonzero(series.members == member)
        ts = series.timestamps[rows]
        inside = np.array([start <= t < start + n_blocks * BLOCK for t in ts], dtype=bool)
        if not inside.any():
            continue
        rows, ts = rows[inside], ts[inside]
        if len(ts) > 1:
            steps = np.diff(np.array(ts, dtype="datetime64[s]")).astype(np.int64)
            expected = BLOCK.total_seconds() / float(np.median(steps))
        else:
            expected = 1.0
        block = np.array([(t - start) // BLOCK for t in ts], dtype=int)
        vals = series.values[rows]
        for k in range(n_blocks):
            sel = vals[block == k]
            present = np.sum(~np.isnan(sel), axis=0) if sel.size else np.zeros(series.values.shape[1])
            if np.any(present < min_coverage * expected - 1e-9):
                log.info("member %s block %d dropped: coverage below %.0f%%", member, k, 100 * min_coverage)
                continue
            out_vals.append(np.nanmax(sel, axis=0))
            out_members.append(member)
    if not out_vals:
        raise InsufficientDataError(f"no complete blocks in window {label}")
    return ObservationMatrix(np.array(out_vals), series.site_names, label, np.array(out_members, dtype=object))


def subsample_members(data, k):
    """Keep the rows of the first ``k`` members in order of appearance."""
    order = data.member_order()
    if not 1 <= k <= len(order):
        raise ParameterDomainError(f"k must lie in [1, {len(order)}], got {k}")
    keep = np.isin(data.members, np.array(order[:k], dtype=object))
    return data.subset(keep)


@dataclass(frozen=True)
class LognormalMargin:
    """Lognormal margin with log-mean ``mu`` and log-sd ``sigma``."""

    mu: float = 0.0
    sigma: float = 1.0

    def ppf(self, q):
        return np.exp(self.mu + self.sigma * stats.norm.ppf(q))

    def cdf(self, x):
        return stats.norm.cdf((np.log(x) - self.mu) / self.sigma)


@dataclass(frozen=True)
class GpdTailMargin:
    """Lognormal body spliced to a GPD above its ``p0`` quantile."""

    mu: float = 0.0
    sigma: float = 1.0
    p0: float = 0.9
    tail_scale: float = 1.0
    tail_shape: float = 0.1

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        body = LognormalMargin(self.mu, self.sigma)
        u0 = float(body.ppf(self.p0))
        hi = q > self.p0
        out = body.ppf(np.where(hi, self.p0, q))
        tail_q = (np.where(hi, q, self.p0) - self.p0) / (1.0 - self.p0)
        return np.where(hi, u0 + gpd_quantile(tail_q, self.tail_scale, self.tail_shape), out)


def margin_from_dict(params):
    params = dict(params)
    kind = params.pop("kind", "lognormal")
    if kind == "lognormal":
        return LognormalMargin(**params)
    if kind == "gpd_tail":
        return GpdTailMargin(**params)
    raise ParameterDomainError(f"unknown margin kind {kind!r}")


def _correlation_factor(corr):
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ParameterDomainError("correlation matrix must be square")
    if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
        raise ParameterDomainError("correlation matrix must be symmetric with unit diagonal")
    lam, vec = np.linalg.eigh(corr)
    if lam.min() < -1e-10:
        raise ParameterDomainError("correlation matrix is not positive semi-definite")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def gaussian_copula_uniforms(n, corr, rng):
    factor = _correlation_factor(corr)
    z = rng.standard_normal((int(n), factor.shape[0])) @ factor.T
    return stats.norm.cdf(z)


def synth_gaussian_copula(n, d, corr=None, margins=None, seed=0):
    """Gaussian-copula sample with the given margins.

    ``margins`` is one margin (applied to every column) or a list of ``d``;
    the default is standard lognormal. Positive semi-definite correlations
    are accepted so that comonotone columns (rho = 1) can be generated.
    """
    corr = np.eye(d) if corr is None else np.asarray(corr, dtype=float)
    if corr.shape != (d, d):
        raise ShapeError(f"correlation matrix must be {d}x{d}")
    if margins is None:
        margins = LognormalMargin()
    if not isinstance(margins, (list, tuple)):
        margins = [margins] * d
    if len(margins) != d:
        raise ShapeError(f"{len(margins)} margins for {d} columns")
    u = gaussian_copula_uniforms(n, corr, np.random.default_rng(seed))
    values = np.column_stack([m.ppf(u[:, j]) for j, m in enumerate(margins)])
    return ObservationMatrix(values, window="synthetic", members=np.full(int(n), "synth", dtype=object))


def synth_series(n_members, start_year, end_year, d=2, corr=None, margins=None, seed=0):
    """Daily multi-member series with i.i.d. Gaussian-copula days."""
    start, end, _ = window_bounds((start_year, end_year))
    days = (end - start).days
    rng = np.random.default_rng(seed)
    corr = np.eye(d) if corr is None else corr
    if margins is None:
        margins = LognormalMargin()
    if not isinstance(margins, (list, tuple)):
        margins = [margins] * d
    times, members, blocks = [], [], []
    stamps = [start + timedelta(days=i) for i in range(days)]
    for m in range(n_members):
        u = gaussian_copula_uniforms(days, corr, rng)
        blocks.append(np.column_stack([mg.ppf(u[:, j]) for j, mg in enumerate(margins)]))
        times.extend(stamps)
        members.extend([f"m{m + 1:03d}"] * days)
    return SeriesTable(
        np.array(times, dtype=object),
        np.array(members, dtype=object),
        np.vstack(blocks),
        tuple(f"site{j + 1}" for j in range(d)),
    )
