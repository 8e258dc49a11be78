"""Data model, discretization maps, cutoffs and default hyperprior elicitation.

Coordinates of the latent response vector ``y*`` are ordered as
``(z, [w], x_1, ..., x_p)``: the latent ordinal response, the latent log-age
when ages are recorded, then the continuous covariates (length first).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .prior import choose_truncation
from .stats import Interval

log = logging.getLogger(__name__)

MATURITY_COLLAPSE = {1: 1, 2: 2, 3: 2, 4: 2, 5: 3, 6: 3}


class InvalidCategory(ValueError):
    pass


class UnsupportedBinaryCase(ValueError):
    """C = 2 needs covariance restrictions this library does not implement."""


class DegenerateData(ValueError):
    pass


class DataError(ValueError):
    """Malformed input data; ``line`` is the 1-based CSV line when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def collapse_maturity(raw: int) -> int:
    """Map the six recorded maturity stages onto three ordinal levels."""
    try:
        return MATURITY_COLLAPSE[int(raw)]
    except (KeyError, ValueError, TypeError):
        raise InvalidCategory(f"maturity stage {raw!r} not in 1..6") from None


def age_interval(u: int) -> Interval:
    """Latent log-age interval for recorded age ``u``: (log u, log(u+1)], (-inf, 0] at 0."""
    if u < 0:
        raise ValueError("age must be nonnegative")
    if u == 0:
        return Interval(-math.inf, 0.0)
    return Interval(math.log(u), math.log(u + 1))


def age_bounds(u) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lower = np.where(u > 0, np.log(u), -np.inf)
    return lower, np.log(u + 1.0)


def discretize_age(w) -> np.ndarray:
    """Recorded age from latent log-age: u = j iff log j < w <= log(j+1)."""
    w = np.asarray(w, dtype=np.float64)
    u = np.ceil(np.exp(w)) - 1.0
    u = np.maximum(u, 0.0).astype(np.int64)
    # repair rounding at interval ends
    lower, upper = age_bounds(u)
    u = np.where(w > upper, u + 1, u)
    u = np.where((w <= lower) & (u > 0), u - 1, u)
    return u


@dataclass(frozen=True)
class Cutoffs:
    """Full cutoff vector ``-inf = g_0 < g_1 < ... < g_{C-1} < g_C = inf``."""

    gamma: tuple

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.size < 3 or g[0] != -math.inf or g[-1] != math.inf:
            raise ValueError("cutoffs must start at -inf and end at +inf")
        if not np.all(np.isfinite(g[1:-1])) or not np.all(np.diff(g) > 0):
            raise ValueError("cutoffs must be strictly increasing with finite interior")
        object.__setattr__(self, "gamma", tuple(float(v) for v in g))

    @property
    def C(self) -> int:
        return len(self.gamma) - 1

    @property
    def interior(self) -> np.ndarray:
        return np.asarray(self.gamma[1:-1])

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.gamma)

    def interval(self, j: int) -> Interval:
        if not 1 <= j <= self.C:
            raise InvalidCategory(f"category {j} not in 1..{self.C}")
        return Interval(self.gamma[j - 1], self.gamma[j])

    def bounds(self, y) -> tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=np.int64)
        g = self.array
        return g[y - 1], g[y]

    def discretize(self, z) -> np.ndarray:
        """y = j iff g_{j-1} < z <= g_j."""
        return np.searchsorted(self.interior, np.asarray(z), side="left") + 1


def default_cutoffs(C: int) -> Cutoffs:
    """Unit-spaced cutoffs centred at zero: g_j = j - C/2."""
    if C == 2:
        raise UnsupportedBinaryCase("binary responses require covariance restrictions")
    if C < 3:
        raise ValueError("need at least three categories")
    interior = [j - C / 2 for j in range(1, C)]
    return Cutoffs((-math.inf, *interior, math.inf))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Which coordinates of ``y*`` exist: z always, w if ages are recorded."""

    has_age: bool = True
    n_continuous: int = 1

    @property
    def d(self) -> int:
        return 1 + int(self.has_age) + self.n_continuous

    @property
    def z(self) -> int:
        return 0

    @property
    def w(self) -> int | None:
        return 1 if self.has_age else None

    @property
    def x(self) -> int:
        """Index of the first continuous coordinate (length)."""
        if self.n_continuous < 1:
            raise ValueError("layout has no continuous coordinate")
        return 1 + int(self.has_age)

    @property
    def latent(self) -> list[int]:
        return [0, 1] if self.has_age else [0]


@dataclass(frozen=True)
class Observation:
    t: int
    y: int
    u: int
    x: float


@dataclass(frozen=True)
class Dataset:
    """Complete-case records grouped by year index ``t`` (0-based internally).

    ``labels`` are the calendar years for t = 1..T; years with no records
    form ``missing_years`` (1-based, as reported to users).
    """

    T: int
    C: int
    year: np.ndarray
    y: np.ndarray
    x: np.ndarray
    u: np.ndarray | None = None
    labels: tuple = ()
    dropped: int = 0

    def __post_init__(self):
        year = np.asarray(self.year, dtype=np.int64)
        order = np.argsort(year, kind="stable")
        object.__setattr__(self, "year", year[order])
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64)[order])
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", x[order])
        if self.u is not None:
            object.__setattr__(self, "u", np.asarray(self.u, dtype=np.int64)[order])
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(1, self.T + 1)))
        n = self.year.size
        if self.y.size != n or self.x.shape[0] != n or (self.u is not None and self.u.size != n):
            raise DataError("field lengths differ")
        if n and (self.year.min() < 0 or self.year.max() >= self.T):
            raise DataError("year index out of range")
        if n and (self.y.min() < 1 or self.y.max() > self.C):
            raise DataError(f"ordinal response outside 1..{self.C}")
        if self.u is not None and n and self.u.min() < 0:
            raise DataError("negative age")

    @property
    def n(self) -> int:
        return int(self.year.size)

    @property
    def layout(self) -> Layout:
        return Layout(has_age=self.u is not None, n_continuous=self.x.shape[1])

    @property
    def n_t(self) -> np.ndarray:
        return np.bincount(self.year, minlength=self.T)

    @property
    def missing_years(self) -> set[int]:
        return {t + 1 for t in range(self.T) if self.n_t[t] == 0}

    @property
    def observed_years(self) -> list[int]:
        return [t + 1 for t in range(self.T) if self.n_t[t] > 0]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.T, self.C, self.year[mask], self.y[mask], self.x[mask],
                       None if self.u is None else self.u[mask], self.labels)

    def year_slice(self, t: int) -> "Dataset":
        """Records of 1-based year ``t`` (as a dataset over the same T)."""
        return self.subset(self.year == t - 1)

    def observations(self) -> list[Observation]:
        u = self.u if self.u is not None else np.zeros(self.n, dtype=np.int64)
        return [Observation(int(t) + 1, int(y), int(a), float(x))
                for t, y, a, x in zip(self.year, self.y, u, self.x[:, 0])]

    @classmethod
    def empty(cls, T: int, C: int = 3, layout: Layout = Layout()) -> "Dataset":
        return cls(T, C, np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros((0, layout.n_continuous)),
                   np.zeros(0, np.int64) if layout.has_age else None)

    @classmethod
    def from_observations(cls, obs, T: int, C: int, labels=()) -> "Dataset":
        obs = list(obs)
        return cls(T, C, [o.t - 1 for o in obs], [o.y for o in obs],
                   np.array([[o.x] for o in obs]).reshape(len(obs), 1),
                   [o.u for o in obs], labels)


def read_csv(path, maturity: str = "raw", C: int | None = None) -> Dataset:
    """Ingest ``year,maturity,age,length`` records.

    ``maturity="raw"`` collapses stages 1..6 onto 1..3; ``"collapsed"`` takes
    values as given in 1..C.  Records with any empty field are dropped and
    counted; calendar years are mapped onto 1..T with gaps kept as missing.
    """
    if maturity not in ("raw", "collapsed"):
        raise ValueError("maturity must be 'raw' or 'collapsed'")
    rows, dropped = [], 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["year", "maturity", "age", "length"]:
            raise DataError("header must be 'year,maturity,age,length'", line=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 4:
                raise DataError(f"expected 4 fields, got {len(rec)}", line=lineno)
            fields = [f.strip() for f in rec]
            if not fields[0]:
                raise DataError("missing year", line=lineno)
            if any(not f for f in fields[1:]):
                dropped += 1
                continue
            try:
                year = int(fields[0])
                mat = int(fields[1])
                age = int(fields[2])
                length = float(fields[3])
            except ValueError:
                raise DataError(f"non-numeric field in {rec!r}", line=lineno) from None
            if age < 0 or not math.isfinite(length):
                raise DataError("invalid age or length", line=lineno)
            try:
                y = collapse_maturity(mat) if maturity == "raw" else mat
            except InvalidCategory as exc:
                raise DataError(str(exc), line=lineno) from None
            rows.append((year, y, age, length))
    if not rows:
        raise DataError("no complete records")
    n_cat = 3 if maturity == "raw" else (C or max(r[1] for r in rows))
    if any(not 1 <= r[1] <= n_cat for r in rows):
        raise DataError(f"maturity outside 1..{n_cat}")
    first = min(r[0] for r in rows)
    last = max(r[0] for r in rows)
    T = last - first + 1
    if dropped:
        log.info("dropped %d incomplete records", dropped)
    return Dataset(
        T=T,
        C=n_cat,
        year=[r[0] - first for r in rows],
        y=[r[1] for r in rows],
        x=np.array([[r[3]] for r in rows]),
        u=[r[2] for r in rows],
        labels=tuple(range(first, last + 1)),
        dropped=dropped,
    )


def write_csv(dataset: Dataset, path) -> None:
    if dataset.u is None or dataset.x.shape[1] != 1:
        raise ValueError("CSV export needs exactly one age and one length column")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["year", "maturity", "age", "length"])
        for t, y, u, x in zip(dataset.year, dataset.y, dataset.u, dataset.x[:, 0]):
            out.writerow([dataset.labels[t], int(y), int(u), repr(float(x))])


# ---------------------------------------------------------------------------
# hyperpriors
# ---------------------------------------------------------------------------


@dataclass
class HyperConfig:
    """Fixed hyperparameters of the hierarchical model."""

    a_m: np.ndarray
    B_m: np.ndarray
    a_V: float
    B_V: np.ndarray
    a_D: float
    B_D: np.ndarray
    nu: float
    m0: np.ndarray
    V0: np.ndarray
    N: int
    cutoffs: Cutoffs
    a_alpha: float = 3.0
    b_alpha: float = 4.0
    phi_support: str = "unit"
    theta_support: str = "unit"
    layout: Layout = field(default_factory=Layout)

    def __post_init__(self):
        for name in ("a_m", "m0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("B_m", "B_V", "B_D", "V0"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        self.N = int(self.N)
        if self.N < 1:
            raise ValueError("truncation level must be >= 1")
        for name in ("phi_support", "theta_support"):
            if getattr(self, name) not in ("unit", "symmetric"):
                raise ValueError(f"{name} must be 'unit' or 'symmetric'")
        d = self.d
        if self.layout.d != d:
            raise ValueError("layout dimension does not match hyperparameters")
        for name in ("B_m", "B_V", "B_D", "V0"):
            m = getattr(self, name)
            if m.shape != (d, d) or not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be a {d}x{d} positive-definite matrix")
        if self.m0.shape != (d,):
            raise ValueError("m0 has wrong dimension")
        if min(self.nu, self.a_V, self.a_D) <= d - 1:
            raise ValueError("Wishart degrees of freedom must exceed d - 1")
        if self.a_alpha <= 0 or self.b_alpha <= 0:
            raise ValueError("alpha prior parameters must be positive")

    @property
    def d(self) -> int:
        return self.a_m.shape[0]

    @property
    def C(self) -> int:
        return self.cutoffs.C

    def limiting_covariance(self) -> np.ndarray:
        """Cov(Y*_t) as alpha -> 0 and Theta -> 0."""
        d = self.d
        return (self.B_m + self.B_V / (self.a_V - d - 1)
                + self.a_D * self.B_D / (self.nu - d - 1))

    def to_dict(self) -> dict:
        return {
            "a_m": self.a_m.tolist(),
            "B_m": self.B_m.tolist(),
            "a_V": self.a_V,
            "B_V": self.B_V.tolist(),
            "a_D": self.a_D,
            "B_D": self.B_D.tolist(),
            "nu": self.nu,
            "m0": self.m0.tolist(),
            "V0": self.V0.tolist(),
            "N": self.N,
            "cutoffs": list(self.cutoffs.gamma[1:-1]),
            "a_alpha": self.a_alpha,
            "b_alpha": self.b_alpha,
            "phi_support": self.phi_support,
            "theta_support": self.theta_support,
            "has_age": self.layout.has_age,
            "n_continuous": self.layout.n_continuous,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        d = dict(d)
        cut = Cutoffs((-math.inf, *d.pop("cutoffs"), math.inf))
        layout = Layout(d.pop("has_age"), d.pop("n_continuous"))
        return cls(cutoffs=cut, layout=layout, **d)


def _center_range(values) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    return 0.5 * (lo + hi), hi - lo


def _log_age(u) -> np.ndarray:
    return np.log(np.asarray(u, dtype=np.float64) + 0.5)


def _shrink_to_pd(base: np.ndarray, sub: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """base - c*sub with the largest c in (0, 1] keeping eigenvalues >= floor."""
    def ok(c):
        return np.linalg.eigvalsh(base - c * sub).min() >= floor

    if ok(1.0):
        return base - sub
    if not ok(0.0):
        raise DegenerateData("first-year spread too small for a proper initial covariance")
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    log.warning("V0 clamped: subtracted term shrunk by factor %.4f", lo)
    return base - lo * sub


def _centers_and_spreads(dataset: Dataset, cutoffs: Cutoffs, mask, age_center: str):
    layout = dataset.layout
    centers = [0.0]
    sds = [(cutoffs.interior[-1] - cutoffs.interior[0]) / 4.0 if cutoffs.C > 2 else 0.25]
    if layout.has_age:
        u = dataset.u[mask]
        cw, rw = _center_range(_log_age(u))
        cu, _ = _center_range(u)
        if rw <= 0:
            raise DegenerateData("recorded ages have zero range")
        centers.append(cw if age_center == "log" else cu)
        sds.append(rw / 4.0)
    for j in range(layout.n_continuous):
        cx, rx = _center_range(dataset.x[mask, j])
        if rx <= 0:
            raise DegenerateData(f"continuous column {j} has zero range")
        centers.append(cx)
        sds.append(rx / 4.0)
    return np.array(centers), np.diag(np.square(sds))


def elicit_hyperconfig(dataset: Dataset, cutoffs: Cutoffs | None = None, N: int | None = None,
                       tolerance: float = 1e-2, a_alpha: float = 3.0, b_alpha: float = 4.0,
                       dof: float | None = None, age_center: str = "log",
                       phi_support: str = "unit", theta_support: str = "unit",
                       rng: np.random.Generator | None = None) -> HyperConfig:
    """Default hyperpriors from approximate data centres and ranges.

    In the single-component limit Cov(Y*) = B_m + B_V/(a_V-d-1) + a_D B_D/(nu-d-1);
    each term receives one third of diag{(r/4)^2}.  ``m0``/``V0`` repeat the
    construction on the first observed year with the Sigma share removed.
    """
    if age_center not in ("log", "raw"):
        raise ValueError("age_center must be 'log' or 'raw'")
    cutoffs = default_cutoffs(dataset.C) if cutoffs is None else cutoffs
    if dataset.n == 0:
        raise DegenerateData("cannot elicit hyperpriors from an empty dataset")
    layout = dataset.layout
    d = layout.d
    dof = d + 2.0 if dof is None else float(dof)
    a_m, full = _centers_and_spreads(dataset, cutoffs, slice(None), age_center)
    share = full / 3.0
    B_m = share
    B_V = share * (dof - d - 1)
    B_D = share * (dof - d - 1) / dof
    first = min(dataset.observed_years)
    m0, first_full = _centers_and_spreads(dataset, cutoffs, dataset.year == first - 1, age_center)
    V0 = _shrink_to_pd(first_full, dof * B_D / (dof - d - 1))
    if N is None:
        N = choose_truncation((a_alpha, b_alpha), tolerance, rng=rng)
    return HyperConfig(a_m=a_m, B_m=B_m, a_V=dof, B_V=B_V, a_D=dof, B_D=B_D, nu=dof,
                       m0=m0, V0=V0, N=N, cutoffs=cutoffs, a_alpha=a_alpha, b_alpha=b_alpha,
                       phi_support=phi_support, theta_support=theta_support, layout=layout)
