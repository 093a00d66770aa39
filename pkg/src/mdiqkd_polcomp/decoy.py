"""Decoy-state accounting: tallies, single-photon bounds, and the key rate.

Senders choose among three intensities mu > nu > omega (omega close to
vacuum).  For each measurement-basis half of a session, coincidence
tallies are kept per preparation basis and intensity pair; the gains
Q_ab and error rates E_ab constrain the photon-number-resolved yields
Y_nm through the Poissonian mixture

    Q_ab = sum_nm  e^{-a} a^n / n!  *  e^{-b} b^m / m!  *  Y_nm.

Two bounding backends are provided:

- analytic: closed-form two-decoy bounds.  With G_ab = e^{a+b} Q_ab and
  H_a = G_aa - G_a,omega - G_omega,a + G_omega,omega, every vacuum
  component cancels, leaving H_a = sum_{n,m>=1} (a^n - w^n)(a^m - w^m)
  / (n! m!) Y_nm with w = omega.  In the combination mu^3 H_nu -
  nu^3 H_mu the n+m = 3 terms cancel at w = 0 and every n+m >= 3 term
  is nonpositive for 0 <= w < nu < mu, so

      Y_11 >= (mu^3 H_nu - nu^3 H_mu) / (mu^3 (nu-w)^2 - nu^3 (mu-w)^2)

  is a valid lower bound.  The analogous sum W_nu built from error
  gains has only nonnegative terms, giving
  e_11 <= W_nu / ((nu-w)^2 Y_11^L).

- lp: linear program over yields {Y_nm} and error-weighted yields
  {Z_nm = e_nm Y_nm}, n, m <= n_cut, with each observed gain bracketing
  its truncated Poisson mixture within the statistical uncertainty plus
  the truncation tail.  Infeasible tallies raise a diagnostic naming
  the most violated constraint.

The secure-rate formula combines a matched-basis signal gain with the
conjugate-basis single-photon phase error:

    R = p11 * Y11_L * (1 - H2(e11_U)) - Q_signal * f * H2(E_signal).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.optimize import linprog

from .transmitter import INTENSITY_LABELS, IntensityTable

BASIS_LABELS = ("Z", "X")
CONJUGATE_BASIS = {"Z": "X", "X": "Z"}
TALLY_CSV_HEADER = ("basis", "intensity_A", "intensity_B",
                    "sent", "coincidences", "errors")
GAIN_CSV_HEADER = ("basis", "intensity_A", "intensity_B",
                   "gain", "gain_sigma", "qber", "qber_sigma")
DEFAULT_N_CUT = 7
DEFAULT_ERROR_CORRECTION_EFFICIENCY = 1.16


class DecoyError(ValueError):
    """Raised for invalid decoy-analysis inputs or inconsistent tallies."""


def h2(x: float) -> float:
    """Binary Shannon entropy in bits; 0 at both endpoints."""
    if not 0.0 <= x <= 1.0:
        raise DecoyError(f"entropy argument must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def p11(mu: float) -> float:
    """Probability that both senders' signal pulses hold exactly one photon."""
    if mu <= 0.0:
        raise DecoyError(f"mean photon number must be positive, got {mu}")
    return mu * mu * math.exp(-2.0 * mu)


def poisson_pmf(n: int, mean: float) -> float:
    """Poisson probability mass; exact for mean 0."""
    if mean == 0.0:
        return 1.0 if n == 0 else 0.0
    return math.exp(n * math.log(mean) - mean - math.lgamma(n + 1))


# ---------------------------------------------------------------------------
# Tallies
# ---------------------------------------------------------------------------

@dataclass
class TallyCell:
    """Counts for one (preparation basis, intensity pair) cell."""

    sent: int = 0
    coincidences: int = 0
    errors: int = 0

    def check(self) -> None:
        if not 0 <= self.errors <= self.coincidences <= self.sent:
            raise DecoyError(
                f"tally cell must satisfy errors <= coincidences <= sent, "
                f"got {self.errors}/{self.coincidences}/{self.sent}")

    def merged(self, other: "TallyCell") -> "TallyCell":
        return TallyCell(self.sent + other.sent,
                         self.coincidences + other.coincidences,
                         self.errors + other.errors)


def _tally_key(basis: str, intensity_a: str, intensity_b: str):
    if basis not in BASIS_LABELS:
        raise DecoyError(f"unknown basis {basis!r}")
    if intensity_a not in INTENSITY_LABELS or intensity_b not in INTENSITY_LABELS:
        raise DecoyError(f"unknown intensity pair ({intensity_a!r}, {intensity_b!r})")
    return (basis, intensity_a, intensity_b)


@dataclass
class TallySet:
    """Per preparation-basis, per intensity-pair counters for one half.

    Merging is associative, so partial tallies accumulated in parallel
    reduce to the same totals in any order.
    """

    cells: dict = field(default_factory=dict)

    def record(self, basis: str, intensity_a: str, intensity_b: str,
               sent: int = 0, coincidences: int = 0, errors: int = 0) -> None:
        key = _tally_key(basis, intensity_a, intensity_b)
        cell = self.cells.get(key, TallyCell())
        cell = cell.merged(TallyCell(sent, coincidences, errors))
        cell.check()
        self.cells[key] = cell

    def cell(self, basis: str, intensity_a: str, intensity_b: str) -> TallyCell:
        return self.cells.get(_tally_key(basis, intensity_a, intensity_b),
                              TallyCell())

    def merge(self, other: "TallySet") -> "TallySet":
        merged = TallySet(cells={k: TallyCell(v.sent, v.coincidences, v.errors)
                                 for k, v in self.cells.items()})
        for key, cell in other.cells.items():
            merged.cells[key] = merged.cells.get(key, TallyCell()).merged(cell)
        return merged

    def gain(self, basis: str, intensity_a: str, intensity_b: str) -> float:
        cell = self.cell(basis, intensity_a, intensity_b)
        return cell.coincidences / cell.sent if cell.sent else 0.0

    def qber(self, basis: str, intensity_a: str, intensity_b: str) -> float:
        cell = self.cell(basis, intensity_a, intensity_b)
        return cell.errors / cell.coincidences if cell.coincidences else 0.0

    def gain_grid(self, basis: str) -> "GainGrid":
        """Gains and error gains with binomial 1-sigma uncertainties."""
        n = len(INTENSITY_LABELS)
        q = np.zeros((n, n))
        qs = np.zeros((n, n))
        eq = np.zeros((n, n))
        eqs = np.zeros((n, n))
        for i, ia in enumerate(INTENSITY_LABELS):
            for j, ib in enumerate(INTENSITY_LABELS):
                cell = self.cell(basis, ia, ib)
                if cell.sent:
                    q[i, j] = cell.coincidences / cell.sent
                    eq[i, j] = cell.errors / cell.sent
                    qs[i, j] = math.sqrt(max(q[i, j] * (1 - q[i, j]), 1e-30)
                                         / cell.sent)
                    eqs[i, j] = math.sqrt(max(eq[i, j] * (1 - eq[i, j]), 1e-30)
                                          / cell.sent)
        return GainGrid(q=q, q_sigma=qs, eq=eq, eq_sigma=eqs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(TALLY_CSV_HEADER)
            for basis in BASIS_LABELS:
                for ia in INTENSITY_LABELS:
                    for ib in INTENSITY_LABELS:
                        cell = self.cell(basis, ia, ib)
                        writer.writerow([basis, ia, ib, cell.sent,
                                         cell.coincidences, cell.errors])

    @classmethod
    def read_csv(cls, path) -> "TallySet":
        tallies = cls()
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(header) != TALLY_CSV_HEADER:
                raise DecoyError(f"bad tally CSV header in {path}: {header}")
            for row in reader:
                if not row:
                    continue
                if len(row) != len(TALLY_CSV_HEADER):
                    raise DecoyError(f"bad tally CSV row in {path}: {row}")
                basis, ia, ib = row[0], row[1], row[2]
                try:
                    sent, coincidences, errors = (int(row[3]), int(row[4]),
                                                  int(row[5]))
                except ValueError as exc:
                    raise DecoyError(f"non-integer tally counts in {path}: "
                                     f"{row}") from exc
                tallies.record(basis, ia, ib, sent, coincidences, errors)
        return tallies


@dataclass
class GainGrid:
    """Observed gains/error gains per intensity pair, with uncertainties.

    Arrays are indexed [sender A intensity, sender B intensity] in the
    order (mu, nu, omega).  eq holds error gains E*Q, not error rates.
    """

    q: np.ndarray
    q_sigma: np.ndarray
    eq: np.ndarray
    eq_sigma: np.ndarray

    def __post_init__(self):
        n = len(INTENSITY_LABELS)
        for name in ("q", "q_sigma", "eq", "eq_sigma"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (n, n):
                raise DecoyError(f"{name} must be a {n}x{n} array")
            setattr(self, name, value)
        if np.any(self.q < 0) or np.any(self.eq < -1e-15):
            raise DecoyError("gains must be nonnegative")
        if np.any(self.eq > self.q + 1e-12):
            raise DecoyError("error gain cannot exceed gain")


def read_gain_csv(path) -> dict:
    """Load published-style gain tables: one GainGrid per preparation basis."""
    n = len(INTENSITY_LABELS)
    index = {label: i for i, label in enumerate(INTENSITY_LABELS)}
    data = {}
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != GAIN_CSV_HEADER:
            raise DecoyError(f"bad gain CSV header in {path}: {header}")
        for row in reader:
            if not row:
                continue
            basis = row[0]
            if basis not in BASIS_LABELS:
                raise DecoyError(f"unknown basis {basis!r} in {path}")
            grid = data.setdefault(basis, {name: np.zeros((n, n)) for name in
                                           ("q", "qs", "e", "es")})
            i, j = index[row[1]], index[row[2]]
            grid["q"][i, j] = float(row[3])
            grid["qs"][i, j] = float(row[4])
            grid["e"][i, j] = float(row[5])
            grid["es"][i, j] = float(row[6])
    grids = {}
    for basis, grid in data.items():
        eq = grid["e"] * grid["q"]
        # Propagate independent gain and error-rate uncertainties.
        eq_sigma = np.sqrt((grid["e"] * grid["qs"]) ** 2
                           + (grid["q"] * grid["es"]) ** 2)
        grids[basis] = GainGrid(q=grid["q"], q_sigma=grid["qs"],
                                eq=eq, eq_sigma=eq_sigma)
    return grids


def load_reference_half(meas_basis: str) -> tuple:
    """Bundled reference dataset for one measurement-basis half.

    Returns (grids, summary): per-preparation-basis GainGrids plus the
    reference summary values (single-photon yield bounds, phase-error
    bound, key rate, average misalignments) for the same half.
    """
    if meas_basis not in BASIS_LABELS:
        raise DecoyError(f"unknown measurement basis {meas_basis!r}")
    root = resources.files("mdiqkd_polcomp.data") / "tables"
    gains_name = f"published_gains_meas_{meas_basis.lower()}.csv"
    with resources.as_file(root / gains_name) as path:
        grids = read_gain_csv(path)
    summary = {}
    with (root / "published_summary.csv").open(newline="") as handle:
        reader = csv.reader(handle)
        next(reader)
        for row in reader:
            if row and row[0] == meas_basis:
                summary[row[1]] = float(row[2])
    return grids, summary


# ---------------------------------------------------------------------------
# Forward model (oracle for synthetic instances and validity tests)
# ---------------------------------------------------------------------------

def forward_gains(yields: np.ndarray, error_rates: np.ndarray,
                  table: IntensityTable) -> GainGrid:
    """Exact gains implied by photon-number yields Y_nm and error rates e_nm.

    The yield matrix is truncated at its own size; callers supply enough
    photon-number terms for the Poisson tail at mu to be negligible.
    """
    yields = np.asarray(yields, dtype=float)
    error_rates = np.asarray(error_rates, dtype=float)
    if yields.shape != error_rates.shape:
        raise DecoyError("yields and error_rates must have matching shapes")
    if np.any(yields < 0) or np.any(yields > 1):
        raise DecoyError("yields must lie in [0, 1]")
    if np.any(error_rates < 0) or np.any(error_rates > 1):
        raise DecoyError("error rates must lie in [0, 1]")
    n_max = yields.shape[0] - 1
    intensities = [table.mu, table.nu, table.omega]
    n = len(intensities)
    q = np.zeros((n, n))
    eq = np.zeros((n, n))
    pmf = {a: np.array([poisson_pmf(k, a) for k in range(n_max + 1)])
           for a in intensities}
    z = yields * error_rates
    for i, a in enumerate(intensities):
        for j, b in enumerate(intensities):
            weights = np.outer(pmf[a], pmf[b])
            q[i, j] = float(np.sum(weights * yields))
            eq[i, j] = float(np.sum(weights * z))
    zero = np.zeros((n, n))
    return GainGrid(q=q, q_sigma=zero, eq=eq, eq_sigma=zero.copy())


# ---------------------------------------------------------------------------
# Analytic two-decoy bounds
# ---------------------------------------------------------------------------

def _labels_index():
    return {label: i for i, label in enumerate(INTENSITY_LABELS)}


def _h_combination(grid: GainGrid, a: float, omega: float, a_label: str,
                   shift: float) -> float:
    """H_a = e^{2a} Q_aa - e^{a+w} (Q_aw + Q_wa) + e^{2w} Q_ww, shifted.

    A positive shift moves each gain by `shift` standard deviations in
    the direction that decreases H_a (conservative for a lower bound).
    """
    idx = _labels_index()
    ia, iw = idx[a_label], idx["omega"]
    q, s = grid.q, grid.q_sigma
    return (math.exp(2 * a) * (q[ia, ia] - shift * s[ia, ia])
            - math.exp(a + omega) * ((q[ia, iw] + shift * s[ia, iw])
                                     + (q[iw, ia] + shift * s[iw, ia]))
            + math.exp(2 * omega) * (q[iw, iw] - shift * s[iw, iw]))


def analytic_y11_lower(grid: GainGrid, table: IntensityTable,
                       shift_sigmas: float = 0.0) -> float:
    """Closed-form lower bound on the two-single-photon yield Y_11."""
    mu, nu, omega = table.mu, table.nu, table.omega
    h_nu = _h_combination(grid, nu, omega, "nu", shift_sigmas)
    # The mu-side combination enters negatively, so shift it the other way.
    h_mu = _h_combination(grid, mu, omega, "mu", -shift_sigmas)
    denominator = mu ** 3 * (nu - omega) ** 2 - nu ** 3 * (mu - omega) ** 2
    if denominator <= 0:
        raise DecoyError("intensity settings leave the bound degenerate "
                         "(need mu^3 (nu-w)^2 > nu^3 (mu-w)^2)")
    return min(max((mu ** 3 * h_nu - nu ** 3 * h_mu) / denominator, 0.0), 1.0)


def analytic_e11_upper(grid: GainGrid, table: IntensityTable,
                       y11_lower: float, shift_sigmas: float = 0.0) -> float:
    """Closed-form upper bound on the two-single-photon error rate e_11."""
    nu, omega = table.nu, table.omega
    idx = _labels_index()
    inu, iw = idx["nu"], idx["omega"]
    eq, s = grid.eq, grid.eq_sigma
    w_nu = (math.exp(2 * nu) * (eq[inu, inu] + shift_sigmas * s[inu, inu])
            - math.exp(nu + omega) * ((eq[inu, iw] - shift_sigmas * s[inu, iw])
                                      + (eq[iw, inu] - shift_sigmas * s[iw, inu]))
            + math.exp(2 * omega) * (eq[iw, iw] + shift_sigmas * s[iw, iw]))
    if y11_lower <= 0.0:
        return 1.0
    return min(max(w_nu / ((nu - omega) ** 2 * y11_lower), 0.0), 1.0)


# ---------------------------------------------------------------------------
# Linear-program bounds
# ---------------------------------------------------------------------------

def _poisson_vector(mean: float, n_cut: int) -> np.ndarray:
    return np.array([poisson_pmf(k, mean) for k in range(n_cut + 1)])


def _lp_system(grid: GainGrid, table: IntensityTable, n_cut: int,
               shift_sigmas: float):
    """Inequality system A x <= b over x = [Y_nm..., Z_nm...]."""
    intensities = [table.mu, table.nu, table.omega]
    size = (n_cut + 1) ** 2
    rows_a, rows_b, labels = [], [], []
    pmf = {a: _poisson_vector(a, n_cut) for a in intensities}
    for i, a in enumerate(intensities):
        for j, b in enumerate(intensities):
            weights = np.outer(pmf[a], pmf[b]).ravel()
            tail = 1.0 - float(weights.sum())
            pair = f"{INTENSITY_LABELS[i]}-{INTENSITY_LABELS[j]}"
            for kind, observed, sigma in (
                    ("gain", grid.q[i, j], grid.q_sigma[i, j]),
                    ("error-gain", grid.eq[i, j], grid.eq_sigma[i, j])):
                if observed == 0.0 and sigma == 0.0:
                    # An exact zero with no stated uncertainty means the
                    # cell fell below resolution; it cannot pin yields to
                    # zero.  Dropping the window only relaxes the bounds.
                    continue
                coeff = np.zeros(2 * size)
                offset = 0 if kind == "gain" else size
                coeff[offset:offset + size] = weights
                slack = shift_sigmas * sigma
                rows_a.append(coeff)
                rows_b.append(observed + slack)
                labels.append(f"{kind} window {pair} (upper side)")
                rows_a.append(-coeff)
                rows_b.append(-(observed - slack - tail))
                labels.append(f"{kind} window {pair} (lower side)")
    # Error-weighted yields cannot exceed yields: Z_nm - Y_nm <= 0.
    for k in range(size):
        coeff = np.zeros(2 * size)
        coeff[size + k] = 1.0
        coeff[k] = -1.0
        rows_a.append(coeff)
        rows_b.append(0.0)
        labels.append(f"error-weight bound index {k}")
    return np.array(rows_a), np.array(rows_b), labels, size


def _lp_diagnose(a_ub: np.ndarray, b_ub: np.ndarray, labels) -> str:
    """Name the constraint needing the largest relaxation for feasibility."""
    n_vars = a_ub.shape[1]
    n_rows = a_ub.shape[0]
    # Minimize total slack with one slack variable per inequality row.
    augmented = np.hstack([a_ub, -np.eye(n_rows)])
    cost = np.concatenate([np.zeros(n_vars), np.ones(n_rows)])
    bounds = [(0, 1)] * n_vars + [(0, None)] * n_rows
    result = linprog(cost, A_ub=augmented, b_ub=b_ub, bounds=bounds,
                     method="highs")
    if not result.success:
        return "unknown (slack relaxation also failed)"
    slack = result.x[n_vars:]
    worst = int(np.argmax(slack))
    return f"{labels[worst]} violated by {slack[worst]:.3g}"


def _lp_extreme(a_ub, b_ub, labels, size, index, maximize):
    cost = np.zeros(2 * size)
    cost[index] = -1.0 if maximize else 1.0
    result = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=[(0, 1)] * (2 * size),
                     method="highs")
    if result.status == 2:
        raise DecoyError("decoy linear program infeasible; most violated "
                         "constraint: " + _lp_diagnose(a_ub, b_ub, labels))
    if not result.success:
        raise DecoyError(f"decoy linear program failed: {result.message}")
    value = -result.fun if maximize else result.fun
    return min(max(value, 0.0), 1.0)


def lp_bounds(grid: GainGrid, table: IntensityTable, n_cut: int = DEFAULT_N_CUT,
              shift_sigmas: float = 1.0) -> tuple:
    """(Y_11 lower, Z_11 upper) from the truncated Poisson system."""
    if n_cut < 1:
        raise DecoyError("n_cut must be at least 1")
    a_ub, b_ub, labels, size = _lp_system(grid, table, n_cut, shift_sigmas)
    y11_index = 1 * (n_cut + 1) + 1
    y11_lower = _lp_extreme(a_ub, b_ub, labels, size, y11_index, maximize=False)
    z11_upper = _lp_extreme(a_ub, b_ub, labels, size, size + y11_index,
                            maximize=True)
    return y11_lower, z11_upper


# ---------------------------------------------------------------------------
# Bound driver and key rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class YieldBounds:
    """Single-photon-pair yield lower bounds and phase-error upper bound."""

    y11_lower: dict
    e11_upper: float
    meas_basis: str
    phase_basis: str
    method: str

    def __post_init__(self):
        for basis, value in self.y11_lower.items():
            if not 0.0 <= value <= 1.0:
                raise DecoyError(f"Y11 bound for {basis} outside [0, 1]")
        if not 0.0 <= self.e11_upper <= 1.0:
            raise DecoyError("e11 bound outside [0, 1]")


def bound_y11_e11(grids: dict, table: IntensityTable, meas_basis: str,
                  method: str = "analytic", n_cut: int = DEFAULT_N_CUT,
                  shift_sigmas: float | None = None) -> YieldBounds:
    """Bound Y_11 (per preparation basis) and the conjugate-basis e_11.

    The default statistical relaxation is 0 sigma for the closed-form
    mode (its algebra is already one-sided) and 1 sigma for the LP whose
    windows would otherwise be measure-zero on noisy tallies.
    """
    if meas_basis not in BASIS_LABELS:
        raise DecoyError(f"unknown measurement basis {meas_basis!r}")
    if method not in ("analytic", "lp"):
        raise DecoyError(f"unknown bound method {method!r}")
    phase_basis = CONJUGATE_BASIS[meas_basis]
    for basis in (meas_basis, phase_basis):
        if basis not in grids:
            raise DecoyError(f"missing gain grid for basis {basis!r}")
    if shift_sigmas is None:
        shift_sigmas = 0.0 if method == "analytic" else 1.0
    y11_lower = {}
    if method == "analytic":
        for basis in (meas_basis, phase_basis):
            y11_lower[basis] = analytic_y11_lower(grids[basis], table,
                                                  shift_sigmas)
        e11_upper = analytic_e11_upper(grids[phase_basis], table,
                                       y11_lower[phase_basis], shift_sigmas)
    else:
        z11_upper = None
        for basis in (meas_basis, phase_basis):
            y_low, z_up = lp_bounds(grids[basis], table, n_cut, shift_sigmas)
            y11_lower[basis] = y_low
            if basis == phase_basis:
                z11_upper = z_up
        phase_y11 = y11_lower[phase_basis]
        e11_upper = 1.0 if phase_y11 <= 0.0 else min(z11_upper / phase_y11, 1.0)
    return YieldBounds(y11_lower=y11_lower, e11_upper=e11_upper,
                       meas_basis=meas_basis, phase_basis=phase_basis,
                       method=method)


@dataclass(frozen=True)
class KeyRateReport:
    """Secure-rate evaluation with inputs echoed; rate clamps at zero."""

    rate: float
    raw_rate: float
    p11: float
    y11_lower: float
    e11_upper: float
    q_signal: float
    e_signal: float
    error_correction_efficiency: float


def key_rate(p11_value: float, y11_lower: float, e11_upper: float,
             q_signal: float, e_signal: float,
             f: float = DEFAULT_ERROR_CORRECTION_EFFICIENCY) -> KeyRateReport:
    """Single-photon positive term minus the error-correction cost."""
    for name, value, low, high in (
            ("p11", p11_value, 0.0, 1.0), ("y11_lower", y11_lower, 0.0, 1.0),
            ("e11_upper", e11_upper, 0.0, 1.0), ("q_signal", q_signal, 0.0, 1.0),
            ("e_signal", e_signal, 0.0, 1.0)):
        if not low <= value <= high:
            raise DecoyError(f"{name} must be in [{low}, {high}], got {value}")
    if f < 1.0:
        raise DecoyError(f"error-correction efficiency must be >= 1, got {f}")
    raw = (p11_value * y11_lower * (1.0 - h2(e11_upper))
           - q_signal * f * h2(e_signal))
    return KeyRateReport(rate=max(raw, 0.0), raw_rate=raw, p11=p11_value,
                         y11_lower=y11_lower, e11_upper=e11_upper,
                         q_signal=q_signal, e_signal=e_signal,
                         error_correction_efficiency=f)
