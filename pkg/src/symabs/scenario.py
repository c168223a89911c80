"""Scenario-based certification of abstraction score functions.

The goal is a score function S(x, xhat) = sum_j phi_j g_j(x, xhat) relating a
black-box subsystem to its grid abstraction, with
    gamma ||x - xhat||^2 <= S(x, xhat)
    S(f(x,nu,d), fhat(xhat,nu,dhat)) <= max{mu S(x,xhat), eta ||d-dhat||^2, theta}.
Both conditions are linear in the unknowns (gamma, eta~, theta~, phi) once the
contraction level mu~ is fixed, so sampled one-step data turns them into a
finite LP (the scenario program): minimize the slack xi over all sampled rows.
A Lipschitz constant of the row functions and a geometric radius kappa^{-1}(eps)
then inflate the optimum xi* into a margin; margin <= 0 certifies the score
function over the whole domain with confidence 1 - beta, using the minimal
sample count Q from the binomial-tail bound.

Euclidean norms are used inside all row functions and Lipschitz formulas; the
grid quantizer itself is an infinity-norm object (see module quantize).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, SolverError
from .model import BlackBoxSystem, SystemSignature
from .quantize import AbstractPoint, UniformGrid, abstract_transition
from .simplex import solve_with_rows

Array = np.ndarray

DEFAULT_ROW_CAP = 50_000_000
SAMPLE_CAP = 10_000_000


# ----------------------------------------------------------------------------
# Score-function basis
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Monomial basis for S(x, xhat).

    mode "difference": exponents is a tuple of z rows, each with one even
    exponent per state coordinate; g_j = prod_k (x_k - xhat_k)^e_jk.
    mode "general": exponents is a tuple of z (a, b) row pairs;
    g_j = prod_k x_k^a_jk * prod_k xhat_k^b_jk.
    """

    mode: str
    exponents: tuple

    def __post_init__(self):
        if self.mode not in ("difference", "general"):
            raise ValueError("mode must be 'difference' or 'general'")
        if self.mode == "difference":
            rows = tuple(tuple(int(e) for e in row) for row in self.exponents)
            if not rows:
                raise ValueError("basis needs at least one monomial")
            width = len(rows[0])
            for row in rows:
                if len(row) != width:
                    raise ValueError("all exponent rows must share the state dimension")
                for e in row:
                    if e < 0:
                        raise ValueError("exponents must be non-negative")
                    if e % 2:
                        raise ValueError(
                            "difference-monomial exponents must be even so the "
                            "monomials are sign-stable")
        else:
            rows = tuple((tuple(int(e) for e in a), tuple(int(e) for e in b))
                         for a, b in self.exponents)
            if not rows:
                raise ValueError("basis needs at least one monomial")
            width = len(rows[0][0])
            for a, b in rows:
                if len(a) != width or len(b) != width:
                    raise ValueError("all exponent rows must share the state dimension")
                if min(a, default=0) < 0 or min(b, default=0) < 0:
                    raise ValueError("exponents must be non-negative")
        object.__setattr__(self, "exponents", rows)

    @property
    def z(self) -> int:
        return len(self.exponents)

    @property
    def state_dim(self) -> int:
        row = self.exponents[0]
        return len(row[0]) if self.mode == "general" else len(row)

    def features(self, x, xhat) -> Array:
        """Evaluate all g_j; broadcasts over leading axes, returns (..., z)."""
        x = np.asarray(x, dtype=float)
        xhat = np.asarray(xhat, dtype=float)
        if self.mode == "difference":
            delta = x - xhat
            exp = np.asarray(self.exponents)
            return np.prod(delta[..., None, :] ** exp, axis=-1)
        a = np.asarray([row[0] for row in self.exponents])
        b = np.asarray([row[1] for row in self.exponents])
        x, xhat = np.broadcast_arrays(x, xhat)
        return (np.prod(x[..., None, :] ** a, axis=-1)
                * np.prod(xhat[..., None, :] ** b, axis=-1))

    def to_mapping(self) -> dict:
        return {"mode": self.mode,
                "exponents": [list(map(list, row)) if self.mode == "general"
                              else list(row) for row in self.exponents]}

    @classmethod
    def from_mapping(cls, data) -> "BasisSpec":
        return cls(mode=data["mode"], exponents=tuple(
            tuple(map(tuple, row)) if data["mode"] == "general" else tuple(row)
            for row in data["exponents"]))


def quartic_difference_basis(state_dim: int) -> BasisSpec:
    """Per-coordinate quartic and quadratic difference monomials plus a constant."""
    rows = []
    for k in range(state_dim):
        for power in (4, 2):
            row = [0] * state_dim
            row[k] = power
            rows.append(tuple(row))
    rows.append(tuple([0] * state_dim))
    return BasisSpec(mode="difference", exponents=tuple(rows))


# ----------------------------------------------------------------------------
# Samples
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Q i.i.d. uniform draws (x_i, d_i) from X x D, reproducible from seed."""

    seed: int
    state_dim: int
    dist_dim: int
    points: Array  # (Q, state_dim + dist_dim)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def states(self) -> Array:
        return self.points[:, :self.state_dim]

    @property
    def disturbances(self) -> Array:
        return self.points[:, self.state_dim:]


def draw_samples(signature: SystemSignature, count: int, seed: int) -> SampleBatch:
    if count < 1:
        raise ValueError("need at least one sample")
    if count > SAMPLE_CAP:
        raise CapacityError(f"{count} samples exceed the cap {SAMPLE_CAP}")
    box = np.vstack([signature.state_box, signature.disturbance_box])
    rng = np.random.default_rng(seed)
    points = rng.uniform(box[:, 0], box[:, 1], size=(count, box.shape[0]))
    return SampleBatch(seed=seed, state_dim=signature.state_dim,
                       dist_dim=signature.disturbance_dim, points=points)


# ----------------------------------------------------------------------------
# Minimal sample count and the kappa geometry
# ----------------------------------------------------------------------------

def _log_binomial_tail(q: int, eps: float, c: int) -> float:
    """log of sum_{i=0}^{c-1} C(q,i) eps^i (1-eps)^(q-i), via incremental
    term ratios so it stays finite up to q = 10^7."""
    log_eps = math.log(eps)
    log_1me = math.log1p(-eps)
    term = q * log_1me
    total = term
    for i in range(1, min(c, q + 1)):
        term += math.log(q - i + 1) - math.log(i) + log_eps - log_1me
        total = float(np.logaddexp(total, term))
    return total


def min_sample_size(eps, beta: float, unknowns: int,
                    cap: int = SAMPLE_CAP) -> int:
    """Smallest Q with sum_t sum_{i<unknowns} C(Q,i) eps_t^i (1-eps_t)^(Q-i) <= beta."""
    eps_list = [float(e) for e in (np.atleast_1d(eps))]
    if not eps_list:
        raise ValueError("need at least one eps level")
    for e in eps_list:
        if not 0.0 < e < 1.0:
            raise ValueError(f"eps={e} outside (0,1)")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0,1)")
    unknowns = int(unknowns)
    if unknowns < 1:
        raise ValueError("unknowns must be at least 1")

    def ok(q: int) -> bool:
        total = 0.0
        for e in eps_list:
            total += math.exp(_log_binomial_tail(q, e, unknowns))
            if total > beta:
                return False
        return total <= beta

    q = 1
    while not ok(q):
        if q >= cap:
            raise CapacityError(
                f"minimal sample size exceeds {cap}; relax eps or beta")
        q = min(2 * q, cap)
    lo, hi = q // 2, q  # ok(hi) holds; lo either 0 or known infeasible
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def kappa(radius: float, dims: int, volume: float) -> float:
    """Minimal probability mass of a radius-r Euclidean ball under the uniform
    distribution on a set of the given volume in R^dims."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if dims < 1:
        raise ValueError("dims must be at least 1")
    if volume <= 0:
        raise ValueError("volume must be positive")
    return (math.pi ** (dims / 2.0)) * radius ** dims / (
        (2.0 ** dims) * math.gamma(dims / 2.0 + 1.0) * volume)


def kappa_inverse(eps: float, dims: int, volume: float) -> float:
    """Closed-form inverse of kappa in the radius argument."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0,1]")
    if dims < 1:
        raise ValueError("dims must be at least 1")
    if volume <= 0:
        raise ValueError("volume must be positive")
    inner = eps * volume * (2.0 ** dims) * math.gamma(dims / 2.0 + 1.0) \
        / (math.pi ** (dims / 2.0))
    return inner ** (1.0 / dims)


# ----------------------------------------------------------------------------
# Lipschitz constants of the row functions
# ----------------------------------------------------------------------------

def _eig_range(p, dim_hint: int = 1) -> tuple[float, float]:
    if p is None:
        return 1.0, 1.0
    mat = np.atleast_2d(np.asarray(p, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise ValueError("P must be square")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError("P must be symmetric")
    vals = np.linalg.eigvalsh(mat)
    if vals[0] <= 0:
        raise ValueError("P must be positive definite")
    return float(vals[0]), float(vals[-1])


def _spectral(mat) -> float:
    if mat is None:
        return 0.0
    arr = np.atleast_2d(np.asarray(mat, dtype=float))
    return float(np.linalg.norm(arr, 2))


def lipschitz_linear(a, b, e, p, state_bound: float, input_bound: float,
                     dist_bound: float, sigma: float, mu: float,
                     eta: float) -> float:
    """Row-function Lipschitz constant for linear dynamics x+ = Ax + Bnu + Ed
    under the quadratic-form score with matrix P (identity when None)."""
    j1, j2, j3 = _spectral(a), _spectral(b), _spectral(e)
    lmin, lmax = _eig_range(p)
    w1, w2, w3 = float(state_bound), float(input_bound), float(dist_bound)
    if min(w1, w2, w3, sigma, mu, eta) < 0:
        raise ValueError("bounds, sigma, mu, eta must be non-negative")
    l1 = 4.0 * w1 * (lmin + lmax)
    l2 = 2.0 * lmax * (2.0 * j1 * j1 * w1 + 2.0 * j1 * j2 * w2
                       + 2.0 * j1 * j3 * w3 + j1 * sigma
                       + 2.0 * j3 * j3 * w3 + 2.0 * j2 * j3 * w2
                       + 2.0 * j1 * j3 * w1 + j3 * sigma
                       + 2.0 * w1 * mu) + 2.0 * eta * w3
    return max(l1, l2)


def lipschitz_nonlinear(j_f, j_x, j_d, p, state_bound: float, dist_bound: float,
                        sigma: float, mu: float, eta: float) -> float:
    """Row-function Lipschitz constant from bounds on the dynamics: j_f on
    ||f||, j_x and j_d on its slopes in state and disturbance."""
    if min(j_f, j_x, j_d, state_bound, dist_bound, sigma, mu, eta) < 0:
        raise ValueError("all bounds must be non-negative")
    lmin, lmax = _eig_range(p)
    w1, w3 = float(state_bound), float(dist_bound)
    l1 = 4.0 * w1 * (lmin + lmax)
    l2 = 2.0 * lmax * (2.0 * j_f * j_x + j_x * sigma + 2.0 * j_f * j_d
                       + j_d * sigma + 2.0 * w1 * mu) + 2.0 * eta * w3
    return max(l1, l2)


def _corner_norm(box: Array) -> float:
    if box.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(np.max(np.abs(box), axis=1)))


def domain_bounds(signature: SystemSignature) -> tuple[float, float, float]:
    """(max ||x||, max ||nu||, max ||d||) in the Euclidean norm over the
    declared domains."""
    if signature.n_inputs > 100_000:
        raise ValueError("input set too large to scan; use per-subsystem signatures")
    w2 = max(float(np.linalg.norm(signature.input(i)))
             for i in range(signature.n_inputs))
    return _corner_norm(signature.state_box), w2, _corner_norm(signature.disturbance_box)


def _sample_dynamics(sys: BlackBoxSystem, pairs: int, seed: int,
                     retry_cap: int = 100) -> tuple[float, float]:
    """Max observed slope ||f(a)-f(b)|| / ||a-b|| over random point pairs per
    input, and max observed ||f||."""
    sig = sys.signature
    box = np.vstack([sig.state_box, sig.disturbance_box])
    rng = np.random.default_rng(seed)
    n = sig.state_dim
    slope = 0.0
    fmax = 0.0
    for u in range(sig.n_inputs):
        nu = sig.input(u)
        first = rng.uniform(box[:, 0], box[:, 1], size=(pairs, box.shape[0]))
        second = rng.uniform(box[:, 0], box[:, 1], size=(pairs, box.shape[0]))
        for k in range(pairs):
            gap = np.linalg.norm(first[k] - second[k])
            tries = 0
            while gap < 1e-12:
                tries += 1
                if tries > retry_cap:
                    raise SolverError("could not draw a non-coincident sample pair")
                second[k] = rng.uniform(box[:, 0], box[:, 1])
                gap = np.linalg.norm(first[k] - second[k])
            ya = sys.step(first[k, :n], nu, first[k, n:])
            yb = sys.step(second[k, :n], nu, second[k, n:])
            slope = max(slope, float(np.linalg.norm(ya - yb)) / gap)
            fmax = max(fmax, float(np.linalg.norm(ya)), float(np.linalg.norm(yb)))
    return slope, fmax


def estimate_lipschitz_data(sys: BlackBoxSystem, pairs: int = 200, seed: int = 0,
                            safety: float = 1.5) -> float:
    """Empirical slope bound of the dynamics: max over random pairs and inputs
    of the difference quotient, times the safety factor."""
    if pairs < 2:
        raise ValueError("need at least 2 pairs")
    if safety <= 0:
        raise ValueError("safety factor must be positive")
    slope, _ = _sample_dynamics(sys, pairs, seed)
    return slope * safety


@dataclass(frozen=True, eq=False)
class LinearLipschitz:
    """Row-function Lipschitz bound from known linear dynamics (A, B, E)."""

    a: object
    b: object = None
    e: object = None
    p: object = None

    def bound(self, sys: BlackBoxSystem, sigma: float, mu: float, eta: float) -> float:
        w1, w2, w3 = domain_bounds(sys.signature)
        return lipschitz_linear(self.a, self.b, self.e, self.p, w1, w2, w3,
                                sigma, mu, eta)


@dataclass(frozen=True, eq=False)
class NonlinearLipschitz:
    """Row-function Lipschitz bound from user-supplied nonlinear bounds."""

    j_f: float
    j_x: float
    j_d: float
    p: object = None

    def bound(self, sys: BlackBoxSystem, sigma: float, mu: float, eta: float) -> float:
        w1, _, w3 = domain_bounds(sys.signature)
        return lipschitz_nonlinear(self.j_f, self.j_x, self.j_d, self.p,
                                   w1, w3, sigma, mu, eta)


@dataclass(eq=False)
class DataLipschitz:
    """Row-function Lipschitz bound with the dynamics' slope and magnitude
    estimated from sampled queries (slope estimate times a safety factor;
    ||f|| bound is the larger of the observed maximum times the safety factor
    and the state-box norm)."""

    pairs: int = 200
    seed: int = 0
    safety: float = 1.5
    p: object = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def dynamics_bounds(self, sys: BlackBoxSystem) -> tuple[float, float]:
        key = id(sys)
        if key not in self._cache:
            if self.pairs < 2:
                raise ValueError("need at least 2 pairs")
            slope, fmax = _sample_dynamics(sys, self.pairs, self.seed)
            w1, _, _ = domain_bounds(sys.signature)
            self._cache[key] = (slope * self.safety,
                                max(fmax * self.safety, w1))
        return self._cache[key]

    def bound(self, sys: BlackBoxSystem, sigma: float, mu: float, eta: float) -> float:
        slope, j_f = self.dynamics_bounds(sys)
        w1, _, w3 = domain_bounds(sys.signature)
        return lipschitz_nonlinear(j_f, slope, slope, self.p, w1, w3,
                                   sigma, mu, eta)


# ----------------------------------------------------------------------------
# Decision variables and the scenario program
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class VariableBoxes:
    """Mandatory bounds on the LP decision variables (xi stays free)."""

    gamma: tuple = (1e-3, 1e3)
    eta: tuple = (0.0, 1e3)
    theta: tuple = (0.0, 1e3)
    phi: tuple = (-1e3, 1e3)

    def __post_init__(self):
        for name in ("gamma", "eta", "theta", "phi"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"{name} box must be finite with lo < hi")
            object.__setattr__(self, name, (lo, hi))
        if self.gamma[0] <= 0:
            raise ValueError("gamma lower bound must be positive")
        if self.eta[0] < 0 or self.theta[0] < 0:
            raise ValueError("eta and theta lower bounds must be non-negative")

    def lower(self, z: int) -> Array:
        return np.array([self.gamma[0], self.eta[0], self.theta[0]]
                        + [self.phi[0]] * z + [-np.inf])

    def upper(self, z: int) -> Array:
        return np.array([self.gamma[1], self.eta[1], self.theta[1]]
                        + [self.phi[1]] * z + [np.inf])

    def to_mapping(self) -> dict:
        return {"gamma": list(self.gamma), "eta": list(self.eta),
                "theta": list(self.theta), "phi": list(self.phi)}

    @classmethod
    def from_mapping(cls, data) -> "VariableBoxes":
        return cls(**{k: tuple(v) for k, v in data.items()})


@dataclass(frozen=True, eq=False)
class DecisionVector:
    """LP unknowns in the order (gamma, eta, theta, phi..., xi), plus the fixed
    contraction level mu the instance was solved under."""

    gamma: float
    eta: float
    theta: float
    phi: Array
    xi: float
    mu: float

    def as_array(self) -> Array:
        return np.concatenate([[self.gamma, self.eta, self.theta],
                               np.asarray(self.phi, dtype=float), [self.xi]])

    @classmethod
    def from_array(cls, vec: Array, mu: float) -> "DecisionVector":
        vec = np.asarray(vec, dtype=float)
        return cls(gamma=float(vec[0]), eta=float(vec[1]), theta=float(vec[2]),
                   phi=vec[3:-1].copy(), xi=float(vec[-1]), mu=float(mu))


@dataclass(frozen=True)
class RowTag:
    """Provenance of one SOP row."""

    kind: str  # "H1" | "H2"
    sample: int
    input: int | None
    state: int
    dist: int | None


@dataclass(frozen=True)
class SopStructure:
    samples: int
    inputs: int
    states: int
    dists: int

    @property
    def h1_rows(self) -> int:
        return self.samples * self.states

    @property
    def h2_rows(self) -> int:
        return self.samples * self.inputs * self.states * self.dists


@dataclass(eq=False)
class SopInstance:
    """Dense column storage of all SOP rows.

    Row r reads  coef_gamma[r]*gamma + coef_eta[r]*eta + coef_theta[r]*theta
    + coef_phi[r].phi + const[r] - xi <= 0.  H1 rows come first (sample-major,
    then abstract state); H2 rows follow in (sample, input, state, dist) order.
    """

    coef_gamma: Array
    coef_eta: Array
    coef_theta: Array
    coef_phi: Array
    const: Array
    mu: float
    basis: BasisSpec | None = None
    boxes: VariableBoxes = field(default_factory=VariableBoxes)
    structure: SopStructure | None = None

    def __post_init__(self):
        r = self.coef_phi.shape[0]
        for name in ("coef_gamma", "coef_eta", "coef_theta", "const"):
            if getattr(self, name).shape != (r,):
                raise ValueError(f"{name} must have shape ({r},)")

    @property
    def row_count(self) -> int:
        return self.coef_phi.shape[0]

    @property
    def z(self) -> int:
        return self.coef_phi.shape[1]

    @property
    def n_vars(self) -> int:
        return self.z + 4

    @classmethod
    def from_rows(cls, coef_phi, const, coef_gamma=None, coef_eta=None,
                  coef_theta=None, mu: float = 0.5, basis=None,
                  boxes=None) -> "SopInstance":
        coef_phi = np.asarray(coef_phi, dtype=float)
        if coef_phi.ndim != 2:
            raise ValueError("coef_phi must be (rows, z)")
        r = coef_phi.shape[0]
        zero = np.zeros(r)
        return cls(coef_gamma=np.asarray(coef_gamma, dtype=float) if coef_gamma
                   is not None else zero.copy(),
                   coef_eta=np.asarray(coef_eta, dtype=float) if coef_eta
                   is not None else zero.copy(),
                   coef_theta=np.asarray(coef_theta, dtype=float) if coef_theta
                   is not None else zero.copy(),
                   coef_phi=coef_phi,
                   const=np.asarray(const, dtype=float),
                   mu=mu, basis=basis, boxes=boxes or VariableBoxes())

    def residuals(self, vec: Array) -> Array:
        vec = np.asarray(vec, dtype=float)
        gamma, eta, theta = vec[0], vec[1], vec[2]
        phi, xi = vec[3:-1], vec[-1]
        out = self.coef_phi @ phi
        out += self.coef_gamma * gamma
        out += self.coef_eta * eta
        out += self.coef_theta * theta
        out += self.const
        out -= xi
        return out

    def gather(self, idx) -> tuple[Array, Array]:
        idx = np.asarray(idx, dtype=int)
        a = np.empty((idx.shape[0], self.n_vars))
        a[:, 0] = self.coef_gamma[idx]
        a[:, 1] = self.coef_eta[idx]
        a[:, 2] = self.coef_theta[idx]
        a[:, 3:-1] = self.coef_phi[idx]
        a[:, -1] = -1.0
        return a, -self.const[idx]

    def tag(self, row: int):
        s = self.structure
        if s is None:
            return int(row)
        if row < 0 or row >= self.row_count:
            raise ValueError("row index out of range")
        if row < s.h1_rows:
            i, xh = divmod(row, s.states)
            return RowTag(kind="H1", sample=i, input=None, state=xh, dist=None)
        rest = row - s.h1_rows
        rest, dh = divmod(rest, s.dists)
        rest, xh = divmod(rest, s.states)
        i, u = divmod(rest, s.inputs)
        return RowTag(kind="H2", sample=i, input=u, state=xh, dist=dh)


class SopData:
    """Sampled transitions and cached abstract successors, reusable across the
    per-mu LP instances of one certification run."""

    def __init__(self, samples: SampleBatch, sys: BlackBoxSystem,
                 state_grid: UniformGrid, dist_grid: UniformGrid,
                 basis: BasisSpec, row_cap: int = DEFAULT_ROW_CAP):
        sig = sys.signature
        if samples.state_dim != sig.state_dim or samples.dist_dim != sig.disturbance_dim:
            raise ValueError("sample batch does not match the system signature")
        if state_grid.dim != sig.state_dim:
            raise ValueError("state grid does not match the state dimension")
        if dist_grid is None or dist_grid.dim != sig.disturbance_dim:
            raise ValueError("disturbance grid does not match the disturbance dimension")
        if basis.state_dim != sig.state_dim:
            raise ValueError("basis does not match the state dimension")
        self.samples = samples
        self.sys = sys
        self.state_grid = state_grid
        self.dist_grid = dist_grid
        self.basis = basis
        q = samples.count
        n_states = state_grid.total_cells
        n_inputs = sig.n_inputs
        n_dists = dist_grid.total_cells
        self.structure = SopStructure(samples=q, inputs=n_inputs,
                                      states=n_states, dists=n_dists)
        rows = self.structure.h1_rows + self.structure.h2_rows
        if rows > row_cap:
            raise CapacityError(f"{rows} SOP rows exceed the cap {row_cap}")

        state_reps = state_grid.all_representatives()
        dist_reps = dist_grid.all_representatives()
        inputs = sig.input_array()

        # One oracle query per (sample, input).
        x_plus = np.empty((q, n_inputs, sig.state_dim))
        xs, ds = samples.states, samples.disturbances
        for u in range(n_inputs):
            for i in range(q):
                x_plus[i, u] = sys.step(xs[i], inputs[u], ds[i])
        self.x_plus = x_plus

        # One oracle query per (state cell, input, disturbance cell); sink
        # successors contribute their clamped in-box representative so the
        # score stays evaluable on every row.
        state_points = [AbstractPoint(s, state_reps[s]) for s in range(n_states)]
        dist_points = [AbstractPoint(dcell, dist_reps[dcell]) for dcell in range(n_dists)]
        succ = np.empty((n_inputs, n_states, n_dists, sig.state_dim))
        for u in range(n_inputs):
            for s in range(n_states):
                for dcell in range(n_dists):
                    nxt = abstract_transition(sys, state_grid, dist_grid,
                                              state_points[s], inputs[u],
                                              dist_points[dcell])
                    succ[u, s, dcell] = nxt.representative
        self.successor_reps = succ

        # Cached per-row geometry independent of mu.
        self.g_cur = basis.features(xs[:, None, :], state_reps[None, :, :])
        diff_x = xs[:, None, :] - state_reps[None, :, :]
        self.dist2_state = np.einsum("qsk,qsk->qs", diff_x, diff_x)
        diff_d = ds[:, None, :] - dist_reps[None, :, :]
        self.dist2_dist = np.einsum("qdk,qdk->qd", diff_d, diff_d)

    def instance(self, mu: float, boxes: VariableBoxes | None = None,
                 chunk_target: int = 6_000_000) -> SopInstance:
        if not 0.0 < mu < 1.0:
            raise ValueError("mu must lie in (0,1)")
        st = self.structure
        q, n_u, n_s, n_d = st.samples, st.inputs, st.states, st.dists
        z = self.basis.z
        r1, r2 = st.h1_rows, st.h2_rows
        rows = r1 + r2

        coef_gamma = np.zeros(rows)
        coef_eta = np.zeros(rows)
        coef_theta = np.zeros(rows)
        coef_phi = np.empty((rows, z))
        const = np.zeros(rows)

        coef_gamma[:r1] = self.dist2_state.ravel()
        coef_phi[:r1] = -self.g_cur.reshape(r1, z)

        phi2 = coef_phi[r1:].reshape(q, n_u, n_s, n_d, z)
        eta2 = coef_eta[r1:].reshape(q, n_u, n_s, n_d)
        coef_theta[r1:] = -1.0
        chunk = max(1, chunk_target // max(1, n_s * n_d * z))
        for u in range(n_u):
            for lo in range(0, q, chunk):
                hi = min(q, lo + chunk)
                g_plus = self.basis.features(
                    self.x_plus[lo:hi, u][:, None, None, :],
                    self.successor_reps[u][None, :, :, :])
                phi2[lo:hi, u] = g_plus - mu * self.g_cur[lo:hi, :, None, :]
        eta2[:] = -self.dist2_dist[:, None, None, :]

        return SopInstance(coef_gamma=coef_gamma, coef_eta=coef_eta,
                           coef_theta=coef_theta, coef_phi=coef_phi,
                           const=const, mu=float(mu), basis=self.basis,
                           boxes=boxes or VariableBoxes(), structure=st)


def assemble_sop(samples: SampleBatch, sys: BlackBoxSystem,
                 state_grid: UniformGrid, dist_grid: UniformGrid,
                 basis: BasisSpec, mu: float, boxes: VariableBoxes | None = None,
                 row_cap: int = DEFAULT_ROW_CAP) -> SopInstance:
    """Build the full scenario program for one fixed contraction level mu."""
    data = SopData(samples, sys, state_grid, dist_grid, basis, row_cap=row_cap)
    return data.instance(mu, boxes)


# ----------------------------------------------------------------------------
# LP solve with lexicographic refinement
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class SolveReport:
    decision: DecisionVector
    xi_star: float
    active: tuple
    iterations: int
    master_rows: int


def _pin(width: int, index: int, sign: float, rhs: float):
    """Constraint row  sign * x[index] <= rhs."""
    row = np.zeros(width)
    row[index] = sign
    return row, rhs


def solve_lp(instance: SopInstance, boxes: VariableBoxes | None = None,
             lexicographic: bool = True, batch: int = 64, tol: float = 1e-9,
             viol_tol: float = 1e-9,
             xi_target: float | None = None) -> SolveReport:
    """Minimize xi over all rows and boxes; optionally refine the optimum
    lexicographically (min eta, then max gamma, then min theta) with xi pinned
    at xi*.  A finite xi_target relaxes the pin to max(xi*, xi_target): the
    refinement then trades unneeded slack depth for better gains, and the
    certificate margin must be charged against the achieved xi, not xi*.
    Every generated row holds at the returned vector."""
    if instance.row_count == 0:
        raise ValueError("instance has no rows")
    boxes = boxes or instance.boxes
    z = instance.z
    nv = instance.n_vars
    lower, upper = boxes.lower(z), boxes.upper(z)

    def objective(index: int) -> Array:
        c = np.zeros(nv)
        c[index] = 1.0
        return c

    result, working, active = solve_with_rows(
        objective(nv - 1), instance, lower, upper, batch=batch, tol=tol,
        viol_tol=viol_tol, context="SOP phase xi")
    iterations = result.iterations
    xi_star = float(result.objective)
    vec = result.x

    if lexicographic:
        slack = lambda v: 1e-9 * max(1.0, abs(v))
        xi_pin = xi_star
        if xi_target is not None:
            xi_pin = max(xi_star, float(xi_target))
        row, rhs = _pin(nv, nv - 1, 1.0, xi_pin + slack(xi_pin))
        extra_a, extra_b = [row], [rhs]
        # eta down first: eta couples subsystems at composition time and any
        # slack left in it would otherwise be parked at the box top by the
        # later phases.  gamma up then theta down follow.
        plan = [(1, False), (0, True), (2, False)]
        for index, maximize in plan:
            result, working, active = solve_with_rows(
                objective(index), instance, lower, upper,
                extra_a=np.asarray(extra_a), extra_b=np.asarray(extra_b),
                maximize=maximize, start_rows=working, batch=batch, tol=tol,
                viol_tol=viol_tol, context=f"SOP refine var {index}")
            iterations += result.iterations
            val = float(result.x[index])
            if maximize:
                row, rhs = _pin(nv, index, -1.0, -(val - slack(val)))
            else:
                row, rhs = _pin(nv, index, 1.0, val + slack(val))
            extra_a.append(row)
            extra_b.append(rhs)
            vec = result.x

    worst = float(np.max(instance.residuals(vec)))
    if worst > 1e-7:
        raise SolverError(f"returned vector violates a row by {worst:.3e}")
    decision = DecisionVector.from_array(vec, instance.mu)
    tags = tuple(instance.tag(int(r)) for r in active)
    return SolveReport(decision=decision, xi_star=xi_star, active=tags,
                       iterations=iterations, master_rows=int(working.size))


# ----------------------------------------------------------------------------
# Gains, margin, certificate
# ----------------------------------------------------------------------------

def convert_gains(mu_tilde: float, eta_tilde: float, theta_tilde: float,
                  psi: float = 0.99, lam: float = 1.0) -> tuple[float, float, float]:
    """Turn LP-native gains into the max-form gains (mu, eta, theta)."""
    if not 0.0 < mu_tilde < 1.0:
        raise ValueError("mu_tilde must lie in (0,1)")
    if not 0.0 < psi < 1.0:
        raise ValueError("psi must lie in (0,1)")
    if lam <= 0:
        raise ValueError("lam must be positive")
    if eta_tilde < 0 or theta_tilde < 0:
        raise ValueError("eta_tilde and theta_tilde must be non-negative")
    mu = 1.0 - (1.0 - psi) * (1.0 - mu_tilde)
    eta = (1.0 + lam) * eta_tilde / ((1.0 - mu_tilde) * psi)
    theta = (1.0 + 1.0 / lam) * theta_tilde / ((1.0 - mu_tilde) * psi)
    return mu, eta, theta


def apbf_margin(xi_star: float, lipschitz: float, kappa_radius: float) -> float:
    """The certificate margin xi* + L * kappa^{-1}(eps); <= 0 certifies."""
    if lipschitz < 0 or kappa_radius < 0:
        raise ValueError("lipschitz and kappa_radius must be non-negative")
    return xi_star + lipschitz * kappa_radius


@dataclass(frozen=True, eq=False)
class ApbfCertificate:
    """Outcome of one subsystem certification.

    The quadruple (gamma, mu, eta, theta) is in max-form; certification holds
    with confidence 1 - beta when margin <= 0.  Certificates may also be built
    directly from known gains (leaving the provenance fields at None) for
    composition studies.
    """

    gamma: float
    mu: float
    eta: float
    theta: float
    beta: float
    certified: bool
    margin: float
    state_dim: int = 1
    mu_tilde: float | None = None
    eta_tilde: float | None = None
    theta_tilde: float | None = None
    xi_star: float | None = None
    xi_achieved: float | None = None
    psi: float = 0.99
    lam: float = 1.0
    q: int | None = None
    seed: int | None = None
    unknowns: int | None = None
    eps: tuple = ()
    mu_grid: tuple = ()
    margins: tuple = ()
    lipschitz: tuple = ()
    kappa_radii: tuple = ()
    basis: BasisSpec | None = None
    phi: tuple | None = None
    sigma: float | None = None
    boxes: VariableBoxes | None = None

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0,1)")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0,1)")

    @property
    def confidence(self) -> float:
        return 1.0 - self.beta

    def value(self, x, xhat) -> Array:
        """Score S(x, xhat); needs the basis and coefficients."""
        if self.basis is None or self.phi is None:
            raise ValueError("certificate carries no score coefficients")
        feats = self.basis.features(x, xhat)
        return feats @ np.asarray(self.phi, dtype=float)

    def to_mapping(self) -> dict:
        out = {
            "gamma": self.gamma, "mu": self.mu, "eta": self.eta,
            "theta": self.theta, "beta": self.beta, "certified": self.certified,
            "margin": self.margin, "state_dim": self.state_dim,
            "mu_tilde": self.mu_tilde, "eta_tilde": self.eta_tilde,
            "theta_tilde": self.theta_tilde, "xi_star": self.xi_star,
            "xi_achieved": self.xi_achieved,
            "psi": self.psi, "lam": self.lam, "q": self.q, "seed": self.seed,
            "unknowns": self.unknowns, "eps": list(self.eps),
            "mu_grid": list(self.mu_grid), "margins": list(self.margins),
            "lipschitz": list(self.lipschitz),
            "kappa_radii": list(self.kappa_radii),
            "basis": self.basis.to_mapping() if self.basis else None,
            "phi": list(self.phi) if self.phi is not None else None,
            "sigma": self.sigma,
            "boxes": self.boxes.to_mapping() if self.boxes else None,
        }
        return out

    @classmethod
    def from_mapping(cls, data) -> "ApbfCertificate":
        data = dict(data)
        if data.get("basis"):
            data["basis"] = BasisSpec.from_mapping(data["basis"])
        if data.get("boxes"):
            data["boxes"] = VariableBoxes.from_mapping(data["boxes"])
        for key in ("eps", "mu_grid", "margins", "lipschitz", "kappa_radii"):
            data[key] = tuple(data.get(key) or ())
        if data.get("phi") is not None:
            data["phi"] = tuple(data["phi"])
        return cls(**data)


def certify_apbf(sys: BlackBoxSystem, state_grid: UniformGrid,
                 dist_grid: UniformGrid, basis: BasisSpec, mu_grid, eps,
                 beta: float, lipschitz, boxes: VariableBoxes | None = None,
                 unknowns: int | None = None, seed: int = 0,
                 volume: float | None = None, kappa_radius=None,
                 psi: float = 0.99, lam: float = 1.0, lexicographic: bool = True,
                 xi_target: float | None = None,
                 row_cap: int = DEFAULT_ROW_CAP, batch: int = 64,
                 jobs: int = 1, samples: SampleBatch | None = None) -> ApbfCertificate:
    """Draw the minimal sample batch once, solve one LP per contraction level,
    and emit the best-margin certificate (uncertified when margin > 0).  A
    pre-drawn batch may be passed in; its size must match the minimal sample
    count implied by (eps, beta, unknowns)."""
    mu_levels = [float(m) for m in np.atleast_1d(mu_grid)]
    if not mu_levels:
        raise ValueError("mu_grid must be non-empty")
    for m in mu_levels:
        if not 0.0 < m < 1.0:
            raise ValueError(f"mu={m} outside (0,1)")
    eps_list = [float(e) for e in np.atleast_1d(eps)]
    if len(eps_list) == 1:
        eps_list = eps_list * len(mu_levels)
    if len(eps_list) != len(mu_levels):
        raise ValueError("eps must be scalar or one value per mu level")

    z = basis.z
    c_unknowns = z + 4 if unknowns is None else int(unknowns)
    q = min_sample_size(eps_list, beta, c_unknowns)
    if samples is None:
        samples = draw_samples(sys.signature, q, seed)
    elif samples.count != q:
        raise ValueError(f"sample batch has {samples.count} points, "
                         f"the settings require exactly {q}")
    data = SopData(samples, sys, state_grid, dist_grid, basis, row_cap=row_cap)

    sig = sys.signature
    dims = sig.state_dim + sig.disturbance_dim
    if volume is None:
        box = np.vstack([sig.state_box, sig.disturbance_box])
        volume = float(np.prod(box[:, 1] - box[:, 0]))
    if kappa_radius is None:
        radii = [kappa_inverse(e, dims, volume) for e in eps_list]
    else:
        radii = [float(r) for r in np.atleast_1d(kappa_radius)]
        if len(radii) == 1:
            radii = radii * len(mu_levels)

    def solve_level(t: int):
        inst = data.instance(mu_levels[t], boxes)
        report = solve_lp(inst, lexicographic=lexicographic, batch=batch,
                          xi_target=xi_target)
        level_l = lipschitz.bound(sys, sigma=state_grid.sigma, mu=mu_levels[t],
                                  eta=report.decision.eta)
        # Charge the margin against the slack the returned vector actually
        # uses; with xi_target unset this equals xi* up to pin tolerance.
        return report, level_l, apbf_margin(report.decision.xi, level_l, radii[t])

    if jobs > 1 and len(mu_levels) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            solved = list(pool.map(solve_level, range(len(mu_levels))))
    else:
        solved = [solve_level(t) for t in range(len(mu_levels))]

    margins = [s[2] for s in solved]
    best = int(np.argmin(margins))
    report, level_l, margin = solved[best]
    dec = report.decision
    mu, eta, theta = convert_gains(dec.mu, dec.eta, dec.theta, psi, lam)
    return ApbfCertificate(
        gamma=dec.gamma, mu=mu, eta=eta, theta=theta, beta=float(beta),
        certified=bool(margin <= 0.0), margin=float(margin),
        state_dim=sig.state_dim, mu_tilde=dec.mu, eta_tilde=dec.eta,
        theta_tilde=dec.theta, xi_star=report.xi_star,
        xi_achieved=float(dec.xi), psi=float(psi),
        lam=float(lam), q=q, seed=seed, unknowns=c_unknowns,
        eps=tuple(eps_list), mu_grid=tuple(mu_levels), margins=tuple(margins),
        lipschitz=tuple(s[1] for s in solved), kappa_radii=tuple(radii),
        basis=basis, phi=tuple(float(v) for v in dec.phi),
        sigma=float(state_grid.sigma), boxes=boxes or VariableBoxes())
