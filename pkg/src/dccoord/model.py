"""Domain types for the grid / data-center network and their basic operations."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ModelError(ValueError):
    """Invalid model data."""


def _arr(v, shape=None, name="array"):
    a = np.array(v, dtype=float)
    if shape is not None and a.shape != tuple(shape):
        raise ModelError(f"{name}: expected shape {tuple(shape)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name}: non-finite entries")
    a.setflags(write=False)
    return a


def ptdf_from_reactances(n_buses, lines, reactances, slack=0):
    """Power transfer distribution factors of a connected network.

    ``lines`` holds (from, to) pairs (0-based).  The slack bus column is zero.
    """
    n_lines = len(lines)
    B_line = np.zeros((n_lines, n_buses))
    for k, (i, j) in enumerate(lines):
        B_line[k, i] = 1.0 / reactances[k]
        B_line[k, j] = -1.0 / reactances[k]
    Inc = np.zeros((n_lines, n_buses))
    for k, (i, j) in enumerate(lines):
        Inc[k, i] = 1.0
        Inc[k, j] = -1.0
    B_bus = Inc.T @ B_line
    keep = [b for b in range(n_buses) if b != slack]
    if not keep:
        return np.zeros((n_lines, n_buses))
    Bred = B_bus[np.ix_(keep, keep)]
    if np.linalg.matrix_rank(Bred) < len(keep):
        raise ModelError("network is not connected")
    X = np.zeros((n_buses, n_buses))
    X[np.ix_(keep, keep)] = np.linalg.inv(Bred)
    return B_line @ X


@dataclass(frozen=True, eq=False)
class GridModel:
    """Zonal transmission grid with one aggregated generator per bus."""

    n_buses: int
    lines: tuple
    ptdf: np.ndarray
    gen_cost_lin: np.ndarray
    gen_cost_quad: np.ndarray
    gen_min: np.ndarray
    gen_max: np.ndarray
    ramp_up: np.ndarray
    ramp_dn: np.ndarray
    startup_ramp: np.ndarray
    shutdown_ramp: np.ndarray
    startup_cost: np.ndarray
    shed_cost: np.ndarray
    redispatch_limit: np.ndarray
    bus_names: tuple = ()

    def __post_init__(self):
        b = int(self.n_buses)
        if b < 1:
            raise ModelError("n_buses must be >= 1")
        object.__setattr__(self, "n_buses", b)
        lines = tuple((int(f), int(t), float(c)) for f, t, c in self.lines)
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "ptdf", _arr(self.ptdf, (len(lines), b), "ptdf"))
        for name in ("gen_cost_lin", "gen_min", "gen_max", "ramp_up", "ramp_dn", "startup_ramp",
                     "shutdown_ramp", "startup_cost", "shed_cost", "redispatch_limit"):
            object.__setattr__(self, name, _arr(getattr(self, name), (b,), name))
        C = np.array(self.gen_cost_quad, dtype=float)
        if C.ndim == 1:
            C = np.diag(C)
        object.__setattr__(self, "gen_cost_quad", _arr(C, (b, b), "gen_cost_quad"))
        if not self.bus_names:
            object.__setattr__(self, "bus_names", tuple(f"bus{i + 1}" for i in range(b)))
        else:
            object.__setattr__(self, "bus_names", tuple(str(x) for x in self.bus_names))
        self.validate()

    @property
    def n_lines(self):
        return len(self.lines)

    @property
    def line_cap(self):
        return np.array([c for _, _, c in self.lines], dtype=float)

    def validate(self):
        b = self.n_buses
        for f, t, c in self.lines:
            if not (0 <= f < b and 0 <= t < b) or f == t:
                raise ModelError(f"line ({f}, {t}) does not join two distinct buses")
            if c < 0:
                raise ModelError("line capacity must be >= 0")
        C = self.gen_cost_quad
        if np.max(np.abs(C - C.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(C))):
            raise ModelError("gen_cost_quad must be symmetric")
        if np.min(np.linalg.eigvalsh(C)) < -1e-10 * max(1.0, np.max(np.abs(C))):
            raise ModelError("gen_cost_quad must be positive semidefinite")
        for name in ("gen_cost_lin", "shed_cost", "gen_max", "redispatch_limit", "gen_min", "startup_cost",
                     "ramp_up", "ramp_dn", "startup_ramp", "shutdown_ramp"):
            if np.any(getattr(self, name) < 0):
                raise ModelError(f"{name} must be >= 0")
        if np.any(self.gen_min > self.gen_max):
            raise ModelError("gen_min must not exceed gen_max")
        marginal = self.gen_cost_lin + 2.0 * C @ self.gen_max
        if np.any(self.shed_cost <= np.max(marginal)):
            raise ModelError("shed_cost must exceed every generator's marginal cost at gen_max")


@dataclass(frozen=True, eq=False)
class NetDCModel:
    """Data centers, their users and the latency geometry between them."""

    n_dc: int
    n_users: int
    distance: np.ndarray
    conversion: np.ndarray
    dc_bus: tuple
    latency_loss_cap: float = 1.0
    alloc_reg: float = 1e-5
    shift_reg: float = 1e-5
    dc_names: tuple = ()

    def __post_init__(self):
        n, m = int(self.n_dc), int(self.n_users)
        if n < 1 or m < 1:
            raise ModelError("n_dc and n_users must be >= 1")
        object.__setattr__(self, "n_dc", n)
        object.__setattr__(self, "n_users", m)
        object.__setattr__(self, "distance", _arr(self.distance, (n, m), "distance"))
        Gam = np.array(self.conversion, dtype=float)
        if Gam.ndim != 2 or Gam.shape[1] != n:
            raise ModelError(f"conversion: expected (n_buses, {n}) matrix, got shape {Gam.shape}")
        object.__setattr__(self, "conversion", _arr(Gam, None, "conversion"))
        object.__setattr__(self, "dc_bus", tuple(int(x) for x in self.dc_bus))
        for name in ("latency_loss_cap", "alloc_reg", "shift_reg"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.dc_names:
            object.__setattr__(self, "dc_names", tuple(f"dc{i + 1}" for i in range(n)))
        self.validate()

    @property
    def n_buses(self):
        return self.conversion.shape[0]

    def validate(self):
        if np.any(self.distance < 0):
            raise ModelError("distance must be >= 0")
        if np.any(self.conversion < 0):
            raise ModelError("conversion must be >= 0")
        if len(self.dc_bus) != self.n_dc:
            raise ModelError("dc_bus needs one entry per data center")
        if self.latency_loss_cap < 0:
            raise ModelError("latency_loss_cap must be >= 0")
        if self.alloc_reg <= 0 or self.shift_reg <= 0:
            raise ModelError("alloc_reg and shift_reg must be > 0")
        nnz = np.count_nonzero(self.conversion, axis=0)
        if np.any(nnz != 1):
            warnings.warn("conversion has columns without exactly one nonzero; each data center should sit at one bus",
                          stacklevel=3)

    def with_cap(self, alpha):
        return NetDCModel(self.n_dc, self.n_users, self.distance, self.conversion, self.dc_bus, alpha,
                          self.alloc_reg, self.shift_reg, self.dc_names)


@dataclass(frozen=True, eq=False)
class SpaceTimeTopology:
    n_dc: int
    horizon: int
    incidence: np.ndarray

    @property
    def k(self):
        return self.incidence.shape[1]

    @property
    def n_spatial(self):
        return self.n_dc * (self.n_dc - 1) // 2 * self.horizon

    def link_labels(self):
        """Readable names: ``h<t>:<i>-<j>`` (spatial) and ``dc<i>:<t>-<t+1>`` (temporal), 1-based."""
        out = []
        for t in range(self.horizon):
            for i in range(self.n_dc):
                for j in range(i + 1, self.n_dc):
                    out.append(f"h{t + 1}:{i + 1}-{j + 1}")
        for i in range(self.n_dc):
            for t in range(self.horizon - 1):
                out.append(f"dc{i + 1}:{t + 1}-{t + 2}")
        return out


@dataclass(frozen=True, eq=False)
class ScenarioRecord:
    """One operating snapshot.  Hourly arrays have shape (hours, ·)."""

    loads: np.ndarray
    renewables: np.ndarray
    compute_demand: np.ndarray
    features: np.ndarray = None
    day_ahead_dispatch: np.ndarray = None
    commitment: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        d = np.atleast_2d(np.array(self.loads, dtype=float))
        w = np.atleast_2d(np.array(self.renewables, dtype=float))
        dl = np.atleast_2d(np.array(self.compute_demand, dtype=float))
        if d.shape != w.shape or d.shape[0] != dl.shape[0]:
            raise ModelError("loads/renewables/compute_demand disagree in shape")
        for a, nm in ((d, "loads"), (w, "renewables"), (dl, "compute_demand")):
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ModelError(f"{nm} must be finite and >= 0")
            a.setflags(write=False)
        object.__setattr__(self, "loads", d)
        object.__setattr__(self, "renewables", w)
        object.__setattr__(self, "compute_demand", dl)
        for nm in ("features", "day_ahead_dispatch", "commitment"):
            v = getattr(self, nm)
            if v is not None:
                v = np.array(v, dtype=float).reshape(-1)
                v.setflags(write=False)
                object.__setattr__(self, nm, v)

    @property
    def horizon(self):
        return self.loads.shape[0]

    def hour(self, t):
        """Single-period record for hour ``t`` (features and dispatch kept)."""
        return ScenarioRecord(self.loads[t:t + 1], self.renewables[t:t + 1], self.compute_demand[t:t + 1],
                              self.features, self.day_ahead_dispatch, self.commitment, self.name)

    def replace(self, **kw):
        vals = dict(loads=self.loads, renewables=self.renewables, compute_demand=self.compute_demand,
                    features=self.features, day_ahead_dispatch=self.day_ahead_dispatch,
                    commitment=self.commitment, name=self.name)
        vals.update(kw)
        return ScenarioRecord(**vals)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature segments; the default matches an 11-zone, 12-line system."""

    segments: tuple = (("d", 11), ("lam", 11), ("r", 11), ("f", 12))

    @classmethod
    def for_grid(cls, n_zones, n_lines):
        return cls((("d", n_zones), ("lam", n_zones), ("r", n_zones), ("f", n_lines)))

    @property
    def size(self):
        return sum(s for _, s in self.segments)

    def names(self):
        return [f"{nm}_{i + 1}" for nm, s in self.segments for i in range(s)]

    def digest(self):
        text = ";".join(f"{nm}:{s}" for nm, s in self.segments)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PolicySpec:
    """Affine shift policy phi(x) = beta0 + beta1 @ standardized(x)."""

    intercept: np.ndarray
    weights: np.ndarray
    l1_budget: float
    feature_mean: np.ndarray = None
    feature_scale: np.ndarray = None
    l1_includes_intercept: bool = True
    schema: FeatureSchema = field(default_factory=FeatureSchema)

    def __post_init__(self):
        b0 = np.array(self.intercept, dtype=float).reshape(-1)
        b1 = np.array(self.weights, dtype=float)
        if b1.ndim != 2 or b1.shape[0] != b0.shape[0]:
            raise ModelError("weights must be a (k, n_features) matrix matching the intercept")
        if self.l1_budget < 0:
            raise ModelError("l1_budget must be >= 0")
        f = b1.shape[1]
        mu = np.zeros(f) if self.feature_mean is None else np.array(self.feature_mean, dtype=float).reshape(-1)
        sd = np.ones(f) if self.feature_scale is None else np.array(self.feature_scale, dtype=float).reshape(-1)
        if mu.shape != (f,) or sd.shape != (f,) or np.any(sd <= 0):
            raise ModelError("standardization constants must match the feature count; scales > 0")
        for nm, v in (("intercept", b0), ("weights", b1), ("feature_mean", mu), ("feature_scale", sd)):
            v.setflags(write=False)
            object.__setattr__(self, nm, v)
        object.__setattr__(self, "l1_budget", float(self.l1_budget))

    @property
    def k(self):
        return self.intercept.shape[0]

    @property
    def n_features(self):
        return self.weights.shape[1]

    def l1_norm(self):
        v = float(np.sum(np.abs(self.weights)))
        if self.l1_includes_intercept:
            v += float(np.sum(np.abs(self.intercept)))
        return v

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.feature_mean) / self.feature_scale

    def predict(self, x):
        return self.intercept + self.weights @ self.standardize(x)

    def active_features(self, tol=1e-7):
        return np.flatnonzero(np.any(np.abs(self.weights) > tol, axis=0))

    @classmethod
    def zero(cls, k, n_features, l1_budget=0.0, schema=None):
        return cls(np.zeros(k), np.zeros((k, n_features)), l1_budget,
                   schema=schema if schema is not None else FeatureSchema(((("x", n_features)),)))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------
def build_incidence(n, tau):
    """Space-time incidence matrix: spatial links hour by hour, then temporal links per DC."""
    n, tau = int(n), int(tau)
    if n < 1 or tau < 1:
        raise ModelError("n and tau must be >= 1")
    A = np.ascontiguousarray(kernels.incidence(n, tau))
    A.setflags(write=False)
    return SpaceTimeTopology(n, tau, A)


def latency(W, G):
    W = np.asarray(W, dtype=float)
    G = np.asarray(G, dtype=float)
    if W.shape != G.shape:
        raise ModelError(f"latency: shape mismatch {W.shape} vs {G.shape}")
    return float(np.sum(G * W))


def apply_shift(topology, phi, theta):
    """New data-center loading theta + A phi (stacked hour by hour)."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    A = topology.incidence
    if phi.shape[0] != A.shape[1] or theta.shape[0] != A.shape[0]:
        raise ModelError("apply_shift: shape mismatch")
    return theta + A @ phi


def features_assemble(raw, schema=None):
    """Concatenate feature segments in schema order.

    ``raw`` maps segment name (``d``, ``lam``, ``r``, ``f``) to a vector.
    """
    schema = schema or FeatureSchema()
    parts = []
    for nm, size in schema.segments:
        if nm not in raw or raw[nm] is None:
            raise ModelError(f"features_assemble: missing segment '{nm}'")
        v = np.asarray(raw[nm], dtype=float).reshape(-1)
        if v.shape[0] != size:
            raise ModelError(f"features_assemble: segment '{nm}' has length {v.shape[0]}, expected {size}")
        parts.append(v)
    return np.concatenate(parts) if parts else np.zeros(0)


def features_split(x, schema=None):
    """Inverse of :func:`features_assemble`."""
    schema = schema or FeatureSchema()
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != schema.size:
        raise ModelError(f"feature vector has length {x.shape[0]}, schema expects {schema.size}")
    out, pos = {}, 0
    for nm, size in schema.segments:
        out[nm] = x[pos:pos + size].copy()
        pos += size
    return out
