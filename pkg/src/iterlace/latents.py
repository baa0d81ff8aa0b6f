"""Latent model components: graphs, hyperparameters, precision builders.

Every latent component owns a precision matrix in one or two
hyperparameters, a prior mean (almost always zero), optional linear
constraints, and a default mapper from data rows to its latent vector.
Hyperparameters live on an internal (unconstrained) scale during
optimisation; the transform objects convert to the natural scale.

Intrinsic components (rw1, besag, the spatial half of bym) are handled
by adding a tiny ridge to the singular precision and conditioning on
sum-to-zero over each connected component, which makes every density
the engine touches proper while leaving the within-constraint
distribution essentially untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import special

from .mappers import ConstMapper, FactorMapper, IndexMapper, LinearMapper, Mapper, MapperError
from .sparse import SparseSym

__all__ = [
    "Graph",
    "read_graph",
    "LogTransform",
    "IdentityTransform",
    "LogitPm1Transform",
    "LogGammaPrior",
    "GaussianPrior",
    "HyperParam",
    "LatentModel",
    "IidModel",
    "FixedEffectsModel",
    "Ar1Model",
    "Rw1Model",
    "BesagModel",
    "BymModel",
    "BymIndexMapper",
    "INTRINSIC_RIDGE",
]

#: relative ridge added to singular (intrinsic) precisions
INTRINSIC_RIDGE = 1e-8


# --- graphs --------------------------------------------------------------

@dataclass(frozen=True)
class Graph:
    """Undirected graph on nodes 1..n, stored as 0-based edge pairs."""

    n: int
    edges: tuple

    def __post_init__(self):
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i + 1}, {j + 1}) out of range 1..{self.n}")
            if i == j:
                raise ValueError(f"self-loop at node {i + 1}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge ({key[0] + 1}, {key[1] + 1})")
            seen.add(key)

    def degrees(self):
        deg = np.zeros(self.n, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def components(self):
        """Connected components as a list of sorted node-index arrays."""
        adj = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = np.zeros(self.n, dtype=bool)
        out = []
        for start in range(self.n):
            if seen[start]:
                continue
            stack, members = [start], []
            seen[start] = True
            while stack:
                node = stack.pop()
                members.append(node)
                for nb in adj[node]:
                    if not seen[nb]:
                        seen[nb] = True
                        stack.append(nb)
            out.append(np.array(sorted(members)))
        return out

    def structure(self):
        """The combinatorial Laplacian deg(i) on the diagonal, -1 per edge."""
        rows, cols, vals = [], [], []
        deg = self.degrees()
        for i in range(self.n):
            rows.append(i)
            cols.append(i)
            vals.append(float(deg[i]))
        for i, j in self.edges:
            rows.extend((i, j))
            cols.extend((j, i))
            vals.extend((-1.0, -1.0))
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.n, self.n))


def read_graph(path):
    """Read a graph file: header line ``n <count>``, then 1-based edges."""
    edges = []
    n = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if n is None:
                if len(parts) != 2 or parts[0] != "n":
                    raise ValueError(
                        f"{path}:{lineno}: expected header 'n <count>', got {line!r}"
                    )
                n = int(parts[1])
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'i j', got {line!r}")
            i, j = int(parts[0]), int(parts[1])
            edges.append((i - 1, j - 1))
    if n is None:
        raise ValueError(f"{path}: empty graph file")
    return Graph(n=n, edges=tuple(edges))


# --- hyperparameter scales and priors ------------------------------------

class LogTransform:
    """internal = log(natural); for positive parameters (precisions)."""

    name = "log"

    def to_internal(self, x):
        return np.log(x)

    def to_natural(self, x):
        return np.exp(x)


class IdentityTransform:
    name = "identity"

    def to_internal(self, x):
        return float(x)

    def to_natural(self, x):
        return float(x)


class LogitPm1Transform:
    """internal = log((1+r)/(1-r)) for parameters on (-1, 1)."""

    name = "logit_pm1"

    def to_internal(self, r):
        return 2.0 * np.arctanh(r)

    def to_natural(self, x):
        return np.tanh(x / 2.0)


class LogGammaPrior:
    """Prior for internal x = log(t) when t is Gamma(a, b) distributed."""

    name = "log_gamma"

    def __init__(self, a=1.0, b=5e-5):
        if not (a > 0 and b > 0):
            raise ValueError("log_gamma parameters must be positive")
        self.a = float(a)
        self.b = float(b)

    def logpdf(self, x):
        return (
            self.a * np.log(self.b)
            - special.gammaln(self.a)
            + self.a * x
            - self.b * np.exp(x)
        )

    def params(self):
        return {"a": self.a, "b": self.b}

    def sample(self, rng):
        return float(np.log(rng.gamma(self.a, 1.0 / self.b)))


class GaussianPrior:
    """Gaussian prior on the internal scale, parameterised by precision."""

    name = "gaussian"

    def __init__(self, mean=0.0, prec=1.0):
        if not prec > 0:
            raise ValueError("gaussian prior precision must be positive")
        self.mean = float(mean)
        self.prec = float(prec)

    def logpdf(self, x):
        d = x - self.mean
        return 0.5 * np.log(self.prec / (2.0 * np.pi)) - 0.5 * self.prec * d * d

    def params(self):
        return {"mean": self.mean, "prec": self.prec}

    def sample(self, rng):
        return float(rng.normal(self.mean, 1.0 / np.sqrt(self.prec)))


@dataclass
class HyperParam:
    """One hyperparameter: its scale transform, prior, and initial value."""

    name: str
    transform: object
    prior: object
    initial: float  # natural scale
    fixed: bool = False

    def initial_internal(self):
        return self.transform.to_internal(self.initial)


def _precision_hyper(name="prec", initial=1.0, prior=None, fixed=False):
    return HyperParam(
        name=name,
        transform=LogTransform(),
        prior=prior if prior is not None else LogGammaPrior(1.0, 5e-5),
        initial=initial,
        fixed=fixed,
    )


# --- latent models --------------------------------------------------------

class LatentModel:
    """Base class; subclasses define dimension, hypers, precision, mapper."""

    is_intrinsic = False

    def n_latent(self):
        raise NotImplementedError

    def hypers(self):
        return []

    def precision(self, values):
        """SparseSym precision for natural-scale hyper values {name: value}."""
        raise NotImplementedError

    def constraints(self):
        """Dense (k, n) constraint matrix Cu = 0, or None."""
        return None

    def prior_mean(self):
        return np.zeros(self.n_latent())

    def default_mapper(self):
        raise NotImplementedError

    def default_input(self, n_rows):
        """The input the default mapper uses when none is given."""
        raise MapperError(f"{type(self).__name__} needs an explicit input column")


class IidModel(LatentModel):
    """Independent effects with a common precision."""

    def __init__(self, n, prec_hyper=None):
        self.n = int(n)
        self._hyper = prec_hyper if prec_hyper is not None else _precision_hyper()

    def n_latent(self):
        return self.n

    def hypers(self):
        return [] if self._hyper.fixed else [self._hyper]

    def precision(self, values):
        tau = values["prec"] if not self._hyper.fixed else self._hyper.initial
        return SparseSym(sp.eye(self.n, format="csc") * tau)

    def default_mapper(self):
        return IndexMapper(self.n)


class FixedEffectsModel(LatentModel):
    """Fixed effects: diagonal precision held constant (no hypers).

    Covers single coefficients (``linear``), intercepts (``constant``,
    a coefficient on an all-ones column) and factor effects.
    """

    def __init__(self, n=1, mean=0.0, prec=0.001, mapper=None):
        self.n = int(n)
        self.mean = float(mean)
        self.prec = float(prec)
        if not self.prec > 0:
            raise ValueError("fixed-effect precision must be positive")
        self._mapper = mapper if mapper is not None else LinearMapper()

    def n_latent(self):
        return self.n

    def precision(self, values):
        return SparseSym(sp.eye(self.n, format="csc") * self.prec)

    def prior_mean(self):
        return np.full(self.n, self.mean)

    def default_mapper(self):
        return self._mapper

    @classmethod
    def linear(cls, mean=0.0, prec=0.001):
        return cls(n=1, mean=mean, prec=prec, mapper=LinearMapper())

    @classmethod
    def constant(cls, mean=0.0, prec=0.001):
        m = cls(n=1, mean=mean, prec=prec, mapper=LinearMapper())
        m._constant = True
        return m

    @classmethod
    def factor(cls, levels, coding="full", mean=0.0, prec=0.001):
        mapper = FactorMapper(levels, coding=coding)
        return cls(n=mapper.n_latent(), mean=mean, prec=prec, mapper=mapper)

    def default_input(self, n_rows):
        if getattr(self, "_constant", False):
            return np.ones(n_rows)
        return super().default_input(n_rows)


class Ar1Model(LatentModel):
    """Stationary first-order autoregression.

    ``prec`` is the marginal precision: the implied covariance is
    rho^|i-j| / prec.  ``rho`` lives on (-1, 1) and is optimised through
    the log((1+r)/(1-r)) transform.
    """

    def __init__(self, n, prec_hyper=None, rho_hyper=None):
        self.n = int(n)
        if self.n < 1:
            raise ValueError("ar1 needs n >= 1")
        self._prec = prec_hyper if prec_hyper is not None else _precision_hyper()
        self._rho = (
            rho_hyper
            if rho_hyper is not None
            else HyperParam(
                name="rho",
                transform=LogitPm1Transform(),
                prior=GaussianPrior(0.0, 0.15),
                initial=0.0,
            )
        )

    def n_latent(self):
        return self.n

    def hypers(self):
        return [h for h in (self._prec, self._rho) if not h.fixed]

    def precision(self, values):
        tau = values["prec"] if not self._prec.fixed else self._prec.initial
        rho = values["rho"] if not self._rho.fixed else self._rho.initial
        n = self.n
        if n == 1:
            return SparseSym(sp.csc_matrix(np.array([[tau]])))
        scale = tau / (1.0 - rho * rho)
        diag = np.full(n, 1.0 + rho * rho)
        diag[0] = diag[-1] = 1.0
        off = np.full(n - 1, -rho)
        q = sp.diags([off, diag, off], offsets=(-1, 0, 1), format="csc") * scale
        return SparseSym(q)

    def default_mapper(self):
        return IndexMapper(self.n)


class Rw1Model(LatentModel):
    """First-order random walk (intrinsic; sum-to-zero constrained)."""

    is_intrinsic = True

    def __init__(self, n, prec_hyper=None):
        self.n = int(n)
        if self.n < 2:
            raise ValueError("rw1 needs n >= 2")
        self._hyper = prec_hyper if prec_hyper is not None else _precision_hyper()

    def n_latent(self):
        return self.n

    def hypers(self):
        return [] if self._hyper.fixed else [self._hyper]

    def precision(self, values):
        tau = values["prec"] if not self._hyper.fixed else self._hyper.initial
        n = self.n
        diag = np.full(n, 2.0)
        diag[0] = diag[-1] = 1.0
        q = sp.diags([-np.ones(n - 1), diag, -np.ones(n - 1)], (-1, 0, 1), format="csc")
        q = q * tau
        ridge = INTRINSIC_RIDGE * q.diagonal().mean()
        return SparseSym(q + ridge * sp.eye(n, format="csc"))

    def constraints(self):
        return np.ones((1, self.n))

    def default_mapper(self):
        return IndexMapper(self.n)


class BesagModel(LatentModel):
    """Intrinsic CAR on a graph; sum-to-zero over each component."""

    is_intrinsic = True

    def __init__(self, graph, prec_hyper=None):
        self.graph = graph
        self._hyper = prec_hyper if prec_hyper is not None else _precision_hyper()

    def n_latent(self):
        return self.graph.n

    def hypers(self):
        return [] if self._hyper.fixed else [self._hyper]

    def precision(self, values):
        tau = values["prec"] if not self._hyper.fixed else self._hyper.initial
        q = self.graph.structure() * tau
        ridge = INTRINSIC_RIDGE * q.diagonal().mean()
        return SparseSym(q + ridge * sp.eye(self.graph.n, format="csc"))

    def constraints(self):
        comps = self.graph.components()
        c = np.zeros((len(comps), self.graph.n))
        for k, members in enumerate(comps):
            c[k, members] = 1.0
        return c

    def default_mapper(self):
        return IndexMapper(self.graph.n)


class BymIndexMapper(Mapper):
    """Index into a (structured, unstructured) pair and sum the halves."""

    is_linear = True

    def __init__(self, n):
        self.n = int(n)

    def n_latent(self):
        return 2 * self.n

    def n_output(self, inp):
        return len(np.asarray(inp))

    def eval(self, inp, state):
        state = self._check_state(state)
        idx = np.asarray(inp, dtype=np.int64)
        if idx.size and (idx.min() < 1 or idx.max() > self.n):
            raise MapperError(f"index out of range: values must lie in 1..{self.n}")
        return state[idx - 1] + state[self.n + idx - 1]

    def jacobian(self, inp, state):
        idx = np.asarray(inp, dtype=np.int64)
        rows = np.repeat(np.arange(idx.size), 2)
        cols = np.column_stack([idx - 1, self.n + idx - 1]).ravel()
        return sp.csr_matrix(
            (np.ones(2 * idx.size), (rows, cols)), shape=(idx.size, 2 * self.n)
        )

    def slice_rows(self, inp, rows):
        return np.asarray(inp)[rows]


class BymModel(LatentModel):
    """Structured-plus-unstructured areal effect.

    The latent vector stacks a Besag part u (first n entries) and an
    iid part v (last n); the observed effect at area i is u_i + v_i.
    Sum-to-zero applies to the structured half only.
    """

    is_intrinsic = True

    def __init__(self, graph, prec_spatial_hyper=None, prec_iid_hyper=None):
        self.graph = graph
        self._prec_u = (
            prec_spatial_hyper
            if prec_spatial_hyper is not None
            else _precision_hyper(name="prec_spatial")
        )
        self._prec_v = (
            prec_iid_hyper
            if prec_iid_hyper is not None
            else _precision_hyper(name="prec_iid")
        )

    def n_latent(self):
        return 2 * self.graph.n

    def hypers(self):
        return [h for h in (self._prec_u, self._prec_v) if not h.fixed]

    def precision(self, values):
        tau_u = (
            values["prec_spatial"] if not self._prec_u.fixed else self._prec_u.initial
        )
        tau_v = values["prec_iid"] if not self._prec_v.fixed else self._prec_v.initial
        n = self.graph.n
        qu = self.graph.structure() * tau_u
        ridge = INTRINSIC_RIDGE * qu.diagonal().mean()
        qu = qu + ridge * sp.eye(n, format="csc")
        qv = sp.eye(n, format="csc") * tau_v
        return SparseSym(sp.block_diag([qu, qv], format="csc"))

    def constraints(self):
        comps = self.graph.components()
        c = np.zeros((len(comps), 2 * self.graph.n))
        for k, members in enumerate(comps):
            c[k, members] = 1.0  # structured half only
        return c

    def default_mapper(self):
        return BymIndexMapper(self.graph.n)
