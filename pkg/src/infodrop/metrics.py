"""Information-theoretic reference computations, all in nats.

These are deliberately independent of the training code: Monte-Carlo KL
uses scipy's log-normal densities, the discrete quantities are exact sums
over probability tables, and the Gaussian total correlation works from a
covariance matrix.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateBatchError, DomainError, InfoDropError, QueryError
from .layers import HALF_LOG_2PI_E, PriorSpec
from .tensor import Rng


# ---------------------------------------------------------------- Monte-Carlo KL


@dataclass(frozen=True)
class LogNormal:
    mean: float
    std: float


@dataclass(frozen=True)
class LogUniform:
    """Improper density c / z; KL estimates against it are defined up to log c."""

    log_c: float = 0.0


def mc_kl_estimate(p: LogNormal, q: LogNormal | LogUniform, n: int, rng: Rng) -> tuple[float, float]:
    """Monte-Carlo KL(p || q) with its standard error.

    Samples z ~ p and averages log p(z) - log q(z), evaluating both as
    densities over z (not log z).
    """
    if p.std <= 0:
        raise DomainError(f"log-normal scale must be positive, got {p.std}")
    if n < 1000:
        raise ValueError("use at least 1000 samples")
    z = np.exp(p.mean + p.std * rng.normal((n,)))
    log_p = stats.lognorm.logpdf(z, s=p.std, scale=math.exp(p.mean))
    if isinstance(q, LogNormal):
        if q.std <= 0:
            raise DomainError(f"log-normal scale must be positive, got {q.std}")
        log_q = stats.lognorm.logpdf(z, s=q.std, scale=math.exp(q.mean))
    else:
        log_q = q.log_c - np.log(z)
    d = log_p - log_q
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n))


# ---------------------------------------------------------------- Gaussian TC


@dataclass
class CovarianceSummary:
    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"covariance must be square, got {s.shape}")
        if not np.allclose(s, s.T, atol=1e-12 * max(1.0, np.abs(s).max())):
            raise ValueError("covariance must be symmetric")
        self.sigma = 0.5 * (s + s.T)

    @property
    def sigma0(self) -> np.ndarray:
        return np.diag(self.sigma).copy()

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "CovarianceSummary":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need an [n >= 2, d] sample matrix")
        return cls(np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]))


def _logdet_psd(sigma: np.ndarray) -> float:
    jitter = 0.0
    eye = np.eye(sigma.shape[0])
    for jitter in (0.0, 1e-12, 1e-11, 1e-10, 1e-9):
        try:
            chol = np.linalg.cholesky(sigma + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return 2.0 * float(np.log(np.diag(chol)).sum())
    raise InfoDropError("covariance is not positive semidefinite even after 1e-9 jitter")


def gaussian_total_correlation(cov: CovarianceSummary, unscaled: bool = False) -> float:
    """Total correlation of a Gaussian with covariance ``cov.sigma``.

    Returns 0.5 * (sum_i log sigma_ii - log det sigma).  ``unscaled=True``
    drops the 0.5, giving -log det(diag(sigma)^-1 sigma).
    """
    d0 = cov.sigma0
    if np.any(d0 <= 0):
        raise InfoDropError("zero-variance coordinate: total correlation undefined")
    tc = float(np.log(d0).sum()) - _logdet_psd(cov.sigma)
    tc = max(tc, 0.0) if tc > -1e-12 else tc
    return tc if unscaled else 0.5 * tc


def gaussian_entropy(sigma: np.ndarray) -> float:
    sigma = np.atleast_2d(sigma)
    d = sigma.shape[0]
    return 0.5 * d * math.log(2 * math.pi * math.e) + 0.5 * _logdet_psd(sigma)


# ---------------------------------------------------------------- discrete tables


class DiscreteJoint:
    """Joint pmf over named finite variables, one array axis per variable."""

    def __init__(self, names: Sequence[str], pmf: np.ndarray, atol: float = 1e-12):
        pmf = np.asarray(pmf, dtype=np.float64)
        names = list(names)
        if pmf.ndim != len(names):
            raise ValueError(f"{len(names)} names for a {pmf.ndim}-d table")
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        if np.any(pmf < 0):
            raise ValueError("pmf entries must be nonnegative")
        if abs(pmf.sum() - 1.0) > atol:
            raise ValueError(f"pmf sums to {pmf.sum()!r}, not 1")
        self.names = names
        self.pmf = pmf

    @property
    def cardinalities(self) -> dict[str, int]:
        return dict(zip(self.names, self.pmf.shape))

    def _axes(self, variables: Sequence[str]) -> list[int]:
        if isinstance(variables, str):
            variables = [variables]
        axes = []
        for v in variables:
            if v not in self.names:
                raise QueryError(f"unknown variable {v!r}")
            axes.append(self.names.index(v))
        return axes

    def marginal(self, variables: Sequence[str]) -> np.ndarray:
        axes = self._axes(variables)
        drop = tuple(i for i in range(self.pmf.ndim) if i not in axes)
        m = self.pmf.sum(axis=drop)
        kept = sorted(axes)
        return np.moveaxis(m, [kept.index(a) for a in axes], range(len(axes)))

    def entropy(self, variables: Sequence[str]) -> float:
        return entropy_of(self.marginal(variables))

    def mutual_information(self, s: Sequence[str], t: Sequence[str]) -> float:
        s, t = _as_list(s), _as_list(t)
        return self.entropy(s) + self.entropy(t) - self.entropy(s + t)

    def total_correlation(self, variables: Sequence[str]) -> float:
        variables = _as_list(variables)
        return sum(self.entropy([v]) for v in variables) - self.entropy(variables)

    def conditional_entropy(self, s: Sequence[str], given: Sequence[str]) -> float:
        s, given = _as_list(s), _as_list(given)
        return self.entropy(s + given) - self.entropy(given)


def _as_list(v) -> list[str]:
    return [v] if isinstance(v, str) else list(v)


def entropy_of(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def discrete_info(joint: DiscreteJoint, query: str, s: Sequence[str], t: Sequence[str] | None = None) -> float:
    """Dispatch ``entropy`` / ``mutual_information`` / ``total_correlation``."""
    if query == "entropy":
        return joint.entropy(s)
    if query == "mutual_information":
        if t is None:
            raise QueryError("mutual_information needs a second variable set")
        return joint.mutual_information(s, t)
    if query == "total_correlation":
        return joint.total_correlation(s)
    raise QueryError(f"unknown query {query!r}")


# ---------------------------------------------------------------- factorized prior


def joint_from_channel(cond: np.ndarray, px: np.ndarray) -> DiscreteJoint:
    """Joint table over (x, z1, ..., zn) from p(z|x) [|x|, k1, ..., kn] and p(x)."""
    cond = np.asarray(cond, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    pmf = px.reshape((-1,) + (1,) * (cond.ndim - 1)) * cond
    names = ["x"] + [f"z{i + 1}" for i in range(cond.ndim - 1)]
    return DiscreteJoint(names, pmf, atol=1e-10)


def expected_kl_to_product(cond: np.ndarray, px: np.ndarray, q: Sequence[np.ndarray]) -> float:
    """E_x KL(p(z|x) || prod_i q_i(z_i)) by brute-force summation over the table."""
    cond = np.asarray(cond, dtype=np.float64)
    n = cond.ndim - 1
    if len(q) != n:
        raise ValueError(f"need {n} factor marginals, got {len(q)}")
    total = 0.0
    for xi, p_x in enumerate(px):
        if p_x == 0:
            continue
        for idx in itertools.product(*(range(k) for k in cond.shape[1:])):
            pz = cond[(xi,) + idx]
            if pz == 0:
                continue
            log_q = sum(math.log(q[i][idx[i]]) if q[i][idx[i]] > 0 else -math.inf for i in range(n))
            total += p_x * pz * (math.log(pz) - log_q)
    return total


def _newton_factor(target_grad, k: int, theta0: np.ndarray, iters: int = 100) -> np.ndarray:
    """Minimize -sum_k p_k log softmax(theta)_k by Newton steps in logit space.

    ``target_grad(q)`` returns the gradient w.r.t. the logits; theta[0] is
    pinned to 0 to remove the softmax gauge.
    """
    theta = theta0.astype(np.float64).copy()
    theta -= theta[0]
    for _ in range(iters):
        q = np.exp(theta - theta.max())
        q /= q.sum()
        g = target_grad(q)[1:]
        if np.abs(g).max() < 1e-15:
            break
        h = (np.diag(q) - np.outer(q, q))[1:, 1:]
        step = np.linalg.solve(h, g)
        # damp steps far from the optimum
        scale = min(1.0, 2.0 / max(np.abs(step).max(), 1e-300))
        theta[1:] -= scale * step
    q = np.exp(theta - theta.max())
    return q / q.sum()


def factorized_prior_objective(cond: np.ndarray, px: np.ndarray, q: Sequence[np.ndarray] | None = None,
                               method: str = "closed_form", rng: Rng | None = None):
    """min over factorized priors of E_x KL(p(z|x) || prod_i q_i).

    With ``q`` given, just evaluates the objective.  Otherwise optimizes it,
    either in closed form (the marginals of p(z)) or iteratively with Newton
    steps from a random start, using gradients summed over the full table.
    Returns ``(value, q)``.
    """
    cond = np.asarray(cond, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    if q is not None:
        return expected_kl_to_product(cond, px, q), [np.asarray(v, dtype=np.float64) for v in q]
    joint = joint_from_channel(cond, px)
    n = cond.ndim - 1
    if method == "closed_form":
        q_opt = [joint.marginal([f"z{i + 1}"]) for i in range(n)]
    elif method == "iterative":
        rng = rng or Rng(0)
        q_opt = []
        for i in range(n):
            k = cond.shape[1 + i]
            axis_others = tuple(a for a in range(1, cond.ndim) if a != 1 + i)

            def grad(qi, i=i, axis_others=axis_others):
                # d/dtheta of E_x sum_z p(z|x) [-log q_i(z_i)] = q_i - (mass on each z_i)
                mass = np.zeros(k)
                for xi, p_x in enumerate(px):
                    slab = cond[xi].sum(axis=tuple(a - 1 for a in axis_others)) if axis_others else cond[xi]
                    mass += p_x * slab
                return qi - mass

            q_opt.append(_newton_factor(grad, k, rng.normal((k,))))
    else:
        raise ValueError(f"unknown method {method!r}")
    return expected_kl_to_product(cond, px, q_opt), q_opt


# ---------------------------------------------------------------- binary IB search


def binary_entropy(p: float | np.ndarray):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log1p(-p), 0.0))
    return float(h) if h.ndim == 0 else h


def noisy_bit_joint(p_noise: float, channel: np.ndarray) -> DiscreteJoint:
    """Joint over (y, x, z): fair bit y, x = y flipped w.p. p_noise, z ~ channel[x]."""
    py = np.array([0.5, 0.5])
    px_y = np.array([[1 - p_noise, p_noise], [p_noise, 1 - p_noise]])
    pmf = py[:, None, None] * px_y[:, :, None] * np.asarray(channel, dtype=np.float64)[None, :, :]
    return DiscreteJoint(["y", "x", "z"], pmf, atol=1e-12)


def ib_lagrangian(joint: DiscreteJoint, beta: float) -> float:
    """H(y|z) + beta * I(x;z)."""
    return joint.conditional_entropy(["y"], ["z"]) + beta * joint.mutual_information(["x"], ["z"])


DETERMINISTIC_MAPS = {
    "identity": np.array([[1.0, 0.0], [0.0, 1.0]]),
    "flip": np.array([[0.0, 1.0], [1.0, 0.0]]),
    "const0": np.array([[1.0, 0.0], [1.0, 0.0]]),
    "const1": np.array([[0.0, 1.0], [0.0, 1.0]]),
}


def _grid_lagrangian(p_noise: float, beta: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IB Lagrangian for channels p(z=1|x=0)=a, p(z=1|x=1)=b."""
    # p(z=1|y) for y = 0, 1
    pz1_y0 = (1 - p_noise) * a + p_noise * b
    pz1_y1 = p_noise * a + (1 - p_noise) * b
    pz1 = 0.5 * (pz1_y0 + pz1_y1)
    h_y_given_z = _h2(0.5 * pz1_y0, 0.5 * pz1_y1, pz1) + _h2(0.5 * (1 - pz1_y0), 0.5 * (1 - pz1_y1), 1 - pz1)
    i_xz = binary_entropy(pz1) - 0.5 * (binary_entropy(a) + binary_entropy(b))
    return h_y_given_z + beta * i_xz


def _h2(p_y0_z, p_y1_z, p_z):
    # -sum_y p(y, z) log p(y | z) for one value of z
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(p_y0_z > 0, p_y0_z * np.log(np.where(p_y0_z > 0, p_y0_z, 1) / np.where(p_z > 0, p_z, 1)), 0.0)
        t1 = np.where(p_y1_z > 0, p_y1_z * np.log(np.where(p_y1_z > 0, p_y1_z, 1) / np.where(p_z > 0, p_z, 1)), 0.0)
    return -(t0 + t1)


def discrete_ib_search(p_noise: float, beta: float, grid_step: float = 0.005) -> dict:
    """Best deterministic and best stochastic binary representation of a noisy bit.

    Deterministic maps are scored exactly through :class:`DiscreteJoint`;
    stochastic channels p(z|x) are scanned on a square grid.
    """
    if not 0 < p_noise < 0.5:
        raise ValueError("p_noise must lie in (0, 1/2)")
    if grid_step > 0.05:
        raise ValueError("grid_step must be <= 0.05")
    det = {name: ib_lagrangian(noisy_bit_joint(p_noise, ch), beta) for name, ch in DETERMINISTIC_MAPS.items()}
    best_det = min(det, key=det.get)
    n = int(round(1.0 / grid_step))
    grid = np.linspace(0.0, 1.0, n + 1)
    a, b = np.meshgrid(grid, grid, indexing="ij")
    vals = _grid_lagrangian(p_noise, beta, a, b)
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    channel = np.array([[1 - grid[i], grid[i]], [1 - grid[j], grid[j]]])
    return {
        "deterministic": det,
        "best_deterministic": (best_det, det[best_det]),
        "best_stochastic": (channel, ib_lagrangian(noisy_bit_joint(p_noise, channel), beta)),
    }


# ---------------------------------------------------------------- activation histograms


def log_activation_histogram(samples: np.ndarray, bins: int, prior: PriorSpec, z_eps: float = 1e-12) -> dict:
    """Histogram of log z against the prior's density of log z on the same bins.

    Zeros are excluded from the histogram and reported as ``atom_mass``.
    For the improper log-uniform prior the reference density is the
    constant c = exp(log_c).
    """
    if bins < 10:
        raise ValueError("use at least 10 bins")
    z = np.abs(np.asarray(samples, dtype=np.float64).ravel())
    zero = z <= z_eps
    if zero.all():
        raise DegenerateBatchError("all samples are zero")
    logs = np.log(z[~zero])
    lo, hi = logs.min(), logs.max()
    if hi - lo < 1e-12:
        # point mass: unit-width range with one bin centred on the value
        w = 1.0 / bins
        lo = lo - (bins // 2 + 0.5) * w
        hi = lo + bins * w
    density, edges = np.histogram(logs, bins=bins, range=(lo, hi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    if prior.kind == "log_normal":
        prior_density = stats.norm.pdf(centers, loc=prior.mu, scale=prior.sigma)
    else:
        prior_density = np.full_like(centers, math.exp(prior.log_c))
    n = z.size
    atom = zero.mean()
    return {
        "bin_center": centers,
        "empirical_density": density,
        "prior_density": prior_density,
        "atom_mass": float(atom),
        "atom_mass_se": float(math.sqrt(atom * (1 - atom) / n)),
    }


def relu_kl_constant(log_c: float = 0.0) -> float:
    return -HALF_LOG_2PI_E - log_c
