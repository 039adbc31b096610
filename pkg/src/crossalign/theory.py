"""Identifiability of styles as transformations of a shared content
distribution.

Two small worlds are covered:

* Gaussian mixtures pushed through affine styles x = A z + b + ε η.  With a
  single isotropic component a rotation is invisible in the marginal; with
  two components of different covariance any change of (A, b) shows up.
* Bigram matrices related by a word permutation, recovered either by
  exhaustive search (small n) or by matching vertices on their sorted
  incident-weight profiles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

MAX_BRUTE_FORCE = 9
DEFAULT_TOL = 1e-6
_CHUNK = 40320


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # K×d
    covs: np.ndarray  # K×d×d

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = covs
        K, d = self.means.shape
        if self.weights.shape != (K,) or self.covs.shape != (K, d, d):
            raise DimensionError(
                f"mixture shapes disagree: weights {self.weights.shape}, means {self.means.shape}, covs {self.covs.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError(f"mixture weights must be nonnegative and sum to 1, got {self.weights.sum()!r}")
        for k, c in enumerate(self.covs):
            if not np.allclose(c, c.T, rtol=0.0, atol=1e-12):
                raise ContractError(f"covariance {k} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise ContractError(f"covariance {k} is not positive definite") from None

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Covariance of the whole mixture (law of total covariance)."""
        mu = self.mean()
        diff = self.means - mu
        within = np.einsum("k,kij->ij", self.weights, self.covs)
        between = np.einsum("k,ki,kj->ij", self.weights, diff, diff)
        return within + between

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)


@dataclass
class AffineStyle:
    A: np.ndarray
    b: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.b.shape != (d,):
            raise DimensionError(f"style needs a square A and matching b, got {self.A.shape} and {self.b.shape}")
        if abs(np.linalg.det(self.A)) <= 1e-9:
            raise ParameterError("style matrix A is not invertible")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")

    def apply(self, z: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        x = z @ self.A.T + self.b
        if self.noise_std > 0:
            if rng is None:
                raise ContractError("noisy style needs an rng")
            x = x + self.noise_std * rng.standard_normal(x.shape)
        return x


def _validated_cov(c: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(c)
        return c
    except np.linalg.LinAlgError:
        pass
    c = 0.5 * (c + c.T)
    try:
        np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise ContractError("pushed-forward covariance is not positive definite") from None
    return c


def pushforward(mix: GaussianMixture, style: AffineStyle) -> GaussianMixture:
    """Mixture of x = A z + b + ε η for z drawn from ``mix``."""
    if style.A.shape[0] != mix.dim:
        raise DimensionError(f"style of dimension {style.A.shape[0]} applied to mixture of dimension {mix.dim}")
    A, d = style.A, mix.dim
    means = mix.means @ A.T + style.b
    noise = style.noise_std ** 2 * np.eye(d)
    covs = np.stack([_validated_cov(A @ c @ A.T + noise) for c in mix.covs])
    # symmetrize rounding noise so the result passes its own validation
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    return GaussianMixture(mix.weights.copy(), means, covs)


def distinguishable(mix: GaussianMixture, style1: AffineStyle, style2: AffineStyle,
                    tol: float = DEFAULT_TOL) -> bool:
    """Whether the two styles give different pushforward parameters.

    Components are compared in their original order; a pushforward that
    equals the other only after relabelling equal-weight components is
    reported as distinguishable.
    """
    p1, p2 = pushforward(mix, style1), pushforward(mix, style2)
    for k in range(mix.n_components):
        if np.linalg.norm(p1.means[k] - p2.means[k]) > tol:
            return True
        if np.linalg.norm(p1.covs[k] - p2.covs[k], ord="fro") > tol:
            return True
    return False


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def random_spd(d: int, rng: np.random.Generator, jitter: float = 0.1) -> np.ndarray:
    m = rng.standard_normal((d, d))
    return m @ m.T / d + jitter * np.eye(d)


def random_invertible(d: int, rng: np.random.Generator, min_det: float = 1e-3) -> np.ndarray:
    while True:
        a = rng.standard_normal((d, d))
        if abs(np.linalg.det(a)) > min_det:
            return a


# ------------------------------------------------------------ permutations


def _check_square_pair(m1: np.ndarray, m2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m1, m2 = np.asarray(m1, dtype=np.float64), np.asarray(m2, dtype=np.float64)
    if m1.ndim != 2 or m1.shape[0] != m1.shape[1] or m1.shape != m2.shape:
        raise ContractError(f"need two square matrices of equal size, got {m1.shape} and {m2.shape}")
    return m1, m2


def _check_permutation(p, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ContractError(f"not a permutation of 0..{n - 1}: {p.tolist()}")
    return p


def permuted(m: np.ndarray, p) -> np.ndarray:
    """Pᵀ M P for the permutation p, i.e. entry (i, j) is m[p[i], p[j]]."""
    m = np.asarray(m)
    p = _check_permutation(p, m.shape[0])
    return m[np.ix_(p, p)]


def permutation_objective(m1, m2, p) -> float:
    """Squared Frobenius distance between Pᵀ M1 P and M2."""
    m1, m2 = _check_square_pair(m1, m2)
    diff = permuted(m1, p) - m2
    return float(np.sum(diff * diff))


def brute_force_permutation(m1, m2) -> tuple[np.ndarray, float]:
    """Exhaustive minimiser of :func:`permutation_objective`.

    Permutations are scanned in lexicographic order and only a strictly
    smaller objective replaces the incumbent, so ties go to the
    lexicographically smallest permutation.
    """
    m1, m2 = _check_square_pair(m1, m2)
    n = m1.shape[0]
    if n > MAX_BRUTE_FORCE:
        raise ParameterError(f"brute force is limited to n <= {MAX_BRUTE_FORCE} ({math.factorial(MAX_BRUTE_FORCE)} "
                             f"permutations), got n={n}")
    best_p, best_v = np.arange(n), math.inf
    perms = itertools.permutations(range(n))
    while True:
        chunk = np.array(list(itertools.islice(perms, _CHUNK)), dtype=np.int64).reshape(-1, n)
        if chunk.shape[0] == 0:
            break
        mats = m1[chunk[:, :, None], chunk[:, None, :]]
        vals = ((mats - m2) ** 2).sum(axis=(1, 2))
        i = int(np.argmin(vals))
        if vals[i] < best_v:
            best_p, best_v = chunk[i].copy(), float(vals[i])
    return best_p, best_v


def weight_profiles(m) -> list[tuple[tuple[float, ...], tuple[float, ...]]]:
    """Per vertex: (sorted outgoing weights, sorted incoming weights)."""
    m = np.asarray(m, dtype=np.float64)
    rows, cols = np.sort(m, axis=1), np.sort(m.T, axis=1)
    return [(tuple(rows[i]), tuple(cols[i])) for i in range(m.shape[0])]


def has_unique_profiles(m) -> bool:
    prof = weight_profiles(m)
    return len(set(prof)) == len(prof)


def degree_set_match(m1, m2) -> np.ndarray:
    """Match vertices by sorted incident-weight profile.

    Both vertex sets are ordered by profile (ties keep index order) and
    paired by rank.  Exact when every profile is unique and M2 is a
    relabelling of M1; otherwise only a heuristic.
    """
    m1, m2 = _check_square_pair(m1, m2)
    prof1, prof2 = weight_profiles(m1), weight_profiles(m2)
    order1 = sorted(range(len(prof1)), key=lambda i: (prof1[i], i))
    order2 = sorted(range(len(prof2)), key=lambda i: (prof2[i], i))
    p = np.empty(len(prof1), dtype=np.int64)
    p[order2] = order1
    return p


def planted_instance(n: int, rng: np.random.Generator, concentration: float = 1.0
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random row-stochastic M1, a random permutation p and M2 = Pᵀ M1 P."""
    m1 = rng.dirichlet(np.full(n, concentration), size=n)
    p = rng.permutation(n)
    return m1, permuted(m1, p), p


# ------------------------------------------------------------------- demos


@dataclass
class DemoRow:
    name: str
    passed: int
    trials: int
    detail: str = ""

    def format(self) -> str:
        return f"{self.name:<34} {self.passed:>4}/{self.trials:<4} {self.detail}"


def rotation_demo(trials: int = 100, dim: int = 3, seed: int = 0) -> DemoRow:
    """Isotropic single Gaussian: orthogonal A against A = I is never detected."""
    rng = np.random.default_rng([seed, 11])
    mix = GaussianMixture([1.0], np.zeros((1, dim)), np.eye(dim)[None])
    ident = AffineStyle(np.eye(dim), np.zeros(dim))
    hits = sum(not distinguishable(mix, AffineStyle(random_orthogonal(dim, rng), np.zeros(dim)), ident)
               for _ in range(trials))
    return DemoRow("rotation hidden (K=1, isotropic)", hits, trials, "indistinguishable")


def two_component_demo(trials: int = 100, dim: int = 3, seed: int = 0) -> DemoRow:
    """Two components with different covariances: any change of style is detected."""
    rng = np.random.default_rng([seed, 12])
    hits = 0
    for _ in range(trials):
        mix = GaussianMixture([0.5, 0.5], rng.standard_normal((2, dim)),
                              np.stack([random_spd(dim, rng), random_spd(dim, rng)]))
        s1 = AffineStyle(random_invertible(dim, rng), rng.standard_normal(dim))
        s2 = AffineStyle(random_invertible(dim, rng), rng.standard_normal(dim))
        hits += distinguishable(mix, s1, s2)
    return DemoRow("style identified (K=2, distinct cov)", hits, trials, "distinguishable")


def planted_permutation_demo(trials: int = 50, n: int = 6, seed: int = 0) -> DemoRow:
    rng = np.random.default_rng([seed, 13])
    hits = 0
    for _ in range(trials):
        m1, m2, p = planted_instance(n, rng)
        found, value = brute_force_permutation(m1, m2)
        hits += bool(np.array_equal(found, p) and value == 0.0)
    return DemoRow(f"planted permutation (n={n})", hits, trials, "brute force, objective 0")


def degree_set_demo(trials: int = 50, n: int = 6, seed: int = 0) -> DemoRow:
    rng = np.random.default_rng([seed, 14])
    hits = done = 0
    while done < trials:
        m1, m2, _ = planted_instance(n, rng)
        if not has_unique_profiles(m1):
            continue
        done += 1
        _, best = brute_force_permutation(m1, m2)
        hits += permutation_objective(m1, m2, degree_set_match(m1, m2)) == best
    return DemoRow(f"profile matching = optimum (n={n})", hits, trials, "tie-free instances")


def demo_table(seed: int = 0) -> list[DemoRow]:
    return [rotation_demo(seed=seed), two_component_demo(seed=seed),
            planted_permutation_demo(seed=seed), degree_set_demo(seed=seed)]
