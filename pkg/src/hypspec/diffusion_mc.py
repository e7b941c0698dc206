"""Continuous-time random walks on the lumped pencil and their exit statistics.

The walk on free state ``i`` jumps to ``j`` at rate ``-K_ij / m_i`` where
``m_i`` is the row sum of the mass matrix.  Any excess of the stiffness row sum
over the jump rates kills the walk outright.  Dirichlet states absorb.  The
generator restricted to free states is ``-diag(m)^-1 K_II``, so its smallest
eigenvalue is the lumped counterpart of the Dirichlet lambda0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse.linalg import eigsh, spsolve

from .config import TOL, NumericalError, ValidationError

MIN_TAIL = 50


@dataclass
class WalkModel:
    rates: sp.csr_matrix       # free rows, all columns; nonnegative jump rates
    kill: np.ndarray           # extra killing rate per free state
    free: np.ndarray           # global index of each free state
    absorbing: np.ndarray      # bool per global state
    lumped_mass: np.ndarray    # per free state
    K: sp.csr_matrix           # stiffness after clipping (global)
    clipped: int = 0
    seed: int = 0

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def total_rate(self) -> np.ndarray:
        return np.asarray(self.rates.sum(axis=1)).ravel() + self.kill

    def generator_dirichlet(self, count: int = 1):
        """Smallest eigenpairs of the killed generator (a symmetric pencil with diagonal mass)."""
        Kf = self.K[self.free][:, self.free]
        Kf = Kf.tocsc()
        Ml = sp.diags(self.lumped_mass).tocsc()
        n = Kf.shape[0]
        if n <= TOL.dense_cutoff:
            vals, vecs = linalg.eigh(Kf.toarray(), Ml.toarray())
            return vals[:count], vecs[:, :count]
        vals, vecs = eigsh(Kf, k=count, M=Ml, sigma=-1e-2, which="LM", v0=np.ones(n), tol=0)
        order = np.argsort(vals)
        return vals[order], vecs[:, order]

    def lambda0(self) -> float:
        return float(self.generator_dirichlet(1)[0][0])


def _clip_offdiag(A, tol: float = 0.0):
    """Move positive off-diagonal entries onto the diagonal.

    Adds c (e_i - e_j)(e_i - e_j)^T for each removed pair, so row sums and
    symmetry are kept and the matrix only grows in the PSD order.
    """
    A = sp.csr_matrix(A).tocoo()
    bad = (A.row != A.col) & (A.data > tol)
    keep = ~bad
    extra = np.zeros(A.shape[0])
    np.add.at(extra, A.row[bad], A.data[bad])
    rows = np.concatenate([A.row[keep], np.arange(A.shape[0])])
    cols = np.concatenate([A.col[keep], np.arange(A.shape[0])])
    data = np.concatenate([A.data[keep], extra])
    out = sp.coo_matrix((data, (rows, cols)), shape=A.shape).tocsr()
    out.sum_duplicates()
    return out


def build_walk(K, M, dirichlet=None, clip: bool = False, tol: float = 1e-12,
               seed: int = 0) -> WalkModel:
    K = sp.csr_matrix(K, dtype=float)
    M = sp.csr_matrix(M, dtype=float)
    n = K.shape[0]
    absorbing = np.zeros(n, dtype=bool)
    if dirichlet is not None:
        d = np.asarray(dirichlet)
        if d.dtype == bool:
            absorbing = d.copy()
        else:
            absorbing[d.astype(np.int64)] = True
    mass = np.asarray(M.sum(axis=1)).ravel()
    free = np.flatnonzero(~absorbing)
    if free.size == 0:
        raise ValidationError("no free states")
    if np.any(mass[free] <= 0):
        raise ValidationError("lumped mass must be positive")
    thresh = tol * max(1.0, abs(K.data).max() if K.nnz else 1.0)
    Kc = K.tocoo()
    touches_free = ~absorbing[Kc.row] | ~absorbing[Kc.col]
    clipped = int(np.sum((Kc.row != Kc.col) & (Kc.data > thresh) & touches_free) // 2)
    if clipped:
        msg = f"{clipped} positive off-diagonal stiffness pairs (non-Delaunay triangles)"
        if not clip:
            raise NumericalError(msg + "; rerun with clipping enabled")
        warnings.warn(msg + " moved onto the diagonal", RuntimeWarning, stacklevel=2)
        K = _clip_offdiag(K, thresh)
    Kf = K[free].tocoo()
    use = Kf.col != free[Kf.row]
    rate = -Kf.data[use] / mass[free][Kf.row[use]]
    R = sp.coo_matrix((rate, (Kf.row[use], Kf.col[use])), shape=(len(free), n)).tocsr()
    R.sum_duplicates()
    R.eliminate_zeros()
    # row-sum surplus of the stiffness is killing
    diag = K.diagonal()[free]
    kill = diag / mass[free] - np.asarray(R.sum(axis=1)).ravel()
    scale = np.maximum(diag / mass[free], 1.0)
    if np.any(kill < -1e-9 * scale):
        raise NumericalError("stiffness rows lose mass: generator inconsistent")
    kill = np.where(kill < 1e-12 * scale, 0.0, kill)
    if np.any(R.sum(axis=1).A.ravel() + kill <= 0):
        raise ValidationError("a free state has no way out")
    return WalkModel(rates=R, kill=kill, free=free, absorbing=absorbing, lumped_mass=mass[free],
                     K=K, clipped=clipped, seed=seed)


def _rng(seed: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, batch], dtype=np.uint64)))


def simulate(model: WalkModel, starts, rng: np.random.Generator, t_max: float | None = None,
             max_steps: int = 10_000_000):
    """Exit times and exit states from free-state indices ``starts``.

    Paths alive at ``t_max`` get exit time ``inf``; killed paths exit to -1.
    """
    R = model.rates
    cum = np.cumsum(R.data)
    base = np.concatenate([[0.0], cum])[R.indptr[:-1]]
    q = model.total_rate
    state = np.asarray(starts, dtype=np.int64).copy()
    n = len(state)
    t = np.zeros(n)
    tau = np.full(n, np.inf)
    exit_state = np.full(n, -2, dtype=np.int64)
    alive = np.arange(n)
    free_of = -np.ones(model.absorbing.size, dtype=np.int64)
    free_of[model.free] = np.arange(model.n_free)
    steps = 0
    while alive.size:
        steps += 1
        if steps > max_steps:
            raise NumericalError("walk did not terminate")
        s = state[alive]
        qs = q[s]
        tn = t[alive] + rng.exponential(1.0 / qs)
        u = rng.random(alive.size) * qs
        if t_max is not None:
            done = tn > t_max
            if done.any():
                keep = ~done
                alive, s, qs, tn, u = alive[keep], s[keep], qs[keep], tn[keep], u[keep]
        killed = u < model.kill[s]
        if killed.any():
            ids = alive[killed]
            tau[ids] = tn[killed]
            exit_state[ids] = -1
        go = ~killed
        alive, s, tn, u = alive[go], s[go], tn[go], u[go] - model.kill[s[go]]
        target = base[s] + u
        k = np.searchsorted(cum, target, side="right")
        k = np.minimum(k, R.indptr[s + 1] - 1)
        nxt = R.indices[k]
        t[alive] = tn
        hit = model.absorbing[nxt]
        if hit.any():
            ids = alive[hit]
            tau[ids] = tn[hit]
            exit_state[ids] = nxt[hit]
        alive = alive[~hit]
        state[alive] = free_of[nxt[~hit]]
    return tau, exit_state


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    n_paths: int
    fitted_rate: float
    rate_se: float
    ci: tuple
    seed: int
    window: tuple

    def summary(self) -> dict:
        return {"rate": self.fitted_rate, "ci_low": self.ci[0], "ci_high": self.ci[1],
                "n_paths": self.n_paths, "seed": self.seed}

    def csv(self) -> str:
        rows = ["t,survival,stderr"]
        rows += [f"{t:.10g},{s:.10g},{e:.6g}" for t, s, e in zip(self.times, self.survival, self.stderr)]
        return "\n".join(rows) + "\n"


def _fit_rate(times, surv, n, lo, hi):
    w = (times >= lo) & (times <= hi) & (surv > 0)
    if w.sum() < 3:
        raise NumericalError("too few positive survival points in the tail window")
    s = surv[w]
    weight = n * s / np.maximum(1 - s, 1e-12)
    X = np.stack([np.ones(w.sum()), times[w]], 1)
    WX = X * weight[:, None]
    coef = np.linalg.solve(X.T @ WX, WX.T @ np.log(s))
    return -coef[1]


def survival_curve(model: WalkModel, t_max: float, n_paths: int, seed: int | None = None,
                   start: int | None = None, n_batches: int = 64, n_grid: int = 201,
                   window: tuple | None = None) -> SurvivalCurve:
    """Survival probability of the exit time from one start state and its fitted decay rate."""
    if not t_max > 0:
        raise ValidationError("t_max must be positive")
    if n_paths < 1000:
        raise ValidationError("need at least 1000 paths")
    if n_batches < 16:
        raise ValidationError("need at least 16 batches")
    seed = model.seed if seed is None else int(seed)
    if start is None:
        _, vec = model.generator_dirichlet(1)
        start = int(np.argmax(np.abs(vec[:, 0])))
    elif not 0 <= start < model.n_free:
        raise ValidationError("start must index a free state")
    sizes = np.full(n_batches, n_paths // n_batches)
    sizes[: n_paths % n_batches] += 1
    times = np.linspace(0.0, t_max, n_grid)
    counts = np.zeros((n_batches, n_grid))
    for b in range(n_batches):
        tau, _ = simulate(model, np.full(sizes[b], start), _rng(seed, b), t_max=t_max)
        tau_sorted = np.sort(tau)
        counts[b] = sizes[b] - np.searchsorted(tau_sorted, times, side="right")
    total = counts.sum(axis=0)
    surv = total / n_paths
    if total[-1] < MIN_TAIL:
        raise NumericalError(f"insufficient tail: {int(total[-1])} paths survive to t_max; "
                             "raise n_paths or lower t_max")
    lo, hi = window if window is not None else (t_max / 2, t_max)
    rate = _fit_rate(times, surv, n_paths, lo, hi)
    jk = np.empty(n_batches)
    for b in range(n_batches):
        nb = n_paths - sizes[b]
        jk[b] = _fit_rate(times, (total - counts[b]) / nb, nb, lo, hi)
    se = math.sqrt((n_batches - 1) / n_batches * np.sum((jk - jk.mean()) ** 2))
    stderr = np.sqrt(surv * (1 - surv) / n_paths)
    return SurvivalCurve(times=times, survival=surv, stderr=stderr, n_paths=n_paths,
                         fitted_rate=float(rate), rate_se=se,
                         ci=(float(rate - 1.96 * se), float(rate + 1.96 * se)), seed=seed,
                         window=(lo, hi))


@dataclass
class HarmonicEstimate:
    starts: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    lam: float


def lambda_harmonic_extend(model: WalkModel, lam: float, boundary_values, starts=None,
                           n_paths: int = 4000, seed: int | None = None,
                           curve: SurvivalCurve | None = None,
                           t_cap: float = 1e4) -> HarmonicEstimate:
    """E_x[exp(lam tau) g(X_tau)] for free states ``starts``; g = 0 on the killing cemetery."""
    if lam < 0:
        raise ValidationError("lam must be nonnegative")
    if lam > 0:
        if curve is None:
            raise ValidationError("a fitted survival curve is needed to check integrability")
        if lam >= curve.fitted_rate - 3 * (curve.ci[1] - curve.fitted_rate):
            raise ValidationError("lam too close to the decay rate: weights are not integrable")
    g = np.asarray(boundary_values, dtype=float)
    if g.shape != model.absorbing.shape:
        raise ValidationError("boundary values must be given on every global state")
    seed = model.seed if seed is None else int(seed)
    starts = np.arange(model.n_free) if starts is None else np.asarray(starts, dtype=np.int64)
    vals = np.empty(len(starts))
    errs = np.empty(len(starts))
    for k, s in enumerate(starts):
        tau, ex = simulate(model, np.full(n_paths, s), _rng(seed, 1_000_000 + int(s)))
        if np.any(tau > t_cap):
            raise NumericalError("walk ran past the time cap")
        with np.errstate(over="raise"):
            try:
                w = np.exp(lam * tau)
            except FloatingPointError:
                raise NumericalError("exit weight overflow") from None
        x = np.where(ex >= 0, g[np.maximum(ex, 0)], 0.0) * w
        vals[k] = x.mean()
        errs[k] = x.std(ddof=1) / math.sqrt(n_paths)
    return HarmonicEstimate(starts=starts, values=vals, stderr=errs, lam=float(lam))


def harmonic_oracle(model: WalkModel, lam: float, boundary_values) -> np.ndarray:
    """Linear solve (K_II - lam m) f = -K_ID g on free states."""
    K = model.K.tocsr()
    free = model.free
    d = np.flatnonzero(model.absorbing)
    g = np.asarray(boundary_values, dtype=float)
    A = (K[free][:, free] - lam * sp.diags(model.lumped_mass)).tocsc()
    rhs = -(K[free][:, d] @ g[d])
    return np.atleast_1d(spsolve(A, rhs))
