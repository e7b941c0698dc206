"""Graphs that index the cells of a modeled surface, and their spectral data."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .config import TOL, NumericalError, ValidationError


@dataclass(frozen=True)
class Graph:
    """Finite graph, possibly a ball cut out of an infinite constant-valence graph.

    ``ports[e] = (p, q)`` says edge ``e = (i, j)`` leaves ``i`` through its
    ``p``-th boundary slot and enters ``j`` through slot ``q``.
    """

    n: int
    edges: np.ndarray
    boundary: np.ndarray
    valence: int | None = None
    ports: np.ndarray | None = None
    name: str = "explicit"

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        boundary = np.zeros(self.n, dtype=bool)
        b = np.asarray(self.boundary)
        if b.dtype == bool and b.size == self.n:
            boundary = b.copy()
        elif b.size:
            boundary[b.astype(np.int64)] = True
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "boundary", boundary)
        if self.ports is not None:
            object.__setattr__(self, "ports", np.asarray(self.ports, dtype=np.int64).reshape(-1, 2))
        self._validate()

    def _validate(self):
        if self.n < 1:
            raise ValidationError("graph needs at least one vertex")
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise ValidationError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ValidationError("self-loops are not allowed")
            key = np.sort(e, axis=1)
            if len(np.unique(key, axis=0)) != len(key):
                raise ValidationError("duplicate edges")
        if self.n > 1:
            ncomp, _ = csgraph.connected_components(self.adjacency(), directed=False)
            if ncomp != 1:
                raise ValidationError("graph is disconnected")
        if self.valence is not None:
            deg = self.degrees()
            bad = np.flatnonzero((deg != self.valence) & ~self.boundary)
            if bad.size and not (self.n == 1 and self.edges.size == 0):
                raise ValidationError(
                    f"vertices {bad[:5].tolist()} violate valence {self.valence}")
            if np.any(deg > self.valence):
                raise ValidationError("vertex degree exceeds valence")
        if self.ports is not None:
            if self.ports.shape != self.edges.shape:
                raise ValidationError("one port pair per edge")
            v = self.max_valence
            if self.ports.min(initial=0) < 0 or self.ports.max(initial=0) >= v:
                raise ValidationError("port index out of range")
            for side in (0, 1):
                pairs = np.stack([self.edges[:, side], self.ports[:, side]], axis=1)
                if len(np.unique(pairs, axis=0)) != len(pairs):
                    raise ValidationError("a port is used twice at one vertex")

    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        data = np.ones(2 * len(e))
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    @property
    def max_valence(self) -> int:
        if self.valence is not None:
            return self.valence
        return int(self.degrees().max(initial=0))

    def neighbors(self) -> list[list[int]]:
        nb = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nb[i].append(int(j))
            nb[j].append(int(i))
        return nb

    def edge_ports(self) -> np.ndarray:
        """Port pairs per edge; assigned by neighbour order when not given."""
        if self.ports is not None:
            return self.ports
        used = [0] * self.n
        out = np.zeros_like(self.edges)
        for k, (i, j) in enumerate(self.edges):
            out[k] = (used[i], used[j])
            used[i] += 1
            used[j] += 1
        return out

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    def to_json(self) -> dict:
        d = {"vertices": int(self.n), "edges": self.edges.tolist(),
             "boundary": np.flatnonzero(self.boundary).tolist(),
             "valence": None if self.valence is None else int(self.valence)}
        if self.ports is not None:
            d["ports"] = self.ports.tolist()
        return d

    @classmethod
    def from_json(cls, data: dict | str) -> "Graph":
        if isinstance(data, str):
            data = json.loads(data)
        extra = set(data) - {"vertices", "edges", "boundary", "valence", "ports"}
        if extra:
            raise ValidationError(f"unknown graph keys: {sorted(extra)}")
        return cls(n=int(data["vertices"]), edges=np.asarray(data.get("edges", []), dtype=np.int64),
                   boundary=np.asarray(data.get("boundary", []), dtype=np.int64),
                   valence=data.get("valence"), ports=data.get("ports"))


def _ball_from_words(words, step, radius, valence, name):
    """Breadth-first ball; ``step(word, port)`` returns (neighbour word, back port)."""
    index = {words: 0}
    order = [words]
    dist = [0]
    edges, ports = [], []
    seen = set()
    head = 0
    while head < len(order):
        w = order[head]
        i = index[w]
        for p in range(valence):
            u, q = step(w, p)
            if u not in index:
                if dist[i] == radius:
                    continue
                index[u] = len(order)
                order.append(u)
                dist.append(dist[i] + 1)
            j = index[u]
            key = (min(i, j), max(i, j), p if i < j else q)
            if key in seen:
                continue
            seen.add(key)
            edges.append((i, j))
            ports.append((p, q))
        head += 1
    dist = np.array(dist)
    boundary = dist == radius if radius > 0 else np.ones(1, dtype=bool)
    return Graph(n=len(order), edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
                 boundary=boundary, valence=valence,
                 ports=np.array(ports, dtype=np.int64).reshape(-1, 2), name=name)


def lattice(d: int, radius: int) -> Graph:
    """Ball of radius ``radius`` in Z^d for the word metric; ports 2k (+e_k), 2k+1 (-e_k)."""
    if d not in (1, 2):
        raise ValidationError("lattice dimension must be 1 or 2")
    if radius < 0:
        raise ValidationError("radius must be nonnegative")

    def step(w, p):
        k, sign = divmod(p, 2)
        u = list(w)
        u[k] += -1 if sign else 1
        return tuple(u), p ^ 1

    return _ball_from_words((0,) * d, step, radius, 2 * d, f"lattice({d},{radius})")


def regular_tree(v: int, depth: int) -> Graph:
    """Ball of radius ``depth`` in the v-regular tree."""
    if v < 3:
        raise ValidationError("tree valence must be at least 3")
    if depth < 0:
        raise ValidationError("depth must be nonnegative")

    # a word lists the ports taken from the root; away from the root port 0 points back
    def step(w, p):
        if w and p == 0:
            return w[:-1], w[-1]
        return w + (p,), 0

    return _ball_from_words((), step, depth, v, f"tree({v},{depth})")


def cayley_ball(preset: str, radius: int, rank: int = 2) -> Graph:
    """Cayley-graph balls: ``free_group`` of given rank or ``Z^d`` (d = rank)."""
    if radius < 0:
        raise ValidationError("radius must be nonnegative")
    if preset in ("Z", "Z^d", "abelian"):
        return lattice(rank, radius)
    if preset != "free_group":
        raise ValidationError(f"unsupported Cayley preset {preset!r}")
    if rank < 1:
        raise ValidationError("rank must be positive")

    # generator g has ports 2g (g) and 2g+1 (g^-1); a letter is its port
    def step(w, p):
        if w and w[-1] == p ^ 1:
            return w[:-1], p ^ 1
        return w + (p,), p ^ 1

    return _ball_from_words((), step, radius, 2 * rank, f"free_group({rank},{radius})")


def explicit(n: int, edges, boundary=(), valence: int | None = None) -> Graph:
    return Graph(n=n, edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                 boundary=np.asarray(boundary, dtype=np.int64), valence=valence)


def build_graph(kind: str, **kw) -> Graph:
    if kind == "lattice":
        return lattice(int(kw["d"]), int(kw["radius"]))
    if kind == "regular_tree":
        return regular_tree(int(kw["v"]), int(kw["depth"]))
    if kind == "cayley_ball":
        return cayley_ball(kw["preset"], int(kw["radius"]), int(kw.get("rank", 2)))
    if kind == "explicit":
        return explicit(int(kw["n"]), kw.get("edges", []), kw.get("boundary", ()),
                        kw.get("valence"))
    raise ValidationError(f"unknown graph kind {kind!r}")


def combinatorial_laplacian(g: Graph, dirichlet_on_boundary: bool = False) -> sp.csr_matrix:
    A = g.adjacency()
    L = sp.diags(np.asarray(A.sum(axis=1)).ravel()) - A
    L = L.tocsr()
    if dirichlet_on_boundary:
        keep = ~g.boundary
        L = L[keep][:, keep]
    return L


def _smallest_eigpair(L: sp.spmatrix):
    n = L.shape[0]
    if n <= TOL.dense_cutoff:
        vals, vecs = linalg.eigh(L.toarray())
        return vals[0], vecs[:, 0]
    try:
        vals, vecs = eigsh(L.tocsc(), k=1, sigma=-1e-3, which="LM", v0=np.ones(n),
                           tol=1e-12, maxiter=5000)
    except ArpackNoConvergence as exc:
        raise NumericalError(f"Laplacian eigensolver did not converge: {exc}") from None
    return vals[0], vecs[:, 0]


def mu0(g: Graph, dirichlet_on_boundary: bool = False, return_vector: bool = False):
    """Bottom of the combinatorial spectrum (shell removed when ``dirichlet_on_boundary``)."""
    L = combinatorial_laplacian(g, dirichlet_on_boundary)
    if L.shape[0] == 0:
        raise ValidationError("no vertices left after removing the boundary shell")
    val, vec = _smallest_eigpair(L)
    val = max(float(val), 0.0) if val > -TOL.negative_eig else float(val)
    vec = vec / np.linalg.norm(vec)
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if nz.size and vec[nz[0]] < 0:
        vec = -vec
    return (val, vec) if return_vector else val


@dataclass(frozen=True)
class CheegerEstimate:
    lower: float
    upper: float
    method: str
    witness_subset: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.lower > self.upper + 1e-15:
            raise ValidationError("Cheeger lower estimate exceeds upper")


def vertex_boundary(g: Graph, subset) -> list[int]:
    """Vertices of ``subset`` with a neighbour outside it (missing slots count as outside)."""
    s = set(int(i) for i in subset)
    nb = g.neighbors()
    out = []
    for i in sorted(s):
        missing = g.valence is not None and len(nb[i]) < g.valence
        if missing or any(j not in s for j in nb[i]):
            out.append(i)
    return out


def _exhaustive(g: Graph, max_size: int):
    inner = g.interior
    k = len(inner)
    if k == 0:
        raise ValidationError("no untagged vertices to enumerate")
    if k > max_size:
        raise ValidationError(f"{k} candidate vertices exceed exhaustive cap {max_size}")
    pos = {int(v): t for t, v in enumerate(inner)}
    nb = g.neighbors()
    nbmask = np.zeros(k, dtype=np.int64)
    leaks = np.zeros(k, dtype=bool)  # adjacent to something outside the candidate pool
    for v, t in pos.items():
        m = 0
        for u in nb[v]:
            if u in pos:
                m |= 1 << pos[u]
            else:
                leaks[t] = True
        if g.valence is not None and len(nb[v]) < g.valence:
            leaks[t] = True
        nbmask[t] = m
    masks = np.arange(1, 1 << k, dtype=np.int64)
    # connectivity by flood fill from the lowest set bit, all masks at once
    reach = masks & -masks
    for _ in range(k):
        grow = reach.copy()
        for t in range(k):
            has = (reach >> t) & 1
            grow |= np.where(has == 1, nbmask[t], 0)
        grow &= masks
        if np.array_equal(grow, reach):
            break
        reach = grow
    connected = reach == masks
    size = np.zeros_like(masks)
    bnd = np.zeros_like(masks)
    for t in range(k):
        inside = (masks >> t) & 1
        size += inside
        exits = leaks[t] | ((nbmask[t] & ~masks) != 0)
        bnd += inside * exits
    ratio = np.where(connected, bnd / size, np.inf)
    best = int(np.argmin(ratio))
    mask = int(masks[best])
    witness = tuple(int(inner[t]) for t in range(k) if (mask >> t) & 1)
    return float(ratio[best]), witness


def _folner(g: Graph):
    """Best ratio over graph balls centred at each untagged vertex."""
    inner = set(int(i) for i in g.interior)
    if not inner:
        raise ValidationError("no untagged vertices")
    A = g.adjacency()
    dist = csgraph.shortest_path(A, unweighted=True, indices=sorted(inner))
    best, witness = np.inf, None
    for row, c in zip(dist, sorted(inner)):
        for r in np.unique(row[np.isfinite(row)]):
            ball = [int(i) for i in np.flatnonzero(row <= r) if int(i) in inner]
            if not ball:
                continue
            sub = set(ball)
            # only connected balls count; the ball restricted to untagged vertices may split
            if len(ball) > 1:
                idx = np.array(ball)
                nc, _ = csgraph.connected_components(A[idx][:, idx], directed=False)
                if nc != 1:
                    continue
            ratio = len(vertex_boundary(g, sub)) / len(sub)
            if ratio < best:
                best, witness = ratio, tuple(sorted(sub))
    return float(best), witness


def cheeger(g: Graph, mode: str = "exhaustive", max_size: int = TOL.cheeger_cap) -> CheegerEstimate:
    if mode == "exhaustive":
        h, w = _exhaustive(g, max_size)
        return CheegerEstimate(lower=h, upper=h, method="exhaustive", witness_subset=w)
    if mode == "folner_balls":
        h, w = _folner(g)
        return CheegerEstimate(lower=0.0, upper=h, method="folner_balls", witness_subset=w)
    raise ValidationError(f"unknown Cheeger mode {mode!r}")


@dataclass(frozen=True)
class SandwichReport:
    lower: float
    mu0: float
    h: float
    valence: int
    lower_holds: bool
    upper_holds: bool


class SandwichViolation(NumericalError):
    pass


def cheeger_inequality_check(g: Graph, tol: float = TOL.sandwich, strict: bool = True) -> SandwichReport:
    """h^2/(2v) <= mu0 <= h with Dirichlet mu0 and exhaustive vertex-boundary h."""
    if len(g.interior) < 2:
        raise ValidationError("sandwich check needs at least two untagged vertices")
    h = cheeger(g, "exhaustive").upper
    L = combinatorial_laplacian(g, True).toarray()
    m0 = float(linalg.eigvalsh(L)[0])
    v = g.max_valence
    low = h * h / (2 * v)
    rep = SandwichReport(lower=low, mu0=m0, h=h, valence=v,
                         lower_holds=low <= m0 + tol, upper_holds=m0 <= h + tol)
    if strict and not (rep.lower_holds and rep.upper_holds):
        raise SandwichViolation(
            f"sandwich fails on {g.name}: {low:.6g} <= {m0:.6g} <= {h:.6g}")
    return rep


@dataclass(frozen=True)
class ColboisForm:
    """Weighted form (1/pi) sum l_e (f_i - f_j)^2 against sum V_i f_i^2, f = 0 where V_i = 0."""

    n: int
    edges: np.ndarray
    lengths: np.ndarray
    volumes: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        L = np.asarray(self.lengths, dtype=float).ravel()
        V = np.asarray(self.volumes, dtype=float).ravel()
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "lengths", L)
        object.__setattr__(self, "volumes", V)
        if len(L) != len(e):
            raise ValidationError("one length per edge")
        if np.any(L <= 0):
            raise ValidationError("edge lengths must be positive")
        if len(V) != self.n or np.any(V < 0):
            raise ValidationError("volumes must be nonnegative, one per vertex")
        if not np.any(V > 0):
            raise ValidationError("no finite-volume vertex")

    @property
    def finite_set(self) -> np.ndarray:
        return np.flatnonzero(self.volumes > 0)


def colbois_spectrum(form: ColboisForm) -> np.ndarray:
    Q = np.zeros((form.n, form.n))
    for (i, j), le in zip(form.edges, form.lengths):
        w = le / np.pi
        Q[i, i] += w
        Q[j, j] += w
        Q[i, j] -= w
        Q[j, i] -= w
    s1 = form.finite_set
    Qs = Q[np.ix_(s1, s1)]
    V = form.volumes[s1]
    s = 1 / np.sqrt(V)
    return np.sort(linalg.eigvalsh(s[:, None] * Qs * s[None, :]))


def write_spectrum_csv(path, values, residuals=None):
    from .io_utils import atomic_write_text
    lines = ["index,eigenvalue" + (",residual" if residuals is not None else "")]
    for i, x in enumerate(values):
        row = f"{i},{x:.17g}"
        if residuals is not None:
            row += f",{residuals[i]:.6e}"
        lines.append(row)
    atomic_write_text(path, "\n".join(lines) + "\n")
