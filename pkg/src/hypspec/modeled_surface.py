"""Finite truncations of surfaces built by gluing copies of one cell along a graph.

A vertex of the graph is a copy of the cell; an edge ``(i, j)`` with ports
``(p, q)`` glues cuff ``p`` of copy ``i`` to cuff ``q`` of copy ``j``.  Cuff
node lists of the reference cell are images of one another under the cell's
rotation, so the gluing ``t -> t`` in arc-length parameter is the rotation
``J^(q-p)`` restricted to the cuff.  Unmatched cuffs of a ball carry
Dirichlet conditions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import bounds
from . import fem_hyperbolic as fem
from . import graph_spectra as gs
from .config import TOL, NumericalError, ValidationError
from .hyp_core import CellSpec, collar_halfwidth


@dataclass
class CellData:
    """Reference cell: mesh, pencil and its low Neumann spectrum."""

    spec: CellSpec
    mesh: fem.DiskMesh
    K: sp.csr_matrix
    M: sp.csr_matrix
    neumann: fem.SpectralResult

    @property
    def lambda0N(self) -> float:
        return self.neumann.lambda0

    @property
    def lambda1(self) -> float:
        return float(self.neumann.eigenvalues[1])

    @property
    def eta(self) -> float:
        return fem.spectral_gap(self.neumann)

    @property
    def psi0(self) -> np.ndarray:
        return self.neumann.psi0

    @property
    def psi0_cuff(self) -> float:
        return fem.cuff_mean(self.mesh, self.neumann, "cuff0")

    @property
    def cuffs(self) -> list[np.ndarray]:
        return [self.mesh.loops[f"cuff{p}"].nodes for p in range(self.spec.v)]


def prepare_cell(spec: CellSpec, h: float = 0.1) -> CellData:
    if any(spec.funnels):
        raise ValidationError("cells with funnels cannot be glued along a graph")
    mesh = fem.mesh_cell(spec, h)
    K, M = fem.assemble(mesh)
    res = fem.solve_low_spectrum(K, M, None, count=2, bc={t: "neumann" for t in mesh.loops},
                                 mesh_h=mesh.mesh_h)
    cell = CellData(spec, mesh, K, M, res)
    _check_cuff_layout(cell)
    return cell


def _check_cuff_layout(cell: CellData) -> None:
    J = cell.mesh.symmetry
    if J is None:
        raise ValidationError("cell mesh carries no rotation")
    cuffs = cell.cuffs
    v = cell.spec.v
    for p in range(v):
        if not np.array_equal(J[cuffs[p]], cuffs[(p + 1) % v]):
            raise ValidationError(f"cuff {p} is not carried onto cuff {(p + 1) % v} by the rotation")
        a = cell.mesh.loops[f"cuff{p}"].param
        b = cell.mesh.loops["cuff0"].param
        if a.shape != b.shape or np.max(np.abs(a - b)) > 1e-9:
            raise ValidationError("cuff parameterizations differ")


@dataclass
class Assembly:
    graph: gs.Graph
    cell: CellData
    node_map: np.ndarray          # (cells, cell nodes) -> global node
    K: sp.csr_matrix
    M: sp.csr_matrix
    dirichlet: np.ndarray         # bool per global node
    glue_map: list = field(default_factory=list)
    dangling: list = field(default_factory=list)
    euler_characteristic: int = 0

    @property
    def n_nodes(self) -> int:
        return self.K.shape[0]

    def restrict(self, f, i) -> np.ndarray:
        return np.asarray(f)[self.node_map[i]]


def _union_find(n):
    parent = np.arange(n)

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    return parent, find


def assemble_truncation(cell: CellData, graph: gs.Graph) -> Assembly:
    v = cell.spec.v
    if graph.max_valence != v and graph.n > 1:
        raise ValidationError(f"graph valence {graph.max_valence} differs from cell valence {v}")
    if graph.valence is not None and graph.valence != v:
        raise ValidationError(f"graph valence {graph.valence} differs from cell valence {v}")
    nc = cell.mesh.n
    ncell = graph.n
    if ncell * nc > TOL.max_unknowns:
        raise ValidationError(f"{ncell * nc} unknowns exceed the cap {TOL.max_unknowns}")
    cuffs = cell.cuffs
    params = [cell.mesh.loops[f"cuff{p}"].param for p in range(v)]
    parent, find = _union_find(ncell * nc)
    ports = graph.edge_ports()
    used = np.zeros((ncell, v), dtype=bool)
    glue = []
    for (i, j), (p, q) in zip(graph.edges, ports):
        if used[i, p] or used[j, q]:
            raise ValidationError("a cuff is glued twice")
        used[i, p] = used[j, q] = True
        if np.max(np.abs(params[p] - params[q])) > 1e-9:
            raise ValidationError("glued cuffs disagree in arc-length parameter")
        a = i * nc + cuffs[p]
        b = j * nc + cuffs[q]
        for x, y in zip(a.tolist(), b.tolist()):
            rx, ry = find(x), find(y)
            if rx != ry:
                parent[max(rx, ry)] = min(rx, ry)
        glue.append((int(i), int(p), int(j), int(q), np.stack([a, b], 1)))
    roots = np.array([find(a) for a in range(ncell * nc)])
    _, inv = np.unique(roots, return_inverse=True)
    node_map = inv.reshape(ncell, nc)
    n = int(inv.max()) + 1
    for _, _, _, _, pairs in glue:
        if np.any(inv[pairs[:, 0]] != inv[pairs[:, 1]]):
            raise NumericalError("glued nodes were not identified")

    def tile(A):
        A = A.tocoo()
        rows = node_map[:, A.row].ravel()
        cols = node_map[:, A.col].ravel()
        data = np.tile(A.data, ncell)
        G = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
        G.sum_duplicates()
        return G

    K, M = tile(cell.K), tile(cell.M)
    dirichlet = np.zeros(n, dtype=bool)
    dangling = [(int(i), int(p)) for i, p in zip(*np.nonzero(~used))]
    for i, p in dangling:
        dirichlet[node_map[i, cuffs[p]]] = True
    tri = np.concatenate([node_map[i][cell.mesh.triangles] for i in range(ncell)])
    e = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    chi = n - len(np.unique(e, axis=0)) + len(tri)
    expected = ncell * cell.spec.euler_characteristic
    if chi != expected:
        raise NumericalError(f"glued Euler characteristic {chi} differs from {expected}")
    return Assembly(graph=graph, cell=cell, node_map=node_map, K=K, M=M, dirichlet=dirichlet,
                    glue_map=glue, dangling=dangling, euler_characteristic=chi)


def lambda0_dirichlet(asm: Assembly, count: int = 1) -> fem.SpectralResult:
    return fem.solve_low_spectrum(asm.K, asm.M, asm.dirichlet, count=count,
                                  mesh_h=asm.cell.mesh.mesh_h)


def lambda0_dirichlet_sequence(cell: CellData, radii, ball) -> list[float]:
    """lambda0 with Dirichlet cuffs on the truncations ``ball(r)`` for increasing radii."""
    radii = list(radii)
    if sorted(set(radii)) != radii:
        raise ValidationError("radii must be strictly increasing")
    out = []
    for r in radii:
        lam = lambda0_dirichlet(assemble_truncation(cell, ball(r))).lambda0
        if lam < cell.lambda0N - TOL.monotone_slack:
            raise NumericalError(f"truncation lambda0 {lam:.6g} below the cell's Neumann value")
        if out and lam > out[-1] + 1e-9 * max(1.0, out[-1]):
            raise NumericalError(f"lambda0 increased from {out[-1]:.8g} to {lam:.8g} on a larger ball")
        out.append(lam)
    return out


def inner_ratio(graph: gs.Graph) -> tuple[int, int]:
    """(#inner vertex boundary, #untagged vertices) of a ball."""
    inside = ~graph.boundary
    A = graph.adjacency()
    touches_out = (A @ (~inside).astype(float)) > 0
    return int(np.sum(inside & touches_out)), int(inside.sum())


@dataclass
class TestFunctionReport:
    quotient: float
    bound: float
    eps: float
    boundary_count: int
    inside_count: int
    vector: np.ndarray

    @property
    def ratio(self) -> float:
        return self.boundary_count / self.inside_count

    @property
    def holds(self) -> bool:
        return self.quotient <= self.bound


def test_function(asm: Assembly) -> np.ndarray:
    """psi0 on untagged cells, psi0 times the collar cutoff (1 - r/m)_+ on tagged ones."""
    cell = asm.cell
    dist = cell.mesh.cuff_distance
    if dist is None:
        raise ValidationError("cell mesh has no collar distances for the cutoff")
    m = collar_halfwidth(cell.spec.cuff_length)
    inside = ~asm.graph.boundary
    f = np.zeros(asm.n_nodes)
    psi = cell.psi0
    partners = {}
    for i, p, j, q, _ in asm.glue_map:
        partners.setdefault(i, []).append((p, j))
        partners.setdefault(j, []).append((q, i))
    for i in range(asm.graph.n):
        if inside[i]:
            vals = psi
        else:
            ports = [p for p, other in partners.get(i, []) if inside[other]]
            if not ports:
                continue
            cut = np.clip(1.0 - dist[:, ports] / m, 0.0, None).max(axis=1)
            vals = psi * cut
        np.maximum.at(f, asm.node_map[i], vals)
    f[asm.dirichlet] = 0.0
    return f


def upper_bound_test_function(asm: Assembly, eps: float | None = None,
                              tol: float = 1e-3, strict: bool = True) -> TestFunctionReport:
    """Rayleigh quotient of the cut-off copy of psi0 and the bound it must satisfy."""
    cell = asm.cell
    if eps is None:
        eps = max(float(cell.neumann.residuals[0]), 1e-6)
    f = test_function(asm)
    norm = float(f @ (asm.M @ f))
    if norm <= 0:
        raise ValidationError("test function vanishes identically")
    q = float(f @ (asm.K @ f)) / norm
    nb, ni = inner_ratio(asm.graph)
    m = collar_halfwidth(cell.spec.cuff_length)
    lam = cell.lambda0N
    v = cell.spec.v
    bound = lam + eps + (v - 1) * (1 / m**2 + lam + eps) * nb / ni
    rep = TestFunctionReport(q, bound, eps, nb, ni, f)
    if strict and q > bound + tol:
        raise NumericalError(f"test-function quotient {q:.6g} exceeds its bound {bound:.6g}")
    return rep


@dataclass
class ProjectionReport:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    gradient_energy: float
    edge_sum: float
    A: float
    pythagoras_error: float

    @property
    def slack(self) -> float:
        return self.gradient_energy - self.A * self.edge_sum

    @property
    def holds(self) -> bool:
        return self.slack >= -1e-10 * max(1.0, self.gradient_energy)


def projection_diagnostics(asm: Assembly, f) -> ProjectionReport:
    """Split f on each cell into its psi0 component and the orthogonal rest."""
    cell = asm.cell
    psi = cell.psi0
    Mpsi = cell.M @ psi
    if abs(float(psi @ Mpsi) - 1) > 1e-10:
        raise ValidationError("cell ground state is not mass-normalized")
    f = np.asarray(f, dtype=float)
    if f.shape != (asm.n_nodes,):
        raise ValidationError("f must have one value per assembly node")
    if np.any(f[asm.dirichlet] != 0):
        raise ValidationError("f must vanish on the Dirichlet cuffs")
    ncell = asm.graph.n
    a = np.empty(ncell)
    b = np.empty(ncell)
    c = np.empty(ncell)
    grad = 0.0
    err = 0.0
    for i in range(ncell):
        fi = f[asm.node_map[i]]
        a2 = float(fi @ (cell.M @ fi))
        b[i] = float(fi @ Mpsi)
        g = fi - b[i] * psi
        c2 = float(g @ (cell.M @ g))
        a[i], c[i] = math.sqrt(max(a2, 0.0)), math.sqrt(max(c2, 0.0))
        err = max(err, abs(a2 - b[i] ** 2 - c2) / max(a2, 1e-300))
        grad += float(g @ (cell.K @ g))
    if err > 1e-10:
        raise NumericalError(f"projection identity off by {err:.2e}")
    edge_sum = sum((b[i] - b[j]) ** 2 for i, _, j, _, _ in asm.glue_map)
    edge_sum += sum(b[i] ** 2 for i, _ in asm.dangling)
    A = bounds.collar_constant(cell.lambda1, cell.spec.cuff_length, cell.psi0_cuff)
    return ProjectionReport(a, b, c, grad, float(edge_sum), A, err)


def sandwich_check(cell: CellData, graph: gs.Graph, tol: float = TOL.sandwich_run):
    """Both halves of the two-sided estimate on one ball.

    Returns (BoundReport, test-function report, Dirichlet lambda0 of the truncation).
    The upper half compares the test-function quotient with the bound built
    from the ball's own boundary ratio, which is an upper estimate of h.
    """
    asm = assemble_truncation(cell, graph)
    lam = lambda0_dirichlet(asm).lambda0
    mu = gs.mu0(graph, dirichlet_on_boundary=True)
    nb, ni = inner_ratio(graph)
    tf = upper_bound_test_function(asm, strict=False)
    rep = bounds.sandwich_report(lambda0N=cell.lambda0N, lambda1=cell.lambda1,
                                 psi0_cuff=cell.psi0_cuff, l=cell.spec.cuff_length,
                                 v=cell.spec.v, mu0=mu, h_upper=nb / ni,
                                 measured_lambda0=lam, tol=tol)
    rep.checks["test_quotient_le_upper"] = tf.quotient <= rep.upper_bound + tol
    rep.checks["test_quotient_ge_lambda0"] = tf.quotient >= lam - 1e-10
    if lam > 0.25 + 0.05:
        warnings.warn("estimate above 1/4 + 0.05", RuntimeWarning, stacklevel=2)
    return rep, tf, lam


@dataclass
class PinchRow:
    eps: float
    lambda0: float

    @property
    def ratio(self) -> float:
        return self.lambda0 / self.eps


def pinch_target(v: int = 3, cuff_weight: float = 2.0) -> float:
    """Bottom of the weighted graph form of one cell whose v cuffs open into funnels."""
    spec = CellSpec(v=v, cuff_length=1.0, topology="pants_ring")
    form = gs.ColboisForm(n=v + 1, edges=np.array([(0, k + 1) for k in range(v)]),
                          lengths=np.full(v, cuff_weight),
                          volumes=np.concatenate([[spec.area], np.zeros(v)]))
    return float(gs.colbois_spectrum(form)[0])


def pinch_sweep(eps_list, v: int = 3, h: float = 0.15, r_trunc: float = TOL.r_trunc,
                cuff_weight: float = 2.0) -> list[PinchRow]:
    """lambda0 of a pants cell with cuffs eps * cuff_weight, each opening into a funnel."""
    rows = []
    for eps in eps_list:
        if not 0.05 <= eps <= 1:
            raise ValidationError("eps must lie in [0.05, 1]")
        l = eps * cuff_weight
        spec = CellSpec(v=v, cuff_length=l, topology="pants_ring", funnels=(True,) * v)
        mesh = fem.mesh_cell(spec, h, r_trunc=r_trunc)
        tags = [f"funnel{k}" for k in range(v)]
        lam = fem.solve_mesh(mesh, tags, count=1).lambda0
        rows.append(PinchRow(float(eps), lam))
    return rows
