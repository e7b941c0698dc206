"""P1 finite elements for the Laplacian on hyperbolic surfaces in the disk model.

Each triangle carries its own disk-model coordinates (a chart).  Before the
element matrices are formed the triangle is moved by an isometry so that the
hyperboloid barycentre of its corners sits at the origin; the element
matrices therefore depend only on the hyperbolic triangle, which makes
glued copies and symmetric meshes produce exactly matching pencils.

Stiffness is the flat P1 stiffness of the recentred coordinates (the
Dirichlet energy is conformally invariant in two dimensions).  Mass uses the
weight ``(2 / (1 - |z|^2))^2`` integrated at the three edge midpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import linalg, optimize
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from scipy.spatial import cKDTree

from . import hyp_core as hc
from .config import TOL, NumericalError, ValidationError


@dataclass
class BoundaryLoop:
    """Closed boundary chain; ``segments`` hold chart coordinates of geodesic pieces."""

    tag: str
    nodes: np.ndarray
    param: np.ndarray
    length: float
    segments: list = field(default_factory=list)
    kind: str = "geodesic"


@dataclass
class DiskMesh:
    points: np.ndarray
    triangles: np.ndarray
    corners: np.ndarray
    loops: dict
    expected_area: float | None = None
    symmetry: np.ndarray | None = None
    cuff_distance: np.ndarray | None = None
    piece: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def hyperbolic_area(self) -> float:
        if "_area" not in self.meta:
            self.meta["_area"] = float(_element_data(self.corners)[2].sum())
        return self.meta["_area"]

    @property
    def mesh_h(self) -> float:
        if "_h" not in self.meta:
            X = hc.from_disk(self.corners)
            d = [hc.hyp_distance(X[:, a], X[:, b]) for a, b in ((0, 1), (1, 2), (2, 0))]
            self.meta["_h"] = float(np.max(d))
        return self.meta["_h"]

    def loop_nodes(self, tags) -> np.ndarray:
        if isinstance(tags, str):
            tags = [tags]
        out = [self.loops[t].nodes for t in tags]
        return np.unique(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)

    def validate(self, area_tol: float = TOL.area_rel) -> None:
        z = self.corners
        if np.any(np.abs(z) >= 1):
            raise ValidationError("chart coordinates leave the unit disk")
        area = 0.5 * np.imag(np.conj(z[:, 1] - z[:, 0]) * (z[:, 2] - z[:, 0]))
        if np.any(area <= TOL.min_tri_area):
            raise ValidationError("degenerate or negatively oriented triangle")
        for loop in self.loops.values():
            if loop.kind != "geodesic":
                continue
            for seg in loop.segments:
                if geodesic_defect(seg) > TOL.geodesic_snap:
                    raise ValidationError(f"boundary {loop.tag} leaves its geodesic")
        if self.expected_area is not None:
            rel = abs(self.hyperbolic_area - self.expected_area) / self.expected_area
            if rel > area_tol:
                raise ValidationError(
                    f"area {self.hyperbolic_area:.6g} off target {self.expected_area:.6g} by {rel:.2%}")

    def euler_characteristic(self) -> int:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        ne = len(np.unique(e, axis=0))
        return self.n - ne + len(t)

    def to_json(self) -> dict:
        return {
            "vertices": [[float(p.real), float(p.imag)] for p in self.points],
            "triangles": self.triangles.tolist(),
            "boundary": {k: {"nodes": v.nodes.tolist(), "param": v.param.tolist(),
                             "length": v.length} for k, v in self.loops.items()},
        }


def geodesic_defect(z) -> float:
    """Largest hyperbolic distance from the points to the geodesic through the first and last."""
    z = np.asarray(z, dtype=complex)
    if len(z) < 3:
        return 0.0
    X = hc.from_disk(z)
    # normal of the plane through the origin spanned by the end points (Lorentz cross product)
    a, b = X[0], X[-1]
    n = np.array([-(a[1] * b[2] - a[2] * b[1]), a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    n = n / math.sqrt(abs(hc.lorentz(n, n)))
    return float(np.max(np.abs(np.arcsinh(hc.lorentz(X, n)))))


# -- element matrices ---------------------------------------------------------

def _recentre(corners):
    X = hc.from_disk(corners)
    C = X.sum(axis=1)
    C = C / np.sqrt(-hc.lorentz(C, C))[:, None]
    c = hc.to_disk(C)[:, None]
    return hc.mobius_to_origin(corners, c)


def _element_data(corners):
    w = _recentre(corners)
    p = np.stack([w.real, w.imag], axis=-1)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = 0.5 * np.abs(e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
    Ke = np.einsum("tai,tbi->tab", e, e) / (4 * area)[:, None, None]
    mids = 0.5 * (w[:, [1, 2, 0]] + w[:, [2, 0, 1]])  # midpoint opposite vertex a
    wt = 4.0 / (1 - np.abs(mids) ** 2) ** 2
    Me = np.empty_like(Ke)
    for a in range(3):
        for b in range(3):
            # vertex a is 1/2 at the two midpoints not opposite to it
            phi_a = np.where(np.arange(3) == a, 0.0, 0.5)
            phi_b = np.where(np.arange(3) == b, 0.0, 0.5)
            Me[:, a, b] = (wt * (phi_a * phi_b)).sum(axis=1) * area / 3
    hyp_area = wt.sum(axis=1) * area / 3
    return Ke, Me, hyp_area


def element_matrices(corners):
    Ke, Me, _ = _element_data(np.asarray(corners, dtype=complex).reshape(-1, 3))
    return Ke, Me


def scatter(triangles, Ke, n):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    A = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble(mesh: DiskMesh):
    """Global stiffness and mass matrices of the mesh (no boundary rows removed)."""
    Ke, Me, _ = _element_data(mesh.corners)
    K = scatter(mesh.triangles, Ke, mesh.n)
    M = scatter(mesh.triangles, Me, mesh.n)
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    if np.any(M.diagonal() <= 0):
        raise NumericalError("mass matrix has a nonpositive diagonal entry")
    return K.tocsr(), M.tocsr()


# -- spectra -------------------------------------------------------------------

@dataclass
class SpectralResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    bc: dict
    mesh_h: float
    residuals: np.ndarray
    free: np.ndarray

    @property
    def lambda0(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def psi0(self) -> np.ndarray:
        return self.eigenvectors[:, 0]


def _dirichlet_mask(n, dirichlet):
    mask = np.zeros(n, dtype=bool)
    if dirichlet is None:
        return mask
    d = np.asarray(dirichlet)
    if d.dtype == bool:
        return d.copy()
    mask[d.astype(np.int64)] = True
    return mask


def solve_low_spectrum(K, M, dirichlet=None, count: int = 2, bc: dict | None = None,
                       mesh_h: float = float("nan"), sigma: float = -1e-2) -> SpectralResult:
    """``count`` lowest eigenpairs of K u = lam M u with u = 0 on ``dirichlet`` nodes."""
    if count < 1:
        raise ValidationError("count must be at least 1")
    n = K.shape[0]
    fixed = _dirichlet_mask(n, dirichlet)
    free = ~fixed
    Kf = K[free][:, free].tocsc()
    Mf = M[free][:, free].tocsc()
    nf = Kf.shape[0]
    if nf == 0:
        raise ValidationError("every node is constrained")
    count = min(count, nf)
    if nf <= TOL.dense_cutoff or count >= nf - 1:
        vals, vecs = linalg.eigh(Kf.toarray(), Mf.toarray())
        vals, vecs = vals[:count], vecs[:, :count]
    else:
        v0 = np.ones(nf)
        try:
            vals, vecs = eigsh(Kf, k=count, M=Mf, sigma=sigma, which="LM", v0=v0,
                               tol=0, maxiter=20 * nf)
        except ArpackNoConvergence as exc:
            raise NumericalError(f"shift-invert Lanczos did not converge: {exc}") from None
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    # mass-normalise, fix signs
    for k in range(count):
        u = vecs[:, k]
        u = u / math.sqrt(float(u @ (Mf @ u)))
        if k == 0:
            if (Mf @ u).sum() < 0:
                u = -u
        else:
            nz = np.flatnonzero(np.abs(u) > 1e-12 * np.abs(u).max())
            if nz.size and u[nz[0]] < 0:
                u = -u
        vecs[:, k] = u
    res = np.array([np.linalg.norm(Kf @ vecs[:, k] - vals[k] * (Mf @ vecs[:, k]))
                    / np.linalg.norm(Mf @ vecs[:, k]) for k in range(count)])
    if np.any(res > TOL.residual):
        raise NumericalError(f"eigen-residuals {res.max():.2e} above {TOL.residual:g}")
    if vals[0] < -TOL.negative_eig * max(1.0, abs(vals).max()):
        raise NumericalError(f"negative eigenvalue {vals[0]:.3e}")
    full = np.zeros((n, count))
    full[free] = vecs
    return SpectralResult(eigenvalues=np.asarray(vals, dtype=float), eigenvectors=full,
                          bc=dict(bc or {}), mesh_h=mesh_h, residuals=res, free=free)


def solve_mesh(mesh: DiskMesh, dirichlet_tags=(), count: int = 2) -> SpectralResult:
    K, M = assemble(mesh)
    d = mesh.loop_nodes(list(dirichlet_tags)) if dirichlet_tags else None
    bc = {t: ("dirichlet" if t in dirichlet_tags else "neumann") for t in mesh.loops}
    return solve_low_spectrum(K, M, d, count=count, bc=bc, mesh_h=mesh.mesh_h)


def spectral_gap(result: SpectralResult) -> float:
    if len(result.eigenvalues) < 2:
        raise ValidationError("spectral gap needs two converged eigenvalues")
    eta = float(result.eigenvalues[1] - result.eigenvalues[0])
    if eta < -TOL.negative_eig:
        raise NumericalError("eigenvalues out of order")
    return max(eta, 0.0)


def cuff_mean(mesh: DiskMesh, result: SpectralResult, tag: str) -> float:
    """Mean of the mass-normalised ground state over the nodes of one boundary loop."""
    return float(result.psi0[mesh.loops[tag].nodes].mean())


def symmetry_check(result: SpectralResult, J, K, M, rtol: float = 1e-10) -> float:
    """max |psi0 - psi0 o J| after checking J is an automorphism of the pencil."""
    J = np.asarray(J, dtype=np.int64)
    n = K.shape[0]
    if sorted(J.tolist()) != list(range(n)):
        raise ValidationError("J is not a permutation of the nodes")
    for A, name in ((K, "stiffness"), (M, "mass")):
        AJ = A[J][:, J]
        if abs(AJ - A).max() > rtol * abs(A).max():
            raise ValidationError(f"J does not preserve the {name} matrix")
    if not np.array_equal(result.free[J], result.free):
        raise ValidationError("J does not preserve the boundary conditions")
    psi = result.psi0
    return float(np.max(np.abs(psi - psi[J])))


def split_check(mesh: DiskMesh, piece_a, dirichlet_tags=()) -> dict:
    """Compare the whole-mesh lambda0 with the two pieces cut along triangle set ``piece_a``.

    Nodes on the cut are duplicated and free on both sides; boundary loops
    named in ``dirichlet_tags`` stay Dirichlet.
    """
    piece_a = np.asarray(piece_a, dtype=bool)
    if piece_a.shape != (len(mesh.triangles),) or piece_a.all() or not piece_a.any():
        raise ValidationError("piece must be a proper nonempty triangle subset")
    dset = mesh.loop_nodes(list(dirichlet_tags)) if dirichlet_tags else np.zeros(0, int)
    Ke, Me, _ = _element_data(mesh.corners)

    def lam(sel):
        tri = mesh.triangles[sel]
        used = np.unique(tri)
        remap = -np.ones(mesh.n, dtype=np.int64)
        remap[used] = np.arange(len(used))
        t = remap[tri]
        K = scatter(t, Ke[sel], len(used))
        M = scatter(t, Me[sel], len(used))
        d = remap[np.intersect1d(dset, used)]
        return solve_low_spectrum(K, M, d, count=1).lambda0

    whole = lam(np.ones(len(mesh.triangles), dtype=bool))
    la, lb = lam(piece_a), lam(~piece_a)
    return {"whole": whole, "piece_a": la, "piece_b": lb, "slack": whole - min(la, lb)}


# -- meshers ------------------------------------------------------------------

def _grid_triangles(idx):
    """Split each grid cell of an index array (ni, nj) into two triangles."""
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    return np.stack([a, b, c], 1), np.stack([a, c, d], 1), np.stack([a, b, d], 1), np.stack([b, c, d], 1)


def _orient(tri, z):
    zz = z[tri]
    area = np.imag(np.conj(zz[:, 1] - zz[:, 0]) * (zz[:, 2] - zz[:, 0]))
    flip = area < 0
    tri = tri.copy()
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def _structured(zgrid, idx):
    """Triangulate a structured patch choosing the shorter hyperbolic diagonal per cell."""
    t1, t2, t3, t4 = _grid_triangles(idx)
    zg = zgrid.ravel()
    lookup = {int(k): i for i, k in enumerate(idx.ravel())}
    pos = np.vectorize(lookup.get)
    a, c = pos(t1[:, 0]), pos(t1[:, 2])
    b, d = pos(t3[:, 1]), pos(t3[:, 2])
    dac = hc.disk_distance(zg[a], zg[c])
    dbd = hc.disk_distance(zg[b], zg[d])
    use_ac = dac <= dbd + 1e-12
    tri = np.concatenate([np.where(use_ac[:, None], t1, t3), np.where(use_ac[:, None], t2, t4)])
    return tri


def collar_mesh(l: float, h: float, interval=None, tags=("inner", "outer")) -> DiskMesh:
    """Structured mesh of the annulus S^1 x [r0, r1] in Fermi coordinates around a geodesic."""
    if not (l > 0 and h > 0):
        raise ValidationError("need positive length and mesh size")
    m = hc.collar_halfwidth(l)
    r0, r1 = interval if interval is not None else (-m, m)
    if not r1 > r0:
        raise ValidationError("empty radial interval")
    nr = max(2, int(math.ceil((r1 - r0) / h)))
    rmax = max(abs(r0), abs(r1))
    nx = max(3, int(math.ceil(l * math.cosh(rmax) / h)))
    x = np.linspace(0, l, nx + 1)
    r = np.linspace(r0, r1, nr + 1)
    XX, RR = np.meshgrid(x, r, indexing="ij")
    zgrid = hc.to_disk(hc.fermi_point(XX, RR))
    idx = np.arange((nx + 1) * (nr + 1)).reshape(nx + 1, nr + 1)
    tri_local = _structured(zgrid, idx)
    corners = zgrid.ravel()[tri_local]
    # identify the column x = l with x = 0
    node = idx.copy()
    node[-1, :] = node[0, :]
    keep = idx[:-1, :].ravel()
    renum = -np.ones(idx.size, dtype=np.int64)
    renum[keep] = np.arange(len(keep))
    glob = renum[node.ravel()]
    tri = glob[tri_local]
    pts = zgrid[:-1, :].ravel()
    flip = np.imag(np.conj(corners[:, 1] - corners[:, 0]) * (corners[:, 2] - corners[:, 0])) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    corners[flip] = corners[flip][:, [0, 2, 1]]
    loops = {}
    for tag, j in ((tags[0], 0), (tags[1], nr)):
        nodes = glob[idx[:-1, j]]
        seg = zgrid[:, j]
        loops[tag] = BoundaryLoop(tag, nodes, x[:-1] * math.cosh(r[j]), l * math.cosh(r[j]),
                                  segments=[seg] if abs(r[j]) < 1e-14 else [],
                                  kind="geodesic" if abs(r[j]) < 1e-14 else "equidistant")
    shift = np.roll(np.arange(nx), -1)
    J = (shift[:, None] * (nr + 1) + np.arange(nr + 1)[None, :]).ravel()
    mesh = DiskMesh(points=pts, triangles=tri, corners=corners, loops=loops,
                    expected_area=l * (math.sinh(r1) - math.sinh(r0)),
                    symmetry=J, meta={"kind": "collar", "l": l, "interval": (r0, r1),
                                      "r": np.tile(r, nx), "nx": nx, "nr": nr})
    # piece label: 0 below the core geodesic, 1 above
    rc = RR[:-1, :-1].ravel()
    cell_r = np.concatenate([rc, rc])
    mesh.piece = (cell_r + 0.5 * (r[1] - r[0]) > 0).astype(np.int64)
    return mesh


def disk_mesh(radius: float, h: float) -> DiskMesh:
    """Geodesic disk about the origin: concentric rings with 6k nodes on ring k."""
    if not (radius > 0 and h > 0):
        raise ValidationError("need positive radius and mesh size")
    nr = max(2, int(math.ceil(radius / h)))
    pts = [0j]
    rings = [np.array([0])]
    for k in range(1, nr + 1):
        rho = radius * k / nr
        nk = 6 * k
        ang = 2 * math.pi * np.arange(nk) / nk
        start = len(pts)
        pts.extend(math.tanh(rho / 2) * np.exp(1j * ang))
        rings.append(np.arange(start, start + nk))
    pts = np.array(pts)
    tris = []
    for k in range(1, nr + 1):
        inner, outer = rings[k - 1], rings[k]
        ni, no = len(inner), len(outer)
        if k == 1:
            tris.extend((0, outer[j], outer[(j + 1) % no]) for j in range(no))
            continue
        ai = np.angle(pts[inner]) % (2 * math.pi)
        ao = np.angle(pts[outer]) % (2 * math.pi)
        ai = np.append(ai, 2 * math.pi)
        ao = np.append(ao, 2 * math.pi)
        i = j = 0
        while i < ni or j < no:
            if j < no and (i >= ni or ao[j + 1] <= ai[i + 1]):
                tris.append((inner[i % ni], outer[j], outer[(j + 1) % no]))
                j += 1
            else:
                tris.append((inner[i], outer[j % no], inner[(i + 1) % ni]))
                i += 1
    tri = _orient(np.array(tris), pts)
    rim = rings[-1]
    loops = {"rim": BoundaryLoop("rim", rim, 2 * math.pi * math.sinh(radius) * np.arange(len(rim)) / len(rim),
                                 2 * math.pi * math.sinh(radius), kind="circle")}
    return DiskMesh(points=pts, triangles=tri, corners=pts[tri], loops=loops,
                    expected_area=2 * math.pi * (math.cosh(radius) - 1),
                    meta={"kind": "disk", "radius": radius})


class _NodeSet:
    """Accumulates points of one chart and merges coincident ones."""

    def __init__(self):
        self.z = []
        self.flags = []

    def add(self, z, flags):
        start = sum(len(a) for a in self.z)
        self.z.append(np.asarray(z, dtype=complex).ravel())
        self.flags.append(np.asarray(flags).ravel())
        return start + np.arange(self.z[-1].size)

    def merge(self, tol=1e-9):
        z = np.concatenate(self.z)
        flags = np.concatenate(self.flags)
        tree = cKDTree(np.stack([z.real, z.imag], 1))
        parent = np.arange(len(z))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in tree.query_pairs(tol):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(a) for a in range(len(z))])
        uniq, inv = np.unique(roots, return_inverse=True)
        merged_flags = np.zeros(len(uniq), dtype=flags.dtype)
        np.bitwise_or.at(merged_flags, inv, flags)
        return z[uniq], inv, merged_flags


ON_CUFF, ON_SEAM = 1, 2


def _polygon(v: int, l: float, h: float):
    """Right-angled 2v-gon with alternating sides l/2 (cuff halves) centred at 0.

    Built from 2v copies of one quadrilateral with three right angles, meshed
    on a grid in Fermi coordinates about the cuff.
    """
    alpha = l / 4
    gamma = math.asinh(math.cos(math.pi / v) / math.sinh(alpha))
    side_p, side_q, angle = hc.lambert_sides(alpha, gamma)
    O = hc.fermi_point(0.0, side_p)
    Q = hc.fermi_point(alpha, gamma)
    nr = max(2, int(math.ceil(max(side_p, gamma) / h)))
    nx = max(2, int(math.ceil(side_q / h)))
    xs = alpha * np.arange(nx + 1) / nx
    rho = np.empty(nx + 1)
    rho[0], rho[-1] = side_p, gamma
    for i in range(1, nx):
        def fx(t):
            X = hc.geodesic_between(O, Q, t)
            return math.atanh(X[1] / X[0]) - xs[i]
        t = optimize.brentq(fx, 0.0, 1.0, xtol=1e-15)
        rho[i] = math.asinh(hc.geodesic_between(O, Q, t)[2])
    RR = rho[:, None] * (np.arange(nr + 1) / nr)[None, :]
    XX = np.repeat(xs[:, None], nr + 1, axis=1)
    zq = hc.to_disk(hc.fermi_point(XX, RR))
    o = hc.to_disk(O)
    zq = hc.mobius_to_origin(zq, o)
    zq = zq * np.exp(-1j * np.angle(zq[0, 0]))  # midpoint of the cuff half on the positive axis
    if np.angle(zq[-1, -1]) < 0:
        zq = np.conj(zq)
    flags = np.zeros(zq.shape, dtype=np.int64)
    flags[:, 0] |= ON_CUFF
    flags[-1, :] |= ON_SEAM
    idx = np.arange(zq.size).reshape(zq.shape)
    tri_q = _structured(zq, idx)
    rot = np.exp(2j * math.pi / v)

    def sigma(z):
        return rot * np.conj(z)

    ns = _NodeSet()
    tris = []
    for k in range(v):
        for mirrored in (False, True):
            zz = sigma(zq) if mirrored else zq
            zz = zz * rot**k
            ids = ns.add(zz, flags)
            tris.append(ids.reshape(zq.shape).ravel()[tri_q])
    pts, inv, fl = ns.merge()
    tri = _orient(inv[np.concatenate(tris)], pts)
    geom = {"alpha": alpha, "gamma": gamma, "side_p": side_p, "side_q": side_q,
            "angle": angle, "nx": nx, "nr": nr, "p": abs(zq[0, 0]), "q": abs(zq[-1, -1]),
            "corner": zq[-1, 0]}
    return pts, tri, fl, geom


def _cuff_line_distance(z, k, v, p):
    """Distance from disk points to the geodesic carrying cuff half ``k`` of the polygon."""
    w = z * np.exp(-2j * math.pi * k / v)
    w = hc.mobius_to_origin(w, p)
    X1 = 2 * w.real / (1 - np.abs(w) ** 2)
    return np.arcsinh(np.abs(X1))


def _match(z_from, z_to, tol=1e-8):
    tree = cKDTree(np.stack([z_to.real, z_to.imag], 1))
    d, j = tree.query(np.stack([z_from.real, z_from.imag], 1))
    if np.any(d > tol):
        raise NumericalError("symmetric image of a node not found in the mesh")
    return j


def _ordered_cuff(pts, fl, k, v, geom):
    """Nodes of polygon cuff half k ordered from the corner at angle below to the one above."""
    on = np.flatnonzero(fl & ON_CUFF)
    ang = np.angle(pts[on] * np.exp(-2j * math.pi * k / v))
    sel = on[np.abs(ang) < math.pi / v]
    order = np.argsort(np.angle(pts[sel] * np.exp(-2j * math.pi * k / v)))
    return sel[order]


def _pants_ring(v: int, l: float, h: float):
    """Double of the right-angled 2v-gon along its seams."""
    pts, tri, fl, geom = _polygon(v, l, h)
    n = len(pts)
    seam = (fl & ON_SEAM) != 0
    q = geom["q"]
    cq = (1 + q * q) / (2 * q) * np.exp(1j * math.pi / v)
    R2 = abs(cq) ** 2 - 1
    pts_m = cq + R2 / np.conj(pts - cq)
    mirror_id = np.where(seam, np.arange(n), n + np.cumsum(~seam) - 1)
    n_tot = n + int((~seam).sum())
    points = np.empty(n_tot, dtype=complex)
    points[:n] = pts
    points[mirror_id[~seam]] = pts_m[~seam]
    tri_m = mirror_id[tri][:, [0, 2, 1]]
    triangles = np.concatenate([tri, tri_m])
    corners = np.concatenate([pts[tri], pts_m[tri][:, [0, 2, 1]]])
    piece = np.concatenate([np.zeros(len(tri), int), np.ones(len(tri), int)])
    # rotation by 2 pi / v, the same on both halves
    Jh = _match(pts * np.exp(2j * math.pi / v), pts)
    J = np.empty(n_tot, dtype=np.int64)
    J[:n] = Jh
    J[mirror_id] = mirror_id[Jh]
    loops = {}
    nx = geom["nx"]
    step = l / (4 * nx)
    base = _ordered_cuff(pts, fl, 0, v, geom)
    for k in range(v):
        half = base if k == 0 else None
        if k:
            half = base.copy()
            for _ in range(k):
                half = Jh[half]
        back = mirror_id[half[-2:0:-1]]
        nodes = np.concatenate([half, back])
        param = step * np.arange(len(nodes))
        segs = [pts[half], pts_m[half]]
        loops[f"cuff{k}"] = BoundaryLoop(f"cuff{k}", nodes, param, l, segments=segs)
    dist = np.full((n_tot, v), np.inf)
    for k in range(v):
        dk = _cuff_line_distance(pts, k, v, geom["p"])
        dist[:n, k] = dk
        dist[mirror_id, k] = dk
    return dict(points=points, triangles=triangles, corners=corners, loops=loops, J=J,
                dist=dist, piece=piece, geom=geom)


def _torus_ring(v: int, l: float, h: float):
    """v pants (cuffs all l) glued cyclically: cuff 2 of copy k to cuff 1 of copy k+1."""
    P = _pants_ring(3, l, h)
    n = len(P["points"])
    N = len(P["loops"]["cuff0"].nodes)
    parent = np.arange(n * v)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    c1 = P["loops"]["cuff1"].nodes
    c2 = P["loops"]["cuff2"].nodes
    rev = (-np.arange(N)) % N
    for k in range(v):
        a = k * n + c2
        b = ((k + 1) % v) * n + c1[rev]
        for x, y in zip(a, b):
            rx, ry = find(int(x)), find(int(y))
            if rx != ry:
                parent[max(rx, ry)] = min(rx, ry)
    roots = np.array([find(a) for a in range(n * v)])
    uniq, inv = np.unique(roots, return_inverse=True)
    nt = len(uniq)
    points = np.empty(nt, dtype=complex)
    points[inv] = np.tile(P["points"], v)
    triangles = np.concatenate([inv[k * n + P["triangles"]] for k in range(v)])
    corners = np.tile(P["corners"], (v, 1))
    piece = np.repeat(np.arange(v), len(P["triangles"]))
    J = np.empty(nt, dtype=np.int64)
    for k in range(v):
        J[inv[k * n + np.arange(n)]] = inv[((k + 1) % v) * n + np.arange(n)]
    loops = {}
    for k in range(v):
        src = P["loops"]["cuff0"]
        loops[f"cuff{k}"] = BoundaryLoop(f"cuff{k}", inv[k * n + src.nodes], src.param.copy(),
                                         l, segments=src.segments)
    dist = np.full((nt, v), np.inf)
    for k in range(v):
        dist[inv[k * n + np.arange(n)], k] = P["dist"][:, 0]
    # nodes shared between copies lie on inner cuffs, far from every outer cuff
    return dict(points=points, triangles=triangles, corners=corners, loops=loops, J=J,
                dist=dist, piece=piece, geom=P["geom"])


def fermi_band(l: float, r_max: float, base: int, h: float) -> dict:
    """Periodic band [0, l) x [0, r_max] in Fermi coordinates about a geodesic.

    Row 0 has ``base`` equally spaced nodes; the count doubles whenever the
    spacing along a row would exceed ``h``.  Nodes are numbered row by row.
    """
    nr = max(2, int(math.ceil(r_max / h)))
    r = np.linspace(0.0, r_max, nr + 1)
    counts = [base]
    for j in range(1, nr + 1):
        c = counts[-1]
        if l * math.cosh(r[j]) / c > h:
            c *= 2
        counts.append(c)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    rows = [offsets[j] + np.arange(c) for j, c in enumerate(counts)]
    z = np.concatenate([hc.to_disk(hc.fermi_point(l * np.arange(c) / c, np.full(c, r[j])))
                        for j, c in enumerate(counts)])
    tris, xs, rs = [], [], []

    def add(ids, xv, rv):
        tris.append(ids)
        xs.append(xv)
        rs.append(rv)

    for j in range(nr):
        c0, c1 = counts[j], counts[j + 1]
        lo, hi = rows[j], rows[j + 1]
        r0, r1 = r[j], r[j + 1]
        if c1 == c0:
            for i in range(c0):
                x0, x1 = l * i / c0, l * (i + 1) / c0
                a, b, c, d = lo[i], lo[(i + 1) % c0], hi[(i + 1) % c0], hi[i]
                add((a, b, c), (x0, x1, x1), (r0, r0, r1))
                add((a, c, d), (x0, x1, x0), (r0, r1, r1))
        else:
            for i in range(c0):
                x0, xm, x1 = l * i / c0, l * (i + 0.5) / c0, l * (i + 1) / c0
                a, b = lo[i], lo[(i + 1) % c0]
                o0, o1, o2 = hi[2 * i], hi[2 * i + 1], hi[(2 * i + 2) % c1]
                add((a, o1, o0), (x0, xm, x0), (r0, r1, r1))
                add((a, b, o1), (x0, x1, xm), (r0, r0, r1))
                add((b, o2, o1), (x1, x1, xm), (r0, r1, r1))
    tri = np.array(tris, dtype=np.int64)
    corners = hc.to_disk(hc.fermi_point(np.array(xs), np.array(rs)))
    flip = np.imag(np.conj(corners[:, 1] - corners[:, 0]) * (corners[:, 2] - corners[:, 0])) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    corners[flip] = corners[flip][:, [0, 2, 1]]
    return {"z": z, "triangles": tri, "corners": corners, "nodes": rows, "r": r}


def _attach_funnels(parts, spec: hc.CellSpec, h: float, r_trunc: float):
    l = spec.cuff_length
    points = [parts["points"]]
    triangles = [parts["triangles"]]
    corners = [parts["corners"]]
    piece = [parts["piece"]]
    n = len(parts["points"])
    loops = dict(parts["loops"])
    extra_area = 0.0
    dist_rows = []
    J_ext = {}
    for k, flag in enumerate(spec.funnels):
        if not flag:
            continue
        cuff = loops.pop(f"cuff{k}")
        N = len(cuff.nodes)
        band = fermi_band(l, r_trunc, N, h)
        local = band["nodes"]
        fresh = len(band["z"]) - N
        glob = np.empty(len(band["z"]), dtype=np.int64)
        glob[:N] = cuff.nodes
        glob[N:] = n + np.arange(fresh)
        points.append(band["z"][N:])
        triangles.append(glob[band["triangles"]])
        corners.append(band["corners"])
        piece.append(np.full(len(band["triangles"]), 1000 + k))
        top = local[-1]
        loops[f"funnel{k}"] = BoundaryLoop(f"funnel{k}", glob[top],
                                           l * math.cosh(r_trunc) * np.arange(len(top)) / len(top),
                                           l * math.cosh(r_trunc), kind="equidistant")
        J_ext[k] = (n, fresh)
        dist_rows.append(np.full((fresh, spec.v), np.inf))
        n += fresh
        extra_area += l * math.sinh(r_trunc)
    out = dict(parts)
    out.update(points=np.concatenate(points), triangles=np.concatenate(triangles),
               corners=np.concatenate(corners), piece=np.concatenate(piece), loops=loops)
    if dist_rows:
        out["dist"] = np.concatenate([parts["dist"]] + dist_rows)
    if any(spec.funnels):
        if all(spec.funnels):
            # rotate the funnel blocks along with the cell
            J = np.concatenate([parts["J"], np.zeros(n - len(parts["J"]), dtype=np.int64)])
            keys = sorted(J_ext)
            for a, k in enumerate(keys):
                start, fresh = J_ext[k]
                tgt = J_ext[keys[(a + 1) % len(keys)]][0]
                J[start:start + fresh] = tgt + np.arange(fresh)
            out["J"] = J
        else:
            out["J"] = None
    return out, extra_area


def mesh_cell(spec: hc.CellSpec, target_h: float, r_trunc: float = TOL.r_trunc,
              graded: bool = False) -> DiskMesh:
    """Mesh a cell; boundary loops are tagged cuff0..cuff{v-1} (funnel ends: funnel{k})."""
    if not target_h > 0:
        raise ValidationError("target_h must be positive")
    if spec.cuff_length < 0.01 and not graded:
        raise ValidationError("cuffs shorter than 0.01 need graded=True")
    if spec.topology == "pants_ring":
        parts = _pants_ring(spec.v, spec.cuff_length, target_h)
    else:
        parts = _torus_ring(spec.v, spec.cuff_length, target_h)
    parts, extra = _attach_funnels(parts, spec, target_h, r_trunc)
    mesh = DiskMesh(points=parts["points"], triangles=parts["triangles"],
                    corners=parts["corners"], loops=parts["loops"],
                    expected_area=spec.area + extra, symmetry=parts["J"],
                    cuff_distance=parts["dist"], piece=parts["piece"],
                    meta={"kind": "cell", "spec": spec, "geom": parts["geom"],
                          "r_trunc": r_trunc, "target_h": target_h})
    mesh.validate()
    return mesh


def funnel_strip_lambda0(l: float, h: float, r_trunc: float = TOL.r_trunc) -> float:
    """lambda0 of a funnel strip [0, r_trunc]: free along the geodesic, Dirichlet at the cut."""
    mesh = collar_mesh(l, h, interval=(0.0, r_trunc))
    return solve_mesh(mesh, ("outer",), count=1).lambda0


def write_spectrum_csv(path, result: SpectralResult) -> None:
    from .io_utils import atomic_write_text
    lines = ["index,eigenvalue,residual"]
    lines += [f"{i},{x:.17g},{r:.6e}" for i, (x, r) in enumerate(zip(result.eigenvalues, result.residuals))]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_mesh(path, mesh: DiskMesh) -> None:
    from .io_utils import atomic_write_json
    atomic_write_json(path, mesh.to_json())
