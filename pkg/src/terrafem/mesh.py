"""Meshes: periodic planes, spheres, columnar extrusions, spherical shells.

Geometry is stored per cell (unwrapped coordinates), so periodic topologies
need no coordinate wrapping tricks; topology (vertex ids, facet tables) is
kept separately and drives DOF identification.  Facet tables are built
combinatorially by the constructors, which keeps 1-cell-wide periodic
meshes (self-paired facets) well defined.
"""

import numpy as np

from .quadrature import Quadrature, gauss01, quadrature_rule

LOCAL_FACET_COUNT = {"interval": 2, "triangle": 3, "quad": 4, "prism": 5, "hex": 6}
FACET_SHAPE = {
    "triangle": ["interval"] * 3,
    "quad": ["interval"] * 4,
    "prism": ["triangle", "triangle", "quad", "quad", "quad"],
    "hex": ["quad", "quad", "quad", "quad", "quad", "quad"],
    "interval": ["point", "point"],
}

_REF_EDGE_VERTS = {
    "triangle": ((0, 1), (1, 2), (2, 0)),
    "quad": ((0, 1), (1, 2), (2, 3), (3, 0)),
}


class MeshError(ValueError):
    pass


class Facets:
    """Struct-of-arrays facet table.

    `cp`/`lfp` give the '+' side (cell id, local facet); `cm`/`lfm` the '-'
    side or -1 for exterior facets.  `reversed_m` says whether the '-' side
    traverses the shared facet parametrisation backwards relative to '+'.
    `vertical` marks extruded side-wall facets.
    """

    def __init__(self):
        self.cp, self.lfp, self.cm, self.lfm = [], [], [], []
        self.reversed_m, self.vertical, self.periodic = [], [], []

    def add(self, cp, lfp, cm=-1, lfm=-1, reversed_m=False, vertical=False,
            periodic=False):
        self.cp.append(cp)
        self.lfp.append(lfp)
        self.cm.append(cm)
        self.lfm.append(lfm)
        self.reversed_m.append(reversed_m)
        self.vertical.append(vertical)
        self.periodic.append(periodic)
        return len(self.cp) - 1

    def finalize(self):
        for name in ("cp", "lfp", "cm", "lfm"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=int))
        for name in ("reversed_m", "vertical", "periodic"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        return self

    def __len__(self):
        return len(self.cp)

    @property
    def interior(self):
        return np.nonzero(self.cm >= 0)[0]

    @property
    def exterior(self):
        return np.nonzero(self.cm < 0)[0]


class Mesh:
    def __init__(self, dim, cell_shape, cells, vertex_coords, cell_coords,
                 facets, map_class="affine", periodic=False):
        self.dim = dim
        self.cell_shape = cell_shape
        self.cells = np.asarray(cells, dtype=int)
        self.vertex_coords = np.asarray(vertex_coords, dtype=float)
        self.cell_coords = np.asarray(cell_coords, dtype=float)
        self.facets = facets
        self.map_class = map_class
        self.periodic = periodic
        self.shell = None          # (a, b) when composed with the R^4 shell map
        self.base = None           # base mesh for extrusions
        self.layers = 0
        self.column_index = None   # [ncells, 2] (base_cell, layer)
        self._vert_edges = {}
        self._horiz_edges = {}
        self._build_cell_facet_index()

    # -- topology ----------------------------------------------------------

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def n_vertices(self):
        return self.vertex_coords.shape[0]

    @property
    def gdim(self):
        return self.cell_coords.shape[2]

    @property
    def adim(self):
        """Ambient dimension of physical space (3 for shell meshes in R^4)."""
        return 3 if self.shell is not None else self.gdim

    def _build_cell_facet_index(self):
        nlf = LOCAL_FACET_COUNT[self.cell_shape]
        self.cell_facets = -np.ones((self.n_cells, nlf), dtype=int)
        self.cell_facet_side = np.zeros((self.n_cells, nlf), dtype=int)
        for f in range(len(self.facets)):
            cp, lfp = self.facets.cp[f], self.facets.lfp[f]
            self.cell_facets[cp, lfp] = f
            self.cell_facet_side[cp, lfp] = +1
            cm, lfm = self.facets.cm[f], self.facets.lfm[f]
            if cm >= 0:
                self.cell_facets[cm, lfm] = f
                self.cell_facet_side[cm, lfm] = -1
        if np.any(self.cell_facets < 0):
            raise MeshError("incomplete facet table")

    def euler_characteristic(self):
        return self.n_vertices - len(self.facets) + self.n_cells

    def edge3d_id(self, cell, local_edge):
        """Global id of a 3D edge entity, by extruded naming."""
        b, l = self.column_index[cell]
        kind = local_edge[0]
        if kind == "v":
            return self._vert_edges[(int(self.base.cells[b, local_edge[1]]), l)]
        _, be, lvl = local_edge
        bf = self.base.cell_facets[b, be]
        return self._horiz_edges[(bf, l + lvl)]

    @property
    def n_edges3d(self):
        return len(self._vert_edges) + len(self._horiz_edges)

    # -- geometry -----------------------------------------------------------

    def geometry(self, cells, pts):
        """Map reference points into physical space for a batch of cells.

        Returns (X [C,q,g], J [C,q,g,d], detJ [C,q], Jinv [C,q,d,g]).
        For surface meshes detJ is sqrt(det(J^T J)) and Jinv the pseudoinverse.
        """
        N, dN = geometry_shape_functions(self.cell_shape, pts)
        cc = self.cell_coords[cells]
        X = np.einsum("clg,lq->cqg", cc, N)
        J = np.einsum("clg,ldq->cqgd", cc, dN)
        if self.shell is not None:
            a = self.shell[0]
            lam = X[..., 3] / a
            JF = np.zeros(X.shape[:2] + (3, 4))
            for i in range(3):
                JF[..., i, i] = lam
                JF[..., i, 3] = X[..., i] / a
            J = np.einsum("cqij,cqjd->cqid", JF, J)
            X = lam[..., None] * X[..., :3]
        detJ, Jinv = _invert_jacobians(J)
        return X, J, detJ, Jinv

    def cell_normals(self, cells, pts):
        """Unit normals of surface cells (outward for oriented sphere meshes)."""
        _, J, _, _ = self.geometry(cells, pts)
        n = np.cross(J[..., 0], J[..., 1])
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def cell_volumes(self):
        q = quadrature_rule(self.cell_shape, 2)
        _, _, detJ, _ = self.geometry(np.arange(self.n_cells), q.points)
        return detJ @ q.weights

    def cell_diameters(self):
        cc = self.cell_coords
        if self.shell is not None:
            a = self.shell[0]
            cc = (cc[..., 3] / a)[..., None] * cc[..., :3]
        d = np.linalg.norm(cc[:, :, None, :] - cc[:, None, :, :], axis=-1)
        return d.reshape(self.n_cells, -1).max(axis=1)

    def __repr__(self):
        return (f"<Mesh {self.cell_shape} dim={self.dim} gdim={self.gdim} "
                f"cells={self.n_cells} facets={len(self.facets)}>")


def _invert_jacobians(J):
    g = J.shape[-2]
    d = J.shape[-1]
    if g == d:
        if d == 1:
            det = J[..., 0, 0]
            inv = 1.0 / det
            return det, inv[..., None, None]
        if d == 2:
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            inv = np.empty_like(J)
            inv[..., 0, 0] = J[..., 1, 1]
            inv[..., 0, 1] = -J[..., 0, 1]
            inv[..., 1, 0] = -J[..., 1, 0]
            inv[..., 1, 1] = J[..., 0, 0]
            inv = inv / det[..., None, None]
            return det, inv
        det = np.linalg.det(J)
        inv = np.linalg.inv(J)
        if np.any(det <= 0):
            raise MeshError("non-positive Jacobian determinant")
        return det, inv
    # embedded surface: 3x2
    G = np.einsum("...gd,...ge->...de", J, J)
    det = np.sqrt(G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0])
    Ginv = np.empty_like(G)
    Ginv[..., 0, 0] = G[..., 1, 1]
    Ginv[..., 0, 1] = -G[..., 0, 1]
    Ginv[..., 1, 0] = -G[..., 1, 0]
    Ginv[..., 1, 1] = G[..., 0, 0]
    Ginv = Ginv / (det ** 2)[..., None, None]
    Jinv = np.einsum("...de,...ge->...dg", Ginv, J)
    return det, Jinv


def geometry_shape_functions(shape, pts):
    pts = np.atleast_2d(pts)
    x = pts[:, 0]
    if shape == "interval":
        N = np.stack([1 - x, x])
        dN = np.zeros((2, 1, len(x)))
        dN[0, 0], dN[1, 0] = -1, 1
        return N, dN
    y = pts[:, 1]
    if shape == "triangle":
        N = np.stack([1 - x - y, x, y])
        dN = np.zeros((3, 2, len(x)))
        dN[0] = [[-1] * len(x), [-1] * len(x)]
        dN[1, 0], dN[2, 1] = 1, 1
        return N, dN
    if shape == "quad":
        N = np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y])
        dN = np.zeros((4, 2, len(x)))
        dN[0] = [-(1 - y), -(1 - x)]
        dN[1] = [(1 - y), -x]
        dN[2] = [y, x]
        dN[3] = [-y, (1 - x)]
        return N, dN
    z = pts[:, 2]
    base = "triangle" if shape == "prism" else "quad"
    Nb, dNb = geometry_shape_functions(base, pts[:, :2])
    nb = Nb.shape[0]
    N = np.concatenate([Nb * (1 - z), Nb * z])
    dN = np.zeros((2 * nb, 3, len(x)))
    dN[:nb, :2] = dNb * (1 - z)
    dN[nb:, :2] = dNb * z
    dN[:nb, 2] = -Nb
    dN[nb:, 2] = Nb
    return N, dN


# ---------------------------------------------------------------------------
# facet reference embeddings

def facet_embedding(shape, lf, fpts, reverse=False):
    """Map facet-reference points into cell-reference coordinates."""
    fpts = np.atleast_2d(fpts)
    if shape in ("triangle", "quad"):
        s = fpts[:, 0]
        if reverse:
            s = 1.0 - s
        from .element import REF_VERTICES, REF_EDGES
        a = REF_VERTICES[shape][REF_EDGES[shape][lf][0]]
        b = REF_VERTICES[shape][REF_EDGES[shape][lf][1]]
        return a[None, :] + s[:, None] * (b - a)[None, :]
    if shape in ("prism", "hex"):
        base = "triangle" if shape == "prism" else "quad"
        if lf in (0, 1):
            if reverse:
                raise MeshError("horizontal facets are never reversed")
            z = float(lf)
            return np.column_stack([fpts, np.full(len(fpts), z)])
        s, z = fpts[:, 0], fpts[:, 1]
        if reverse:
            s = 1.0 - s
        edge = facet_embedding(base, lf - 2, s[:, None])
        return np.column_stack([edge, z])
    raise MeshError(f"no facet embedding for {shape}")


def facet_quadrature(cell_shape, lf, degree):
    fshape = FACET_SHAPE[cell_shape][lf]
    if fshape == "interval":
        x, w = gauss01(degree // 2 + 1)
        return Quadrature(x[:, None], w, "interval", degree)
    return quadrature_rule(fshape, degree)


class FacetGeometry:
    """Geometric data for one facet at quadrature points (both traces)."""

    def __init__(self, mesh, fid, degree=None):
        F = mesh.facets
        cp, lfp = F.cp[fid], F.lfp[fid]
        cm, lfm = F.cm[fid], F.lfm[fid]
        if degree is None:
            degree = 6
        quad = facet_quadrature(mesh.cell_shape, lfp, degree)
        self.quad = quad
        self.fid = fid
        self.cells = (cp, cm)
        self.local = (lfp, lfm)
        self.interior = cm >= 0
        self.ref_plus = facet_embedding(mesh.cell_shape, lfp, quad.points)
        Xp, Jp, _, _ = mesh.geometry(np.array([cp]), self.ref_plus)
        self.x_plus = Xp[0]
        self.normal, self.measure_weights = _facet_normal_measure(
            mesh, cp, lfp, self.ref_plus, Jp[0], quad)
        if self.interior:
            self.ref_minus = facet_embedding(mesh.cell_shape, lfm, quad.points,
                                             reverse=bool(F.reversed_m[fid]))
            Xm, Jm, _, _ = mesh.geometry(np.array([cm]), self.ref_minus)
            self.x_minus = Xm[0]
            delta = self.x_plus - self.x_minus
            if np.max(np.abs(delta - delta[0])) > 1e-9 * (1 + np.max(np.abs(self.x_plus))):
                raise MeshError(f"facet {fid}: traces do not match")
            self.offset = delta[0]
            # each side's own outward co-normal; they oppose exactly except
            # across the dihedral angle of embedded-surface meshes
            self.normal_minus, _ = _facet_normal_measure(
                mesh, cm, lfm, self.ref_minus, Jm[0], quad)
        else:
            self.ref_minus = None
            self.x_minus = None
            self.offset = None
            self.normal_minus = None

    @property
    def area(self):
        return float(np.sum(self.measure_weights))


def _facet_normal_measure(mesh, cell, lf, ref_pts, J, quad):
    """Outward unit normal of `cell` on its facet, and measure-weighted weights."""
    shape = mesh.cell_shape
    # facet-parameter tangents in reference coords
    if shape in ("triangle", "quad"):
        e0 = facet_embedding(shape, lf, np.array([[0.0]]))[0]
        e1 = facet_embedding(shape, lf, np.array([[1.0]]))[0]
        T = np.einsum("qgd,d->qg", J, e1 - e0)
        tl = np.linalg.norm(T, axis=1)
        if np.any(tl < 1e-14):
            raise MeshError("degenerate facet")
        that = T / tl[:, None]
        if mesh.gdim == 2:
            n = np.column_stack([that[:, 1], -that[:, 0]])
        else:
            nsurf = np.cross(J[:, :, 0], J[:, :, 1])
            nsurf /= np.linalg.norm(nsurf, axis=1, keepdims=True)
            n = np.cross(that, nsurf)
        w = tl * quad.weights
    else:
        if lf in (0, 1):
            E = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        else:
            base = "triangle" if shape == "prism" else "quad"
            e0 = facet_embedding(base, lf - 2, np.array([[0.0]]))[0]
            e1 = facet_embedding(base, lf - 2, np.array([[1.0]]))[0]
            E = np.zeros((3, 2))
            E[:2, 0] = e1 - e0
            E[2, 1] = 1.0
        T = np.einsum("qgd,df->qgf", J, E)
        nvec = np.cross(T[:, :, 0], T[:, :, 1])
        area = np.linalg.norm(nvec, axis=1)
        if np.any(area < 1e-14):
            raise MeshError("degenerate facet")
        n = nvec / area[:, None]
        w = area * quad.weights
    # orient outward via the cell centroid
    centre_ref = {"triangle": [1 / 3, 1 / 3], "quad": [0.5, 0.5],
                  "prism": [1 / 3, 1 / 3, 0.5], "hex": [0.5, 0.5, 0.5]}[shape]
    C, _, _, _ = mesh.geometry(np.array([cell]), np.array([centre_ref]))
    Xf, _, _, _ = mesh.geometry(np.array([cell]), ref_pts[:1])
    if np.dot(n[0], Xf[0, 0] - C[0, 0]) < 0:
        n = -n
    return n, w


def facet_geometry(mesh, fid, degree=None):
    """Spec op: (outward '+' normal, facet measure, trace points on both sides)."""
    fg = FacetGeometry(mesh, fid, degree)
    return fg.normal, fg.area, (fg.x_plus, fg.x_minus)


# ---------------------------------------------------------------------------
# builders

def single_cell_mesh(shape, coords=None):
    """One reference (or mapped) cell with exterior facets; for element tests."""
    from .element import REF_VERTICES
    if coords is None:
        if shape in REF_VERTICES:
            coords = REF_VERTICES[shape]
        elif shape == "prism":
            t = REF_VERTICES["triangle"]
            coords = np.vstack([np.column_stack([t, np.zeros(3)]),
                                np.column_stack([t, np.ones(3)])])
        elif shape == "hex":
            q = REF_VERTICES["quad"]
            coords = np.vstack([np.column_stack([q, np.zeros(4)]),
                                np.column_stack([q, np.ones(4)])])
    coords = np.asarray(coords, dtype=float)
    cells = np.arange(len(coords))[None, :]
    facets = Facets()
    for lf in range(LOCAL_FACET_COUNT[shape]):
        facets.add(0, lf)
    dim = SHAPE_DIM_LOCAL[shape]
    return Mesh(dim, shape, cells, coords, coords[None, :, :], facets.finalize())


SHAPE_DIM_LOCAL = {"interval": 1, "triangle": 2, "quad": 2, "prism": 3, "hex": 3}


def build_interval_mesh(n, L=1.0):
    if n < 1 or L <= 0:
        raise MeshError("need n >= 1 and L > 0")
    x = np.linspace(0.0, L, n + 1)
    cells = np.array([[i, i + 1] for i in range(n)])
    coords = x[:, None]
    cc = coords[cells]
    facets = Facets()
    facets.add(0, 0)
    for i in range(n - 1):
        facets.add(i, 1, i + 1, 0)
    facets.add(n - 1, 1)
    return Mesh(1, "interval", cells, coords, cc, facets.finalize())


def build_periodic_rect(nx, ny, Lx, Ly, cell_shape="quad"):
    """Doubly-periodic rectangle mesh (flat torus)."""
    return _build_rect(nx, ny, Lx, Ly, cell_shape, periodic=True)


def build_rect(nx, ny, Lx, Ly, cell_shape="quad"):
    """Plain (non-periodic) rectangle mesh with boundary facets."""
    return _build_rect(nx, ny, Lx, Ly, cell_shape, periodic=False)


def _build_rect(nx, ny, Lx, Ly, cell_shape, periodic):
    if nx < 1 or ny < 1:
        raise MeshError("cell counts must be >= 1")
    if Lx <= 0 or Ly <= 0:
        raise MeshError("side lengths must be positive")
    if cell_shape not in ("quad", "triangle"):
        raise MeshError(f"cell_shape must be quad or triangle, got {cell_shape}")
    hx, hy = Lx / nx, Ly / ny

    if periodic:
        def vid(i, j):
            return (i % nx) + (j % ny) * nx
        nv = nx * ny
        vcoords = np.array([[ (k % nx) * hx, (k // nx) * hy] for k in range(nv)])
    else:
        def vid(i, j):
            return i + j * (nx + 1)
        nv = (nx + 1) * (ny + 1)
        vcoords = np.array([[ (k % (nx + 1)) * hx, (k // (nx + 1)) * hy]
                            for k in range(nv)])

    def corners(i, j):
        pts = np.array([[i * hx, j * hy], [(i + 1) * hx, j * hy],
                        [(i + 1) * hx, (j + 1) * hy], [i * hx, (j + 1) * hy]])
        ids = [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
        return pts, ids

    cells, ccoords = [], []
    if cell_shape == "quad":
        def cid(i, j):
            return i + j * nx
        for j in range(ny):
            for i in range(nx):
                pts, ids = corners(i, j)
                cells.append(ids)
                ccoords.append(pts)
        facets = Facets()
        for j in range(ny):
            for i in range(nx):
                right_in = periodic or i < nx - 1
                if right_in:
                    per = periodic and i == nx - 1
                    facets.add(cid(i, j), 1, cid((i + 1) % nx, j), 3,
                               reversed_m=True, periodic=per)
                else:
                    facets.add(cid(i, j), 1)
                top_in = periodic or j < ny - 1
                if top_in:
                    per = periodic and j == ny - 1
                    facets.add(cid(i, j), 2, cid(i, (j + 1) % ny), 0,
                               reversed_m=True, periodic=per)
                else:
                    facets.add(cid(i, j), 2)
                if not periodic and i == 0:
                    facets.add(cid(i, j), 3)
                if not periodic and j == 0:
                    facets.add(cid(i, j), 0)
    else:
        # split along the lower-left -> upper-right diagonal (fixed convention)
        def cid(i, j, t):
            return 2 * (i + j * nx) + t
        for j in range(ny):
            for i in range(nx):
                pts, ids = corners(i, j)
                cells.append([ids[0], ids[1], ids[2]])   # A: ll, lr, ur
                ccoords.append(pts[[0, 1, 2]])
                cells.append([ids[0], ids[2], ids[3]])   # B: ll, ur, ul
                ccoords.append(pts[[0, 2, 3]])
        facets = Facets()
        for j in range(ny):
            for i in range(nx):
                A, B = cid(i, j, 0), cid(i, j, 1)
                facets.add(A, 2, B, 0, reversed_m=True)   # diagonal
                right_in = periodic or i < nx - 1
                if right_in:
                    per = periodic and i == nx - 1
                    facets.add(A, 1, cid((i + 1) % nx, j, 1), 2,
                               reversed_m=True, periodic=per)
                else:
                    facets.add(A, 1)
                top_in = periodic or j < ny - 1
                if top_in:
                    per = periodic and j == ny - 1
                    facets.add(B, 1, cid(i, (j + 1) % ny, 0), 0,
                               reversed_m=True, periodic=per)
                else:
                    facets.add(B, 1)
                if not periodic and i == 0:
                    facets.add(B, 2)
                if not periodic and j == 0:
                    facets.add(A, 0)
    mesh = Mesh(2, cell_shape, np.array(cells), vcoords, np.array(ccoords),
                facets.finalize(), map_class="affine", periodic=periodic)
    return mesh


def _orient_outward(cells, coords):
    """Flip vertex order so cross(e1,e2) points away from the origin."""
    out = cells.copy()
    for c in range(len(cells)):
        p = coords[cells[c]]
        n = np.cross(p[1] - p[0], p[2] - p[0])
        if np.dot(n, p.mean(axis=0)) < 0:
            out[c] = cells[c][::-1]
    return out


def _surface_facets(cells, shape):
    """Vertex-pair matched facets for a closed oriented surface."""
    edges = {}
    facets = Facets()
    edge_verts = _REF_EDGE_VERTS[shape]
    for c in range(len(cells)):
        for lf, (i, j) in enumerate(edge_verts):
            a, b = cells[c][i], cells[c][j]
            key = (min(a, b), max(a, b))
            if key in edges:
                (c0, lf0, d0) = edges.pop(key)
                rev = d0 != (b, a)
                facets.add(c0, lf0, c, lf, reversed_m=not rev)
                # consistently oriented surfaces traverse shared edges oppositely
                if d0 == (a, b):
                    raise MeshError("surface orientation is inconsistent")
            else:
                edges[key] = (c, lf, (a, b))
    if edges:
        raise MeshError("surface is not closed")
    return facets.finalize()


_ICO_VERTS = None
_ICO_FACES = None


def _icosahedron():
    global _ICO_VERTS, _ICO_FACES
    if _ICO_VERTS is None:
        phi = (1.0 + np.sqrt(5.0)) / 2.0
        v = []
        for a in (-1.0, 1.0):
            for b in (-phi, phi):
                v += [(a, b, 0.0), (0.0, a, b), (b, 0.0, a)]
        v = np.array(v)
        v /= np.linalg.norm(v[0])
        # faces by nearest-neighbour triangles
        faces = []
        d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        edge = np.isclose(d2, d2[d2 > 1e-9].min())
        for i in range(12):
            for j in range(i + 1, 12):
                if not edge[i, j]:
                    continue
                for k in range(j + 1, 12):
                    if edge[i, k] and edge[j, k]:
                        faces.append((i, j, k))
        _ICO_VERTS, _ICO_FACES = v, np.array(faces)
    return _ICO_VERTS.copy(), _ICO_FACES.copy()


def build_icosahedral_sphere(refinements, radius=1.0):
    """Icosahedral triangulation, midpoint-refined and radially projected."""
    if refinements < 0:
        raise MeshError("refinements must be >= 0")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(refinements):
        mid = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                m = 0.5 * (np.asarray(verts[a]) + np.asarray(verts[b]))
                verts.append(m / np.linalg.norm(m))
                mid[key] = len(verts) - 1
            return mid[key]

        for (i, j, k) in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, ij, ki), (ij, j, jk), (ki, jk, k), (ij, jk, ki)]
        faces = np.array(new_faces)
    coords = radius * np.array([v / np.linalg.norm(v) for v in verts])
    cells = _orient_outward(np.asarray(faces), coords)
    facets = _surface_facets(cells, "triangle")
    mesh = Mesh(2, "triangle", cells, coords, coords[cells], facets,
                map_class="affine")
    return mesh


def build_cubed_sphere(n_per_face, radius=1.0):
    """Equiangular gnomonic cubed sphere with 6 n^2 quadrilateral cells."""
    if n_per_face < 1:
        raise MeshError("n_per_face must be >= 1")
    n = n_per_face
    ang = np.linspace(-np.pi / 4.0, np.pi / 4.0, n + 1)
    t = np.tan(ang)
    vid = {}
    coords = []

    def get_vertex(p):
        key = tuple(np.round(p, 12))
        if key not in vid:
            vid[key] = len(coords)
            coords.append(np.asarray(p) / np.linalg.norm(p) * radius)
        return vid[key]

    frames = [  # (axis vector, u vector, v vector) per cube face
        (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])),
        (np.array([-1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0])),
        (np.array([0, 1.0, 0]), np.array([0, 0, 1.0]), np.array([1.0, 0, 0])),
        (np.array([0, -1.0, 0]), np.array([1.0, 0, 0]), np.array([0, 0, 1.0])),
        (np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0])),
        (np.array([0, 0, -1.0]), np.array([0, 1.0, 0]), np.array([1.0, 0, 0])),
    ]
    cells = []
    for (w, eu, ev) in frames:
        ids = np.empty((n + 1, n + 1), dtype=int)
        for i in range(n + 1):
            for j in range(n + 1):
                ids[i, j] = get_vertex(w + t[i] * eu + t[j] * ev)
        for i in range(n):
            for j in range(n):
                cells.append([ids[i, j], ids[i + 1, j],
                              ids[i + 1, j + 1], ids[i, j + 1]])
    coords = np.array(coords)
    cells = _orient_outward(np.array(cells), coords)
    facets = _surface_facets(cells, "quad")
    return Mesh(2, "quad", cells, coords, coords[cells], facets,
                map_class="multilinear")


def extrude(base, layers, layer_heights, shift=None, coord_start=0.0):
    """Columnar extrusion of a 2D mesh into prisms or hexes.

    shift: optional terrain perturbation of the vertical coordinate only;
    either callable(x, y, z) -> z' (evaluated per base vertex so periodic
    copies stay conforming) or an array [n_base_vertices, layers+1].
    """
    if base.dim != 2:
        raise MeshError("extrusion needs a 2D base mesh")
    heights = np.asarray(layer_heights, dtype=float)
    if len(heights) != layers or np.any(heights <= 0):
        raise MeshError("layer_heights must be `layers` positive values")
    levels = np.concatenate([[0.0], np.cumsum(heights)]) + coord_start
    nlev = layers + 1
    NVb = base.n_vertices

    zgrid = np.tile(levels, (NVb, 1))
    if shift is not None:
        if callable(shift):
            vx = base.vertex_coords[:, 0]
            vy = base.vertex_coords[:, 1] if base.vertex_coords.shape[1] > 1 else 0 * vx
            for l in range(nlev):
                zgrid[:, l] = shift(vx, vy, np.full(NVb, levels[l]))
        else:
            zgrid = np.asarray(shift, dtype=float)
            if zgrid.shape != (NVb, nlev):
                raise MeshError("shift array must be [n_base_vertices, layers+1]")
        if np.any(np.diff(zgrid, axis=1) <= 0):
            raise MeshError("layer collapse: non-positive layer height after shift")

    shape = "prism" if base.cell_shape == "triangle" else "hex"
    nvb = base.cells.shape[1]
    gdim = base.gdim + 1

    vcoords = np.empty((NVb * nlev, gdim))
    for l in range(nlev):
        vcoords[l * NVb:(l + 1) * NVb, :base.gdim] = base.vertex_coords
        vcoords[l * NVb:(l + 1) * NVb, -1] = zgrid[:, l]

    cells, ccoords, column = [], [], []
    for b in range(base.n_cells):
        vids = base.cells[b]
        bc = base.cell_coords[b]
        for l in range(layers):
            bot = [v + l * NVb for v in vids]
            top = [v + (l + 1) * NVb for v in vids]
            cells.append(bot + top)
            cc = np.empty((2 * nvb, gdim))
            cc[:nvb, :base.gdim] = bc
            cc[nvb:, :base.gdim] = bc
            cc[:nvb, -1] = zgrid[vids, l]
            cc[nvb:, -1] = zgrid[vids, l + 1]
            ccoords.append(cc)
            column.append((b, l))

    def cid(b, l):
        return b * layers + l

    facets = Facets()
    for b in range(base.n_cells):
        facets.add(cid(b, 0), 0)  # bottom lid
        for l in range(layers - 1):
            facets.add(cid(b, l), 1, cid(b, l + 1), 0)
        facets.add(cid(b, layers - 1), 1)  # top lid
    BF = base.facets
    for f in range(len(BF)):
        cp, lfp, cm, lfm = BF.cp[f], BF.lfp[f], BF.cm[f], BF.lfm[f]
        for l in range(layers):
            if cm >= 0:
                facets.add(cid(cp, l), 2 + lfp, cid(cm, l), 2 + lfm,
                           reversed_m=bool(BF.reversed_m[f]), vertical=True,
                           periodic=bool(BF.periodic[f]))
            else:
                facets.add(cid(cp, l), 2 + lfp, vertical=True)

    if shift is not None:
        map_class = "invariant_base"
    elif base.map_class == "affine":
        map_class = "affine"
    else:
        map_class = "multilinear"
    mesh = Mesh(3, shape, np.array(cells), vcoords, np.array(ccoords),
                facets.finalize(), map_class=map_class, periodic=base.periodic)
    mesh.base = base
    mesh.layers = layers
    mesh.column_index = np.array(column, dtype=int)
    k = 0
    for v in range(NVb):
        for l in range(layers):
            mesh._vert_edges[(v, l)] = k
            k += 1
    m = 0
    for f in range(len(BF)):
        for l in range(nlev):
            mesh._horiz_edges[(f, l)] = m
            m += 1
    return mesh


def build_shell_mesh(base_sphere, layers, a, b):
    """Tensor-product shell: extrude the sphere into R^4 and apply the shell map."""
    if not (b > a > 0):
        raise MeshError("need b > a > 0")
    r = np.linalg.norm(base_sphere.vertex_coords, axis=1)
    if np.max(np.abs(r - a)) > 1e-9 * a:
        raise MeshError("base sphere vertices must sit at radius a")
    mesh = extrude(base_sphere, layers, [(b - a) / layers] * layers,
                   coord_start=a)
    mesh.shell = (float(a), float(b))
    mesh.map_class = "composed"
    return mesh


def shell_map(a):
    """F(x1,x2,x3,x4) = (x1,x2,x3)(1 + (x4-a)/a) and its inverse."""
    def F(x):
        x = np.atleast_2d(x)
        return (x[:, 3] / a)[:, None] * x[:, :3]

    def Finv(y):
        y = np.atleast_2d(y)
        r = np.linalg.norm(y, axis=1)
        return np.column_stack([a * y / r[:, None], r])
    return F, Finv


def jitter_mesh(mesh, amount, seed, vertical_only=False):
    """Random vertex perturbation by `amount` * local h (re-jittered per level).

    Periodic copies move together (displacement keyed by topological vertex).
    With vertical_only=True only vertical coordinates move, preserving the
    invariant-on-base map class; interior levels only, so the slab thickness
    is unchanged.
    """
    rng = np.random.default_rng(seed)
    out = Mesh.__new__(Mesh)
    out.__dict__.update(mesh.__dict__)
    out.cell_coords = mesh.cell_coords.copy()
    if mesh.dim == 3:
        base = mesh.base
        NVb = base.n_vertices
        nlev = mesh.layers + 1
        hxy = np.min(base.cell_diameters())
        hz = np.min(np.abs(np.diff(sorted(set(np.round(mesh.vertex_coords[:, -1], 12))))))
        disp = rng.uniform(-1.0, 1.0, size=(NVb, nlev, 3))
        disp[:, :, :2] *= amount * hxy
        disp[:, :, 2] *= amount * hz
        disp[:, 0, 2] = 0.0
        disp[:, -1, 2] = 0.0
        if vertical_only:
            disp[:, :, :2] = 0.0
        nvb = base.cells.shape[1]
        for c in range(mesh.n_cells):
            b, l = mesh.column_index[c]
            vids = base.cells[b]
            out.cell_coords[c, :nvb] += disp[vids, l]
            out.cell_coords[c, nvb:] += disp[vids, l + 1]
        out.map_class = "invariant_base" if vertical_only else "multilinear"
    else:
        h = np.min(mesh.cell_diameters())
        disp = rng.uniform(-1.0, 1.0, size=(mesh.n_vertices, mesh.gdim)) * amount * h
        for c in range(mesh.n_cells):
            out.cell_coords[c] += disp[mesh.cells[c]]
        out.map_class = "multilinear"
    return out


# ---------------------------------------------------------------------------
# text format

def write_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"mesh {mesh.dim} {mesh.gdim} {mesh.n_cells} {mesh.n_vertices}\n")
        fh.write(f"shape {mesh.cell_shape}\n")
        fh.write(f"class {mesh.map_class}\n")
        if mesh.shell:
            fh.write(f"shell {mesh.shell[0]!r} {mesh.shell[1]!r}\n")
        for v in mesh.vertex_coords:
            fh.write(" ".join(repr(x) for x in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(i) for i in c) + "\n")
        fh.write("cellcoords\n")
        for cc in mesh.cell_coords:
            fh.write(" ".join(repr(x) for x in cc.ravel()) + "\n")
        fh.write("facets\n")
        F = mesh.facets
        for f in range(len(F)):
            fh.write(f"{F.cp[f]} {F.lfp[f]} {F.cm[f]} {F.lfm[f]} "
                     f"{int(F.reversed_m[f])} {int(F.vertical[f])} "
                     f"{int(F.periodic[f])}\n")
        if np.any(F.periodic):
            fh.write("periodic\n")
            for f in np.nonzero(F.periodic)[0]:
                fh.write(f"{f}\n")
        if mesh.column_index is not None:
            fh.write("column\n")
            for c, (b, l) in enumerate(mesh.column_index):
                fh.write(f"{c} {b} {l}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[0] != "mesh":
        raise MeshError(f"{path}: not a mesh file")
    dim, gdim, ncells, nverts = (int(x) for x in head[1:])
    i = 1
    shape = "quad"
    map_class = "affine"
    shell = None
    while lines[i].split()[0] in ("shape", "class", "shell"):
        tok = lines[i].split()
        if tok[0] == "shape":
            shape = tok[1]
        elif tok[0] == "class":
            map_class = tok[1]
        else:
            shell = (float(tok[1]), float(tok[2]))
        i += 1
    vcoords = np.array([[float(x) for x in lines[i + k].split()]
                        for k in range(nverts)])
    i += nverts
    cells = np.array([[int(x) for x in lines[i + k].split()]
                      for k in range(ncells)])
    i += ncells
    if lines[i] != "cellcoords":
        raise MeshError(f"{path}: missing cellcoords section")
    i += 1
    nloc = cells.shape[1]
    cc = np.array([[float(x) for x in lines[i + k].split()]
                   for k in range(ncells)]).reshape(ncells, nloc, gdim)
    i += ncells
    if lines[i] != "facets":
        raise MeshError(f"{path}: missing facets section")
    i += 1
    facets = Facets()
    while i < len(lines) and lines[i] not in ("periodic", "column"):
        cp, lfp, cm, lfm, rev, vert, per = (int(x) for x in lines[i].split())
        facets.add(cp, lfp, cm, lfm, bool(rev), bool(vert), bool(per))
        i += 1
    column = None
    while i < len(lines):
        if lines[i] == "column":
            i += 1
            column = []
            while i < len(lines) and len(lines[i].split()) == 3:
                _, b, l = (int(x) for x in lines[i].split())
                column.append((b, l))
                i += 1
        else:
            i += 1
    mesh = Mesh(dim, shape, cells, vcoords, cc, facets.finalize(),
                map_class=map_class)
    mesh.shell = shell
    if column is not None:
        mesh.column_index = np.array(column, dtype=int)
        mesh.layers = int(mesh.column_index[:, 1].max()) + 1
    return mesh
