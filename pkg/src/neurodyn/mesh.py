"""Triangle meshes, the cotangent Laplacian, and geometric eigenmodes.

The surface Laplace operator is discretized with linear FEM cotangent
weights and a lumped (barycentric) vertex mass vector. Eigenmodes solve
the generalized symmetric problem ``L psi = lam M psi``; they come back
sorted by eigenvalue, mass-orthonormal, and sign-fixed so the largest
magnitude entry of each column is positive.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

from .errors import ConvergenceFailure, DegenerateMesh, LengthMismatch

MIN_TRIANGLE_AREA = 1e-12

# dense generalized solve below this vertex count, shift-invert Lanczos above
DENSE_SOLVE_LIMIT = 2000


class TriangleMesh:
    """Immutable triangle surface mesh.

    Parameters
    ----------
    vertices : array_like, shape (V, 3)
        Vertex positions in mm.
    faces : array_like, shape (F, 3)
        Vertex index triples. Every index must lie in ``[0, V)``, no face
        may repeat an index, and every triangle area must exceed
        ``MIN_TRIANGLE_AREA``.
    """

    def __init__(self, vertices, faces):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DegenerateMesh(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise DegenerateMesh(f"faces must be (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise DegenerateMesh("non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise DegenerateMesh("face index out of range")
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(same):
            raise DegenerateMesh(f"{int(same.sum())} faces repeat a vertex index")
        self.vertices = v
        self.faces = f
        areas = self.face_areas()
        if np.any(areas <= MIN_TRIANGLE_AREA):
            raise DegenerateMesh(
                f"{int((areas <= MIN_TRIANGLE_AREA).sum())} faces with area <= {MIN_TRIANGLE_AREA}"
            )

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def face_areas(self) -> np.ndarray:
        """Area of each triangle."""
        p = self.vertices
        f = self.faces
        cr = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        return 0.5 * np.sqrt((cr * cr).sum(axis=1))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) array with e[0] < e[1]."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_lengths(self, edges=None) -> np.ndarray:
        if edges is None:
            edges = self.edges()
        d = self.vertices[edges[:, 0]] - self.vertices[edges[:, 1]]
        return np.sqrt((d * d).sum(axis=1))

    def vertex_adjacency(self):
        """Neighbor lists per vertex, each sorted ascending."""
        e = self.edges()
        neigh = [[] for _ in range(self.n_vertices)]
        for a, b in e:
            neigh[a].append(int(b))
            neigh[b].append(int(a))
        return [sorted(n) for n in neigh]


@dataclass
class EigenmodeBasis:
    """Geometric eigenmodes of a mesh.

    modes: (V, N) matrix, one eigenfunction per column.
    eigenvalues: N ascending nonnegative values (1/mm^2).
    mass: lumped vertex mass vector (area units).
    """

    modes: np.ndarray
    eigenvalues: np.ndarray
    mass: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.modes.shape[0]


def build_laplacian(mesh: TriangleMesh):
    """Assemble the cotangent stiffness matrix and lumped mass vector.

    Returns
    -------
    stiffness : csr_matrix, shape (V, V)
        Symmetric PSD matrix with zero row sums. The off-diagonal entry
        for edge (i, j) is ``-(cot a + cot b) / 2`` over the angles
        opposite the edge; boundary edges see a single cotangent.
    mass : ndarray, shape (V,)
        Barycentric vertex areas (one third of incident triangle area).
    """
    p = mesh.vertices
    f = mesh.faces
    nv = mesh.n_vertices
    i0, i1, i2 = f[:, 0], f[:, 1], f[:, 2]
    v0, v1, v2 = p[i0], p[i1], p[i2]
    # cot of the angle at each corner = dot / (2 * area) of adjacent edges
    cr = np.cross(v1 - v0, v2 - v0)
    dbl_area = np.sqrt((cr * cr).sum(axis=1))
    cot0 = ((v1 - v0) * (v2 - v0)).sum(axis=1) / dbl_area
    cot1 = ((v0 - v1) * (v2 - v1)).sum(axis=1) / dbl_area
    cot2 = ((v0 - v2) * (v1 - v2)).sum(axis=1) / dbl_area
    # angle at corner k weighs the opposite edge; obtuse angles keep their
    # negative cotangent so the bilinear form stays exact
    w12, w02, w01 = 0.5 * cot0, 0.5 * cot1, 0.5 * cot2
    rows = np.concatenate([i1, i2, i0, i2, i0, i1, i0, i1, i2])
    cols = np.concatenate([i2, i1, i2, i0, i1, i0, i0, i1, i2])
    vals = np.concatenate(
        [-w12, -w12, -w02, -w02, -w01, -w01, w01 + w02, w01 + w12, w02 + w12]
    )
    stiffness = sparse.csr_matrix((vals, (rows, cols)), shape=(nv, nv))
    areas = 0.5 * dbl_area
    mass = np.zeros(nv)
    third = areas / 3.0
    np.add.at(mass, i0, third)
    np.add.at(mass, i1, third)
    np.add.at(mass, i2, third)
    if np.any(mass <= 0):
        raise DegenerateMesh("vertex with non-positive lumped mass (isolated vertex?)")
    return stiffness, mass


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    """Flip columns so the entry of largest magnitude is positive."""
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    return modes * signs


def compute_eigenmodes(stiffness, mass, n_modes: int, seed: int = 0) -> EigenmodeBasis:
    """Solve ``L psi = lam M psi`` for the lowest ``n_modes`` pairs.

    The mass matrix is the diagonal of ``mass``, so the generalized
    problem is whitened to a standard symmetric one. Dense below
    ``DENSE_SOLVE_LIMIT`` vertices, shift-invert Lanczos above (with a
    deterministic start vector drawn from ``seed``).

    Raises ConvergenceFailure when any residual
    ``|L psi - lam M psi| / |M psi|`` exceeds 1e-6.
    """
    mass = np.asarray(mass, dtype=np.float64)
    nv = mass.shape[0]
    if n_modes < 1 or n_modes > nv:
        raise LengthMismatch(f"n_modes={n_modes} outside [1, {nv}]")
    inv_sqrt_m = 1.0 / np.sqrt(mass)
    if nv <= DENSE_SOLVE_LIMIT:
        a = stiffness.toarray() if sparse.issparse(stiffness) else np.asarray(stiffness)
        sym = a * inv_sqrt_m[:, None] * inv_sqrt_m[None, :]
        sym = 0.5 * (sym + sym.T)
        vals, vecs = eigh(sym, subset_by_index=(0, n_modes - 1))
    else:
        a = sparse.csr_matrix(stiffness)
        d = sparse.diags(inv_sqrt_m)
        sym = (d @ a @ d).tocsc()
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(nv)
        try:
            vals, vecs = eigsh(sym, k=n_modes, sigma=-1e-3, which="LM", v0=v0)
        except Exception as exc:  # ArpackNoConvergence and friends
            raise ConvergenceFailure(f"eigensolver failed: {exc}") from exc
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
    modes = vecs * inv_sqrt_m[:, None]
    modes = _fix_signs(modes)
    # PSD problem: clamp the round-off negatives near zero
    vals = np.where((vals < 0) & (vals > -1e-8), 0.0, vals)
    residuals = _eigen_residuals(stiffness, mass, modes, vals)
    if np.any(residuals > 1e-6):
        raise ConvergenceFailure(
            f"eigenpair residuals up to {residuals.max():.3e} exceed 1e-6"
        )
    return EigenmodeBasis(modes=modes, eigenvalues=vals, mass=mass)


def _eigen_residuals(stiffness, mass, modes, vals):
    lm = stiffness @ modes
    mm = modes * mass[:, None]
    num = np.linalg.norm(lm - mm * vals[None, :], axis=0)
    den = np.linalg.norm(mm, axis=0)
    return num / den


def mass_inner_product(u, v, mass) -> float:
    """Mass-weighted inner product ``sum_i u_i m_i v_i``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    if not (u.shape == v.shape == mass.shape):
        raise LengthMismatch(
            f"incompatible lengths: u {u.shape}, v {v.shape}, mass {mass.shape}"
        )
    return float(np.sum(u * mass * v))


# --- mesh factories ---------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosahedron subdivided ``subdivisions`` times, projected to a sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        midpoint = {}
        verts_list = list(verts)

        def midpoint_index(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m /= np.linalg.norm(m)
                verts_list.append(m)
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(verts * radius, faces)


def tetrahedron(radius: float = 1.0) -> TriangleMesh:
    """Regular tetrahedron, handy as the smallest closed test mesh."""
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    )
    v *= radius / np.sqrt(3.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriangleMesh(v, f)
