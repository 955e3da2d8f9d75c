"""Bilinear (Q1) finite elements on a uniform quadrilateral grid of the unit square.

Nodes are numbered lexicographically, ``n = i + j * (n_c + 1)`` with ``i`` the
x-index.  Every operator is assembled on the full node set; the homogeneous
Dirichlet condition of the state space is imposed afterwards by zeroing the
boundary rows/columns (see :func:`constrain`).
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Mesh",
    "AffineOperator",
    "build_mesh",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_h1_product",
    "assemble_reaction_affine",
    "assemble_diffusion_affine",
    "assemble_B",
    "constrain",
]

# reference cell [0,1]^2, local nodes counter-clockwise from the origin
_LOCAL = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def shape_functions(x, y):
    """Q1 shape function values ``(4, ...)`` and gradients ``(4, 2, ...)`` on the reference cell."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    val = np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y])
    one = np.ones_like(x)
    grad = np.stack([
        np.stack([-(1 - y), -(1 - x) * one]),
        np.stack([(1 - y) * one, -x * one]),
        np.stack([y * one, x * one]),
        np.stack([-y * one, (1 - x) * one]),
    ])
    return val, grad


def _local_tensors():
    # 2x2 Gauss integrates both tensors exactly (at most cubic per coordinate).
    mass = np.zeros((4, 4, 4))
    stiff = np.zeros((4, 4, 4))
    for gx in _GAUSS:
        for gy in _GAUSS:
            val, grad = shape_functions(gx, gy)
            w = 0.25
            mass += w * np.einsum("a,b,c->abc", val, val, val)
            stiff += w * np.einsum("ad,bd,c->abc", grad, grad, val)
    return mass, stiff


_MASS_TENSOR, _STIFF_TENSOR = _local_tensors()


@dataclass(frozen=True)
class Mesh:
    """Uniform grid with ``cells_per_side`` cells in each direction."""

    cells_per_side: int

    def __post_init__(self):
        if int(self.cells_per_side) != self.cells_per_side or self.cells_per_side < 2:
            raise ValueError(f"cells_per_side must be an integer >= 2, got {self.cells_per_side!r}")

    @property
    def spacing(self) -> Fraction:
        return Fraction(1, self.cells_per_side)

    @property
    def h(self) -> float:
        return 1.0 / self.cells_per_side

    @property
    def nodes_per_side(self) -> int:
        return self.cells_per_side + 1

    @property
    def n_nodes(self) -> int:
        return self.nodes_per_side ** 2

    @property
    def n_cells(self) -> int:
        return self.cells_per_side ** 2

    @cached_property
    def coordinates(self) -> np.ndarray:
        t = np.arange(self.nodes_per_side) * self.h
        t[-1] = 1.0
        xx, yy = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        n = self.nodes_per_side
        idx = np.arange(self.n_nodes)
        i, j = idx % n, idx // n
        return (i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    @cached_property
    def cells(self) -> np.ndarray:
        """Connectivity ``(n_cells, 4)`` in local counter-clockwise order."""
        n = self.nodes_per_side
        i, j = np.meshgrid(np.arange(self.cells_per_side), np.arange(self.cells_per_side), indexing="xy")
        base = (i + j * n).ravel()
        return np.column_stack([base, base + 1, base + 1 + n, base + n])

    @cached_property
    def _assembler(self) -> "_Assembler":
        return _Assembler(self)


def build_mesh(cells_per_side: int) -> Mesh:
    return Mesh(cells_per_side)


class _Assembler:
    """Fixed sparsity pattern plus gather/scatter maps for vectorised assembly."""

    def __init__(self, mesh: Mesh):
        n = mesh.n_nodes
        conn = mesh.cells
        rows = np.repeat(conn[:, :, None], 4, axis=2)
        cols = np.repeat(conn[:, None, :], 4, axis=1)
        keys = (rows * n + cols).ravel()
        uniq, self.inverse = np.unique(keys, return_inverse=True)
        self.rows = uniq // n
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.zeros(n + 1, dtype=np.int32)
        np.add.at(self.indptr, self.rows + 1, 1)
        self.indptr = np.cumsum(self.indptr).astype(np.int32)
        self.nnz = uniq.size
        self.shape = (n, n)
        interior = mesh.interior_mask
        self.interior_entry = interior[self.rows] & interior[self.indices]
        self.boundary_diag = (self.rows == self.indices) & ~interior[self.rows]
        self.conn = conn
        m = conn.size
        self.scatter = sp.csr_matrix((np.ones(m), (conn.ravel(), np.arange(m))), shape=(n, m))

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)

    def data(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.inverse, weights=local.ravel(), minlength=self.nnz)

    def local(self, tensor: np.ndarray, coefficient: np.ndarray) -> np.ndarray:
        return np.einsum("abc,ec->eab", tensor, coefficient[self.conn])


def _tensor(mesh: Mesh, kind: str) -> np.ndarray:
    if kind == "reaction":
        return _MASS_TENSOR * mesh.h ** 2
    if kind == "diffusion":
        return _STIFF_TENSOR
    raise ValueError(f"unknown operator kind {kind!r}")


def _coefficient(mesh: Mesh, coefficient) -> np.ndarray:
    if coefficient is None:
        return np.ones(mesh.n_nodes)
    c = np.asarray(coefficient, dtype=float).ravel()
    if c.size != mesh.n_nodes:
        raise ValueError(f"coefficient has {c.size} values, mesh has {mesh.n_nodes} nodes")
    return c


def assemble_mass(mesh: Mesh, coefficient=None) -> sp.csr_matrix:
    """L2 Gram matrix, optionally weighted by the Q1 interpolant of ``coefficient``."""
    asm = mesh._assembler
    return asm.matrix(asm.data(asm.local(_tensor(mesh, "reaction"), _coefficient(mesh, coefficient))))


def assemble_stiffness(mesh: Mesh, coefficient=None) -> sp.csr_matrix:
    asm = mesh._assembler
    return asm.matrix(asm.data(asm.local(_tensor(mesh, "diffusion"), _coefficient(mesh, coefficient))))


def assemble_h1_product(mesh: Mesh) -> sp.csr_matrix:
    """Full H1 Gram matrix (mass + stiffness) on all nodes."""
    return (assemble_mass(mesh) + assemble_stiffness(mesh)).tocsr()


def constrain(mesh: Mesh, matrix: sp.spmatrix, diagonal: float = 1.0) -> sp.csr_matrix:
    """Zero boundary rows and columns, then put ``diagonal`` on the boundary diagonal."""
    interior = mesh.interior_mask.astype(float)
    d = sp.diags(interior)
    out = (d @ matrix @ d).tocsr()
    if diagonal:
        out = out + sp.diags(diagonal * mesh.boundary_mask.astype(float))
    return out.tocsr()


class AffineOperator:
    """Constrained state operator ``A(q) = A_0 + sum_j q_j A_j`` for one PDE kind.

    ``A_0`` carries the unit diagonal on boundary nodes (so that the state
    system stays regular) and, for the reaction kind, the Laplacian.  The
    components ``A_j`` are assembled on demand and cached.
    """

    def __init__(self, mesh: Mesh, kind: str):
        self.mesh = mesh
        self.kind = kind
        self.tensor = _tensor(mesh, kind)
        asm = mesh._assembler
        const = asm.boundary_diag.astype(float)
        if kind == "reaction":
            const = const + asm.data(asm.local(_STIFF_TENSOR, np.ones(mesh.n_nodes))) * asm.interior_entry
        self._const_data = const
        self._components: dict[int, sp.csr_matrix] = {}

    @property
    def shape(self):
        return (self.mesh.n_nodes, self.mesh.n_nodes)

    @cached_property
    def constant(self) -> sp.csr_matrix:
        return self.mesh._assembler.matrix(self._const_data.copy())

    def linear_data(self, q) -> np.ndarray:
        asm = self.mesh._assembler
        return asm.data(asm.local(self.tensor, _coefficient(self.mesh, q))) * asm.interior_entry

    def linear_part(self, q) -> sp.csr_matrix:
        """``A(q) - A(0)``; boundary rows and columns are zero."""
        return self.mesh._assembler.matrix(self.linear_data(q))

    def evaluate(self, q) -> sp.csr_matrix:
        return self.mesh._assembler.matrix(self._const_data + self.linear_data(q))

    def evaluate_data(self, q) -> np.ndarray:
        """CSR data array of ``A(q)`` on the shared pattern (see ``mesh._assembler``)."""
        return self._const_data + self.linear_data(q)

    def component(self, j: int) -> sp.csr_matrix:
        if j not in self._components:
            e = np.zeros(self.mesh.n_nodes)
            e[j] = 1.0
            self._components[j] = self.linear_part(e)
        return self._components[j]

    def apply_linear(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Columnwise ``(A(q^k) - A(0)) u^k``, i.e. ``B(u^k) q^k``, for 2-D ``q`` and ``u``.

        ``q`` may have a single column, which is then used for every column of ``u``.
        """
        u = np.asarray(u, dtype=float)
        q = np.asarray(q, dtype=float)
        squeeze = u.ndim == 1
        u2 = u.reshape(u.shape[0], -1)
        q2 = q.reshape(q.shape[0], -1)
        if q2.shape[1] == 1:
            res = self.linear_part(q2[:, 0]) @ u2
            return res[:, 0] if squeeze else res
        asm = self.mesh._assembler
        conn = asm.conn
        interior = self.mesh.interior_mask
        uloc = (u2 * interior[:, None])[conn]  # (E, 4, K)
        qloc = q2[conn]
        prod = (uloc[:, :, None, :] * qloc[:, None, :, :]).reshape(conn.shape[0], 16, -1)
        out = self.tensor.reshape(4, 16) @ prod  # (E, 4, K)
        res = (asm.scatter @ out.reshape(-1, out.shape[2])) * interior[:, None]
        return res[:, 0] if squeeze else res

    def apply(self, q: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Columnwise ``A(q^k) u^k``."""
        u = np.asarray(u, dtype=float)
        return self.constant @ u + self.apply_linear(q, u)

    def apply_linear_transpose(self, u: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Columnwise ``B(u^k)^T p^k`` (a covector on the parameter nodes)."""
        asm = self.mesh._assembler
        conn = asm.conn
        interior = self.mesh.interior_mask
        u2 = np.asarray(u, dtype=float).reshape(u.shape[0], -1) * interior[:, None]
        p2 = np.asarray(p, dtype=float).reshape(p.shape[0], -1) * interior[:, None]
        ploc, uloc = p2[conn], u2[conn]
        prod = (ploc[:, :, None, :] * uloc[:, None, :, :]).reshape(conn.shape[0], 16, -1)
        out = self.tensor.reshape(16, 4).T @ prod  # (E, 4, K) indexed by c
        res = asm.scatter @ out.reshape(-1, out.shape[2])
        return res[:, 0] if np.ndim(u) == 1 else res


def assemble_reaction_affine(mesh: Mesh) -> AffineOperator:
    return AffineOperator(mesh, "reaction")


def assemble_diffusion_affine(mesh: Mesh) -> AffineOperator:
    return AffineOperator(mesh, "diffusion")


def assemble_B(mesh: Mesh, kind: str, u) -> sp.csr_matrix:
    """Sparse ``B(u)`` with ``B(u) d = A(d) u - A(0) u`` (``N_V x N_Q``)."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != mesh.n_nodes:
        raise ValueError(f"state has {u.size} values, mesh has {mesh.n_nodes} nodes")
    tensor = _tensor(mesh, kind)
    conn = mesh.cells
    interior = mesh.interior_mask
    uloc = (u * interior)[conn]
    local = np.einsum("abc,eb->eac", tensor, uloc)
    rows = np.repeat(conn[:, :, None], 4, axis=2).ravel()
    cols = np.repeat(conn[:, None, :], 4, axis=1).ravel()
    mat = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return (sp.diags(interior.astype(float)) @ mat).tocsr()
