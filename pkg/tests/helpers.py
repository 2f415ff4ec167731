"""Shared brute-force oracles for the test suite.

Everything here is deliberately written the slow, obvious way (dense shape
function tabulation, nested loops, explicit global matrices) and never uses
the sum-factorized kernels it is checking.
"""

import numpy as np
import scipy.sparse as sp

from treemg.fem import LagrangeElement, QuadratureRule, node_lattice


def dense_element_stiffness(p: int, d: int, h: float) -> np.ndarray:
    """Element stiffness for the Laplacian on a cube of size h, by direct
    quadrature of grad(phi_i) . grad(phi_j)."""
    elem = LagrangeElement(p)
    quad = QuadratureRule(p + 1)
    lat = node_lattice(p, d)
    qlat = node_lattice(p, d)  # same count of points per dim
    vals = elem.eval_1d(quad.points)      # (nq, p+1)
    grads = elem.eval_deriv_1d(quad.points)
    npc = len(lat)
    nq = len(qlat)
    # tabulate shape values/gradients at tensor quadrature points
    phi = np.ones((npc, nq))
    dphi = np.zeros((npc, nq, d))
    for i in range(npc):
        for q in range(nq):
            for k in range(d):
                phi[i, q] *= vals[qlat[q, k], lat[i, k]]
            for k in range(d):
                g = 1.0
                for m in range(d):
                    tab = grads if m == k else vals
                    g *= tab[qlat[q, m], lat[i, m]]
                dphi[i, q, k] = g
    wq = np.ones(nq)
    for k in range(d):
        wq *= quad.weights[qlat[:, k]]
    # reference gradients scale with 1/h, the volume with h^d
    K = np.einsum("iqk,jqk,q->ij", dphi, dphi, wq) * h ** (d - 2)
    return K


def dense_assembled_operator(dofmap, constraints, edge_mask=None):
    """Condensed global matrix C^T A C + I_c built from dense element
    matrices and an explicit resolution matrix."""
    n = dofmap.n_dofs
    d = dofmap.dim
    p = dofmap.p
    A = sp.lil_matrix((n, n))
    for r in range(dofmap.n_cells):
        K = dense_element_stiffness(p, d, float(dofmap.cell_sizes[r]))
        g = dofmap.cell_dofs[r]
        for a in range(len(g)):
            A[g[a], g] += K[a]
    A = A.tocsr()
    mask = constraints.mask(n)
    if edge_mask is not None:
        mask = mask | edge_mask
    C = sp.lil_matrix((n, n))
    for i in range(n):
        if not mask[i]:
            C[i, i] = 1.0
    for i, (idx, coef, _) in constraints.lines.items():
        if len(idx) == 0 or (edge_mask is not None and edge_mask[i]):
            continue
        for j, c in zip(idx, coef):
            if not mask[j]:
                C[i, j] = c
    C = C.tocsr()
    Acond = (C.T @ A @ C).tolil()
    for i in np.nonzero(mask)[0]:
        Acond[i, i] += 1.0
    return Acond.tocsr(), A, C


def rng(seed=0):
    return np.random.default_rng(seed)
