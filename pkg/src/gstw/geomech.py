"""Linear poroelastic mechanics: trilinear hexahedral finite elements.

Solves quasi-static linear-momentum balance div(sigma) + rho_m*g = 0
with total stress sigma = C:eps(d) - b*p_e*I, discretized with standard
Galerkin trilinear hexahedra and full 2x2x2 Gauss quadrature.  The
formulation is incremental: loads are built from changes in equivalent
pore pressure and bulk density relative to the initial equilibrium, so
the undisturbed state has zero displacement by construction.

Coordinates follow the flow grid: z is depth, positive downward, ground
surface at z = 0.  Surface uplift is therefore -d_z at z = 0; the
surface extraction below reports uplift-positive values.

The stiffness of an element is E times a matrix that depends only on
element geometry and nu, so assembly groups elements by geometry and
reuses each unit-stiffness block.  On the rectilinear meshes used here
that collapses thousands of element integrations to a handful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fluidrock import equivalent_pore_pressure  # noqa: F401  (module op)

_CORNERS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=float,
)
_GP = np.array(
    [[sx / np.sqrt(3.0), sy / np.sqrt(3.0), sz / np.sqrt(3.0)]
     for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
)


def _shape_values(xi):
    return (
        (1 + _CORNERS[:, 0] * xi[0])
        * (1 + _CORNERS[:, 1] * xi[1])
        * (1 + _CORNERS[:, 2] * xi[2])
        / 8.0
    )


def _shape_gradients(xi):
    """dN_a/dxi_i, shape (8, 3)."""
    g = np.empty((8, 3))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i] = (
            _CORNERS[:, i]
            * (1 + _CORNERS[:, j] * xi[j])
            * (1 + _CORNERS[:, k] * xi[k])
            / 8.0
        )
    return g

_GP_VALS = [_shape_values(xi) for xi in _GP]
_GP_GRADS = [_shape_gradients(xi) for xi in _GP]


class MeshError(Exception):
    """Invalid mesh (inverted element, bad footprint)."""


class MechSolveError(Exception):
    """Linear solve breakdown or insufficient accuracy."""


@dataclass(frozen=True)
class ElasticProps:
    """Isotropic elasticity per element plus poroelastic constants."""

    e_mod: np.ndarray  # Young's modulus per element (Pa)
    nu: float = 0.2
    b: float = 1.0  # Biot coefficient
    rho_rock: float = 2650.0  # grain density (kg/m^3)

    def __post_init__(self):
        if np.any(np.asarray(self.e_mod) <= 0):
            raise ValueError("Young's modulus must be positive")
        if not 0 <= self.nu < 0.5:
            raise ValueError(f"Poisson ratio out of [0, 0.5): {self.nu}")
        if not 0 <= self.b <= 1:
            raise ValueError(f"Biot coefficient out of [0,1]: {self.b}")

    @property
    def k_dr(self):
        return np.asarray(self.e_mod) / (3.0 * (1.0 - 2.0 * self.nu))


class MechMesh:
    """Hexahedral mesh; from_cell_sizes builds one conforming 1:1 with a
    rectilinear flow grid (element e == flow cell e in C order)."""

    def __init__(self, nodes, elements, cell_shape=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.elements = np.asarray(elements, dtype=int)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshError("nodes must be (n, 3)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise MeshError("elements must be (n_el, 8)")
        self.n_nodes = len(self.nodes)
        self.n_el = len(self.elements)
        self.n_dof = 3 * self.n_nodes
        self.cell_shape = cell_shape  # (nx, ny, nz) when structured
        self._check_jacobians()

    @classmethod
    def from_cell_sizes(cls, dxs, dys, dzs):
        dxs, dys, dzs = (np.asarray(a, dtype=float) for a in (dxs, dys, dzs))
        nx, ny, nz = len(dxs), len(dys), len(dzs)
        xs = np.concatenate([[0.0], np.cumsum(dxs)])
        ys = np.concatenate([[0.0], np.cumsum(dys)])
        zs = np.concatenate([[0.0], np.cumsum(dzs)])
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        nodes = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
        nid = np.arange((nx + 1) * (ny + 1) * (nz + 1)).reshape(
            nx + 1, ny + 1, nz + 1
        )
        i, j, k = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        i, j, k = i.ravel(), j.ravel(), k.ravel()
        # local corner order matches _CORNERS (xi, eta, zeta) = (x, y, z)
        elements = np.column_stack(
            [
                nid[i, j, k],
                nid[i + 1, j, k],
                nid[i + 1, j + 1, k],
                nid[i, j + 1, k],
                nid[i, j, k + 1],
                nid[i + 1, j, k + 1],
                nid[i + 1, j + 1, k + 1],
                nid[i, j + 1, k + 1],
            ]
        )
        return cls(nodes, elements, cell_shape=(nx, ny, nz))

    def _check_jacobians(self):
        for e in range(self.n_el):
            coords = self.nodes[self.elements[e]]
            for g in _GP_GRADS:
                if np.linalg.det(g.T @ coords) <= 0:
                    raise MeshError(f"inverted element {e}")

    def node_index(self, i, j, k):
        nx, ny, nz = self.cell_shape
        return (i * (ny + 1) + j) * (nz + 1) + k

    def boundary_node_sets(self):
        """Node index arrays for the six boundary planes (structured)."""
        if self.cell_shape is None:
            raise MeshError("boundary sets need a structured mesh")
        nx, ny, nz = self.cell_shape
        nid = np.arange(self.n_nodes).reshape(nx + 1, ny + 1, nz + 1)
        return {
            "xmin": nid[0, :, :].ravel(),
            "xmax": nid[-1, :, :].ravel(),
            "ymin": nid[:, 0, :].ravel(),
            "ymax": nid[:, -1, :].ravel(),
            "top": nid[:, :, 0].ravel(),
            "bottom": nid[:, :, -1].ravel(),
        }


def _element_tables(coords, nu):
    """Unit-E stiffness (24,24), div-load vector (24,), consistent node
    volumes (8,), element volume; full 2x2x2 Gauss."""
    lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = 1.0 / (2.0 * (1.0 + nu))
    dmat = np.zeros((6, 6))
    dmat[:3, :3] = lam
    dmat[np.arange(3), np.arange(3)] += 2.0 * mu
    dmat[3:, 3:] = np.eye(3) * mu

    kmat = np.zeros((24, 24))
    divv = np.zeros(24)
    nvol = np.zeros(8)
    vol = 0.0
    for nvals, grads in zip(_GP_VALS, _GP_GRADS):
        jac = grads.T @ coords  # jac[i, j] = dx_j/dxi_i
        det = np.linalg.det(jac)
        dndx = grads @ np.linalg.inv(jac).T  # (8,3) dN_a/dx_j
        bmat = np.zeros((6, 24))
        for a in range(8):
            bx, by, bz = dndx[a]
            c = 3 * a
            bmat[0, c] = bx
            bmat[1, c + 1] = by
            bmat[2, c + 2] = bz
            bmat[3, c] = by
            bmat[3, c + 1] = bx
            bmat[4, c + 1] = bz
            bmat[4, c + 2] = by
            bmat[5, c] = bz
            bmat[5, c + 2] = bx
        kmat += bmat.T @ (dmat @ bmat) * det
        divv += (dndx * det).ravel()  # dof 3a+c <- dN_a/dx_c
        nvol += nvals * det
        vol += det
    return kmat, divv, nvol, vol


class MechSystem:
    """Assembled stiffness with essential constraints and cached solve
    tables (per-element div loads, node volumes, dof maps)."""

    def __init__(self, mesh: MechMesh, props: ElasticProps, kmat, divv, nvol,
                 vol, con_dofs, con_vals):
        self.mesh = mesh
        self.props = props
        self.k_full = kmat
        self.div_load = divv  # (n_el, 24)
        self.node_vol = nvol  # (n_el, 8)
        self.el_vol = vol  # (n_el,)
        self.con_dofs = con_dofs
        self.con_vals = con_vals
        free = np.ones(mesh.n_dof, dtype=bool)
        free[con_dofs] = False
        self.free = np.where(free)[0]
        self._lu = None
        self._kff = None
        self._kfc = None
        dof = 3 * mesh.elements  # (n_el, 8)
        self.dof_map = (dof[:, :, None] + np.arange(3)).reshape(mesh.n_el, 24)

    def factor(self):
        if self._lu is None:
            self._kff = self.k_full[self.free][:, self.free].tocsc()
            self._kfc = self.k_full[self.free][:, self.con_dofs].tocsc()
            self._lu = spla.splu(self._kff, permc_spec="MMD_AT_PLUS_A")
        return self._lu


def roller_constraints(mesh: MechMesh):
    """Zero normal displacement on lateral faces and bottom; free top."""
    sets = mesh.boundary_node_sets()
    dofs = np.concatenate(
        [
            3 * sets["xmin"], 3 * sets["xmax"],
            3 * sets["ymin"] + 1, 3 * sets["ymax"] + 1,
            3 * sets["bottom"] + 2,
        ]
    )
    dofs = np.unique(dofs)
    return dofs, np.zeros(len(dofs))


def assemble_system(mesh: MechMesh, props: ElasticProps, constraints=None):
    """Build the global stiffness operator with essential constraints.

    constraints is (dof_indices, values); defaults to the roller set.
    Elements are grouped by their (geometry, nu) signature and scaled by
    per-element E.
    """
    e_mod = np.broadcast_to(np.asarray(props.e_mod, dtype=float), (mesh.n_el,))
    if constraints is None:
        constraints = roller_constraints(mesh)
    con_dofs, con_vals = (np.asarray(c) for c in constraints)
    if con_dofs.size and (con_dofs.min() < 0 or con_dofs.max() >= mesh.n_dof):
        raise ValueError("constraint dof out of range")

    groups: dict[bytes, list[int]] = {}
    for e in range(mesh.n_el):
        coords = mesh.nodes[mesh.elements[e]]
        key = np.round(coords - coords[0], 6).tobytes()
        groups.setdefault(key, []).append(e)

    divv = np.empty((mesh.n_el, 24))
    nvol = np.empty((mesh.n_el, 8))
    vol = np.empty(mesh.n_el)
    dof = 3 * mesh.elements
    dof_map = (dof[:, :, None] + np.arange(3)).reshape(mesh.n_el, 24)

    rows, cols, vals = [], [], []
    for members in groups.values():
        e0 = members[0]
        coords = mesh.nodes[mesh.elements[e0]]
        kunit, dv, nv, v = _element_tables(coords, props.nu)
        idx = np.asarray(members)
        divv[idx] = dv
        nvol[idx] = nv
        vol[idx] = v
        dm = dof_map[idx]
        rows.append(np.repeat(dm, 24, axis=1).ravel())
        cols.append(np.tile(dm, (1, 24)).ravel())
        vals.append((e_mod[idx][:, None, None] * kunit).ravel())

    kmat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_dof, mesh.n_dof),
    ).tocsr()
    return MechSystem(mesh, props, kmat, divv, nvol, vol, con_dofs, con_vals)


def assemble_loads(system: MechSystem, p_e=None, rho_m=None, g=9.81,
                   top_load=0.0):
    """Nodal force vector from pore-pressure and gravity (incremental)
    terms plus an optional uniform downward top traction (Pa).

    f_a = int b*p_e*div(N_a) dV + int rho_m*g*N_a dV (z component)
    with per-element constant p_e and rho_m.
    """
    mesh = system.mesh
    f = np.zeros(mesh.n_dof)
    if p_e is not None:
        p_e = np.asarray(p_e, dtype=float).reshape(mesh.n_el)
        contrib = system.props.b * p_e[:, None] * system.div_load
        np.add.at(f, system.dof_map.ravel(), contrib.ravel())
    if rho_m is not None and g != 0.0:
        rho_m = np.asarray(rho_m, dtype=float).reshape(mesh.n_el)
        zdofs = 3 * mesh.elements + 2
        np.add.at(f, zdofs.ravel(), (rho_m[:, None] * g * system.node_vol).ravel())
    if top_load != 0.0:
        nx, ny, nz = mesh.cell_shape
        nid = np.arange(mesh.n_nodes).reshape(nx + 1, ny + 1, nz + 1)
        for i in range(nx):
            for j in range(ny):
                quad = [nid[i, j, 0], nid[i + 1, j, 0],
                        nid[i + 1, j + 1, 0], nid[i, j + 1, 0]]
                xy = mesh.nodes[quad][:, :2]
                area = abs(
                    (xy[1, 0] - xy[0, 0]) * (xy[3, 1] - xy[0, 1])
                    - (xy[3, 0] - xy[0, 0]) * (xy[1, 1] - xy[0, 1])
                )
                for nd in quad:
                    f[3 * nd + 2] += top_load * area / 4.0
    return f


def solve_displacement(system: MechSystem, loads) -> np.ndarray:
    """Displacement (n_nodes, 3); constrained dofs take their prescribed
    values, free dofs solve the reduced SPD system to rtol 1e-10."""
    loads = np.asarray(loads, dtype=float).reshape(system.mesh.n_dof)
    d = np.zeros(system.mesh.n_dof)
    d[system.con_dofs] = system.con_vals
    lu = system.factor()
    rhs = loads[system.free]
    if system.con_dofs.size and np.any(system.con_vals != 0.0):
        rhs = rhs - system._kfc @ system.con_vals
    sol = lu.solve(rhs)
    res = np.linalg.norm(system._kff @ sol - rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(sol).all() or res > 1e-10 * scale:
        raise MechSolveError(f"mech solve residual {res:.3e} vs rhs {scale:.3e}")
    d[system.free] = sol
    return d.reshape(-1, 3)


def reaction_forces(system: MechSystem, d, loads):
    """K d - f restricted to constrained dofs (support reactions)."""
    r = system.k_full @ d.reshape(-1) - np.asarray(loads).reshape(-1)
    return system.con_dofs, r[system.con_dofs]


def volumetric_stress(system: MechSystem, d, p_e):
    """Per-cell volumetric total stress change (tension positive):
    sigma_v = K_dr * mean(tr eps) - b*p_e, mean over the element."""
    d = np.asarray(d, dtype=float).reshape(-1)
    p_e = np.asarray(p_e, dtype=float).reshape(system.mesh.n_el)
    # int div(d) dV = div_load . d_e  (same quadrature as stiffness)
    int_div = np.einsum(
        "ek,ek->e", system.div_load, d[system.dof_map]
    )
    k_dr = np.broadcast_to(system.props.k_dr, (system.mesh.n_el,))
    return k_dr * int_div / system.el_vol - system.props.b * p_e


def surface_vertical_displacement(mesh: MechMesh, d, footprint):
    """Uplift map over the footprint blocks, positive upward.

    footprint = (i0, j0, ni, nj) in cell indices; each block value is
    the mean vertical displacement of its 4 surface corner nodes.
    Output shape (ni, nj); size follows n_gb = n_g - n_dx - n_dy + 1.
    """
    if mesh.cell_shape is None:
        raise MeshError("surface extraction needs a structured mesh")
    nx, ny, _ = mesh.cell_shape
    i0, j0, ni, nj = footprint
    if i0 < 0 or j0 < 0 or ni < 1 or nj < 1 or i0 + ni > nx or j0 + nj > ny:
        raise MeshError(f"footprint {footprint} outside {nx}x{ny} surface")
    d = np.asarray(d, dtype=float).reshape(-1, 3)
    nid = np.arange(mesh.n_nodes).reshape(nx + 1, ny + 1, mesh.cell_shape[2] + 1)
    top = nid[i0 : i0 + ni + 1, j0 : j0 + nj + 1, 0]
    uplift = -d[top, 2]  # z is depth; up is negative d_z
    return 0.25 * (
        uplift[:-1, :-1] + uplift[1:, :-1] + uplift[:-1, 1:] + uplift[1:, 1:]
    )
