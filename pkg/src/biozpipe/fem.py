"""Complete-electrode-model forward solver on the quasi-2D probe slice.

The 3D tissue slab is collapsed to a 2D sheet: element conductivities are
scaled by the slice thickness, current electrodes are arcs of the ring
handled with the complete electrode model (contact impedance per unit arc
length), and the 25 inner electrodes are point potential probes read at
their mesh vertices.

Unit system: lengths in mm, conductivity input in mS/m (converted to sheet
conductance in S), injected currents in mA, hence all potentials in mV.

The assembled matrix is complex symmetric over (vertex potentials, 8
electrode potentials).  It is singular up to an additive constant; a
symmetric rank-one term enforcing zero mean electrode potential grounds the
system without changing its dimension.  One sparse LU factorization is
reused for all 28 current patterns of a frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu

from .errors import FormatError, SolverError
from .geometry import (FIRST_OUTER, CurrentPattern, Mesh, ProbeLayout,
                       enumerate_current_patterns)
from .phantom import Inclusion, Phantom

SLICE_THICKNESS_MM = 5.0
DEFAULT_CONTACT_IMPEDANCE_OHM_MM = 10.0
DEFAULT_SALINE_MS_PER_M = 200.0

# mS/m * mm slice -> sheet conductance in S
_SHEET_SCALE = 1e-6


@dataclass(frozen=True)
class Frame:
    """28 patterns x 25 single-ended inner-electrode voltages (mV, phasors)."""

    voltages: np.ndarray  # (28, 25) complex128
    pattern_order: tuple[CurrentPattern, ...]
    phantom_id: str

    def __post_init__(self):
        v = self.voltages
        if v.shape != (len(self.pattern_order), v.shape[1]):
            raise SolverError("frame shape inconsistent with pattern order")
        if not np.all(np.isfinite(v.real)) or not np.all(np.isfinite(v.imag)):
            raise SolverError(f"non-finite voltage in frame {self.phantom_id}")


@dataclass
class AssembledSystem:
    """Factorized CEM system for one conductivity field."""

    stiffness: csc_matrix  # symmetric, ungrounded
    lu: object  # SuperLU of (stiffness + grounding rank-one)
    n_vertices: int
    electrode_order: tuple[int, ...]  # outer electrode ids, block order
    contact_impedance: np.ndarray
    inner_vertices: np.ndarray  # (25,) vertex index per inner electrode
    arc_lengths: np.ndarray  # (8,) total contact length per electrode
    edge_data: list  # per electrode: (v_a array, v_b array, lengths)


def galerkin_stiffness(mesh: Mesh, element_sigma: np.ndarray,
                       thickness_mm: float = SLICE_THICKNESS_MM) -> csc_matrix:
    """Linear-element stiffness for div(sigma * t * grad u) over the vertices.

    Vectorized standard P1 assembly: for a triangle with vertices p1,p2,p3,
    K_ij = sigma_sheet * (b_i b_j + c_i c_j) / (4 A) with b/c the usual
    edge-difference coefficients.
    """
    sigma_sheet = np.asarray(element_sigma, dtype=complex) * thickness_mm * _SHEET_SCALE
    tri = mesh.triangles
    p = mesh.vertices[tri]  # (nt, 3, 2)
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                  - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    coef = sigma_sheet / (4.0 * area)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
    vals = (coef[:, None, None] * local).reshape(-1)
    rows = np.repeat(tri, 3, axis=1).reshape(-1)
    cols = np.tile(tri, (1, 3)).reshape(-1)
    nv = mesh.n_vertices
    return coo_matrix((vals, (rows, cols)), shape=(nv, nv)).tocsc()


def assemble(mesh: Mesh, element_sigma: np.ndarray,
             contact_impedance=DEFAULT_CONTACT_IMPEDANCE_OHM_MM,
             thickness_mm: float = SLICE_THICKNESS_MM) -> AssembledSystem:
    """Assemble and factorize the complete-electrode-model system.

    ``contact_impedance`` is per unit arc length (ohm * mm), scalar or one
    value per outer electrode; complex values are allowed.
    """
    sigma = np.asarray(element_sigma, dtype=complex)
    if sigma.shape != (mesh.n_triangles,):
        raise SolverError(
            f"conductivity length {sigma.shape} does not match "
            f"{mesh.n_triangles} mesh elements"
        )
    if np.any(sigma.real <= 0):
        raise SolverError("element conductivity real parts must be positive")

    electrodes = tuple(sorted(mesh.electrode_edges))
    n_el = len(electrodes)
    z = np.broadcast_to(np.asarray(contact_impedance, dtype=complex),
                        (n_el,)).copy()
    if np.any(z == 0):
        raise SolverError("contact impedance must be nonzero")

    nv = mesh.n_vertices
    dim = nv + n_el
    K = galerkin_stiffness(mesh, sigma, thickness_mm)

    rows, cols, vals = [], [], []
    arc_lengths = np.zeros(n_el)
    edge_data = []
    for k, e in enumerate(electrodes):
        edges = np.array(mesh.electrode_edges[e], dtype=np.int64)
        va, vb = edges[:, 0], edges[:, 1]
        seg = mesh.vertices[va] - mesh.vertices[vb]
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        arc_lengths[k] = lengths.sum()
        edge_data.append((va, vb, lengths))
        g = 1.0 / z[k]  # contact conductance per mm
        # vertex-vertex contact mass: L/3 diagonal, L/6 cross
        rows += [va, vb, va, vb]
        cols += [va, vb, vb, va]
        vals += [g * lengths / 3.0, g * lengths / 3.0,
                 g * lengths / 6.0, g * lengths / 6.0]
        # vertex-electrode coupling: -L/2 each endpoint
        col_e = np.full(len(va), nv + k, dtype=np.int64)
        rows += [va, vb, col_e, col_e]
        cols += [col_e, col_e, va, vb]
        vals += [-g * lengths / 2.0] * 4
        # electrode diagonal: total arc length
        rows.append(np.array([nv + k]))
        cols.append(np.array([nv + k]))
        vals.append(np.array([g * arc_lengths[k]]))

    contact = coo_matrix(
        (np.concatenate(vals).astype(complex),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim),
    ).tocsc()
    K_coo = K.tocoo()
    bulk = coo_matrix((K_coo.data, (K_coo.row, K_coo.col)),
                      shape=(dim, dim)).tocsc()
    full = (bulk + contact).tocsc()

    # zero-mean electrode potential: since the injected currents sum to zero,
    # adding alpha * q q^T (q = electrode-block indicator) makes the system
    # nonsingular and forces sum(U) = 0 in the solution.
    if n_el == 0:
        raise SolverError(
            "grounding constraint needs at least one electrode: the "
            "zero-mean electrode potential cannot be imposed"
        )
    alpha = abs(full.diagonal()[:nv]).mean()
    q_rows = np.repeat(np.arange(nv, dim), n_el)
    q_cols = np.tile(np.arange(nv, dim), n_el)
    ground = coo_matrix(
        (np.full(n_el * n_el, alpha, dtype=complex), (q_rows, q_cols)),
        shape=(dim, dim),
    ).tocsc()

    try:
        lu = splu((full + ground).tocsc())
    except RuntimeError as exc:
        raise SolverError(
            f"factorization failed despite zero-mean electrode grounding: {exc}"
        ) from exc

    inner = np.array(
        [mesh.inner_vertex[e] for e in sorted(mesh.inner_vertex)],
        dtype=np.int64,
    )
    return AssembledSystem(
        stiffness=full, lu=lu, n_vertices=nv, electrode_order=electrodes,
        contact_impedance=z, inner_vertices=inner, arc_lengths=arc_lengths,
        edge_data=edge_data,
    )


def _solve(system: AssembledSystem, rhs: np.ndarray) -> np.ndarray:
    x = system.lu.solve(rhs)
    if not np.all(np.isfinite(x.real)) or not np.all(np.isfinite(x.imag)):
        raise SolverError("solver produced non-finite potentials")
    return x


def solve_pattern(system: AssembledSystem, pattern: CurrentPattern):
    """Drive one source/sink pair; return (8 electrode potentials, 25 inner).

    The right-hand side injects +amplitude at the source electrode and
    -amplitude at the sink; potentials are referenced to the grounded
    zero-mean electrode potential.
    """
    try:
        i_src = system.electrode_order.index(pattern.source)
        i_snk = system.electrode_order.index(pattern.sink)
    except ValueError as exc:
        raise SolverError(f"pattern references unknown electrode: {exc}") from exc
    rhs = np.zeros(system.n_vertices + len(system.electrode_order),
                   dtype=complex)
    rhs[system.n_vertices + i_src] = pattern.amplitude
    rhs[system.n_vertices + i_snk] = -pattern.amplitude
    x = _solve(system, rhs)
    return x[system.n_vertices:], x[system.inner_vertices]


def solve_vertex_injection(system: AssembledSystem, v_plus: int, v_minus: int,
                           amplitude: float) -> np.ndarray:
    """Point current injection at two mesh vertices; returns the full solution.

    Used for reciprocity checks: driving a pair of inner-electrode vertices
    and reading outer-electrode potentials must match the reverse
    experiment on the symmetric system.
    """
    rhs = np.zeros(system.n_vertices + len(system.electrode_order),
                   dtype=complex)
    rhs[v_plus] = amplitude
    rhs[v_minus] = -amplitude
    return _solve(system, rhs)


def electrode_currents(system: AssembledSystem, solution: np.ndarray) -> np.ndarray:
    """Boundary current through each electrode, recomputed from the solution.

    I_l = (1/z_l) * integral over the arc of (U_l - u) ds, evaluated with the
    same trapezoidal edge quadrature used in assembly, so for an exact solve
    this reproduces the injected currents to factorization precision.
    """
    nv = system.n_vertices
    out = np.zeros(len(system.electrode_order), dtype=complex)
    for k in range(len(system.electrode_order)):
        va, vb, lengths = system.edge_data[k]
        u_mean = 0.5 * (solution[va] + solution[vb])
        g = 1.0 / system.contact_impedance[k]
        out[k] = np.sum(g * lengths * (solution[nv + k] - u_mean))
    return out


def simulate_frame(phantom: Phantom, mesh: Mesh, layout: ProbeLayout,
                   contact_impedance=DEFAULT_CONTACT_IMPEDANCE_OHM_MM,
                   thickness_mm: float = SLICE_THICKNESS_MM,
                   phantom_id: str | None = None) -> Frame:
    """One assembly plus 28 pattern solves reusing a single factorization."""
    if phantom_id is None:
        phantom_id = f"seed{phantom.seed}"
    try:
        system = assemble(mesh, phantom.element_sigma, contact_impedance,
                          thickness_mm)
        patterns = tuple(enumerate_current_patterns(layout))
        voltages = np.empty((len(patterns), len(system.inner_vertices)),
                            dtype=complex)
        for i, pat in enumerate(patterns):
            _, inner = solve_pattern(system, pat)
            voltages[i] = inner
    except SolverError as exc:
        raise SolverError(f"phantom {phantom_id}: {exc}") from exc
    return Frame(voltages=voltages, pattern_order=patterns,
                 phantom_id=phantom_id)


def reference_frame(mesh: Mesh, layout: ProbeLayout,
                    sigma_saline: complex = DEFAULT_SALINE_MS_PER_M,
                    contact_impedance=DEFAULT_CONTACT_IMPEDANCE_OHM_MM,
                    thickness_mm: float = SLICE_THICKNESS_MM,
                    cache_path=None) -> Frame:
    """Frame of a uniform saline bath; cached to disk after first computation."""
    if complex(sigma_saline).real <= 0:
        raise SolverError("saline conductivity real part must be positive")
    if cache_path is not None:
        try:
            frames = load_frames(cache_path)
            if frames:
                return frames[0]
        except (FileNotFoundError, FormatError):
            pass
    sigma = np.full(mesh.n_triangles, complex(sigma_saline), dtype=complex)
    ref = Phantom(element_sigma=sigma,
                  inclusion=Inclusion(center=(0.0, 0.0), diameter=0.0),
                  label=0, seed=0)
    frame = simulate_frame(ref, mesh, layout, contact_impedance, thickness_mm,
                           phantom_id="reference")
    if cache_path is not None:
        save_frames([frame], cache_path)
    return frame


# ---------------------------------------------------------------------------
# Frame persistence: binary records (concatenable) plus CSV export
# ---------------------------------------------------------------------------

_FRAME_MAGIC = b"BZFR"
_FRAME_VERSION = 1


def _frame_record(frame: Frame) -> bytes:
    n_pat, n_el = frame.voltages.shape
    pid = frame.phantom_id.encode("utf-8")
    body = np.empty(2 * n_pat * n_el, dtype="<f8")
    flat = frame.voltages.reshape(-1)
    body[0::2] = flat.real
    body[1::2] = flat.imag
    return (_FRAME_MAGIC
            + struct.pack("<IIIH", _FRAME_VERSION, n_pat, n_el, len(pid))
            + pid + body.tobytes())


def save_frames(frames: list[Frame], path) -> None:
    """Write one or more frame records to a single file."""
    with open(path, "wb") as f:
        for frame in frames:
            f.write(_frame_record(frame))


def load_frames(path, layout: ProbeLayout | None = None) -> list[Frame]:
    """Read all frame records from a file.

    Pattern order is reconstructed canonically from the layout (or the
    default 8-electrode ring when none is given); externally measured frames
    must be recorded in the same canonical order.
    """
    frames = []
    with open(path, "rb") as f:
        data = f.read()
    pos = 0
    while pos < len(data):
        if data[pos:pos + 4] != _FRAME_MAGIC:
            raise FormatError(f"{path}: bad frame magic at offset {pos}")
        version, n_pat, n_el, id_len = struct.unpack_from("<IIIH", data, pos + 4)
        if version != _FRAME_VERSION:
            raise FormatError(f"{path}: unsupported frame version {version}")
        pos += 4 + 14
        pid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        count = 2 * n_pat * n_el
        body = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        if len(body) != count:
            raise FormatError(f"{path}: truncated frame body")
        pos += 8 * count
        voltages = (body[0::2] + 1j * body[1::2]).reshape(n_pat, n_el)
        if layout is not None:
            patterns = tuple(enumerate_current_patterns(layout))
        else:
            patterns = tuple(
                CurrentPattern(source=FIRST_OUTER + i, sink=FIRST_OUTER + j)
                for i in range(8) for j in range(i + 1, 8)
            )[:n_pat]
        frames.append(Frame(voltages=voltages, pattern_order=patterns,
                            phantom_id=pid))
    return frames


def export_frame_csv(frame: Frame, path) -> None:
    """CSV columns: pattern_index, electrode_index, real/imag/magnitude/phase."""
    with open(path, "w", encoding="ascii") as f:
        f.write("pattern_index,electrode_index,real_mV,imag_mV,"
                "magnitude_mV,phase_rad\n")
        for i in range(frame.voltages.shape[0]):
            for j in range(frame.voltages.shape[1]):
                v = frame.voltages[i, j]
                f.write(f"{i},{j + 1},{v.real!r},{v.imag!r},"
                        f"{abs(v)!r},{np.angle(v)!r}\n")
