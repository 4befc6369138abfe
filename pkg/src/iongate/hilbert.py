"""Hilbert-space layout and dense operators for two ions and one motional mode.

The simulation space is ion1 (x) ion2 (x) motion.  Each ion is a three-level
system: the two qubit levels plus one auxiliary level that holds population
which has leaked out of the qubit manifold.  The motional factor is a truncated
harmonic oscillator.

Level ordering and sign conventions (everything downstream relies on these):

* index 0: ``|down>``, sigma_z eigenvalue +1, fluoresces during detection
* index 1: ``|up>``,   sigma_z eigenvalue -1, dark
* index 2: ``|aux>``,  sigma_z eigenvalue  0, dark, ignored by drive fields

State vectors are flat complex arrays of length ``9 * fock_dim`` with the
motional index fastest: ``flat_index = (i1 * 3 + i2) * fock_dim + n``.
Spin-only objects (analysis rotations, measurement operators) live on the
9-dimensional two-ion space with index ``i1 * 3 + i2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOWN, UP, AUX = 0, 1, 2

#: sigma_z eigenvalue per ion level, |down> = +1
SIGMA_Z_DIAG = np.array([1.0, -1.0, 0.0])


class DimensionError(ValueError):
    """Raised when operands live on incompatible Hilbert spaces."""


@dataclass(frozen=True)
class HilbertSpec:
    """Dimensions of the simulation space.

    Parameters
    ----------
    fock_dim : int
        Motional truncation.  The default is ample for loop trajectories that
        stay well inside |alpha| < 1; see :func:`check_fock_convergence`.
    """

    fock_dim: int = 16

    def __post_init__(self):
        if self.fock_dim < 2:
            raise ValueError("fock_dim must be at least 2")

    @property
    def spin_dim(self) -> int:
        return 9

    @property
    def dim(self) -> int:
        return 9 * self.fock_dim

    def doubled(self) -> "HilbertSpec":
        return HilbertSpec(fock_dim=2 * self.fock_dim)


@dataclass
class QuantumState:
    """A ket or density matrix on the full two-ion + motion space.

    ``data`` is a flat vector (ket) or a square matrix (density matrix) over
    the flattened index described in the module docstring.
    """

    spec: HilbertSpec
    data: np.ndarray
    kind: str = "ket"  # "ket" | "dm"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.kind == "ket":
            if self.data.shape != (self.spec.dim,):
                raise DimensionError(
                    f"ket shape {self.data.shape} does not match spec dim {self.spec.dim}"
                )
        elif self.kind == "dm":
            if self.data.shape != (self.spec.dim, self.spec.dim):
                raise DimensionError(
                    f"dm shape {self.data.shape} does not match spec dim {self.spec.dim}"
                )
        else:
            raise ValueError(f"unknown state kind {self.kind!r}")

    @classmethod
    def from_spin_levels(cls, spec: HilbertSpec, i1: int, i2: int, n: int = 0) -> "QuantumState":
        """Basis ket |i1, i2, n>."""
        v = np.zeros(spec.dim, dtype=complex)
        v[(i1 * 3 + i2) * spec.fock_dim + n] = 1.0
        return cls(spec, v, "ket")

    @classmethod
    def from_spin_ket(cls, spec: HilbertSpec, spin: np.ndarray, fock: np.ndarray | None = None) -> "QuantumState":
        """Product ket (spin 9-vector) x (fock vector, default ground state)."""
        spin = np.asarray(spin, dtype=complex)
        if spin.shape != (9,):
            raise DimensionError("spin part must be a 9-vector")
        if fock is None:
            fock = np.zeros(spec.fock_dim, dtype=complex)
            fock[0] = 1.0
        fock = np.asarray(fock, dtype=complex)
        if fock.shape != (spec.fock_dim,):
            raise DimensionError("fock part does not match spec")
        return cls(spec, np.kron(spin, fock), "ket")

    @classmethod
    def thermal(cls, spec: HilbertSpec, spin: np.ndarray, nbar: float) -> "QuantumState":
        """Spin ket (x) thermal motional state as a density matrix."""
        spin = np.asarray(spin, dtype=complex)
        if spin.shape != (9,):
            raise DimensionError("spin part must be a 9-vector")
        n = np.arange(spec.fock_dim)
        if nbar <= 0:
            p = np.zeros(spec.fock_dim)
            p[0] = 1.0
        else:
            p = (nbar / (1.0 + nbar)) ** n / (1.0 + nbar)
            p = p / p.sum()  # renormalize the truncated tail
        rho_f = np.diag(p.astype(complex))
        rho_s = np.outer(spin, spin.conj())
        return cls(spec, np.kron(rho_s, rho_f), "dm")

    def to_dm(self) -> "QuantumState":
        if self.kind == "dm":
            return self
        return QuantumState(self.spec, np.outer(self.data, self.data.conj()), "dm")

    def norm(self) -> float:
        if self.kind == "ket":
            return float(np.linalg.norm(self.data))
        return float(np.real(np.trace(self.data)))


@dataclass(frozen=True)
class OperatorSet:
    """Cached dense operators for a given :class:`HilbertSpec`."""

    spec: HilbertSpec
    sz1: np.ndarray
    sz2: np.ndarray
    a: np.ndarray
    adag: np.ndarray
    number: np.ndarray
    identity: np.ndarray
    # spin-space-only helpers (9 x 9)
    spin_sz1: np.ndarray = field(repr=False, default=None)
    spin_sz2: np.ndarray = field(repr=False, default=None)


def _fock_lowering(fock_dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, fock_dim, dtype=float)), 1).astype(complex)


def build_operators(spec: HilbertSpec) -> OperatorSet:
    """Construct the dense operator set used by the propagators."""
    nf = spec.fock_dim
    i3 = np.eye(3, dtype=complex)
    if_ = np.eye(nf, dtype=complex)
    sz = np.diag(SIGMA_Z_DIAG).astype(complex)
    a = _fock_lowering(nf)
    spin_sz1 = np.kron(sz, i3)
    spin_sz2 = np.kron(i3, sz)
    return OperatorSet(
        spec=spec,
        sz1=np.kron(spin_sz1, if_),
        sz2=np.kron(spin_sz2, if_),
        a=np.kron(np.eye(9, dtype=complex), a),
        adag=np.kron(np.eye(9, dtype=complex), a.conj().T),
        number=np.kron(np.eye(9, dtype=complex), a.conj().T @ a),
        identity=np.eye(spec.dim, dtype=complex),
        spin_sz1=spin_sz1,
        spin_sz2=spin_sz2,
    )


# ---------------------------------------------------------------------------
# spin-space rotations


def _single_qubit_rotation(theta: float, phi: float) -> np.ndarray:
    """3x3 rotation on the qubit levels, identity on the auxiliary level.

    R = exp(-i theta/2 (cos(phi) sigma_x + sin(phi) sigma_y)) embedded so the
    auxiliary level is untouched.
    """
    c = np.cos(theta / 2.0)
    s = np.sin(theta / 2.0)
    r = np.eye(3, dtype=complex)
    # closed form of the 2x2 exponential on the qubit block
    r[DOWN, DOWN] = c
    r[UP, UP] = c
    r[DOWN, UP] = -1j * s * np.exp(-1j * phi)
    r[UP, DOWN] = -1j * s * np.exp(1j * phi)
    return r


def spin_rotation(theta: float, phi: float, ion: int | None = None) -> np.ndarray:
    """Global (or single-ion) rotation pulse on the 9-dim two-ion spin space.

    Parameters
    ----------
    theta, phi : float
        Rotation angle and axis phase (0 = x, pi/2 = y).
    ion : {None, 0, 1}
        ``None`` applies the pulse to both ions (the hardware drives them
        globally); 0 or 1 restricts to one ion, used only in diagnostics.
    """
    r = _single_qubit_rotation(theta, phi)
    i3 = np.eye(3, dtype=complex)
    if ion is None:
        return np.kron(r, r)
    if ion == 0:
        return np.kron(r, i3)
    if ion == 1:
        return np.kron(i3, r)
    raise ValueError("ion must be None, 0 or 1")


def spin_z_phase(phi1: float, phi2: float) -> np.ndarray:
    """Diagonal spin-space phase exp(-i phi1 sz1/2) exp(-i phi2 sz2/2)."""
    d1 = np.exp(-1j * phi1 / 2.0 * SIGMA_Z_DIAG)
    d2 = np.exp(-1j * phi2 / 2.0 * SIGMA_Z_DIAG)
    return np.diag(np.kron(d1, d2))


def spin_index(i1: int, i2: int) -> int:
    return i1 * 3 + i2


def bell_phi() -> np.ndarray:
    """Symmetric Bell state (|dd> + i |uu>)/sqrt(2) as a spin 9-vector."""
    v = np.zeros(9, dtype=complex)
    v[spin_index(DOWN, DOWN)] = 1.0 / np.sqrt(2.0)
    v[spin_index(UP, UP)] = 1j / np.sqrt(2.0)
    return v


def bell_psi_minus() -> np.ndarray:
    """Antisymmetric singlet (|du> - |ud>)/sqrt(2) as a spin 9-vector."""
    v = np.zeros(9, dtype=complex)
    v[spin_index(DOWN, UP)] = 1.0 / np.sqrt(2.0)
    v[spin_index(UP, DOWN)] = -1.0 / np.sqrt(2.0)
    return v


# ---------------------------------------------------------------------------
# measures


def state_fidelity(state: QuantumState | np.ndarray, target: np.ndarray) -> float:
    """Fidelity of ``state`` against a pure ``target``.

    ``target`` may live on the full space or, for spin-only density matrices,
    on the 9-dim spin space.  For a ket this is |<target|psi>|^2, for a
    density matrix <target|rho|target>.
    """
    target = np.asarray(target, dtype=complex)
    if isinstance(state, QuantumState):
        data = state.data
        kind = state.kind
    else:
        data = np.asarray(state, dtype=complex)
        kind = "dm" if data.ndim == 2 else "ket"
    if kind == "ket":
        if data.shape != target.shape:
            raise DimensionError(f"ket dim {data.shape} vs target dim {target.shape}")
        return float(np.abs(np.vdot(target, data)) ** 2)
    if data.shape[0] != target.shape[0]:
        raise DimensionError(f"dm dim {data.shape} vs target dim {target.shape}")
    return float(np.real(np.vdot(target, data @ target)))


def partial_trace_motion(state: QuantumState) -> np.ndarray:
    """Trace out the motional mode, returning the 9x9 spin density matrix."""
    nf = state.spec.fock_dim
    if state.kind == "ket":
        psi = state.data.reshape(9, nf)
        return psi @ psi.conj().T
    rho = state.data.reshape(9, nf, 9, nf)
    return np.einsum("injn->ij", rho)


def motional_populations(state: QuantumState) -> np.ndarray:
    """Diagonal of the reduced motional state (length fock_dim)."""
    nf = state.spec.fock_dim
    if state.kind == "ket":
        psi = state.data.reshape(9, nf)
        return np.real(np.einsum("in,in->n", psi.conj(), psi))
    rho = state.data.reshape(9, nf, 9, nf)
    return np.real(np.einsum("inin->n", rho))


def check_fock_convergence(run, spec: HilbertSpec, tol: float = 1e-8) -> tuple[float, float, bool]:
    """Re-run a simulation at doubled Fock truncation and compare.

    ``run`` is a callable mapping a HilbertSpec to a scalar figure of merit
    (typically a fidelity).  Returns (value, doubled_value, converged).
    """
    v1 = float(run(spec))
    v2 = float(run(spec.doubled()))
    return v1, v2, abs(v1 - v2) <= tol
