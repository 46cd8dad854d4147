"""Baseband-equivalent model of a full-duplex relay with coupling feedback.

The relay retransmits a 2-channel (I/Q) baseband signal while its own
transmission leaks back into the receiving antenna through one or more
delay paths.  Demodulating a delayed passband signal rotates the I/Q
pair, so each path acts on the baseband as

    gain * R(f, L) * u(t - L),    gain = a1 * a2 * r,

with R(f, L) the clockwise rotation by 2*pi*f*L.  The design plant
assembled here maps (disturbance w, held controller output u) to
(cancelation error z, sampled measurement y):

    z = W w - P u
    y = F W w + sum_i gain_i e^{-L_i s} R_i F P u

where W shapes the admissible inputs, F is the receive-side anti-alias
filter and P the transmit-side post filter.  Delays are kept symbolic
(never rationally approximated); they are resolved exactly on the fast
grid during lifting or by sample buffers in simulation.

All blocks are 2x2 (I/Q pair); scalar transfer functions are promoted to
scalar * I2.  Everything here is a pure function of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .lti import StateSpace, frequency_response, from_tf, is_stable

__all__ = [
    "RelayParams",
    "CouplingChannel",
    "CouplingPath",
    "GeneralizedPlantSpec",
    "CoreSystem",
    "rotation_matrix",
    "scalar_block",
    "build_generalized_plant",
    "build_perturbed_plant",
    "plant_frequency_response",
    "error_system_response",
    "uncertainty_weight",
    "assemble_plant_core",
    "assemble_core_blocks",
    "assemble_robust_core",
]


def rotation_matrix(f: float, L: float) -> np.ndarray:
    """I/Q rotation caused by demodulating a signal delayed by L seconds.

    Returns [[cos a, sin a], [-sin a, cos a]] with a = 2*pi*f*L, an
    orthogonal matrix with determinant 1.
    """
    # reduce f*L modulo one carrier cycle so that integer products give the
    # identity exactly (f*L is ~1e4 in practice and would otherwise lose
    # several digits inside cos/sin)
    a = 2.0 * np.pi * ((f * L) % 1.0)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, s], [-s, c]])


def scalar_block(num, den) -> StateSpace:
    """Promote a scalar transfer function to a 2x2 scalar * I system."""
    num = np.atleast_1d(np.asarray(num, float))
    den = np.atleast_1d(np.asarray(den, float))
    if den.size == 1:
        # static gain: avoid the spurious zero eigenvalue tf2ss introduces
        return StateSpace.static((num[-1] / den[0]) * np.eye(2))
    siso = from_tf(num, den)
    n = siso.n_states
    A = block_diag(siso.A, siso.A) if n else np.zeros((0, 0))
    B = block_diag(siso.B, siso.B) if n else np.zeros((0, 2))
    C = block_diag(siso.C, siso.C) if n else np.zeros((2, 0))
    D = block_diag(siso.D, siso.D)
    return StateSpace(A, B, C, D)


def _check_block(name: str, sys: StateSpace, strictly_proper: bool = False):
    if sys.is_discrete:
        raise ValueError(f"{name} must be a continuous-time system")
    if (sys.n_inputs, sys.n_outputs) != (2, 2):
        raise ValueError(f"{name} must be 2x2, got {sys.n_outputs}x{sys.n_inputs}")
    if not is_stable(sys) and sys.n_states > 0:
        raise ValueError(f"{name} must be stable")
    if strictly_proper and not np.allclose(sys.D, 0.0):
        raise ValueError(f"{name} must be strictly proper (zero feedthrough)")


@dataclass(frozen=True)
class RelayParams:
    """Physical and filter parameters of the relay station.

    h is the controller sampling period [s], f the carrier frequency
    [Hz], a1/a2 the receive/transmit amplifier gains.  W is the (strictly
    proper) input spectrum weight, F the anti-alias filter and P the post
    filter; each is a stable 2x2 continuous system.
    """

    h: float
    f: float
    a1: float
    a2: float
    W: StateSpace
    F: StateSpace
    P: StateSpace

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("sampling period h must be positive")
        if not self.f > 0:
            raise ValueError("carrier frequency f must be positive")
        # a2 = 0 is allowed: it degenerates to an open loop (no coupling)
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("amplifier gains must be nonnegative")
        _check_block("W", self.W, strictly_proper=True)
        _check_block("F", self.F)
        _check_block("P", self.P)


@dataclass(frozen=True)
class CouplingChannel:
    """Nominal coupling path plus optional detour paths.

    The nominal path has attenuation r > 0 and delay L > 0; every extra
    path must be a detour, i.e. L_i > L.  extra_paths is a tuple of
    (r_i, L_i) pairs.
    """

    r: float
    L: float
    extra_paths: tuple = ()

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("nominal attenuation r must be positive")
        if not self.L > 0:
            raise ValueError("nominal delay L must be positive")
        paths = tuple((float(ri), float(Li)) for ri, Li in self.extra_paths)
        for ri, Li in paths:
            if ri < 0:
                raise ValueError("extra path attenuation must be nonnegative")
            if not Li > self.L:
                raise ValueError(
                    f"extra path delay {Li} must exceed the nominal delay {self.L}"
                )
        object.__setattr__(self, "extra_paths", paths)

    def alphas(self, a1: float, a2: float):
        """Loop gains of all paths: alpha_i = a1 * a2 * r_i."""
        gains = [a1 * a2 * self.r]
        gains += [a1 * a2 * ri for ri, _ in self.extra_paths]
        return gains


@dataclass(frozen=True)
class CouplingPath:
    """One resolved feedback path: gain alpha, delay L, I/Q rotation."""

    alpha: float
    L: float
    rot: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot, dtype=float)
        rot.setflags(write=False)
        object.__setattr__(self, "rot", rot)


@dataclass(frozen=True)
class GeneralizedPlantSpec:
    """Factored design plant.

    The four blocks are kept as separate state-space factors together
    with the delay paths, so the delay stays exact until lifting.
    ``paths`` lists the coupling paths included in the plant (only the
    nominal one for the standard design plant; analysis plants may carry
    the detour paths as well).  ``channel`` retains the full channel
    description for uncertainty modeling.
    """

    params: RelayParams
    channel: CouplingChannel
    paths: tuple

    @property
    def h(self) -> float:
        return self.params.h


def build_generalized_plant(params: RelayParams,
                            channel: CouplingChannel) -> GeneralizedPlantSpec:
    """Design plant with only the nominal coupling path.

    Detour paths never enter the design plant; they are covered by the
    multiplicative uncertainty weight instead.
    """
    nominal = CouplingPath(
        alpha=params.a1 * params.a2 * channel.r,
        L=channel.L,
        rot=rotation_matrix(params.f, channel.L),
    )
    return GeneralizedPlantSpec(params=params, channel=channel, paths=(nominal,))


def build_perturbed_plant(params: RelayParams,
                          channel: CouplingChannel) -> GeneralizedPlantSpec:
    """Analysis plant carrying the nominal path and every detour path."""
    paths = [CouplingPath(params.a1 * params.a2 * channel.r, channel.L,
                          rotation_matrix(params.f, channel.L))]
    for ri, Li in channel.extra_paths:
        paths.append(CouplingPath(params.a1 * params.a2 * ri, Li,
                                  rotation_matrix(params.f, Li)))
    return GeneralizedPlantSpec(params=params, channel=channel,
                                paths=tuple(paths))


def plant_frequency_response(spec: GeneralizedPlantSpec,
                             omega: float) -> np.ndarray:
    """4x4 response of the assembled plant, delays applied as phases.

    Rows are (z, y), columns (w, u); the delay of each path contributes
    the scalar phase e^{-j omega L_i} times its rotation.
    """
    Wf = frequency_response(spec.params.W, omega)
    Ff = frequency_response(spec.params.F, omega)
    Pf = frequency_response(spec.params.P, omega)
    coupling = np.zeros((2, 2), dtype=complex)
    for path in spec.paths:
        coupling += path.alpha * np.exp(-1j * omega * path.L) * path.rot @ Ff @ Pf
    top = np.hstack([Wf, -Pf])
    bottom = np.hstack([Ff @ Wf, coupling])
    return np.vstack([top, bottom])


def error_system_response(channel: CouplingChannel, omega: float,
                          f: float) -> np.ndarray:
    """Relative channel perturbation seen by the nominal path at omega.

    Each detour path contributes (r_i / r) e^{-j (L_i - L) omega} times
    the rotation for the differential delay L_i - L.  Requires at least
    one detour path.
    """
    if not channel.extra_paths:
        raise ValueError("error_system_response requires at least one extra path")
    E = np.zeros((2, 2), dtype=complex)
    for ri, Li in channel.extra_paths:
        dL = Li - channel.L
        E += (ri / channel.r) * np.exp(-1j * dL * omega) * rotation_matrix(f, dL)
    return E


def uncertainty_weight(channel: CouplingChannel,
                       epsilon: float = 0.01) -> StateSpace:
    """Static multiplicative-uncertainty weight covering the detours.

    W2 = (sum_i r_i / r + epsilon) * I strictly dominates the largest
    singular value of the channel perturbation at every frequency, since
    each detour contributes at most r_i / r to it.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    bound = sum(ri for ri, _ in channel.extra_paths) / channel.r
    return StateSpace.static((bound + epsilon) * np.eye(2))


# ---------------------------------------------------------------------------
# Delay-free cores for lifting and simulation.
#
# Delays commute with the LTI blocks, so each path's delay is moved onto a
# signal that is piecewise constant on the fast grid (the held controller
# output, or a fast-held disturbance).  A shift-register chain at the fast
# rate then realizes the delay exactly, and the remaining continuous core
# is delay-free.


@dataclass(frozen=True)
class CoreSystem:
    """Delay-free continuous core plus its register chain wiring.

    sys inputs are ordered [fast external inputs, controller hold u,
    one delayed-signal slot per chain]; outputs are [fast performance
    outputs, measurement y].  chains[k] = (delay_seconds, source) feeds
    chain k, where source is "ctrl" (the held controller output) or
    ("ext", j) (external fast input pair starting at column j); the chain
    output drives delayed-signal slot k.
    """

    sys: StateSpace
    n_ext: int
    n_ctrl: int
    n_perf: int
    n_meas: int
    chains: tuple


def assemble_plant_core(spec: GeneralizedPlantSpec,
                        external_input: bool = False) -> CoreSystem:
    """Delay-free core of the design plant.

    Inputs: [w (2), u (2), one delayed-u slot (2) per path]; outputs
    [z (2), y (2)].  With ``external_input`` the W block is replaced by a
    unit feedthrough so the first input is the already-shaped signal v
    (used by the simulator, which generates v separately).
    """
    params = spec.params
    W = StateSpace.static(np.eye(2)) if external_input else params.W
    return assemble_core_blocks(W, params.F, params.P, spec.paths)


def assemble_core_blocks(W: StateSpace, F: StateSpace, P: StateSpace,
                         paths) -> CoreSystem:
    """Delay-free core from raw blocks (no parameter validation)."""
    M = len(paths)

    nW, nF, nP = W.n_states, F.n_states, P.n_states
    # state layout: x_W | x_Pu | (x_Pd_i, x_Fd_i) per path | x_Fv
    sizes = [nW, nP] + [nP + nF] * M + [nF]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n = offsets[-1]
    sW = slice(offsets[0], offsets[1])
    sPu = slice(offsets[1], offsets[2])
    path_slices = []
    for i in range(M):
        base = offsets[2 + i]
        path_slices.append((slice(base, base + nP),
                            slice(base + nP, base + nP + nF)))
    sFv = slice(offsets[2 + M], offsets[3 + M])

    n_in = 2 + 2 + 2 * M
    A = np.zeros((n, n))
    B = np.zeros((n, n_in))
    c_w, c_u = slice(0, 2), slice(2, 4)

    A[sW, sW] = W.A
    B[sW, c_w] = W.B
    A[sPu, sPu] = P.A
    B[sPu, c_u] = P.B
    # v = Cw x_W + Dw w feeds the receive filter copy
    A[sFv, sFv] = F.A
    A[sFv, sW] = F.B @ W.C
    B[sFv, c_w] = F.B @ W.D
    for i, (sPd, sFd) in enumerate(path_slices):
        c_dly = slice(4 + 2 * i, 6 + 2 * i)
        A[sPd, sPd] = P.A
        B[sPd, c_dly] = P.B
        A[sFd, sFd] = F.A
        A[sFd, sPd] = F.B @ P.C
        B[sFd, c_dly] = F.B @ P.D

    C = np.zeros((4, n))
    D = np.zeros((4, n_in))
    rz, ry = slice(0, 2), slice(2, 4)
    # z = v - P u
    C[rz, sW] = W.C
    D[rz, c_w] = W.D
    C[rz, sPu] = -P.C
    D[rz, c_u] = -P.D
    # y = F v + sum_i alpha_i R_i F P (delayed u)
    C[ry, sFv] = F.C
    C[ry, sW] = F.D @ W.C
    D[ry, c_w] = F.D @ W.D
    for i, ((sPd, sFd), path) in enumerate(zip(path_slices, paths)):
        c_dly = slice(4 + 2 * i, 6 + 2 * i)
        gR = path.alpha * path.rot
        C[ry, sFd] += gR @ F.C
        C[ry, sPd] += gR @ F.D @ P.C
        D[ry, c_dly] += gR @ F.D @ P.D

    chains = tuple((path.L, "ctrl") for path in paths)
    return CoreSystem(StateSpace(A, B, C, D), n_ext=2, n_ctrl=2,
                      n_perf=2, n_meas=2, chains=chains)


def assemble_robust_core(spec: GeneralizedPlantSpec,
                         W2: StateSpace) -> CoreSystem:
    """Delay-free core of the two-channel robust design plant.

    Inputs [w1 (2), w2 (2), u (2), delayed u (2), delayed w2 (2)];
    outputs [z1 (2), z2 (2), y (2)].  The performance channel is the
    nominal one; the uncertainty channel exposes

        z2 = W2 F P u,    y += alpha R (F P u)(t-L) + alpha R w2(t-L)

    so that closing w2 = Delta z2 with any ||Delta|| < 1 reproduces every
    admissible channel perturbation.
    """
    if len(spec.paths) != 1:
        raise ValueError("robust core expects the nominal single-path plant")
    params = spec.params
    path = spec.paths[0]
    W, F, P = params.W, params.F, params.P
    _check_block("W2", W2)

    nW, nF, nP, n2 = W.n_states, F.n_states, P.n_states, W2.n_states
    # x_W | x_Pu | x_Pd, x_Fd (delayed chain) | x_Fv | x_Fz (F on P u) | x_W2
    sizes = [nW, nP, nP + nF, nF, nF, n2]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    n = offsets[-1]
    sW = slice(offsets[0], offsets[1])
    sPu = slice(offsets[1], offsets[2])
    sPd = slice(offsets[2], offsets[2] + nP)
    sFd = slice(offsets[2] + nP, offsets[3])
    sFv = slice(offsets[3], offsets[4])
    sFz = slice(offsets[4], offsets[5])
    sW2 = slice(offsets[5], offsets[6])

    n_in = 10
    c_w1, c_w2 = slice(0, 2), slice(2, 4)
    c_u, c_ud, c_w2d = slice(4, 6), slice(6, 8), slice(8, 10)
    A = np.zeros((n, n))
    B = np.zeros((n, n_in))

    A[sW, sW] = W.A
    B[sW, c_w1] = W.B
    A[sPu, sPu] = P.A
    B[sPu, c_u] = P.B
    A[sPd, sPd] = P.A
    B[sPd, c_ud] = P.B
    A[sFd, sFd] = F.A
    A[sFd, sPd] = F.B @ P.C
    B[sFd, c_ud] = F.B @ P.D
    A[sFv, sFv] = F.A
    A[sFv, sW] = F.B @ W.C
    B[sFv, c_w1] = F.B @ W.D
    # xi = F P u (undelayed), feeding W2
    A[sFz, sFz] = F.A
    A[sFz, sPu] = F.B @ P.C
    B[sFz, c_u] = F.B @ P.D
    A[sW2, sW2] = W2.A
    A[sW2, sFz] = W2.B @ F.C
    A[sW2, sPu] = W2.B @ F.D @ P.C
    B[sW2, c_u] = W2.B @ F.D @ P.D

    C = np.zeros((6, n))
    D = np.zeros((6, n_in))
    rz1, rz2, ry = slice(0, 2), slice(2, 4), slice(4, 6)
    C[rz1, sW] = W.C
    D[rz1, c_w1] = W.D
    C[rz1, sPu] = -P.C
    D[rz1, c_u] = -P.D
    C[rz2, sW2] = W2.C
    C[rz2, sFz] = W2.D @ F.C
    C[rz2, sPu] = W2.D @ F.D @ P.C
    D[rz2, c_u] = W2.D @ F.D @ P.D
    gR = path.alpha * path.rot
    C[ry, sFv] = F.C
    C[ry, sW] = F.D @ W.C
    D[ry, c_w1] = F.D @ W.D
    C[ry, sFd] = gR @ F.C
    C[ry, sPd] = gR @ F.D @ P.C
    D[ry, c_ud] = gR @ F.D @ P.D
    D[ry, c_w2d] = gR

    chains = ((path.L, "ctrl"), (path.L, ("ext", 2)))
    return CoreSystem(StateSpace(A, B, C, D), n_ext=4, n_ctrl=2,
                      n_perf=4, n_meas=2, chains=chains)
