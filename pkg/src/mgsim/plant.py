"""Plant dynamics of the microgrid: swing and voltage ODEs for generator and
inverter nodes plus algebraic power-balance constraints at load nodes
(a semi-explicit index-1 DAE), together with the energy function used by the
stability analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkModel
from .powerflow import (VoltageProfile, active_flow, flow_jacobians,
                        reactive_flow)

U_FLOOR = 0.1   # below this the voltage equations are meaningless


class SingularStateError(RuntimeError):
    """State outside the model's validity region (voltage collapse)."""


class AlgebraicSolveError(RuntimeError):
    """Newton closure of the load constraints failed."""


@dataclass
class PlantState:
    theta: np.ndarray     # (m_p,) angle differences per physical edge, rad
    l_g: np.ndarray       # (n_g,) generator momentum deviations, p.u.
    l_i: np.ndarray       # (n_i,) inverter momentum deviations, p.u.
    u_g: np.ndarray       # (n_g,) generator transient voltages, p.u.
    omega_l: np.ndarray   # (n_l,) load frequency deviations, p.u. (algebraic)
    u_l: np.ndarray       # (n_l,) load voltages, p.u. (algebraic)

    def copy(self) -> "PlantState":
        return PlantState(*(np.array(v) for v in
                            (self.theta, self.l_g, self.l_i, self.u_g,
                             self.omega_l, self.u_l)))


@dataclass
class PlantInput:
    p_g: np.ndarray       # (n_g,) generator active injections
    p_i: np.ndarray       # (n_i,) inverter active injections
    u_f: np.ndarray       # (n_g,) excitation voltages
    u_i: np.ndarray       # (n_i,) inverter terminal voltages
    p_load: np.ndarray    # (n,) active demand at every node
    q_load: np.ndarray    # (n,) reactive demand at every node


def profile_of(model: NetworkModel, state: PlantState,
               u_i: np.ndarray) -> VoltageProfile:
    """Assemble the full voltage/angle profile from plant state and the
    inverter voltage command."""
    u = np.concatenate([state.u_g, u_i, state.u_l])
    return VoltageProfile(u, state.theta)


def frequencies(model: NetworkModel, state: PlantState) -> np.ndarray:
    """Node frequency deviations: momentum/inertia at dynamic nodes, the
    algebraic values at loads."""
    w_gi = np.concatenate([state.l_g, state.l_i]) / model.inertia_gi
    return np.concatenate([w_gi, state.omega_l])


# -- energy -----------------------------------------------------------------

def hamiltonian(model: NetworkModel, state: PlantState,
                u_i: np.ndarray) -> float:
    """Stored energy: kinetic terms, generator field energy, and the magnetic
    coupling energy of the network."""
    n_g = model.n_g
    prof = profile_of(model, state, u_i)
    u = prof.u
    kin = 0.5 * float(np.sum(
        np.concatenate([state.l_g, state.l_i]) ** 2 / model.inertia_gi))
    field = 0.5 * float(np.sum(state.u_g ** 2 / model.dx))
    # self-susceptance quadratics at generator and load voltage states
    self_b = -0.5 * float(np.sum(model.bii[:n_g] * state.u_g ** 2))
    self_b -= 0.5 * float(np.sum(model.bii[model.n_gi:] * state.u_l ** 2))
    coup = -float(np.sum(model.edge_b * u[model.edge_i] * u[model.edge_j]
                         * np.cos(state.theta)))
    kin_l = 0.5 * float(np.sum(state.omega_l ** 2))
    return kin + field + self_b + coup + kin_l


@dataclass
class PlantCostate:
    """Gradient of the energy w.r.t. the plant state, by block."""

    theta: np.ndarray
    l_g: np.ndarray
    l_i: np.ndarray
    u_g: np.ndarray
    omega_l: np.ndarray
    u_l: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.l_g, self.l_i, self.u_g,
                               self.omega_l, self.u_l])


def costate(model: NetworkModel, state: PlantState,
            u_i: np.ndarray) -> PlantCostate:
    prof = profile_of(model, state, u_i)
    u = prof.u
    s = np.sin(state.theta)
    c = np.cos(state.theta)
    z_theta = model.edge_b * u[model.edge_i] * u[model.edge_j] * s
    z_lg = state.l_g / model.inertia_gi[: model.n_g]
    z_li = state.l_i / model.inertia_gi[model.n_g:]
    # -sum_j B_ij U_j cos(t_ij) accumulated at each node
    bcos = np.zeros(model.n)
    np.add.at(bcos, model.edge_i, -model.edge_b * u[model.edge_j] * c)
    np.add.at(bcos, model.edge_j, -model.edge_b * u[model.edge_i] * c)
    z_ug = (state.u_g / model.dx - model.bii[: model.n_g] * state.u_g
            + bcos[: model.n_g])
    z_ul = -model.bii[model.n_gi:] * state.u_l + bcos[model.n_gi:]
    return PlantCostate(z_theta, z_lg, z_li, z_ug, state.omega_l.copy(), z_ul)


def costate_ui(model: NetworkModel, state: PlantState,
               u_i: np.ndarray) -> np.ndarray:
    """Gradient of the energy w.r.t. the inverter voltage commands, which
    enter only through the edge coupling terms."""
    prof = profile_of(model, state, u_i)
    u = prof.u
    c = np.cos(state.theta)
    bcos = np.zeros(model.n)
    np.add.at(bcos, model.edge_i, -model.edge_b * u[model.edge_j] * c)
    np.add.at(bcos, model.edge_j, -model.edge_b * u[model.edge_i] * c)
    return bcos[model.n_g: model.n_gi]


def shifted_hamiltonian(model: NetworkModel, state: PlantState,
                        u_i: np.ndarray, ref_state: PlantState,
                        ref_u_i: np.ndarray) -> float:
    """Bregman shift of the energy around a reference point: zero at the
    reference, locally nonnegative when the energy Hessian is positive
    definite there."""
    h = hamiltonian(model, state, u_i)
    h_ref = hamiltonian(model, ref_state, ref_u_i)
    z_ref = costate(model, ref_state, ref_u_i).flat()
    zi_ref = costate_ui(model, ref_state, ref_u_i)
    dx_flat = _flat(state) - _flat(ref_state)
    dui = u_i - ref_u_i
    return h - h_ref - float(z_ref @ dx_flat) - float(zi_ref @ dui)


def _flat(state: PlantState) -> np.ndarray:
    return np.concatenate([state.theta, state.l_g, state.l_i, state.u_g,
                           state.omega_l, state.u_l])


# -- residuals --------------------------------------------------------------

def dynamic_residual(model: NetworkModel, state: PlantState,
                     inp: PlantInput) -> tuple[np.ndarray, np.ndarray,
                                               np.ndarray, np.ndarray]:
    """Time derivatives of the dynamic states (theta, l_g, l_i, u_g)."""
    if np.any(state.u_g <= 0.0):
        raise SingularStateError("generator voltage reached zero")
    prof = profile_of(model, state, inp.u_i)
    p = active_flow(model, prof)
    q = reactive_flow(model, prof)
    w = frequencies(model, state)
    dtheta = w[model.edge_i] - w[model.edge_j]
    pg_full = np.concatenate([inp.p_g, inp.p_i])
    w_gi = w[: model.n_gi]
    dl = (-model.damping[: model.n_gi] * w_gi + pg_full
          - inp.p_load[: model.n_gi] - p[: model.n_gi])
    du_g = (inp.u_f - state.u_g
            - model.dx * q[: model.n_g] / state.u_g) / model.tau_u
    return dtheta, dl[: model.n_g], dl[model.n_g:], du_g


def algebraic_residual(model: NetworkModel, state: PlantState,
                       inp: PlantInput) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of the load power-balance constraints (active, reactive)."""
    prof = profile_of(model, state, inp.u_i)
    p = active_flow(model, prof)
    q = reactive_flow(model, prof)
    lo = model.n_gi
    r_p = (-model.damping[lo:] * state.omega_l - inp.p_load[lo:] - p[lo:])
    r_q = -inp.q_load[lo:] - q[lo:]
    return r_p, r_q


def solve_algebraic(model: NetworkModel, state: PlantState, inp: PlantInput,
                    guess: tuple[np.ndarray, np.ndarray] | None = None,
                    tol: float = 1e-10, max_iter: int = 50
                    ) -> tuple[np.ndarray, np.ndarray, int]:
    """Newton closure of the load constraints for (omega_l, u_l).

    Returns the consistent algebraic states and the iteration count.
    """
    lo = model.n_gi
    work = state.copy()
    if guess is not None:
        work.omega_l = np.array(guess[0], dtype=float)
        work.u_l = np.array(guess[1], dtype=float)
    if np.any(work.u_l <= 0.0):
        raise ValueError("algebraic solve needs a strictly positive u_l guess")

    n_l = model.n_l
    for it in range(max_iter):
        r_p, r_q = algebraic_residual(model, work, inp)
        res = np.concatenate([r_p, r_q])
        if np.max(np.abs(res)) < tol:
            return work.omega_l, work.u_l, it
        jac = flow_jacobians(model, profile_of(model, work, inp.u_i))
        j = np.zeros((2 * n_l, 2 * n_l))
        j[:n_l, :n_l] = -np.diag(model.damping[lo:])
        j[:n_l, n_l:] = -jac.dp_du[lo:, lo:]
        j[n_l:, n_l:] = -jac.dq_du[lo:, lo:]
        try:
            step = np.linalg.solve(j, -res)
        except np.linalg.LinAlgError as exc:
            raise AlgebraicSolveError(
                "load-constraint Jacobian singular (voltage collapse?)"
            ) from exc
        work.omega_l = work.omega_l + step[:n_l]
        work.u_l = work.u_l + step[n_l:]
        if np.any(work.u_l < U_FLOOR):
            raise AlgebraicSolveError(
                f"load voltage fell below {U_FLOOR} during Newton iteration")
    r_p, r_q = algebraic_residual(model, work, inp)
    raise AlgebraicSolveError(
        "no convergence after "
        f"{max_iter} iterations; final residual "
        f"{np.max(np.abs(np.concatenate([r_p, r_q]))):.3e}")
