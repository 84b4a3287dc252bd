"""AC power-flow evaluation and the nonlinear maps built on it.

All quantities follow the bus-admittance sign convention documented in
:mod:`mgsim.network`: with Y = G + jB,

    p_i = Gii U_i^2 + sum_j U_i U_j (B_ij sin t_ij + G_ij cos t_ij)
    q_i = -Bii U_i^2 + sum_j U_i U_j (G_ij sin t_ij - B_ij cos t_ij)

where t_ij is the angle of node i minus the angle of node j.  Angle
differences are stored per physical edge, oriented from the edge's first
node to its second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkModel


@dataclass
class VoltageProfile:
    """Voltage magnitudes per node plus angle differences per physical edge."""

    u: np.ndarray       # (n,) p.u., > 0
    theta: np.ndarray   # (m_p,) rad, oriented edge i -> j

    def check(self, model: NetworkModel) -> None:
        if self.u.shape != (model.n,):
            raise ValueError(f"u has shape {self.u.shape}, expected ({model.n},)")
        if self.theta.shape != (model.m_p,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, expected ({model.m_p},)")
        if not np.all(self.u > 0):
            raise ValueError("voltage magnitudes must be > 0")


def _edge_terms(model: NetworkModel, prof: VoltageProfile):
    """Per-edge products shared by the flow evaluations."""
    ui = prof.u[model.edge_i]
    uj = prof.u[model.edge_j]
    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    return ui * uj, s, c


def active_flow(model: NetworkModel, prof: VoltageProfile) -> np.ndarray:
    """Sending-end active power injection at every node (p.u.)."""
    prof.check(model)
    uu, s, c = _edge_terms(model, prof)
    p = model.gii * prof.u ** 2
    bsin = model.edge_b * uu * s
    gcos = model.edge_g * uu * c
    np.add.at(p, model.edge_i, bsin + gcos)
    np.add.at(p, model.edge_j, -bsin + gcos)
    return p


def reactive_flow(model: NetworkModel, prof: VoltageProfile) -> np.ndarray:
    """Sending-end reactive power injection at every node (p.u.)."""
    prof.check(model)
    uu, s, c = _edge_terms(model, prof)
    q = -model.bii * prof.u ** 2
    gsin = model.edge_g * uu * s
    bcos = model.edge_b * uu * c
    np.add.at(q, model.edge_i, gsin - bcos)
    np.add.at(q, model.edge_j, -gsin - bcos)
    return q


def loss_vector(model: NetworkModel, prof: VoltageProfile) -> np.ndarray:
    """Per-node transmission-loss allocation (the cosine conductance terms)."""
    prof.check(model)
    uu, _, c = _edge_terms(model, prof)
    phi = model.gii * prof.u ** 2
    gcos = model.edge_g * uu * c
    np.add.at(phi, model.edge_i, gcos)
    np.add.at(phi, model.edge_j, gcos)
    return phi


def loss_total(model: NetworkModel, prof: VoltageProfile) -> float:
    """Overall transmission losses (p.u.)."""
    return float(np.sum(loss_vector(model, prof)))


def sin_loss_vector(model: NetworkModel,
                    prof: VoltageProfile) -> tuple[np.ndarray, np.ndarray]:
    """Sine conductance cross-flows at generator and load nodes.

    Generator entries are scaled by (xd - xd')/tau_u; load entries are raw.
    These are the resistive coupling terms of the dissipation vector.
    """
    prof.check(model)
    uu, s, _ = _edge_terms(model, prof)
    acc = np.zeros(model.n)
    gsin = model.edge_g * uu * s
    np.add.at(acc, model.edge_i, gsin)
    np.add.at(acc, model.edge_j, -gsin)
    r_g = model.dx / model.tau_u
    rho_g = r_g * acc[: model.n_g]
    rho_l = acc[model.n_gi:]
    return rho_g, rho_l


# -- excitation map ---------------------------------------------------------

def _neighbor_sums(model: NetworkModel, prof: VoltageProfile,
                   u_override: np.ndarray | None = None) -> np.ndarray:
    """S_i = sum_j U_j (G_ij sin t_ij - B_ij cos t_ij) for generator nodes.

    ``u_override`` substitutes the voltage seen at specific neighbor
    positions (used by the midpoint-estimate variant for inverters).
    """
    u = prof.u if u_override is None else u_override
    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    out = np.zeros(model.n_g)
    for e in range(model.m_p):
        a, b = model.edge_i[e], model.edge_j[e]
        ge, be = model.edge_g[e], model.edge_b[e]
        if a < model.n_g:
            out[a] += u[b] * (ge * s[e] - be * c[e])
        if b < model.n_g:
            out[b] += u[a] * (-ge * s[e] - be * c[e])
    return out


def excitation_map(model: NetworkModel, prof: VoltageProfile,
                   u_g: np.ndarray) -> np.ndarray:
    """Steady-state excitation voltage required to hold internal voltage u_g.

    Affine and strictly increasing in u_g:
        psi_i(u) = u (1 - Bii dx) + dx * S_i(profile)
    so voltage-magnitude bounds translate one-to-one into excitation bounds.
    """
    prof.check(model)
    if u_g.shape != (model.n_g,):
        raise ValueError(f"u_g has shape {u_g.shape}, expected ({model.n_g},)")
    slope = 1.0 - model.bii[: model.n_g] * model.dx
    return u_g * slope + model.dx * _neighbor_sums(model, prof)


def excitation_map_midpoint(model: NetworkModel, prof: VoltageProfile,
                            u_g: np.ndarray, ui_lo: np.ndarray,
                            ui_hi: np.ndarray) -> np.ndarray:
    """Excitation map with inverter neighbor voltages replaced by the
    midpoint of their bounds; independent of the actual inverter voltages."""
    prof.check(model)
    u_est = prof.u.copy()
    u_est[model.n_g: model.n_gi] = 0.5 * (ui_lo + ui_hi)
    slope = 1.0 - model.bii[: model.n_g] * model.dx
    return u_g * slope + model.dx * _neighbor_sums(model, prof, u_est)


def excitation_jac_ui(model: NetworkModel, prof: VoltageProfile) -> np.ndarray:
    """Jacobian (n_g x n_i) of the excitation map w.r.t. inverter voltages."""
    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    jac = np.zeros((model.n_g, model.n_i))
    for e in range(model.m_p):
        a, b = model.edge_i[e], model.edge_j[e]
        ge, be = model.edge_g[e], model.edge_b[e]
        if a < model.n_g and model.n_g <= b < model.n_gi:
            jac[a, b - model.n_g] += model.dx[a] * (ge * s[e] - be * c[e])
        if b < model.n_g and model.n_g <= a < model.n_gi:
            jac[b, a - model.n_g] += model.dx[b] * (-ge * s[e] - be * c[e])
    return jac


# -- derivatives ------------------------------------------------------------

@dataclass
class FlowJacobians:
    """Dense derivatives of (p, q, phi) w.r.t. node angles and voltages."""

    dp_dth: np.ndarray
    dp_du: np.ndarray
    dq_dth: np.ndarray
    dq_du: np.ndarray
    dphi_dth: np.ndarray
    dphi_du: np.ndarray


def flow_jacobians(model: NetworkModel, prof: VoltageProfile) -> FlowJacobians:
    """Analytic flow Jacobians.

    Angle columns are with respect to absolute node angles; any realization
    of the edge differences gives the same values.
    """
    prof.check(model)
    n = model.n
    u = prof.u
    dp_dth = np.zeros((n, n))
    dp_du = np.zeros((n, n))
    dq_dth = np.zeros((n, n))
    dq_du = np.zeros((n, n))
    dphi_dth = np.zeros((n, n))
    dphi_du = np.zeros((n, n))

    dp_du[np.diag_indices(n)] = 2.0 * model.gii * u
    dq_du[np.diag_indices(n)] = -2.0 * model.bii * u
    dphi_du[np.diag_indices(n)] = 2.0 * model.gii * u

    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    for e in range(model.m_p):
        a, b = model.edge_i[e], model.edge_j[e]
        ge, be = model.edge_g[e], model.edge_b[e]
        ua, ub = u[a], u[b]
        for i, j, se in ((a, b, s[e]), (b, a, -s[e])):
            ui, uj = u[i], u[j]
            ce = c[e]
            # p_i edge term: U_i U_j (B sin + G cos)
            dp_dth[i, i] += ui * uj * (be * ce - ge * se)
            dp_dth[i, j] -= ui * uj * (be * ce - ge * se)
            dp_du[i, i] += uj * (be * se + ge * ce)
            dp_du[i, j] += ui * (be * se + ge * ce)
            # q_i edge term: U_i U_j (G sin - B cos)
            dq_dth[i, i] += ui * uj * (ge * ce + be * se)
            dq_dth[i, j] -= ui * uj * (ge * ce + be * se)
            dq_du[i, i] += uj * (ge * se - be * ce)
            dq_du[i, j] += ui * (ge * se - be * ce)
            # phi_i edge term: U_i U_j G cos
            dphi_dth[i, i] -= ui * uj * ge * se
            dphi_dth[i, j] += ui * uj * ge * se
            dphi_du[i, i] += uj * ge * ce
            dphi_du[i, j] += ui * ge * ce
    return FlowJacobians(dp_dth, dp_du, dq_dth, dq_du, dphi_dth, dphi_du)


def total_loss_grad_u(model: NetworkModel, prof: VoltageProfile) -> np.ndarray:
    """Gradient of total losses w.r.t. node voltages: 2 phi / u."""
    return 2.0 * loss_vector(model, prof) / prof.u


def total_loss_hessian(model: NetworkModel, prof: VoltageProfile
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Second derivatives of total losses: (d2/dU dU, d2/dU dtheta)."""
    n = model.n
    h_uu = np.zeros((n, n))
    h_uth = np.zeros((n, n))
    h_uu[np.diag_indices(n)] = 2.0 * model.gii
    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    u = prof.u
    for e in range(model.m_p):
        a, b = model.edge_i[e], model.edge_j[e]
        ge = model.edge_g[e]
        for i, j, se in ((a, b, s[e]), (b, a, -s[e])):
            h_uu[i, j] += 2.0 * ge * c[e]
            h_uth[i, i] -= 2.0 * ge * u[j] * se
            h_uth[i, j] += 2.0 * ge * u[j] * se
    return h_uu, h_uth
