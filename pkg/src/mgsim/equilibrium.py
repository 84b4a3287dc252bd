"""Steady-state oracle: solves the dispatch problem (in the sparse
edge-balance formulation or the aggregate-balance formulation) jointly with
the network steady-state equations, returning a full closed-loop equilibrium.

The two formulations share one damped-Newton core with an outer active-set
loop over the generation cap, the inverter voltage boxes, and the generator
voltage boxes (the latter entered through the excitation window).  Excitation
commands are not determined by optimality (their duals cancel at any
saddle point), so non-binding generators keep a caller-supplied warm value —
matching the closed loop, where excitation only moves while a bound is
violated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import Bounds, ControllerGains, ControllerState, CostSpec
from .network import NetworkModel, incidence_matrix
from .plant import PlantState
from .powerflow import (VoltageProfile, active_flow, excitation_map,
                        excitation_map_midpoint, flow_jacobians, loss_vector,
                        reactive_flow, total_loss_grad_u, total_loss_hessian)


class SolverError(RuntimeError):
    def __init__(self, msg: str, residual: float | None = None):
        super().__init__(msg)
        self.residual = residual


class InfeasibleError(SolverError):
    pass


@dataclass
class DispatchProblem:
    model: NetworkModel
    cost: CostSpec
    bounds: Bounds
    p_load: np.ndarray
    q_load: np.ndarray

    def validate(self) -> None:
        self.cost.validate()
        self.bounds.validate()
        m = self.model
        if self.cost.weights.shape != (m.n_gi,):
            raise ValueError("cost weights must cover the dispatchable nodes")
        for name in ("p_load", "q_load"):
            v = getattr(self, name)
            if v.shape != (m.n,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite length-n vector")


@dataclass
class SolveOptions:
    tol: float = 1e-11
    max_newton: int = 60
    max_outer: int = 30
    psi_variant: str = "exact"


@dataclass
class KKTPoint:
    """Primal/dual optimum plus the consistent plant steady state."""

    theta_node: np.ndarray     # (n,) absolute angles, node 0 grounded
    u: np.ndarray              # (n,) voltage magnitudes
    p_g: np.ndarray            # (n_gi,)
    lam_bar: float
    lam: np.ndarray            # (n,) uniform price vector
    nu: np.ndarray             # (m_c,) minimum-norm balance flows
    u_f: np.ndarray            # (n_g,)
    mu_g_lo: np.ndarray
    mu_g_hi: np.ndarray
    mu_i_lo: np.ndarray
    mu_i_hi: np.ndarray
    mu_p: np.ndarray
    cost_value: float
    active: dict = field(default_factory=dict)

    def plant_state(self, model: NetworkModel) -> PlantState:
        th_e = self.theta_node[model.edge_i] - self.theta_node[model.edge_j]
        return PlantState(theta=th_e,
                          l_g=np.zeros(model.n_g),
                          l_i=np.zeros(model.n_i),
                          u_g=self.u[: model.n_g].copy(),
                          omega_l=np.zeros(model.n_l),
                          u_l=self.u[model.n_gi:].copy())

    def controller_state(self, model: NetworkModel) -> ControllerState:
        return ControllerState(p_g=self.p_g.copy(), lam=self.lam.copy(),
                               nu=self.nu.copy(),
                               mu_g_lo=self.mu_g_lo.copy(),
                               mu_g_hi=self.mu_g_hi.copy(),
                               u_f=self.u_f.copy(),
                               mu_i_lo=self.mu_i_lo.copy(),
                               mu_i_hi=self.mu_i_hi.copy(),
                               u_i=self.u[model.n_g: model.n_gi].copy(),
                               mu_p=self.mu_p.copy())

    def profile(self, model: NetworkModel) -> VoltageProfile:
        th_e = self.theta_node[model.edge_i] - self.theta_node[model.edge_j]
        return VoltageProfile(self.u.copy(), th_e)


# -- core Newton system ------------------------------------------------------

class _Layout:
    def __init__(self, m: NetworkModel):
        self.n, self.ng, self.ni, self.nl = m.n, m.n_g, m.n_i, m.n_l
        self.ngi = m.n_gi
        sizes = [("th", self.n - 1), ("u", self.n), ("pg", self.ngi),
                 ("lam", 1), ("mup", self.ngi), ("mil", self.ni),
                 ("mih", self.ni), ("uf", self.ng)]
        self.off = {}
        pos = 0
        for name, size in sizes:
            self.off[name] = (pos, pos + size)
            pos += size
        self.size = pos

    def get(self, z, name):
        a, b = self.off[name]
        return z[a:b]


def _psi_profile_jacs(model: NetworkModel, prof: VoltageProfile,
                      variant: str, bounds: Bounds):
    """Derivatives of the excitation-map profile term (times dx) w.r.t. node
    voltages and angles; inverter columns vanish under the midpoint variant."""
    ng = model.n_g
    d_du = np.zeros((ng, model.n))
    d_dth = np.zeros((ng, model.n))
    u_eff = prof.u.copy()
    if variant == "hat":
        u_eff[model.n_g: model.n_gi] = 0.5 * (bounds.u_i_lo + bounds.u_i_hi)
    s = np.sin(prof.theta)
    c = np.cos(prof.theta)
    for e in range(model.m_p):
        a, b = model.edge_i[e], model.edge_j[e]
        ge, be = model.edge_g[e], model.edge_b[e]
        for i, j, se in ((a, b, s[e]), (b, a, -s[e])):
            if i >= ng:
                continue
            dx = model.dx[i]
            if not (variant == "hat" and model.n_g <= j < model.n_gi):
                d_du[i, j] += dx * (ge * se - be * c[e])
            w = dx * u_eff[j] * (ge * c[e] + be * se)
            d_dth[i, i] += w
            d_dth[i, j] -= w
    return d_du, d_dth


def _psi_value(model, prof, u_arg, variant, bounds):
    if variant == "hat":
        return excitation_map_midpoint(model, prof, u_arg,
                                       bounds.u_i_lo, bounds.u_i_hi)
    return excitation_map(model, prof, u_arg)


def _solve_kkt_core(problem: DispatchProblem, formulation: str,
                    u_f_warm: np.ndarray | None,
                    u_g_target: np.ndarray | None,
                    options: SolveOptions,
                    warm: KKTPoint | None) -> KKTPoint:
    problem.validate()
    m = problem.model
    lay = _Layout(m)
    bounds = problem.bounds
    w = problem.cost.weights
    variant = options.psi_variant
    ng, ni, nl, ngi, n = m.n_g, m.n_i, m.n_l, m.n_gi, m.n

    if u_g_target is None and u_f_warm is None:
        u_g_target = 0.5 * (bounds.u_g_lo + bounds.u_g_hi)
    if u_g_target is not None and ng and (
            np.any(u_g_target < bounds.u_g_lo - 1e-12)
            or np.any(u_g_target > bounds.u_g_hi + 1e-12)):
        raise InfeasibleError("u_g_target outside the voltage box")

    # active sets: +1 upper bound, -1 lower bound, 0 inactive
    act_p = np.zeros(ngi, dtype=int)
    act_ui = np.zeros(ni, dtype=int)
    act_ug = np.zeros(ng, dtype=int)

    z = np.zeros(lay.size)
    lo_u, hi_u = lay.off["u"]
    z[lo_u:hi_u] = 1.0
    if warm is not None:
        z[lay.off["th"][0]: lay.off["th"][1]] = warm.theta_node[1:]
        z[lo_u:hi_u] = warm.u
        z[lay.off["pg"][0]: lay.off["pg"][1]] = warm.p_g
        z[lay.off["lam"][0]] = warm.lam_bar
        z[lay.off["mup"][0]: lay.off["mup"][1]] = warm.mu_p
        z[lay.off["mil"][0]: lay.off["mil"][1]] = warm.mu_i_lo
        z[lay.off["mih"][0]: lay.off["mih"][1]] = warm.mu_i_hi
        z[lay.off["uf"][0]: lay.off["uf"][1]] = warm.u_f
        act_p[warm.mu_p > 0] = 1
        act_ui[warm.mu_i_lo > 0] = -1
        act_ui[warm.mu_i_hi > 0] = 1
    else:
        lam0 = (float(np.sum(problem.p_load)) + 0.0) / float(np.sum(w))
        z[lay.off["pg"][0]: lay.off["pg"][1]] = w * lam0
        z[lay.off["lam"][0]] = lam0
        if u_f_warm is not None:
            z[lay.off["uf"][0]: lay.off["uf"][1]] = u_f_warm

    eps = 1e-9
    for outer in range(options.max_outer):
        z = _newton(problem, lay, z, act_p, act_ui, act_ug,
                    u_f_warm, u_g_target, formulation, variant, options)
        u = lay.get(z, "u")
        p_g = lay.get(z, "pg")
        mu_p = lay.get(z, "mup")
        mil = lay.get(z, "mil")
        mih = lay.get(z, "mih")
        changed = False

        if bounds.p_cap is not None:
            for k in range(ngi):
                if act_p[k] == 0 and p_g[k] > bounds.p_cap + eps:
                    act_p[k] = 1
                    changed = True
                elif act_p[k] == 1 and mu_p[k] < -eps:
                    act_p[k] = 0
                    changed = True
        u_i = u[ng:ngi]
        for k in range(ni):
            if act_ui[k] == 0:
                if u_i[k] < bounds.u_i_lo[k] - eps:
                    act_ui[k] = -1
                    changed = True
                elif u_i[k] > bounds.u_i_hi[k] + eps:
                    act_ui[k] = 1
                    changed = True
            elif act_ui[k] == -1 and mil[k] < -eps:
                act_ui[k] = 0
                changed = True
            elif act_ui[k] == 1 and mih[k] < -eps:
                act_ui[k] = 0
                changed = True
        if u_g_target is None:
            # warm excitation mode: clip onto the moving window when violated
            u_g = u[:ng]
            for k in range(ng):
                if act_ug[k] == 0:
                    if u_g[k] > bounds.u_g_hi[k] + eps:
                        act_ug[k] = 1
                        changed = True
                    elif u_g[k] < bounds.u_g_lo[k] - eps:
                        act_ug[k] = -1
                        changed = True
                else:
                    # revert if the warm value is feasible again
                    prof = _profile_from(lay, z, m)
                    psi_lo = _psi_value(m, prof, bounds.u_g_lo, variant, bounds)
                    psi_hi = _psi_value(m, prof, bounds.u_g_hi, variant, bounds)
                    ufw = u_f_warm[k]
                    if act_ug[k] == 1 and ufw < psi_hi[k] - eps:
                        act_ug[k] = 0
                        changed = True
                    elif act_ug[k] == -1 and ufw > psi_lo[k] + eps:
                        act_ug[k] = 0
                        changed = True
        if not changed:
            return _package(problem, lay, z, act_p, act_ui, act_ug, formulation)
    raise SolverError(f"active set did not settle in {options.max_outer} rounds")


def _profile_from(lay: _Layout, z: np.ndarray, m: NetworkModel) -> VoltageProfile:
    th = np.concatenate([[0.0], lay.get(z, "th")])
    return VoltageProfile(lay.get(z, "u").copy(),
                          th[m.edge_i] - th[m.edge_j])


def _residual_jacobian(problem, lay, z, act_p, act_ui, act_ug,
                       u_f_warm, u_g_target, formulation, variant):
    m = problem.model
    bounds = problem.bounds
    w = problem.cost.weights
    n, ng, ni, nl, ngi = m.n, m.n_g, m.n_i, m.n_l, m.n_gi

    th_red = lay.get(z, "th")
    u = lay.get(z, "u")
    p_g = lay.get(z, "pg")
    lam_bar = z[lay.off["lam"][0]]
    mu_p = lay.get(z, "mup")
    mil = lay.get(z, "mil")
    mih = lay.get(z, "mih")
    u_f = lay.get(z, "uf")

    prof = _profile_from(lay, z, m)
    p = active_flow(m, prof)
    q = reactive_flow(m, prof)
    jac = flow_jacobians(m, prof)
    dphi_u = total_loss_grad_u(m, prof)
    h_uu, h_uth = total_loss_hessian(m, prof)

    F = np.zeros(lay.size)
    J = np.zeros((lay.size, lay.size))
    (a_th, b_th), (a_u, b_u) = lay.off["th"], lay.off["u"]
    a_pg, b_pg = lay.off["pg"]
    i_lam = lay.off["lam"][0]
    a_mup, b_mup = lay.off["mup"]
    a_mil, b_mil = lay.off["mil"]
    a_mih, b_mih = lay.off["mih"]
    a_uf, b_uf = lay.off["uf"]

    row = 0
    # nodal active balance
    inj = np.zeros(n)
    inj[:ngi] = p_g
    F[row: row + n] = inj - problem.p_load - p
    J[row: row + n, a_th: b_th] = -jac.dp_dth[:, 1:]
    J[row: row + n, a_u: b_u] = -jac.dp_du
    J[row: row + ngi, a_pg: b_pg] = np.eye(ngi)
    row += n
    # load reactive balance
    F[row: row + nl] = q[ngi:] + problem.q_load[ngi:]
    J[row: row + nl, a_th: b_th] = jac.dq_dth[ngi:, 1:]
    J[row: row + nl, a_u: b_u] = jac.dq_du[ngi:, :]
    row += nl
    # generator excitation steady state
    if ng:
        u_g = u[:ng]
        F[row: row + ng] = u_f - u_g - m.dx * q[:ng] / u_g
        J[row: row + ng, a_uf: b_uf] = np.eye(ng)
        J[row: row + ng, a_th: b_th] = -(m.dx / u_g)[:, None] * jac.dq_dth[:ng, 1:]
        J[row: row + ng, a_u: b_u] = -(m.dx / u_g)[:, None] * jac.dq_du[:ng, :]
        J[row: row + ng, a_u: a_u + ng] += np.diag(-1.0 + m.dx * q[:ng] / u_g ** 2)
    row += ng
    # generation stationarity
    F[row: row + ngi] = p_g / w - lam_bar + mu_p
    J[row: row + ngi, a_pg: b_pg] = np.diag(1.0 / w)
    J[row: row + ngi, i_lam] = -1.0
    J[row: row + ngi, a_mup: b_mup] = np.eye(ngi)
    row += ngi
    # generation-cap complementarity
    for k in range(ngi):
        if act_p[k] == 1:
            F[row] = p_g[k] - bounds.p_cap
            J[row, a_pg + k] = 1.0
        else:
            F[row] = mu_p[k]
            J[row, a_mup + k] = 1.0
        row += 1
    # inverter voltage stationarity (price-weighted loss descent)
    for k in range(ni):
        col = ng + k
        F[row] = -lam_bar * dphi_u[col] + mil[k] - mih[k]
        J[row, i_lam] = -dphi_u[col]
        J[row, a_u: b_u] = -lam_bar * h_uu[col, :]
        J[row, a_th: b_th] = -lam_bar * h_uth[col, 1:]
        J[row, a_mil + k] = 1.0
        J[row, a_mih + k] = -1.0
        row += 1
    # inverter box complementarity
    for k in range(ni):
        if act_ui[k] == -1:
            F[row] = u[ng + k] - bounds.u_i_lo[k]
            J[row, a_u + ng + k] = 1.0
        else:
            F[row] = mil[k]
            J[row, a_mil + k] = 1.0
        row += 1
    for k in range(ni):
        if act_ui[k] == 1:
            F[row] = u[ng + k] - bounds.u_i_hi[k]
            J[row, a_u + ng + k] = 1.0
        else:
            F[row] = mih[k]
            J[row, a_mih + k] = 1.0
        row += 1
    # excitation / generator-voltage pinning
    if ng:
        psi_du, psi_dth = _psi_profile_jacs(m, prof, variant, bounds)
        psi_lo = _psi_value(m, prof, bounds.u_g_lo, variant, bounds)
        psi_hi = _psi_value(m, prof, bounds.u_g_hi, variant, bounds)
    for k in range(ng):
        if act_ug[k] == 1 or act_ug[k] == -1:
            bound_val = psi_hi[k] if act_ug[k] == 1 else psi_lo[k]
            if formulation == "sharp":
                F[row] = u_f[k] - bound_val
                J[row, a_uf + k] = 1.0
                J[row, a_u: b_u] = -psi_du[k, :]
                J[row, a_th: b_th] = -psi_dth[k, 1:]
            else:
                ub = (bounds.u_g_hi[k] if act_ug[k] == 1 else bounds.u_g_lo[k])
                F[row] = u[k] - ub
                J[row, a_u + k] = 1.0
        elif u_g_target is not None:
            F[row] = u[k] - u_g_target[k]
            J[row, a_u + k] = 1.0
        else:
            F[row] = u_f[k] - u_f_warm[k]
            J[row, a_uf + k] = 1.0
        row += 1
    assert row == lay.size
    return F, J


def _newton(problem, lay, z0, act_p, act_ui, act_ug, u_f_warm, u_g_target,
            formulation, variant, options) -> np.ndarray:
    z = z0.copy()
    F, J = _residual_jacobian(problem, lay, z, act_p, act_ui, act_ug,
                              u_f_warm, u_g_target, formulation, variant)
    norm = np.max(np.abs(F))
    for _ in range(options.max_newton):
        if norm < options.tol:
            return z
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise SolverError("KKT Jacobian singular", residual=norm) from exc
        t = 1.0
        while True:
            z_try = z + t * step
            u_try = lay.get(z_try, "u")
            if np.all(u_try > 0.2):
                try:
                    F_try, J_try = _residual_jacobian(
                        problem, lay, z_try, act_p, act_ui, act_ug,
                        u_f_warm, u_g_target, formulation, variant)
                except (ValueError, FloatingPointError):
                    F_try = None
                if F_try is not None and np.max(np.abs(F_try)) < norm * (1 - 1e-4 * t) + 1e-15:
                    z, F, J = z_try, F_try, J_try
                    norm = np.max(np.abs(F))
                    break
            t *= 0.5
            if t < 1.0 / 1024.0:
                raise SolverError("Newton line search stalled", residual=norm)
    raise SolverError(f"Newton did not converge (residual {norm:.3e})",
                      residual=norm)


def _package(problem, lay, z, act_p, act_ui, act_ug, formulation) -> KKTPoint:
    m = problem.model
    theta_node = np.concatenate([[0.0], lay.get(z, "th")])
    u = lay.get(z, "u").copy()
    p_g = lay.get(z, "pg").copy()
    lam_bar = float(z[lay.off["lam"][0]])
    prof = VoltageProfile(u, theta_node[m.edge_i] - theta_node[m.edge_j])
    phi = loss_vector(m, prof)
    inj = np.zeros(m.n)
    inj[: m.n_gi] = p_g
    b = inj - problem.p_load - phi
    dc = incidence_matrix(m, "communication")
    nu = np.linalg.lstsq(dc, b, rcond=None)[0]
    cost_value = 0.5 * float(np.sum(p_g ** 2 / problem.cost.weights))
    return KKTPoint(
        theta_node=theta_node, u=u, p_g=p_g, lam_bar=lam_bar,
        lam=np.full(m.n, lam_bar), nu=nu,
        u_f=lay.get(z, "uf").copy(),
        mu_g_lo=np.zeros(m.n_g), mu_g_hi=np.zeros(m.n_g),
        mu_i_lo=lay.get(z, "mil").copy(), mu_i_hi=lay.get(z, "mih").copy(),
        mu_p=lay.get(z, "mup").copy(), cost_value=cost_value,
        active={"p": act_p.copy(), "u_i": act_ui.copy(), "u_g": act_ug.copy(),
                "formulation": formulation})


def solve_op_sharp(problem: DispatchProblem,
                   u_f_warm: np.ndarray | None = None,
                   u_g_target: np.ndarray | None = None,
                   options: SolveOptions | None = None,
                   warm: KKTPoint | None = None) -> KKTPoint:
    """Optimal dispatch in the edge-balance formulation with voltage limits
    carried by the excitation window."""
    return _solve_kkt_core(problem, "sharp", u_f_warm, u_g_target,
                           options or SolveOptions(), warm)


def solve_op(problem: DispatchProblem,
             u_f_warm: np.ndarray | None = None,
             u_g_target: np.ndarray | None = None,
             options: SolveOptions | None = None,
             warm: KKTPoint | None = None) -> KKTPoint:
    """Optimal dispatch in the aggregate-balance formulation with direct
    generator-voltage boxes."""
    return _solve_kkt_core(problem, "op", u_f_warm, u_g_target,
                           options or SolveOptions(), warm)


# -- KKT residual report ------------------------------------------------------

@dataclass
class KKTResiduals:
    stationarity_pg: float
    balance: float
    consensus: float
    uf_stationarity: float
    ui_stationarity: float
    comp_slack: float
    primal_feasibility: float
    dual_sign: float

    def worst(self) -> float:
        return max(abs(getattr(self, f)) for f in self.__dataclass_fields__)

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def kkt_residual(problem: DispatchProblem, point: KKTPoint,
                 variant: str = "exact") -> KKTResiduals:
    """Named residuals of the saddle-point conditions at an arbitrary point."""
    m = problem.model
    bounds = problem.bounds
    prof = point.profile(m)
    phi = loss_vector(m, prof)
    jac = flow_jacobians(m, prof)
    dc = incidence_matrix(m, "communication")

    grad = point.p_g / problem.cost.weights
    stat_pg = grad - point.lam[: m.n_gi] + point.mu_p
    inj = np.zeros(m.n)
    inj[: m.n_gi] = point.p_g
    balance = dc @ point.nu - inj + problem.p_load + phi
    consensus = dc.T @ point.lam
    uf_stat = point.mu_g_lo - point.mu_g_hi

    dphi_dui = jac.dphi_du[:, m.n_g: m.n_gi]
    ui_stat = (-dphi_dui.T @ point.lam + point.mu_i_lo - point.mu_i_hi)
    if variant == "exact":
        from .powerflow import excitation_jac_ui
        dpsi = excitation_jac_ui(m, prof)
        ui_stat = ui_stat - dpsi.T @ (point.mu_g_lo - point.mu_g_hi)

    u_i = point.u[m.n_g: m.n_gi]
    psi_lo = _psi_value(m, prof, bounds.u_g_lo, variant, bounds)
    psi_hi = _psi_value(m, prof, bounds.u_g_hi, variant, bounds)
    comp = [point.mu_g_lo * (psi_lo - point.u_f),
            point.mu_g_hi * (point.u_f - psi_hi),
            point.mu_i_lo * (bounds.u_i_lo - u_i),
            point.mu_i_hi * (u_i - bounds.u_i_hi)]
    feas = [np.maximum(0.0, psi_lo - point.u_f),
            np.maximum(0.0, point.u_f - psi_hi),
            np.maximum(0.0, bounds.u_i_lo - u_i),
            np.maximum(0.0, u_i - bounds.u_i_hi)]
    if bounds.p_cap is not None:
        comp.append(point.mu_p * (point.p_g - bounds.p_cap))
        feas.append(np.maximum(0.0, point.p_g - bounds.p_cap))
    duals = np.concatenate([point.mu_g_lo, point.mu_g_hi, point.mu_i_lo,
                            point.mu_i_hi, point.mu_p])

    def mx(vs):
        return float(max(np.max(np.abs(v)) if v.size else 0.0 for v in vs))

    return KKTResiduals(
        stationarity_pg=mx([stat_pg]),
        balance=mx([balance]),
        consensus=mx([consensus]),
        uf_stationarity=mx([uf_stat]),
        ui_stationarity=mx([ui_stat]),
        comp_slack=mx(comp),
        primal_feasibility=mx(feas),
        dual_sign=float(-min(0.0, np.min(duals))) if duals.size else 0.0,
    )


def consistent_equilibrium(model: NetworkModel, gains: ControllerGains,
                           cost: CostSpec, p_load: np.ndarray,
                           q_load: np.ndarray, bounds: Bounds,
                           u_f_warm: np.ndarray | None = None,
                           u_g_target: np.ndarray | None = None,
                           options: SolveOptions | None = None,
                           warm: KKTPoint | None = None,
                           ) -> tuple[PlantState, ControllerState, KKTPoint]:
    """Full closed-loop equilibrium: every plant and controller derivative
    vanishes there.  Used to start scenarios in synchronized steady state."""
    gains.validate()
    problem = DispatchProblem(model, cost, bounds, p_load, q_load)
    point = solve_op_sharp(problem, u_f_warm=u_f_warm, u_g_target=u_g_target,
                           options=options, warm=warm)
    return point.plant_state(model), point.controller_state(model), point
