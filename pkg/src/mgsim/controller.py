"""Distributed primal-dual gradient controller.

The frequency block drives generation toward equal marginal cost subject to
a neighbor-to-neighbor power balance; the voltage block enforces voltage
magnitude limits through projected dual dynamics.  Dual states stay
nonnegative because their outflow is clipped at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetworkModel
from .powerflow import (VoltageProfile, excitation_jac_ui, excitation_map,
                        excitation_map_midpoint, flow_jacobians)


@dataclass
class ControllerState:
    p_g: np.ndarray       # (n_g + n_i,) active power setpoints
    lam: np.ndarray       # (n,) node prices
    nu: np.ndarray        # (m_c,) balance flows on communication edges
    mu_g_lo: np.ndarray   # (n_g,) duals of the lower excitation bound
    mu_g_hi: np.ndarray   # (n_g,) duals of the upper excitation bound
    u_f: np.ndarray       # (n_g,) excitation commands
    mu_i_lo: np.ndarray   # (n_i,) duals of the lower inverter-voltage bound
    mu_i_hi: np.ndarray   # (n_i,) duals of the upper inverter-voltage bound
    u_i: np.ndarray       # (n_i,) inverter voltage commands
    mu_p: np.ndarray      # (n_g + n_i,) duals of the generation cap

    def copy(self) -> "ControllerState":
        return ControllerState(*(np.array(getattr(self, f)) for f in
                                 ("p_g", "lam", "nu", "mu_g_lo", "mu_g_hi",
                                  "u_f", "mu_i_lo", "mu_i_hi", "u_i", "mu_p")))


@dataclass
class ControllerGains:
    """Inverse update speeds (time constants) per controller block."""

    tau_pg: float = 0.1
    tau_lam: float = 0.1
    tau_nu: float = 0.1
    tau_mu_g_lo: float = 0.01
    tau_mu_g_hi: float = 0.01
    tau_u_f: float = 0.01
    tau_mu_i_lo: float = 0.1
    tau_mu_i_hi: float = 0.1
    tau_u_i: float = 10.0
    tau_mu_p: float = 0.1

    def validate(self) -> None:
        for name in self.__dataclass_fields__:
            if not getattr(self, name) > 0:
                raise ValueError(f"gain {name} must be > 0")


@dataclass
class CostSpec:
    """Strictly convex quadratic generation cost 0.5 * sum p_k^2 / w_k."""

    weights: np.ndarray

    def validate(self) -> None:
        if not np.all(self.weights > 0):
            raise ValueError("cost weights must be > 0")


@dataclass
class Bounds:
    u_g_lo: np.ndarray    # (n_g,)
    u_g_hi: np.ndarray
    u_i_lo: np.ndarray    # (n_i,)
    u_i_hi: np.ndarray
    p_cap: float | None = None   # shared upper generation bound, None = off

    def validate(self) -> None:
        if np.any(self.u_g_lo >= self.u_g_hi):
            raise ValueError("generator voltage bounds must satisfy lo < hi")
        if np.any(self.u_i_lo >= self.u_i_hi):
            raise ValueError("inverter voltage bounds must satisfy lo < hi")

    @staticmethod
    def uniform(model: NetworkModel, lo: float, hi: float,
                p_cap: float | None = None) -> "Bounds":
        return Bounds(np.full(model.n_g, lo), np.full(model.n_g, hi),
                      np.full(model.n_i, lo), np.full(model.n_i, hi), p_cap)


def cost_and_gradient(cost: CostSpec, p_g: np.ndarray) -> tuple[float, np.ndarray]:
    grad = p_g / cost.weights
    return 0.5 * float(p_g @ grad), grad


def project_dual(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Positive projection for dual updates: passes x through wherever the
    dual is strictly positive or x is nonnegative, zero otherwise."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if x.shape != mu.shape:
        raise ValueError("x and mu must have the same shape")
    if np.any(mu < 0):
        raise ValueError("dual variables must be nonnegative")
    return np.where((mu > 0) | (x >= 0), x, 0.0)


def _project_relaxed(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    # integrator-internal variant: Runge-Kutta stages may probe slightly
    # negative duals, which take the boundary branch
    return np.where((mu > 0) | (x >= 0), x, 0.0)


def psi_bounds(model: NetworkModel, prof: VoltageProfile, bounds: Bounds,
               variant: str = "exact") -> tuple[np.ndarray, np.ndarray]:
    """Excitation-voltage window implied by the generator voltage limits at
    the current profile."""
    if variant == "exact":
        lo = excitation_map(model, prof, bounds.u_g_lo)
        hi = excitation_map(model, prof, bounds.u_g_hi)
    elif variant == "hat":
        lo = excitation_map_midpoint(model, prof, bounds.u_g_lo,
                                     bounds.u_i_lo, bounds.u_i_hi)
        hi = excitation_map_midpoint(model, prof, bounds.u_g_hi,
                                     bounds.u_i_lo, bounds.u_i_hi)
    else:
        raise ValueError(f"unknown excitation-map variant {variant!r}")
    return lo, hi


def freq_controller_rhs(model: NetworkModel, cost: CostSpec,
                        state: ControllerState, omega_gi: np.ndarray,
                        phi: np.ndarray, p_load: np.ndarray,
                        gains: ControllerGains, p_cap: float | None = None,
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Derivatives of (p_g, lam, nu, mu_p).

    The price lam integrates the local power imbalance (including the local
    loss share), nu diffuses imbalance along communication edges, and p_g
    descends the cost corrected by the local price and frequency deviation.
    """
    n_gi = model.n_gi
    if omega_gi.shape != (n_gi,):
        raise ValueError("omega_gi must cover the dispatchable nodes")
    _, grad = cost_and_gradient(cost, state.p_g)
    dp = (-grad + state.lam[:n_gi] - omega_gi)
    if p_cap is not None:
        dp = dp - state.mu_p
        dmu_p = _project_relaxed(state.p_g - p_cap, state.mu_p) / gains.tau_mu_p
    else:
        dmu_p = np.zeros_like(state.mu_p)
    dp = dp / gains.tau_pg

    ca = np.array([e[0] for e in model.comm_edges], dtype=np.intp)
    cb = np.array([e[1] for e in model.comm_edges], dtype=np.intp)
    dc_nu = np.zeros(model.n)
    np.add.at(dc_nu, ca, state.nu)
    np.add.at(dc_nu, cb, -state.nu)
    inj = np.zeros(model.n)
    inj[:n_gi] = state.p_g
    dlam = (dc_nu - inj + p_load + phi) / gains.tau_lam
    dnu = -(state.lam[ca] - state.lam[cb]) / gains.tau_nu
    return dp, dlam, dnu, dmu_p


def volt_controller_rhs(model: NetworkModel, state: ControllerState,
                        prof: VoltageProfile, lam: np.ndarray, bounds: Bounds,
                        gains: ControllerGains, variant: str = "exact",
                        ) -> tuple[np.ndarray, ...]:
    """Derivatives of (mu_g_lo, mu_g_hi, u_f, mu_i_lo, mu_i_hi, u_i).

    Excitation commands move only while a bound dual is active; inverter
    commands additionally descend the price-weighted network losses.
    """
    psi_lo, psi_hi = psi_bounds(model, prof, bounds, variant)
    dmu_g_lo = _project_relaxed(psi_lo - state.u_f, state.mu_g_lo) / gains.tau_mu_g_lo
    dmu_g_hi = _project_relaxed(state.u_f - psi_hi, state.mu_g_hi) / gains.tau_mu_g_hi
    du_f = (state.mu_g_lo - state.mu_g_hi) / gains.tau_u_f

    dmu_i_lo = _project_relaxed(bounds.u_i_lo - state.u_i,
                                state.mu_i_lo) / gains.tau_mu_i_lo
    dmu_i_hi = _project_relaxed(state.u_i - bounds.u_i_hi,
                                state.mu_i_hi) / gains.tau_mu_i_hi

    dphi_dui = flow_jacobians(model, prof).dphi_du[:, model.n_g: model.n_gi]
    du_i = -dphi_dui.T @ lam + state.mu_i_lo - state.mu_i_hi
    if variant == "exact":
        dpsi = excitation_jac_ui(model, prof)
        du_i = du_i - dpsi.T @ (state.mu_g_lo - state.mu_g_hi)
    du_i = du_i / gains.tau_u_i
    return dmu_g_lo, dmu_g_hi, du_f, dmu_i_lo, dmu_i_hi, du_i
