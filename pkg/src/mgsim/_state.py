"""Flat packing of the closed-loop state vector shared by the integrator
backends.  Order: plant dynamic states first, then the controller blocks."""

from __future__ import annotations

import numpy as np

from .controller import ControllerState
from .network import NetworkModel
from .plant import PlantState

_BLOCKS = ("theta", "l_g", "l_i", "u_g", "p_g", "lam", "nu", "mu_g_lo",
           "mu_g_hi", "u_f", "mu_i_lo", "mu_i_hi", "u_i", "mu_p")


def block_sizes(model: NetworkModel) -> dict[str, int]:
    return {"theta": model.m_p, "l_g": model.n_g, "l_i": model.n_i,
            "u_g": model.n_g, "p_g": model.n_gi, "lam": model.n,
            "nu": model.m_c, "mu_g_lo": model.n_g, "mu_g_hi": model.n_g,
            "u_f": model.n_g, "mu_i_lo": model.n_i, "mu_i_hi": model.n_i,
            "u_i": model.n_i, "mu_p": model.n_gi}


def offsets(model: NetworkModel) -> dict[str, tuple[int, int]]:
    sizes = block_sizes(model)
    out = {}
    pos = 0
    for name in _BLOCKS:
        out[name] = (pos, pos + sizes[name])
        pos += sizes[name]
    out["__total__"] = (pos, pos)
    return out


def state_size(model: NetworkModel) -> int:
    return offsets(model)["__total__"][0]


def pack(model: NetworkModel, ps: PlantState, cs: ControllerState) -> np.ndarray:
    off = offsets(model)
    x = np.empty(state_size(model))
    vals = {"theta": ps.theta, "l_g": ps.l_g, "l_i": ps.l_i, "u_g": ps.u_g,
            "p_g": cs.p_g, "lam": cs.lam, "nu": cs.nu,
            "mu_g_lo": cs.mu_g_lo, "mu_g_hi": cs.mu_g_hi, "u_f": cs.u_f,
            "mu_i_lo": cs.mu_i_lo, "mu_i_hi": cs.mu_i_hi, "u_i": cs.u_i,
            "mu_p": cs.mu_p}
    for name in _BLOCKS:
        a, b = off[name]
        x[a:b] = vals[name]
    return x


def unpack(model: NetworkModel, x: np.ndarray,
           alg: np.ndarray) -> tuple[PlantState, ControllerState]:
    off = offsets(model)

    def get(name):
        a, b = off[name]
        return x[a:b].copy()

    n_l = model.n_l
    ps = PlantState(theta=get("theta"), l_g=get("l_g"), l_i=get("l_i"),
                    u_g=get("u_g"), omega_l=alg[:n_l].copy(),
                    u_l=alg[n_l:].copy())
    cs = ControllerState(p_g=get("p_g"), lam=get("lam"), nu=get("nu"),
                         mu_g_lo=get("mu_g_lo"), mu_g_hi=get("mu_g_hi"),
                         u_f=get("u_f"), mu_i_lo=get("mu_i_lo"),
                         mu_i_hi=get("mu_i_hi"), u_i=get("u_i"),
                         mu_p=get("mu_p"))
    return ps, cs
