"""Pure-NumPy integration backend.

Same algorithm as the compiled kernel in ``_kernel.pyx``: classic fixed-step
fourth-order Runge-Kutta over the packed closed-loop state, with a Newton
closure of the load algebraic constraints at every stage and dual clamping
after every step.  Kept as the always-available reference implementation;
the compiled kernel is selected instead when importable.
"""

from __future__ import annotations

import numpy as np

from . import _state
from .controller import Bounds, ControllerGains, CostSpec
from .network import NetworkModel

BACKEND = "python"

ALG_TOL = 1e-10
ALG_MAX_ITER = 50
U_FLOOR = 0.1


class KernelAbort(RuntimeError):
    pass


def make_ctx(model: NetworkModel, gains: ControllerGains, cost: CostSpec,
             bounds: Bounds, psi_variant: str) -> dict:
    ng, ni, nl, ngi = model.n_g, model.n_i, model.n_l, model.n_gi
    off = _state.offsets(model)
    ctx = {
        "n": model.n, "ng": ng, "ni": ni, "nl": nl, "ngi": ngi,
        "mp": model.m_p, "mc": model.m_c,
        "ei": model.edge_i.astype(np.intp), "ej": model.edge_j.astype(np.intp),
        "eb": model.edge_b.copy(), "eg": model.edge_g.copy(),
        "ca": np.array([e[0] for e in model.comm_edges], dtype=np.intp),
        "cb": np.array([e[1] for e in model.comm_edges], dtype=np.intp),
        "gii": model.gii.copy(), "bii": model.bii.copy(),
        "damping": model.damping.copy(), "m_gi": model.inertia_gi.copy(),
        "dx": model.dx.copy(), "tau_u": model.tau_u.copy(),
        "w": cost.weights.copy(),
        "ug_lo": bounds.u_g_lo.copy(), "ug_hi": bounds.u_g_hi.copy(),
        "ui_lo": bounds.u_i_lo.copy(), "ui_hi": bounds.u_i_hi.copy(),
        "p_cap": np.nan if bounds.p_cap is None else float(bounds.p_cap),
        "hat": psi_variant == "hat",
        "ui_mid": 0.5 * (bounds.u_i_lo + bounds.u_i_hi),
        "off": off, "nx": _state.state_size(model),
    }
    for name in ("tau_pg", "tau_lam", "tau_nu", "tau_mu_g_lo", "tau_mu_g_hi",
                 "tau_u_f", "tau_mu_i_lo", "tau_mu_i_hi", "tau_u_i",
                 "tau_mu_p"):
        ctx[name] = float(getattr(gains, name))

    # per-edge-side index arrays: generator sides (for the excitation window),
    # inverter sides (for the price-weighted loss gradient), load sides (for
    # the algebraic Newton), generator-inverter pairs (for the window
    # sensitivity feeding the inverter command)
    pe, iv, ld, gi_pairs, ll = [], [], [], [], []
    for e in range(model.m_p):
        a, b = int(model.edge_i[e]), int(model.edge_j[e])
        for i, j, sign in ((a, b, 1.0), (b, a, -1.0)):
            rec = (i, j, e, sign, model.edge_g[e], model.edge_b[e])
            if i < ng:
                pe.append(rec)
                if ng <= j < ngi:
                    gi_pairs.append(rec)
            elif i < ngi:
                iv.append(rec)
            else:
                ld.append(rec)
                if j >= ngi:
                    ll.append(rec)

    def cols(recs):
        if not recs:
            return (np.zeros(0, np.intp), np.zeros(0, np.intp),
                    np.zeros(0, np.intp), np.zeros(0), np.zeros(0), np.zeros(0))
        arr = np.array(recs, dtype=float)
        return (arr[:, 0].astype(np.intp), arr[:, 1].astype(np.intp),
                arr[:, 2].astype(np.intp), arr[:, 3], arr[:, 4], arr[:, 5])

    ctx["pe_node"], ctx["pe_nbr"], ctx["pe_edge"], ctx["pe_sign"], \
        ctx["pe_g"], ctx["pe_b"] = cols(pe)
    ctx["iv_node"], ctx["iv_nbr"], ctx["iv_edge"], ctx["iv_sign"], \
        ctx["iv_g"], ctx["iv_b"] = cols(iv)
    ctx["ld_node"], ctx["ld_nbr"], ctx["ld_edge"], ctx["ld_sign"], \
        ctx["ld_g"], ctx["ld_b"] = cols(ld)
    ctx["gi_node"], ctx["gi_nbr"], ctx["gi_edge"], ctx["gi_sign"], \
        ctx["gi_g"], ctx["gi_b"] = cols(gi_pairs)
    ctx["ll_node"], ctx["ll_nbr"], ctx["ll_edge"], ctx["ll_sign"], \
        ctx["ll_g"], ctx["ll_b"] = cols(ll)
    return ctx


def _proj(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.where((mu > 0) | (x >= 0), x, 0.0)


def _flows(ctx, u, s, c):
    ei, ej = ctx["ei"], ctx["ej"]
    uu = u[ei] * u[ej]
    bsin = ctx["eb"] * uu * s
    gcos = ctx["eg"] * uu * c
    gsin = ctx["eg"] * uu * s
    bcos = ctx["eb"] * uu * c
    p = ctx["gii"] * u * u
    np.add.at(p, ei, bsin + gcos)
    np.add.at(p, ej, -bsin + gcos)
    q = -ctx["bii"] * u * u
    np.add.at(q, ei, gsin - bcos)
    np.add.at(q, ej, -gsin - bcos)
    phi = ctx["gii"] * u * u
    np.add.at(phi, ei, gcos)
    np.add.at(phi, ej, gcos)
    return p, q, phi


def solve_alg(ctx, theta, u_g, u_i, alg, pl, ql) -> int:
    """Newton closure of the load power balances; updates alg in place."""
    nl, ngi = ctx["nl"], ctx["ngi"]
    if nl == 0:
        return 0
    s = np.sin(theta)
    c = np.cos(theta)
    damp_l = ctx["damping"][ngi:]
    ld_node = ctx["ld_node"] - ngi
    ld_local_nbr = ctx["ll_nbr"] - ngi
    for it in range(ALG_MAX_ITER):
        u = np.concatenate([u_g, u_i, alg[nl:]])
        p, q, _ = _flows(ctx, u, s, c)
        rp = -damp_l * alg[:nl] - pl[ngi:] - p[ngi:]
        rq = -ql[ngi:] - q[ngi:]
        if max(np.max(np.abs(rp)), np.max(np.abs(rq))) < ALG_TOL:
            return it
        # dq/dU and dp/dU restricted to load voltages
        sd = ctx["ld_sign"] * s[ctx["ld_edge"]]
        cd = c[ctx["ld_edge"]]
        dq = np.zeros((nl, nl))
        dp = np.zeros((nl, nl))
        diag_q = -2.0 * ctx["bii"][ngi:] * alg[nl:]
        diag_p = 2.0 * ctx["gii"][ngi:] * alg[nl:]
        np.add.at(diag_q, ld_node,
                  u[ctx["ld_nbr"]] * (ctx["ld_g"] * sd - ctx["ld_b"] * cd))
        np.add.at(diag_p, ld_node,
                  u[ctx["ld_nbr"]] * (ctx["ld_b"] * sd + ctx["ld_g"] * cd))
        dq[np.diag_indices(nl)] = diag_q
        dp[np.diag_indices(nl)] = diag_p
        if ctx["ll_node"].size:
            sl = ctx["ll_sign"] * s[ctx["ll_edge"]]
            cl = c[ctx["ll_edge"]]
            own = u[ctx["ll_node"]]
            np.add.at(dq, (ctx["ll_node"] - ngi, ld_local_nbr),
                      own * (ctx["ll_g"] * sl - ctx["ll_b"] * cl))
            np.add.at(dp, (ctx["ll_node"] - ngi, ld_local_nbr),
                      own * (ctx["ll_b"] * sl + ctx["ll_g"] * cl))
        try:
            dul = np.linalg.solve(dq, rq)
        except np.linalg.LinAlgError as exc:
            raise KernelAbort("load-constraint Jacobian singular") from exc
        dwl = (rp - dp @ dul) / damp_l
        alg[nl:] += dul
        alg[:nl] += dwl
        if np.any(alg[nl:] < U_FLOOR):
            raise KernelAbort("load voltage below floor")
    raise KernelAbort("algebraic Newton did not converge")


def rhs(ctx, x, alg, pl, ql) -> np.ndarray:
    """Closed-loop time derivative; refreshes alg to be consistent with x."""
    off = ctx["off"]

    def seg(v, name):
        a, b = off[name]
        return v[a:b]

    theta = seg(x, "theta")
    l_g = seg(x, "l_g")
    l_i = seg(x, "l_i")
    u_g = seg(x, "u_g")
    p_g = seg(x, "p_g")
    lam = seg(x, "lam")
    nu = seg(x, "nu")
    mgl = seg(x, "mu_g_lo")
    mgh = seg(x, "mu_g_hi")
    u_f = seg(x, "u_f")
    mil = seg(x, "mu_i_lo")
    mih = seg(x, "mu_i_hi")
    u_i = seg(x, "u_i")
    mu_p = seg(x, "mu_p")

    ng, ni, nl, ngi = ctx["ng"], ctx["ni"], ctx["nl"], ctx["ngi"]
    if np.any(u_g < U_FLOOR):
        raise KernelAbort("generator voltage below floor")

    solve_alg(ctx, theta, u_g, u_i, alg, pl, ql)
    u = np.concatenate([u_g, u_i, alg[nl:]])
    s = np.sin(theta)
    c = np.cos(theta)
    p, q, phi = _flows(ctx, u, s, c)

    w_gi = np.concatenate([l_g, l_i]) / ctx["m_gi"]
    w = np.concatenate([w_gi, alg[:nl]])

    dx = np.empty_like(x)
    seg(dx, "theta")[:] = w[ctx["ei"]] - w[ctx["ej"]]
    dl = -ctx["damping"][:ngi] * w_gi + p_g - pl[:ngi] - p[:ngi]
    seg(dx, "l_g")[:] = dl[:ng]
    seg(dx, "l_i")[:] = dl[ng:]
    seg(dx, "u_g")[:] = (u_f - u_g - ctx["dx"] * q[:ng] / u_g) / ctx["tau_u"]

    # frequency block
    dpg = -p_g / ctx["w"] + lam[:ngi] - w_gi
    if not np.isnan(ctx["p_cap"]):
        dpg = dpg - mu_p
        seg(dx, "mu_p")[:] = _proj(p_g - ctx["p_cap"], mu_p) / ctx["tau_mu_p"]
    else:
        seg(dx, "mu_p")[:] = 0.0
    seg(dx, "p_g")[:] = dpg / ctx["tau_pg"]
    dcnu = np.zeros(ctx["n"])
    np.add.at(dcnu, ctx["ca"], nu)
    np.add.at(dcnu, ctx["cb"], -nu)
    inj = np.zeros(ctx["n"])
    inj[:ngi] = p_g
    seg(dx, "lam")[:] = (dcnu - inj + pl + phi) / ctx["tau_lam"]
    seg(dx, "nu")[:] = -(lam[ctx["ca"]] - lam[ctx["cb"]]) / ctx["tau_nu"]

    # voltage block: excitation window from the live (or midpoint) profile
    u_eff = u if not ctx["hat"] else np.concatenate(
        [u_g, ctx["ui_mid"], alg[nl:]])
    sv = ctx["pe_sign"] * s[ctx["pe_edge"]]
    cv = c[ctx["pe_edge"]]
    ssum = np.zeros(ng)
    np.add.at(ssum, ctx["pe_node"],
              u_eff[ctx["pe_nbr"]] * (ctx["pe_g"] * sv - ctx["pe_b"] * cv))
    slope = 1.0 - ctx["bii"][:ng] * ctx["dx"]
    psi_lo = ctx["ug_lo"] * slope + ctx["dx"] * ssum
    psi_hi = ctx["ug_hi"] * slope + ctx["dx"] * ssum
    seg(dx, "mu_g_lo")[:] = _proj(psi_lo - u_f, mgl) / ctx["tau_mu_g_lo"]
    seg(dx, "mu_g_hi")[:] = _proj(u_f - psi_hi, mgh) / ctx["tau_mu_g_hi"]
    seg(dx, "u_f")[:] = (mgl - mgh) / ctx["tau_u_f"]
    seg(dx, "mu_i_lo")[:] = _proj(ctx["ui_lo"] - u_i, mil) / ctx["tau_mu_i_lo"]
    seg(dx, "mu_i_hi")[:] = _proj(u_i - ctx["ui_hi"], mih) / ctx["tau_mu_i_hi"]

    # inverter command: price-weighted loss descent plus window sensitivity
    gphl = 2.0 * lam[ng:ngi] * ctx["gii"][ng:ngi] * u_i
    if ctx["iv_node"].size:
        contrib = (ctx["iv_g"] * u[ctx["iv_nbr"]] * c[ctx["iv_edge"]]
                   * (lam[ctx["iv_node"]] + lam[ctx["iv_nbr"]]))
        np.add.at(gphl, ctx["iv_node"] - ng, contrib)
    dui = -gphl + mil - mih
    if not ctx["hat"] and ctx["gi_node"].size:
        sg = ctx["gi_sign"] * s[ctx["gi_edge"]]
        cg = c[ctx["gi_edge"]]
        vals = (ctx["dx"][ctx["gi_node"]]
                * (ctx["gi_g"] * sg - ctx["gi_b"] * cg)
                * (mgl[ctx["gi_node"]] - mgh[ctx["gi_node"]]))
        np.add.at(dui, ctx["gi_nbr"] - ng, -vals)
    seg(dx, "u_i")[:] = dui / ctx["tau_u_i"]
    return dx


_DUAL_BLOCKS = ("mu_g_lo", "mu_g_hi", "mu_i_lo", "mu_i_hi", "mu_p")


def run_span(ctx, x, alg, t0, t1, h, rec_times, out_x, out_alg) -> int:
    """Integrate [t0, t1] with fixed demands, recording at rec_times.

    rec_times must be increasing and lie on the step grid within the span.
    Returns the number of records written.  x and alg are advanced in place.
    """
    pl, ql = ctx["pl"], ctx["ql"]
    n_steps = int(round((t1 - t0) / h))
    if abs(t0 + n_steps * h - t1) > 1e-9:
        raise ValueError("span is not an integer number of steps")
    off = ctx["off"]
    rec_idx = 0
    rec_total = len(rec_times)

    def record(t):
        nonlocal rec_idx
        while rec_idx < rec_total and rec_times[rec_idx] <= t + 1e-9:
            solve_alg(ctx, x[off["theta"][0]: off["theta"][1]],
                      x[off["u_g"][0]: off["u_g"][1]],
                      x[off["u_i"][0]: off["u_i"][1]], alg, pl, ql)
            out_x[rec_idx] = x
            out_alg[rec_idx] = alg
            rec_idx += 1

    record(t0)
    for k in range(n_steps):
        k1 = rhs(ctx, x, alg, pl, ql)
        k2 = rhs(ctx, x + (0.5 * h) * k1, alg, pl, ql)
        k3 = rhs(ctx, x + (0.5 * h) * k2, alg, pl, ql)
        k4 = rhs(ctx, x + h * k3, alg, pl, ql)
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for name in _DUAL_BLOCKS:
            a, b = off[name]
            np.maximum(x[a:b], 0.0, out=x[a:b])
        if not np.all(np.isfinite(x)):
            raise KernelAbort("non-finite state")
        record(t0 + (k + 1) * h)
    return rec_idx
