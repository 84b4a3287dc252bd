"""Microgrid network description: node kinds, per-node and per-line admittance
parameters, physical and communication graphs.

Sign convention: ``gii``/``bii`` and the line ``g``/``b`` values are entries of
the standard bus admittance matrix Y = G + jB in per unit.  For the usual
inductive, resistive lines this means ``b > 0`` and ``g < 0`` on lines and
``bii < 0``, ``gii >= 0`` on nodes, which is how the bundled data files are
written and how the loader validates them.
"""

from __future__ import annotations

import configparser
import enum
import io
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed or invariant-violating network configuration."""


class NodeKind(enum.Enum):
    GENERATOR = "generator"
    INVERTER = "inverter"
    LOAD = "load"


@dataclass(frozen=True)
class GeneratorParams:
    damping: float          # A, p.u.
    inertia: float          # M, p.u.
    xd: float               # d-axis synchronous reactance, p.u.
    xd_prime: float         # d-axis transient reactance, p.u.
    tau_u: float            # open-circuit transient time constant, s
    gii: float              # self conductance, p.u.
    bii: float              # self susceptance, p.u.

    @property
    def dx(self) -> float:
        """xd - xd', the reactance difference entering the voltage dynamics."""
        return self.xd - self.xd_prime

    def validate(self, where: str) -> None:
        if not self.damping > 0:
            raise ConfigError(f"{where}: damping A must be > 0")
        if not self.inertia > 0:
            raise ConfigError(f"{where}: inertia M must be > 0")
        if not self.dx > 0:
            raise ConfigError(f"{where}: xd - xd_prime must be > 0")
        if not self.tau_u > 0:
            raise ConfigError(f"{where}: tau_u must be > 0")
        if self.gii < 0:
            raise ConfigError(f"{where}: gii must be >= 0")
        if not self.bii < 0:
            raise ConfigError(f"{where}: bii must be < 0")


@dataclass(frozen=True)
class InverterParams:
    damping: float          # A, p.u.
    inertia: float          # virtual M, p.u.
    gii: float
    bii: float

    def validate(self, where: str) -> None:
        if not self.damping > 0:
            raise ConfigError(f"{where}: damping A must be > 0")
        if not self.inertia > 0:
            raise ConfigError(f"{where}: inertia M must be > 0")
        if self.gii < 0:
            raise ConfigError(f"{where}: gii must be >= 0")
        if not self.bii < 0:
            raise ConfigError(f"{where}: bii must be < 0")


@dataclass(frozen=True)
class LoadParams:
    damping: float          # A, p.u. (frequency sensitivity of the demand)
    gii: float
    bii: float

    def validate(self, where: str) -> None:
        if not self.damping > 0:
            raise ConfigError(f"{where}: damping A must be > 0")
        if self.gii < 0:
            raise ConfigError(f"{where}: gii must be >= 0")
        if not self.bii < 0:
            raise ConfigError(f"{where}: bii must be < 0")


@dataclass(frozen=True)
class Line:
    i: int                  # external node id
    j: int
    g: float                # mutual conductance entry, p.u. (<= 0)
    b: float                # mutual susceptance entry, p.u. (> 0)

    def validate(self) -> None:
        if self.i == self.j:
            raise ConfigError(f"line ({self.i},{self.j}): self-loop not allowed")
        if not self.b > 0:
            raise ConfigError(f"line ({self.i},{self.j}): b must be > 0")
        if self.g > 0:
            raise ConfigError(f"line ({self.i},{self.j}): g must be <= 0")


_KIND_ORDER = {NodeKind.GENERATOR: 0, NodeKind.INVERTER: 1, NodeKind.LOAD: 2}


@dataclass
class NetworkModel:
    """Validated, immutable-by-convention network.

    Nodes are stored in canonical order (generators, then inverters, then
    loads); ``ids`` maps positions back to the external identifiers used in
    the config file.  Index arrays below are all in canonical positions.
    """

    ids: list[int]
    kinds: list[NodeKind]
    params: list[GeneratorParams | InverterParams | LoadParams]
    lines: list[Line]
    comm_edges: list[tuple[int, int]]   # canonical positions

    # derived, filled by finalize()
    n: int = 0
    n_g: int = 0
    n_i: int = 0
    n_l: int = 0
    edge_i: np.ndarray = field(default=None, repr=False)
    edge_j: np.ndarray = field(default=None, repr=False)
    edge_b: np.ndarray = field(default=None, repr=False)
    edge_g: np.ndarray = field(default=None, repr=False)
    gii: np.ndarray = field(default=None, repr=False)
    bii: np.ndarray = field(default=None, repr=False)
    damping: np.ndarray = field(default=None, repr=False)
    inertia_gi: np.ndarray = field(default=None, repr=False)
    dx: np.ndarray = field(default=None, repr=False)
    tau_u: np.ndarray = field(default=None, repr=False)

    @property
    def m_p(self) -> int:
        return len(self.lines)

    @property
    def m_c(self) -> int:
        return len(self.comm_edges)

    @property
    def n_gi(self) -> int:
        return self.n_g + self.n_i

    def pos(self, node_id: int) -> int:
        return self.ids.index(node_id)

    def finalize(self) -> "NetworkModel":
        self.n = len(self.ids)
        self.n_g = sum(k is NodeKind.GENERATOR for k in self.kinds)
        self.n_i = sum(k is NodeKind.INVERTER for k in self.kinds)
        self.n_l = sum(k is NodeKind.LOAD for k in self.kinds)
        id_pos = {nid: k for k, nid in enumerate(self.ids)}
        self.edge_i = np.array([id_pos[ln.i] for ln in self.lines], dtype=np.intp)
        self.edge_j = np.array([id_pos[ln.j] for ln in self.lines], dtype=np.intp)
        self.edge_b = np.array([ln.b for ln in self.lines], dtype=float)
        self.edge_g = np.array([ln.g for ln in self.lines], dtype=float)
        self.gii = np.array([p.gii for p in self.params], dtype=float)
        self.bii = np.array([p.bii for p in self.params], dtype=float)
        self.damping = np.array([p.damping for p in self.params], dtype=float)
        self.inertia_gi = np.array(
            [p.inertia for p in self.params[: self.n_gi]], dtype=float)
        self.dx = np.array(
            [p.dx for p in self.params[: self.n_g]], dtype=float)
        self.tau_u = np.array(
            [p.tau_u for p in self.params[: self.n_g]], dtype=float)
        return self

    # -- structural queries -------------------------------------------------

    def validate(self) -> None:
        n = len(self.ids)
        for nid, kind, p in zip(self.ids, self.kinds, self.params):
            p.validate(f"node {nid}")
        seen = set()
        for ln in self.lines:
            ln.validate()
            key = frozenset((ln.i, ln.j))
            if key in seen:
                raise ConfigError(f"duplicate line ({ln.i},{ln.j})")
            seen.add(key)
            for end in (ln.i, ln.j):
                if end not in self.ids:
                    raise ConfigError(f"line ({ln.i},{ln.j}): unknown node {end}")
        if not _connected(n, [(self.pos(l.i), self.pos(l.j)) for l in self.lines]):
            raise ConfigError("physical graph not connected")
        seen_c = set()
        for (a, b) in self.comm_edges:
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise ConfigError(f"communication edge ({a},{b}) invalid")
            key = frozenset((a, b))
            if key in seen_c:
                raise ConfigError(f"duplicate communication edge ({a},{b})")
            seen_c.add(key)
        if not _connected(n, self.comm_edges):
            raise ConfigError("communication graph not connected")


def _connected(n: int, edges: list[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    if n == 1:
        return True
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    stack = [0]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == n


def incidence_matrix(model: NetworkModel, which: str = "physical") -> np.ndarray:
    """Dense node-by-edge incidence matrix, +1 at the from-node of each edge."""
    if which == "physical":
        pairs = list(zip(model.edge_i, model.edge_j))
    elif which == "communication":
        pairs = model.comm_edges
    else:
        raise ValueError(f"unknown graph {which!r}")
    d = np.zeros((model.n, len(pairs)))
    for e, (a, b) in enumerate(pairs):
        d[a, e] = 1.0
        d[b, e] = -1.0
    return d


def selectors(model: NetworkModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block selector matrices picking the generator/inverter/load entries
    out of a full node vector; stacked they partition the identity."""
    eye = np.eye(model.n)
    sel_g = eye[: model.n_g]
    sel_i = eye[model.n_g: model.n_gi]
    sel_l = eye[model.n_gi:]
    return sel_g, sel_i, sel_l


# -- configuration text ----------------------------------------------------

_GEN_KEYS = ("A", "M", "Xd", "Xd_prime", "tau_U", "Gii", "Bii")
_INV_KEYS = ("A", "M", "Gii", "Bii")
_LOAD_KEYS = ("A", "Gii", "Bii")


def load_network(text: str) -> NetworkModel:
    """Parse and validate a network config (INI sections, see README)."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    raw_nodes: list[tuple[int, NodeKind, object]] = []
    lines: list[Line] = []
    comm_spec = None
    for section in cp.sections():
        if section.startswith("node."):
            nid = _parse_id(section, section[5:])
            sec = cp[section]
            kind_txt = sec.get("kind", "").strip().lower()
            try:
                kind = NodeKind(kind_txt)
            except ValueError:
                raise ConfigError(
                    f"[{section}]: unknown kind {kind_txt!r}") from None
            raw_nodes.append((nid, kind, _node_params(section, kind, sec)))
        elif section.startswith("line."):
            rest = section[5:].split(".")
            if len(rest) != 2:
                raise ConfigError(f"[{section}]: expected line.<i>.<j>")
            i, j = (_parse_id(section, r) for r in rest)
            sec = cp[section]
            lines.append(Line(i, j, _parse_float(section, sec, "G"),
                              _parse_float(section, sec, "B")))
        elif section == "comm":
            comm_spec = cp[section].get("edges", "same-as-physical").strip()
        else:
            raise ConfigError(f"unknown section [{section}]")

    if not raw_nodes:
        raise ConfigError("no nodes defined")
    ids_seen = set()
    for nid, _, _ in raw_nodes:
        if nid in ids_seen:
            raise ConfigError(f"duplicate node id {nid}")
        ids_seen.add(nid)

    # canonical order: generators, inverters, loads; stable by id inside blocks
    raw_nodes.sort(key=lambda t: (_KIND_ORDER[t[1]], t[0]))
    ids = [nid for nid, _, _ in raw_nodes]
    kinds = [k for _, k, _ in raw_nodes]
    params = [p for _, _, p in raw_nodes]

    id_pos = {nid: k for k, nid in enumerate(ids)}
    if comm_spec is None or comm_spec == "same-as-physical":
        comm_edges = [(id_pos[ln.i], id_pos[ln.j]) for ln in lines]
    else:
        comm_edges = []
        for tok in comm_spec.replace(";", ",").split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                a, b = (int(v) for v in tok.split("-"))
            except ValueError:
                raise ConfigError(
                    f"[comm]: bad edge token {tok!r} (want i-j)") from None
            for end in (a, b):
                if end not in id_pos:
                    raise ConfigError(f"[comm]: unknown node {end}")
            comm_edges.append((id_pos[a], id_pos[b]))

    model = NetworkModel(ids, kinds, params, lines, comm_edges)
    model.validate()
    return model.finalize()


def load_network_file(path: str) -> NetworkModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_network(fh.read())


def to_config_text(model: NetworkModel) -> str:
    """Serialize back to config text; load_network round-trips it."""
    out = io.StringIO()
    for nid, kind, p in zip(model.ids, model.kinds, model.params):
        out.write(f"[node.{nid}]\nkind = {kind.value}\n")
        out.write(f"A = {p.damping!r}\n")
        if kind is not NodeKind.LOAD:
            out.write(f"M = {p.inertia!r}\n")
        if kind is NodeKind.GENERATOR:
            out.write(f"Xd = {p.xd!r}\nXd_prime = {p.xd_prime!r}\n")
            out.write(f"tau_U = {p.tau_u!r}\n")
        out.write(f"Gii = {p.gii!r}\nBii = {p.bii!r}\n\n")
    for ln in model.lines:
        out.write(f"[line.{ln.i}.{ln.j}]\nG = {ln.g!r}\nB = {ln.b!r}\n\n")
    out.write("[comm]\n")
    phys = {frozenset((model.pos(l.i), model.pos(l.j))) for l in model.lines}
    if [frozenset(e) for e in model.comm_edges] == [
            frozenset((model.pos(l.i), model.pos(l.j))) for l in model.lines]:
        out.write("edges = same-as-physical\n")
    else:
        toks = ", ".join(f"{model.ids[a]}-{model.ids[b]}"
                         for a, b in model.comm_edges)
        out.write(f"edges = {toks}\n")
    return out.getvalue()


def _parse_id(section: str, token: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ConfigError(f"[{section}]: node id {token!r} not an integer") from None


def _parse_float(section: str, sec, key: str) -> float:
    if key not in sec:
        raise ConfigError(f"[{section}]: missing field {key!r}")
    try:
        return float(sec[key])
    except ValueError:
        raise ConfigError(
            f"[{section}]: field {key!r} = {sec[key]!r} not a number") from None


def _node_params(section, kind, sec):
    if kind is NodeKind.GENERATOR:
        vals = {k: _parse_float(section, sec, k) for k in _GEN_KEYS}
        return GeneratorParams(vals["A"], vals["M"], vals["Xd"],
                               vals["Xd_prime"], vals["tau_U"],
                               vals["Gii"], vals["Bii"])
    if kind is NodeKind.INVERTER:
        vals = {k: _parse_float(section, sec, k) for k in _INV_KEYS}
        return InverterParams(vals["A"], vals["M"], vals["Gii"], vals["Bii"])
    vals = {k: _parse_float(section, sec, k) for k in _LOAD_KEYS}
    return LoadParams(vals["A"], vals["Gii"], vals["Bii"])
