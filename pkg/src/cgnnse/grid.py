"""Grid graph model: MATPOWER-style case files, adjacency, topology changes.

Case-file grammar (a subset of MATPOWER's ``.m`` format)::

    function mpc = <name>            % optional header
    mpc.version = '2';               % optional
    mpc.baseMVA = <number>;
    mpc.bus = [ <13 numbers per row, rows end with ';' or newline> ];
    mpc.gen = [ <>= 10 numbers per row> ];
    mpc.branch = [ <>= 11 numbers per row> ];

``%`` starts a comment.  Bus columns: id, type (1 PQ, 2 PV, 3 slack), Pd,
Qd, Gs, Bs, area, Vm, Va, baseKV, zone, Vmax, Vmin.  Gen columns: bus, Pg,
Qg, Qmax, Qmin, Vg, mBase, status, Pmax, Pmin.  Branch columns: from, to,
r, x, b, rateA, rateB, rateC, ratio, angle, status (angmin, angmax optional).
Impedances are per unit on ``baseMVA``; loads and generation in MW / MVAr.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

PQ, PV, SLACK = 1, 2, 3
BUNDLED_CASES = ("case14", "case30", "case118")


class CaseFormatError(ValueError):
    """Malformed case payload; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TopologyError(ValueError):
    pass


class IslandingError(TopologyError):
    def __init__(self, component):
        self.component = sorted(component)
        super().__init__(f"outage islands buses {self.component}")


@dataclass(frozen=True)
class Bus:
    id: int
    type: int
    pd: float
    qd: float
    gs: float = 0.0
    bs: float = 0.0
    area: int = 1
    vm: float = 1.0
    va: float = 0.0
    base_kv: float = 0.0
    zone: int = 1
    vmax: float = 1.1
    vmin: float = 0.9


@dataclass(frozen=True)
class Gen:
    bus: int
    pg: float
    qg: float = 0.0
    qmax: float = 0.0
    qmin: float = 0.0
    vg: float = 1.0
    mbase: float = 100.0
    status: int = 1
    pmax: float = 0.0
    pmin: float = 0.0


@dataclass(frozen=True)
class Branch:
    f: int
    t: int
    r: float
    x: float
    b: float = 0.0
    rate_a: float = 0.0
    rate_b: float = 0.0
    rate_c: float = 0.0
    ratio: float = 0.0
    angle: float = 0.0
    status: int = 1
    angmin: float = -360.0
    angmax: float = 360.0

    @property
    def in_service(self):
        return self.status > 0


@dataclass(frozen=True)
class GridGraph:
    buses: tuple
    gens: tuple
    branches: tuple
    base_mva: float = 100.0
    name: str = "case"
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {b.id: k for k, b in enumerate(self.buses)})

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def slack(self):
        return next(b.id for b in self.buses if b.type == SLACK)

    def bus_ids(self):
        return [b.id for b in self.buses]

    def in_service(self):
        return [k for k, br in enumerate(self.branches) if br.in_service]

    def find_branch(self, f, t):
        """First in-service branch joining buses ``f`` and ``t`` (either direction)."""
        for k, br in enumerate(self.branches):
            if br.in_service and {br.f, br.t} == {f, t}:
                return k
        raise TopologyError(f"no in-service branch between buses {f} and {t}")

    def highest_voltage_buses(self):
        kv = max(b.base_kv for b in self.buses)
        return [b.id for b in self.buses if b.base_kv == kv]

    def with_loads(self, pd, qd, gen_scale=None):
        """Copy with new bus loads (MW/MVAr arrays in bus order)."""
        buses = tuple(replace(b, pd=float(p), qd=float(q)) for b, p, q in zip(self.buses, pd, qd))
        gens = self.gens
        if gen_scale is not None:
            slack = self.slack
            gens = tuple(g if g.bus == slack else replace(g, pg=g.pg * gen_scale) for g in gens)
        return GridGraph(buses, gens, self.branches, self.base_mva, self.name)

    def digest(self):
        return hashlib.sha256(serialize_case(self).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing / serialisation
# ---------------------------------------------------------------------------

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}


def _strip_comment(line):
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_number(tok, lineno):
    try:
        return float(tok)
    except ValueError:
        raise CaseFormatError(f"not a number: {tok!r}", lineno) from None


def _read_tables(text):
    scalars, tables = {}, {}
    current, rows = None, None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            m = _ASSIGN.match(line)
            if not m:
                if line.startswith("function"):
                    continue
                raise CaseFormatError(f"unexpected statement {line!r}", lineno)
            key, rhs = m.group(1), m.group(2).strip()
            if rhs.startswith("["):
                current, rows = key, []
                tables[key] = (rows, lineno)
                line = rhs[1:]
            else:
                scalars[key] = (rhs.rstrip(";").strip().strip("'\""), lineno)
                continue
        closed = "]" in line
        if closed:
            line = line[:line.index("]")]
        for chunk in line.split(";"):
            toks = chunk.replace(",", " ").split()
            if toks:
                rows.append(([_parse_number(t, lineno) for t in toks], lineno))
        if closed:
            current = None
    if current is not None:
        raise CaseFormatError(f"table mpc.{current} is never closed", tables[current][1])
    return scalars, tables


def parse_case(text, name="case"):
    """Parse a MATPOWER-style case payload into a :class:`GridGraph`."""
    scalars, tables = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing mpc.baseMVA")
    base_mva = _parse_number(scalars["baseMVA"][0], scalars["baseMVA"][1])
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseFormatError(f"missing table mpc.{key}")
        for row, lineno in tables[key][0]:
            if len(row) < _MIN_COLS[key]:
                raise CaseFormatError(
                    f"mpc.{key} row has {len(row)} columns, need {_MIN_COLS[key]}", lineno)

    buses, seen = [], set()
    for row, lineno in tables["bus"][0]:
        bid = int(row[0])
        if bid in seen:
            raise CaseFormatError(f"duplicate bus id {bid}", lineno)
        if int(row[1]) not in (PQ, PV, SLACK):
            raise CaseFormatError(f"bus {bid} has unknown type {int(row[1])}", lineno)
        seen.add(bid)
        buses.append(Bus(bid, int(row[1]), *row[2:6], int(row[6]), row[7], row[8], row[9],
                         int(row[10]), row[11], row[12]))
    if not buses:
        raise CaseFormatError("empty bus table", tables["bus"][1])
    n_slack = sum(b.type == SLACK for b in buses)
    if n_slack != 1:
        raise CaseFormatError(f"expected exactly one slack bus, found {n_slack}", tables["bus"][1])

    gens = []
    for row, lineno in tables["gen"][0]:
        if int(row[0]) not in seen:
            raise CaseFormatError(f"generator at unknown bus {int(row[0])}", lineno)
        gens.append(Gen(int(row[0]), row[1], row[2], row[3], row[4], row[5], row[6],
                        int(row[7]), row[8], row[9]))

    branches = []
    for row, lineno in tables["branch"][0]:
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in seen:
                raise CaseFormatError(f"branch endpoint {end} is not a known bus", lineno)
        if row[2] == 0.0 and row[3] == 0.0:
            raise CaseFormatError(f"zero-impedance branch {f}-{t}", lineno)
        extra = row[11:13] if len(row) >= 13 else (-360.0, 360.0)
        branches.append(Branch(f, t, row[2], row[3], row[4], row[5], row[6], row[7], row[8],
                               row[9], int(row[10]), *extra))

    g = GridGraph(tuple(buses), tuple(gens), tuple(branches), base_mva, name)
    if g.n_bus > 1:
        comp = _unreached(g, g.in_service())
        if comp:
            raise TopologyError(f"grid is not connected; unreachable buses {sorted(comp)}")
    return g


def _fmt(v):
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def serialize_case(g):
    """Emit ``g`` in the grammar accepted by :func:`parse_case` (byte-stable)."""
    out = [f"function mpc = {g.name}", "", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(g.base_mva)};", ""]

    def table(key, rows):
        out.append(f"mpc.{key} = [")
        for r in rows:
            out.append("\t" + "\t".join(_fmt(v) for v in r) + ";")
        out.extend(["];", ""])

    table("bus", [(b.id, b.type, b.pd, b.qd, b.gs, b.bs, b.area, b.vm, b.va, b.base_kv, b.zone,
                   b.vmax, b.vmin) for b in g.buses])
    table("gen", [(x.bus, x.pg, x.qg, x.qmax, x.qmin, x.vg, x.mbase, x.status, x.pmax, x.pmin)
                  for x in g.gens])
    table("branch", [(br.f, br.t, br.r, br.x, br.b, br.rate_a, br.rate_b, br.rate_c, br.ratio,
                      br.angle, br.status, br.angmin, br.angmax) for br in g.branches])
    return "\n".join(out)


def load_case(path_or_name):
    """Read a case from disk, or one of the bundled cases by name (``ieee14`` / ``case14``)."""
    p = Path(path_or_name)
    if p.exists():
        return parse_case(p.read_text(), name=p.stem)
    name = str(path_or_name).lower().replace("ieee", "case")
    if name in BUNDLED_CASES:
        text = resources.files("cgnnse.cases").joinpath(f"{name}.m").read_text()
        return parse_case(text, name=name)
    raise FileNotFoundError(f"no case file or bundled case named {path_or_name!r}")


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdjacencyPack:
    a: np.ndarray
    a_hat: np.ndarray
    degree: np.ndarray
    a_tilde: np.ndarray

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def neighbours(self):
        """Boolean mask of N(i) plus i itself."""
        return self.a_hat > 0


def adjacency_from_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    d_isqrt = 1.0 / np.sqrt(deg)
    a_tilde = d_isqrt[:, None] * a_hat * d_isqrt[None, :]
    return AdjacencyPack(a, a_hat, np.diag(deg), a_tilde)


def build_adjacency(g):
    """Binary adjacency of in-service branches (parallel branches collapse) and its normalisation."""
    n = g.n_bus
    a = np.zeros((n, n))
    for br in g.branches:
        if br.in_service:
            i, j = g.index[br.f], g.index[br.t]
            if i != j:
                a[i, j] = a[j, i] = 1.0
    return adjacency_from_matrix(a)


def _unreached(g, branch_ids):
    adj = {b.id: [] for b in g.buses}
    for k in branch_ids:
        br = g.branches[k]
        adj[br.f].append(br.t)
        adj[br.t].append(br.f)
    start = g.slack
    seen, stack = {start}, [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return set(adj) - seen


def perturb_topology(g, outages):
    """New grid with the listed branch indices out of service; refuses to island buses."""
    outages = list(outages)
    for k in outages:
        if not 0 <= k < len(g.branches):
            raise TopologyError(f"unknown branch id {k}")
    dropped = set(outages)
    keep = [k for k in g.in_service() if k not in dropped]
    cut = _unreached(g, keep)
    if cut:
        raise IslandingError(cut)
    branches = tuple(replace(br, status=0) if k in dropped else br for k, br in enumerate(g.branches))
    return GridGraph(g.buses, g.gens, branches, g.base_mva, g.name)


def spectral_norm(m, tol=1e-10, max_iter=100_000, seed=0):
    """Operator 2-norm by power iteration on m^T m."""
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return 0.0
    gram = m.T @ m
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def adjacency_distance(a, a2):
    """||A - A'||_2 between the binary adjacency matrices of two packs."""
    if a.a.shape != a2.a.shape:
        raise ValueError(f"adjacency dimensions differ: {a.a.shape} vs {a2.a.shape}")
    return spectral_norm(a.a - a2.a)
