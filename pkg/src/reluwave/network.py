"""Compilation of chart-wise wavelet expansions into a sparse depth-4 ReLU network.

Unit layout (chart-major throughout):

* layer 1 (linear, m units per chart): ``[T_i | N_i]^T (x - anchor_i)``;
* layer 2 (ReLU): per chart, first the 4(m-d) units of the normal trapezoids
  ``t_r`` shared by all of that chart's terms, then 8d units per term (4d
  trapezoid units at scale k followed by 4d at scale k-1);
* layer 3 (ReLU): two units per term, the rect bodies of the fine and the
  coarse extended scaling function;
* layer 4 (linear): one unit, ``sum alpha 2^(k/2) C_d (fine - coarse/2)``.

The constant C_d and the 2^(k/2) and (1, -1/2) factors live in layer 4, so
the hidden layers only carry the trapezoid geometry.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .atlas import Atlas, chart_coords
from .expansion import Expansion
from .frame import AmbientExtensionParams, FrameParams

KINDS = ("linear", "relu")
_T_SHIFTS = (3.0, 1.0, -1.0, -3.0)  # t(z) = rect(z+3) - rect(z+1) - rect(z-1) + rect(z-3)
_T_SIGNS = (1.0, -1.0, -1.0, 1.0)


@dataclass
class Layer:
    """Affine map from ``in_width`` inputs to ``width`` units, stored as sorted triplets."""

    kind: str
    width: int
    in_width: int
    bias: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.bias = np.asarray(self.bias, dtype=float).reshape(self.width)
        order = np.lexsort((self.cols, self.rows))
        self.rows = np.asarray(self.rows, dtype=np.int64)[order]
        self.cols = np.asarray(self.cols, dtype=np.int64)[order]
        self.vals = np.asarray(self.vals, dtype=float)[order]

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.width, self.in_width))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "in_width": self.in_width,
            "bias": [repr(float(b)) for b in self.bias],
            "weights": [[int(r), int(c), repr(float(v))] for r, c, v in zip(self.rows, self.cols, self.vals)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Layer":
        w = data["weights"]
        rows = np.array([t[0] for t in w], dtype=np.int64)
        cols = np.array([t[1] for t in w], dtype=np.int64)
        vals = np.array([float(t[2]) for t in w])
        return cls(data["kind"], data["width"], data["in_width"],
                   np.array([float(b) for b in data["bias"]]), rows, cols, vals)


@dataclass
class CompilationManifest:
    m: int
    d: int
    c_gamma: int
    chart_terms: list[int]
    total_terms: int
    distinct_terms: int
    widths: list[int]
    nonzero_weights: int
    c1: int
    c2: int
    total_units: int
    relu_shift: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReluNetwork:
    m: int
    d: int
    layers: list[Layer]
    manifest: CompilationManifest
    _cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if len(self.layers) != 4:
            raise ValueError("network must have exactly 4 layers")
        if [l.kind for l in self.layers[1:]] != ["relu", "relu", "linear"]:
            raise ValueError("layers 2-4 must be relu, relu, linear")
        if self.layers[-1].width != 1:
            raise ValueError("output width must be 1")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_width != a.width:
                raise ValueError("consecutive layer widths do not chain")
        if self.layers[0].in_width != self.m:
            raise ValueError("first layer must read m inputs")

    @property
    def widths(self) -> list[int]:
        return [l.width for l in self.layers]

    def matrices(self) -> list[sp.csr_matrix]:
        if not self._cache:
            self._cache.extend(l.matrix() for l in self.layers)
        return self._cache

    def to_dict(self) -> dict:
        return {"m": self.m, "d": self.d, "layers": [l.to_dict() for l in self.layers],
                "manifest": self.manifest.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ReluNetwork":
        layers = [Layer.from_dict(l) for l in data["layers"]]
        return cls(data["m"], data["d"], layers, CompilationManifest(**data["manifest"]))

    @classmethod
    def from_json(cls, text: str) -> "ReluNetwork":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

def _chart_expansions(atlas: Atlas, expansions: list[Expansion]) -> list[Expansion]:
    per_chart = [Expansion(i, []) for i in range(atlas.size)]
    seen = set()
    for e in expansions:
        if not 0 <= e.chart_id < atlas.size:
            raise ValueError(f"expansion refers to unknown chart {e.chart_id}")
        if e.chart_id in seen:
            raise ValueError(f"two expansions for chart {e.chart_id}")
        seen.add(e.chart_id)
        if not np.all(np.isfinite(e.coeffs)):
            raise ValueError("non-finite coefficient")
        per_chart[e.chart_id] = e
    return per_chart


def compile_network(atlas: Atlas, expansions: list[Expansion], params: FrameParams):
    """Build the depth-4 network; returns (ReluNetwork, CompilationManifest)."""
    if atlas.size == 0:
        raise ValueError("atlas has no charts")
    m = atlas.charts[0].m
    d = params.d
    if m <= d:
        raise ValueError(f"ambient dimension m={m} must exceed d={d}")
    if any(c.d != d for c in atlas.charts):
        raise ValueError("chart dimension differs from the frame dimension")
    ext = AmbientExtensionParams.from_delta(m, d, atlas.delta)
    per_chart = _chart_expansions(atlas, expansions)
    n_charts = atlas.size
    codim = m - d

    # layer 1: chart coordinates
    r1, c1, v1, b1 = [], [], [], []
    for i, chart in enumerate(atlas.charts):
        frame = chart.frame
        rr, cc = np.nonzero(frame.T)
        r1.append(rr + i * m)
        c1.append(cc)
        v1.append(frame.T[rr, cc])
        b1.append(-(frame.T @ chart.anchor))
    layer1 = Layer("linear", m * n_charts, m, np.concatenate(b1),
                   np.concatenate(r1), np.concatenate(c1), np.concatenate(v1))

    # layers 2 and 3
    r2, c2, v2, b2 = [], [], [], []
    r3, c3, v3 = [], [], []
    out_cols, out_vals = [], []
    unit2 = unit3 = 0
    a, c = ext.plateau, ext.support
    tr_shifts = (c, a, -a, -c)
    for i, e in enumerate(per_chart):
        base = i * m
        tr_first = unit2
        for l in range(codim):
            for s in tr_shifts:
                r2.append(unit2)
                c2.append(base + d + l)
                v2.append(1.0)
                b2.append(s)
                unit2 += 1
        for idx, alpha in e.terms:
            body_units = []
            for scale in (idx.k, idx.k - 1):
                f = 2.0 ** (scale / d)
                first = unit2
                for j in range(d):
                    for s in _T_SHIFTS:
                        r2.append(unit2)
                        c2.append(base + j)
                        v2.append(f)
                        b2.append(-f * idx.b[j] + s)
                        unit2 += 1
                body_units.append(first)
            for first in body_units:
                for q in range(4 * d):
                    r3.append(unit3)
                    c3.append(first + q)
                    v3.append(_T_SIGNS[q % 4])
                for q in range(4 * codim):
                    r3.append(unit3)
                    c3.append(tr_first + q)
                    v3.append(ext.slope * _T_SIGNS[q % 4])
                unit3 += 1
            amp = alpha * 2.0 ** (idx.k / 2.0) * params.c_d
            out_cols.extend([unit3 - 2, unit3 - 1])
            out_vals.extend([amp, -0.5 * amp])
    layer2 = Layer("relu", unit2, layer1.width, np.array(b2), np.array(r2, dtype=np.int64),
                   np.array(c2, dtype=np.int64), np.array(v2))
    layer3 = Layer("relu", unit3, unit2, np.full(unit3, -2.0 * (m - 1)), np.array(r3, dtype=np.int64),
                   np.array(c3, dtype=np.int64), np.array(v3))
    layer4 = Layer("linear", 1, unit3, np.zeros(1), np.zeros(len(out_cols), dtype=np.int64),
                   np.array(out_cols, dtype=np.int64), np.array(out_vals))
    net = ReluNetwork(m, d, [layer1, layer2, layer3, layer4], None)
    net.manifest = count_units(net, per_chart)
    return net, net.manifest


def shared_term_count(expansions: list[Expansion]) -> int:
    """Number of distinct (k, b) pairs across charts (reported, never deduplicated)."""
    return len({idx for e in expansions for idx, _ in e.terms})


def count_units(net: ReluNetwork, expansions: list[Expansion] | None = None) -> CompilationManifest:
    """Manifest recomputed from the network structure.

    Per-chart term counts are read off layer 3: each of its units reads the
    layer-2 trapezoid units of one chart, whose layer-1 inputs identify it.
    """
    m, d = net.m, net.d
    l1, l2, l3 = net.layers[:3]
    n_charts = l1.width // m
    unit2_chart = np.full(l2.width, -1, dtype=np.int64)
    unit2_chart[l2.rows] = l2.cols // m
    unit3_chart = np.full(l3.width, -1, dtype=np.int64)
    unit3_chart[l3.rows] = unit2_chart[l3.cols]
    chart_terms = [int(np.count_nonzero(unit3_chart == i)) // 2 for i in range(n_charts)]
    total = sum(chart_terms)
    distinct = total if expansions is None else shared_term_count(expansions)
    widths = net.widths
    c1 = n_charts * (m + 4 * (m - d)) + 1
    c2 = (8 * d + 2) * n_charts
    relu_shift = net.manifest.relu_shift if net.manifest is not None else None
    if expansions is None and net.manifest is not None:
        distinct = net.manifest.distinct_terms
    return CompilationManifest(
        m=m, d=d, c_gamma=n_charts, chart_terms=chart_terms, total_terms=total,
        distinct_terms=distinct, widths=widths,
        nonzero_weights=sum(l.nnz for l in net.layers), c1=c1, c2=c2,
        total_units=sum(widths), relu_shift=relu_shift)


def expected_widths(m: int, d: int, chart_terms: list[int]) -> list[int]:
    n_charts, total = len(chart_terms), sum(chart_terms)
    return [m * n_charts, 8 * d * total + 4 * n_charts * (m - d), 2 * total, 1]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _hidden(net: ReluNetwork, x: np.ndarray) -> np.ndarray:
    h = x
    for layer, mat in zip(net.layers[:3], net.matrices()[:3]):
        h = (mat @ h.T).T + layer.bias
        if layer.kind == "relu":
            np.maximum(h, 0.0, out=h)
    return h


def _batch_rows(net: ReluNetwork, batch: int) -> int:
    # keep the dense hidden activations of one batch near 32 MB
    return max(1, min(batch, (1 << 22) // max(net.widths)))


def _check_input(net: ReluNetwork, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.m:
        raise ValueError(f"expected inputs of dimension {net.m}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    return x


def evaluate_network(net: ReluNetwork, x, batch: int = 512) -> np.ndarray:
    """Feed-forward evaluation on a batch of points (n, m)."""
    x = _check_input(net, x)
    out = np.empty(x.shape[0])
    w4 = net.matrices()[3]
    batch = _batch_rows(net, batch)
    for start in range(0, x.shape[0], batch):
        h = _hidden(net, x[start:start + batch])
        out[start:start + batch] = (w4 @ h.T).ravel() + net.layers[3].bias[0]
    return out


def chart_contributions(net: ReluNetwork, x, batch: int = 512) -> np.ndarray:
    """Output split by chart, shape (n, C_Gamma); rows sum to the network output."""
    x = _check_input(net, x)
    terms = net.manifest.chart_terms
    owner = np.repeat(np.arange(len(terms)), [2 * t for t in terms])
    l4 = net.layers[3]
    weights = np.zeros(l4.in_width)
    weights[l4.cols] = l4.vals
    out = np.zeros((x.shape[0], len(terms)))
    batch = _batch_rows(net, batch)
    for start in range(0, x.shape[0], batch):
        h = _hidden(net, x[start:start + batch]) * weights
        for i in range(len(terms)):
            out[start:start + batch, i] = h[:, owner == i].sum(axis=1)
    return out


def analytic_evaluate(atlas: Atlas, expansions: list[Expansion], params: FrameParams, x,
                      per_chart: bool = False) -> np.ndarray:
    """The network's defining sum evaluated directly from the wavelet formulas."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m = x.shape[1]
    ext = AmbientExtensionParams.from_delta(m, params.d, atlas.delta)
    parts = np.zeros((x.shape[0], atlas.size))
    for e in _chart_expansions(atlas, expansions):
        if not e.terms:
            continue
        u, v = chart_coords(atlas.charts[e.chart_id], x)
        parts[:, e.chart_id] = e.evaluate(u, params, normal_offset=ext.normal_offset(v))
    return parts if per_chart else parts.sum(axis=1)


# ---------------------------------------------------------------------------
# linear units simulated by rectifiers
# ---------------------------------------------------------------------------

def preactivation_bound(net: ReluNetwork, lo, hi) -> float:
    """Max |layer-1 pre-activation| over the box [lo, hi]."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (net.m,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (net.m,))
    if np.any(hi < lo):
        raise ValueError("inverted input box")
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    mat = net.matrices()[0]
    centre = mat @ mid + net.layers[0].bias
    spread = abs(mat) @ half
    return float(np.max(np.abs(centre) + spread))


def relu_simulate_linear(net: ReluNetwork, B: float, lo, hi) -> ReluNetwork:
    """Replace the linear first layer by rectifiers shifted by B.

    On the box [lo, hi] every shifted pre-activation is positive, so the
    rectifier acts as the identity and the shift is removed again through the
    layer-2 biases.  Outside the box the outputs may differ.
    """
    if net.layers[0].kind != "linear":
        raise ValueError("first layer is already a rectifier layer")
    need = preactivation_bound(net, lo, hi)
    if not B > need:
        raise ValueError(f"shift B={B} does not exceed the pre-activation bound {need:.6g} on the box")
    l1, l2 = net.layers[0], net.layers[1]
    new1 = Layer("relu", l1.width, l1.in_width, l1.bias + B, l1.rows, l1.cols, l1.vals)
    rowsum = np.asarray(l2.matrix().sum(axis=1)).ravel()
    new2 = Layer("relu", l2.width, l2.in_width, l2.bias - B * rowsum, l2.rows, l2.cols, l2.vals)
    out = ReluNetwork(net.m, net.d, [new1, new2, net.layers[2], net.layers[3]], None)
    out.manifest = count_units(out)
    out.manifest.distinct_terms = net.manifest.distinct_terms
    out.manifest.relu_shift = float(B)
    return out
