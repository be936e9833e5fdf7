"""Synthetic manifolds, ball-covering atlases and partitions of unity.

A chart is the orthogonal projection onto the tangent plane at an anchor
point.  Its extension to R^m returns tangent coordinates ``u`` and normal
coordinates ``v``; the normal basis of every chart is rotated so that the
principal normal (direction of curvature) has equal weight on every normal
axis, which keeps per-axis normal offsets at ``|v| / sqrt(m-d)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

KINDS = ("circle", "sphere2", "flat_patch", "swiss_roll")


class AtlasError(ValueError):
    """Raised when an atlas cannot be built or a chart cannot be inverted."""


def _orthonormal_embedding(m: int, q: int, seed: int) -> np.ndarray:
    if m < q:
        raise ValueError(f"ambient dimension {m} is smaller than base dimension {q}")
    if m == q:
        return np.eye(m)
    rng = np.random.default_rng(seed)
    qmat, r = np.linalg.qr(rng.standard_normal((m, q)))
    return qmat * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# manifold models
# ---------------------------------------------------------------------------

@dataclass
class ManifoldModel:
    """A compact d-manifold in a base space R^q, placed in R^m by x = E y + shift.

    kind: circle (unit circle, q=2), sphere2 (unit sphere, q=3), flat_patch
    (the cube [-half_width, half_width]^d, q=d) or swiss_roll
    (y = (t cos t, h, t sin t) with t in t_range and h in [0, height], q=3).
    """

    kind: str
    m: int
    d: int
    embedding: np.ndarray
    shift: np.ndarray
    half_width: float = 1.0
    t_range: tuple[float, float] = (1.5 * math.pi, 3.0 * math.pi)
    height: float = 4.0
    embed_seed: int = 0

    @classmethod
    def make(cls, kind: str, m: int, d: int | None = None, embed_seed: int = 0,
             **params) -> "ManifoldModel":
        if kind not in KINDS:
            raise ValueError(f"unsupported manifold kind {kind!r}")
        if kind == "circle":
            d, q = 1, 2
        elif kind in ("sphere2", "swiss_roll"):
            d, q = 2, 3
        else:
            d = 2 if d is None else int(d)
            q = d
        emb = _orthonormal_embedding(m, q, embed_seed)
        model = cls(kind, m, d, emb, np.zeros(m), embed_seed=embed_seed, **params)
        return model

    @property
    def q(self) -> int:
        return self.embedding.shape[1]

    @property
    def surface_area(self) -> float:
        if self.kind == "circle":
            return 2.0 * math.pi
        if self.kind == "sphere2":
            return 4.0 * math.pi
        if self.kind == "flat_patch":
            return (2.0 * self.half_width) ** self.d
        a, b = self.t_range
        arc = lambda t: 0.5 * (t * math.sqrt(1 + t * t) + math.asinh(t))  # noqa: E731
        return self.height * (arc(b) - arc(a))

    def to_ambient(self, y):
        return np.asarray(y, dtype=float) @ self.embedding.T + self.shift

    def to_base(self, x):
        return (np.asarray(x, dtype=float) - self.shift) @ self.embedding

    # -- swiss roll parametrization ------------------------------------------
    def _roll(self, t, h):
        return np.stack([t * np.cos(t), h, t * np.sin(t)], axis=-1)

    def _roll_jacobian(self, t):
        dt = np.stack([np.cos(t) - t * np.sin(t), np.zeros_like(t), np.sin(t) + t * np.cos(t)], -1)
        dh = np.broadcast_to(np.array([0.0, 1.0, 0.0]), dt.shape)
        return np.stack([dt, dh], axis=-1)

    def _roll_params(self, y):
        r = np.hypot(y[..., 0], y[..., 2])
        return r, y[..., 1]

    def residual(self, x):
        """Distance-like residual of the implicit equation at ambient points."""
        x = np.atleast_2d(x)
        y = self.to_base(x)
        off = np.linalg.norm(x - self.to_ambient(y), axis=1)
        if self.kind in ("circle", "sphere2"):
            return off + np.abs(np.linalg.norm(y, axis=1) - 1.0)
        if self.kind == "flat_patch":
            return off + np.maximum(np.abs(y).max(axis=1) - self.half_width, 0.0)
        t, h = self._roll_params(y)
        return off + np.linalg.norm(y - self._roll(t, h), axis=1)

    def sample(self, n: int, seed: int) -> np.ndarray:
        """n points on the manifold, uniform in surface measure; deterministic."""
        if n < 1:
            raise ValueError("n must be positive")
        rng = np.random.default_rng(seed)
        if self.kind in ("circle", "sphere2"):
            g = rng.standard_normal((n, self.q))
            y = g / np.linalg.norm(g, axis=1, keepdims=True)
        elif self.kind == "flat_patch":
            y = rng.uniform(-self.half_width, self.half_width, size=(n, self.d))
        else:
            a, b = self.t_range
            dens_max = math.sqrt(1 + b * b)
            ts = []
            while sum(len(c) for c in ts) < n:
                t = rng.uniform(a, b, size=2 * n)
                keep = rng.uniform(0, dens_max, size=2 * n) < np.sqrt(1 + t * t)
                ts.append(t[keep])
            t = np.concatenate(ts)[:n]
            h = rng.uniform(0, self.height, size=n)
            y = self._roll(t, h)
        return self.to_ambient(y)

    def analytic_tangent(self, x) -> np.ndarray | None:
        """Orthonormal tangent basis (m, d) at x, or None for estimated models."""
        y = self.to_base(x)
        if self.kind == "flat_patch":
            return self.embedding.copy()
        if self.kind == "circle":
            return (self.embedding @ np.array([-y[1], y[0]]))[:, None]
        if self.kind == "sphere2":
            full = np.linalg.svd(y[:, None], full_matrices=True)[0]
            return self.embedding @ full[:, 1:]
        return None

    def principal_normal(self, x) -> np.ndarray | None:
        """Unit direction in which nearby manifold points leave the tangent plane."""
        if self.kind in ("circle", "sphere2"):
            y = self.to_base(x)
            return self.embedding @ (y / np.linalg.norm(y))
        return None

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "m": self.m, "d": self.d, "embed_seed": self.embed_seed}
        if self.kind == "flat_patch":
            out["half_width"] = self.half_width
        if self.kind == "swiss_roll":
            out["t_range"] = list(self.t_range)
            out["height"] = self.height
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ManifoldModel":
        data = dict(data)
        kind, m = data.pop("kind"), data.pop("m")
        d = data.pop("d", None)
        if "t_range" in data:
            data["t_range"] = tuple(data["t_range"])
        return cls.make(kind, m, d=d, **data)


# ---------------------------------------------------------------------------
# charts and atlases
# ---------------------------------------------------------------------------

def _balanced_normal_basis(tangent: np.ndarray, principal=None) -> np.ndarray:
    """Orthonormal complement of ``tangent``; ``principal`` is mapped to (1..1)/sqrt(c)."""
    m, d = tangent.shape
    full = np.linalg.svd(tangent, full_matrices=True)[0]
    normal = full[:, d:]
    if principal is None or normal.shape[1] < 2:
        return normal
    a = normal.T @ principal
    norm = np.linalg.norm(a)
    if norm < 1e-12:
        return normal
    a = a / norm
    e = np.full(a.size, 1.0 / math.sqrt(a.size))
    w = a - e
    if np.linalg.norm(w) < 1e-14:
        return normal
    house = np.eye(a.size) - 2.0 * np.outer(w, w) / (w @ w)
    return normal @ house


@dataclass
class Chart:
    anchor: np.ndarray
    tangent_basis: np.ndarray
    normal_basis: np.ndarray
    delta: float

    @property
    def m(self) -> int:
        return self.anchor.size

    @property
    def d(self) -> int:
        return self.tangent_basis.shape[1]

    @property
    def frame(self) -> np.ndarray:
        """[T | N], shape (m, m)."""
        return np.hstack([self.tangent_basis, self.normal_basis])

    def gram_deviation(self) -> float:
        f = self.frame
        return float(np.abs(f.T @ f - np.eye(self.m)).max())


@dataclass
class Atlas:
    charts: list[Chart]
    delta: float
    model: ManifoldModel | None = None
    seed: int = 0
    c_gamma_bound: int | None = None

    @property
    def r1(self) -> float:
        return self.delta / 2.0

    @property
    def r2(self) -> float:
        return math.sqrt(3.0) / 2.0 * self.delta

    @property
    def size(self) -> int:
        return len(self.charts)

    @property
    def anchors(self) -> np.ndarray:
        return np.array([c.anchor for c in self.charts])

    def to_dict(self) -> dict:
        enc = lambda a: [[repr(float(v)) for v in row] for row in np.atleast_2d(a)]  # noqa: E731
        return {
            "delta": repr(float(self.delta)),
            "seed": self.seed,
            "c_gamma_bound": self.c_gamma_bound,
            "model": None if self.model is None else self.model.to_dict(),
            "charts": [{"anchor": [repr(float(v)) for v in c.anchor],
                        "tangent_basis": enc(c.tangent_basis),
                        "normal_basis": enc(c.normal_basis)} for c in self.charts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "Atlas":
        delta = float(data["delta"])
        dec = lambda a: np.array([[float(v) for v in row] for row in a])  # noqa: E731
        charts = []
        for c in data["charts"]:
            anchor = np.array([float(v) for v in c["anchor"]])
            tb = dec(c["tangent_basis"]).reshape(anchor.size, -1)
            nb = dec(c["normal_basis"]).reshape(anchor.size, -1) if c["normal_basis"] else np.zeros((anchor.size, 0))
            charts.append(Chart(anchor, tb, nb, delta))
        model = ManifoldModel.from_dict(data["model"]) if data.get("model") else None
        return cls(charts, delta, model, data.get("seed", 0), data.get("c_gamma_bound"))


def covering_bound(d: int, surface_area: float, delta: float) -> int:
    """ceil(2^d SA / delta^d * T_d) with thickness T_d = d log d + 5d."""
    if d <= 0 or surface_area <= 0 or delta <= 0:
        raise ValueError("covering bound needs positive d, surface area and delta")
    thickness = d * math.log(d) + 5 * d
    return math.ceil(2**d * surface_area / delta**d * thickness)


def _pca_tangent(samples: np.ndarray, anchor: np.ndarray, radius: float, d: int):
    near = samples[np.linalg.norm(samples - anchor, axis=1) <= radius]
    if near.shape[0] <= d:
        raise AtlasError("too few samples near an anchor to estimate its tangent plane")
    centered = near - near.mean(axis=0)
    vecs = np.linalg.svd(centered, full_matrices=False)[2]
    return vecs[:d].T


def _estimated_principal_normal(samples, anchor, tangent, radius):
    near = samples[np.linalg.norm(samples - anchor, axis=1) <= radius] - anchor
    resid = near - (near @ tangent) @ tangent.T
    mean = resid.mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 1e-12 else None


def build_atlas(model: ManifoldModel, delta: float, samples, seed: int = 0) -> Atlas:
    """Greedy farthest-point cover of the sample cloud by balls of radius delta/2."""
    samples = np.asarray(samples, dtype=float)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if samples.shape[0] > 1:
        nn = cKDTree(samples).query(samples, k=2)[0][:, 1]
        if nn.max() > delta / 2:
            raise AtlasError(
                f"sampling too sparse: a sample is {nn.max():.3g} from its nearest neighbour "
                f"(delta/2 = {delta / 2:.3g}); add samples or increase delta")
    chosen = [0]
    dist = np.linalg.norm(samples - samples[0], axis=1)
    while dist.max() > delta / 2:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(samples - samples[nxt], axis=1))

    charts = []
    for idx in chosen:
        anchor = samples[idx]
        tangent = model.analytic_tangent(anchor)
        principal = model.principal_normal(anchor)
        if tangent is None:
            tangent = _pca_tangent(samples, anchor, delta / 2, model.d)
            principal = _estimated_principal_normal(samples, anchor, tangent, delta)
        normal = _balanced_normal_basis(tangent, principal)
        charts.append(Chart(anchor.copy(), tangent, normal, delta))
    bound = covering_bound(model.d, model.surface_area, delta)
    return Atlas(charts, delta, model, seed, bound)


def chart_coords(chart: Chart, x):
    """Tangent and normal coordinates of x (batch over leading axes)."""
    diff = np.asarray(x, dtype=float) - chart.anchor
    return diff @ chart.tangent_basis, diff @ chart.normal_basis


def chart_inverse_batch(chart: Chart, model: ManifoldModel, u, tol: float = 1e-12):
    """Lift tangent coordinates back to the manifold.

    Returns ``(points, inside)`` where ``inside`` marks coordinates in the
    chart image, i.e. whose lift lies within distance delta of the anchor.
    Rows outside the image hold NaN.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n = u.shape[0]
    out = np.full((n, chart.m), np.nan)
    if model.kind == "flat_patch":
        x = chart.anchor + u @ chart.tangent_basis.T
        ok = np.abs(model.to_base(x)).max(axis=1) <= model.half_width
    elif model.kind in ("circle", "sphere2"):
        y0 = model.to_base(chart.anchor)
        ty = chart.tangent_basis.T @ model.embedding  # (d, q)
        r2 = np.sum(u * u, axis=1)
        ok = r2 < 1.0
        y = u @ ty + np.sqrt(np.clip(1.0 - r2, 0.0, None))[:, None] * y0
        x = model.to_ambient(y)
    else:
        x, ok = _roll_newton(chart, model, u, tol)
    ok &= np.linalg.norm(x - chart.anchor, axis=1) < chart.delta
    out[ok] = x[ok]
    return out, ok


def _roll_newton(chart, model, u, tol, iters=50):
    r, h0 = model._roll_params(model.to_base(chart.anchor))
    n = u.shape[0]
    t = np.full(n, float(r))
    h = np.full(n, float(h0))
    tb = chart.tangent_basis
    for _ in range(iters):
        x = model.to_ambient(model._roll(t, h))
        res = (x - chart.anchor) @ tb - u
        if np.all(np.abs(res) <= tol * (1 + np.abs(u))):
            break
        jac = np.einsum("md,nmk->ndk", tb, np.einsum("mq,nqk->nmk", model.embedding, model._roll_jacobian(t)))
        step = np.linalg.solve(jac, res[..., None])[..., 0]
        t, h = t - step[:, 0], h - step[:, 1]
    x = model.to_ambient(model._roll(t, h))
    res = np.abs((x - chart.anchor) @ tb - u).max(axis=1)
    a, b = model.t_range
    converged = res <= 1e-10
    inside = converged & (t >= a) & (t <= b) & (h >= 0) & (h <= model.height)
    near = np.linalg.norm(u, axis=1) < chart.delta / 4
    if np.any(near & ~converged):
        raise AtlasError("chart inversion failed inside the chart image")
    return x, inside


def chart_inverse(chart: Chart, model: ManifoldModel, u) -> np.ndarray:
    """The point of U_i with tangent coordinates u; AtlasError outside the image."""
    x, ok = chart_inverse_batch(chart, model, np.atleast_1d(u)[None, :])
    if not ok[0]:
        raise AtlasError("tangent coordinates lie outside the chart image")
    return x[0]


# ---------------------------------------------------------------------------
# partition of unity
# ---------------------------------------------------------------------------

def bump(t):
    """exp(1 - 1/(1 - t^2)) on [0, 1), zero beyond."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass
class PartitionOfUnity:
    atlas: Atlas

    def bumps(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dist = np.linalg.norm(x[:, None, :] - self.atlas.anchors[None, :, :], axis=2)
        return bump(dist / self.atlas.delta)

    def weights(self, x) -> np.ndarray:
        """Dense (n, charts) matrix of eta_i(x)."""
        beta = self.bumps(x)
        total = beta.sum(axis=1, keepdims=True)
        if np.any(total == 0):
            raise AtlasError("point not covered by any chart")
        return beta / total

    def weight(self, x, chart_id: int) -> np.ndarray:
        return self.weights(x)[:, chart_id]


def pou_weights(pou: PartitionOfUnity, x) -> list[tuple[int, float]]:
    """Nonzero (chart_id, weight) pairs at a single point."""
    w = pou.weights(np.asarray(x, dtype=float)[None, :])[0]
    return [(int(i), float(w[i])) for i in np.nonzero(w)[0]]


def chart_local_function(f, chart_id: int, atlas: Atlas, pou: PartitionOfUnity):
    """f times eta_i pulled back to tangent coordinates and extended by zero."""
    chart = atlas.charts[chart_id]
    model = atlas.model

    def local(u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        x, ok = chart_inverse_batch(chart, model, u)
        out = np.zeros(u.shape[0])
        if np.any(ok):
            out[ok] = f(x[ok]) * pou.weight(x[ok], chart_id)
        return out

    return local


# ---------------------------------------------------------------------------
# radius checks
# ---------------------------------------------------------------------------

def verify_radii(atlas: Atlas, samples, tol: float = 1e-9) -> dict:
    """Check normal distances against r1 (inside U_i) and r2 (outside, projecting in).

    Also checks the per-axis normal offsets that the ambient extension relies
    on: inside U_i every |v_j| must stay on the plateau r1/sqrt(m-d).
    """
    samples = np.asarray(samples, dtype=float)
    model = atlas.model
    r1, r2 = atlas.r1, atlas.r2
    first_max, second_min, axis_max = 0.0, math.inf, 0.0
    first_bad = second_bad = axis_bad = 0
    for chart in atlas.charts:
        u, v = chart_coords(chart, samples)
        vn = np.linalg.norm(v, axis=1)
        inside = np.linalg.norm(samples - chart.anchor, axis=1) < chart.delta
        if np.any(inside):
            first_max = max(first_max, float(vn[inside].max()))
            first_bad += int(np.count_nonzero(vn[inside] > r1 + tol))
            if v.shape[1]:
                per_axis = np.abs(v[inside]).max(axis=1)
                axis_max = max(axis_max, float(per_axis.max()))
                axis_bad += int(np.count_nonzero(per_axis > r1 / math.sqrt(v.shape[1]) + tol))
        # a lift within delta of the anchor has |u| < delta, so skip the rest
        out = ~inside & (np.linalg.norm(u, axis=1) < chart.delta)
        if np.any(out) and model is not None:
            _, in_image = chart_inverse_batch(chart, model, u[out])
            if np.any(in_image):
                dist = vn[out][in_image]
                second_min = min(second_min, float(dist.min()))
                second_bad += int(np.count_nonzero(dist < r2 - tol))
    return {
        "r1": r1,
        "r2": r2,
        "max_inside_distance": first_max,
        "min_outside_distance": second_min,
        "max_inside_axis_offset": axis_max,
        "inside_violations": first_bad,
        "outside_violations": second_bad,
        "plateau_violations": axis_bad,
        "passed": first_bad == 0 and second_bad == 0 and axis_bad == 0,
    }
