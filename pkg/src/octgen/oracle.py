"""Procedural training shapes with exact signed distance ground truth.

Shapes are small CSG trees of analytic primitives (sphere, box, torus,
capsule) combined by min/max.  CSG combinations give a pseudo-SDF near blend
edges; gradients are taken from the active branch with ties broken toward the
first operand.  A smooth procedural color field stands in for texture ground
truth when the color branch is trained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import OctgenError, OutOfDomain

_EPS = 1e-12


# -- primitives / CSG tree ------------------------------------------------------


@dataclass
class Sphere:
    center: tuple
    radius: float

    def eval(self, p):
        d = p - np.asarray(self.center)
        r = np.linalg.norm(d, axis=-1)
        grad = d / np.maximum(r, _EPS)[..., None]
        return r - self.radius, grad

    def to_dict(self):
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass
class Box:
    center: tuple
    half: tuple  # half-extents per axis

    def eval(self, p):
        d = p - np.asarray(self.center)
        q = np.abs(d) - np.asarray(self.half)
        outside = np.maximum(q, 0.0)
        out_norm = np.linalg.norm(outside, axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        val = out_norm + inside
        sign = np.where(d >= 0, 1.0, -1.0)
        grad_out = sign * outside / np.maximum(out_norm, _EPS)[..., None]
        # inside: step along the axis of the (first) largest q component
        axis = q.argmax(axis=-1)
        grad_in = np.zeros_like(q)
        np.put_along_axis(grad_in, axis[..., None], 1.0, axis=-1)
        grad_in = grad_in * sign
        grad = np.where((out_norm > 0)[..., None], grad_out, grad_in)
        return val, grad

    def to_dict(self):
        return {"kind": "box", "center": list(self.center), "half": list(self.half)}


@dataclass
class Torus:
    """Ring of tube radius r around axis z, ring radius R, in the xy-plane."""

    center: tuple
    ring_radius: float
    tube_radius: float

    def eval(self, p):
        d = p - np.asarray(self.center)
        rho = np.linalg.norm(d[..., :2], axis=-1)
        qx = rho - self.ring_radius
        qz = d[..., 2]
        qn = np.sqrt(qx * qx + qz * qz)
        val = qn - self.tube_radius
        qn = np.maximum(qn, _EPS)
        rho_s = np.maximum(rho, _EPS)
        grad = np.stack(
            [
                (qx / qn) * (d[..., 0] / rho_s),
                (qx / qn) * (d[..., 1] / rho_s),
                qz / qn,
            ],
            axis=-1,
        )
        return val, grad

    def to_dict(self):
        return {
            "kind": "torus",
            "center": list(self.center),
            "ring_radius": self.ring_radius,
            "tube_radius": self.tube_radius,
        }


@dataclass
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def eval(self, p):
        a = np.asarray(self.a)
        ba = np.asarray(self.b) - a
        pa = p - a
        h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
        d = pa - h[..., None] * ba
        r = np.linalg.norm(d, axis=-1)
        grad = d / np.maximum(r, _EPS)[..., None]
        return r - self.radius, grad

    def to_dict(self):
        return {"kind": "capsule", "a": list(self.a), "b": list(self.b), "radius": self.radius}


@dataclass
class Combine:
    """union = min, intersection = max, difference = max(a, -b)."""

    op: str  # union | intersection | difference
    a: object
    b: object

    def eval(self, p):
        va, ga = self.a.eval(p)
        vb, gb = self.b.eval(p)
        if self.op == "union":
            pick_a = va <= vb
            val = np.where(pick_a, va, vb)
            grad = np.where(pick_a[..., None], ga, gb)
        elif self.op == "intersection":
            pick_a = va >= vb
            val = np.where(pick_a, va, vb)
            grad = np.where(pick_a[..., None], ga, gb)
        elif self.op == "difference":
            pick_a = va >= -vb
            val = np.where(pick_a, va, -vb)
            grad = np.where(pick_a[..., None], ga, -gb)
        else:
            raise OctgenError(f"unknown CSG op: {self.op}")
        return val, grad

    def to_dict(self):
        return {"kind": self.op, "a": self.a.to_dict(), "b": self.b.to_dict()}


_PRIM_KINDS = {"sphere", "box", "torus", "capsule"}


def node_from_dict(d):
    kind = d["kind"]
    if kind == "sphere":
        return Sphere(tuple(d["center"]), d["radius"])
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["half"]))
    if kind == "torus":
        return Torus(tuple(d["center"]), d["ring_radius"], d["tube_radius"])
    if kind == "capsule":
        return Capsule(tuple(d["a"]), tuple(d["b"]), d["radius"])
    if kind in ("union", "intersection", "difference"):
        return Combine(kind, node_from_dict(d["a"]), node_from_dict(d["b"]))
    raise OctgenError(f"unknown node kind: {kind}")


def count_primitives(node) -> int:
    if isinstance(node, Combine):
        return count_primitives(node.a) + count_primitives(node.b)
    return 1


@dataclass
class ShapeSpec:
    """A CSG tree plus the label of the generating family.

    palette parameterizes the procedural color field (phase + frequency rows
    per RGB channel).
    """

    root: object
    category_label: int = 0
    palette: tuple = field(default=((0.0, 2.0, 4.0), ((2.0, 0.7, 0.3), (0.4, 2.2, 0.8), (0.6, 0.5, 2.4))))

    def to_dict(self):
        return {
            "root": self.root.to_dict(),
            "category_label": self.category_label,
            "palette": [list(self.palette[0]), [list(r) for r in self.palette[1]]],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            root=node_from_dict(d["root"]),
            category_label=int(d["category_label"]),
            palette=(tuple(d["palette"][0]), tuple(tuple(r) for r in d["palette"][1])),
        )


def _check_domain(p):
    if np.any(np.abs(p) > 1.0 + 1e-12):
        raise OutOfDomain("query points must lie in [-1,1]^3")


def sdf(spec: ShapeSpec, p):
    """Exact (pseudo-)SDF value and gradient at points p in [-1,1]^3."""
    p = np.asarray(p, dtype=np.float64)
    _check_domain(p)
    return spec.root.eval(p)


def color_field(spec: ShapeSpec, p):
    """Smooth procedural RGB in [0,1]^3; ground truth for color training."""
    p = np.asarray(p, dtype=np.float64)
    phase = np.asarray(spec.palette[0])
    freq = np.asarray(spec.palette[1])
    return 0.5 + 0.5 * np.sin(p @ freq.T + phase)


def sample_surface(spec: ShapeSpec, n: int, seed: int, max_newton=20, tol=1e-5):
    """n surface points with outward unit normals.

    Uniform volume seeds are projected onto the zero set along the gradient
    (Newton); non-converged or out-of-domain projections are rejected.
    Deterministic under a fixed seed.
    """
    rng = np.random.default_rng(seed)
    pts = np.zeros((0, 3))
    nrm = np.zeros((0, 3))
    attempts = 0
    while len(pts) < n:
        attempts += 1
        if attempts > 200:
            raise OctgenError("surface sampling failed to converge; degenerate shape?")
        m = max(2 * (n - len(pts)), 1024)
        q = rng.uniform(-1.0, 1.0, (m, 3))
        for _ in range(max_newton):
            v, g = spec.root.eval(q)
            gn2 = np.maximum((g * g).sum(axis=1), _EPS)
            q = q - (v / gn2)[:, None] * g
            q = np.clip(q, -1.0, 1.0)
        v, g = spec.root.eval(q)
        ok = (np.abs(v) < tol) & (np.abs(q).max(axis=1) <= 1.0)
        q, g = q[ok], g[ok]
        gl = np.linalg.norm(g, axis=1, keepdims=True)
        pts = np.vstack([pts, q])
        nrm = np.vstack([nrm, g / np.maximum(gl, _EPS)])
    return pts[:n], nrm[:n]


def sample_queries(spec: ShapeSpec, n: int, seed: int, near_sigma=0.05):
    """Volume query points: uniform plus 50% near-surface enrichment."""
    rng = np.random.default_rng(seed)
    n_near = n // 2
    n_uni = n - n_near
    uni = rng.uniform(-1.0, 1.0, (n_uni, 3))
    if n_near:
        surf, _ = sample_surface(spec, n_near, seed=int(rng.integers(2**31)))
        near = np.clip(surf + rng.normal(0.0, near_sigma, (n_near, 3)), -1.0, 1.0)
        return np.vstack([uni, near])
    return uni


# -- shape families -------------------------------------------------------------

FAMILY_NAMES = {0: "table", 1: "chair"}


def _make_table(rng) -> ShapeSpec:
    w = rng.uniform(0.38, 0.55)
    d = rng.uniform(0.38, 0.55)
    th = rng.uniform(0.035, 0.06)
    top_y = rng.uniform(0.25, 0.42)
    leg_r = rng.uniform(0.035, 0.055)
    bot_y = -rng.uniform(0.45, 0.6)
    inset = leg_r + 0.02
    top = Box((0.0, top_y, 0.0), (w, th, d))
    shape = top
    for sx in (-1, 1):
        for sz in (-1, 1):
            leg = Capsule(
                (sx * (w - inset), bot_y, sz * (d - inset)),
                (sx * (w - inset), top_y, sz * (d - inset)),
                leg_r,
            )
            shape = Combine("union", shape, leg)
    return ShapeSpec(root=shape, category_label=0)


def _make_chair(rng) -> ShapeSpec:
    w = rng.uniform(0.26, 0.38)
    d = rng.uniform(0.26, 0.36)
    seat_th = rng.uniform(0.035, 0.055)
    seat_y = rng.uniform(-0.12, 0.02)
    back_h = rng.uniform(0.35, 0.55)
    back_th = rng.uniform(0.035, 0.055)
    leg_r = rng.uniform(0.035, 0.05)
    bot_y = -rng.uniform(0.5, 0.62)
    inset = leg_r + 0.02
    seat = Box((0.0, seat_y, 0.0), (w, seat_th, d))
    back = Box((0.0, seat_y + back_h / 2, -d + back_th), (w, back_h / 2 + seat_th, back_th))
    shape = Combine("union", seat, back)
    for sx in (-1, 1):
        for sz in (-1, 1):
            leg = Capsule(
                (sx * (w - inset), bot_y, sz * (d - inset)),
                (sx * (w - inset), seat_y, sz * (d - inset)),
                leg_r,
            )
            shape = Combine("union", shape, leg)
    return ShapeSpec(root=shape, category_label=1)


_FAMILY_BUILDERS = {0: _make_table, 1: _make_chair}


def make_family(family_id: int, count: int, seed: int):
    """Deterministic parameterized shapes for a family; independent of count
    order (shape i depends only on (family_id, seed, i))."""
    if family_id not in _FAMILY_BUILDERS:
        raise OctgenError(f"unknown family id {family_id}")
    shapes = []
    for i in range(count):
        rng = np.random.default_rng([family_id, seed, i])
        spec = _FAMILY_BUILDERS[family_id](rng)
        phase = tuple(rng.uniform(0, 2 * np.pi, 3))
        freq = tuple(tuple(row) for row in rng.uniform(-2.5, 2.5, (3, 3)))
        spec.palette = (phase, freq)
        shapes.append(spec)
    return shapes


# -- dataset manifest ----------------------------------------------------------


def save_manifest(path, shapes, extra: dict | None = None):
    doc = {
        "version": 1,
        "shapes": [s.to_dict() for s in shapes],
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    shapes = [ShapeSpec.from_dict(d) for d in doc["shapes"]]
    return shapes, doc.get("extra", {})
