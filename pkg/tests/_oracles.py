"""Independent brute-force oracles.

These deliberately re-derive results from first principles with plain loops,
so the fast implementations are checked against a second code path.
"""

from __future__ import annotations

import numpy as np


def brute_extents(v: np.ndarray) -> tuple[int, int]:
    r = v.shape[0]
    us = [u for u in range(r) if any(v[u, j, w] for j in range(r) for w in range(r))]
    vs = [j for j in range(r) if any(v[u, j, w] for u in range(r) for w in range(r))]
    ext_u = (1 + max(us) - min(us)) if us else 0
    ext_v = (1 + max(vs) - min(vs)) if vs else 0
    return ext_u, ext_v


def brute_slice_extents(v: np.ndarray, w: int) -> tuple[int, int]:
    r = v.shape[0]
    us = [u for u in range(r) if any(v[u, j, w] for j in range(r))]
    vs = [j for j in range(r) if any(v[u, j, w] for u in range(r))]
    ext_u = (1 + max(us) - min(us)) if us else 0
    ext_v = (1 + max(vs) - min(vs)) if vs else 0
    return ext_u, ext_v


def brute_template(v: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-definition base template: ring of the max-footprint slice, the
    boundary condition evaluated literally (degenerate axes are the row or
    column itself)."""
    r = v.shape[0]
    areas = []
    for w in range(r):
        eu, ev = brute_slice_extents(v, w)
        areas.append(eu * ev)
    w_star = int(np.argmax(areas))
    us = [u for u in range(r) if any(v[u, j, w_star] for j in range(r))]
    vs = [j for j in range(r) if any(v[u, j, w_star] for u in range(r))]
    u0, u1, v0, v1 = min(us), max(us), min(vs), max(vs)
    template = np.zeros_like(v, dtype=bool)
    for u in range(r):
        for j in range(r):
            if not (u0 <= u <= u1 and v0 <= j <= v1):
                continue
            ratios = []
            num_u, den_u = abs(2 * u - u1 - u0), u1 - u0
            num_v, den_v = abs(2 * j - v1 - v0), v1 - v0
            # max of the two normalized distances equals one exactly on the
            # boundary; a zero denominator means that axis is a single line.
            on_u = (num_u == den_u)
            on_v = (num_v == den_v)
            if on_u or on_v:
                template[u, j, w_star] = True
    return template, w_star


def brute_validate(v: np.ndarray, alpha: float = 1.0, beta: float = 0.95) -> dict:
    r = v.shape[0]
    ext_u, ext_v = brute_extents(v)
    area = ext_u * ext_v
    squareness = (min(ext_u, ext_v) / max(ext_u, ext_v)) if area else 0.0
    if v.any():
        template, _ = brute_template(v)
        denom = int(template.sum())
        comp = float((v & template).sum() / denom) if denom else 0.0
    else:
        comp = 0.0
    reasons = []
    if area < (r // 2) ** 2:
        reasons.append("area")
    if squareness < alpha:
        reasons.append("squareness")
    if comp < beta:
        reasons.append("completeness")
    return {"base_area": area, "squareness": squareness, "completeness": comp,
            "accepted": not reasons, "reasons": reasons}


def brute_stitch(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """Index-by-index evaluation of the seam concatenation on dense arrays
    of shape (R, R, R, D)."""
    r = d1.shape[0]
    out = np.zeros_like(d1)
    for x in range(r):
        for y in range(r):
            for z in range(r):
                if x < r // 2:
                    out[x, y, z] = d1[x + r // 2, y, z]
                else:
                    out[x, y, z] = d2[x - r // 2, y, z]
    return out


def predecessors_by_definition(x: int, y: int, w: int, h: int) -> set:
    return {(a, b) for a in range(w) for b in range(h)
            if b < y or (b == y and a < x)}
