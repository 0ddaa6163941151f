"""Synthetic parametric shape families with analytic signed distance fields.

Each family maps a small interpretable parameter vector to a closed surface
inside [-1, 1]^3 and provides:

  * an analytic SDF oracle (negative inside), vectorized over query points,
  * deterministic design sampling over the parameter bounds,
  * geometric measurement probes that read parameters back off a mesh,
  * a closed-form scalar performance proxy normalized to [0, 1] over bounds.

Three families (rounded_box_car, ellipsoid, tapered_wing) have control points
that are exactly linear in the parameters; twisted_box deliberately breaks
that linearity through its twist angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Extents below never exceed 0.8 at the parameter-bounds maximum, so the
# fixed [-1,1]^3 decode box keeps headroom for extrapolated designs.
_MIN_EXTENT = 1e-3  # clamp for internal half-extents under deep extrapolation


@dataclass(frozen=True)
class FamilySpec:
    family_id: str
    param_names: tuple
    bounds: tuple  # per-parameter (lo, hi), raw units
    linear_flag: bool

    @property
    def param_count(self):
        return len(self.param_names)

    def spans(self):
        b = np.asarray(self.bounds, dtype=np.float64)
        return b[:, 1] - b[:, 0]


@dataclass(frozen=True)
class ShapeInstance:
    family: FamilySpec
    params: np.ndarray  # length d, raw units; out-of-bounds values are legal

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (self.family.param_count,):
            raise ValueError(
                f"params shape {p.shape} does not match family "
                f"{self.family.family_id} (d={self.family.param_count})"
            )
        object.__setattr__(self, "params", p)


FAMILIES = {
    "rounded_box_car": FamilySpec(
        family_id="rounded_box_car",
        param_names=("half_length", "half_width", "half_height", "corner_radius"),
        bounds=((0.45, 0.70), (0.25, 0.45), (0.20, 0.35), (0.02, 0.12)),
        linear_flag=True,
    ),
    "ellipsoid": FamilySpec(
        family_id="ellipsoid",
        param_names=("semi_axis_x", "semi_axis_y", "semi_axis_z"),
        bounds=((0.30, 0.60), (0.30, 0.60), (0.30, 0.60)),
        linear_flag=True,
    ),
    "tapered_wing": FamilySpec(
        family_id="tapered_wing",
        param_names=("root_chord", "tip_chord", "span", "thickness"),
        bounds=((0.50, 0.90), (0.20, 0.50), (0.80, 1.30), (0.06, 0.14)),
        linear_flag=True,
    ),
    "twisted_box": FamilySpec(
        family_id="twisted_box",
        param_names=("half_width_x", "half_width_y", "half_height", "twist"),
        bounds=((0.30, 0.55), (0.30, 0.55), (0.35, 0.60), (-0.60, 0.60)),
        linear_flag=False,
    ),
}


class ConfigurationError(ValueError):
    pass


class MeasurementError(RuntimeError):
    pass


class UnsupportedMeasurementError(ValueError):
    pass


def get_family(family_id):
    try:
        return FAMILIES[family_id]
    except KeyError:
        raise ConfigurationError(f"unknown family_id {family_id!r}") from None


def mean_design(family: FamilySpec) -> ShapeInstance:
    b = np.asarray(family.bounds, dtype=np.float64)
    return ShapeInstance(family, b.mean(axis=1))


def _box2d(qx, qy):
    # exact 2D box distance given component distances to the half extents
    vx = np.maximum(qx, 0.0)
    vy = np.maximum(qy, 0.0)
    return np.hypot(vx, vy) + np.minimum(np.maximum(qx, qy), 0.0)


def _extrude(d_slice, ay, half):
    # exact extrusion of a 2D field over |axis| <= half, with flat caps
    wy = ay - half
    outside = np.hypot(np.maximum(d_slice, 0.0), np.maximum(wy, 0.0))
    return outside + np.minimum(np.maximum(d_slice, wy), 0.0)


def _sdf_rounded_box_car(params, pts):
    hl, hw, hh, r = params
    r = max(r, 0.0)
    # inner extents chosen so the outer extent equals the parameter exactly
    bx = max(hl - r, _MIN_EXTENT)
    by = max(hw - r, _MIN_EXTENT)
    bz = max(hh - r, _MIN_EXTENT)
    q = np.abs(pts) - np.array([bx, by, bz])
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside - r


def _sdf_ellipsoid(params, pts):
    r = np.maximum(np.asarray(params, dtype=np.float64), _MIN_EXTENT)
    k0 = np.linalg.norm(pts / r, axis=-1)
    k1 = np.linalg.norm(pts / (r * r), axis=-1)
    # exact for spheres and on-axis queries; tight bound elsewhere
    with np.errstate(invalid="ignore", divide="ignore"):
        d = k0 * (k0 - 1.0) / k1
    return np.where(k1 > 0.0, d, -r.min())


def _sdf_tapered_wing(params, pts):
    c_root, c_tip, span, thick = params
    half_span = max(span / 2.0, _MIN_EXTENT)
    ay = np.abs(pts[..., 1])
    u = np.clip(ay / half_span, 0.0, 1.0)
    chord = c_root + (c_tip - c_root) * u
    half_chord = np.maximum(chord / 2.0, _MIN_EXTENT)
    half_thick = max(thick / 2.0, _MIN_EXTENT)
    d_slice = _box2d(np.abs(pts[..., 0]) - half_chord, np.abs(pts[..., 2]) - half_thick)
    return _extrude(d_slice, ay, half_span)


def _sdf_twisted_box(params, pts):
    a, b, c, twist = params
    a = max(a, _MIN_EXTENT)
    b = max(b, _MIN_EXTENT)
    c = max(c, _MIN_EXTENT)
    z = pts[..., 2]
    # cross-section rotates linearly with height, +-twist radians at z = +-c
    phi = twist * (z / c)
    cs, sn = np.cos(phi), np.sin(phi)
    x = cs * pts[..., 0] + sn * pts[..., 1]
    y = -sn * pts[..., 0] + cs * pts[..., 1]
    d_slice = _box2d(np.abs(x) - a, np.abs(y) - b)
    return _extrude(d_slice, np.abs(z), c)


_SDFS = {
    "rounded_box_car": _sdf_rounded_box_car,
    "ellipsoid": _sdf_ellipsoid,
    "tapered_wing": _sdf_tapered_wing,
    "twisted_box": _sdf_twisted_box,
}


def analytic_sdf(instance: ShapeInstance, points) -> np.ndarray:
    """Signed distance (negative inside) at one or many query points.

    The field is exact on the surface for every family; away from it the
    ellipsoid, tapered_wing and twisted_box fields are tight distance
    approximations (exact in their symmetric special cases).
    """
    fn = _SDFS.get(instance.family.family_id)
    if fn is None:
        raise ConfigurationError(f"unknown family_id {instance.family.family_id!r}")
    pts = np.asarray(points, dtype=np.float64)
    scalar = pts.ndim == 1
    if scalar:
        pts = pts[None, :]
    out = fn(instance.params, pts)
    return float(out[0]) if scalar else out


def sample_design(family: FamilySpec, rng_seed, mode="full_range", fraction=1.0) -> ShapeInstance:
    """Draw one design uniformly over the bounds, deterministically by seed.

    mode "centered_fraction" shrinks every parameter interval to the centered
    sub-interval of width fraction*(hi - lo).
    """
    if mode == "centered_fraction":
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    elif mode != "full_range":
        raise ConfigurationError(f"unknown sample mode {mode!r}")
    rng = np.random.default_rng(rng_seed)
    b = np.asarray(family.bounds, dtype=np.float64)
    lo, hi = b[:, 0], b[:, 1]
    if mode == "centered_fraction":
        mid = (lo + hi) / 2.0
        half = (hi - lo) * fraction / 2.0
        lo, hi = mid - half, mid + half
    return ShapeInstance(family, rng.uniform(lo, hi))


def control_points(instance: ShapeInstance) -> np.ndarray:
    """Geometric control values defining the surface.

    For the linear families this vector is an affine function of the
    parameters, so affine parameter mixes and affine control-point mixes
    describe the same shape. twisted_box includes trigonometric terms of the
    twist angle and breaks that equivalence by design.
    """
    p = instance.params
    fid = instance.family.family_id
    if fid == "rounded_box_car":
        return p.copy()
    if fid == "ellipsoid":
        return p.copy()
    if fid == "tapered_wing":
        # corner coordinates of the loft: root/tip half-chords, half-span,
        # half-thickness, all linear in p
        return np.array([p[0] / 2.0, p[1] / 2.0, p[2] / 2.0, p[3] / 2.0])
    if fid == "twisted_box":
        # top-face corner position of the rotated section: nonlinear in twist
        a, b, c, twist = p
        return np.array(
            [
                a * np.cos(twist) - b * np.sin(twist),
                a * np.sin(twist) + b * np.cos(twist),
                c,
                twist,
            ]
        )
    raise ConfigurationError(f"unknown family_id {fid!r}")


# Measurement probes read a parameter back off a decoded mesh. Only
# parameters with a reliable axis/slice probe are supported; the rest
# raise UnsupportedMeasurementError.

_SUPPORTED_PROBES = {
    "rounded_box_car": (0, 1, 2),
    "ellipsoid": (0, 1, 2),
    "tapered_wing": (0, 2, 3),
    "twisted_box": (2,),
}


def supported_probes(family: FamilySpec):
    return _SUPPORTED_PROBES[family.family_id]


def measure_param(mesh, family: FamilySpec, param_index) -> float:
    """Measure one parameter from mesh geometry, in raw parameter units."""
    if not 0 <= param_index < family.param_count:
        raise UnsupportedMeasurementError(
            f"param_index {param_index} out of range for {family.family_id}"
        )
    if param_index not in _SUPPORTED_PROBES[family.family_id]:
        name = family.param_names[param_index]
        raise UnsupportedMeasurementError(
            f"no measurement probe for {family.family_id}.{name}"
        )
    v = np.asarray(mesh.vertices, dtype=np.float64)
    if v.size == 0:
        raise MeasurementError("empty mesh")
    fid = family.family_id
    ext = np.abs(v).max(axis=0)
    if fid == "rounded_box_car":
        return float(ext[param_index])
    if fid == "ellipsoid":
        return float(ext[param_index])
    if fid == "twisted_box":
        return float(ext[2])
    # tapered_wing
    if param_index == 2:
        return float(2.0 * ext[1])  # span
    if param_index == 3:
        return float(2.0 * ext[2])  # thickness
    # root chord: widest x extent within a thin slab around the root station
    half_span = ext[1]
    band = np.abs(v[:, 1]) <= max(0.05 * 2.0 * half_span, 1e-6)
    if not band.any():
        raise MeasurementError("no vertices near the root station")
    return float(2.0 * np.abs(v[band, 0]).max())


# Performance proxy: a smooth closed-form stand-in for a drag-like scalar,
# per family the product of the two cross-section parameters, min-max
# normalized to [0, 1] over the parameter bounds.

_PROXY_FACTORS = {
    "rounded_box_car": (1, 2),  # half_width * half_height
    "ellipsoid": (1, 2),  # semi_axis_y * semi_axis_z
    "tapered_wing": (2, 3),  # span * thickness
    "twisted_box": (0, 1),  # half_width_x * half_width_y
}


def proxy_param_indices(family: FamilySpec):
    return _PROXY_FACTORS[family.family_id]


def performance_proxy_raw(instance: ShapeInstance) -> float:
    i, j = _PROXY_FACTORS[instance.family.family_id]
    return float(instance.params[i] * instance.params[j])


def performance_proxy(instance: ShapeInstance) -> float:
    """Normalized frontal-area style proxy, 0 at bounds minimum, 1 at maximum."""
    i, j = _PROXY_FACTORS[instance.family.family_id]
    b = np.asarray(instance.family.bounds, dtype=np.float64)
    lo = b[i, 0] * b[j, 0]
    hi = b[i, 1] * b[j, 1]
    return (performance_proxy_raw(instance) - lo) / (hi - lo)


def proxy_target_params(family: FamilySpec, proxy_value):
    """Invert the normalized proxy back to a raw product of the two factors."""
    i, j = _PROXY_FACTORS[family.family_id]
    b = np.asarray(family.bounds, dtype=np.float64)
    lo = b[i, 0] * b[j, 0]
    hi = b[i, 1] * b[j, 1]
    return lo + proxy_value * (hi - lo)


def families_markdown() -> str:
    """Render the family registry (bounds, probes, proxy formulas) as Markdown."""
    lines = [
        "# Shape families",
        "",
        "All shapes fit inside [-0.8, 0.8]^3 at the parameter-bounds maximum,",
        "so the fixed [-1, 1]^3 decode grid covers large extrapolations.",
        "Signed distances are negative inside. Performance proxies are",
        "min-max normalized to [0, 1] over the bounds.",
        "",
    ]
    proxy_doc = {
        "rounded_box_car": "half_width * half_height (frontal area)",
        "ellipsoid": "semi_axis_y * semi_axis_z (frontal area)",
        "tapered_wing": "span * thickness (planform bulk)",
        "twisted_box": "half_width_x * half_width_y (section area)",
    }
    geometry_doc = {
        "rounded_box_car": (
            "Axis-aligned rounded box. Outer half-extents equal the first "
            "three parameters exactly; corner_radius rounds all edges."
        ),
        "ellipsoid": "Axis-aligned ellipsoid with the given semi-axes.",
        "tapered_wing": (
            "Rectangular-section wing spanning |y| <= span/2; chord tapers "
            "linearly from root_chord at y=0 to tip_chord at the tips."
        ),
        "twisted_box": (
            "Box of half-extents (half_width_x, half_width_y, half_height) "
            "whose cross-section rotates linearly with z, reaching +-twist "
            "radians at z = +-half_height. The twist makes the surface "
            "nonlinear in the parameters."
        ),
    }
    for fid, fam in FAMILIES.items():
        lines.append(f"## {fid}")
        lines.append("")
        lines.append(geometry_doc[fid])
        lines.append("")
        lines.append(f"- linear control points: {'yes' if fam.linear_flag else 'no'}")
        lines.append(f"- performance proxy: {proxy_doc[fid]}")
        lines.append("")
        lines.append("| parameter | bounds | measurement probe |")
        lines.append("|---|---|---|")
        for k, name in enumerate(fam.param_names):
            lo, hi = fam.bounds[k]
            probe = "axis extent" if k in _SUPPORTED_PROBES[fid] else "unsupported"
            if fid == "tapered_wing" and k == 0:
                probe = "root-slab x extent"
            lines.append(f"| {name} | [{lo}, {hi}] | {probe} |")
        lines.append("")
    return "\n".join(lines) + "\n"
