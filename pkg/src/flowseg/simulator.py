"""Synthetic rigid-motion scenes with exact ground-truth flow and masks.

Objects are 2D shapes (disc, rectangle, convex polygon) with procedural
appearance, each carrying one per-step affine map. Frame t membership is
decided by pulling every pixel back through the object's cumulative map and
testing the frame-0 support; depth resolves overlaps (painter's algorithm).
Forward flow at a pixel owned by object k is M_k(p) - p, where M_k is the
camera-composed per-step map, and backward flow uses the exact inverse map,
so the flow fields are analytic rather than estimated.

Ground-truth masks label only objects whose own motion differs from the
no-motion point; static objects are scenery and keep the background label,
matching what a motion-based objective can possibly discover.

Flow rasters are quantized to float32 at generation time so that the on-disk
format (see write_sequence) round-trips bit-exactly.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .core import FlowField, HardMaskStack, lattice
from .errors import FormatError, GenerationError
from .motion import DEFAULT_AFFINE_COV, NO_MOTION_AFFINE

FORMAT_VERSION = 1
NOISE_STREAM = 1
MAX_PLACE_TRIES = 60
MAX_THETA_TRIES = 100
MAX_STATIC_TRIES = 100


@dataclass
class ObjectSpec:
    """One scene object: frame-0 support, appearance, per-step motion, depth."""

    kind: str
    center: np.ndarray
    radius: float
    half_extents: tuple = None
    vertices: np.ndarray = None
    appearance: dict = None
    theta: np.ndarray = None
    depth: int = 0
    moving: bool = False
    label: int = 0


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int = 2
    seed: int = 0
    objects: tuple = (3, 6)
    p_static: float = 0.5
    camera_motion: bool = False
    camera_theta: np.ndarray = None
    theta_style: str = "raw"
    theta_cov: np.ndarray = None
    scenario_mixture: bool = False
    perspective_violation: float = 0.0
    flow_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise GenerationError("lattice must be at least 4x4")
        if self.frames < 2:
            raise GenerationError("a sequence needs at least 2 frames")
        lo, hi = self.objects
        if not (1 <= lo <= hi <= 10):
            raise GenerationError("object count range must satisfy 1 <= lo <= hi <= 10")
        if not (0.0 <= self.p_static <= 1.0):
            raise GenerationError("p_static must be in [0, 1]")
        if self.theta_style not in ("raw", "about_center"):
            raise GenerationError("theta_style must be 'raw' or 'about_center'")


@dataclass
class SequenceRecord:
    """In-memory sequence: images are (H, W, 3) uint8; masks label background 0."""

    images: list
    forward_flows: list
    backward_flows: list
    gt_masks: list
    manifest: dict
    scene: dict = field(default=None, repr=False, compare=False)


def _theta_to_map(theta):
    a = np.array([[theta[0], theta[1]], [theta[3], theta[4]]])
    b = np.array([theta[2], theta[5]])
    return a, b


def _compose(m2, m1):
    a2, b2 = m2
    a1, b1 = m1
    return a2 @ a1, a2 @ b1 + b2


def _invert(m):
    a, b = m
    inv = np.linalg.inv(a)
    return inv, -inv @ b


def _apply_map(m, px, py):
    a, b = m
    return (
        a[0, 0] * px + a[0, 1] * py + b[0],
        a[1, 0] * px + a[1, 1] * py + b[1],
    )


_IDENTITY = (np.eye(2), np.zeros(2))


def _sample_shape(rng, spec):
    r = rng.uniform(0.10, 0.18) * min(spec.height, spec.width)
    kind = ("disc", "rectangle", "polygon")[rng.integers(3)]
    margin = r + 1.0
    cx = rng.uniform(margin, spec.width - 1 - margin)
    cy = rng.uniform(margin, spec.height - 1 - margin)
    center = np.array([cx, cy])
    if kind == "disc":
        return ObjectSpec("disc", center, r)
    if kind == "rectangle":
        hx = r / np.sqrt(2.0) * rng.uniform(0.8, 1.2)
        hy = r / np.sqrt(2.0) * rng.uniform(0.8, 1.2)
        return ObjectSpec("rectangle", center, float(np.hypot(hx, hy)), half_extents=(hx, hy))
    ang = rng.uniform(0.0, 2.0 * np.pi, size=8)
    rad = r * np.sqrt(rng.uniform(0.3, 1.0, size=8))
    pts = center + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    hull = ConvexHull(pts)
    verts = pts[hull.vertices]
    radius = float(np.max(np.hypot(*(verts - center).T)))
    return ObjectSpec("polygon", center, radius, vertices=verts)


def _sample_appearance(rng):
    style = ("flat", "checker", "noise")[rng.integers(3)]
    color = rng.uniform(0.15, 0.95, size=3)
    if style == "flat":
        return {"style": "flat", "color": color}
    if style == "checker":
        return {
            "style": "checker",
            "color": color,
            "color2": rng.uniform(0.15, 0.95, size=3),
            "period": float(rng.uniform(3.0, 8.0)),
        }
    return {
        "style": "noise",
        "color": color,
        "amplitude": float(rng.uniform(0.2, 0.5)),
        "table": rng.uniform(-1.0, 1.0, size=(16, 16)),
    }


def _support(obj, qx, qy):
    if obj.kind == "disc":
        dx, dy = qx - obj.center[0], qy - obj.center[1]
        return dx * dx + dy * dy <= obj.radius * obj.radius
    if obj.kind == "rectangle":
        hx, hy = obj.half_extents
        return (np.abs(qx - obj.center[0]) <= hx) & (np.abs(qy - obj.center[1]) <= hy)
    verts = obj.vertices
    inside = np.ones(qx.shape, dtype=bool)
    m = len(verts)
    for i in range(m):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % m]
        cross = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        inside &= cross >= 0.0
    return inside


def _paint(app, qx, qy):
    base = app["color"][:, None]
    if app["style"] == "flat":
        return np.broadcast_to(base, (3, qx.size)).copy()
    if app["style"] == "checker":
        parity = (
            np.floor(qx / app["period"]).astype(np.int64)
            + np.floor(qy / app["period"]).astype(np.int64)
        ) % 2
        other = app["color2"][:, None]
        return np.where(parity[None, :] == 0, base, other)
    table = app["table"]
    gi = np.floor(qy).astype(np.int64) % table.shape[0]
    gj = np.floor(qx).astype(np.int64) % table.shape[1]
    mod = 1.0 + app["amplitude"] * table[gi, gj]
    return np.clip(base * mod[None, :], 0.0, 1.0)


def _polygon_ccw(verts):
    area = 0.0
    m = len(verts)
    for i in range(m):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % m]
        area += ax * by - bx * ay
    return verts if area >= 0 else verts[::-1]


def _support_probes(obj):
    """Center plus bounding-box corners, for displacement bound checks."""
    c, r = obj.center, obj.radius
    offs = np.array([[0, 0], [-r, -r], [-r, r], [r, -r], [r, r]])
    return c + offs


def _sample_theta(rng, spec, obj, diag_half):
    cov = spec.theta_cov if spec.theta_cov is not None else DEFAULT_AFFINE_COV
    chol = np.linalg.cholesky(cov)
    for _ in range(MAX_THETA_TRIES):
        if spec.theta_style == "about_center":
            angle = rng.normal(0.0, 0.35)
            angle = np.sign(angle) * np.clip(np.abs(angle), 0.15, 0.8)
            shift = rng.normal(0.0, 1.5, size=2)
            ca, sa = np.cos(angle), np.sin(angle)
            rot = np.array([[ca, -sa], [sa, ca]])
            trans = obj.center - rot @ obj.center + shift
            theta = np.array([ca, -sa, trans[0], sa, ca, trans[1]])
        else:
            theta = NO_MOTION_AFFINE + chol @ rng.standard_normal(6)
        m = _theta_to_map(theta)
        probes = _support_probes(obj)
        px, py = _apply_map(m, probes[:, 0], probes[:, 1])
        disp = np.hypot(px - probes[:, 0], py - probes[:, 1])
        if disp.max() <= diag_half and disp.max() >= 1.0:
            return theta
    raise GenerationError("could not sample an admissible motion for an object")


def _place_objects(rng, spec):
    count = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    placed = []
    for _ in range(count):
        obj = None
        for attempt in range(MAX_PLACE_TRIES):
            cand = _sample_shape(rng, spec)
            relaxed = attempt >= MAX_PLACE_TRIES - 20
            ok = True
            if not relaxed:
                for other in placed:
                    gap = np.hypot(*(cand.center - other.center))
                    if gap < 0.8 * (cand.radius + other.radius):
                        ok = False
                        break
            if ok:
                obj = cand
                break
        if obj is None:
            raise GenerationError("object placement failed after bounded retries")
        if obj.kind == "polygon":
            obj.vertices = _polygon_ccw(obj.vertices)
        obj.appearance = _sample_appearance(rng)
        placed.append(obj)
    depths = rng.permutation(count)
    for obj, depth in zip(placed, depths):
        obj.depth = int(depth)
    return placed


def _draw_moving_set(rng, spec, count):
    if spec.scenario_mixture:
        scenario = int(rng.integers(3))
        if scenario == 0 or count == 1:
            picks = rng.choice(count, size=1, replace=False)
        elif scenario == 1:
            picks = rng.choice(count, size=min(2, count), replace=False)
        else:
            picks = np.arange(count)
        moving = np.zeros(count, dtype=bool)
        moving[picks] = True
        return moving
    for _ in range(MAX_STATIC_TRIES):
        moving = rng.random(count) >= spec.p_static
        if moving.any() or spec.p_static >= 1.0:
            return moving
    raise GenerationError("could not draw a moving object (p_static too high)")


def _camera_map(rng, spec):
    if spec.camera_theta is not None:
        return _theta_to_map(np.asarray(spec.camera_theta, dtype=np.float64))
    if spec.camera_motion:
        theta = NO_MOTION_AFFINE.copy()
        theta[2], theta[5] = rng.normal(0.0, 1.0, size=2)
        return _theta_to_map(theta)
    return _IDENTITY


def _background_appearance(rng):
    shade = rng.uniform(0.05, 0.25)
    return {
        "style": "checker",
        "color": np.full(3, shade),
        "color2": np.full(3, shade + rng.uniform(0.02, 0.08)),
        "period": float(rng.uniform(8.0, 16.0)),
    }


def generate_sequence(spec):
    """Render a full sequence with frames, exact flows, and gt masks."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0)))
    lat = lattice(spec.height, spec.width)
    diag_half = 0.5 * np.hypot(spec.width, spec.height)

    objects = _place_objects(rng, spec)
    camera = _camera_map(rng, spec)
    moving = _draw_moving_set(rng, spec, len(objects))
    label = 1
    for obj, is_moving in zip(objects, moving):
        obj.moving = bool(is_moving)
        if obj.moving:
            obj.theta = _sample_theta(rng, spec, obj, diag_half)
            obj.label = label
            label += 1
        else:
            obj.theta = NO_MOTION_AFFINE.copy()
            obj.label = 0
    background = _background_appearance(rng)
    k_true = label

    # Per-step camera-composed maps and their inverses are constant in time.
    step_maps = [_compose(camera, _theta_to_map(obj.theta)) for obj in objects]
    step_invs = [_invert(m) for m in step_maps]
    camera_inv = _invert(camera)

    order = sorted(range(len(objects)), key=lambda i: objects[i].depth)
    cum_inv = [_IDENTITY for _ in objects]
    cam_cum_inv = _IDENTITY

    images, masks, owners, centers = [], [], [], []
    for _ in range(spec.frames):
        owner = np.full(lat.n, -1, dtype=np.int64)
        frame = np.empty((3, lat.n))
        bx, by = _apply_map(cam_cum_inv, lat.x, lat.y)
        frame[:] = _paint(background, bx, by)
        frame_centers = []
        for i in order:
            qx, qy = _apply_map(cum_inv[i], lat.x, lat.y)
            inside = _support(objects[i], qx, qy)
            if inside.any():
                frame[:, inside] = _paint(objects[i].appearance, qx[inside], qy[inside])
            owner[inside] = i
        for i, obj in enumerate(objects):
            fwd = _invert(cum_inv[i])
            frame_centers.append(np.array(_apply_map(fwd, *obj.center)))
        labels = np.zeros(lat.n, dtype=np.int64)
        fg = owner >= 0
        labels[fg] = np.array([o.label for o in objects])[owner[fg]]
        img8 = np.clip(np.round(frame.T.reshape(spec.height, spec.width, 3) * 255.0), 0, 255).astype(np.uint8)
        images.append(img8)
        masks.append(HardMaskStack(labels, k=k_true))
        owners.append(owner)
        centers.append(frame_centers)
        cum_inv = [_compose(ci, si) for ci, si in zip(cum_inv, step_invs)]
        cam_cum_inv = _compose(cam_cum_inv, camera_inv)

    forward_flows, backward_flows = [], []
    for t in range(spec.frames - 1):
        fu, fv = _flow_from_maps(lat, owners[t], step_maps, camera)
        if spec.perspective_violation > 0.0:
            _add_quadratic_term(
                fu, fv, lat, owners[t], objects, centers[t], spec.perspective_violation, +1.0
            )
        forward_flows.append((fu, fv))
        bu, bv = _flow_from_maps(lat, owners[t + 1], step_invs, camera_inv)
        if spec.perspective_violation > 0.0:
            _add_quadratic_term(
                bu, bv, lat, owners[t + 1], objects, centers[t + 1], spec.perspective_violation, -1.0
            )
        backward_flows.append((bu, bv))

    if spec.flow_noise_sigma > 0.0:
        noise_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, NOISE_STREAM)))
        forward_flows = [
            (u + noise_rng.normal(0.0, spec.flow_noise_sigma, lat.n),
             v + noise_rng.normal(0.0, spec.flow_noise_sigma, lat.n))
            for u, v in forward_flows
        ]
        backward_flows = [
            (u + noise_rng.normal(0.0, spec.flow_noise_sigma, lat.n),
             v + noise_rng.normal(0.0, spec.flow_noise_sigma, lat.n))
            for u, v in backward_flows
        ]

    def _quantize(pairs):
        return [
            FlowField(
                u.astype(np.float32).astype(np.float64),
                v.astype(np.float32).astype(np.float64),
                lat,
            )
            for u, v in pairs
        ]

    manifest = {
        "version": FORMAT_VERSION,
        "width": spec.width,
        "height": spec.height,
        "frames": spec.frames,
        "k_true": k_true,
        "seed": int(spec.seed),
        "flow_noise_sigma": float(spec.flow_noise_sigma),
    }
    scene = {
        "objects": objects,
        "step_maps": step_maps,
        "step_invs": step_invs,
        "camera": camera,
        "owners": owners,
        "lattice": lat,
    }
    return SequenceRecord(
        images, _quantize(forward_flows), _quantize(backward_flows), masks, manifest, scene
    )


def _flow_from_maps(lat, owner, maps, background_map):
    px, py = _apply_map(background_map, lat.x, lat.y)
    fu, fv = px - lat.x, py - lat.y
    for i, m in enumerate(maps):
        pix = owner == i
        if pix.any():
            mx, my = _apply_map(m, lat.x[pix], lat.y[pix])
            fu[pix] = mx - lat.x[pix]
            fv[pix] = my - lat.y[pix]
    return fu, fv


def _add_quadratic_term(fu, fv, lat, owner, objects, frame_centers, scale, sign):
    """Per-object quadratic flow component violating the affine family."""
    for i, obj in enumerate(objects):
        if not obj.moving:
            continue
        pix = owner == i
        if not pix.any():
            continue
        cx, cy = frame_centers[i]
        xh = (lat.x[pix] - cx) / obj.radius
        yh = (lat.y[pix] - cy) / obj.radius
        fu[pix] += sign * scale * (xh * xh - yh * yh)
        fv[pix] += sign * scale * (2.0 * xh * yh)


def add_flow_noise(flow, sigma, rng):
    """Independent Gaussian noise per flow component; sigma = 0 is identity."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return flow
    lat = flow.lattice
    return FlowField(
        flow.u + rng.normal(0.0, sigma, lat.n),
        flow.v + rng.normal(0.0, sigma, lat.n),
        lat,
    )


def write_sequence(record, out_dir):
    """Write the little-endian raster format; see read_sequence for layout."""
    os.makedirs(out_dir, exist_ok=True)
    man = record.manifest
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    h, w = man["height"], man["width"]
    for i, img in enumerate(record.images):
        img.astype(np.uint8).tofile(os.path.join(out_dir, "frame_%04d.bin" % i))
    for name, flows in (("flow", record.forward_flows), ("bflow", record.backward_flows)):
        for i, fl in enumerate(flows):
            planes = np.empty((2, h * w), dtype="<f4")
            planes[0] = fl.u
            planes[1] = fl.v
            planes.tofile(os.path.join(out_dir, "%s_%04d.bin" % (name, i)))
    for i, mask in enumerate(record.gt_masks):
        labels = mask.labels
        if labels.max(initial=0) > 255:
            raise FormatError("mask_%04d.bin: labels exceed uint8 range" % i)
        labels.astype(np.uint8).tofile(os.path.join(out_dir, "mask_%04d.bin" % i))


def _read_exact(path, count, dtype):
    name = os.path.basename(path)
    if not os.path.exists(path):
        raise FormatError("%s: missing file" % name)
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise FormatError(
            "%s: expected %d values of %s, found %d" % (name, count, dtype, data.size)
        )
    return data


def read_sequence(seq_dir):
    """Read a sequence directory written by write_sequence (bit-exact)."""
    man_path = os.path.join(seq_dir, "manifest.json")
    if not os.path.exists(man_path):
        raise FormatError("manifest.json: missing file")
    try:
        with open(man_path) as fh:
            man = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError("manifest.json: invalid JSON (%s)" % exc) from None
    required = ("version", "width", "height", "frames", "k_true", "seed", "flow_noise_sigma")
    for key in required:
        if key not in man:
            raise FormatError("manifest.json: missing key '%s'" % key)
    if man["version"] != FORMAT_VERSION:
        raise FormatError("manifest.json: unsupported version %r" % (man["version"],))
    h, w, t = man["height"], man["width"], man["frames"]
    if h < 1 or w < 1 or t < 2:
        raise FormatError("manifest.json: invalid dimensions")
    lat = lattice(h, w)
    images, masks = [], []
    for i in range(t):
        raw = _read_exact(os.path.join(seq_dir, "frame_%04d.bin" % i), h * w * 3, np.uint8)
        images.append(raw.reshape(h, w, 3))
        lab = _read_exact(os.path.join(seq_dir, "mask_%04d.bin" % i), h * w, np.uint8)
        if lab.max(initial=0) >= man["k_true"]:
            raise FormatError("mask_%04d.bin: label exceeds manifest k_true" % i)
        masks.append(HardMaskStack(lab.astype(np.int64), k=man["k_true"]))
    forward, backward = [], []
    for name, dest in (("flow", forward), ("bflow", backward)):
        for i in range(t - 1):
            raw = _read_exact(os.path.join(seq_dir, "%s_%04d.bin" % (name, i)), 2 * h * w, "<f4")
            planes = raw.reshape(2, h * w).astype(np.float64)
            dest.append(FlowField(planes[0], planes[1], lat))
    return SequenceRecord(images, forward, backward, masks, man)
