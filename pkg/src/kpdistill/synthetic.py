"""Procedural training and evaluation data.

Shapes are rendered from analytic descriptions, so the warped image of a
homography pair is the same scene function evaluated at inverse-warped pixel
positions and corner labels are exact.  The 3D scene is ray cast against a
ground plane and axis-aligned boxes, giving exact depth for every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraFrame, DepthKind, check_rotation, default_intrinsics, warp_homography
from .model import CELL
from .training import DUSTBIN, HomographyPair

SUPERSAMPLE = (-0.25, 0.25)


class SceneError(ValueError):
    pass


# --------------------------------------------------------------------------
# 2D shapes


@dataclass
class Polygon:
    vertices: np.ndarray  # (k, 2), counter-clockwise in image coordinates
    value: float

    def inside(self, x, y):
        v = self.vertices
        out = np.ones(np.shape(x), dtype=bool)
        for k in range(len(v)):
            (x0, y0), (x1, y1) = v[k], v[(k + 1) % len(v)]
            out &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
        return out

    def corners(self):
        return self.vertices


@dataclass
class Segment:
    p0: np.ndarray
    p1: np.ndarray
    half_width: float
    value: float

    def inside(self, x, y):
        d = self.p1 - self.p0
        t = np.clip(((x - self.p0[0]) * d[0] + (y - self.p0[1]) * d[1]) / (d @ d), 0, 1)
        dx = x - (self.p0[0] + t * d[0])
        dy = y - (self.p0[1] + t * d[1])
        return dx * dx + dy * dy <= self.half_width**2

    def corners(self):
        return np.stack([self.p0, self.p1])


@dataclass
class Ellipse:
    center: np.ndarray
    axes: np.ndarray
    angle: float
    value: float

    def inside(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        return u * u + v * v <= 1

    def corners(self):
        return np.zeros((0, 2))


@dataclass
class Checkerboard:
    origin: np.ndarray
    angle: float
    square: float
    rows: int
    cols: int
    values: tuple[float, float]

    def _local(self, x, y):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dx, dy = x - self.origin[0], y - self.origin[1]
        return (c * dx + s * dy) / self.square, (-s * dx + c * dy) / self.square

    def inside(self, x, y):
        u, v = self._local(x, y)
        return (u >= 0) & (u < self.cols) & (v >= 0) & (v < self.rows)

    def value_at(self, x, y):
        u, v = self._local(x, y)
        parity = (np.floor(u) + np.floor(v)) % 2
        return np.where(parity == 0, self.values[0], self.values[1])

    def corners(self):
        c, s = np.cos(self.angle), np.sin(self.angle)
        j, i = np.meshgrid(np.arange(self.cols + 1), np.arange(self.rows + 1))
        u, v = j.ravel() * self.square, i.ravel() * self.square
        return np.stack([self.origin[0] + c * u - s * v, self.origin[1] + s * u + c * v], axis=1)


@dataclass
class ShapeScene:
    width: int
    height: int
    background: tuple[float, float, float]  # level, x-slope, y-slope
    primitives: list = field(default_factory=list)
    noise: float = 0.02
    seed: int = 0

    def value(self, x, y):
        lvl, gx, gy = self.background
        out = lvl + gx * (x / self.width - 0.5) + gy * (y / self.height - 0.5)
        for p in self.primitives:
            m = p.inside(x, y)
            val = p.value_at(x, y) if isinstance(p, Checkerboard) else p.value
            out = np.where(m, val, out)
        return out

    def keypoints(self) -> np.ndarray:
        """Visible analytic corners: not covered by any later primitive."""
        pts = []
        for k, p in enumerate(self.primitives):
            c = p.corners()
            if len(c) == 0:
                continue
            keep = np.ones(len(c), dtype=bool)
            for later in self.primitives[k + 1 :]:
                for ox in (-1.0, 0.0, 1.0):
                    for oy in (-1.0, 0.0, 1.0):
                        keep &= ~later.inside(c[:, 0] + ox, c[:, 1] + oy)
            pts.append(c[keep])
        return np.concatenate(pts) if pts else np.zeros((0, 2))

    def render(self, h_inv: np.ndarray | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
        """Rasterize with 2x2 supersampling; ``h_inv`` maps output pixels back into scene coordinates."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        acc = np.zeros_like(u)
        for oy in SUPERSAMPLE:
            for ox in SUPERSAMPLE:
                pts = np.stack([(u + ox).ravel(), (v + oy).ravel()], axis=1)
                if h_inv is not None:
                    pts, _ = warp_homography(h_inv, pts)
                acc += self.value(pts[:, 0], pts[:, 1]).reshape(u.shape)
        img = acc / len(SUPERSAMPLE) ** 2
        if rng is not None and self.noise > 0:
            img = img + rng.normal(0, self.noise, img.shape)
        return np.clip(img, 0, 1)


def _contrasting(rng, bg: float) -> float:
    for _ in range(100):
        v = rng.uniform(0, 1)
        if abs(v - bg) >= 0.3:
            return v
    return 1.0 - bg


def random_shape_scene(rng: np.random.Generator, width: int, height: int) -> ShapeScene:
    bg = rng.uniform(0.05, 0.95)
    scene = ShapeScene(width, height, (bg, rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)), seed=int(rng.integers(2**31)))
    size = min(width, height)
    for _ in range(rng.integers(3, 7)):
        kind = rng.choice(["triangle", "quad", "segment", "checker", "ellipse"], p=[0.25, 0.3, 0.15, 0.15, 0.15])
        c = rng.uniform([0.1 * width, 0.1 * height], [0.9 * width, 0.9 * height])
        val = _contrasting(rng, bg)
        if kind in ("triangle", "quad"):
            k = 3 if kind == "triangle" else 4
            for _ in range(20):
                ang = np.sort(rng.uniform(0, 2 * np.pi, k))
                gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
                if gaps.min() > 0.5 and gaps.max() < np.pi - 0.3:
                    break
            r = rng.uniform(0.12, 0.3, k) * size
            verts = np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], axis=1)
            scene.primitives.append(Polygon(verts, val))
        elif kind == "segment":
            d = rng.uniform(0.2, 0.5) * size
            a = rng.uniform(0, np.pi)
            off = 0.5 * d * np.array([np.cos(a), np.sin(a)])
            scene.primitives.append(Segment(c - off, c + off, rng.uniform(0.8, 1.6), val))
        elif kind == "checker":
            sq = rng.uniform(0.08, 0.14) * size
            scene.primitives.append(
                Checkerboard(c - sq, rng.uniform(0, np.pi / 2), sq, int(rng.integers(2, 4)), int(rng.integers(2, 4)), (val, 1.0 - val))
            )
        else:
            ax = rng.uniform(0.06, 0.2, 2) * size
            scene.primitives.append(Ellipse(c, ax, rng.uniform(0, np.pi), val))
    return scene


def points_to_labels(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Per-cell class labels: the in-bounds point nearest the cell center wins; 64 = none."""
    hc, wc = height // CELL, width // CELL
    labels = np.full((hc, wc), DUSTBIN, dtype=np.int64)
    best = np.full((hc, wc), np.inf)
    pix = np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 2) + 0.5)
    for x, y in pix:
        if not (0 <= x < width and 0 <= y < height):
            continue
        x, y = int(x), int(y)
        cy, cx = y // CELL, x // CELL
        d = (x % CELL - 3.5) ** 2 + (y % CELL - 3.5) ** 2
        if d < best[cy, cx]:
            best[cy, cx] = d
            labels[cy, cx] = (y % CELL) * CELL + x % CELL
    return labels


def random_homography(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Rotation <= 15 deg, scale 0.8-1.2, translation <= 10% and mild perspective about the center."""
    cx, cy = width / 2, height / 2
    theta = np.deg2rad(rng.uniform(-15, 15))
    s = rng.uniform(0.8, 1.2)
    tx, ty = rng.uniform(-0.1, 0.1) * width, rng.uniform(-0.1, 0.1) * height
    px, py = rng.uniform(-0.1, 0.1, 2) / np.array([width, height])
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1.0]])
    rs = np.array([[s * np.cos(theta), -s * np.sin(theta), 0], [s * np.sin(theta), s * np.cos(theta), 0], [0, 0, 1.0]])
    persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1.0]])
    h = back @ rs @ persp @ to_origin
    return h / h[2, 2]


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so images survive a PGM round trip unchanged."""
    return np.round(img * 255) / 255


def gen_shape_pair(rng: np.random.Generator, width: int, height: int, identity: bool = False) -> tuple[HomographyPair, np.ndarray]:
    scene = random_shape_scene(rng, width, height)
    h = np.eye(3) if identity else random_homography(rng, width, height)
    corners = scene.keypoints()
    noise_rng = np.random.default_rng(scene.seed)
    img_a = _quantize(scene.render(None, None if identity else noise_rng))
    img_b = img_a.copy() if identity else _quantize(scene.render(np.linalg.inv(h), noise_rng))
    warped, ok = warp_homography(h, corners)
    pair = HomographyPair(
        img_a,
        img_b,
        h,
        points_to_labels(corners, width, height),
        points_to_labels(warped[ok], width, height),
    )
    return pair, corners


def gen_shapes(seed: int, count: int, width: int = 64, height: int = 64, identity: bool = False) -> list[HomographyPair]:
    """Deterministic list of ``count`` labeled homography pairs."""
    if width % CELL or height % CELL:
        raise SceneError(f"image size {width}x{height} must be a multiple of {CELL}")
    rng = np.random.default_rng(seed)
    return [gen_shape_pair(rng, width, height, identity)[0] for _ in range(count)]


# --------------------------------------------------------------------------
# 3D scene


@dataclass
class Box:
    lo: np.ndarray  # (3,) min corner, world units
    hi: np.ndarray
    texture_seed: int = 0


@dataclass
class SceneSpec:
    width: int = 160
    height: int = 120
    boxes: list[Box] = field(default_factory=list)
    rotations: list[np.ndarray] = field(default_factory=list)
    translations: list[np.ndarray] = field(default_factory=list)
    lighting: list[float] = field(default_factory=list)
    depth_kind: DepthKind = DepthKind.RAY_DISTANCE
    texture_seed: int = 0
    checker_size: float = 1.0

    def __post_init__(self):
        if len(self.rotations) != len(self.translations):
            raise SceneError("trajectory needs one translation per rotation")
        if not self.lighting:
            self.lighting = [1.0] * len(self.rotations)
        if len(self.lighting) != len(self.rotations):
            raise SceneError("lighting needs one value per trajectory pose")
        try:
            self.rotations = [check_rotation(r) for r in self.rotations]
        except ValueError as exc:
            raise SceneError(str(exc)) from None
        self.translations = [np.asarray(t, dtype=np.float64).reshape(3) for t in self.translations]
        self.depth_kind = DepthKind(self.depth_kind)
        for t in self.translations:
            for b in self.boxes:
                if np.all(t > b.lo) and np.all(t < b.hi):
                    raise SceneError(f"camera position {t.tolist()} lies inside box {b.lo.tolist()}-{b.hi.tolist()}")


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with the optical axis toward ``target`` and image-down along -up."""
    z = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _hash01(*ints) -> np.ndarray:
    h = np.uint64(1469598103934665603)
    acc = np.zeros(np.broadcast(*ints).shape, dtype=np.uint64) + h
    for v in ints:
        acc = (acc ^ np.asarray(v).astype(np.int64).astype(np.uint64)) * np.uint64(1099511628211)
        acc ^= acc >> np.uint64(29)
    return (acc % np.uint64(1 << 24)).astype(np.float64) / float(1 << 24)


def _texture(p: np.ndarray, surface: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Sparse tiles: each grid cell on a surface may hold one inset square of a random gray."""
    normal_axis = np.where(surface > 0, (surface - 1) % 3, 2)
    axes = np.array([[1, 2], [0, 2], [0, 1]])[normal_axis]
    a = np.take_along_axis(p, axes[:, :1], axis=1)[:, 0]
    b = np.take_along_axis(p, axes[:, 1:], axis=1)[:, 0]
    size = np.where(surface > 0, spec.checker_size * 0.5, spec.checker_size)
    ia, ib = np.floor(a / size), np.floor(b / size)
    fa, fb = a / size - ia, b / size - ib
    seed = np.full(len(p), spec.texture_seed)
    ia, ib = ia.astype(np.int64), ib.astype(np.int64)
    base = 0.35 + 0.2 * _hash01(surface, seed, np.full(len(p), 7))
    present = _hash01(ia, ib, surface, seed) < 0.55
    lo_a = 0.1 + 0.3 * _hash01(ia, ib, surface, seed, 1)
    lo_b = 0.1 + 0.3 * _hash01(ia, ib, surface, seed, 2)
    ext = 0.3 + 0.3 * _hash01(ia, ib, surface, seed, 3)
    inside = present & (fa >= lo_a) & (fa < lo_a + ext) & (fb >= lo_b) & (fb < lo_b + ext)
    tile = _hash01(ia, ib, surface, seed, 4)
    tile = np.where(tile < 0.5, 0.05 + 0.2 * tile, 0.7 + 0.5 * (tile - 0.5))
    return np.where(inside, tile, base)


def raycast(spec: SceneSpec, R: np.ndarray, t: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Intersect pixel rays with the scene.

    Returns (camera-Z, ray distance, world points, surface id); surface 0 is
    the ground plane, ``3 * k + axis + 1`` a face of box ``k``, and -1 a miss.
    """
    K = default_intrinsics(spec.width, spec.height)
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ R.T
    s_best = np.full(len(d), np.inf)
    surf = np.full(len(d), -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -t[2] / d[:, 2]
        hit = (s > 1e-9) & np.isfinite(s)
        s_best[hit] = s[hit]
        surf[hit] = 0
        for k, box in enumerate(spec.boxes):
            t0 = (box.lo - t) / d
            t1 = (box.hi - t) / d
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            t_enter = np.nanmax(tmin, axis=1)
            t_exit = np.nanmin(tmax, axis=1)
            axis = np.nanargmax(tmin, axis=1)
            hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter < s_best)
            s_best[hit] = t_enter[hit]
            surf[hit] = 3 * k + axis[hit] + 1
    world = t + s_best[:, None] * d
    ray = s_best * np.linalg.norm(d, axis=1)
    shape = np.shape(u)
    return s_best.reshape(shape), ray.reshape(shape), world.reshape(shape + (3,)), surf.reshape(shape)


def render_frame(spec: SceneSpec, index: int) -> CameraFrame:
    R, t = spec.rotations[index], spec.translations[index]
    v, u = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    z, ray, _, surf = raycast(spec, R, t, u, v)
    valid = surf >= 0
    depth = np.where(valid, z if spec.depth_kind is DepthKind.PLANAR_Z else ray, 0.0)
    acc = np.zeros(u.shape)
    for oy in SUPERSAMPLE:
        for ox in SUPERSAMPLE:
            _, _, world, s = raycast(spec, R, t, u + ox, v + oy)
            tex = _texture(np.nan_to_num(world.reshape(-1, 3), posinf=0.0, neginf=0.0), s.ravel(), spec).reshape(u.shape)
            acc += np.where(s >= 0, tex, 0.75)
    img = _quantize(np.clip(acc / len(SUPERSAMPLE) ** 2 * spec.lighting[index], 0, 1))
    return CameraFrame(img, depth.astype(np.float32), spec.depth_kind, default_intrinsics(spec.width, spec.height), R, t)


def gen_scene(spec: SceneSpec, out_dir=None) -> list[CameraFrame]:
    """Render every trajectory pose; with ``out_dir`` also write the sequence to disk."""
    frames = [render_frame(spec, i) for i in range(len(spec.rotations))]
    if out_dir is not None:
        from .dataio import write_sequence

        write_sequence(out_dir, frames)
    return frames


def default_scene(
    seed: int = 0,
    frames: int = 6,
    width: int = 160,
    height: int = 120,
    depth_kind: DepthKind | str = DepthKind.RAY_DISTANCE,
    lighting: tuple[float, ...] | None = None,
) -> SceneSpec:
    """Tilted camera flying over a textured ground with a few boxes.

    Passing several lighting levels repeats the same trajectory once per level.
    """
    rng = np.random.default_rng(seed)
    boxes = []
    for k in range(4):
        c = rng.uniform([-3, 2], [4, 7])
        half = rng.uniform(0.4, 0.9, 2)
        hgt = rng.uniform(0.5, 1.5)
        boxes.append(Box(np.array([c[0] - half[0], c[1] - half[1], 0.0]), np.array([c[0] + half[0], c[1] + half[1], hgt]), k))
    rotations, translations = [], []
    for i in range(frames):
        pos = np.array([-0.5 + 0.12 * i, 1.0 + 0.06 * i, 6.0 + 0.04 * i])
        target = np.array([0.4 + 0.08 * i, 4.5, 0.0])
        rotations.append(look_at(pos, target))
        translations.append(pos)
    levels = tuple(lighting) if lighting else (1.0,)
    return SceneSpec(
        width=width,
        height=height,
        boxes=boxes,
        rotations=rotations * len(levels),
        translations=translations * len(levels),
        lighting=[lv for lv in levels for _ in range(frames)],
        depth_kind=DepthKind(depth_kind),
        texture_seed=seed,
    )
