"""Synthetic paired image/point-cloud scenes with a controllable domain shift.

Scenes are ray cast from a pinhole camera: a ground plane plus a handful
of boxes, spheres and vertical cylinders, one shape family per class.
Every point is the first hit of the ray through a pixel centre, so a
point's label is by construction the class rendered at its pixel.

Coordinates are in the camera frame (x right, y down, z forward) and in
"scene units"; the default layout is roughly half a unit deep.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import Camera, project_points
from .numcore import seeded_rng

FORMAT_MAGIC = b"MX2M"
FORMAT_VERSION = 1

GROUND = 0
SHAPES = ("box", "sphere", "cylinder")

# base albedo per class in the source domain; ground first
_PALETTE = np.array([
    [0.45, 0.42, 0.38],
    [0.80, 0.25, 0.20],
    [0.25, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.75, 0.20],
    [0.70, 0.30, 0.75],
    [0.20, 0.75, 0.75],
    [0.90, 0.55, 0.25],
])
_REFLECTANCE = np.array([0.20, 0.45, 0.55, 0.75, 0.35, 0.65, 0.50, 0.30])
_SKY = np.array([0.70, 0.80, 0.92])
_LIGHT = np.array([-0.4, -1.0, -0.3]) / np.linalg.norm([-0.4, -1.0, -0.3])  # towards the light


class GenerationError(RuntimeError):
    pass


class DatasetIOError(IOError):
    pass


class TruncationError(DatasetIOError):
    pass


class ChecksumError(DatasetIOError):
    pass


class VersionError(DatasetIOError):
    pass


@dataclass
class Scene:
    image: np.ndarray           # (H, W, 3), values in [0, 1]
    points: np.ndarray          # (N, 3)
    point_features: np.ndarray  # (N, 1) intensity proxy
    labels: np.ndarray          # (N,) int64
    camera: Camera
    domain: str = "source"

    @property
    def n_points(self):
        return len(self.points)


@dataclass(frozen=True)
class LayoutParams:
    height: int = 64
    width: int = 64
    n_points: int = 256
    n_classes: int = 4
    focal: float = 56.0
    ground_height: tuple = (0.12, 0.16)
    depth: tuple = (0.32, 0.62)
    max_depth: float = 0.85
    objects_per_class: tuple = (1, 2)
    size: tuple = (0.035, 0.06)
    color_jitter: float = 0.06
    texture_noise: float = 0.03
    intensity_noise: float = 0.08
    class_weights: tuple | None = None
    max_retries: int = 50

    def camera(self):
        return Camera(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                      self.width, self.height)


@dataclass(frozen=True)
class ShiftParams:
    brightness_delta: float = 0.0
    hue_rotation: float = 0.0       # degrees about the grey axis
    point_noise_sigma: float = 0.0
    point_dropout: float = 0.0
    class_prior_skew: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.point_dropout < 1:
            raise ValueError("point_dropout must lie in [0, 1)")
        if self.point_noise_sigma < 0:
            raise ValueError("point_noise_sigma must be non-negative")


@dataclass
class SceneDataset:
    scenes: list
    n_classes: int
    domain: str = "source"
    seed: int = 0
    norm_mean: tuple = (0.0, 0.0, 0.0)
    norm_std: tuple = (1.0, 1.0, 1.0)
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    @property
    def camera(self):
        return self.scenes[0].camera


# ------------------------------------------------------------------ ray casting

def _ray_dirs(camera: Camera):
    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    d = np.stack([(cols - camera.cx) / camera.fx, (rows - camera.cy) / camera.fy,
                  np.ones(cols.shape)], axis=-1)
    return d.reshape(-1, 3)


def _hit_ground(d, g):
    t = np.full(len(d), np.inf)
    down = d[:, 1] > 1e-9
    t[down] = g / d[down, 1]
    n = np.tile([0.0, -1.0, 0.0], (len(d), 1))
    return t, n


def _hit_sphere(d, c, r):
    # |t d - c|^2 = r^2
    a = (d * d).sum(1)
    b = -2 * (d @ c)
    k = c @ c - r * r
    disc = b * b - 4 * a * k
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    t0 = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    t[ok] = np.where(t0 > 1e-9, t0, np.inf)
    n = np.where(np.isfinite(t), t, 0.0)[:, None] * d - c
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return t, n


def _hit_box(d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = lo * inv
        t2 = hi * inv
    tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
    t_near = tmin.max(1)
    t_far = tmax.min(1)
    ok = (t_near <= t_far) & (t_near > 1e-9)
    t = np.where(ok, t_near, np.inf)
    axis = tmin.argmax(1)
    n = np.zeros_like(d)
    n[np.arange(len(d)), axis] = -np.sign(d[np.arange(len(d)), axis])
    return t, n


def _hit_cylinder(d, base, r, h):
    # vertical axis through (base.x, ., base.z); spans y in [base.y - h, base.y]
    cx, cy, cz = base
    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = -2 * (d[:, 0] * cx + d[:, 2] * cz)
    k = cx * cx + cz * cz - r * r
    disc = b * b - 4 * a * k
    t = np.full(len(d), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    t_side = np.full(len(d), np.inf)
    t_side[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    y = t_side * d[:, 1]
    side = np.isfinite(t_side) & (t_side > 1e-9) & (y >= cy - h) & (y <= cy)
    t[side] = t_side[side]
    tf = np.where(np.isfinite(t), t, 0.0)
    n = np.stack([tf * d[:, 0] - cx, np.zeros(len(d)), tf * d[:, 2] - cz], 1)
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (cy - h) / d[:, 1]
    px, pz = t_cap * d[:, 0] - cx, t_cap * d[:, 2] - cz
    cap = (t_cap > 1e-9) & (px * px + pz * pz <= r * r) & (t_cap < t)
    t[cap] = t_cap[cap]
    n[cap] = [0.0, -1.0, 0.0]
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    return t, n


def _cast(d, ground_y, objects):
    t, n = _hit_ground(d, ground_y)
    obj_id = np.full(len(d), -1)
    for j, ob in enumerate(objects):
        if ob["shape"] == "sphere":
            tj, nj = _hit_sphere(d, ob["center"], ob["radius"])
        elif ob["shape"] == "box":
            tj, nj = _hit_box(d, ob["lo"], ob["hi"])
        else:
            tj, nj = _hit_cylinder(d, ob["center"], ob["radius"], ob["height"])
        closer = tj < t
        t = np.where(closer, tj, t)
        n = np.where(closer[:, None], nj, n)
        obj_id = np.where(closer, j, obj_id)
    return t, n, obj_id


def _place_object(rng, cls, ground_y, lay: LayoutParams, camera: Camera):
    shape = SHAPES[(cls - 1) % len(SHAPES)]
    s = rng.uniform(*lay.size)
    z = rng.uniform(*lay.depth)
    half_w = (camera.width / 2 - 4) * z / camera.fx
    if half_w <= s:
        return None   # too wide to fit in the frustum at this depth
    x = rng.uniform(-half_w + s, half_w - s)
    if shape == "sphere":
        return {"shape": shape, "cls": cls, "center": np.array([x, ground_y - s, z]), "radius": s}
    if shape == "box":
        hx, hz = s, s * rng.uniform(0.7, 1.3)
        hgt = 2 * s * rng.uniform(0.6, 1.0)
        return {"shape": shape, "cls": cls,
                "lo": np.array([x - hx, ground_y - hgt, z - hz]),
                "hi": np.array([x + hx, ground_y, z + hz])}
    r = 0.45 * s
    return {"shape": shape, "cls": cls, "center": np.array([x, ground_y, z]),
            "radius": r, "height": 3.0 * s * rng.uniform(0.8, 1.2)}


def generate_scene(rng, layout: LayoutParams | None = None) -> Scene:
    """Ray-cast one labeled source-domain scene.

    Each object class gets ``objects_per_class`` instances (at least one),
    placed on the ground inside the frustum. Layouts where some class ends up
    with no visible pixel are re-drawn up to ``max_retries`` times.
    """
    lay = layout or LayoutParams()
    C, N = lay.n_classes, lay.n_points
    if C < 2 or N < 16:
        raise ValueError("need at least 2 classes and 16 points")
    camera = lay.camera()
    d = _ray_dirs(camera)
    weights = None
    if lay.class_weights is not None:
        w = np.asarray(lay.class_weights[1:C], dtype=np.float64)
        weights = w / w.sum()

    for _ in range(lay.max_retries):
        ground_y = rng.uniform(*lay.ground_height)
        lo, hi = lay.objects_per_class
        classes = list(range(1, C))
        extra = rng.integers(lo, hi + 1, size=C - 1).sum() - (C - 1)
        if extra > 0:
            classes += list(rng.choice(np.arange(1, C), size=extra, p=weights))
        objects = [_place_object(rng, c, ground_y, lay, camera) for c in classes]
        if any(ob is None for ob in objects):
            continue
        t, n, obj_id = _cast(d, ground_y, objects)
        hit = np.isfinite(t) & (t <= lay.max_depth)
        # keep pixel-centre rays strictly inside the image under round-off
        hit &= (np.arange(len(d)) % camera.width > 0) & (np.arange(len(d)) >= camera.width)
        pix_cls = np.where(obj_id >= 0, np.array([o["cls"] for o in objects] + [0])[obj_id], GROUND)
        visible = set(np.unique(pix_cls[hit]).tolist())
        if visible >= set(range(C)) and hit.sum() >= N:
            break
    else:
        raise GenerationError(f"could not place {C - 1} visible object classes in {lay.max_retries} tries")

    # shading
    albedo = np.empty((len(d), 3))
    albedo[:] = _PALETTE[GROUND % len(_PALETTE)]
    for j, ob in enumerate(objects):
        tint = _PALETTE[ob["cls"] % len(_PALETTE)] + rng.normal(0, lay.color_jitter, 3)
        albedo[obj_id == j] = tint
    lambert = np.clip(n @ _LIGHT, 0, 1)
    color = albedo * (0.45 + 0.55 * lambert[:, None])
    color += rng.normal(0, lay.texture_noise, color.shape)
    color = np.where(hit[:, None], color, _SKY)
    image = np.clip(color, 0, 1).reshape(camera.height, camera.width, 3)

    # points: pixel-centre rays, class-balanced sampling over hit pixels
    cand = np.flatnonzero(hit)
    counts = np.bincount(pix_cls[cand], minlength=C).astype(np.float64)
    p = 1.0 / np.sqrt(counts[pix_cls[cand]])
    chosen = np.sort(rng.choice(cand, size=N, replace=False, p=p / p.sum()))
    points = t[chosen, None] * d[chosen]
    labels = pix_cls[chosen].astype(np.int64)
    refl = _REFLECTANCE[labels % len(_REFLECTANCE)]
    unit = d[chosen] / np.linalg.norm(d[chosen], axis=1, keepdims=True)
    grazing = np.abs((n[chosen] * unit).sum(1))
    intensity = refl * (0.6 + 0.4 * grazing) + rng.normal(0, lay.intensity_noise, N)
    return Scene(image, points, intensity[:, None], labels, camera, "source")


def generate_scenes(seed, count, layout: LayoutParams | None = None, split=0):
    """``count`` scenes, scene i drawn from its own substream of ``(seed, split)``."""
    return [generate_scene(seeded_rng(seed, split, i), layout) for i in range(count)]


# ---------------------------------------------------------------- domain shift

def _hue_matrix(degrees):
    th = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def apply_shift(scene: Scene, shift: ShiftParams, rng) -> Scene:
    """Return the target-domain variant of a source scene.

    Colour: rotate hue about the grey axis, add brightness, clamp to [0, 1].
    Geometry: Gaussian jitter on coordinates, then Bernoulli point dropout
    (scaled per class by ``class_prior_skew``). Points that no longer project
    inside the image are dropped as well.
    """
    if scene.domain != "source":
        raise ValueError("apply_shift expects a source-domain scene")
    image = scene.image
    if shift.hue_rotation:
        image = np.clip(image @ _hue_matrix(shift.hue_rotation).T, 0, 1)
    if shift.brightness_delta:
        image = np.clip(image + shift.brightness_delta, 0, 1)

    points = scene.points
    if shift.point_noise_sigma > 0:
        points = points + rng.normal(0, shift.point_noise_sigma, points.shape)

    keep_p = np.full(scene.n_points, 1.0 - shift.point_dropout)
    skew = np.asarray(shift.class_prior_skew if shift.class_prior_skew is not None else [], dtype=np.float64)
    if skew.size and skew.max() > 0:
        keep_p *= (skew / skew.max())[scene.labels]
    keep = np.ones(scene.n_points, dtype=bool)
    if np.any(keep_p < 1):
        keep = rng.random(scene.n_points) < keep_p
    if shift.point_noise_sigma > 0:
        keep &= project_points(points, scene.camera).valid
    if not keep.any():
        keep[np.argmax(keep_p)] = True
    return Scene(image.copy() if image is scene.image else image, points[keep].copy(),
                 scene.point_features[keep].copy(), scene.labels[keep].copy(), scene.camera, "target")


# -------------------------------------------------------------- normalization

def channel_stats(scenes):
    """Per-channel mean and std over all pixels of ``scenes``."""
    stack = np.stack([s.image for s in scenes]).reshape(-1, 3)
    return tuple(stack.mean(0).tolist()), tuple(np.maximum(stack.std(0), 1e-6).tolist())


def normalize_image(image, mean, std):
    return (image - np.asarray(mean)) / np.asarray(std)


# ----------------------------------------------------------------- file format

def write_dataset(path, dataset: SceneDataset):
    """Serialize to the versioned little-endian binary container."""
    scenes = dataset.scenes
    if not scenes:
        raise ValueError("refusing to write an empty dataset")
    cam = scenes[0].camera
    header = {
        "version": FORMAT_VERSION, "height": cam.height, "width": cam.width,
        "n_points": int(max(s.n_points for s in scenes)), "n_classes": dataset.n_classes,
        "camera": cam.as_dict(), "domain": dataset.domain, "seed": dataset.seed,
        "n_scenes": len(scenes), "norm_mean": list(dataset.norm_mean),
        "norm_std": list(dataset.norm_std), "extra": dataset.extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [FORMAT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for s in scenes:
        if s.camera != cam:
            raise ValueError("all scenes in a dataset must share one camera")
        parts.append(struct.pack("<I", s.n_points))
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.points, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.point_features, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"{self.path}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, count, dtype, shape, what):
        raw = self.take(count * 8, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:])


def read_dataset(path) -> SceneDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(4, "magic") != FORMAT_MAGIC:
        raise DatasetIOError(f"{path}: not an MX2M dataset (bad magic)")
    version, hlen = struct.unpack("<II", r.take(8, "version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: file version {version}, reader supports version {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetIOError(f"{path}: corrupt header: {exc}") from None
    cam = Camera(**header["camera"])
    H, W = header["height"], header["width"]
    scenes = []
    for i in range(header["n_scenes"]):
        (n,) = struct.unpack("<I", r.take(4, f"scene {i} size"))
        image = r.array(H * W * 3, "<f8", (H, W, 3), f"scene {i} image")
        points = r.array(n * 3, "<f8", (n, 3), f"scene {i} points")
        feats = r.array(n, "<f8", (n, 1), f"scene {i} features")
        labels = r.array(n, "<i8", (n,), f"scene {i} labels")
        scenes.append(Scene(image, points, feats, labels, cam, header["domain"]))
    body_end = r.pos
    (crc,) = struct.unpack("<I", r.take(4, "checksum"))
    if r.pos != len(buf):
        raise DatasetIOError(f"{path}: {len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    return SceneDataset(scenes, header["n_classes"], header["domain"], header["seed"],
                        tuple(header["norm_mean"]), tuple(header["norm_std"]), header.get("extra", {}))


def make_benchmark(seed=0, n_source=64, n_target=64, n_val=32, layout=None, shift=None):
    """Source/target-train/target-val splits sharing source normalization."""
    layout = layout or LayoutParams()
    shift = shift if shift is not None else DEFAULT_SHIFT
    src = generate_scenes(seed, n_source, layout, split=0)
    mean, std = channel_stats(src)

    def target(stream, count):
        base = generate_scenes(seed, count, replace(layout, class_weights=None), split=stream)
        rng = seeded_rng(seed, 1000 + stream)
        return [apply_shift(s, shift, rng) for s in base]

    meta = dict(n_classes=layout.n_classes, seed=seed, norm_mean=mean, norm_std=std)
    return (SceneDataset(src, domain="source", **meta),
            SceneDataset(target(1, n_target), domain="target", **meta),
            SceneDataset(target(2, n_val), domain="target", **meta))


DEFAULT_SHIFT = ShiftParams(brightness_delta=-0.2, hue_rotation=30.0,
                            point_noise_sigma=0.002, point_dropout=0.3)
