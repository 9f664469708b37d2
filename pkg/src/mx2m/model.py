"""Desk-scale 2D/3D encoders and the six per-point heads.

Each modality feeds three heads: a segmentation head, a mimicry head that
imitates the other modality's segmentation, and a reconstruction head that
predicts the other modality's content. Any one head family can be made
*dynamic*: its per-point weights are generated from the other modality's
features instead of being shared parameters (``placement``).
"""
from __future__ import annotations

import struct
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .geom import PatchGrid, project_points, voxel_segments
from .numcore import Tensor
from .synthdata import normalize_image
from .xmask import MaskMode, MaskPlan, NO_MASK, apply_mask_2d, masked_point_flags

PLACEMENTS = ("prediction", "mimicking", "xmrp", "none")
CHECKPOINT_MAGIC = b"MX2C"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_classes: int = 4
    f2d: int = 16
    f3d: int = 16
    conv_layers: int = 3
    xmrp_mid: int = 64
    in2d: int = 3
    in3d: int = 7                 # normalized xyz, intensity, offset from the voxel centroid
    voxel_size: float = 0.05
    voxel_scales: tuple = (1, 3)  # pooling cells, in multiples of voxel_size
    placement: str = "prediction"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        self.voxel_scales = tuple(int(k) for k in self.voxel_scales)
        if not self.voxel_scales or min(self.voxel_scales) < 1:
            raise ValueError("voxel_scales must be positive integers")


@dataclass
class HeadOutputs:
    p2d: Tensor       # 2D segmentation logits
    p3d: Tensor       # 3D segmentation logits
    p2d_3d: Tensor    # 2D branch mimicking the 3D prediction
    p3d_2d: Tensor    # 3D branch mimicking the 2D prediction
    m2d_3d: Tensor    # 2D branch reconstruction (3 values per point)
    m3d_2d: Tensor    # 3D branch reconstruction

    def as_dict(self):
        return {k: getattr(self, k) for k in ("p2d", "p3d", "p2d_3d", "p3d_2d", "m2d_3d", "m3d_2d")}


# ------------------------------------------------------------------- heads

def linear(x, w, b):
    return nc.bias_add(nc.matmul(x, w), b)


def dxmf(h_self, h_other, gen_w, gen_b, out_dim):
    """Dynamic per-point filter.

    Row i's kernel ``K_i`` (F_self x out_dim) is an affine function of
    ``h_other[i]``; the output is ``K_i^T h_self[i]``. No dynamic bias.
    """
    n, f_self = h_self.shape
    if h_other.shape[0] != n:
        raise nc.ShapeError(f"dxmf: {n} rows vs {h_other.shape[0]} rows in the kernel source")
    kernels = nc.reshape(linear(h_other, gen_w, gen_b), (n, f_self, out_dim))
    rows = nc.reshape(h_self, (n, 1, f_self))
    return nc.reshape(nc.matmul(rows, kernels), (n, out_dim))


def dxmf_loop(h_self, h_other, gen_w, gen_b, out_dim):
    """Per-point reference for :func:`dxmf` on plain arrays."""
    n, f_self = h_self.shape
    out = np.empty((n, out_dim))
    for i in range(n):
        k = (h_other[i] @ gen_w + gen_b).reshape(f_self, out_dim)
        out[i] = k.T @ h_self[i]
    return out


def mlp(x, w1, b1, w2, b2):
    return linear(nc.relu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------- the model

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mx2MModel:
    """Parameters live in ``self.params`` (name -> Tensor requiring grad)."""

    def __init__(self, config: ModelConfig | None = None, seed=0, params=None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else self._init(seeded_params_rng(seed))

    def _init(self, rng):
        c = self.config
        C = c.n_classes
        shapes = {}
        cin = c.in2d
        for k in range(c.conv_layers):
            shapes[f"enc2d.conv{k}.w"] = (9 * cin, (9 * cin, c.f2d))
            shapes[f"enc2d.conv{k}.b"] = (9 * cin, (c.f2d,))
            cin = c.f2d
        fuse_in = (1 + len(c.voxel_scales)) * c.f3d
        for name, fan_in in (("point0", c.in3d), ("point1", c.f3d), ("fuse0", fuse_in), ("fuse1", c.f3d)):
            shapes[f"enc3d.{name}.w"] = (fan_in, (fan_in, c.f3d))
            shapes[f"enc3d.{name}.b"] = (fan_in, (c.f3d,))
        dims = {"2d": (c.f2d, c.f3d), "3d": (c.f3d, c.f2d)}
        for mod, (f_self, f_other) in dims.items():
            for family, out in (("seg", C), ("mimic", C), ("xmrp", 3)):
                dynamic = _is_dynamic(c.placement, family)
                name = f"{family}{mod}"
                if dynamic:
                    shapes[f"{name}.gen.w"] = (f_other, (f_other, f_self * out))
                    shapes[f"{name}.gen.b"] = (f_other, (f_self * out,))
                elif family == "xmrp":
                    shapes[f"{name}.w1"] = (f_self, (f_self, c.xmrp_mid))
                    shapes[f"{name}.b1"] = (f_self, (c.xmrp_mid,))
                    shapes[f"{name}.w2"] = (c.xmrp_mid, (c.xmrp_mid, 3))
                    shapes[f"{name}.b2"] = (c.xmrp_mid, (3,))
                else:
                    shapes[f"{name}.w"] = (f_self, (f_self, out))
                    shapes[f"{name}.b"] = (f_self, (out,))
        return {name: Tensor(_uniform(rng, fan, shape), requires_grad=True, name=name)
                for name, (fan, shape) in shapes.items()}

    # encoders
    def encode2d(self, images):
        """(B, H, W, 3) normalized images -> (B, H, W, F2D) features."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim == 3:
            x = nc.reshape(x, (1,) + x.shape)
        for k in range(self.config.conv_layers):
            x = nc.relu(nc.bias_add(nc.conv3x3(x, self.params[f"enc2d.conv{k}.w"]),
                                    self.params[f"enc2d.conv{k}.b"]))
        return x

    def encode3d(self, feats, segments, n_segments):
        """Two-layer point MLP, fused with voxel means at each pooling scale.

        ``segments``/``n_segments`` give one voxel partition per entry of
        ``config.voxel_scales`` (a bare array is accepted for a single scale).
        """
        p = self.params
        if isinstance(n_segments, (int, np.integer)):
            segments, n_segments = [segments], [n_segments]
        if len(segments) != len(self.config.voxel_scales):
            raise nc.ShapeError(f"encode3d: {len(segments)} voxel partitions for "
                                f"{len(self.config.voxel_scales)} scales")
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        h = nc.relu(linear(x, p["enc3d.point0.w"], p["enc3d.point0.b"]))
        h = nc.relu(linear(h, p["enc3d.point1.w"], p["enc3d.point1.b"]))
        pooled = [nc.gather_rows(nc.segment_mean(h, seg, n), seg) for seg, n in zip(segments, n_segments)]
        out = nc.relu(linear(nc.concat([h] + pooled), p["enc3d.fuse0.w"], p["enc3d.fuse0.b"]))
        return nc.relu(linear(out, p["enc3d.fuse1.w"], p["enc3d.fuse1.b"]))

    # heads
    def head(self, family, mod, h_self, h_other):
        p = self.params
        name = f"{family}{mod}"
        out = 3 if family == "xmrp" else self.config.n_classes
        if _is_dynamic(self.config.placement, family):
            return dxmf(h_self, h_other, p[f"{name}.gen.w"], p[f"{name}.gen.b"], out)
        if family == "xmrp":
            return mlp(h_self, p[f"{name}.w1"], p[f"{name}.b1"], p[f"{name}.w2"], p[f"{name}.b2"])
        return linear(h_self, p[f"{name}.w"], p[f"{name}.b"])

    def heads(self, h2d, h3d) -> HeadOutputs:
        if h2d.shape[0] != h3d.shape[0]:
            raise nc.ShapeError(f"2D/3D features disagree in length: {h2d.shape[0]} vs {h3d.shape[0]}")
        return HeadOutputs(
            p2d=self.head("seg", "2d", h2d, h3d),
            p3d=self.head("seg", "3d", h3d, h2d),
            p2d_3d=self.head("mimic", "2d", h2d, h3d),
            p3d_2d=self.head("mimic", "3d", h3d, h2d),
            m2d_3d=self.head("xmrp", "2d", h2d, h3d),
            m3d_2d=self.head("xmrp", "3d", h3d, h2d),
        )

    def encode2d_at(self, images, pixel_index):
        """2D features at the given flat pixel indices only.

        Equal to sampling :meth:`encode2d`, but the last conv layer is
        evaluated just at the requested pixels.
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        B, H, W, _ = x.shape
        L = self.config.conv_layers
        for k in range(L - 1):
            x = nc.relu(nc.bias_add(nc.conv3x3(x, self.params[f"enc2d.conv{k}.w"]),
                                    self.params[f"enc2d.conv{k}.b"]))
        c = x.shape[-1]
        flat = nc.reshape(x, (B * H * W, c))
        cols = nc.reshape(nc.gather_rows(flat, _neighbour_index(pixel_index, H, W)), (len(pixel_index), 9 * c))
        return nc.relu(linear(cols, self.params[f"enc2d.conv{L - 1}.w"], self.params[f"enc2d.conv{L - 1}.b"]))

    def features(self, batch: "Batch"):
        h2d = self.encode2d_at(batch.images, batch.pixel_index)
        h3d = self.encode3d(batch.feats3d, batch.segments, batch.n_segments)
        return h2d, h3d

    def forward(self, batch: "Batch") -> HeadOutputs:
        return self.heads(*self.features(batch))

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def _neighbour_index(pixel_index, H, W):
    """Flat indices of the 3x3 neighbourhood of each pixel, -1 outside the image."""
    pixel_index = np.asarray(pixel_index, dtype=np.int64)
    b, rem = np.divmod(pixel_index, H * W)
    r, c = np.divmod(rem, W)
    idx = np.empty((len(pixel_index), 9), dtype=np.int64)
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            rr, cc = r + dy, c + dx
            inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            idx[:, k] = np.where(inside, b * H * W + rr * W + cc, -1)
            k += 1
    return idx.reshape(-1)


def _is_dynamic(placement, family):
    return {"prediction": "seg", "mimicking": "mimic", "xmrp": "xmrp"}.get(placement) == family


def seeded_params_rng(seed):
    return nc.seeded_rng(seed, 0x5EED)


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    images: np.ndarray        # (B, H, W, 3) normalized, masked where planned
    pixel_index: np.ndarray   # (Ntot,) flat index into B*H*W
    feats3d: np.ndarray       # (Ntot, in3d) encoder input, masked rows zeroed
    segments: list            # per pooling scale: (Ntot,) voxel ids, unique across the batch
    n_segments: list
    offsets: np.ndarray       # (B+1,) row ranges per scene
    labels: np.ndarray        # (Ntot,)
    target3d: np.ndarray      # (Ntot, 3) normalized coordinates
    target2d: np.ndarray      # (Ntot, 3) unmasked normalized pixel values
    in_masked_patch: np.ndarray  # (Ntot,) point lies in a masked patch of its plan
    row_mode: np.ndarray      # (Ntot,) MaskMode per row
    plans: list = field(default_factory=list)

    @property
    def n_rows(self):
        return len(self.labels)


def normalized_coords(points):
    """Zero-mean coordinates divided by the bounding-box half extent."""
    centred = points - points.mean(0)
    half = (points.max(0) - points.min(0)).max() / 2
    return centred / (half if half > 0 else 1.0)


def voxel_offsets(points, segments, n_segments, keep):
    """Offset of each kept point from the centroid of the kept points in its voxel."""
    count = np.bincount(segments[keep], minlength=n_segments).astype(np.float64)
    centroid = np.zeros((n_segments, 3))
    np.add.at(centroid, segments[keep], points[keep])
    centroid /= np.maximum(count, 1.0)[:, None]
    return np.where(keep[:, None], points - centroid[segments], 0.0)


def make_batch(scenes, norm_mean, norm_std, voxel_size, plans=None, grid: PatchGrid | None = None,
               labels=None, voxel_scales=(1, 3)):
    """Stack scenes into one row-aligned batch, applying each scene's mask plan.

    3D encoder input per point: normalized coordinates, intensity and the
    offset from its voxel centroid (in voxel units); rows of 3D-masked points
    are zero. ``labels`` optionally overrides the per-scene labels
    (pseudo-labels).
    """
    plans = plans or [NO_MASK] * len(scenes)
    cam = scenes[0].camera
    hw = cam.height * cam.width
    images, pix, feats, groups, lab, t3, t2, inmask, modes, pts = ([] for _ in range(10))
    offsets = [0]
    for b, (scene, plan) in enumerate(zip(scenes, plans)):
        img = normalize_image(scene.image, norm_mean, norm_std)
        proj = project_points(scene.points, cam)
        flat = proj.flat_index(cam)
        t2.append(img.reshape(-1, 3)[flat])
        if plan.mode != MaskMode.NONE:
            if grid is None:
                raise ValueError("a masked plan needs a patch grid")
            flags = masked_point_flags(proj, plan, grid)
        else:
            flags = np.zeros(scene.n_points, dtype=bool)
        images.append(apply_mask_2d(img, plan, grid) if plan.mode == MaskMode.MASK_2D else img)
        coords = normalized_coords(scene.points)
        feats.append(np.concatenate([coords, scene.point_features], axis=1))
        pix.append(flat + b * hw)
        groups.append(np.full(scene.n_points, b))
        lab.append(scene.labels if labels is None else labels[b])
        t3.append(coords)
        inmask.append(flags)
        modes.append(np.full(scene.n_points, int(plan.mode)))
        pts.append(scene.points)
        offsets.append(offsets[-1] + scene.n_points)
    points = np.concatenate(pts)
    groups = np.concatenate(groups)
    inmask, modes = np.concatenate(inmask), np.concatenate(modes)
    segments, n_segments = [], []
    for k in voxel_scales:
        seg, n = voxel_segments(points, voxel_size * k, groups=groups)
        segments.append(seg)
        n_segments.append(n)
    hidden = inmask & (modes == MaskMode.MASK_3D)
    off = voxel_offsets(points, segments[0], n_segments[0], ~hidden) / voxel_size
    feats3d = np.concatenate([np.concatenate(feats), off], axis=1)
    feats3d[hidden] = 0.0
    return Batch(np.stack(images), np.concatenate(pix), feats3d, segments, n_segments,
                 np.array(offsets), np.concatenate(lab).astype(np.int64), np.concatenate(t3),
                 np.concatenate(t2), inmask, modes, list(plans))


# --------------------------------------------------------------- checkpoints

class CheckpointError(IOError):
    pass


def save_checkpoint(path, model: Mx2MModel, config_echo=None):
    """Versioned binary: magic, version, JSON header, raw little-endian params, CRC32."""
    names = sorted(model.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(model.config),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "config": config_echo or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join([CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)), hbytes]
                    + [np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes() for n in names])
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    """Return ``(model, config_echo)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(buf) < 16:
        raise CheckpointError(f"{path}: truncated")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 12 + hlen + 4 > len(buf):
        raise CheckpointError(f"{path}: truncated in header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        names = [(str(n), [int(d) for d in shape]) for n, shape in header["params"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    pos = 12 + hlen
    params = {}
    for name, shape in names:
        n = int(np.prod(shape)) * 8
        if pos + n > len(buf) - 4:
            raise CheckpointError(f"{path}: truncated in parameter {name}")
        arr = np.frombuffer(buf[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(arr, requires_grad=True, name=name)
        pos += n
    if pos + 4 != len(buf):
        raise CheckpointError(f"{path}: unexpected length")
    (crc,) = struct.unpack("<I", buf[pos:])
    if zlib.crc32(buf[:pos]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    model = Mx2MModel(ModelConfig(**header["model"]), params=params)
    return model, header["config"]
