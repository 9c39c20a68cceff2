"""Procedural multi-view dataset with exact cameras, depth, and masks.

Scenes are simple: one colored primitive (cube, sphere, or cylinder) resting
on an infinite textured floor, lit by a single directional light with Lambert
shading (view-independent, so multi-view colors agree up to resampling).
World coordinates are already normalized: the object fits inside the unit
cube [-0.5, 0.5]^3 with the floor plane touching its lowest point, and the
cameras sit on a planar ring around it, so pose normalization is the identity
transform up to numerics.

Everything is a pure function of (spec, view); rendering uses no RNG.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .conditioning import condition_vector
from .geometry import CameraView, generate_rays
from .rng import make_generator, spawn

OBJECT_KINDS = ("cube", "sphere", "cylinder")

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.2, 0.3, 0.85),
    "yellow": (0.9, 0.85, 0.2),
    "purple": (0.6, 0.2, 0.75),
    "white": (0.92, 0.92, 0.92),
}

TEXTURES = ("checker", "striped", "plain")

CAPTION_TEMPLATES = (
    ("{color}", "{kind}", "on", "{texture}", "floor"),
    ("a", "{color}", "{kind}"),
    ("{kind}", "on", "{texture}", "floor"),
)

VOCABULARY = (
    ["a", "on", "floor"] + list(COLORS) + list(OBJECT_KINDS) + list(TEXTURES)
)
_WORD_TO_ID = {w: i + 1 for i, w in enumerate(VOCABULARY)}  # 0 reserved for padding
_ID_TO_WORD = {i: w for w, i in _WORD_TO_ID.items()}

RING_POSES = 24
ELEVATION_RANGE = (math.radians(10.0), math.radians(40.0))
RADIUS_RANGE = (1.2, 1.8)

DEPTH_SCALE = 10000.0  # world units -> 16-bit PNG levels

_AMBIENT = 0.25
_SKY = (0.55, 0.65, 0.8)
_FLOOR_TONES = {
    "checker": ((0.75, 0.72, 0.68), (0.35, 0.33, 0.3)),
    "striped": ((0.7, 0.6, 0.5), (0.45, 0.5, 0.55)),
    "plain": ((0.6, 0.6, 0.58), (0.6, 0.6, 0.58)),
}


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    object_kind: str
    color_name: str
    size: float
    floor_texture: int
    light_direction: tuple[float, float, float]
    caption_template: int
    seed: int

    def __post_init__(self):
        if self.object_kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {self.object_kind!r}")
        if self.color_name not in COLORS:
            raise ValueError(f"unknown color {self.color_name!r}")
        if not 0.0 < self.size <= 0.5:
            raise ValueError("size must place the object inside the unit cube")
        norm = math.sqrt(sum(c * c for c in self.light_direction))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("light direction must be a unit vector")

    @property
    def color(self) -> tuple[float, float, float]:
        return COLORS[self.color_name]

    @property
    def floor_z(self) -> float:
        return -self.size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["light_direction"] = tuple(d["light_direction"])
        return cls(**d)


def make_scene_spec(index: int, seed: int) -> SceneSpec:
    """Deterministic scene parameters for scene `index` of a corpus."""
    gen = make_generator(seed * 100_003 + index)
    kind = OBJECT_KINDS[int(torch.randint(len(OBJECT_KINDS), (), generator=gen))]
    color = list(COLORS)[int(torch.randint(len(COLORS), (), generator=gen))]
    size = 0.3 + 0.15 * float(torch.rand((), generator=gen))
    texture = int(torch.randint(len(TEXTURES), (), generator=gen))
    template = int(torch.randint(len(CAPTION_TEMPLATES), (), generator=gen))
    az = 2 * math.pi * float(torch.rand((), generator=gen))
    el = 0.6 + 0.7 * float(torch.rand((), generator=gen))  # light well above horizon
    light = (
        math.cos(el) * math.cos(az),
        math.cos(el) * math.sin(az),
        math.sin(el),
    )
    return SceneSpec(
        object_kind=kind,
        color_name=color,
        size=round(size, 4),
        floor_texture=texture,
        light_direction=light,
        caption_template=template,
        seed=seed * 100_003 + index,
    )


def scene_cameras(spec: SceneSpec, image_size: int = 32, n_poses: int = RING_POSES) -> list[CameraView]:
    """Planar ring of cameras looking at the object center."""
    gen = make_generator(spec.seed + 7)
    elevation = ELEVATION_RANGE[0] + (ELEVATION_RANGE[1] - ELEVATION_RANGE[0]) * float(
        torch.rand((), generator=gen)
    )
    radius = RADIUS_RANGE[0] + (RADIUS_RANGE[1] - RADIUS_RANGE[0]) * float(
        torch.rand((), generator=gen)
    )
    f = 1.1 * image_size
    views = []
    for k in range(n_poses):
        az = 2 * math.pi * k / n_poses
        center = (
            radius * math.cos(elevation) * math.cos(az),
            radius * math.cos(elevation) * math.sin(az),
            radius * math.sin(elevation),
        )
        views.append(
            CameraView(
                pose=_look_at(center),
                focal=(f, f),
                principal=(image_size / 2, image_size / 2),
                resolution=(image_size, image_size),
            )
        )
    return views


def _look_at(center, target=(0.0, 0.0, 0.0)) -> torch.Tensor:
    center = torch.as_tensor(center, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    fwd = target - center
    fwd = fwd / fwd.norm()
    right = torch.linalg.cross(fwd, up)
    if right.norm() < 1e-8:
        right = torch.linalg.cross(fwd, torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
    right = right / right.norm()
    down = torch.linalg.cross(fwd, right)
    pose = torch.eye(4, dtype=torch.float64)
    pose[0, :3] = right
    pose[1, :3] = down
    pose[2, :3] = fwd
    pose[:3, 3] = -pose[:3, :3] @ center
    return pose


# ---------------------------------------------------------------------------
# Ray-cast rendering


def _intersect_sphere(o: Tensor, d: Tensor, radius: float):
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    t = -b - torch.sqrt(disc.clamp_min(0.0))
    hit = hit & (t > 1e-6)
    p = o + t.unsqueeze(-1) * d
    normal = p / radius
    return t, hit, normal


def _intersect_cube(o: Tensor, d: Tensor, half: float):
    inv = 1.0 / torch.where(d == 0, torch.full_like(d, 1e-12), d)
    t0 = (-half - o) * inv
    t1 = (half - o) * inv
    t_near = torch.minimum(t0, t1)
    t_far = torch.maximum(t0, t1).min(dim=-1).values
    entry, axis = t_near.max(dim=-1)
    hit = (entry < t_far) & (entry > 1e-6)
    sign = torch.sign(torch.gather(d, -1, axis.unsqueeze(-1)).squeeze(-1))
    normal = torch.zeros_like(o)
    normal.scatter_(-1, axis.unsqueeze(-1), -sign.unsqueeze(-1))
    return entry, hit, normal


def _intersect_cylinder(o: Tensor, d: Tensor, radius: float, half: float):
    # Side surface: quadratic in the xy-plane, clipped to |z| <= half.
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = o[..., 0] * d[..., 0] + o[..., 1] * d[..., 1]
    c = o[..., 0] ** 2 + o[..., 1] ** 2 - radius * radius
    disc = b * b - a * c
    safe_a = torch.where(a < 1e-12, torch.ones_like(a), a)
    t_side = (-b - torch.sqrt(disc.clamp_min(0.0))) / safe_a
    z_side = o[..., 2] + t_side * d[..., 2]
    side_hit = (disc > 0) & (a > 1e-12) & (t_side > 1e-6) & (z_side.abs() <= half)
    p_side = o + t_side.unsqueeze(-1) * d
    n_side = torch.cat(
        [p_side[..., :2] / radius, torch.zeros_like(p_side[..., :1])], dim=-1
    )
    # Caps at z = +-half.
    dz = torch.where(d[..., 2].abs() < 1e-12, torch.full_like(d[..., 2], 1e-12), d[..., 2])
    best_t = torch.where(side_hit, t_side, torch.full_like(t_side, math.inf))
    best_n = n_side
    hit = side_hit
    for zcap in (half, -half):
        t_cap = (zcap - o[..., 2]) / dz
        p_cap = o + t_cap.unsqueeze(-1) * d
        inside = p_cap[..., 0] ** 2 + p_cap[..., 1] ** 2 <= radius * radius
        cap_hit = (t_cap > 1e-6) & inside
        closer = cap_hit & (t_cap < best_t)
        n_cap = torch.zeros_like(best_n)
        n_cap[..., 2] = math.copysign(1.0, zcap)
        best_n = torch.where(closer.unsqueeze(-1), n_cap, best_n)
        best_t = torch.where(closer, t_cap, best_t)
        hit = hit | cap_hit
    return best_t, hit, best_n


def _floor_albedo(p: Tensor, texture: int) -> Tensor:
    tone_a, tone_b = _FLOOR_TONES[TEXTURES[texture]]
    tone_a = torch.tensor(tone_a, dtype=p.dtype)
    tone_b = torch.tensor(tone_b, dtype=p.dtype)
    if TEXTURES[texture] == "checker":
        parity = (torch.floor(p[..., 0] / 0.25) + torch.floor(p[..., 1] / 0.25)) % 2
    elif TEXTURES[texture] == "striped":
        parity = torch.floor(p[..., 0] / 0.2) % 2
    else:
        parity = torch.zeros_like(p[..., 0])
    return torch.where(parity.unsqueeze(-1) > 0.5, tone_b, tone_a)


def render_scene(
    spec: SceneSpec, view: CameraView, brightness: float = 1.0
) -> tuple[Tensor, Tensor, Tensor]:
    """Render (image HxWx3 in [0,1], depth HxW, object mask HxW).

    Depth is the camera-space z of the first hit (0 where the ray escapes to
    the sky); the mask marks object pixels only, not the floor.
    """
    h, w = view.resolution
    rays = generate_rays(view)
    o = rays.origins.reshape(-1, 3)
    d = rays.directions.reshape(-1, 3)

    if spec.object_kind == "sphere":
        t_obj, hit_obj, n_obj = _intersect_sphere(o, d, spec.size)
    elif spec.object_kind == "cube":
        t_obj, hit_obj, n_obj = _intersect_cube(o, d, spec.size)
    else:
        t_obj, hit_obj, n_obj = _intersect_cylinder(o, d, 0.7 * spec.size, spec.size)

    dz = torch.where(d[..., 2].abs() < 1e-12, torch.full_like(d[..., 2], 1e-12), d[..., 2])
    t_floor = (spec.floor_z - o[..., 2]) / dz
    hit_floor = t_floor > 1e-6

    t_obj_eff = torch.where(hit_obj, t_obj, torch.full_like(t_obj, math.inf))
    t_floor_eff = torch.where(hit_floor, t_floor, torch.full_like(t_floor, math.inf))
    obj_first = hit_obj & (t_obj_eff <= t_floor_eff)
    floor_first = hit_floor & ~obj_first

    light = torch.tensor(spec.light_direction, dtype=torch.float64)
    albedo_obj = torch.tensor(spec.color, dtype=torch.float64).expand_as(o)
    p_floor = o + t_floor.unsqueeze(-1) * d
    albedo_floor = _floor_albedo(p_floor, spec.floor_texture)
    n_floor = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64).expand_as(o)

    def shade(albedo, normal):
        lambert = (normal * light).sum(-1).clamp_min(0.0)
        return albedo * (_AMBIENT + (1.0 - _AMBIENT) * lambert).unsqueeze(-1)

    sky = torch.tensor(_SKY, dtype=torch.float64).expand_as(o)
    color = torch.where(
        obj_first.unsqueeze(-1),
        shade(albedo_obj, n_obj),
        torch.where(floor_first.unsqueeze(-1), shade(albedo_floor, n_floor), sky),
    )
    color = (color * brightness).clamp(0.0, 1.0)

    t_hit = torch.where(obj_first, t_obj, torch.where(floor_first, t_floor, torch.zeros_like(t_floor)))
    p_hit = o + t_hit.unsqueeze(-1) * d
    cam_z = p_hit @ view.rotation[2] + view.translation[2]
    depth = torch.where(obj_first | floor_first, cam_z, torch.zeros_like(cam_z))

    image = color.reshape(h, w, 3).to(torch.float32)
    return image, depth.reshape(h, w), obj_first.reshape(h, w)


# ---------------------------------------------------------------------------
# Captions


def caption_of(spec: SceneSpec) -> Tensor:
    """Deterministic caption token ids for a scene."""
    words = [
        w.format(
            color=spec.color_name,
            kind=spec.object_kind,
            texture=TEXTURES[spec.floor_texture],
        )
        for w in CAPTION_TEMPLATES[spec.caption_template]
    ]
    return tokenize(words)


def draw_caption(spec: SceneSpec, gen: torch.Generator, empty_prob: float = 0.1) -> Tensor:
    """Training-time caption draw: empty with probability `empty_prob`."""
    if float(torch.rand((), generator=gen)) < empty_prob:
        return torch.zeros(0, dtype=torch.long)
    return caption_of(spec)


def tokenize(words: list[str]) -> Tensor:
    try:
        return torch.tensor([_WORD_TO_ID[w] for w in words], dtype=torch.long)
    except KeyError as exc:
        raise ValueError(f"word outside the caption vocabulary: {exc}") from exc


def detokenize(tokens: Tensor) -> list[str]:
    return [_ID_TO_WORD[int(t)] for t in tokens]


def vocabulary_size() -> int:
    return len(VOCABULARY) + 1


# ---------------------------------------------------------------------------
# Scene container and frame sampling


@dataclasses.dataclass
class Scene:
    """All frames of one scene, rendered or loaded."""

    spec: SceneSpec
    views: list[CameraView]
    images: Tensor  # (K, 3, H, W)
    depths: Tensor  # (K, H, W)
    masks: Tensor  # (K, H, W) bool

    @property
    def num_frames(self) -> int:
        return self.images.shape[0]


def build_scene(
    spec: SceneSpec,
    image_size: int = 32,
    n_poses: int = RING_POSES,
    brightness_jitter: float = 0.0,
) -> Scene:
    """Render every ring pose of a scene.

    brightness_jitter > 0 scales each view by 1 +- jitter (derived from the
    scene seed), simulating per-view exposure differences so the intensity
    conditioning has signal to learn from.
    """
    views = scene_cameras(spec, image_size, n_poses)
    gen = make_generator(spec.seed + 13)
    images, depths, masks = [], [], []
    for view in views:
        b = 1.0
        if brightness_jitter > 0:
            b = 1.0 + brightness_jitter * (2.0 * float(torch.rand((), generator=gen)) - 1.0)
        img, dep, msk = render_scene(spec, view, brightness=b)
        images.append(img.permute(2, 0, 1))
        depths.append(dep)
        masks.append(msk)
    return Scene(
        spec=spec,
        views=views,
        images=torch.stack(images),
        depths=torch.stack(depths).to(torch.float32),
        masks=torch.stack(masks),
    )


@dataclasses.dataclass
class FrameBatch:
    """N frames of one scene plus everything the trainer needs."""

    images: Tensor
    views: list[CameraView]
    conditions: list
    caption_tokens: Tensor
    indices: list[int]
    mode: str  # "random" | "consecutive"


def sample_training_frames(
    scene: Scene, n: int, gen: torch.Generator, empty_caption_prob: float = 0.1
) -> FrameBatch:
    """Pick N frames: uniformly without replacement or a consecutive window.

    Both modes fire with probability 0.5; the consecutive window wraps around
    the ring.
    """
    k = scene.num_frames
    if k < n:
        raise ValueError("scene has fewer poses than requested frames")
    if float(torch.rand((), generator=gen)) < 0.5:
        mode = "random"
        indices = torch.randperm(k, generator=gen)[:n].tolist()
    else:
        mode = "consecutive"
        start = int(torch.randint(k, (), generator=gen))
        indices = [(start + i) % k for i in range(n)]
    images = scene.images[indices]
    views = [scene.views[i] for i in indices]
    conditions = [
        condition_vector(v, images[i].permute(1, 2, 0), mode="train")
        for i, v in enumerate(views)
    ]
    tokens = draw_caption(scene.spec, gen, empty_caption_prob)
    return FrameBatch(images, views, conditions, tokens, indices, mode)


# ---------------------------------------------------------------------------
# Disk layout


def write_scene(scene: Scene, scene_dir: str | Path) -> Path:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for i in range(scene.num_frames):
        img = (scene.images[i].permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(img).save(scene_dir / f"frame_{i:03d}.png")
        depth = (scene.depths[i].numpy() * DEPTH_SCALE).clip(0, 65535).astype(np.uint16)
        Image.fromarray(depth).save(scene_dir / f"depth_{i:03d}.png")
        mask = (scene.masks[i].numpy().astype(np.uint8)) * 255
        Image.fromarray(mask).save(scene_dir / f"mask_{i:03d}.png")
        view = scene.views[i]
        h, w = view.resolution
        frames.append(
            {
                "pose": [float(v) for v in view.pose.reshape(-1)],
                "fx": view.focal[0],
                "fy": view.focal[1],
                "cx": view.principal[0],
                "cy": view.principal[1],
                "H": h,
                "W": w,
            }
        )
    (scene_dir / "cameras.json").write_text(json.dumps({"frames": frames}, indent=1))
    (scene_dir / "caption.txt").write_text(" ".join(detokenize(caption_of(scene.spec))))
    (scene_dir / "spec.json").write_text(json.dumps(scene.spec.to_dict(), indent=1))
    return scene_dir


def view_from_record(rec: dict) -> CameraView:
    return CameraView(
        pose=torch.tensor(rec["pose"], dtype=torch.float64).reshape(4, 4),
        focal=(rec["fx"], rec["fy"]),
        principal=(rec["cx"], rec["cy"]),
        resolution=(rec["H"], rec["W"]),
    )


def read_scene(scene_dir: str | Path) -> Scene:
    scene_dir = Path(scene_dir)
    spec = SceneSpec.from_dict(json.loads((scene_dir / "spec.json").read_text()))
    cams = json.loads((scene_dir / "cameras.json").read_text())["frames"]
    views = [view_from_record(r) for r in cams]
    images, depths, masks = [], [], []
    for i in range(len(views)):
        img = np.asarray(Image.open(scene_dir / f"frame_{i:03d}.png"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(img).permute(2, 0, 1))
        dep = np.asarray(Image.open(scene_dir / f"depth_{i:03d}.png"), dtype=np.float32) / DEPTH_SCALE
        depths.append(torch.from_numpy(dep))
        msk = np.asarray(Image.open(scene_dir / f"mask_{i:03d}.png")) > 127
        masks.append(torch.from_numpy(msk))
    return Scene(spec, views, torch.stack(images), torch.stack(depths), torch.stack(masks))


def write_dataset(
    out_dir: str | Path,
    n_scenes: int,
    seed: int,
    image_size: int = 32,
    n_poses: int = RING_POSES,
    brightness_jitter: float = 0.0,
    force: bool = False,
) -> list[Path]:
    """Write `n_scenes` scenes under out_dir/scene_XXXX; deterministic in seed."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise FileExistsError(f"{out_dir} is not empty (use force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        spec = make_scene_spec(i, seed)
        scene = build_scene(spec, image_size, n_poses, brightness_jitter)
        paths.append(write_scene(scene, out_dir / f"scene_{i:04d}"))
    (out_dir / "dataset.json").write_text(
        json.dumps(
            {
                "scenes": n_scenes,
                "seed": seed,
                "image_size": image_size,
                "poses_per_scene": n_poses,
                "brightness_jitter": brightness_jitter,
            },
            indent=1,
        )
    )
    return paths


def read_dataset(data_dir: str | Path) -> list[Scene]:
    data_dir = Path(data_dir)
    scene_dirs = sorted(p for p in data_dir.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not scene_dirs:
        raise FileNotFoundError(f"no scene_* directories under {data_dir}")
    return [read_scene(p) for p in scene_dirs]


# ---------------------------------------------------------------------------
# Prior preservation set


@dataclasses.dataclass
class PriorItem:
    image: Tensor  # (3, H, W)
    caption_tokens: Tensor
    view: CameraView


def random_ring_view(gen: torch.Generator, image_size: int) -> CameraView:
    """A pose drawn from the same distribution as the training rings."""
    az = 2 * math.pi * float(torch.rand((), generator=gen))
    el = ELEVATION_RANGE[0] + (ELEVATION_RANGE[1] - ELEVATION_RANGE[0]) * float(
        torch.rand((), generator=gen)
    )
    radius = RADIUS_RANGE[0] + (RADIUS_RANGE[1] - RADIUS_RANGE[0]) * float(
        torch.rand((), generator=gen)
    )
    center = (
        radius * math.cos(el) * math.cos(az),
        radius * math.cos(el) * math.sin(az),
        radius * math.sin(el),
    )
    f = 1.1 * image_size
    return CameraView(
        _look_at(center), (f, f), (image_size / 2, image_size / 2), (image_size, image_size)
    )


def random_caption(gen: torch.Generator) -> Tensor:
    spec = make_scene_spec(int(torch.randint(10_000, (), generator=gen)), 0)
    return caption_of(spec)


def make_prior_set(
    checkpoint_path: str | Path, count: int = 300, seed: int = 0, steps: int = 50
) -> list[PriorItem]:
    """Sample single-frame images from a stage-0 checkpoint with random poses.

    count=0 returns an empty list (prior loss disabled).
    """
    if count == 0:
        return []
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise FileNotFoundError(f"stage-0 checkpoint missing: {checkpoint_path}")
    from .denoiser import load_checkpoint
    from .generation import sample_frame_set

    model, schedule, _ = load_checkpoint(checkpoint_path)
    model.eval()
    gen = make_generator(seed)
    items = []
    for child in spawn(gen, count):
        view = random_ring_view(child, model.config.image_size)
        tokens = random_caption(child)
        images = sample_frame_set(
            model, schedule, [view], tokens, steps=steps, lambda_cfg=0.0, gen=child
        )
        items.append(PriorItem(images[0], tokens, view))
    return items
