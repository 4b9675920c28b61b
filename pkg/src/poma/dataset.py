"""Procedural synthetic rooms, depth rendering, view selection and captions.

World frame: z up, floor at z=0, the room spans ``[0, Lx] x [0, Ly] x [0, Lz]``.
East is +x, north is +y. Cameras follow the OpenCV convention
(x right, y down, z forward) and depth is camera-frame z.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geometry
from .errors import GenerationError, InvalidArgumentError
from .geometry import CameraModel

CAPTION_TEMPLATE_VERSION = 1

# (x, y, z) size ranges in metres; x/y may be swapped by a 90 degree turn.
SHAPES: dict[str, tuple[tuple[float, float], ...]] = {
    "bed": ((1.9, 2.1), (1.4, 1.8), (0.45, 0.6)),
    "sofa": ((1.8, 2.2), (0.8, 1.0), (0.7, 0.9)),
    "table": ((1.0, 1.6), (0.7, 1.0), (0.7, 0.8)),
    "cabinet": ((0.5, 0.9), (0.4, 0.6), (1.2, 1.6)),
    "shelf": ((0.8, 1.2), (0.3, 0.4), (1.8, 2.2)),
    "chair": ((0.45, 0.55), (0.45, 0.55), (0.8, 1.0)),
    "box": ((0.3, 0.5), (0.3, 0.5), (0.3, 0.5)),
}
SHAPE_TAGS = tuple(SHAPES)

_PLURAL = {"box": "boxes", "shelf": "shelves"}
_NUMBER = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
_COMPASS = ["east", "northeast", "north", "northwest", "west", "southwest", "south", "southeast"]

SCENE_TEMPLATES = (
    "a {size}room containing {objects}",
    "a {size}room with {objects}",
    "this {size}room has {objects}",
    "there is a {size}room containing {objects}",
    "inside a {size}room there are {objects}",
    "a {size}indoor space with {objects}",
    "the {size}room contains {objects}",
    "a {size}room where you can find {objects}",
    "in this {size}room you can see {objects}",
    "{objects} inside a {size}room",
    "a {size}room furnished with {objects}",
    "the scene shows a {size}room with {objects}",
    "a {size}interior containing {objects}",
    "a {size}space holding {objects}",
    "we are in a {size}room that holds {objects}",
)
EMPTY_SCENE_TEMPLATES = (
    "an empty {size}room",
    "a {size}room with nothing in it",
    "this {size}room is empty",
)
VIEW_TEMPLATES = (
    "facing {direction}, a view of {objects}",
    "looking {direction} at {objects}",
    "a view toward the {direction} showing {objects}",
    "facing {direction} you can see {objects}",
    "the camera faces {direction} and sees {objects}",
    "from here, looking {direction}, there is {objects}",
    "a {direction} facing view of {objects}",
    "turned to the {direction}, in front are {objects}",
    "i am facing {direction} toward {objects}",
    "heading {direction}, the view shows {objects}",
    "{objects}, seen while facing {direction}",
    "this view faces {direction} with {objects}",
    "the {direction} side of the room with {objects}",
    "looking toward the {direction}, we see {objects}",
    "standing and facing {direction} near {objects}",
)
BARE_WALL = "a bare wall"


@dataclass(frozen=True)
class GeneratorConfig:
    room_min: tuple[float, float, float] = (4.0, 4.0, 2.6)
    room_max: tuple[float, float, float] = (7.0, 7.0, 3.0)
    min_objects: int = 3
    max_objects: int = 5
    n_cameras: int = 32
    image_size: int = 64
    fov_deg: float = 70.0
    camera_height: tuple[float, float] = (1.2, 1.7)
    pitch_deg: tuple[float, float] = (5.0, 25.0)
    walls: bool = True
    wall_clearance: float = 0.1
    object_gap: float = 0.2
    max_retries: int = 200

    def validate(self) -> None:
        if self.min_objects < 0 or self.min_objects > self.max_objects:
            raise InvalidArgumentError("object count range must satisfy 0 <= min <= max")
        if any(lo <= 0 or lo > hi for lo, hi in zip(self.room_min, self.room_max)):
            raise InvalidArgumentError("room extents must be positive with min <= max")
        if self.n_cameras < 1 or self.image_size < 1:
            raise InvalidArgumentError("need at least one camera and a positive image size")


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    size: np.ndarray
    tag: str

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2


@dataclass
class SyntheticScene:
    seed: int
    room: np.ndarray
    objects: list[Box]
    cameras: list[CameraModel]
    walls: bool = True


@dataclass
class View:
    depth: np.ndarray
    camera: CameraModel
    point_map: np.ndarray
    captions: list[str]

    @property
    def caption(self) -> str:
        return self.captions[0]


@dataclass
class SceneRecord:
    scene_id: str
    room: np.ndarray
    views: list[View]
    scene_captions: list[str] = field(default_factory=list)
    # Paraphrases that were generated but not kept; used as held-out queries.
    heldout_scene_captions: list[str] = field(default_factory=list)
    heldout_view_captions: list[list[str]] = field(default_factory=list)
    referring_texts: list[str] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def scene_caption(self) -> Optional[str]:
        return self.scene_captions[0] if self.scene_captions else None


# --------------------------------------------------------------------------
# generation


def _intrinsics(cfg: GeneratorConfig) -> tuple[float, float, float, float]:
    n = cfg.image_size
    f = (n / 2) / math.tan(math.radians(cfg.fov_deg) / 2)
    c = (n - 1) / 2
    return f, f, c, c


def _inside_any(p: np.ndarray, boxes: Sequence[Box], pad: float = 0.0) -> bool:
    return any(np.all(p >= b.lo - pad) and np.all(p <= b.hi + pad) for b in boxes)


def generate_scene(seed: int, config: GeneratorConfig = GeneratorConfig()) -> SyntheticScene:
    """Sample a room with non-overlapping floor-standing boxes and candidate cameras."""
    config.validate()
    rng = np.random.default_rng(seed)
    room = rng.uniform(config.room_min, config.room_max)
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))

    objects: list[Box] = []
    for _ in range(n_obj):
        for _attempt in range(config.max_retries):
            tag = SHAPE_TAGS[int(rng.integers(len(SHAPE_TAGS)))]
            size = np.array([rng.uniform(lo, hi) for lo, hi in SHAPES[tag]])
            if rng.random() < 0.5:
                size[[0, 1]] = size[[1, 0]]
            free = room[:2] - size[:2] - 2 * config.wall_clearance
            if np.any(free <= 0) or size[2] >= room[2]:
                continue
            xy = config.wall_clearance + size[:2] / 2 + rng.random(2) * free
            center = np.array([xy[0], xy[1], size[2] / 2])
            cand = Box(center, size, tag)
            gap = config.object_gap
            if all(np.any(cand.lo[:2] >= o.hi[:2] + gap) or np.any(cand.hi[:2] <= o.lo[:2] - gap)
                   for o in objects):
                objects.append(cand)
                break
        else:
            raise GenerationError(f"could not place object {len(objects) + 1} of {n_obj} "
                                  f"after {config.max_retries} attempts")

    fx, fy, cx, cy = _intrinsics(config)
    cameras: list[CameraModel] = []
    margin = 0.3
    for _ in range(config.n_cameras):
        for _attempt in range(config.max_retries):
            pos = np.array([rng.uniform(margin, room[0] - margin),
                            rng.uniform(margin, room[1] - margin),
                            rng.uniform(*config.camera_height)])
            yaw = rng.uniform(0, 2 * math.pi)
            pitch = math.radians(rng.uniform(*config.pitch_deg))
            if not _inside_any(pos, objects, pad=0.15):
                break
        else:
            raise GenerationError("could not place a camera outside all objects")
        fwd = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch),
                        -math.sin(pitch)])
        cameras.append(CameraModel(fx, fy, cx, cy, geometry.look_at_rotation(fwd), pos))
    return SyntheticScene(seed=seed, room=room, objects=objects, cameras=cameras, walls=config.walls)


# --------------------------------------------------------------------------
# rendering


def _cast(scene: SyntheticScene, cam: CameraModel, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Depth and hit id per pixel. Hit id -1 is room shell, -2 is no hit."""
    rays = geometry.pixel_rays(cam, H, W).reshape(-1, 3) @ cam.R.T
    d = np.where(np.abs(rays) < 1e-12, 1e-12, rays)
    o = cam.t
    eps = 1e-6
    best = np.full(len(d), np.inf)
    hit = np.full(len(d), -2, dtype=np.int64)

    if scene.walls:
        # The camera sits inside the room box; the exit distance is the wall hit.
        bound = np.where(d > 0, scene.room, 0.0)
        t_exit = ((bound - o) / d).min(axis=1)
        ok = t_exit > eps
        best[ok] = t_exit[ok]
        hit[ok] = -1

    for idx, box in enumerate(scene.objects):
        t1 = (box.lo - o) / d
        t2 = (box.hi - o) / d
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        ok = (t_near <= t_far) & (t_near > eps) & (t_near < best)
        best[ok] = t_near[ok]
        hit[ok] = idx

    # Ray directions have unit camera-frame z, so the ray parameter is the depth.
    depth = np.where(np.isfinite(best), best, 0.0)
    return depth.reshape(H, W), hit.reshape(H, W)


def render_depth(scene: SyntheticScene, cam: CameraModel, H: int, W: int) -> np.ndarray:
    """Ray-cast a z-depth map; pixels that hit nothing get depth 0 (invalid)."""
    cam.validate()
    return _cast(scene, cam, H, W)[0]


# --------------------------------------------------------------------------
# view selection


def greedy_cover(sets: Sequence[set], n: int) -> list[int]:
    """Greedy maximum coverage over precomputed sets; ties go to the smaller index."""
    if len(sets) == 0:
        raise InvalidArgumentError("need at least one candidate")
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    covered: set = set()
    remaining = list(range(len(sets)))
    order: list[int] = []
    while remaining and len(order) < n:
        best = max(remaining, key=lambda i: (len(sets[i] - covered), -i))
        order.append(best)
        remaining.remove(best)
        covered |= sets[best]
    return order


def select_max_coverage(views: Sequence[np.ndarray], n: int, cell: float = 0.25) -> list[int]:
    """Pick ``n`` point maps greedily by newly covered voxels."""
    if len(views) == 0:
        raise InvalidArgumentError("empty view list")
    if not cell > 0:
        raise InvalidArgumentError("cell must be positive")
    sets = [geometry.voxel_coverage(geometry.merge_views([pm]), cell) for pm in views]
    return greedy_cover(sets, n)


# --------------------------------------------------------------------------
# captions


def size_word(room: np.ndarray) -> str:
    area = float(room[0] * room[1])
    if area < 20.0:
        return "small"
    if area > 40.0:
        return "large"
    return ""


def position_word(box: Box, room: np.ndarray, near: float = 1.2) -> str:
    x, y = box.center[:2]
    dists = {"west": x, "east": room[0] - x, "south": y, "north": room[1] - y}
    wall = min(dists, key=lambda k: (dists[k], k))
    return f"near the {wall} wall" if dists[wall] < near else "in the center"


def direction_word(cam: CameraModel) -> str:
    fwd = cam.R[:, 2]
    yaw = math.atan2(fwd[1], fwd[0]) % (2 * math.pi)
    return _COMPASS[int(round(yaw / (math.pi / 4))) % 8]


def _count_phrase(n: int, tag: str) -> str:
    word = _NUMBER[n] if n < len(_NUMBER) else str(n)
    return f"{word} {tag if n == 1 else _PLURAL.get(tag, tag + 's')}"


def _join(parts: list[str]) -> str:
    if len(parts) <= 1:
        return "".join(parts)
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def object_groups(boxes: Sequence[Box], room: np.ndarray) -> list[str]:
    """Sorted ``"<count> <tag(s)> <position>"`` phrases, one per (tag, position) group."""
    groups: dict[tuple[str, str], int] = {}
    for b in boxes:
        key = (b.tag, position_word(b, room))
        groups[key] = groups.get(key, 0) + 1
    return [f"{_count_phrase(n, tag)} {where}" for (tag, where), n in sorted(groups.items())]


def object_phrase(boxes: Sequence[Box], room: np.ndarray) -> str:
    """``"one bed near the north wall and two chairs in the center"`` style listing."""
    return _join(object_groups(boxes, room))


def visible_objects(scene: SyntheticScene, cam: CameraModel, H: int, W: int,
                    min_fraction: float = 0.02) -> list[Box]:
    _, hit = _cast(scene, cam, H, W)
    counts = np.bincount(hit[hit >= 0].ravel(), minlength=len(scene.objects))
    return [b for b, c in zip(scene.objects, counts) if c >= max(1, min_fraction * H * W)]


def caption_candidates(scene: SyntheticScene, view: Optional[int] = None,
                       image_size: Optional[int] = None, count: int = 15) -> list[str]:
    """Deterministic paraphrase variants; index 0 is the canonical caption."""
    size = size_word(scene.room)
    size_prefix = f"{size} " if size else ""
    if view is None:
        if not scene.objects:
            texts = [t.format(size=size_prefix) for t in EMPTY_SCENE_TEMPLATES]
        else:
            objs = object_phrase(scene.objects, scene.room)
            texts = [t.format(size=size_prefix, objects=objs) for t in SCENE_TEMPLATES]
    else:
        if not 0 <= view < len(scene.cameras):
            raise InvalidArgumentError(f"view index {view} out of range")
        cam = scene.cameras[view]
        n = image_size or int(round(2 * cam.cx + 1))
        seen = visible_objects(scene, cam, n, n)
        objs = object_phrase(seen, scene.room) if seen else BARE_WALL
        texts = [t.format(direction=direction_word(cam), objects=objs) for t in VIEW_TEMPLATES]
    return [" ".join(t.split()) for t in texts[:count]]


def caption(scene: SyntheticScene, view: Optional[int] = None,
            image_size: Optional[int] = None) -> str:
    """Canonical scene caption (``view=None``) or view caption."""
    return caption_candidates(scene, view, image_size, count=1)[0]


# --------------------------------------------------------------------------
# text embedding


_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class ReferenceEncoder:
    """Frozen bag-of-hashed-tokens text embedder.

    Each token maps to a +/-1 pattern derived from SHAKE-256 of ``seed:token``,
    so embeddings are identical across runs, processes and platforms.
    """

    dim: int = 64
    seed: int = 0

    def token_pattern(self, token: str) -> np.ndarray:
        digest = hashlib.shake_256(f"{self.seed}:{token}".encode()).digest(self.dim)
        bits = np.frombuffer(digest, dtype=np.uint8) & 1
        return bits.astype(np.float64) * 2.0 - 1.0


def embed_text(enc: ReferenceEncoder, text: str) -> np.ndarray:
    if enc.dim < 8:
        raise InvalidArgumentError("embedding dimension must be >= 8")
    tokens = tokenize(text)
    if not tokens:
        raise InvalidArgumentError(f"text has no tokens: {text!r}")
    v = np.sum([enc.token_pattern(t) for t in tokens], axis=0)
    n = np.linalg.norm(v)
    if n == 0:
        # Patterns cancelled exactly; fall back to the first token alone.
        v, n = enc.token_pattern(tokens[0]), math.sqrt(enc.dim)
    return v / n


def rank_captions(candidate_embeddings: Sequence[np.ndarray], reference: np.ndarray,
                  k: int) -> list[int]:
    """Indices of the ``k`` candidates most cosine-similar to ``reference``."""
    if len(candidate_embeddings) == 0:
        raise InvalidArgumentError("no caption candidates")
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    ref = np.asarray(reference, dtype=np.float64)
    ref = ref / np.linalg.norm(ref)
    sims = []
    for e in candidate_embeddings:
        e = np.asarray(e, dtype=np.float64)
        sims.append(float(e @ ref / np.linalg.norm(e)))
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    return order[:k]


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class CorpusConfig:
    generator: GeneratorConfig = GeneratorConfig()
    views_per_scene: int = 8
    coverage_cell: float = 0.25
    n_candidates: int = 15
    keep_captions: int = 5
    text_dim: int = 64
    text_seed: int = 0


def _select_captions(candidates: list[str], enc: ReferenceEncoder, keep: int) -> tuple[list[str], list[str]]:
    # Reference is the canonical caption; the paraphrases closest to it are kept.
    embs = [embed_text(enc, c) for c in candidates]
    order = rank_captions(embs, embs[0], len(embs))
    return [candidates[i] for i in order[:keep]], [candidates[i] for i in order[keep:]]


def build_record(scene_id: str, seed: int, cfg: CorpusConfig = CorpusConfig()) -> SceneRecord:
    """Generate, render, select views and caption one scene."""
    scene = generate_scene(seed, cfg.generator)
    n = cfg.generator.image_size
    enc = ReferenceEncoder(cfg.text_dim, cfg.text_seed)
    depths = [render_depth(scene, cam, n, n) for cam in scene.cameras]
    pmaps = [geometry.unproject(d, cam) for d, cam in zip(depths, scene.cameras)]
    chosen = select_max_coverage(pmaps, cfg.views_per_scene, cfg.coverage_cell)
    views, heldout_views = [], []
    for i in chosen:
        kept, rest = _select_captions(caption_candidates(scene, i, n, cfg.n_candidates), enc,
                                      cfg.keep_captions)
        views.append(View(depths[i], scene.cameras[i], pmaps[i], kept))
        heldout_views.append(rest)
    kept, rest = _select_captions(caption_candidates(scene, None, n, cfg.n_candidates), enc,
                                  cfg.keep_captions)
    referring = [f"there {'is' if g.startswith('one ') else 'are'} {g}"
                 for g in object_groups(scene.objects, scene.room)]
    return SceneRecord(scene_id, scene.room, views, kept, rest, heldout_views, referring)


def build_corpus(n_scenes: int, seed: int, cfg: CorpusConfig = CorpusConfig()) -> list[SceneRecord]:
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes, dtype=np.uint64)
    return [build_record(f"scene_{i:04d}", int(s), cfg) for i, s in enumerate(seeds)]
