"""Synthetic paired scenes: a room box plus a few colored cuboids, rendered
by casting one ray through every pixel center.

The ray through pixel (r, u) has direction ((u+0.5-cx)/fx, (r+0.5-cy)/fy, 1)
from the camera at the origin, so a surface point hit at depth t projects
straight back to (u+0.5, r+0.5) up to rounding. Sampled cloud points are the
hit points of randomly chosen pixels, which makes the 2D-3D correspondence
exact by construction: a point's pixel always shows that point's color.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel


@dataclass(frozen=True)
class SceneProfile:
    name: str
    image_h: int
    image_w: int
    n_points: int
    num_clusters: int
    group_size: int
    patch_size: int

    @property
    def focal(self) -> float:
        return 0.9 * min(self.image_h, self.image_w)


PAPER_PROFILE = SceneProfile("paper", 256, 352, 2048, 128, 16, 16)
DESK_PROFILE = SceneProfile("desk", 64, 80, 256, 16, 8, 16)
TINY_PROFILE = SceneProfile("tiny", 16, 20, 64, 8, 4, 4)

PROFILES = {p.name: p for p in (PAPER_PROFILE, DESK_PROFILE, TINY_PROFILE)}


@dataclass
class Scene:
    points: np.ndarray                    # (n, 3) camera-frame coordinates
    image: np.ndarray                     # (h, w, 3) in [0, 1]
    cam: CameraModel
    point_colors: np.ndarray | None = None  # (n, 3) color under each point
    provenance: dict = field(default_factory=dict)


def _ray_box_hits(dirs, lo, hi):
    """Slab test for rays from the origin: t_enter, t_exit per ray.

    dirs is (n, 3) with every component nonzero (pixel centers sit at half
    integers while the principal point is integral, and z is 1), so the
    divisions stay finite. Misses leave t_enter > t_exit.
    """
    t1 = lo[None, :] / dirs
    t2 = hi[None, :] / dirs
    t_enter = np.minimum(t1, t2).max(axis=1)
    t_exit = np.maximum(t1, t2).min(axis=1)
    return t_enter, t_exit


def _face_colors(rng, n_boxes):
    # saturated-ish base colors, one per face, away from pure black
    return rng.uniform(0.15, 0.95, size=(n_boxes, 6, 3))


def _hit_face(hit, lo, hi):
    """Which of the 6 faces each hit point lies on (0..5: -x,+x,-y,+y,-z,+z)."""
    gaps = np.stack([np.abs(hit[:, 0] - lo[0]), np.abs(hit[:, 0] - hi[0]),
                     np.abs(hit[:, 1] - lo[1]), np.abs(hit[:, 1] - hi[1]),
                     np.abs(hit[:, 2] - lo[2]), np.abs(hit[:, 2] - hi[2])], axis=1)
    return gaps.argmin(axis=1)


def generate_scene(seed: int, profile: SceneProfile = DESK_PROFILE) -> Scene:
    """Deterministic synthetic scene: room interior plus 3 to 6 cuboids."""
    rng = np.random.default_rng(np.random.SeedSequence((0x5EED, seed)))
    h, w = profile.image_h, profile.image_w
    f = profile.focal
    cx, cy = w / 2.0, h / 2.0

    # the camera sits at the origin inside the room, looking along +z
    room_lo = np.array([-6.0, -4.5, -1.0])
    room_hi = np.array([6.0, 4.5, 12.0])
    n_boxes = int(rng.integers(3, 7))
    boxes = []
    for _ in range(n_boxes):
        center = np.array([rng.uniform(-3.5, 3.5), rng.uniform(-2.5, 2.5),
                           rng.uniform(3.0, 9.0)])
        size = rng.uniform(0.6, 2.4, size=3)
        boxes.append((center - size / 2.0, center + size / 2.0))
    box_colors = _face_colors(rng, n_boxes)
    room_colors = _face_colors(rng, 1)[0]

    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    dirs = np.stack([(us.ravel() + 0.5 - cx) / f,
                     (vs.ravel() + 0.5 - cy) / f,
                     np.ones(h * w)], axis=1)

    # the room is hit from inside at its exit distance; it closes every ray
    _, t_room = _ray_box_hits(dirs, room_lo, room_hi)
    best_t = t_room.copy()
    best_box = np.full(h * w, -1, dtype=np.int64)
    for i, (lo, hi) in enumerate(boxes):
        t_enter, t_exit = _ray_box_hits(dirs, lo, hi)
        hit = (t_enter > 1e-9) & (t_enter <= t_exit) & (t_enter < best_t)
        best_t[hit] = t_enter[hit]
        best_box[hit] = i

    hits = dirs * best_t[:, None]
    colors = np.empty((h * w, 3))
    room_rays = best_box < 0
    colors[room_rays] = room_colors[_hit_face(hits[room_rays], room_lo, room_hi)]
    for i, (lo, hi) in enumerate(boxes):
        sel = best_box == i
        if sel.any():
            colors[sel] = box_colors[i][_hit_face(hits[sel], lo, hi)]
    # mild depth shading keeps values in (0, 1) and faces distinguishable
    shade = 1.0 / (1.0 + 0.06 * best_t)
    image = (colors * shade[:, None]).reshape(h, w, 3)

    chosen = rng.choice(h * w, size=profile.n_points, replace=False)
    points = hits[chosen]
    point_colors = image.reshape(-1, 3)[chosen].copy()

    K = np.array([[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    cam = CameraModel(K=K, Rt=np.eye(4), h=h, w=w)
    return Scene(points=points, image=image, cam=cam, point_colors=point_colors,
                 provenance={"seed": int(seed), "profile": profile.name,
                             "boxes": n_boxes})
