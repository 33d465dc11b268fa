"""Procedural diagnostic datasets.

Paired (source video, instruction, target video, annotations) samples:

* ``smnist`` / ``dmnist``: one or two glyph digits bouncing off the
  canvas walls; edits replace a digit or change its starting direction.
* ``eclevr``: a static anchor shape plus a moving shape; edits change
  properties (color/shape/size) of the mover and send it to a final
  position relative to the anchor.

All geometry is integer (positions, speeds, reflections), so samples
are byte-stable across runs and platforms.  Rendering is painter's
order: later objects draw over earlier ones.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError

FG_THRESHOLD = 0.15  # foreground level shared by annotations and detection

DIRECTIONS = {
    "upper left": (-1, -1),
    "upper right": (1, -1),
    "lower left": (-1, 1),
    "lower right": (1, 1),
}

RELATIONS = ("left of", "right of", "behind", "in front of")

CLEVR_COLORS = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}

SHAPES = ("circle", "square", "triangle")
SIZES = ("small", "large")


# ---------------------------------------------------------------------------
# sprites
# ---------------------------------------------------------------------------

# seven-segment membership per digit: (top, tr, br, bottom, bl, tl, mid)
_SEGMENTS = {
    0: (1, 1, 1, 1, 1, 1, 0),
    1: (0, 1, 1, 0, 0, 0, 0),
    2: (1, 1, 0, 1, 1, 0, 1),
    3: (1, 1, 1, 1, 0, 0, 1),
    4: (0, 1, 1, 0, 0, 1, 1),
    5: (1, 0, 1, 1, 0, 1, 1),
    6: (1, 0, 1, 1, 1, 1, 1),
    7: (1, 1, 1, 0, 0, 0, 0),
    8: (1, 1, 1, 1, 1, 1, 1),
    9: (1, 1, 1, 1, 0, 1, 1),
}


def draw_digit(digit: int, size: int) -> np.ndarray:
    """Procedural seven-segment digit bitmap, values in {0, 1}."""
    if digit not in _SEGMENTS:
        raise InputError(f"digit class {digit} outside 0-9")
    if size < 7:
        raise ConfigError(f"digit sprite size {size} too small")
    img = np.zeros((size, size), dtype=np.float32)
    t = max(2, size // 7)
    w = max(3, (2 * size) // 3)
    x0 = (size - w) // 2
    x1 = x0 + w
    mid0 = (size - t) // 2
    top, tr, br, bottom, bl, tl, mid = _SEGMENTS[digit]
    if top:
        img[0:t, x0:x1] = 1.0
    if bottom:
        img[size - t:size, x0:x1] = 1.0
    if mid:
        img[mid0:mid0 + t, x0:x1] = 1.0
    if tl:
        img[0:mid0 + t, x0:x0 + t] = 1.0
    if bl:
        img[mid0:size, x0:x0 + t] = 1.0
    if tr:
        img[0:mid0 + t, x1 - t:x1] = 1.0
    if br:
        img[mid0:size, x1 - t:x1] = 1.0
    return img


def draw_shape(kind: str, size: int) -> np.ndarray:
    """Filled shape mask in {0, 1}; no anti-aliasing (determinism)."""
    if kind not in SHAPES:
        raise InputError(f"unknown shape {kind!r}")
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if kind == "circle":
        mask = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0 - 0.5) ** 2
    elif kind == "square":
        mask = np.ones((size, size), dtype=bool)
    else:  # upright triangle: apex at top center, full-width base
        mask = 2.0 * np.abs(xx - c) <= (yy + 1) * (size - 1) / size
    return mask.astype(np.float32)


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    idx = (np.arange(size) * img.shape[0]) // size
    return img[idx][:, idx]


class GlyphBank:
    """Digit bitmaps by class, procedural or loaded from IDX files."""

    def __init__(self, glyphs: dict[int, list[np.ndarray]], source: str):
        self.glyphs = glyphs
        self.source = source

    @classmethod
    def procedural(cls, size: int) -> "GlyphBank":
        return cls({d: [draw_digit(d, size)] for d in range(10)}, "procedural")

    @classmethod
    def from_idx(cls, images_path, labels_path, size: int) -> "GlyphBank":
        images, labels = load_mnist_idx(images_path, labels_path)
        glyphs: dict[int, list[np.ndarray]] = {d: [] for d in range(10)}
        for img, lab in zip(images, labels):
            glyphs[int(lab)].append(_resize_nearest(img, size))
        return cls(glyphs, "mnist-idx")

    def sprite(self, digit: int, variant: int) -> np.ndarray:
        pool = self.glyphs.get(digit)
        if not pool:
            raise InputError(f"no glyphs for digit {digit}")
        return pool[variant % len(pool)]

    def variants(self, digit: int) -> int:
        return len(self.glyphs.get(digit, ()))


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse big-endian IDX image/label files; pixels scaled to [0, 1]."""
    raw = Path(images_path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated IDX header (offset {len(raw)})")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 0x00000803:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x} at offset 0")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{images_path}: truncated at offset {len(raw)} (expected {need})")
    images = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = images.reshape(count, rows, cols).astype(np.float32) / 255.0

    rawl = Path(labels_path).read_bytes()
    if len(rawl) < 8:
        raise FormatError(f"{labels_path}: truncated IDX header (offset {len(rawl)})")
    magicl, countl = struct.unpack(">II", rawl[:8])
    if magicl != 0x00000801:
        raise FormatError(f"{labels_path}: bad label magic 0x{magicl:08x} at offset 0")
    if len(rawl) < 8 + countl:
        raise FormatError(f"{labels_path}: truncated at offset {len(rawl)}")
    labels = np.frombuffer(rawl, dtype=np.uint8, count=countl, offset=8)
    if countl != count:
        raise FormatError(f"image/label counts differ: {count} vs {countl}")
    return images, labels


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

def _fold(p: int, maxp: int, d: int) -> tuple[int, int]:
    if maxp == 0:  # sprite spans the axis: no room to move
        return 0, d
    while p < 0 or p > maxp:
        if p < 0:
            p = -p
        else:
            p = 2 * maxp - p
        d = -d
    return p, d


def simulate_bounce(start: tuple[int, int], direction: tuple[int, int], speed: int,
                    steps: int, bounds: tuple[int, int], sprite_size: int) -> list[tuple[int, int]]:
    """Integer billiard trajectory; reflections mirror the overshoot.

    ``bounds`` is the canvas (width, height).  Returns ``steps`` anchor
    positions, the first being ``start``.
    """
    max_x = bounds[0] - sprite_size
    max_y = bounds[1] - sprite_size
    if max_x < 0 or max_y < 0:
        raise ConfigError(f"sprite size {sprite_size} exceeds canvas {bounds}")
    x, y = start
    if not (0 <= x <= max_x and 0 <= y <= max_y):
        raise InputError(f"start {start} leaves sprite outside canvas")
    dx, dy = direction
    out = [(x, y)]
    for _ in range(steps - 1):
        x, dx = _fold(x + speed * dx, max_x, dx)
        y, dy = _fold(y + speed * dy, max_y, dy)
        out.append((x, y))
    return out


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class ObjectSpec:
    obj_id: int
    kind: str                      # "digit" | "shape"
    cls: str                       # digit "0".."9" or shape name
    properties: dict               # digit: {variant}; shape: {color, size_label}
    size: int                      # sprite box in pixels
    start: tuple[int, int]
    direction: tuple[int, int]     # (0, 0) for static objects
    speed: int
    path: list[tuple[int, int]] = field(default_factory=list)  # explicit target path

    def to_dict(self):
        d = asdict(self)
        d["start"] = list(self.start)
        d["direction"] = list(self.direction)
        d["path"] = [list(p) for p in self.path]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["start"] = tuple(d["start"])
        d["direction"] = tuple(d["direction"])
        d["path"] = [tuple(p) for p in d["path"]]
        return cls(**d)


@dataclass
class SceneSpec:
    height: int
    width: int
    n_frames: int
    channels: int
    objects: list[ObjectSpec]

    def to_dict(self):
        return {"height": self.height, "width": self.width, "n_frames": self.n_frames,
                "channels": self.channels, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d):
        return cls(height=d["height"], width=d["width"], n_frames=d["n_frames"],
                   channels=d["channels"],
                   objects=[ObjectSpec.from_dict(o) for o in d["objects"]])


def object_trajectory(obj: ObjectSpec, scene: SceneSpec) -> list[tuple[int, int]]:
    if obj.path:
        return list(obj.path)
    if obj.direction == (0, 0):
        return [obj.start] * scene.n_frames
    return simulate_bounce(obj.start, obj.direction, obj.speed, scene.n_frames,
                           (scene.width, scene.height), obj.size)


def _sprite_pixels(obj: ObjectSpec, bank: GlyphBank | None, channels: int):
    """Returns (values (s,s,C) uint8, mask (s,s) bool)."""
    if obj.kind == "digit":
        if bank is None:
            raise InputError("digit objects need a glyph bank")
        g = bank.sprite(int(obj.cls), obj.properties.get("variant", 0))
        if g.shape[0] != obj.size:
            g = _resize_nearest(g, obj.size)
        mask = g > FG_THRESHOLD
        vals = np.round(g * 255).astype(np.uint8)[..., None]
        vals = np.repeat(vals, channels, axis=-1)
        return vals, mask
    mask = draw_shape(obj.cls, obj.size) > 0.5
    color = np.array(CLEVR_COLORS[obj.properties["color"]], dtype=np.uint8)
    vals = np.zeros((obj.size, obj.size, channels), dtype=np.uint8)
    vals[mask] = color[:channels]
    return vals, mask


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def render_frame(scene: SceneSpec, positions: list[tuple[int, int]],
                 bank: GlyphBank | None) -> np.ndarray:
    """Rasterize one frame (uint8, black background, painter's order)."""
    frame = np.zeros((scene.height, scene.width, scene.channels), dtype=np.uint8)
    for obj, (x, y) in zip(scene.objects, positions):
        if x < 0 or y < 0 or x + obj.size > scene.width or y + obj.size > scene.height:
            raise InputError(f"object {obj.obj_id} at {(x, y)} leaves the canvas")
        vals, mask = _sprite_pixels(obj, bank, scene.channels)
        region = frame[y:y + obj.size, x:x + obj.size]
        region[mask] = vals[mask]
    return frame


def render_scene(scene: SceneSpec, bank: GlyphBank | None):
    """Render all frames plus per-frame per-object annotations."""
    trajs = [object_trajectory(o, scene) for o in scene.objects]
    frames = []
    annos = []
    boxes_rel = []
    for obj in scene.objects:
        _, mask = _sprite_pixels(obj, bank, scene.channels)
        boxes_rel.append(_tight_box(mask))
    for i in range(scene.n_frames):
        pos = [trajs[k][i] for k in range(len(scene.objects))]
        frames.append(render_frame(scene, pos, bank))
        frame_anno = []
        for obj, (x, y), (bx0, by0, bx1, by1) in zip(scene.objects, pos, boxes_rel):
            frame_anno.append({
                "object": obj.obj_id,
                "kind": obj.kind,
                "class": obj.cls,
                "properties": dict(obj.properties),
                "size": obj.size,
                "anchor": [x, y],
                "bbox": [x + bx0, y + by0, x + bx1, y + by1],
            })
        annos.append(frame_anno)
    return np.stack(frames), annos


def render_from_annotations(meta: dict, annos: list, bank: GlyphBank | None) -> np.ndarray:
    """Re-render a video purely from its annotation records."""
    frames = []
    for frame_anno in annos:
        scene = SceneSpec(height=meta["height"], width=meta["width"], n_frames=1,
                          channels=meta["channels"], objects=[])
        positions = []
        for rec in frame_anno:
            obj = ObjectSpec(obj_id=rec["object"], kind=rec["kind"], cls=rec["class"],
                             properties=dict(rec["properties"]), size=rec["size"],
                             start=tuple(rec["anchor"]), direction=(0, 0), speed=0)
            scene.objects.append(obj)
            positions.append(tuple(rec["anchor"]))
        frames.append(render_frame(scene, positions, bank))
    return np.stack(frames)


# ---------------------------------------------------------------------------
# edit actions
# ---------------------------------------------------------------------------

@dataclass
class ReplaceObject:
    obj_id: int
    old_class: str
    new_class: str
    action = "replace"


@dataclass
class ChangeDirection:
    obj_id: int
    old_direction: str
    new_direction: str
    action = "change_direction"


@dataclass
class ChangeProperty:
    obj_id: int
    prop: str
    old_value: str
    new_value: str
    action = "change_property"


@dataclass
class MoveToRelativePosition:
    obj_id: int
    relation: str
    anchor_id: int
    action = "move_relative"


def ast_to_dicts(ast: list) -> list[dict]:
    out = []
    for a in ast:
        d = asdict(a)
        d["action"] = a.action
        out.append(d)
    return out


def ast_from_dicts(dicts: list[dict]) -> list:
    types = {"replace": ReplaceObject, "change_direction": ChangeDirection,
             "change_property": ChangeProperty, "move_relative": MoveToRelativePosition}
    out = []
    for d in dicts:
        d = dict(d)
        cls = types[d.pop("action")]
        out.append(cls(**d))
    return out


# ---------------------------------------------------------------------------
# instruction grammar
# ---------------------------------------------------------------------------

_TEMPLATES = {
    "replace": (
        "replace the number {old} with the number {new}",
        "replace the {old} with a {new}",
        "change the number {old} into the number {new}",
        "swap the {old} for the number {new}",
    ),
    "change_direction": (
        "make the number {cls} move to the {dir}",
        "change the direction of the number {cls} to the {dir}",
        "let the number {cls} travel toward the {dir}",
    ),
    "change_property.color": (
        "change the color of the {obj} to {new}",
        "paint the {obj} {new}",
        "make the {obj} {new}",
    ),
    "change_property.shape": (
        "turn the {obj} into a {new}",
        "change the {obj} to a {new}",
        "make the {obj} a {new}",
    ),
    "change_property.size": (
        "make the {obj} {new}",
        "change the size of the {obj} to {new}",
        "turn the {obj} into a {new} one",
    ),
    "move_relative": (
        "move the {obj} {rel} the {anchor}",
        "place the {obj} {rel} the {anchor}",
        "put the {obj} {rel} the {anchor}",
    ),
}

_REL_PHRASES = {
    "left of": "to the left of",
    "right of": "to the right of",
    "behind": "behind",
    "in front of": "in front of",
}


def _object_phrase(scene: SceneSpec, obj_id: int) -> str:
    obj = next(o for o in scene.objects if o.obj_id == obj_id)
    if obj.kind == "digit":
        return f"number {obj.cls}"
    return f"{obj.properties['color']} {obj.cls}"


def realize_instruction(ast: list, source_scene: SceneSpec, rng: np.random.Generator) -> str:
    """Fill one template per action; actions joined with 'and'."""
    clauses = []
    for a in ast:
        if isinstance(a, ReplaceObject):
            tpl = _TEMPLATES["replace"][rng.integers(len(_TEMPLATES["replace"]))]
            clauses.append(tpl.format(old=a.old_class, new=a.new_class))
        elif isinstance(a, ChangeDirection):
            tpl = _TEMPLATES["change_direction"][rng.integers(len(_TEMPLATES["change_direction"]))]
            cls = next(o.cls for o in source_scene.objects if o.obj_id == a.obj_id)
            clauses.append(tpl.format(cls=cls, dir=a.new_direction))
        elif isinstance(a, ChangeProperty):
            key = f"change_property.{a.prop}"
            tpl = _TEMPLATES[key][rng.integers(len(_TEMPLATES[key]))]
            clauses.append(tpl.format(obj=_object_phrase(source_scene, a.obj_id), new=a.new_value))
        elif isinstance(a, MoveToRelativePosition):
            tpl = _TEMPLATES["move_relative"][rng.integers(len(_TEMPLATES["move_relative"]))]
            clauses.append(tpl.format(obj=_object_phrase(source_scene, a.obj_id),
                                      rel=_REL_PHRASES[a.relation],
                                      anchor=_object_phrase(source_scene, a.anchor_id)))
        else:
            raise InputError(f"unknown action {a!r}")
    return " and ".join(clauses)


def grammar_tokens() -> set[str]:
    """Every token any realized instruction can contain."""
    from .text import split_words
    tokens: set[str] = set()
    for templates in _TEMPLATES.values():
        for tpl in templates:
            tokens.update(split_words(tpl.replace("{", " ").replace("}", " ")))
    tokens.discard("old")
    tokens.discard("new")
    tokens.discard("cls")
    tokens.discard("dir")
    tokens.discard("obj")
    tokens.discard("rel")
    tokens.discard("anchor")
    tokens.update(str(d) for d in range(10))
    for name in DIRECTIONS:
        tokens.update(split_words(name))
    for rel in _REL_PHRASES.values():
        tokens.update(split_words(rel))
    tokens.update(CLEVR_COLORS)
    tokens.update(SHAPES)
    tokens.update(SIZES)
    tokens.add("and")
    return tokens


def build_vocabulary():
    from .text import Vocabulary
    return Vocabulary(grammar_tokens())


# ---------------------------------------------------------------------------
# sample generation
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    kind: str = "smnist"               # smnist | dmnist | eclevr
    n_frames: int = 16
    height: int = 64
    width: int = 64
    digit_size: int = 28
    digit_classes: tuple = tuple(str(d) for d in range(10))
    directions: tuple = tuple(DIRECTIONS)
    speeds: tuple = (2,)
    colors: tuple = tuple(CLEVR_COLORS)
    shapes: tuple = SHAPES
    size_labels: tuple = SIZES
    shape_sizes: tuple = (12, 18)      # pixels for small / large
    avoid_overlap: bool = True
    max_tries: int = 300

    def __post_init__(self):
        if self.kind not in ("smnist", "dmnist", "eclevr"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if len(self.digit_classes) < 2:
            raise ConfigError("need at least two digit classes")
        if len(self.directions) < 2:
            raise ConfigError("need at least two directions")
        self.channels = 3 if self.kind == "eclevr" else 1


@dataclass
class EditSample:
    sample_id: int
    kind: str
    instruction: str
    ast: list
    source_scene: SceneSpec
    target_scene: SceneSpec
    source_video: np.ndarray           # (N, H, W, C) uint8
    target_video: np.ndarray
    annotations: dict                  # {"source": [...], "target": [...]} per frame

    def combos(self) -> set[tuple[str, str]]:
        """(object class, semantic) pairs the target scene asks the model
        to produce: digits pair with their motion direction, the edited
        shape pairs with its color."""
        out = set()
        for obj in self.target_scene.objects:
            if obj.kind == "digit":
                out.add((obj.cls, _direction_name(obj.direction)))
            elif obj.direction == (0, 0) and obj.path:
                out.add((obj.cls, obj.properties["color"]))
        return out


def _direction_name(direction: tuple[int, int]) -> str:
    for name, vec in DIRECTIONS.items():
        if tuple(vec) == tuple(direction):
            return name
    return "static"


def _boxes_overlap(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def _trajectories_overlap(scene: SceneSpec) -> bool:
    if len(scene.objects) < 2:
        return False
    trajs = [object_trajectory(o, scene) for o in scene.objects]
    sizes = [o.size for o in scene.objects]
    for i in range(scene.n_frames):
        boxes = [(t[i][0], t[i][1], t[i][0] + s, t[i][1] + s)
                 for t, s in zip(trajs, sizes)]
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                if _boxes_overlap(boxes[a], boxes[b]):
                    return True
    return False


def _sample_motion(cfg: GenConfig, rng: np.random.Generator, size: int):
    max_x = cfg.width - size
    max_y = cfg.height - size
    start = (int(rng.integers(0, max_x + 1)), int(rng.integers(0, max_y + 1)))
    direction = cfg.directions[rng.integers(len(cfg.directions))]
    speed = int(cfg.speeds[rng.integers(len(cfg.speeds))])
    return start, DIRECTIONS[direction], speed, direction


def _make_mnist_scene(cfg: GenConfig, rng: np.random.Generator, n_objects: int,
                      bank: GlyphBank) -> SceneSpec:
    for _ in range(cfg.max_tries):
        classes = rng.choice(len(cfg.digit_classes), size=n_objects, replace=False)
        objects = []
        for oid, ci in enumerate(classes):
            cls = cfg.digit_classes[int(ci)]
            start, dvec, speed, _ = _sample_motion(cfg, rng, cfg.digit_size)
            variant = int(rng.integers(max(1, bank.variants(int(cls)))))
            objects.append(ObjectSpec(obj_id=oid, kind="digit", cls=cls,
                                      properties={"variant": variant},
                                      size=cfg.digit_size, start=start,
                                      direction=dvec, speed=speed))
        scene = SceneSpec(cfg.height, cfg.width, cfg.n_frames, cfg.channels, objects)
        if not cfg.avoid_overlap or not _trajectories_overlap(scene):
            return scene
    return scene  # accept the last candidate when rejection keeps failing


def _apply_mnist_ast(cfg: GenConfig, rng: np.random.Generator,
                     source: SceneSpec, ast: list, bank: GlyphBank) -> SceneSpec:
    target = SceneSpec.from_dict(source.to_dict())
    for action in ast:
        obj = next(o for o in target.objects if o.obj_id == action.obj_id)
        if isinstance(action, ReplaceObject):
            obj.cls = action.new_class
            obj.properties["variant"] = int(rng.integers(max(1, bank.variants(int(action.new_class)))))
        elif isinstance(action, ChangeDirection):
            obj.direction = DIRECTIONS[action.new_direction]
    return target


def gen_emnist(cfg: GenConfig, sample_id: int, seed_seq: np.random.SeedSequence,
               bank: GlyphBank) -> EditSample:
    """One single- or double-digit editing sample."""
    rng = np.random.default_rng(seed_seq)
    n_objects = 2 if cfg.kind == "dmnist" else 1
    for attempt in range(cfg.max_tries):
        source = _make_mnist_scene(cfg, rng, n_objects, bank)
        if cfg.kind == "smnist":
            obj = source.objects[0]
            if rng.integers(2) == 0:
                pool = [c for c in cfg.digit_classes if c != obj.cls]
                ast = [ReplaceObject(obj.obj_id, obj.cls, pool[rng.integers(len(pool))])]
            else:
                old = _direction_name(obj.direction)
                pool = [d for d in cfg.directions if d != old]
                ast = [ChangeDirection(obj.obj_id, old, pool[rng.integers(len(pool))])]
        else:
            ids = list(rng.permutation(2))
            rep = source.objects[ids[0]]
            rot = source.objects[ids[1]]
            pool = [c for c in cfg.digit_classes
                    if c not in (rep.cls, rot.cls)]
            if not pool:  # two classes in play: swap identities is ambiguous, re-draw
                pool = [c for c in cfg.digit_classes if c != rep.cls]
            old_dir = _direction_name(rot.direction)
            dpool = [d for d in cfg.directions if d != old_dir]
            ast = [ReplaceObject(rep.obj_id, rep.cls, pool[rng.integers(len(pool))]),
                   ChangeDirection(rot.obj_id, old_dir, dpool[rng.integers(len(dpool))])]
        target = _apply_mnist_ast(cfg, rng, source, ast, bank)
        if cfg.avoid_overlap and _trajectories_overlap(target) and attempt < cfg.max_tries - 1:
            continue
        break
    instruction = realize_instruction(ast, source, rng)
    src_video, src_anno = render_scene(source, bank)
    tgt_video, tgt_anno = render_scene(target, bank)
    return EditSample(sample_id=sample_id, kind=cfg.kind, instruction=instruction,
                      ast=ast, source_scene=source, target_scene=target,
                      source_video=src_video, target_video=tgt_video,
                      annotations={"source": src_anno, "target": tgt_anno})


def _linear_path(start: tuple[int, int], end: tuple[int, int], steps: int) -> list[tuple[int, int]]:
    if steps == 1:
        return [start]
    out = []
    for i in range(steps):
        f = i / (steps - 1)
        out.append((int(round(start[0] + f * (end[0] - start[0]))),
                    int(round(start[1] + f * (end[1] - start[1])))))
    return out


def _relation_offset(relation: str, gap: int) -> tuple[int, int]:
    return {"left of": (-gap, 0), "right of": (gap, 0),
            "behind": (0, -gap), "in front of": (0, gap)}[relation]


def gen_eclevr2d(cfg: GenConfig, sample_id: int, seed_seq: np.random.SeedSequence) -> EditSample:
    """Anchor + mover scene; property change plus relative reposition."""
    rng = np.random.default_rng(seed_seq)
    for attempt in range(cfg.max_tries):
        anchor_shape = cfg.shapes[rng.integers(len(cfg.shapes))]
        mover_shape = [s for s in cfg.shapes if s != anchor_shape][rng.integers(len(cfg.shapes) - 1)]
        anchor_size_lab = cfg.size_labels[rng.integers(2)]
        mover_size_lab = cfg.size_labels[rng.integers(2)]
        a_px = cfg.shape_sizes[cfg.size_labels.index(anchor_size_lab)]
        m_px = cfg.shape_sizes[cfg.size_labels.index(mover_size_lab)]
        margin = max(a_px, m_px) + 4
        ax = int(rng.integers(margin, cfg.width - margin - a_px + 1))
        ay = int(rng.integers(margin, cfg.height - margin - a_px + 1))
        anchor = ObjectSpec(obj_id=0, kind="shape", cls=anchor_shape,
                            properties={"color": cfg.colors[rng.integers(len(cfg.colors))],
                                        "size_label": anchor_size_lab},
                            size=a_px, start=(ax, ay), direction=(0, 0), speed=0)
        start, dvec, speed, _ = _sample_motion(cfg, rng, m_px)
        mover = ObjectSpec(obj_id=1, kind="shape", cls=mover_shape,
                           properties={"color": cfg.colors[rng.integers(len(cfg.colors))],
                                       "size_label": mover_size_lab},
                           size=m_px, start=start, direction=dvec, speed=speed)
        source = SceneSpec(cfg.height, cfg.width, cfg.n_frames, cfg.channels, [anchor, mover])
        if cfg.avoid_overlap and _trajectories_overlap(source):
            continue

        props = [p for p in ("color", "shape", "size")]
        prop = props[rng.integers(len(props))]
        if prop == "color":
            pool = [c for c in cfg.colors if c != mover.properties["color"]]
            change = ChangeProperty(1, "color", mover.properties["color"],
                                    pool[rng.integers(len(pool))])
        elif prop == "shape":
            pool = [s for s in cfg.shapes if s not in (mover_shape, anchor_shape)]
            if not pool:
                continue
            change = ChangeProperty(1, "shape", mover_shape, pool[rng.integers(len(pool))])
        else:
            new_lab = [s for s in cfg.size_labels if s != mover_size_lab][0]
            change = ChangeProperty(1, "size", mover_size_lab, new_lab)

        relation = RELATIONS[rng.integers(len(RELATIONS))]
        move = MoveToRelativePosition(1, relation, 0)
        ast = [change, move]

        target = SceneSpec.from_dict(source.to_dict())
        t_mover = target.objects[1]
        if change.prop == "color":
            t_mover.properties["color"] = change.new_value
        elif change.prop == "shape":
            t_mover.cls = change.new_value
        else:
            t_mover.properties["size_label"] = change.new_value
            t_mover.size = cfg.shape_sizes[cfg.size_labels.index(change.new_value)]
            # a grown sprite may need nudging back inside the canvas
            t_mover.start = (min(t_mover.start[0], cfg.width - t_mover.size),
                             min(t_mover.start[1], cfg.height - t_mover.size))
        gap = (anchor.size + t_mover.size) // 2 + 3
        off = _relation_offset(relation, gap)
        a_cx = anchor.start[0] + anchor.size // 2
        a_cy = anchor.start[1] + anchor.size // 2
        fx = a_cx + off[0] - t_mover.size // 2
        fy = a_cy + off[1] - t_mover.size // 2
        if not (0 <= fx <= cfg.width - t_mover.size and 0 <= fy <= cfg.height - t_mover.size):
            continue
        t_mover.direction = (0, 0)
        t_mover.speed = 0
        t_mover.path = _linear_path(t_mover.start, (fx, fy), cfg.n_frames)
        if cfg.avoid_overlap and _trajectories_overlap(target):
            continue
        instruction = realize_instruction(ast, source, rng)
        src_video, src_anno = render_scene(source, None)
        tgt_video, tgt_anno = render_scene(target, None)
        return EditSample(sample_id=sample_id, kind=cfg.kind, instruction=instruction,
                          ast=ast, source_scene=source, target_scene=target,
                          source_video=src_video, target_video=tgt_video,
                          annotations={"source": src_anno, "target": tgt_anno})
    raise ConfigError(f"could not build a valid scene in {cfg.max_tries} tries "
                      f"(canvas too small for the configured sprites?)")


def generate_sample(cfg: GenConfig, dataset_seed: int, index: int,
                    bank: GlyphBank | None = None) -> EditSample:
    seq = np.random.SeedSequence([dataset_seed, index])
    if cfg.kind in ("smnist", "dmnist"):
        if bank is None:
            bank = GlyphBank.procedural(cfg.digit_size)
        return gen_emnist(cfg, index, seq, bank)
    return gen_eclevr2d(cfg, index, seq)


# ---------------------------------------------------------------------------
# splits, manifests, on-disk format
# ---------------------------------------------------------------------------

SAMPLE_MAGIC = b"VESMPL01"
DATASET_VERSION = 1


@dataclass
class DatasetManifest:
    split: str
    count: int
    seed: int
    kind: str
    n_frames: int
    height: int
    width: int
    channels: int
    config_hash: str
    holdout: list = field(default_factory=list)
    version: int = DATASET_VERSION

    def save(self, path):
        lines = [f"version={self.version}", f"split={self.split}", f"count={self.count}",
                 f"seed={self.seed}", f"kind={self.kind}", f"n_frames={self.n_frames}",
                 f"height={self.height}", f"width={self.width}", f"channels={self.channels}",
                 f"config_hash={self.config_hash}",
                 "holdout=" + ";".join(",".join(c) for c in self.holdout)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise FormatError(f"missing manifest {path}")
        fields = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                fields[key] = val
        holdout = [tuple(c.split(",")) for c in fields.get("holdout", "").split(";") if c]
        return cls(split=fields["split"], count=int(fields["count"]), seed=int(fields["seed"]),
                   kind=fields["kind"], n_frames=int(fields["n_frames"]),
                   height=int(fields["height"]), width=int(fields["width"]),
                   channels=int(fields["channels"]), config_hash=fields["config_hash"],
                   holdout=holdout, version=int(fields["version"]))


def config_hash(cfg: GenConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def all_combinations(cfg: GenConfig) -> list[tuple[str, str]]:
    if cfg.kind in ("smnist", "dmnist"):
        return [(c, d) for c in cfg.digit_classes for d in cfg.directions]
    return [(s, c) for s in cfg.shapes for c in cfg.colors]


def default_holdout(cfg: GenConfig, n: int = 10) -> list[tuple[str, str]]:
    combos = all_combinations(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([20240101, len(combos)]))
    n = min(n, max(1, len(combos) // 4))
    picks = rng.choice(len(combos), size=n, replace=False)
    return [combos[int(i)] for i in sorted(picks)]


def sample_bytes(sample: EditSample) -> bytes:
    meta = {
        "sample_id": sample.sample_id,
        "kind": sample.kind,
        "instruction": sample.instruction,
        "ast": ast_to_dicts(sample.ast),
        "source_scene": sample.source_scene.to_dict(),
        "target_scene": sample.target_scene.to_dict(),
        "annotations": sample.annotations,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<II", DATASET_VERSION, len(blob))
    body += blob
    for arr in (sample.source_video, sample.target_video):
        body += struct.pack("<BIIII", 2, *arr.shape)
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return SAMPLE_MAGIC + bytes(body) + struct.pack("<I", crc)


def sample_from_bytes(raw: bytes) -> EditSample:
    if raw[:8] != SAMPLE_MAGIC:
        raise FormatError("not a sample container (bad magic)")
    body, crc_stored = raw[8:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError("sample container failed checksum")
    version, blob_len = struct.unpack("<II", body[:8])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported sample version {version}")
    meta = json.loads(body[8:8 + blob_len].decode("utf-8"))
    offset = 8 + blob_len
    videos = []
    for _ in range(2):
        dtype_code, n, h, w, c = struct.unpack("<BIIII", body[offset:offset + 17])
        if dtype_code != 2:
            raise FormatError(f"unexpected video dtype code {dtype_code}")
        offset += 17
        count = n * h * w * c
        videos.append(np.frombuffer(body[offset:offset + count], dtype=np.uint8)
                      .reshape(n, h, w, c).copy())
        offset += count
    return EditSample(sample_id=meta["sample_id"], kind=meta["kind"],
                      instruction=meta["instruction"], ast=ast_from_dicts(meta["ast"]),
                      source_scene=SceneSpec.from_dict(meta["source_scene"]),
                      target_scene=SceneSpec.from_dict(meta["target_scene"]),
                      source_video=videos[0], target_video=videos[1],
                      annotations=meta["annotations"])


def save_split(directory, manifest: DatasetManifest, samples: list[EditSample]):
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    manifest.save(directory / "manifest.txt")
    for s in samples:
        (directory / "samples" / f"sample_{s.sample_id:06d}.bin").write_bytes(sample_bytes(s))


def load_split(directory) -> tuple[DatasetManifest, list[EditSample]]:
    directory = Path(directory)
    manifest = DatasetManifest.load(directory / "manifest.txt")
    samples = []
    for i in range(manifest.count):
        path = directory / "samples" / f"sample_{i:06d}.bin"
        if not path.exists():
            raise FormatError(f"missing sample file {path}")
        samples.append(sample_from_bytes(path.read_bytes()))
    return manifest, samples


def generate_split(cfg: GenConfig, split: str, count: int, seed: int,
                   holdout: list[tuple[str, str]] | None = None,
                   bank: GlyphBank | None = None) -> tuple[DatasetManifest, list[EditSample]]:
    """Generate ``count`` samples; train splits skip held-out combinations.

    Sample i's RNG derives from (seed, i, attempt), so generation order
    and parallelism cannot change the result.
    """
    holdout = holdout or []
    holdset = {tuple(c) for c in holdout}
    if holdset and holdset >= set(all_combinations(cfg)):
        raise ConfigError("holdout list covers every object-semantic combination")
    if count < 1:
        raise InputError("sample count must be >= 1")
    if bank is None and cfg.kind in ("smnist", "dmnist"):
        bank = GlyphBank.procedural(cfg.digit_size)
    apply_holdout = split == "train" and bool(holdset)
    samples = []
    for i in range(count):
        attempt = 0
        while True:
            seq = np.random.SeedSequence([seed, i, attempt])
            if cfg.kind in ("smnist", "dmnist"):
                s = gen_emnist(cfg, i, seq, bank)
            else:
                s = gen_eclevr2d(cfg, i, seq)
            if not apply_holdout or not (s.combos() & holdset):
                break
            attempt += 1
            if attempt > 1000:
                raise ConfigError("holdout rejection did not terminate")
        samples.append(s)
    manifest = DatasetManifest(split=split, count=count, seed=seed, kind=cfg.kind,
                               n_frames=cfg.n_frames, height=cfg.height, width=cfg.width,
                               channels=cfg.channels, config_hash=config_hash(cfg),
                               holdout=[list(c) for c in holdout])
    return manifest, samples


def make_splits(cfg: GenConfig, root, train_count: int, test_count: int, seed: int,
                zero_shot: bool = False, holdout: list | None = None,
                bank: GlyphBank | None = None) -> tuple[DatasetManifest, DatasetManifest]:
    """Write train/test splits with disjoint seeds under ``root``."""
    root = Path(root)
    if zero_shot and holdout is None:
        holdout = default_holdout(cfg)
    train_m, train_s = generate_split(cfg, "train", train_count, seed * 2 + 1,
                                      holdout if zero_shot else None, bank)
    test_m, test_s = generate_split(cfg, "test", test_count, seed * 2 + 2, None, bank)
    if zero_shot:
        test_m.holdout = [list(c) for c in holdout]
    save_split(root / "train", train_m, train_s)
    save_split(root / "test", test_m, test_s)
    return train_m, test_m


PIXEL_SCALE = 0.9  # keep targets inside tanh's linear-ish range


def videos_to_model(videos: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-PIXEL_SCALE, PIXEL_SCALE].

    A trained pixel head ends in tanh; targets at exactly +-1 sit in its
    saturated tail where gradients vanish, so videos are mapped slightly
    inside the representable range.
    """
    return ((videos.astype(np.float32) / 127.5) - 1.0) * PIXEL_SCALE


def model_to_videos(arr: np.ndarray) -> np.ndarray:
    """float [-PIXEL_SCALE, PIXEL_SCALE] -> uint8 [0,255] (clipped)."""
    return np.clip(np.rint((arr / PIXEL_SCALE + 1.0) * 127.5), 0, 255).astype(np.uint8)
