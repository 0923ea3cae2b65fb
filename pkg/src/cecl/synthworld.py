"""Compositional micro-world: two attributed objects, a spatial relation and
an action, rendered to a feature vector and described by templated captions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .evalbench import BenchItem
from .hardneg import NegType, record_stream

RELATION_WORDS = {"left_of": "left of", "right_of": "right of", "above": "above", "below": "below"}
MIRROR = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}
# (x1, y1, x2, y2) for object 1 and object 2
POSITIONS = {
    "left_of": (-0.5, 0.0, 0.5, 0.0),
    "right_of": (0.5, 0.0, -0.5, 0.0),
    "above": (0.0, 0.5, 0.0, -0.5),
    "below": (0.0, -0.5, 0.0, 0.5),
}
TEMPLATES = ("relation", "action")


@dataclass(frozen=True)
class WorldSpec:
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "star", "hexagon", "pentagon")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "purple", "orange")
    sizes: tuple[str, ...] = ("small", "large")
    relations: tuple[str, ...] = ("left_of", "right_of", "above", "below")
    # directed verbs only, so swapping the two objects makes the caption false
    actions: tuple[str, ...] = ("pushing", "pulling", "chasing")

    @property
    def object_dim(self) -> int:
        return len(self.shapes) + len(self.colors) + len(self.sizes)

    @property
    def feature_dim(self) -> int:
        return 2 * self.object_dim + 4 + len(self.actions)

    @property
    def n_objects(self) -> int:
        return len(self.shapes) * len(self.colors) * len(self.sizes)

    @property
    def n_scenes(self) -> int:
        return self.n_objects * (self.n_objects - 1) * len(self.relations) * len(self.actions)

    def vocabulary(self) -> set[str]:
        words = {"the", "is", "of"} | set(self.shapes) | set(self.colors) | set(self.sizes) | set(self.actions)
        for r in self.relations:
            words.update(RELATION_WORDS[r].split())
        return words


@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    size: str

    def phrase(self) -> str:
        return f"{self.color} {self.size} {self.shape}"


@dataclass(frozen=True)
class Scene:
    obj1: Obj
    obj2: Obj
    relation: str
    action: str

    def key(self) -> tuple:
        return (self.obj1, self.obj2, self.relation, self.action)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(Obj(**d["obj1"]), Obj(**d["obj2"]), d["relation"], d["action"])


def mirror(scene: Scene) -> Scene:
    """Same spatial layout described from the other object."""
    return Scene(scene.obj2, scene.obj1, MIRROR[scene.relation], scene.action)


def sample_scene(rng: np.random.Generator, world: WorldSpec = WorldSpec()) -> Scene:
    def pick(options):
        return options[int(rng.integers(len(options)))]

    while True:
        o1 = Obj(pick(world.shapes), pick(world.colors), pick(world.sizes))
        o2 = Obj(pick(world.shapes), pick(world.colors), pick(world.sizes))
        rel, act = pick(world.relations), pick(world.actions)
        if o1 != o2:
            return Scene(o1, o2, rel, act)


def caption_of(scene: Scene, template_id: str = "relation") -> str:
    if template_id == "relation":
        middle = RELATION_WORDS[scene.relation]
    elif template_id == "action":
        middle = scene.action
    else:
        raise ValueError(f"unknown template {template_id!r}")
    return f"the {scene.obj1.phrase()} is {middle} the {scene.obj2.phrase()}"


def parse_caption(caption: str, world: WorldSpec = WorldSpec()) -> dict:
    """Inverse of ``caption_of``: {'obj1', 'obj2', 'relation' | 'action'}."""
    words = caption.split()
    if len(words) < 10 or words[0] != "the" or words[4] != "is":
        raise ValueError(f"not a world caption: {caption!r}")
    obj1 = Obj(shape=words[3], color=words[1], size=words[2])
    tail = words[5:]
    obj2 = Obj(shape=tail[-1], color=tail[-3], size=tail[-2])
    if tail[-4] != "the":
        raise ValueError(f"not a world caption: {caption!r}")
    middle = " ".join(tail[:-4])
    out = {"obj1": obj1, "obj2": obj2}
    rel = {v: k for k, v in RELATION_WORDS.items()}.get(middle)
    if rel is not None:
        out["relation"] = rel
    elif middle in world.actions:
        out["action"] = middle
    else:
        raise ValueError(f"unknown relation/action {middle!r}")
    return out


def _one_hot(value: str, options: Sequence[str]) -> np.ndarray:
    v = np.zeros(len(options))
    v[options.index(value)] = 1.0
    return v


def _object_block(obj: Obj, world: WorldSpec) -> np.ndarray:
    return np.concatenate(
        [_one_hot(obj.shape, world.shapes), _one_hot(obj.color, world.colors), _one_hot(obj.size, world.sizes)]
    )


def render_features(
    scene: Scene, sigma: float = 0.05, rng: np.random.Generator | None = None, world: WorldSpec = WorldSpec()
) -> np.ndarray:
    """[obj1 block | obj2 block | x1 y1 x2 y2 | action one-hot] + U(-sigma, sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.concatenate(
        [
            _object_block(scene.obj1, world),
            _object_block(scene.obj2, world),
            np.asarray(POSITIONS[scene.relation]),
            _one_hot(scene.action, world.actions),
        ]
    )
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = x + rng.uniform(-sigma, sigma, size=x.shape)
    return x


def decode_features(feature: Sequence[float], world: WorldSpec = WorldSpec()) -> Scene:
    x = np.asarray(feature, dtype=np.float64)
    ns, nc, nz, od = len(world.shapes), len(world.colors), len(world.sizes), world.object_dim

    def obj(block):
        return Obj(
            world.shapes[int(np.argmax(block[:ns]))],
            world.colors[int(np.argmax(block[ns : ns + nc]))],
            world.sizes[int(np.argmax(block[ns + nc : ns + nc + nz]))],
        )

    x1, y1, x2, y2 = x[2 * od : 2 * od + 4]
    dx, dy = x2 - x1, y2 - y1
    if abs(dx) >= abs(dy):
        rel = "left_of" if dx > 0 else "right_of"
    else:
        rel = "above" if dy < 0 else "below"
    action = world.actions[int(np.argmax(x[2 * od + 4 :]))]
    return Scene(obj(x[:od]), obj(x[od : 2 * od]), rel, action)


@dataclass
class DatasetRecord:
    id: str
    feature: list[float]
    caption: str
    scene: Scene
    alt_captions: list[str] = field(default_factory=list)
    hard_negatives: dict[str, str] | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "feature": list(self.feature), "caption": self.caption, "scene": self.scene.to_dict()}
        if self.alt_captions:
            d["alt_captions"] = list(self.alt_captions)
        if self.hard_negatives:
            d.update(self.hard_negatives)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        hn = {k: d[k] for k in ("hn_rel", "hn_att", "hn_act", "hn_obj") if k in d} or None
        scene = Scene.from_dict(d["scene"]) if d.get("scene") else None
        return cls(str(d["id"]), list(d["feature"]), d["caption"], scene, list(d.get("alt_captions", [])), hn)


@dataclass
class Dataset:
    train: list[DatasetRecord]
    eval: list[DatasetRecord]
    bench: list[BenchItem]


def _pick_other(options: Sequence[str], current: str, rng: np.random.Generator) -> str:
    others = [o for o in options if o != current]
    return others[int(rng.integers(len(others)))]


def typed_negatives(
    scene: Scene, template_id: str, rng: np.random.Generator, world: WorldSpec = WorldSpec()
) -> list[tuple[str, NegType]]:
    """Ground-truth negatives, each contradicting exactly one component."""
    out = [(caption_of(Scene(scene.obj2, scene.obj1, scene.relation, scene.action), template_id), NegType.REL)]

    which = int(rng.integers(2))
    attr = ("color", "size")[int(rng.integers(2))]
    target = (scene.obj1, scene.obj2)[which]
    options = world.colors if attr == "color" else world.sizes
    changed = Obj(**{**asdict(target), attr: _pick_other(options, getattr(target, attr), rng)})
    objs = [scene.obj1, scene.obj2]
    objs[which] = changed
    out.append((caption_of(Scene(objs[0], objs[1], scene.relation, scene.action), template_id), NegType.ATT))

    if template_id == "action":
        act = _pick_other(world.actions, scene.action, rng)
        out.append((caption_of(Scene(scene.obj1, scene.obj2, scene.relation, act), template_id), NegType.ACT))

    which = int(rng.integers(2))
    target = (scene.obj1, scene.obj2)[which]
    changed = Obj(_pick_other(world.shapes, target.shape, rng), target.color, target.size)
    objs = [scene.obj1, scene.obj2]
    objs[which] = changed
    out.append((caption_of(Scene(objs[0], objs[1], scene.relation, scene.action), template_id), NegType.OBJ))
    return out


def make_dataset(
    world: WorldSpec = WorldSpec(),
    n: int = 2000,
    sigma: float = 0.05,
    seed: int = 0,
    eval_fraction: float = 0.2,
) -> Dataset:
    """``n`` distinct scenes, split into train / eval by scene identity."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > world.n_scenes:
        raise ValueError(f"world has only {world.n_scenes} distinct scenes, asked for {n}")
    scene_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    seen: set = set()
    scenes: list[Scene] = []
    while len(scenes) < n:
        s = sample_scene(scene_rng, world)
        if s.key() not in seen:
            seen.add(s.key())
            scenes.append(s)

    n_eval = int(round(n * eval_fraction))
    n_train = n - n_eval
    train, evals, bench = [], [], []
    for i, scene in enumerate(scenes):
        rng = record_stream(seed, i)
        template = TEMPLATES[int(rng.integers(2))]
        caption = caption_of(scene, template)
        alts = [caption_of(mirror(scene), "relation")] if template == "relation" else []
        feat = render_features(scene, sigma, rng, world)
        rec = DatasetRecord(f"s{seed}-{i:05d}", feat.tolist(), caption, scene, alts)
        if i < n_train:
            train.append(rec)
        else:
            evals.append(rec)
            bench.append(BenchItem(rec.id, rec.feature, caption, typed_negatives(scene, template, rng, world)))
    return Dataset(train, evals, bench)
