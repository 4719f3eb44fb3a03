"""Procedural referring-segmentation scenes.

Scenes are 3x3 grids holding 2-4 coloured shapes. Each object receives 2-4
distinct expressions, and each expression is checked by a brute-force resolver
to pick out that object and nothing else.

Shapes are rasterised on a half-resolution lattice and upscaled 2x with
nearest-neighbour, so every mask boundary falls on a 2-pixel grid. That matches
the 2x2 block structure of the mask decoder's final upsampling.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .encoders import Vocabulary, pad_ids, tokenize

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
BACKGROUND = (0.5, 0.5, 0.5)
SIZES = ("small", "large")
SIZE_WORDS = {"small": ("small", "little"), "large": ("large", "big")}
# radius on the half-resolution lattice
SIZE_RADIUS = {"small": 3.0, "large": 5.0}
RELATIONS = ("left of", "right of", "above", "below")
POSITION_WORDS = ("left", "right", "top", "bottom", "center")
FILLER = ("the", "a", "on", "at", "in", "corner", "object", "of")
MODES = ("mixed", "position_rich", "position_free")


def grammar_vocabulary():
    """Closed vocabulary covering every word the templates can emit (fixed order)."""
    words = list(FILLER) + [w for pair in SIZE_WORDS.values() for w in pair]
    words += list(COLORS) + list(SHAPES) + list(POSITION_WORDS) + ["above", "below"]
    return Vocabulary(words)


class AmbiguityError(ValueError):
    """An expression matched zero or several objects."""


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple  # (row, col) in the 3x3 grid
    center: tuple = (0.0, 0.0)  # (y, x) on the lattice


@dataclass
class SceneSpec:
    image_size: int
    objects: list
    seed: int = 0


@dataclass
class Sample:
    image_id: int
    object_id: int
    expression_id: int
    text: str
    token_ids: list = field(default_factory=list)

    @property
    def key(self):
        return (self.image_id, self.object_id, self.expression_id)

    @property
    def length(self):
        return len(self.token_ids)


# ---------------------------------------------------------------------------
# expression grammar


def _position_phrase(words):
    words = tuple(words)
    if words == ("left",) or words == ("right",):
        return f"on the {words[0]}"
    if words == ("top",) or words == ("bottom",):
        return f"at the {words[0]}"
    if words == ("center",):
        return "in the center"
    return f"in the {words[0]} {words[1]} corner"


def render_expression(desc):
    """desc keys: size, color, shape, pos (tuple of words), rel (word, anchor desc)."""
    parts = ["the"]
    if desc.get("size"):
        parts.append(desc["size"])
    if desc.get("color"):
        parts.append(desc["color"])
    parts.append(desc.get("shape") or "object")
    if desc.get("pos"):
        parts.append(_position_phrase(desc["pos"]))
    if desc.get("rel"):
        rel, anchor = desc["rel"]
        parts.append(f"{rel} the {anchor['color']} {anchor['shape']}")
    return " ".join(parts)


def _parse_description(tokens):
    size_of = {w: s for s, ws in SIZE_WORDS.items() for w in ws}
    desc = {"size": None, "color": None, "shape": None, "pos": []}
    for tok in tokens:
        if tok in size_of:
            desc["size"] = size_of[tok]
        elif tok in COLORS:
            desc["color"] = tok
        elif tok in SHAPES:
            desc["shape"] = tok
        elif tok in POSITION_WORDS:
            desc["pos"].append(tok)
    return desc


def _matches(obj, desc):
    if desc["size"] and obj.size != desc["size"]:
        return False
    if desc["color"] and obj.color != desc["color"]:
        return False
    if desc["shape"] and obj.shape != desc["shape"]:
        return False
    row, col = obj.cell
    for w in desc["pos"]:
        ok = {
            "top": row == 0,
            "bottom": row == 2,
            "left": col == 0,
            "right": col == 2,
            "center": row == 1 and col == 1,
        }[w]
        if not ok:
            return False
    return True


def _unique(candidates):
    if len(candidates) != 1:
        raise AmbiguityError(f"expression matches {len(candidates)} objects")
    return candidates[0]


def resolve_expression_bruteforce(scene, expression):
    """Index of the single object the expression denotes; AmbiguityError otherwise."""
    tokens = tokenize(expression)
    rel = None
    for i, tok in enumerate(tokens):
        if tok in ("above", "below"):
            rel, split, skip = tok, i, 1
            break
        if tok in ("left", "right") and i + 1 < len(tokens) and tokens[i + 1] == "of":
            rel, split, skip = f"{tok} of", i, 2
            break
    if rel is None:
        desc = _parse_description(tokens)
        return _unique([i for i, o in enumerate(scene.objects) if _matches(o, desc)])
    target = _parse_description(tokens[:split])
    anchor_desc = _parse_description(tokens[split + skip :])
    a = _unique([i for i, o in enumerate(scene.objects) if _matches(o, anchor_desc)])
    ar, ac = scene.objects[a].cell

    def related(o):
        r, c = o.cell
        return {"left of": c < ac, "right of": c > ac, "above": r < ar, "below": r > ar}[rel]

    return _unique(
        [i for i, o in enumerate(scene.objects) if i != a and _matches(o, target) and related(o)]
    )


def _position_options(cell):
    row, col = cell
    opts = []
    if col in (0, 2):
        opts.append((("left", "right")[col // 2],))
    if row in (0, 2):
        opts.append((("top", "bottom")[row // 2],))
    if row in (0, 2) and col in (0, 2):
        opts.append((("top", "bottom")[row // 2], ("left", "right")[col // 2]))
    if cell == (1, 1):
        opts.append(("center",))
    return opts


def _relation_options(scene, idx):
    me = scene.objects[idx]
    opts = []
    for j, other in enumerate(scene.objects):
        if j == idx:
            continue
        anchor = {"color": other.color, "shape": other.shape}
        same = [o for o in scene.objects if o.color == other.color and o.shape == other.shape]
        if len(same) != 1:
            continue
        (r, c), (ar, ac) = me.cell, other.cell
        for rel, ok in (("left of", c < ac), ("right of", c > ac), ("above", r < ar), ("below", r > ar)):
            if ok:
                opts.append((rel, anchor))
    return opts


def _random_description(scene, idx, mode, rng):
    obj = scene.objects[idx]
    desc = {}
    if rng.random() < 0.5:
        desc["size"] = SIZE_WORDS[obj.size][int(rng.integers(2))]
    if rng.random() < 0.6:
        desc["color"] = obj.color
    if rng.random() < 0.7:
        desc["shape"] = obj.shape
    use_pos = mode == "position_rich" or (mode == "mixed" and rng.random() < 0.5)
    if use_pos:
        rel_opts = _relation_options(scene, idx)
        if rel_opts and rng.random() < 0.15:
            desc["rel"] = rel_opts[int(rng.integers(len(rel_opts)))]
        else:
            opts = _position_options(obj.cell)
            if opts:
                desc["pos"] = opts[int(rng.integers(len(opts)))]
    return desc


# ---------------------------------------------------------------------------
# rendering


def _rasterize(obj, lattice):
    yy, xx = np.mgrid[0:lattice, 0:lattice] + 0.5
    cy, cx = obj.center
    r = SIZE_RADIUS[obj.size]
    dy, dx = yy - cy, xx - cx
    if obj.shape == "circle":
        return dy * dy + dx * dx <= r * r
    if obj.shape == "square":
        half = 0.85 * r
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # upward triangle inscribed in the circle of radius r
    return (dy <= 0.5 * r) & (dy + r >= np.sqrt(3.0) * np.abs(dx))


def render_scene(scene):
    """RGB image (S, S, 3) uint8 and per-object boolean masks (S, S)."""
    lattice = scene.image_size // 2
    img = np.empty((lattice, lattice, 3))
    img[:] = BACKGROUND
    masks = []
    for obj in scene.objects:
        m = _rasterize(obj, lattice)
        img[m] = COLORS[obj.color]
        masks.append(m)
    up = lambda a: np.repeat(np.repeat(a, 2, axis=0), 2, axis=1)  # noqa: E731
    rgb = np.clip(np.rint(up(img) * 255.0), 0, 255).astype(np.uint8)
    return rgb, [up(m) for m in masks]


def random_scene(image_size, rng, seed=0):
    lattice = image_size // 2
    cell = lattice / 3.0
    n = int(rng.integers(2, 5))
    cells = rng.choice(9, size=n, replace=False)
    objects, seen = [], set()
    while len(objects) < n:
        attrs = (
            SHAPES[int(rng.integers(3))],
            list(COLORS)[int(rng.integers(len(COLORS)))],
            SIZES[int(rng.integers(2))],
        )
        # distinct (shape, colour, size) keeps a position-free description available
        if attrs in seen:
            continue
        seen.add(attrs)
        r, c = divmod(int(cells[len(objects)]), 3)
        jitter = rng.uniform(-0.5, 0.5, size=2)
        center = ((r + 0.5) * cell + jitter[0], (c + 0.5) * cell + jitter[1])
        objects.append(SceneObject(*attrs, cell=(r, c), center=center))
    return SceneSpec(image_size, objects, seed)


def _expressions_for(scene, idx, mode, rng, attempts=200):
    want = int(rng.integers(2, 5))
    found = []
    for _ in range(attempts):
        text = render_expression(_random_description(scene, idx, mode, rng))
        if text in found:
            continue
        try:
            if resolve_expression_bruteforce(scene, text) != idx:
                continue
        except AmbiguityError:
            continue
        found.append(text)
        if len(found) == want:
            break
    return found


# ---------------------------------------------------------------------------
# dataset


class SyntheticDataset:
    def __init__(self, scenes, images, masks, samples, vocab, meta=None):
        self.scenes = scenes
        self.images = images  # (N, S, S, 3) uint8
        self.masks = masks  # dict (image_id, object_id) -> bool (S, S)
        self.samples = samples
        self.vocab = vocab
        self.meta = meta or {}
        self._by_object = {}
        self._by_image = {}
        for i, s in enumerate(samples):
            self._by_object.setdefault((s.image_id, s.object_id), []).append(i)
            self._by_image.setdefault(s.image_id, []).append(i)

    def __len__(self):
        return len(self.samples)

    @property
    def image_size(self):
        return self.images.shape[1]

    def image_ids(self):
        return sorted(self._by_image)

    def indices_for_object(self, image_id, object_id):
        return list(self._by_object.get((image_id, object_id), []))

    def indices_for_image(self, image_id):
        return list(self._by_image.get(image_id, []))

    def target(self, sample):
        return self.masks[(sample.image_id, sample.object_id)]

    def subset(self, image_ids):
        keep = set(image_ids)
        samples = [s for s in self.samples if s.image_id in keep]
        return SyntheticDataset(self.scenes, self.images, self.masks, samples, self.vocab, dict(self.meta))

    def split(self, val_fraction=0.2):
        """Deterministic split by scene: the last scenes go to validation."""
        ids = self.image_ids()
        n_val = max(1, int(round(len(ids) * val_fraction))) if len(ids) > 1 else 0
        return self.subset(ids[: len(ids) - n_val]), self.subset(ids[len(ids) - n_val :])

    def collate(self, samples, n_t, token_override=None):
        """Stack samples into model inputs.

        Returns images (B, S, S, 3) in [0, 1], ids (B, n_t), lengths (B,), targets (B, S, S).
        ``token_override`` optionally maps batch position -> replacement token id list.
        """
        ids, lengths = [], []
        for pos, s in enumerate(samples):
            toks = s.token_ids
            if token_override and pos in token_override:
                toks = token_override[pos]
            padded, n = pad_ids(toks, n_t)
            ids.append(padded)
            lengths.append(n)
        images = np.stack([self.images[s.image_id] for s in samples]).astype(np.float64) / 255.0
        targets = np.stack([self.target(s) for s in samples]).astype(np.float64)
        return images, np.array(ids, dtype=np.int64), np.array(lengths, dtype=np.int64), targets

    # -- persistence ------------------------------------------------------
    def save(self, root):
        from .pnm import write_pbm, write_ppm

        os.makedirs(os.path.join(root, "scenes"), exist_ok=True)
        os.makedirs(os.path.join(root, "masks"), exist_ok=True)
        for image_id in range(len(self.scenes)):
            write_ppm(os.path.join(root, "scenes", f"{image_id}.ppm"), self.images[image_id])
            for obj_id in range(len(self.scenes[image_id].objects)):
                write_pbm(os.path.join(root, "masks", f"{image_id}_{obj_id}.pbm"), self.masks[(image_id, obj_id)])
        with open(os.path.join(root, "samples.jsonl"), "w") as fh:
            for s in self.samples:
                rec = {
                    "image_id": s.image_id,
                    "object_id": s.object_id,
                    "expression_id": s.expression_id,
                    "text": s.text,
                    "image": f"scenes/{s.image_id}.ppm",
                    "mask": f"masks/{s.image_id}_{s.object_id}.pbm",
                }
                fh.write(json.dumps(rec) + "\n")
        with open(os.path.join(root, "scenes.json"), "w") as fh:
            json.dump(
                {
                    "meta": self.meta,
                    "scenes": [
                        {
                            "image_size": sc.image_size,
                            "seed": sc.seed,
                            "objects": [
                                {"shape": o.shape, "color": o.color, "size": o.size,
                                 "cell": list(o.cell), "center": list(o.center)}
                                for o in sc.objects
                            ],
                        }
                        for sc in self.scenes
                    ],
                },
                fh,
            )
        self.vocab.save(os.path.join(root, "vocab.txt"))

    @classmethod
    def load(cls, root):
        from .pnm import read_pnm

        vocab = Vocabulary.load(os.path.join(root, "vocab.txt"))
        scenes, meta = [], {}
        scenes_path = os.path.join(root, "scenes.json")
        if os.path.exists(scenes_path):
            with open(scenes_path) as fh:
                blob = json.load(fh)
            meta = blob.get("meta", {})
            for sc in blob["scenes"]:
                objs = [SceneObject(o["shape"], o["color"], o["size"], tuple(o["cell"]), tuple(o["center"]))
                        for o in sc["objects"]]
                scenes.append(SceneSpec(sc["image_size"], objs, sc["seed"]))
        samples, images, masks = [], {}, {}
        with open(os.path.join(root, "samples.jsonl")) as fh:
            for line in fh:
                rec = json.loads(line)
                s = Sample(rec["image_id"], rec["object_id"], rec["expression_id"], rec["text"])
                s.token_ids = vocab.encode(s.text)
                samples.append(s)
                if s.image_id not in images:
                    images[s.image_id] = read_pnm(os.path.join(root, rec["image"]))
                key = (s.image_id, s.object_id)
                if key not in masks:
                    masks[key] = read_pnm(os.path.join(root, rec["mask"]))
        n = max(images) + 1
        stack = np.zeros((n,) + next(iter(images.values())).shape, dtype=np.uint8)
        for i, img in images.items():
            stack[i] = img
        return cls(scenes, stack, masks, samples, vocab, meta)


def generate_dataset(n_scenes, seed, image_size=64, mode="mixed", max_scene_retries=50):
    """Build ``n_scenes`` scenes; per-scene randomness comes from (seed, scene index)."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if mode not in MODES:
        raise ValueError(f"unknown template mode {mode!r}; expected one of {MODES}")
    if image_size % 16:
        raise ValueError("image_size must be a multiple of 16")
    vocab = grammar_vocabulary()
    scenes, images, masks, samples = [], [], {}, []
    for image_id in range(n_scenes):
        rng = np.random.default_rng([seed, image_id])
        for _ in range(max_scene_retries):
            scene = random_scene(image_size, rng, seed=seed)
            exprs = [_expressions_for(scene, i, mode, rng) for i in range(len(scene.objects))]
            if all(len(e) >= 2 for e in exprs):
                break
        else:
            raise GenerationError(f"scene {image_id}: could not find 2 unambiguous expressions per object")
        rgb, obj_masks = render_scene(scene)
        scenes.append(scene)
        images.append(rgb)
        for obj_id, (m, texts) in enumerate(zip(obj_masks, exprs)):
            masks[(image_id, obj_id)] = m
            for expr_id, text in enumerate(texts):
                samples.append(Sample(image_id, obj_id, expr_id, text, vocab.encode(text)))
    meta = {"n_scenes": n_scenes, "seed": seed, "image_size": image_size, "mode": mode}
    return SyntheticDataset(scenes, np.stack(images), masks, samples, vocab, meta)
