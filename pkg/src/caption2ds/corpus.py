"""Synthetic grid scenes with template captions, a structure-preserving
feature encoder for them, and the JSONL feature-corpus format."""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import ConfigError

CATEGORIES = ("cat", "dog", "bird", "fish", "car", "tree", "cup", "ball", "book", "chair")
ATTRIBUTES = ("red", "green", "blue", "yellow", "black", "white", "brown", "pink")
# clause templates; kept to five tokens so three joined clauses fit in 18 words
TEMPLATES = (
    "a {attr} {cat} {v} {h}",
    "{attr} {cat} at {v} {h}",
    "{attr} {cat} on {v} {h}",
)
NOISE_SIGMA = 0.05
DEFAULT_GRID = (3, 3)
DEFAULT_FEATURES = (len(CATEGORIES) + len(ATTRIBUTES), 7, 7)


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SceneObject:
    category: int
    attribute: int
    row: int
    col: int


@dataclass(frozen=True)
class SceneSpec:
    rows: int
    cols: int
    objects: tuple[SceneObject, ...]
    seed: int = 0

    def __post_init__(self):
        cells = [(o.row, o.col) for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ConfigError("two objects share a grid cell")
        for o in self.objects:
            if not (0 <= o.row < self.rows and 0 <= o.col < self.cols):
                raise ConfigError(f"object at ({o.row}, {o.col}) outside {self.rows}x{self.cols} grid")

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "seed": self.seed,
                "objects": [[o.category, o.attribute, o.row, o.col] for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["rows"]), int(d["cols"]),
                   tuple(SceneObject(*map(int, o)) for o in d["objects"]), int(d.get("seed", 0)))


def scene_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def generate_scene(seed: int, grid=DEFAULT_GRID, min_objects: int = 1, max_objects: int = 3) -> SceneSpec:
    """Deterministic random scene: 1-3 objects on distinct grid cells, row-major order."""
    rows, cols = grid
    rng = np.random.default_rng(seed)
    n = int(rng.integers(min_objects, max_objects + 1))
    cells = sorted(rng.choice(rows * cols, size=n, replace=False).tolist())
    objects = []
    for cell in cells:
        cat = int(rng.integers(len(CATEGORIES)))
        attr = int(rng.integers(len(ATTRIBUTES)))
        objects.append(SceneObject(cat, attr, cell // cols, cell % cols))
    return SceneSpec(rows, cols, tuple(objects), seed)


def vertical_word(row: int, rows: int) -> str:
    mid = (rows - 1) / 2
    return "top" if row < mid else "bottom" if row > mid else "middle"


def horizontal_word(col: int, cols: int) -> str:
    mid = (cols - 1) / 2
    return "left" if col < mid else "right" if col > mid else "center"


def caption_scene(scene: SceneSpec, count: int = 5, templates: Sequence[str] = TEMPLATES) -> list[str]:
    """``count`` captions; caption ``i`` uses template ``i mod len(templates)``."""
    captions = []
    for i in range(count):
        tpl = templates[i % len(templates)]
        clauses = [
            tpl.format(attr=ATTRIBUTES[o.attribute], cat=CATEGORIES[o.category],
                       v=vertical_word(o.row, scene.rows), h=horizontal_word(o.col, scene.cols))
            for o in scene.objects
        ]
        captions.append(" and ".join(clauses))
    return captions


def block_origin(index: int, cells: int, size: int) -> int:
    """First row/col of the 2-wide feature block covering grid line ``index``."""
    return int(np.floor((index + 0.5) * size / cells - 0.5))


def encode_scene(scene: SceneSpec, shape=DEFAULT_FEATURES, noise: float = NOISE_SIGMA) -> np.ndarray:
    """Feature map with one-hot category/attribute channels set on each object's block."""
    c, h, w = shape
    if c < len(CATEGORIES) + len(ATTRIBUTES):
        raise ConfigError(f"need at least {len(CATEGORIES) + len(ATTRIBUTES)} feature channels")
    if 2 * scene.rows > h or 2 * scene.cols > w:
        raise ConfigError(f"{scene.rows}x{scene.cols} grid does not fit a {h}x{w} feature map")
    rng = np.random.default_rng([scene.seed, c, h, w])
    feat = rng.normal(0.0, noise, size=(c, h, w))
    for o in scene.objects:
        y = block_origin(o.row, scene.rows, h)
        x = block_origin(o.col, scene.cols, w)
        feat[o.category, y:y + 2, x:x + 2] += 1.0
        feat[len(CATEGORIES) + o.attribute, y:y + 2, x:x + 2] += 1.0
    return feat.astype(np.float32)


def object_mask(scene: SceneSpec, obj: SceneObject, image_size) -> np.ndarray:
    """Ground-truth mask of the object's grid cell at image resolution."""
    ih, iw = image_size
    mask = np.zeros((ih, iw), dtype=bool)
    y0, y1 = obj.row * ih // scene.rows, (obj.row + 1) * ih // scene.rows
    x0, x1 = obj.col * iw // scene.cols, (obj.col + 1) * iw // scene.cols
    mask[y0:y1, x0:x1] = True
    return mask


@dataclass
class FeatureRecord:
    id: str
    features: np.ndarray
    captions: list[str]
    scene: SceneSpec | None = field(default=None, repr=False)


def synthetic_corpus(n: int, seed: int = 0, shape=DEFAULT_FEATURES, grid=DEFAULT_GRID,
                     captions_per_scene: int = 5, min_objects: int = 1,
                     max_objects: int = 3, templates: Sequence[str] = TEMPLATES) -> list[FeatureRecord]:
    records = []
    for i in range(n):
        scene = generate_scene(scene_seed(seed, i), grid, min_objects, max_objects)
        records.append(FeatureRecord(f"synth-{seed}-{i:06d}", encode_scene(scene, shape),
                                     caption_scene(scene, captions_per_scene, templates), scene))
    return records


def parse_corpus_spec(spec: str) -> tuple[int, int] | None:
    """``synth:N`` or ``synth:N:SEED`` -> ``(N, SEED)``; ``None`` for a file path."""
    if not spec.startswith("synth:"):
        return None
    parts = spec.split(":")[1:]
    try:
        n = int(parts[0])
        seed = int(parts[1]) if len(parts) > 1 else 0
    except (ValueError, IndexError):
        raise ConfigError(f"bad synthetic corpus spec {spec!r}; expected synth:N[:SEED]") from None
    if n < 1 or len(parts) > 2:
        raise ConfigError(f"bad synthetic corpus spec {spec!r}")
    return n, seed


# -- JSONL feature corpus ---------------------------------------------------

def write_features(path, records: Iterable[FeatureRecord], sidecar: bool = False) -> None:
    """One JSON object per line; tensors as base64 little-endian float32,
    or in a ``<name>.<id>.bin`` sidecar next to the corpus when ``sidecar``."""
    path = Path(path)
    with open(path, "w") as fh:
        for rec in records:
            raw = np.ascontiguousarray(rec.features, dtype="<f4").tobytes()
            entry = {"id": rec.id, "shape": list(rec.features.shape), "captions": list(rec.captions)}
            if sidecar:
                bin_name = f"{path.name}.{rec.id}.bin"
                (path.parent / bin_name).write_bytes(raw)
                entry["data_path"] = bin_name
            else:
                entry["data"] = base64.b64encode(raw).decode("ascii")
            if rec.scene is not None:
                entry["scene"] = rec.scene.to_dict()
            fh.write(json.dumps(entry) + "\n")


def _decode_record(entry: dict, lineno: int, base: Path) -> FeatureRecord:
    try:
        rid = str(entry["id"])
        shape = tuple(int(s) for s in entry["shape"])
        captions = [str(c) for c in entry["captions"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(lineno, f"missing or malformed field: {exc}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise ParseError(lineno, f"shape must be [C, H, W], got {list(shape)}")
    if not captions:
        raise ParseError(lineno, "record has no captions")
    if "data" in entry:
        try:
            raw = base64.b64decode(entry["data"], validate=True)
        except ValueError as exc:
            raise ParseError(lineno, f"bad base64 payload: {exc}") from None
    elif "data_path" in entry:
        try:
            raw = (base / entry["data_path"]).read_bytes()
        except OSError as exc:
            raise ParseError(lineno, f"cannot read sidecar: {exc}") from None
    else:
        raise ParseError(lineno, "record has neither data nor data_path")
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise ParseError(lineno, f"payload has {len(raw)} bytes, shape needs {expected}")
    feats = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    scene = SceneSpec.from_dict(entry["scene"]) if "scene" in entry else None
    return FeatureRecord(rid, feats, captions, scene)


def load_features(path) -> list[FeatureRecord]:
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(entry, dict):
                raise ParseError(lineno, "record must be a JSON object")
            rec = _decode_record(entry, lineno, path.parent)
            if records and rec.features.shape != records[0].features.shape:
                raise CorpusError(
                    f"line {lineno}: feature shape {rec.features.shape} differs from "
                    f"{records[0].features.shape}")
            records.append(rec)
    if not records:
        raise CorpusError(f"{os.fspath(path)} contains no records")
    return records


def save_scenes(path, scenes: Iterable[SceneSpec]) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in scenes], indent=1))


def load_scenes(path) -> list[SceneSpec]:
    return [SceneSpec.from_dict(d) for d in json.loads(Path(path).read_text())]
