"""Synthetic four-task driving QA stream over token-grid scenes.

Each scene is a 4x4 grid around the ego car. Occupied cells hold one object
serialized as a single ``class_attribute_position`` token, in row-major cell
order. Answers are produced by the rule tables below, which are the only
source of truth: :func:`derive_answer` re-derives any answer from the
serialized tokens alone.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

RULES_VERSION = 1
DATASET_HEADER = "#clvqa-dataset v1"

TASKS = ("perception", "prediction", "planning", "behavior")
SPLITS = ("train", "val", "test")

CLASSES = ("car", "truck", "pedestrian", "trailer", "sign", "signal")
ATTRIBUTES = ("moving", "parked", "stationary", "braking")
POSITIONS = ("front", "back", "left", "right")
VEHICLES = ("car", "truck", "trailer")

ALLOWED_ATTRIBUTES = {
    "car": ATTRIBUTES,
    "truck": ATTRIBUTES,
    "trailer": ATTRIBUTES,
    "pedestrian": ("moving", "stationary"),
    "sign": ("stationary",),
    "signal": ("stationary",),
}

GRID = 4
# cell (row, col) -> position tag relative to the ego car; four cells per tag
CELL_POSITION = {}
for _c in range(GRID):
    CELL_POSITION[(0, _c)] = "front"
    CELL_POSITION[(GRID - 1, _c)] = "back"
for _r in (1, 2):
    CELL_POSITION[(_r, 0)] = CELL_POSITION[(_r, 1)] = "left"
    CELL_POSITION[(_r, 2)] = CELL_POSITION[(_r, 3)] = "right"

MAX_OBJECTS = 6
MAX_ANSWER_LEN = 12

PERCEPTION_QUESTION = "what is the status of the {cls} to the {pos} ?"
PREDICTION_QUESTION = "what will the {cls} to the {pos} do next ?"
PLANNING_QUESTION = "what should the ego car do about the {cls} to the {pos} ?"
BEHAVIOR_QUESTIONS = (
    "what is the ego car doing ?",
    "what is the current behavior of the ego car ?",
    "describe what the ego car is doing now .",
)

# (class group, attribute) -> future phrase
FUTURE_STATE = {
    ("vehicle", "moving"): "keep going straight",
    ("vehicle", "braking"): "become stationary",
    ("vehicle", "parked"): "remain parked",
    ("vehicle", "stationary"): "start moving soon",
    ("pedestrian", "moving"): "cross the road",
    ("pedestrian", "stationary"): "wait at the curb",
    ("fixture", "stationary"): "stay in place",
}


@dataclass(frozen=True)
class SceneObject:
    cls: str
    attr: str
    row: int
    col: int

    @property
    def pos(self) -> str:
        return CELL_POSITION[(self.row, self.col)]

    @property
    def token(self) -> str:
        return f"{self.cls}_{self.attr}_{self.pos}"


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def tokens(self) -> list[str]:
        return [o.token for o in sorted(self.objects, key=lambda o: (o.row, o.col))]

    def key(self) -> str:
        cells = sorted((o.row, o.col, o.cls, o.attr) for o in self.objects)
        return hashlib.sha256(repr(cells).encode()).hexdigest()


@dataclass(frozen=True)
class Sample:
    id: str
    task: str
    scene: tuple[str, ...]
    question: tuple[str, ...]
    answer: tuple[str, ...]


@dataclass
class TaskDataset:
    task: str
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)
    seed: int | None = None

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class StreamSizes:
    train: int = 2000
    val: int = 250
    test: int = 250
    parked_trailer_rate: float = 0.05

    @classmethod
    def per_task(cls, train: int, parked_trailer_rate: float = 0.05) -> "StreamSizes":
        held_out = max(1, train // 8)
        return cls(train, held_out, held_out, parked_trailer_rate)


class ParseError(ValueError):
    """A dataset line could not be parsed."""


# -- rules ------------------------------------------------------------------


def _group(cls: str) -> str:
    if cls in VEHICLES:
        return "vehicle"
    if cls == "pedestrian":
        return "pedestrian"
    return "fixture"


def perception_answer(cls: str, attr: str, pos: str) -> str:
    return f"the {cls} to the {pos} is {attr}"


def prediction_answer(cls: str, attr: str, pos: str) -> str:
    return f"the {cls} will {FUTURE_STATE[(_group(cls), attr)]}"


def planning_action(cls: str, attr: str, pos: str) -> str:
    if cls == "pedestrian":
        return "yield to the pedestrian" if (attr == "moving" and pos == "front") else "proceed with caution"
    if cls == "signal":
        return "obey the traffic signal"
    if cls == "sign":
        return "follow the road sign"
    if pos == "front":
        if attr == "braking":
            return "slow down and keep distance"
        if attr == "moving":
            return "follow at a safe distance"
        return "change lanes to pass"
    if pos == "back":
        return "maintain current speed"
    if attr in ("parked", "stationary"):
        return "keep lane and pass"
    return "avoid changing lanes"


def planning_answer(cls: str, attr: str, pos: str) -> str:
    return f"the ego car should {planning_action(cls, attr, pos)}"


def behavior_summary(objects: list[tuple[str, str, str]]) -> str:
    """Scene-level ego behavior from ``(cls, attr, pos)`` triples, first rule wins."""
    if any(c == "pedestrian" and a == "moving" and p == "front" for c, a, p in objects):
        return "stopping for a pedestrian"
    if any(c == "trailer" and a == "parked" for c, a, p in objects):
        return "passing a parked trailer"
    if any(a == "braking" and p == "front" for c, a, p in objects):
        return "braking behind a vehicle"
    if any(c == "signal" and p == "front" for c, a, p in objects):
        return "slowing for the signal"
    if any(c in VEHICLES and a == "moving" and p == "front" for c, a, p in objects):
        return "following the vehicle ahead"
    return "going ahead"


def behavior_answer(objects: list[tuple[str, str, str]]) -> str:
    return f"the ego car is {behavior_summary(objects)}"


def has_parked_trailer(objects) -> bool:
    return any(c == "trailer" and a == "parked" for c, a, _ in objects)


def parse_scene_token(token: str) -> tuple[str, str, str]:
    cls, attr, pos = token.split("_")
    return cls, attr, pos


def derive_answer(task: str, scene: list[str] | tuple[str, ...], question: list[str] | tuple[str, ...]) -> tuple[str, ...]:
    """Recompute the answer of a sample from its serialized tokens."""
    objects = [parse_scene_token(t) for t in scene]
    if task == "behavior":
        return tuple(behavior_answer(objects).split())
    q = list(question)
    # "... the <cls> to the <pos> ..."
    i = next(i for i in range(1, len(q) - 2) if q[i] == "to" and q[i + 1] == "the")
    cls, pos = q[i - 1], q[i + 2]
    matches = [o for o in objects if o[0] == cls and o[2] == pos]
    if len(matches) != 1:
        raise ValueError(f"question does not identify a unique object: {' '.join(q)}")
    _, attr, _ = matches[0]
    rule = {"perception": perception_answer, "prediction": prediction_answer, "planning": planning_answer}[task]
    return tuple(rule(cls, attr, pos).split())


# -- generation -------------------------------------------------------------


def _random_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = rng.permutation(GRID * GRID)[:n]
    objects: list[SceneObject] = []
    taken: set[tuple[str, str]] = set()
    for cell in cells:
        row, col = divmod(int(cell), GRID)
        cls = CLASSES[int(rng.integers(len(CLASSES)))]
        pos = CELL_POSITION[(row, col)]
        if (cls, pos) in taken:
            continue
        allowed = ALLOWED_ATTRIBUTES[cls]
        attr = allowed[int(rng.integers(len(allowed)))]
        taken.add((cls, pos))
        objects.append(SceneObject(cls, attr, row, col))
    return Scene(tuple(objects))


def _triples(scene: Scene) -> list[tuple[str, str, str]]:
    return [(o.cls, o.attr, o.pos) for o in scene.objects]


def _make_sample(task: str, sid: str, scene: Scene, rng: np.random.Generator) -> Sample:
    tokens = tuple(scene.tokens())
    if task == "behavior":
        q = BEHAVIOR_QUESTIONS[int(rng.integers(len(BEHAVIOR_QUESTIONS)))]
        a = behavior_answer(_triples(scene))
    else:
        target = scene.objects[int(rng.integers(len(scene.objects)))]
        template = {"perception": PERCEPTION_QUESTION, "prediction": PREDICTION_QUESTION,
                    "planning": PLANNING_QUESTION}[task]
        q = template.format(cls=target.cls, pos=target.pos)
        rule = {"perception": perception_answer, "prediction": prediction_answer,
                "planning": planning_answer}[task]
        a = rule(target.cls, target.attr, target.pos)
    return Sample(sid, task, tokens, tuple(q.split()), tuple(a.split()))


def generate_task(task: str, sizes: StreamSizes, seed: int) -> TaskDataset:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = rng_for(seed, f"taskstream/{task}")
    seen: set[str] = set()
    ds = TaskDataset(task=task, seed=seed)
    for split in SPLITS:
        out = ds.split(split)
        count = getattr(sizes, split)
        while len(out) < count:
            want_trailer = task == "behavior" and rng.random() < sizes.parked_trailer_rate
            scene = _random_scene(rng)
            if task == "behavior" and has_parked_trailer(_triples(scene)) != want_trailer:
                # rejection keeps the parked-trailer share at the configured rate
                while has_parked_trailer(_triples(scene)) != want_trailer:
                    scene = _random_scene(rng)
            key = scene.key()
            if key in seen:
                continue
            seen.add(key)
            out.append(_make_sample(task, f"{task}-{split}-{len(out):05d}", scene, rng))
    return ds


def generate_stream(sizes: StreamSizes | None = None, seed: int = 0) -> list[TaskDataset]:
    """Generate the four task datasets in stream order."""
    sizes = sizes or StreamSizes()
    if sizes.train < 100:
        raise ValueError(f"need at least 100 training samples per task, got {sizes.train}")
    if sizes.val < 1 or sizes.test < 1:
        raise ValueError("validation and test splits must be non-empty")
    if not 0.0 <= sizes.parked_trailer_rate <= 1.0:
        raise ValueError("parked_trailer_rate must be in [0, 1]")
    return [generate_task(task, sizes, seed) for task in TASKS]


# -- file format ------------------------------------------------------------

_FIELDS = ("id", "task", "scene", "question", "answer")


def format_sample(s: Sample) -> str:
    return "\t".join((s.id, s.task, " ".join(s.scene), " ".join(s.question), " ".join(s.answer)))


def parse_sample(line: str, lineno: int = 0) -> Sample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < len(_FIELDS):
        raise ParseError(f"line {lineno}: missing field {_FIELDS[len(parts)]!r}")
    if len(parts) > len(_FIELDS):
        raise ParseError(f"line {lineno}: expected {len(_FIELDS)} fields, got {len(parts)}")
    sid, task, scene, question, answer = parts
    if task not in TASKS:
        raise ParseError(f"line {lineno}: unknown task {task!r}")
    if not sid:
        raise ParseError(f"line {lineno}: empty field 'id'")
    return Sample(sid, task, tuple(scene.split()), tuple(question.split()), tuple(answer.split()))


def write_samples(samples: list[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DATASET_HEADER + "\n")
        for s in samples:
            fh.write(format_sample(s) + "\n")


def read_samples(path: str | Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != DATASET_HEADER:
        raise ParseError(f"line 1: expected header {DATASET_HEADER!r}")
    return [parse_sample(line, i) for i, line in enumerate(lines[1:], start=2) if line]


def split_path(directory: str | Path, task: str, split: str) -> Path:
    return Path(directory) / f"{task}.{split}.tsv"


def write_dataset(dataset: TaskDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        write_samples(dataset.split(split), split_path(directory, dataset.task, split))


def read_dataset(directory: str | Path, task: str) -> TaskDataset:
    ds = TaskDataset(task=task)
    for split in SPLITS:
        setattr(ds, split, read_samples(split_path(directory, task, split)))
    return ds


def write_stream(datasets: list[TaskDataset], directory: str | Path) -> None:
    from .model import Vocabulary

    directory = Path(directory)
    for ds in datasets:
        write_dataset(ds, directory)
    Vocabulary.from_datasets(datasets).write(directory / "vocab.tsv")


def read_stream(directory: str | Path, tasks: tuple[str, ...] = TASKS) -> list[TaskDataset]:
    directory = Path(directory)
    for task in tasks:
        for split in SPLITS:
            p = split_path(directory, task, split)
            if not p.exists():
                raise FileNotFoundError(f"missing dataset file {p}")
    return [read_dataset(directory, task) for task in tasks]


def content_hash(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(format_sample(s).encode())
        h.update(b"\n")
    return h.hexdigest()
