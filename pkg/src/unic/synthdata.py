"""Procedural (target, condition, instruction, prompt) quadruples.

Scenes are 1-3 hard-edged shapes from an 8-color palette on a neutral
background, rasterized without anti-aliasing at 32x32. Seven task kinds
each pair a condition generator with a fixed set of instruction
templates; prompts come from a closed grammar so the tokenizer
vocabulary stays small. Everything is deterministic given a seed, and
generation parallelizes over per-index derived seeds.

The condition generators double as the evaluation re-extraction
operators, so a generator applied to its own target reproduces the
stored condition bit-exactly (edge, colorize, deblur, inpaint).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embeddings import Vocab, build_vocab
from .ppm import read_ppm, write_ppm
from .rng import derived_rng, worker_count

CANVAS = 32

# Shape colors deliberately exclude white (subject masks) and pure black
# (inpaint zero-rectangle recovery); backgrounds are neutral grays.
PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "orange": (255, 128, 0),
    "purple": (128, 0, 255),
}
BACKGROUNDS = {
    "white": (255, 255, 255),
    "silver": (192, 192, 192),
    "gray": (128, 128, 128),
    "charcoal": (64, 64, 64),
}
SHAPE_KINDS = ("circle", "square", "triangle")

TASKS = ("edge", "depth_proxy", "inpaint", "deblur", "colorize", "subject", "style")
PIXEL_TASKS = ("edge", "depth_proxy", "inpaint", "deblur", "colorize")
TASK_FAMILY = {t: "pixel" for t in PIXEL_TASKS}
TASK_FAMILY["subject"] = "subject"
TASK_FAMILY["style"] = "style"
FAMILY_TASKS = {
    "pixel": PIXEL_TASKS,
    "subject": ("subject",),
    "style": ("style",),
}

EDGE_THRESHOLD = 0.25

INSTRUCTION_TEMPLATES = {
    "edge": (
        "Generate an image from this edge map.",
        "Create a picture that matches this edge map.",
        "Render a scene that follows these edges.",
        "Turn this edge map into a complete image.",
        "Draw the scene outlined by this edge map.",
    ),
    "depth_proxy": (
        "Generate an image from this depth map.",
        "Create a picture that matches this depth map.",
        "Render a scene with this depth layout.",
        "Turn this depth map into a complete image.",
        "Draw the scene implied by this depth map.",
    ),
    "inpaint": (
        "Fill in the missing region of this image.",
        "Complete the erased part of this picture.",
        "Restore the blank area in this image.",
        "Repair the missing patch of this picture.",
        "Paint the hole in this image to match the rest.",
    ),
    "deblur": (
        "Sharpen this blurry image.",
        "Recover a crisp picture from this blurred image.",
        "Remove the blur from this picture.",
        "Restore fine detail to this blurry image.",
        "Produce a sharp version of this blurred picture.",
    ),
    "colorize": (
        "Colorize this grayscale image.",
        "Add color to this gray picture.",
        "Turn this grayscale image into a color image.",
        "Paint this gray image with the right colors.",
        "Restore the colors of this grayscale picture.",
    ),
    "subject": (
        "Generate an image from this subject image.",
        "Place this subject in a new scene.",
        "Create a picture featuring this subject.",
        "Render a new image containing this subject.",
        "Compose a scene around this subject image.",
    ),
    "style": (
        "Generate an image based on this style image.",
        "Create a picture in the style of this image.",
        "Apply the style of this image to a new scene.",
        "Render a scene that follows this style reference.",
        "Match the palette of this style image.",
    ),
}


@dataclass
class ShapeSpec:
    kind: str
    color: str
    cx: int
    cy: int
    size: int  # side length / diameter-ish extent in pixels


@dataclass
class Scene:
    """1-3 shapes, later entries nearer (painter's order)."""

    shapes: list
    background: str

    def __post_init__(self):
        if not 1 <= len(self.shapes) <= 3:
            raise ValueError(f"scene must hold 1-3 shapes, got {len(self.shapes)}")


@dataclass
class ConditionPair:
    target: np.ndarray  # (H, W, 3) uint8
    condition: np.ndarray
    instruction: str
    prompt: str
    task: str


# -- rasterization -----------------------------------------------------------


def shape_mask(shape: ShapeSpec, size: int = CANVAS) -> np.ndarray:
    """Boolean coverage mask; integer geometry, no anti-aliasing."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape.kind == "circle":
        r = shape.size // 2
        mask = (xx - shape.cx) ** 2 + (yy - shape.cy) ** 2 <= r * r
    elif shape.kind == "square":
        x0 = shape.cx - shape.size // 2
        y0 = shape.cy - shape.size // 2
        mask = (xx >= x0) & (xx < x0 + shape.size) & (yy >= y0) & (yy < y0 + shape.size)
    elif shape.kind == "triangle":
        # upright isoceles: apex at the top row, base of width `size`
        h = shape.size
        y0 = shape.cy - h // 2
        k = yy - y0
        half = shape.size // 2
        width = (k * half) // max(h - 1, 1)
        mask = (k >= 0) & (k < h) & (np.abs(xx - shape.cx) <= width)
    else:
        raise ValueError(f"unknown shape kind {shape.kind!r}")
    if mask.any():
        ys, xs = np.nonzero(mask)
        if ys.min() < 0 or xs.min() < 0 or ys.max() >= size or xs.max() >= size:
            raise ValueError("shape extends outside the canvas")
    return mask


def render_scene(scene: Scene, size: int = CANVAS) -> np.ndarray:
    """Deterministic rasterization, z-order respected."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[scene.background]
    for shape in scene.shapes:
        img[shape_mask(shape, size)] = PALETTE[shape.color]
    return img


def sample_scene(rng: np.random.Generator, size: int = CANVAS) -> Scene:
    n = int(rng.integers(1, 4))
    background = list(BACKGROUNDS)[int(rng.integers(0, len(BACKGROUNDS)))]
    colors = rng.choice(len(PALETTE), size=n, replace=False)
    names = list(PALETTE)
    shapes = []
    for i in range(n):
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
        extent = int(rng.integers(6, 15))
        margin = extent // 2 + 1
        cx = int(rng.integers(margin, size - margin))
        cy = int(rng.integers(margin, size - margin))
        shapes.append(ShapeSpec(kind, names[int(colors[i])], cx, cy, extent))
    return Scene(shapes, background)


def scene_prompt(scene: Scene) -> str:
    parts = [f"a {s.color} {s.kind}" for s in scene.shapes]
    return f"{' and '.join(parts)} on a {scene.background} background"


# -- condition generators (shared with evaluation re-extraction) -------------


def luminance_bytes(img: np.ndarray) -> np.ndarray:
    """Per-pixel luminance, round-half-up to uint8."""
    img = np.asarray(img, dtype=np.float64)
    lum = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.floor(lum + 0.5).astype(np.uint8)


def sobel_edges(img: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary edge map: Sobel magnitude of [0,1] luminance thresholded."""
    lum = luminance_bytes(img).astype(np.float64) / 255.0
    p = np.pad(lum, 1, mode="edge")
    gx = (
        (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:])
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    )
    return np.hypot(gx, gy) >= threshold


def edge_condition(img: np.ndarray) -> np.ndarray:
    edges = sobel_edges(img)
    out = np.zeros(img.shape, dtype=np.uint8)
    out[edges] = 255
    return out


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with replicated borders, round-half-up integer mean."""
    x = np.asarray(img, dtype=np.int64)
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    total = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            total += p[dy : dy + x.shape[0], dx : dx + x.shape[1]]
    return ((2 * total + 9) // 18).astype(np.uint8)


def colorize_condition(img: np.ndarray) -> np.ndarray:
    lum = luminance_bytes(img)
    return np.repeat(lum[:, :, None], 3, axis=2)


def depth_condition(scene: Scene, size: int = CANVAS) -> np.ndarray:
    """Per-shape gray by z-order: nearer is brighter, background is 0."""
    n = len(scene.shapes)
    gray = np.zeros((size, size), dtype=np.uint8)
    for rank, shape in enumerate(scene.shapes, start=1):
        level = int(round(255.0 * rank / n))
        gray[shape_mask(shape, size)] = level
    return np.repeat(gray[:, :, None], 3, axis=2)


def inpaint_condition(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero out a random rectangle covering 25-50% of the canvas."""
    size = img.shape[0]
    area = size * size
    while True:
        w = int(rng.integers(8, size - 3))
        h = int(rng.integers(8, size - 3))
        if 0.25 * area <= w * h <= 0.5 * area:
            break
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    out = img.copy()
    out[y0 : y0 + h, x0 : x0 + w] = 0
    return out


def largest_shape_index(scene: Scene, size: int = CANVAS) -> int:
    """Largest by full (unoccluded) pixel area; frontmost wins ties."""
    areas = [int(shape_mask(s, size).sum()) for s in scene.shapes]
    best = max(range(len(areas)), key=lambda i: (areas[i], i))
    return best


def subject_condition(scene: Scene, size: int = CANVAS) -> np.ndarray:
    """The scene's subject rendered alone on a white background."""
    subject = scene.shapes[largest_shape_index(scene, size)]
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    img[shape_mask(subject, size)] = PALETTE[subject.color]
    return img


def style_condition(scene: Scene, size: int = CANVAS) -> np.ndarray:
    """Four horizontal bands cycling through the scene's colors."""
    colors = [BACKGROUNDS[scene.background]] + [PALETTE[s.color] for s in scene.shapes]
    img = np.empty((size, size, 3), dtype=np.uint8)
    band = size // 4
    for i in range(4):
        img[i * band : (i + 1) * band] = colors[i % len(colors)]
    return img


def make_condition(task: str, target: np.ndarray, scene: Scene, rng: np.random.Generator) -> np.ndarray:
    if task == "edge":
        return edge_condition(target)
    if task == "depth_proxy":
        return depth_condition(scene, target.shape[0])
    if task == "inpaint":
        return inpaint_condition(target, rng)
    if task == "deblur":
        return box_blur3(target)
    if task == "colorize":
        return colorize_condition(target)
    if task == "subject":
        return subject_condition(scene, target.shape[0])
    if task == "style":
        return style_condition(scene, target.shape[0])
    raise ValueError(f"unknown task {task!r}")


def instruction_for(task: str, rng: np.random.Generator) -> str:
    templates = INSTRUCTION_TEMPLATES[task]
    return templates[int(rng.integers(0, len(templates)))]


# -- vocabulary ----------------------------------------------------------------


def corpus_strings() -> list:
    """Every string the closed grammar and templates can emit words from."""
    out = []
    for templates in INSTRUCTION_TEMPLATES.values():
        out.extend(templates)
    out.append("a and on background")
    out.extend(PALETTE)
    out.extend(BACKGROUNDS)
    out.extend(SHAPE_KINDS)
    return out


def default_vocab() -> Vocab:
    return build_vocab(corpus_strings())


# -- dataset generation ----------------------------------------------------------


@dataclass
class PairRecord:
    pair_id: int
    task: str
    target_path: str
    condition_path: str
    instruction: str
    prompt: str


def make_pair(task: str, rng: np.random.Generator) -> ConditionPair:
    scene = sample_scene(rng)
    if task == "subject":
        # keep the subject fully visible in the target
        idx = largest_shape_index(scene)
        scene.shapes.append(scene.shapes.pop(idx))
    target = render_scene(scene)
    condition = make_condition(task, target, scene, rng)
    instruction = instruction_for(task, rng)
    return ConditionPair(target, condition, instruction, scene_prompt(scene), task)


def choose_task(rng: np.random.Generator, weights, allowed_by_family) -> str:
    family = ("pixel", "subject", "style")[int(rng.choice(3, p=weights))]
    tasks = allowed_by_family[family]
    return tasks[int(rng.integers(0, len(tasks)))]


def generate_dataset(n: int, mixture, seed: int, out_dir, tasks=None) -> str:
    """Write n pairs (PPM images + manifest + vocabulary); returns manifest path.

    ``mixture`` is a (pixel, subject, style) weight triple; ``tasks``
    optionally restricts task kinds. A family with positive weight must
    keep at least one allowed task.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    weights = np.asarray(getattr(mixture, "weights", mixture), dtype=np.float64)
    if weights.shape != (3,) or abs(weights.sum() - 1.0) > 1e-9 or (weights < 0).any():
        raise ValueError(f"mixture must be 3 non-negative weights summing to 1: {weights}")
    allowed = tuple(tasks) if tasks else TASKS
    for t in allowed:
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r}")
    allowed_by_family = {
        fam: tuple(t for t in fam_tasks if t in allowed)
        for fam, fam_tasks in FAMILY_TASKS.items()
    }
    for fam, w in zip(("pixel", "subject", "style"), weights):
        if w > 0 and not allowed_by_family[fam]:
            raise ValueError(f"mixture weight {w} for family {fam!r} but no allowed tasks")

    os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "conditions"), exist_ok=True)

    def build(i: int) -> PairRecord:
        rng = derived_rng(seed, "sample", i)
        task = choose_task(rng, weights, allowed_by_family)
        pair = make_pair(task, rng)
        t_rel = os.path.join("targets", f"{i:06d}.ppm")
        c_rel = os.path.join("conditions", f"{i:06d}.ppm")
        write_ppm(os.path.join(out_dir, t_rel), pair.target)
        write_ppm(os.path.join(out_dir, c_rel), pair.condition)
        return PairRecord(i, task, t_rel, c_rel, pair.instruction, pair.prompt)

    workers = min(worker_count(), n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(build, range(n)))
    else:
        records = [build(i) for i in range(n)]

    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                f"{r.pair_id}\t{r.task}\t{r.target_path}\t{r.condition_path}"
                f"\t{r.instruction}\t{r.prompt}\n"
            )
    from .embeddings import save_vocab

    save_vocab(default_vocab(), os.path.join(out_dir, "vocab.txt"))
    return manifest


def load_manifest(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise ValueError(f"malformed manifest line: {line!r}")
            records.append(
                PairRecord(int(fields[0]), fields[1], fields[2], fields[3], fields[4], fields[5])
            )
    return records


def load_pair(record: PairRecord, base_dir) -> ConditionPair:
    return ConditionPair(
        target=read_ppm(os.path.join(base_dir, record.target_path)),
        condition=read_ppm(os.path.join(base_dir, record.condition_path)),
        instruction=record.instruction,
        prompt=record.prompt,
        task=record.task,
    )
