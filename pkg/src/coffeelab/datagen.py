"""Procedural 16x16 compositional benchmark: base shapes plus optional
attribute overlays that play the role of undesired concepts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SIZE = 16
N_PIX = SIZE * SIZE
BASES = ("circle", "square", "triangle", "cross")
ATTRIBUTES = ("frame", "stripe", "dot", "checker")
BASE_INTENSITY = 0.9
OVERLAY_INTENSITY = 0.6


def _grid():
    return np.mgrid[0:SIZE, 0:SIZE]


def _circle() -> np.ndarray:
    r, c = _grid()
    return ((r - 7.5) ** 2 + (c - 7.5) ** 2 <= 4.3 ** 2).astype(np.float32)


def _square() -> np.ndarray:
    m = np.zeros((SIZE, SIZE), np.float32)
    m[4:12, 4:12] = 1
    return m


def _triangle() -> np.ndarray:
    r, c = _grid()
    # apex at row 3, base on row 12
    half = (r - 3) * 0.5
    return ((r >= 3) & (r <= 12) & (np.abs(c - 7.5) <= half + 0.5)).astype(np.float32)


def _cross() -> np.ndarray:
    m = np.zeros((SIZE, SIZE), np.float32)
    m[3:13, 7:9] = 1
    m[7:9, 3:13] = 1
    return m


SHAPES: dict[str, Callable[[], np.ndarray]] = {
    "circle": _circle, "square": _square, "triangle": _triangle, "cross": _cross,
}


def _frame(dominant: bool) -> np.ndarray:
    w = 3 if dominant else 1
    m = np.ones((SIZE, SIZE), bool)
    m[w:SIZE - w, w:SIZE - w] = False
    return m


def _stripe(dominant: bool) -> np.ndarray:
    m = np.zeros((SIZE, SIZE), bool)
    if dominant:
        m[[r for r in range(SIZE) if r % 3 != 2], :] = True
    else:
        m[[4, 8, 12], 1:15] = True
    return m


def _dot(dominant: bool) -> np.ndarray:
    r, c = _grid()
    if dominant:
        return (r % 4 < 3) & (c % 4 < 3)
    m = np.zeros((SIZE, SIZE), bool)
    for y, x in ((2, 2), (2, 12), (12, 2), (12, 12)):
        m[y:y + 2, x:x + 2] = True
    return m


def _checker(dominant: bool) -> np.ndarray:
    r, c = _grid()
    board = (r + c) % 2 == 0
    if dominant:
        m = board.copy()
        m[[0, SIZE - 1], :] = True
        return m
    band = (r >= 1) & (r <= 14) & (((c >= 1) & (c <= 3)) | ((c >= 12) & (c <= 14)))
    return board & band


OVERLAYS = {"frame": _frame, "stripe": _stripe, "dot": _dot, "checker": _checker}


@dataclass(frozen=True)
class ConceptSpec:
    name: str

    def __post_init__(self):
        if self.name not in SHAPES:
            raise ValueError(f"unknown base concept {self.name!r}; known: {BASES}")

    def mask(self) -> np.ndarray:
        return SHAPES[self.name]()


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    dominant: bool = False
    intensity: float = OVERLAY_INTENSITY

    def __post_init__(self):
        if self.name not in OVERLAYS:
            raise ValueError(f"unknown attribute {self.name!r}; known: {ATTRIBUTES}")

    def mask(self) -> np.ndarray:
        return OVERLAYS[self.name](self.dominant)

    @property
    def coverage(self) -> float:
        return float(self.mask().sum()) / N_PIX


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [256] float32 in [0, 1]
    base: str
    attributes: frozenset = field(default_factory=frozenset)
    prompt: str = ""
    seed: int = 0

    @property
    def full_prompt(self) -> str:
        return " ".join([self.base, *sorted(self.attributes)])


def render(concept: ConceptSpec, attrs: Sequence[AttributeSpec], jitter_seed: int) -> LabeledImage:
    rng = np.random.default_rng(jitter_seed)
    dy, dx = rng.integers(-1, 2, size=2)
    level = BASE_INTENSITY + rng.uniform(-0.1, 0.1)
    # shapes stay >= 2 px from the edge, so the roll never wraps lit pixels
    shape = np.roll(concept.mask(), (int(dy), int(dx)), axis=(0, 1)) * level
    img = shape.astype(np.float32)
    for a in attrs:
        img = np.maximum(img, a.mask() * np.float32(a.intensity))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    names = frozenset(a.name for a in attrs)
    prompt = " ".join([concept.name, *sorted(names)])
    return LabeledImage(img.reshape(-1), concept.name, names, prompt, int(jitter_seed))


def _seed_stream(seed: int, n: int, tag: int) -> np.ndarray:
    ss = np.random.SeedSequence([seed, tag])
    return np.random.default_rng(ss).integers(0, 2**31 - 1, size=n)


def combinations(bases=BASES, attributes=ATTRIBUTES) -> list[tuple[str, str | None]]:
    return [(b, a) for b in bases for a in (None, *attributes)]


def build_pretrain_corpus(size: int, seed: int, bases=BASES, attributes=ATTRIBUTES) -> list[LabeledImage]:
    """Balanced corpus with compositional prompts: every (base, attribute or
    none) combination appears size / #combinations times, within one."""
    combos = combinations(bases, attributes)
    if size < 16 * len(combos):
        raise ValueError(f"corpus size {size} too small; need at least {16 * len(combos)}")
    q, r = divmod(size, len(combos))
    counts = [(b, a, q + (1 if k < r else 0)) for k, (b, a) in enumerate(combos)]
    seeds = iter(_seed_stream(seed, size, 0))
    out = []
    for b, a, n in counts:
        for _ in range(n):
            attrs = [AttributeSpec(a)] if a else []
            out.append(render(ConceptSpec(b), attrs, int(next(seeds))))
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(len(out))
    return [out[i] for i in order]


def build_finetune_set(concept: str, attribute: str, n: int = 10, seed: int = 0,
                       dominant: bool = False) -> list[LabeledImage]:
    """Images of ``concept`` that all carry ``attribute``, captioned with the
    base concept alone."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec, attr = ConceptSpec(concept), AttributeSpec(attribute, dominant=dominant)
    imgs = []
    for s in _seed_stream(seed, n, 2):
        im = render(spec, [attr], int(s))
        im.prompt = concept
        imgs.append(im)
    return imgs


def build_clean_set(concept: str, n: int, seed: int) -> list[LabeledImage]:
    spec = ConceptSpec(concept)
    return [render(spec, [], int(s)) for s in _seed_stream(seed, n, 3)]


def stack(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images]).astype(np.float32)


# --- serialization ---------------------------------------------------------

def write_pgm(path: str | Path, pixels: np.ndarray, size: int = SIZE) -> None:
    """Binary P5 greyscale, maxval 255. ``pixels`` may be a single image or a
    flat grid already arranged as rows."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(size, size)
    data = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / maxval


def image_grid(images: np.ndarray, cols: int = 8, size: int = SIZE) -> np.ndarray:
    n = len(images)
    rows = -(-n // cols)
    grid = np.zeros((rows * (size + 1) - 1, cols * (size + 1) - 1), np.float32)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        grid[r * (size + 1): r * (size + 1) + size, c * (size + 1): c * (size + 1) + size] = \
            np.asarray(im).reshape(size, size)
    return grid


def save_dataset(directory: str | Path, images: Sequence[LabeledImage], name: str = "dataset",
                 pgm: bool = False) -> Path:
    """JSON manifest plus a raw little-endian float32 pixel blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = d / f"{name}.f32"
    blob.write_bytes(stack(images).astype("<f4").tobytes())
    manifest = {
        "image_shape": [SIZE, SIZE],
        "dtype": "float32-le",
        "blob": blob.name,
        "items": [{"base": im.base, "attributes": sorted(im.attributes), "prompt": im.prompt,
                   "seed": im.seed} for im in images],
    }
    path = d / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1))
    if pgm:
        for k, im in enumerate(images):
            write_pgm(d / f"{name}_{k:04d}.pgm", im.pixels)
    return path


def load_dataset(manifest_path: str | Path) -> list[LabeledImage]:
    p = Path(manifest_path)
    manifest = json.loads(p.read_text())
    items = manifest["items"]
    raw = np.frombuffer((p.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    if raw.size != len(items) * N_PIX:
        raise ValueError(f"{p}: blob holds {raw.size} floats, expected {len(items) * N_PIX}")
    pix = raw.reshape(len(items), N_PIX).astype(np.float32)
    return [LabeledImage(pix[k].copy(), it["base"], frozenset(it["attributes"]), it["prompt"], it["seed"])
            for k, it in enumerate(items)]
