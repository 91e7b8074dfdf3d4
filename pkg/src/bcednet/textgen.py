"""Synthetic pixel-labelled text images.

Strings of A-Z are drawn from a small embedded bitmap atlas, pushed through a
random scale / rotation / shear / homography and composited over a flat
background. Image and label map come from the same inverse-mapped glyph
lookup, so label/ink alignment is exact by construction.

Class ids: 0 is background, 1..26 are the letters A..Z.
"""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm, to_gray8, write_pgm

IMAGE_H = 32
IMAGE_W = 128
NUM_CLASSES = 27
ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

_REGULAR_5X7 = {
    "A": ".###. #...# #...# ##### #...# #...# #...#",
    "B": "####. #...# #...# ####. #...# #...# ####.",
    "C": ".###. #...# #.... #.... #.... #...# .###.",
    "D": "####. #...# #...# #...# #...# #...# ####.",
    "E": "##### #.... #.... ####. #.... #.... #####",
    "F": "##### #.... #.... ####. #.... #.... #....",
    "G": ".###. #...# #.... #.### #...# #...# .####",
    "H": "#...# #...# #...# ##### #...# #...# #...#",
    "I": ".###. ..#.. ..#.. ..#.. ..#.. ..#.. .###.",
    "J": "..### ...#. ...#. ...#. ...#. #..#. .##..",
    "K": "#...# #..#. #.#.. ##... #.#.. #..#. #...#",
    "L": "#.... #.... #.... #.... #.... #.... #####",
    "M": "#...# ##.## #.#.# #.#.# #...# #...# #...#",
    "N": "#...# #...# ##..# #.#.# #..## #...# #...#",
    "O": ".###. #...# #...# #...# #...# #...# .###.",
    "P": "####. #...# #...# ####. #.... #.... #....",
    "Q": ".###. #...# #...# #...# #.#.# #..#. .##.#",
    "R": "####. #...# #...# ####. #.#.. #..#. #...#",
    "S": ".#### #.... #.... .###. ....# ....# ####.",
    "T": "##### ..#.. ..#.. ..#.. ..#.. ..#.. ..#..",
    "U": "#...# #...# #...# #...# #...# #...# .###.",
    "V": "#...# #...# #...# #...# #...# .#.#. ..#..",
    "W": "#...# #...# #...# #.#.# #.#.# #.#.# .#.#.",
    "X": "#...# #...# .#.#. ..#.. .#.#. #...# #...#",
    "Y": "#...# #...# .#.#. ..#.. ..#.. ..#.. ..#..",
    "Z": "##### ....# ...#. ..#.. .#... #.... #####",
}


def _parse_face(rows_by_char: dict[str, str]) -> dict[str, np.ndarray]:
    face = {}
    for ch, rows in rows_by_char.items():
        face[ch] = np.array([[c == "#" for c in row] for row in rows.split()], dtype=bool)
    return face


def _embolden(face: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for ch, g in face.items():
        h, w = g.shape
        b = np.zeros((h, w + 1), dtype=bool)
        b[:, :w] |= g
        b[:, 1:] |= g
        out[ch] = b
    return out


_REGULAR = _parse_face(_REGULAR_5X7)
FACES: dict[str, dict[str, np.ndarray]] = {
    "regular": _REGULAR,
    "bold": _embolden(_REGULAR),
}
GLYPH_ROWS = 7


def class_of(ch: str) -> int:
    return ALPHABET.index(ch.upper()) + 1


@dataclass(frozen=True)
class RenderParams:
    """Ranges for the random rendering transform.

    ``cap_height`` is the glyph height in output pixels before distortion;
    it is shrunk automatically when a string would not fit the frame.
    """

    cap_height: tuple[float, float] = (14.0, 26.0)
    length: tuple[int, int] = (1, 8)
    faces: tuple[str, ...] = ("regular", "bold")
    max_rotation_deg: float = 4.0
    max_shear: float = 0.15
    max_corner_shift: float = 2.0
    fg_range: tuple[float, float] = (0.0, 1.0)
    bg_range: tuple[float, float] = (0.0, 1.0)
    min_contrast: float = 0.2
    noise_sigma: float = 0.02
    char_jitter: float = 0.3

    def __post_init__(self):
        for name in ("cap_height", "fg_range", "bg_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.cap_height[0] <= 0:
            raise ValueError("cap_height must be positive")
        lo, hi = self.length
        if not 1 <= lo <= hi <= 8:
            raise ValueError(f"length range must lie within 1..8, got {self.length}")
        if not self.faces or any(f not in FACES for f in self.faces):
            raise ValueError(f"unknown face in {self.faces}; available: {sorted(FACES)}")
        for name in ("max_rotation_deg", "max_shear", "max_corner_shift", "noise_sigma", "min_contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.char_jitter < 0.5:
            # larger jitter lets neighbouring glyph boxes overlap
            raise ValueError("char_jitter must lie in [0, 0.5)")
        if self.min_contrast > 0:
            best = max(
                abs(self.fg_range[1] - self.bg_range[0]), abs(self.bg_range[1] - self.fg_range[0])
            )
            if best < self.min_contrast:
                raise ValueError("fg/bg ranges cannot satisfy min_contrast")


# Large bold dark-on-light glyphs with mild distortion: about 30% ink, the
# easiest setting for desk-scale training runs.
HIGH_CONTRAST = RenderParams(
    cap_height=(22.0, 30.0),
    length=(2, 5),
    faces=("bold",),
    max_rotation_deg=2.0,
    max_shear=0.05,
    max_corner_shift=1.0,
    fg_range=(0.0, 0.4),
    bg_range=(0.6, 1.0),
)

PRESETS = {"default": RenderParams(), "high-contrast": HIGH_CONTRAST}


@dataclass
class LabeledSample:
    image: np.ndarray  # (32, 128) float64, multiples of 1/255 in [0, 1]
    labels: np.ndarray  # (32, 128) uint8 class ids
    text: str
    seed: int
    face: str = ""
    fg: float = 0.0
    bg: float = 0.0
    homography: np.ndarray = field(default_factory=lambda: np.eye(3))
    glyph_boxes: list[tuple[float, float, float, float]] = field(default_factory=list)


def _homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Solve the 3x3 homography mapping four src points onto four dst points."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    p = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1) @ h.T
    return p[..., :2] / p[..., 2:3]


def _sample_intensities(rng: np.random.Generator, params: RenderParams) -> tuple[float, float]:
    for _ in range(1000):
        fg = rng.uniform(*params.fg_range)
        bg = rng.uniform(*params.bg_range)
        if abs(fg - bg) >= params.min_contrast:
            return fg, bg
    # fall back to the extreme pair; __post_init__ guarantees it satisfies the floor
    if abs(params.fg_range[1] - params.bg_range[0]) >= abs(params.bg_range[1] - params.fg_range[0]):
        return params.fg_range[1], params.bg_range[0]
    return params.fg_range[0], params.bg_range[1]


def render_sample(seed: int, params: RenderParams | None = None) -> LabeledSample:
    """Render one 32x128 labelled sample; a pure function of (seed, params)."""
    params = params or RenderParams()
    rng = np.random.default_rng(seed)

    n_chars = int(rng.integers(params.length[0], params.length[1] + 1))
    text = "".join(rng.choice(list(ALPHABET), size=n_chars))
    face_name = params.faces[int(rng.integers(len(params.faces)))]
    face = FACES[face_name]

    # glyph boxes in font units: x0, y0, x1, y1
    boxes = []
    x = 0.0
    for ch in text:
        gw = face[ch].shape[1]
        jitter = rng.uniform(-params.char_jitter, params.char_jitter)
        boxes.append((x + jitter, 0.0, x + jitter + gw, float(GLYPH_ROWS)))
        x += gw + 1
    text_w = x - 1
    text_h = float(GLYPH_ROWS)

    unit = rng.uniform(*params.cap_height) / GLYPH_ROWS
    unit = min(unit, (IMAGE_W - 4) / (text_w + 2 * params.char_jitter), (IMAGE_H - 2) / text_h)

    angle = np.deg2rad(rng.uniform(-params.max_rotation_deg, params.max_rotation_deg))
    shear = rng.uniform(-params.max_shear, params.max_shear)
    cx, cy = text_w / 2, text_h / 2
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    scale = np.diag([unit, unit, 1.0])
    shear_m = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    affine = rot @ shear_m @ scale @ to_origin

    corners = np.array([[0, 0], [text_w, 0], [text_w, text_h], [0, text_h]], dtype=np.float64)
    placed = apply_homography(affine, corners)
    lo, hi = placed.min(axis=0), placed.max(axis=0)
    # centre of the frame plus whatever slack the placed box leaves
    slack = np.maximum(np.array([IMAGE_W, IMAGE_H]) - (hi - lo), 0.0) / 2
    offset = np.array([IMAGE_W / 2, IMAGE_H / 2]) - (lo + hi) / 2
    offset += rng.uniform(-1, 1, size=2) * slack * 0.8
    placed = placed + offset
    shift = rng.uniform(-params.max_corner_shift, params.max_corner_shift, size=(4, 2))
    homography = _homography_from_points(corners, placed + shift)

    # inverse-map every pixel centre into font units, nearest-cell lookup
    ys, xs = np.mgrid[0:IMAGE_H, 0:IMAGE_W]
    centres = np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(np.float64)
    uv = apply_homography(np.linalg.inv(homography), centres)
    u, v = uv[..., 0], uv[..., 1]
    labels = np.zeros((IMAGE_H, IMAGE_W), dtype=np.uint8)
    for ch, (x0, y0, x1, y1) in zip(text, boxes):
        inside = (u >= x0) & (u < x1) & (v >= y0) & (v < y1)
        if not inside.any():
            continue
        glyph = face[ch]
        col = np.clip(np.floor(u[inside] - x0).astype(int), 0, glyph.shape[1] - 1)
        row = np.clip(np.floor(v[inside] - y0).astype(int), 0, glyph.shape[0] - 1)
        ink = glyph[row, col]
        idx = np.flatnonzero(inside)[ink]
        labels.flat[idx] = class_of(ch)

    fg, bg = _sample_intensities(rng, params)
    ink = labels > 0
    image = np.where(ink, fg, bg)
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    image = to_gray8(image).astype(np.float64) / 255.0

    return LabeledSample(
        image=image,
        labels=labels,
        text=text,
        seed=seed,
        face=face_name,
        fg=fg,
        bg=bg,
        homography=homography,
        glyph_boxes=boxes,
    )


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class DatasetManifest:
    count: int
    seed: int
    params: dict
    histogram: list[int]

    def to_text(self) -> str:
        lines = [f"count {self.count}", f"seed {self.seed}"]
        for k, v in self.params.items():
            if isinstance(v, (tuple, list)):
                v = " ".join(str(x) for x in v)
            lines.append(f"param {k} {v}")
        lines.append("histogram " + " ".join(str(h) for h in self.histogram))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        count, seed, params, hist = 0, 0, {}, [0] * NUM_CLASSES
        for line in text.splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "count":
                count = int(parts[1])
            elif parts[0] == "seed":
                seed = int(parts[1])
            elif parts[0] == "param":
                params[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "histogram":
                hist = [int(p) for p in parts[1:]]
        return cls(count=count, seed=seed, params=params, histogram=hist)


def sample_stem(i: int) -> str:
    return f"{i:06d}"


def _write_pair(directory: Path, i: int, image: np.ndarray, labels: np.ndarray) -> None:
    write_pgm(directory / f"{sample_stem(i)}.pgm", to_gray8(image))
    (directory / f"{sample_stem(i)}.lbl").write_bytes(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def _commit_dir(tmp: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def render_arrays(n: int, seed: int, params: RenderParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """In-memory twin of :func:`render_dataset`: images (n, 32, 128) and labels."""
    samples = [render_sample(seed + i, params) for i in range(n)]
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def render_dataset(
    n: int, seed: int, params: RenderParams | None, out_path: str | os.PathLike
) -> DatasetManifest:
    """Write ``n`` samples (sample i uses seed + i) plus manifest.txt.

    The directory is assembled next to ``out_path`` and renamed into place, so a
    failed run never leaves a partial dataset behind.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or RenderParams()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        hist = np.zeros(NUM_CLASSES, dtype=np.int64)
        for i in range(n):
            s = render_sample(seed + i, params)
            _write_pair(tmp, i, s.image, s.labels)
            hist += np.bincount(s.labels.ravel(), minlength=NUM_CLASSES)
        manifest = DatasetManifest(count=n, seed=seed, params=asdict(params), histogram=hist.tolist())
        (tmp / "manifest.txt").write_text(manifest.to_text())
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def load_dataset(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read a dataset directory into (images (N,32,128) float64, labels (N,32,128) uint8)."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset directory at {root}")
    stems = sorted(p.stem for p in root.glob("*.pgm"))
    if not stems:
        raise ValueError(f"{root} contains no samples")
    images = np.empty((len(stems), IMAGE_H, IMAGE_W), dtype=np.float64)
    labels = np.empty((len(stems), IMAGE_H, IMAGE_W), dtype=np.uint8)
    for k, stem in enumerate(stems):
        img = read_pgm(root / f"{stem}.pgm")
        if img.shape != (IMAGE_H, IMAGE_W):
            raise ValueError(f"{stem}.pgm is {img.shape[1]}x{img.shape[0]}, expected 128x32")
        raw = (root / f"{stem}.lbl").read_bytes()
        if len(raw) != IMAGE_H * IMAGE_W:
            raise ValueError(f"{stem}.lbl has {len(raw)} bytes, expected {IMAGE_H * IMAGE_W}")
        lbl = np.frombuffer(raw, dtype=np.uint8).reshape(IMAGE_H, IMAGE_W)
        if lbl.max() >= NUM_CLASSES:
            raise ValueError(f"{stem}.lbl has class id {lbl.max()} >= {NUM_CLASSES}")
        images[k] = img / 255.0
        labels[k] = lbl
    return images, labels


def fold_label_codes(codes: np.ndarray) -> np.ndarray:
    """Map external label codes onto class ids.

    Accepts class ids 0..26 unchanged and ASCII letters in either case
    (``'a'``/``'A'`` -> 1). Anything else is rejected.
    """
    codes = np.asarray(codes).astype(np.int64)
    out = codes.copy()
    upper = (codes >= ord("A")) & (codes <= ord("Z"))
    lower = (codes >= ord("a")) & (codes <= ord("z"))
    out[upper] = codes[upper] - ord("A") + 1
    out[lower] = codes[lower] - ord("a") + 1
    bad = ~(upper | lower | ((codes >= 0) & (codes < NUM_CLASSES)))
    if bad.any():
        raise ValueError(f"unrecognised label codes: {sorted(set(codes[bad].tolist()))[:8]}")
    return out.astype(np.uint8)


def import_pairs(pairs, out_path: str | os.PathLike) -> DatasetManifest:
    """Copy externally supplied (image.pgm, label) pairs into the container layout.

    Labels may be ``.lbl`` raw bytes or a PGM whose pixel values are class ids
    or ASCII letter codes; letters are case-folded.
    """
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        hist = np.zeros(NUM_CLASSES, dtype=np.int64)
        n = 0
        for image_path, label_path in pairs:
            img = read_pgm(image_path)
            label_path = Path(label_path)
            if label_path.suffix == ".pgm":
                raw = read_pgm(label_path)
            else:
                raw = np.frombuffer(label_path.read_bytes(), dtype=np.uint8)
                if raw.size != IMAGE_H * IMAGE_W:
                    raise ValueError(f"{label_path}: expected {IMAGE_H * IMAGE_W} bytes")
                raw = raw.reshape(IMAGE_H, IMAGE_W)
            if img.shape != (IMAGE_H, IMAGE_W) or raw.shape != (IMAGE_H, IMAGE_W):
                raise ValueError(f"{image_path}: pairs must be 128x32")
            lbl = fold_label_codes(raw)
            write_pgm(tmp / f"{sample_stem(n)}.pgm", img)
            (tmp / f"{sample_stem(n)}.lbl").write_bytes(lbl.tobytes())
            hist += np.bincount(lbl.ravel(), minlength=NUM_CLASSES)
            n += 1
        if n == 0:
            raise ValueError("no pairs to import")
        manifest = DatasetManifest(count=n, seed=0, params={"source": "import"}, histogram=hist.tolist())
        (tmp / "manifest.txt").write_text(manifest.to_text())
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest
