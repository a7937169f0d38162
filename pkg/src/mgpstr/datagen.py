"""Synthetic word images: bitmap rendering, augmentation, PGM files and manifests."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import CharsetError, ConfigError, DegenerateInputError, FormatError, LengthError
from .font import CHARSET, GLYPH_H, text_bitmap

log = logging.getLogger(__name__)

# 200 words of 1-8 symbols; the numerals exercise the digit classes.
DEFAULT_LEXICON = """
able about above add after again age all also area army ask away baby back bag ball bank base
beat bed best big bird blood blue board boat book born both box break bring brother build
business buy call camp car care carry case cat cause center chair change city class clear close
cold color come cost could course court cover cross cut dark data day death deep design desk
down draw dream drive early east easy eat edge eight energy enjoy enter event every exist eye
fact fall family far fast father fear feel fight figure fill film final fine fire first fish
floor fly food foot forest form free friend fruit full fund game garden girl give glass goal
good great green ground grow guess guide gun half hall hand happy hard head heart heat heavy
hero high hill history hold home hope horse hotel hour house huge idea image inside iron island
job join jump just key kid kind king know lake land large late law lead leaf left leg less
letter level light line list little long look lose love lunch machine main make map market 1869
2024 747 90210 42 365 7 0815 31 1999
""".split()

assert len(DEFAULT_LEXICON) == len(set(DEFAULT_LEXICON)) == 200


@dataclass(frozen=True)
class RenderSpec:
    """Canvas, glyph style and noise knobs for :func:`render`.

    ``scale_jitter`` is the relative spread of glyph height, ``slant`` the
    maximum italic shear, ``stroke`` the probability of a one-pixel bold
    stroke and ``noise`` the pixel noise std.  All zero gives a clean render.
    """

    height: int = 32
    width: int = 64
    channels: int = 1
    max_len: int = 27
    charset: str = CHARSET
    scale_jitter: float = 0.15
    slant: float = 0.25
    stroke: float = 0.3
    noise: float = 0.03
    seed: int = 0
    lexicon: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError("canvas must be at least 8x8")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for w in self.lexicon:
            check_word(w, self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lexicon"] = list(self.lexicon)
        return d


def check_word(word: str, spec: RenderSpec) -> None:
    if not word:
        raise LengthError("cannot render an empty word")
    if len(word) > spec.max_len - 1:
        raise LengthError(f"{word!r} longer than {spec.max_len - 1} symbols")
    bad = [c for c in word.lower() if c not in spec.charset or c not in CHARSET]
    if bad:
        raise CharsetError(f"{word!r} has symbols outside the charset: {sorted(set(bad))}")


# ---------------------------------------------------------------------------
# geometry


def _warp(img: np.ndarray, inv: np.ndarray, out_shape: tuple[int, int], cval: float) -> np.ndarray:
    """Sample ``img`` (2-D) at ``inv @ [x, y, 1]`` for every output pixel."""
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = inv @ np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5, np.ones(h * w)])
    sx, sy = pts[0] / pts[2] - 0.5, pts[1] / pts[2] - 0.5
    out = ndimage.map_coordinates(img, [sy, sx], order=1, mode="constant", cval=cval)
    return out.reshape(h, w)


def _about_center(m: np.ndarray, h: int, w: int) -> np.ndarray:
    c = np.array([[1, 0, w / 2], [0, 1, h / 2], [0, 0, 1]])
    ci = np.array([[1, 0, -w / 2], [0, 1, -h / 2], [0, 0, 1]])
    return c @ m @ ci


def render(word: str, spec: RenderSpec, rng: np.random.Generator) -> np.ndarray:
    """Float32 (H, W, C) image in [0, 1] of ``word`` centered on the canvas."""
    check_word(word, spec)
    strip = text_bitmap(word).astype(np.float64)
    if spec.stroke and rng.random() < spec.stroke:
        strip = np.maximum(strip, np.roll(strip, 1, axis=1) * (np.arange(strip.shape[1]) > 0))
    sh, sw = strip.shape
    h, w = spec.height, spec.width
    # glyph height 45-75% of canvas, shrunk further when the word is wide
    target_h = h * 0.6 * (1 + spec.scale_jitter * rng.uniform(-1, 1))
    sx = sy = target_h / sh
    sx *= 1 + 0.5 * spec.scale_jitter * rng.uniform(-1, 1)
    if sw * sx > 0.92 * w:
        sx = 0.92 * w / sw
    shear = spec.slant * rng.uniform(-1, 1)
    fwd = np.array([[sx, -shear * sy, 0], [0, sy, 0], [0, 0, 1]], dtype=np.float64)
    # center the strip
    fwd[:2, 2] = [w / 2 - sx * sw / 2 + shear * sy * sh / 2, h / 2 - sy * sh / 2]
    fwd[:2, 2] += [rng.uniform(-1, 1) * max(0.0, (w - sx * sw) * 0.1), rng.uniform(-1, 1) * h * 0.05]
    ink = _warp(strip, np.linalg.inv(fwd), (h, w), 0.0)
    bg, fg = rng.uniform(0.0, 0.35), rng.uniform(0.65, 1.0)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    gray = bg + (fg - bg) * np.clip(ink, 0, 1)
    if spec.noise:
        gray = gray + rng.normal(0, spec.noise, gray.shape)
    gray = np.clip(gray, 0, 1).astype(np.float32)
    if spec.channels == 1:
        return gray[..., None]
    tint = rng.uniform(0.8, 1.0, size=3).astype(np.float32)
    return np.clip(gray[..., None] * tint, 0, 1).astype(np.float32)


@dataclass(frozen=True)
class AugmentSpec:
    """Maximum magnitudes; ``prob`` is the chance each transform is applied."""

    rotation: float = 8.0      # degrees
    shear: float = 0.2
    perspective: float = 0.0015
    blur: float = 1.0          # 1 enables the 3x3 box blur
    noise: float = 0.04
    prob: float = 0.5

    def scaled(self, strength: float) -> "AugmentSpec":
        return replace(self, rotation=self.rotation * strength, shear=self.shear * strength,
                       perspective=self.perspective * strength,
                       blur=self.blur if strength > 0 else 0.0, noise=self.noise * strength)


def augment(image: np.ndarray, rng: np.random.Generator, spec: AugmentSpec | None = None,
            strength: float = 1.0) -> np.ndarray:
    """Random subset of rotation, shear, perspective, box blur and pixel noise.

    Each transform fires with probability ``spec.prob``.  ``strength=0``
    returns the image unchanged.  Rotation is capped at 15 degrees.
    """
    spec = (spec or AugmentSpec()).scaled(strength)
    img = np.asarray(image, dtype=np.float32)
    if strength == 0:
        return img.copy()
    h, w, c = img.shape
    m = np.eye(3)
    use = rng.random(5) < spec.prob
    if use[0] and spec.rotation:
        a = math.radians(min(15.0, spec.rotation) * rng.uniform(-1, 1))
        m = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]]) @ m
    if use[1] and spec.shear:
        m = np.array([[1, spec.shear * rng.uniform(-1, 1), 0], [0, 1, 0], [0, 0, 1]]) @ m
    if use[2] and spec.perspective:
        px, py = spec.perspective * rng.uniform(-1, 1, 2)
        m = np.array([[1, 0, 0], [0, 1, 0], [px, py * 2, 1]]) @ m
    out = img
    if not np.allclose(m, np.eye(3)):
        inv = np.linalg.inv(_about_center(m, h, w))
        out = np.stack([_warp(img[..., k].astype(np.float64), inv, (h, w), float(np.median(img[..., k])))
                        for k in range(c)], axis=-1)
    if use[3] and spec.blur:
        out = ndimage.uniform_filter(out, size=(3, 3, 1), mode="nearest")
    if use[4] and spec.noise:
        out = out + rng.normal(0, spec.noise, out.shape)
    return np.clip(out, 0, 1).astype(np.float32)


def random_erase(image: np.ndarray, rng: np.random.Generator, prob: float = 0.8,
                 area: tuple[float, float] = (0.02, 0.2)) -> np.ndarray:
    """Zero one random rectangle covering ``area`` of the image with probability ``prob``."""
    img = np.array(image, dtype=np.float32, copy=True)
    if rng.random() >= prob:
        return img
    h, w = img.shape[:2]
    for _ in range(10):
        target = rng.uniform(*area) * h * w
        ratio = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh <= h and 0 < ew <= w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            img[y:y + eh, x:x + ew] = 0.0
            break
    return img


def sample_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent stream per (seed, index...) so samples render in any order."""
    return np.random.default_rng([seed, *index])


def render_sample(word: str, spec: RenderSpec, seed: int, *index: int, aug: AugmentSpec | None = None,
                  strength: float = 1.0) -> np.ndarray:
    rng = sample_rng(seed, *index)
    return augment(render(word, spec, rng), rng, aug, strength)


# ---------------------------------------------------------------------------
# files


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (P5) for (H, W) or (H, W, 1); binary PPM (P6) for (H, W, 3).

    Float input is taken to be in [0, 1]; uint8 is written as is.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot write image of shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Float32 (H, W, C) in [0, 1] from a binary 8-bit P5 or P6 file."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        w, h, maxval = (int(x) for x in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: bad header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported")
    c = 1 if magic == b"P5" else 3
    body = data[pos:pos + h * w * c]
    if len(body) != h * w * c:
        raise FormatError(f"{path}: expected {h * w * c} pixel bytes, found {len(body)}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w, c) / np.float32(255)).astype(np.float32)


def split_lexicon(words: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Word-disjoint train/val split."""
    words = sorted(set(words))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(words))
    n_val = int(round(len(words) * val_fraction))
    val = sorted(words[i] for i in perm[:n_val])
    train = sorted(words[i] for i in perm[n_val:])
    return train, val


def make_dataset(spec: RenderSpec, n: int, out_dir: str | Path, words: Sequence[str] | None = None,
                 aug: AugmentSpec | None = None, strength: float = 1.0, name: str = "manifest.tsv",
                 stream: int = 0) -> Path:
    """Render ``n`` images into ``out_dir`` and write a TSV manifest; returns its path.

    Sample ``i`` uses word ``words[i % len(words)]`` after a seeded shuffle,
    so every word appears ``n / len(words)`` times (rounded).
    """
    if n < 0:
        raise ConfigError("n must be >= 0")
    words = list(words if words is not None else (spec.lexicon or DEFAULT_LEXICON))
    if n and not words:
        raise DegenerateInputError("no words to render")
    for w in words:
        check_word(w, spec)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    order = np.random.default_rng([spec.seed, stream, 7]).permutation(len(words)) if words else []
    lines = []
    width = max(5, len(str(n)))
    for i in range(n):
        word = words[order[i % len(words)]]
        img = render_sample(word, spec, spec.seed, stream, i, aug=aug, strength=strength)
        rel = f"images/{i:0{width}d}.pgm"
        write_pgm(out / rel, img)
        lines.append(f"{rel}\t{word}\n")
    manifest = out / name
    manifest.write_text("".join(lines), encoding="utf-8")
    log.info("wrote %d samples to %s", n, manifest)
    return manifest


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """(absolute image path, label) pairs; paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from None
    base = path.parent
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{ln}: expected 'path<TAB>label'")
        out.append((base / parts[0], parts[1]))
    return out


def load_manifest_images(path: str | Path) -> tuple[np.ndarray, list[str]]:
    items = read_manifest(path)
    if not items:
        return np.zeros((0, 0, 0, 0), dtype=np.float32), []
    images = np.stack([read_pgm(p) for p, _ in items])
    return images, [label for _, label in items]


def read_lexicon(path: str | Path) -> list[str]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        w = line.split("\t")[0].strip()
        if w:
            words.append(w.lower())
    return words
