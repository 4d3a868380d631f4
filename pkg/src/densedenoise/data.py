"""Image I/O and training-data construction.

Interchange format is binary PGM (P5, maxval 255).  Noise is additive white
gaussian, generated by the counter-based Philox generator so every
realization is reproducible from its 64-bit seed alone; noisy values are
deliberately not clipped so residual targets stay exact.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np


class PgmError(ValueError):
    """Base for PGM parse failures."""


class PgmMagicError(PgmError):
    """Wrong or unsupported magic (only binary P5 is accepted)."""


class PgmMaxvalError(PgmError):
    """Maxval other than 255."""


class PgmTruncatedError(PgmError):
    """Payload shorter than width*height."""


@dataclass
class GrayImage:
    """8-bit grayscale image; computation uses the [0,1] float view."""

    pixels: np.ndarray  # uint8, [H, W]

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError(f"GrayImage expects 2-D pixels, got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_unit(self, dtype=np.float32) -> np.ndarray:
        return (self.pixels / 255.0).astype(dtype)

    @staticmethod
    def from_unit(values: np.ndarray, clip: bool = True) -> "GrayImage":
        """[0,1] floats back to bytes, rounding half away from zero so the
        normalization round trip is exact."""
        v = np.asarray(values, dtype=np.float64)
        if clip:
            v = np.clip(v, 0.0, 1.0)
        return GrayImage(np.floor(v * 255.0 + 0.5).clip(0, 255).astype(np.uint8))


def _read_header_token(f) -> bytes:
    """Next whitespace-delimited token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise PgmTruncatedError("unexpected end of file in header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path: str) -> GrayImage:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P2":
            raise PgmMagicError("ASCII PGM (P2) is not supported; use binary P5")
        if magic != b"P5":
            raise PgmMagicError(f"bad magic {magic!r}; expected P5")
        try:
            width = int(_read_header_token(f))
            height = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as e:
            raise PgmError(f"malformed header: {e}") from e
        if width <= 0 or height <= 0:
            raise PgmError(f"non-positive extents {width}x{height}")
        if maxval != 255:
            raise PgmMaxvalError(f"maxval {maxval}; only 255 supported")
        payload = f.read(width * height)
        if len(payload) < width * height:
            raise PgmTruncatedError(
                f"payload holds {len(payload)} bytes, need {width * height}"
            )
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))


def write_pgm(image: GrayImage, path: str):
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(image.pixels.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# noise


@dataclass
class NoiseSpec:
    """AWGN description; sigma is in 8-bit units (15/25/50 in the tables)."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def _philox(seed: int, stream: int = 0) -> np.random.Generator:
    # 128-bit Philox key from (seed, stream); counter-based, platform-stable
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | (stream & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def add_awgn(clean: np.ndarray, spec: NoiseSpec, stream: int = 0) -> np.ndarray:
    """clean (in [0,1]) plus N(0, (sigma/255)^2); never clipped, never mutates."""
    clean = np.asarray(clean)
    if spec.sigma == 0:
        return clean.copy()
    noise = _philox(spec.seed, stream).normal(0.0, spec.sigma / 255.0, size=clean.shape)
    return (clean + noise.astype(clean.dtype)).astype(clean.dtype)


def noise_stream_for_name(name: str) -> int:
    """Stable per-filename stream id (directory-order independent)."""
    return zlib.crc32(os.path.basename(name).encode())


# ---------------------------------------------------------------------------
# patches and datasets


def extract_patches(image: np.ndarray, patch_size: int, stride: int,
                    augment: str = "none") -> list[np.ndarray]:
    """Raster-order sliding windows; augment='flips+rot90' applies the full
    8-element dihedral group to each patch, in a fixed order."""
    img = np.asarray(image)
    h, w = img.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than image {h}x{w}")
    if augment not in ("none", "flips+rot90"):
        raise ValueError(f"unknown augment mode {augment!r}")
    patches = []
    for i in range(0, h - patch_size + 1, stride):
        for j in range(0, w - patch_size + 1, stride):
            p = img[i : i + patch_size, j : j + patch_size]
            if augment == "none":
                patches.append(p.copy())
            else:
                for k in range(4):
                    q = np.rot90(p, k)
                    patches.append(q.copy())
                    patches.append(np.fliplr(q).copy())
    return patches


@dataclass
class PatchSet:
    """Clean/noisy patch pairs plus the manifest they were built from."""

    pairs: list  # list of (clean [H,W] float32, noisy [H,W] float32)
    patch_size: int
    manifest: list = field(default_factory=list)  # lines: file<TAB>idx<TAB>seed

    def __len__(self):
        return len(self.pairs)

    def manifest_text(self) -> str:
        return "\n".join(self.manifest) + "\n"

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.manifest_text().encode()).hexdigest()


def list_pgm_files(image_dir: str) -> list[str]:
    names = sorted(n for n in os.listdir(image_dir) if n.lower().endswith(".pgm"))
    return [os.path.join(image_dir, n) for n in names]


def make_dataset(image_dir: str, noise: NoiseSpec, patch_size: int = 40,
                 stride: int = 10, shuffle_seed: int = 0,
                 augment: str = "none", limit: int | None = None) -> PatchSet:
    """Deterministic dataset: sorted filenames, raster patch order, per-patch
    noise streams derived from (noise.seed, patch index), seeded shuffle."""
    paths = list_pgm_files(image_dir)
    if not paths:
        raise ValueError(f"no PGM images in {image_dir!r}")
    pairs = []
    manifest = []
    idx = 0
    for path in paths:
        try:
            img = read_pgm(path).to_unit(np.float32)
        except OSError as e:
            raise ValueError(f"unreadable image {path!r}: {e}") from e
        for p in extract_patches(img, patch_size, stride, augment):
            noisy = add_awgn(p, noise, stream=idx)
            pairs.append((p, noisy))
            manifest.append(f"{os.path.basename(path)}\t{idx}\t{noise.seed}")
            idx += 1
            if limit is not None and idx >= limit:
                break
        if limit is not None and idx >= limit:
            break
    perm = _philox(shuffle_seed, stream=0xD5).permutation(len(pairs))
    pairs = [pairs[i] for i in perm]
    manifest = [manifest[i] for i in perm]
    return PatchSet(pairs, patch_size, manifest)
