"""CT image data model, HU windowing and the ADNARR1 on-disk container.

Images are 2D float32 grids of Hounsfield Units (HU). Networks consume
window-normalized copies in [-1, 1]. The ADNARR1 container is a single
UTF-8 JSON header line followed by the raw little-endian float32 payload,
so round trips are bitwise exact and trivially parseable from any language.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

ADNARR_MAGIC = "ADNARR1"
HU_CLAMP_LO = -1024.0
HU_CLAMP_HI = 32767.0
MIN_IMAGE_SIZE = 16

# Air to near-metal soft range; metal saturates at +1 under this window.
DEFAULT_WINDOW_LO = -1000.0
DEFAULT_WINDOW_HI = 2000.0


@dataclass(frozen=True)
class HUWindow:
    """Half-open display/normalization window in HU."""

    lo: float = DEFAULT_WINDOW_LO
    hi: float = DEFAULT_WINDOW_HI

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"degenerate window: lo={self.lo} must be < hi={self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class CTImage:
    """A 2D slice of attenuation values in HU with geometry metadata."""

    pixels: np.ndarray
    pixel_spacing_mm: float = 1.0
    provenance: str = "synthetic"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"pixels must be 2D, got shape {px.shape}")
        if px.shape[0] < MIN_IMAGE_SIZE or px.shape[1] < MIN_IMAGE_SIZE:
            raise ValueError(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("pixels contain NaN or Inf")
        if float(px.min()) < HU_CLAMP_LO or float(px.max()) > HU_CLAMP_HI:
            raise ValueError(
                f"HU values outside [{HU_CLAMP_LO}, {HU_CLAMP_HI}]; clamp on ingestion"
            )
        if self.pixel_spacing_mm <= 0:
            raise ValueError("pixel_spacing_mm must be positive")
        if self.provenance not in ("synthetic", "ingested"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @staticmethod
    def ingest(raw: np.ndarray, pixel_spacing_mm: float = 1.0) -> "CTImage":
        """Build a CTImage from an external array, clamping HU into range.

        Non-finite values are replaced before clamping so user-supplied
        arrays cannot propagate NaNs into the pipeline.
        """
        arr = np.asarray(raw, dtype=np.float32)
        arr = np.nan_to_num(arr, nan=HU_CLAMP_LO, posinf=HU_CLAMP_HI, neginf=HU_CLAMP_LO)
        arr = np.clip(arr, HU_CLAMP_LO, HU_CLAMP_HI)
        return CTImage(arr, pixel_spacing_mm=pixel_spacing_mm, provenance="ingested")


@dataclass(frozen=True)
class NormalizedImage:
    """A window-normalized image with every value in [-1, 1]."""

    pixels: np.ndarray
    window: HUWindow

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"pixels must be 2D, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("pixels contain NaN or Inf")
        if float(px.min()) < -1.0 or float(px.max()) > 1.0:
            raise ValueError("normalized values must lie in [-1, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def normalize_hu(image: CTImage, window: HUWindow | None = None) -> NormalizedImage:
    """Map HU through ``window`` into [-1, 1], clamping values outside it."""
    if window is None:
        window = HUWindow()
    scaled = 2.0 * (image.pixels.astype(np.float64) - window.lo) / window.width - 1.0
    clipped = np.clip(scaled, -1.0, 1.0).astype(np.float32)
    return NormalizedImage(clipped, window)


def denormalize_hu(
    image: NormalizedImage,
    pixel_spacing_mm: float = 1.0,
    provenance: str = "synthetic",
) -> CTImage:
    """Invert :func:`normalize_hu` on the non-clamped range."""
    w = image.window
    hu = (image.pixels.astype(np.float64) + 1.0) * 0.5 * w.width + w.lo
    hu = np.clip(hu, HU_CLAMP_LO, HU_CLAMP_HI).astype(np.float32)
    return CTImage(hu, pixel_spacing_mm=pixel_spacing_mm, provenance=provenance)


def write_array(path, array: np.ndarray, *, spacing_mm: float = 1.0, provenance: str = "synthetic") -> None:
    """Write a 2D/3D float32 array as an ADNARR1 container.

    Layout: one JSON header line (magic, shape, dtype, spacing_mm,
    provenance) terminated by ``\\n``, then the raw little-endian float32
    payload in row-major order.
    """
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        raise ValueError(f"ADNARR1 stores float32 only, got {arr.dtype}")
    if arr.ndim not in (2, 3):
        raise ValueError(f"ADNARR1 stores 2D or 3D arrays only, got ndim={arr.ndim}")
    header = {
        "magic": ADNARR_MAGIC,
        "shape": list(arr.shape),
        "dtype": "f32le",
        "spacing_mm": float(spacing_mm),
        "provenance": provenance,
    }
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_array(path) -> tuple[np.ndarray, dict]:
    """Read an ADNARR1 container; returns ``(array, metadata)``.

    Raises :class:`FormatError` for malformed headers and
    :class:`CorruptionError` when the payload size disagrees with the
    declared shape.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unparseable ADNARR1 header") from exc
    if not isinstance(header, dict) or header.get("magic") != ADNARR_MAGIC:
        raise FormatError(f"{path}: missing or wrong magic (expected {ADNARR_MAGIC})")
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unknown dtype tag {header.get('dtype')!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) not in (2, 3)
        or not all(isinstance(s, int) and s > 0 for s in shape)
    ):
        raise FormatError(f"{path}: bad shape field {shape!r}")
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    meta = {
        "shape": tuple(shape),
        "dtype": "f32le",
        "spacing_mm": float(header.get("spacing_mm", 1.0)),
        "provenance": header.get("provenance", "ingested"),
    }
    return arr.copy(), meta


def write_image(path, image: CTImage) -> None:
    write_array(path, image.pixels, spacing_mm=image.pixel_spacing_mm, provenance=image.provenance)


def read_image(path) -> CTImage:
    arr, meta = read_array(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a 2D image, got shape {arr.shape}")
    return CTImage(arr, pixel_spacing_mm=meta["spacing_mm"], provenance=meta["provenance"])
