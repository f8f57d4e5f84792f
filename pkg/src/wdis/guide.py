"""Guide-image composition and prompt construction for background-shift generation.

A guide is built by box-downsampling a foreground image and pasting it opaquely
onto a background template at a random location. The guide and a templated
prompt are sent to a generation backend; the identity backend echoes the
guide, the remote backend speaks a small JSON protocol over HTTP.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

BACKGROUNDS = (
    "on grass",
    "on a road",
    "in a forest",
    "in water",
    "in a cave",
    "in sand",
    "indoors",
    "in snow",
    "in rain",
    "at night",
)
DEFAULT_STRENGTH = 0.9
SCALE_RANGE = (0.3, 0.5)


@dataclass(frozen=True)
class RGBImage:
    width: int
    height: int
    pixels: bytes  # row-major RGB

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if len(self.pixels) != 3 * self.width * self.height:
            raise ValueError(f"expected {3 * self.width * self.height} pixel bytes, got {len(self.pixels)}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RGBImage":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("expected an (height, width, 3) array")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        return cls(arr.shape[1], arr.shape[0], np.ascontiguousarray(arr).tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3).copy()

    def sha256(self) -> str:
        return hashlib.sha256(encode_p6(self)).hexdigest()


def encode_p6(img: RGBImage) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels


def decode_p6(data: bytes) -> RGBImage:
    """Parse a binary portable pixmap with maxval 255 (comments allowed in the header)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated P6 header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"not a P6 pixmap (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # exactly one whitespace byte before the raster
    raster = data[pos : pos + 3 * width * height]
    if len(raster) != 3 * width * height:
        raise ValueError("truncated P6 raster")
    return RGBImage(width, height, bytes(raster))


def read_p6(path) -> RGBImage:
    with open(path, "rb") as fh:
        return decode_p6(fh.read())


def write_p6(path, img: RGBImage) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_p6(img))


# --------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptSpec:
    fg: str
    definition: str
    bg: str

    def __post_init__(self):
        for name in ("fg", "definition", "bg"):
            if not getattr(self, name).strip():
                raise ValueError(f"prompt field {name!r} is empty")


def build_prompt(spec: PromptSpec) -> str:
    return f"a photo of a {spec.fg.strip()}, {spec.definition.strip()}, {spec.bg.strip()}"


# --------------------------------------------------------------------------
# compositing


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    width: int
    height: int

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "width": self.width, "height": self.height}


def fitted_size(fg_w: int, fg_h: int, bg_w: int, bg_h: int, scale: float) -> tuple[int, int]:
    """Largest aspect-preserving size within ``floor(scale * bg)`` that does not upsample."""
    box_w, box_h = int(np.floor(scale * bg_w)), int(np.floor(scale * bg_h))
    if box_w < 1 or box_h < 1:
        raise ValueError(f"scale {scale} leaves no room on a {bg_w}x{bg_h} background")
    ratio = min(1.0, box_w / fg_w, box_h / fg_h)
    out_w = max(1, min(box_w, int(np.floor(fg_w * ratio))))
    out_h = max(1, min(box_h, int(np.floor(fg_h * ratio))))
    return out_w, out_h


def box_downsample(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Average source blocks into an ``out_h x out_w`` image, rounding half up.

    Block ``(i, j)`` covers source rows ``[i*H//out_h, (i+1)*H//out_h)`` and the
    analogous columns, so an integer factor ``k`` gives plain ``k x k`` blocks.
    """
    h, w, _ = img.shape
    if out_w > w or out_h > h:
        raise ValueError("box_downsample cannot upsample")
    src = img.astype(np.int64)
    rows = [(i * h) // out_h for i in range(out_h + 1)]
    cols = [(j * w) // out_w for j in range(out_w + 1)]
    out = np.empty((out_h, out_w, 3), dtype=np.uint8)
    for i in range(out_h):
        for j in range(out_w):
            block = src[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            count = block.shape[0] * block.shape[1]
            total = block.sum(axis=(0, 1))
            # floor(total / count + 1/2) in integers
            out[i, j] = (2 * total + count) // (2 * count)
    return out


def compose_guide(
    fg: RGBImage,
    bg: RGBImage,
    scale: float,
    rng: np.random.Generator,
) -> tuple[RGBImage, Rect]:
    """Downsample ``fg`` to fit ``scale`` of ``bg`` and paste it at a random offset."""
    if not SCALE_RANGE[0] <= scale <= SCALE_RANGE[1]:
        raise ValueError(f"scale must lie in {list(SCALE_RANGE)}")
    out_w, out_h = fitted_size(fg.width, fg.height, bg.width, bg.height, scale)
    if out_w > bg.width or out_h > bg.height:
        raise ValueError("scaled foreground does not fit inside the background")
    small = box_downsample(fg.to_array(), out_w, out_h)
    x0 = int(rng.integers(0, bg.width - out_w + 1))
    y0 = int(rng.integers(0, bg.height - out_h + 1))
    canvas = bg.to_array()
    canvas[y0 : y0 + out_h, x0 : x0 + out_w] = small
    return RGBImage.from_array(canvas), Rect(x0, y0, out_w, out_h)


# --------------------------------------------------------------------------
# generation backends


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    guide: RGBImage
    strength: float = DEFAULT_STRENGTH
    seed: int = 0
    request_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("noise strength must lie in [0, 1]")


class Backend(Protocol):
    def __call__(self, request: BackendRequest) -> RGBImage: ...


class BackendError(RuntimeError):
    def __init__(self, message: str, request_id: int):
        super().__init__(f"request {request_id}: {message}")
        self.request_id = request_id


class IdentityBackend:
    """Returns the guide unchanged; stands in for a diffusion model in tests and demos."""

    def __call__(self, request: BackendRequest) -> RGBImage:
        return request.guide


def encode_request(request: BackendRequest) -> bytes:
    body = {
        "prompt": request.prompt,
        "guide": base64.b64encode(encode_p6(request.guide)).decode("ascii"),
        "strength": request.strength,
        "seed": request.seed,
    }
    return json.dumps(body).encode("utf-8")


def decode_request(data: bytes, request_id: int = 0) -> BackendRequest:
    body = json.loads(data.decode("utf-8"))
    guide = decode_p6(base64.b64decode(body["guide"]))
    return BackendRequest(body["prompt"], guide, float(body["strength"]), int(body["seed"]), request_id)


def encode_response(img: RGBImage) -> bytes:
    return json.dumps({"image": base64.b64encode(encode_p6(img)).decode("ascii")}).encode("utf-8")


def decode_response(data: bytes) -> RGBImage:
    body = json.loads(data.decode("utf-8"))
    return decode_p6(base64.b64decode(body["image"]))


class RemoteBackend:
    """POSTs the JSON wire format to ``url`` and decodes the returned image."""

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, request: BackendRequest) -> RGBImage:
        req = urllib.request.Request(
            self.url,
            data=encode_request(request),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return decode_response(resp.read())


def backend_from_spec(spec: str, timeout: float = 60.0) -> Backend:
    """``identity`` or ``remote:<url>``."""
    if spec == "identity":
        return IdentityBackend()
    if spec.startswith("remote:"):
        return RemoteBackend(spec[len("remote:") :], timeout)
    raise ValueError(f"unknown backend {spec!r}")


def generate(
    request: BackendRequest,
    backend: Backend,
    retries: int = 2,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[RGBImage, dict]:
    """Call the backend with retries and return the image and its provenance record."""
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            image = backend(request)
            break
        except (OSError, urllib.error.URLError, ValueError, TimeoutError) as exc:
            last_exc = exc
            log.warning("request %d attempt %d failed: %s", request.request_id, attempt + 1, exc)
            if attempt < retries:
                sleep(backoff * 2**attempt)
    else:
        raise BackendError(str(last_exc), request.request_id) from last_exc
    provenance = {
        "request_id": request.request_id,
        "prompt": request.prompt,
        "strength": request.strength,
        "seed": request.seed,
        "guide_sha256": request.guide.sha256(),
        "output_sha256": image.sha256(),
    }
    return image, provenance


def generate_many(
    requests: Sequence[BackendRequest],
    backend: Backend,
    max_workers: int = 4,
    retries: int = 2,
) -> list[tuple[RGBImage, dict]]:
    """Bounded-parallel dispatch; results come back ordered by request id."""
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda r: generate(r, backend, retries), requests))
    return sorted(results, key=lambda item: item[1]["request_id"])
