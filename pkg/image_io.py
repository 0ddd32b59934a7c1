"""
Image codec helpers
8-bit PNG and binary PPM in, 8-bit PNG out, with format sniffing and output containment
"""
import hashlib
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from color_pipeline import ColorState, PlanarImage
from error_handler import ImageFormatError, OutputError
from logger import get_logger

ACCEPTED_FORMATS = ("PNG", "PPM")
PNG_PALETTE = 3

logger = get_logger("lowlight.io")


def _png_header(head: bytes) -> Tuple[int, int]:
    """(bit depth, color type) from the IHDR chunk"""
    if len(head) < 26 or head[12:16] != b"IHDR":
        raise ImageFormatError("PNG has no IHDR chunk")
    return head[24], head[25]


def _ppm_header(head: bytes) -> Tuple[bytes, int]:
    """(magic, maxval) from a PNM header, skipping comments"""
    tokens, i = [], 0
    while len(tokens) < 4 and i < len(head):
        c = head[i:i + 1]
        if c == b"#":
            while i < len(head) and head[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(head) and not head[i:i + 1].isspace() and head[i:i + 1] != b"#":
                i += 1
            tokens.append(head[start:i])
    if len(tokens) < 4:
        raise ImageFormatError("truncated PPM header")
    try:
        return tokens[0], int(tokens[3])
    except ValueError:
        raise ImageFormatError(f"invalid PPM maxval {tokens[3]!r}")


def sniff_format(path: Path) -> str:
    """Identify the container with Pillow, then reject bit depths the codec cannot hold losslessly"""
    try:
        with Image.open(path, formats=ACCEPTED_FORMATS) as im:
            container = im.format
    except (UnidentifiedImageError, OSError) as e:
        raise ImageFormatError(f"unsupported image format: {path.name}") from e

    # Pillow widens 16-bit data silently; the depth lives in the raw header
    with open(path, 'rb') as f:
        head = f.read(512)

    if container == "PNG":
        depth, color_type = _png_header(head)
        if depth != 8 and not (color_type == PNG_PALETTE and depth < 8):
            raise ImageFormatError(f"unsupported PNG bit depth {depth} in {path.name}; only 8-bit is read")
        return "png"

    magic, maxval = _ppm_header(head)
    if magic != b"P6":
        raise ImageFormatError(f"unsupported PNM variant {magic.decode()} in {path.name}; only P6 is read")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval} in {path.name}; only 8-bit is read")
    return "ppm"


def read_image(path: Union[str, Path]) -> PlanarImage:
    """Decode to an sRGB-encoded PlanarImage with values in [0, 1]"""
    path = Path(path)
    if not path.is_file():
        raise ImageFormatError(f"not a file: {path}")
    sniff_format(path)

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "LA", "1"):
                logger.warning("Grayscale image replicated to three channels", file=path.name,
                               mode=im.mode, event_type="grayscale_input")
                im = im.convert("L").convert("RGB")
            elif im.mode != "RGB":
                # RGBA drops alpha; palettes expand
                im = im.convert("RGB")
            data = np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise ImageFormatError(f"cannot decode {path.name}: {e}") from e

    return PlanarImage(data.astype(np.float64) / 255.0, ColorState.SRGB_ENCODED)


def to_uint8(data: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantize with round-half-to-even"""
    return np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(img: PlanarImage, path: Union[str, Path]):
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageFormatError(f"output must be PNG, got {path.name}")
    Image.fromarray(to_uint8(img.data)).save(path, format="PNG")


def ensure_within(root: Union[str, Path], path: Union[str, Path]) -> Path:
    """Resolve `path` and refuse anything that escapes `root`"""
    root_resolved = Path(root).resolve()
    resolved = Path(path).resolve()
    if resolved != root_resolved and root_resolved not in resolved.parents:
        logger.warning("Unsafe output path", output_path=str(path), event_type="unsafe_output_path")
        raise OutputError(f"refusing to write outside {root}: {path}")
    return resolved


def file_checksum(path: Union[str, Path]) -> str:
    """SHA256 checksum of a file"""
    hash_sha256 = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b""):
            hash_sha256.update(chunk)
    return hash_sha256.hexdigest()
