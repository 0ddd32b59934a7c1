"""
ISP color stages and their exact inverses
Gamma, smoothstep tone mapping, white balance and color correction matrices
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from error_handler import ConfigurationError, InvalidImageError, ParameterError

GAMMA_EPSILON = 1e-5
GAMMA_RANGE = (2.0, 3.5)
SINGULAR_DET = 1e-12

# Linear sRGB (D65) to CIE XYZ
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


class ColorState(Enum):
    """Color encoding of the values held by a PlanarImage"""
    SRGB_ENCODED = "srgb_encoded"
    LINEAR_CAMERA = "linear_camera"
    LINEAR_SRGB = "linear_srgb"

    @property
    def is_linear(self) -> bool:
        return self is not ColorState.SRGB_ENCODED


@dataclass
class PlanarImage:
    """Floating-point RGB image (height, width, 3) tagged with its color state"""
    data: np.ndarray
    state: ColorState

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidImageError(f"Expected an (H, W, 3) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidImageError("Image contains non-finite values")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray, state: Optional[ColorState] = None) -> "PlanarImage":
        return PlanarImage(data, state or self.state)

    def clipped(self) -> Tuple["PlanarImage", int]:
        """Clip to [0, 1]; returns the image and the number of pixels that had any channel outside"""
        outside = np.any((self.data < 0.0) | (self.data > 1.0), axis=2)
        return self.with_data(np.clip(self.data, 0.0, 1.0)), int(outside.sum())


@dataclass
class ClampStats:
    """Counters for values forced into range by a stage"""
    tone_clamped: int = 0
    clipped_pixels: int = 0


@dataclass(frozen=True)
class GammaParams:
    gamma: float
    epsilon: float = GAMMA_EPSILON

    def __post_init__(self):
        if not GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1]:
            raise ParameterError(f"gamma {self.gamma} outside {list(GAMMA_RANGE)}", parameter="gamma")
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be positive", parameter="epsilon")


def _require_linear(img: PlanarImage, operation: str):
    if not img.state.is_linear:
        raise InvalidImageError(f"{operation} expects a linear image, got {img.state.value}")


def gamma_correct(img: PlanarImage, g: GammaParams) -> PlanarImage:
    """y = max(x, eps) ** (1 / gamma); linear -> encoded"""
    _require_linear(img, "gamma_correct")
    return img.with_data(np.maximum(img.data, g.epsilon) ** (1.0 / g.gamma), ColorState.SRGB_ENCODED)


def gamma_invert(img: PlanarImage, g: GammaParams) -> PlanarImage:
    """y = max(x, eps) ** gamma; encoded -> linear sRGB"""
    if img.state.is_linear:
        raise InvalidImageError(f"gamma_invert expects an encoded image, got {img.state.value}")
    return img.with_data(np.maximum(img.data, g.epsilon) ** g.gamma, ColorState.LINEAR_SRGB)


def _clamp_unit(data: np.ndarray, stats: Optional[ClampStats]) -> np.ndarray:
    outside = int(np.count_nonzero((data < 0.0) | (data > 1.0)))
    if outside and stats is not None:
        stats.tone_clamped += outside
    return np.clip(data, 0.0, 1.0) if outside else data


def tone_map(img: PlanarImage, stats: Optional[ClampStats] = None) -> PlanarImage:
    """Smoothstep 3x^2 - 2x^3"""
    x = _clamp_unit(img.data, stats)
    return img.with_data(3.0 * x ** 2 - 2.0 * x ** 3)


def tone_invert(img: PlanarImage, stats: Optional[ClampStats] = None) -> PlanarImage:
    """Inverse smoothstep 1/2 - sin(asin(1 - 2y) / 3)"""
    y = _clamp_unit(img.data, stats)
    return img.with_data(0.5 - np.sin(np.arcsin(1.0 - 2.0 * y) / 3.0))


def white_balance(img: PlanarImage, g_r: float, g_b: float, clip: bool = False) -> PlanarImage:
    """Scale R by g_r and B by g_b; G untouched"""
    if g_r <= 0 or g_b <= 0:
        raise ParameterError(f"white balance gains must be positive, got g_r={g_r}, g_b={g_b}",
                             parameter="g_r" if g_r <= 0 else "g_b")
    data = img.data * np.array([g_r, 1.0, g_b])
    if clip:
        data = np.clip(data, 0.0, 1.0)
    return img.with_data(data)


def check_invertible(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ParameterError(f"{name} must be 3x3, got shape {m.shape}", parameter=name)
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < SINGULAR_DET:
        raise ParameterError(f"{name} is singular", parameter=name)
    return m


def apply_ccm(img: PlanarImage, matrix: np.ndarray) -> PlanarImage:
    """Per-pixel M @ rgb; toggles LinearCamera <-> LinearSrgb"""
    _require_linear(img, "apply_ccm")
    m = check_invertible(matrix, "ccm")
    state = ColorState.LINEAR_SRGB if img.state is ColorState.LINEAR_CAMERA else ColorState.LINEAR_CAMERA
    return img.with_data(img.data @ m.T, state)


class CcmMode(Enum):
    PICK_ONE = "pick"
    CONVEX_MIXTURE = "mix"


@dataclass(frozen=True)
class CcmSelection:
    """How a color correction matrix was chosen; enough to rebuild it exactly"""
    mode: CcmMode
    weights: Tuple[float, ...]
    index: Optional[int] = None

    def to_dict(self) -> Dict:
        return {'mode': self.mode.value, 'index': self.index, 'weights': list(self.weights)}

    @classmethod
    def from_dict(cls, data: Dict) -> "CcmSelection":
        return cls(mode=CcmMode(data['mode']), weights=tuple(float(w) for w in data['weights']),
                   index=data.get('index'))


@dataclass
class CcmSet:
    """Named camera-to-sRGB matrices with precomputed inverses"""
    names: List[str]
    matrices: List[np.ndarray]
    inverses: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            raise ConfigurationError("CCM set is empty", field_name="ccms")
        if len(self.names) != len(self.matrices):
            raise ConfigurationError("CCM names and matrices differ in length", field_name="ccms")
        self.matrices = [check_invertible(m, f"ccm '{n}'") for n, m in zip(self.names, self.matrices)]
        if not self.inverses:
            self.inverses = [np.linalg.inv(m) for m in self.matrices]
        for name, m, inv in zip(self.names, self.matrices, self.inverses):
            if np.max(np.abs(m @ inv - np.eye(3))) >= 1e-6:
                raise ConfigurationError(f"CCM '{name}' inverse is inaccurate", field_name="ccms")

    @classmethod
    def from_srgb_to_camera(cls, names: Sequence[str], forward: Sequence[np.ndarray]) -> "CcmSet":
        """Build from sRGB->camera matrices (the unprocessing direction)"""
        inverses = [check_invertible(f, f"ccm '{n}'") for n, f in zip(names, forward)]
        return cls(list(names), [np.linalg.inv(f) for f in inverses], inverses)

    @classmethod
    def from_xyz_to_camera(cls, names: Sequence[str], xyz_to_cam: Sequence[np.ndarray]) -> "CcmSet":
        """Compose XYZ->camera calibration matrices with sRGB->XYZ and normalize rows to sum 1"""
        forward = []
        for name, m in zip(names, xyz_to_cam):
            rgb_to_cam = np.asarray(m, dtype=np.float64) @ SRGB_TO_XYZ
            rgb_to_cam = rgb_to_cam / rgb_to_cam.sum(axis=1, keepdims=True)
            forward.append(rgb_to_cam)
        return cls.from_srgb_to_camera(names, forward)

    def __len__(self) -> int:
        return len(self.names)

    def compose(self, selection: CcmSelection) -> Tuple[np.ndarray, np.ndarray]:
        """(camera->sRGB matrix, its inverse) for a selection record"""
        weights = np.asarray(selection.weights, dtype=np.float64)
        if weights.shape != (len(self),):
            raise ConfigurationError(
                f"selection has {weights.size} weights for {len(self)} CCMs", field_name="ccms")
        nonzero = np.flatnonzero(weights)
        if nonzero.size == 1 and weights[nonzero[0]] == 1.0:
            i = int(nonzero[0])
            return self.matrices[i], self.inverses[i]
        inverse = np.tensordot(weights, np.stack(self.inverses), axes=1)
        return np.linalg.inv(check_invertible(inverse, "mixed ccm")), inverse

    def to_dict(self) -> Dict:
        return {name: m.tolist() for name, m in zip(self.names, self.matrices)}


def select_ccm(rng: np.random.Generator, ccms: CcmSet, mode: CcmMode = CcmMode.PICK_ONE,
               index: Optional[int] = None) -> Tuple[np.ndarray, CcmSelection]:
    """Pick one CCM uniformly (or `index`), or draw Dirichlet(1,...,1) mixture weights"""
    if ccms is None or len(ccms) == 0:
        raise ConfigurationError("CCM set is empty", field_name="ccms")
    n = len(ccms)
    if mode is CcmMode.PICK_ONE:
        i = int(rng.integers(n)) if index is None else int(index)
        if not 0 <= i < n:
            raise ParameterError(f"CCM index {i} outside [0, {n})", parameter="ccm_index")
        weights = tuple(1.0 if j == i else 0.0 for j in range(n))
        selection = CcmSelection(mode, weights, i)
    else:
        weights = tuple(float(w) for w in rng.dirichlet(np.ones(n)))
        selection = CcmSelection(mode, weights)
    matrix, _ = ccms.compose(selection)
    return matrix, selection
