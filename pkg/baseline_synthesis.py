"""
Alternative low-light synthesizers for ablations
Illumination scaling, inverse gamma with Poisson / Poisson-Gaussian noise, plain linear
scaling, and the main pipeline with an RGGB mosaic/demosaic round trip in the raw domain
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from color_pipeline import ClampStats, ColorState, GammaParams, PlanarImage
from error_handler import ConfigurationError, DimensionError, ParameterError
from sensor_noise import (DegradationParams, ParamRanges, RngPurpose, SeededRng, check_k,
                          quantization_noise, sample_params, sample_truncated_gaussian,
                          shot_read_noise)


class BaselineMethod(Enum):
    RETINEX = "retinex"
    INV_GAMMA = "invgamma"
    INV_GAMMA_POISSON = "invgamma-poisson"
    INV_GAMMA_MIXED = "invgamma-mixed"
    LINEAR_SCALE = "linear"
    OURS_MOSAIC = "ours-mosaic"


class NoiseSpec(Enum):
    NONE = "none"
    POISSON = "poisson"
    GAUSSIAN_POISSON = "gaussian-poisson"


GAMMA_NOISE = {
    BaselineMethod.INV_GAMMA: NoiseSpec.NONE,
    BaselineMethod.INV_GAMMA_POISSON: NoiseSpec.POISSON,
    BaselineMethod.INV_GAMMA_MIXED: NoiseSpec.GAUSSIAN_POISSON,
}

BAYER_PATTERNS = ("RGGB",)


@dataclass(frozen=True)
class BaselineSettings:
    """Noise constants of the inverse-gamma baselines"""
    photon_scale: float = 1000.0
    gaussian_std: float = 0.01

    def __post_init__(self):
        if not self.photon_scale > 0:
            raise ConfigurationError("baselines.photon_scale must be positive",
                                     field_name="baselines.photon_scale")
        if self.gaussian_std < 0:
            raise ConfigurationError("baselines.gaussian_std must be non-negative",
                                     field_name="baselines.gaussian_std")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "BaselineSettings":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError("'baselines' must be a mapping", field_name="baselines")
        unknown = sorted(set(data) - {'photon_scale', 'gaussian_std'})
        if unknown:
            raise ConfigurationError(f"unknown key 'baselines.{unknown[0]}'",
                                     field_name=f"baselines.{unknown[0]}")
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError):
            raise ConfigurationError("baseline settings must be numbers", field_name="baselines")

    def to_dict(self) -> Dict[str, float]:
        return {'photon_scale': self.photon_scale, 'gaussian_std': self.gaussian_std}


@dataclass(frozen=True)
class BaselineParams:
    """Sampled parameters of one baseline degradation"""
    method: BaselineMethod
    L: Optional[float] = None
    k: Optional[float] = None
    gamma: Optional[float] = None
    noise: NoiseSpec = NoiseSpec.NONE
    photon_scale: float = 1000.0
    gaussian_std: float = 0.01
    pattern: str = "RGGB"

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {'method': self.method.value}
        if self.L is not None:
            out['L'] = self.L
        if self.k is not None:
            out['k'] = self.k
        if self.gamma is not None:
            out.update(gamma=self.gamma, noise=self.noise.value,
                       photon_scale=self.photon_scale, gaussian_std=self.gaussian_std)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BaselineParams":
        return cls(method=BaselineMethod(data['method']), L=data.get('L'), k=data.get('k'),
                   gamma=data.get('gamma'), noise=NoiseSpec(data.get('noise', NoiseSpec.NONE.value)),
                   photon_scale=float(data.get('photon_scale', 1000.0)),
                   gaussian_std=float(data.get('gaussian_std', 0.01)))


def parse_method(name: str) -> BaselineMethod:
    try:
        return BaselineMethod(name)
    except ValueError:
        choices = ", ".join(m.value for m in BaselineMethod)
        raise ParameterError(f"unknown baseline method '{name}' (choose from {choices})",
                             parameter="method")


def retinex_degrade(img: PlanarImage, L: float) -> PlanarImage:
    """I(x) = R(x) * L with the input taken as reflectance"""
    check_k(L, "L")
    return img.with_data(img.data * L)


def linear_scale_degrade(img: PlanarImage, k: float) -> PlanarImage:
    check_k(k)
    return img.with_data(img.data * k)


def gamma_noise_degrade(img: PlanarImage, gamma: float, noise: NoiseSpec, rng: np.random.Generator,
                        photon_scale: float = 1000.0, gaussian_std: float = 0.01,
                        stats: Optional[ClampStats] = None) -> PlanarImage:
    """x ** gamma plus Poisson(P * x ** gamma) / P shot noise and optional N(0, sigma^2), clipped"""
    GammaParams(gamma)
    if not isinstance(noise, NoiseSpec):
        try:
            noise = NoiseSpec(noise)
        except ValueError:
            raise ParameterError(f"invalid noise spec '{noise}'", parameter="noise")
    if photon_scale <= 0 or gaussian_std < 0:
        raise ParameterError("noise scales must be positive", parameter="noise")

    y = np.clip(img.data, 0.0, 1.0) ** gamma
    if noise is not NoiseSpec.NONE:
        y = rng.poisson(photon_scale * y) / photon_scale
    if noise is NoiseSpec.GAUSSIAN_POISSON:
        y = y + rng.normal(0.0, gaussian_std, y.shape)
    out, clipped = img.with_data(y).clipped()
    if stats is not None:
        stats.clipped_pixels += clipped
    return out


def sample_baseline_params(method: BaselineMethod, rng: SeededRng, ranges: ParamRanges,
                           settings: Optional[BaselineSettings] = None) -> BaselineParams:
    """L and k share the attenuation distribution; gamma is uniform over its range"""
    settings = settings or BaselineSettings()
    gen = rng.generator(RngPurpose.PARAMS)
    if method is BaselineMethod.RETINEX:
        return BaselineParams(method, L=float(sample_truncated_gaussian(gen, ranges.k, 1)[0]))
    if method is BaselineMethod.LINEAR_SCALE:
        return BaselineParams(method, k=float(sample_truncated_gaussian(gen, ranges.k, 1)[0]))
    if method in GAMMA_NOISE:
        return BaselineParams(method, gamma=float(gen.uniform(ranges.gamma.low, ranges.gamma.high)),
                              noise=GAMMA_NOISE[method], photon_scale=settings.photon_scale,
                              gaussian_std=settings.gaussian_std)
    raise ParameterError(f"{method.value} has no baseline parameter set", parameter="method")


def apply_baseline(img: PlanarImage, params: BaselineParams, gen: np.random.Generator,
                   stats: Optional[ClampStats] = None) -> PlanarImage:
    if params.method is BaselineMethod.RETINEX:
        return retinex_degrade(img, params.L)
    if params.method is BaselineMethod.LINEAR_SCALE:
        return linear_scale_degrade(img, params.k)
    if params.method in GAMMA_NOISE:
        return gamma_noise_degrade(img, params.gamma, params.noise, gen, params.photon_scale,
                                   params.gaussian_std, stats)
    raise ParameterError(f"{params.method.value} is not a single-stage baseline", parameter="method")


# Bayer mosaic

@dataclass
class BayerPlane:
    """Single-channel raw plane; RGGB puts R at (0,0), G at (0,1) and (1,0), B at (1,1)"""
    data: np.ndarray
    state: ColorState = ColorState.LINEAR_CAMERA
    pattern: str = "RGGB"

    def __post_init__(self):
        if self.pattern not in BAYER_PATTERNS:
            raise ParameterError(f"unsupported Bayer pattern {self.pattern}", parameter="pattern")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] % 2 or self.data.shape[1] % 2:
            raise DimensionError(f"Bayer plane must be 2-D with even sides, got {self.data.shape}")

    def with_data(self, data: np.ndarray) -> "BayerPlane":
        return BayerPlane(data, self.state, self.pattern)

    def masks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boolean (red, green, blue) site masks"""
        rows = np.arange(self.data.shape[0])[:, None] % 2
        cols = np.arange(self.data.shape[1])[None, :] % 2
        red = (rows == 0) & (cols == 0)
        blue = (rows == 1) & (cols == 1)
        return red, ~(red | blue), blue


def mosaic(img: PlanarImage, pattern: str = "RGGB") -> BayerPlane:
    if img.height % 2 or img.width % 2:
        raise DimensionError(f"mosaic needs even dimensions, got {img.height}x{img.width}")
    plane = np.empty((img.height, img.width))
    plane[0::2, 0::2] = img.data[0::2, 0::2, 0]
    plane[0::2, 1::2] = img.data[0::2, 1::2, 1]
    plane[1::2, 0::2] = img.data[1::2, 0::2, 1]
    plane[1::2, 1::2] = img.data[1::2, 1::2, 2]
    return BayerPlane(plane, img.state, pattern)


def demosaic(plane: BayerPlane) -> PlanarImage:
    """Bilinear interpolation per channel with reflect padding (keeps site parity at borders)"""
    p = np.pad(plane.data, 1, mode="reflect")
    center = p[1:-1, 1:-1]
    up, down = p[:-2, 1:-1], p[2:, 1:-1]
    left, right = p[1:-1, :-2], p[1:-1, 2:]
    # pairwise sums so equal neighbours reproduce exactly
    horizontal = (left + right) * 0.5
    vertical = (up + down) * 0.5
    diagonal = ((p[:-2, :-2] + p[:-2, 2:]) + (p[2:, :-2] + p[2:, 2:])) * 0.25
    cross = ((up + down) + (left + right)) * 0.25

    red_site, green_site, blue_site = plane.masks()
    rows = np.arange(plane.data.shape[0])[:, None] % 2
    green_in_red_row = green_site & (rows == 0)
    green_in_blue_row = green_site & (rows == 1)

    red = np.select([red_site, green_in_red_row, green_in_blue_row], [center, horizontal, vertical],
                    default=diagonal)
    blue = np.select([blue_site, green_in_blue_row, green_in_red_row], [center, horizontal, vertical],
                     default=diagonal)
    green = np.where(green_site, center, cross)
    return PlanarImage(np.stack([red, green, blue], axis=2), plane.state)


def white_balance_plane(plane: BayerPlane, g_r: float, g_b: float, clip: bool = False) -> BayerPlane:
    if g_r <= 0 or g_b <= 0:
        raise ParameterError(f"white balance gains must be positive, got g_r={g_r}, g_b={g_b}",
                             parameter="g_r" if g_r <= 0 else "g_b")
    red_site, _, blue_site = plane.masks()
    gains = np.where(red_site, g_r, np.where(blue_site, g_b, 1.0))
    data = plane.data * gains
    if clip:
        data = np.clip(data, 0.0, 1.0)
    return plane.with_data(data)


def degrade_with_mosaic(img: PlanarImage, params: DegradationParams, rng, context, trace=None):
    """Main pipeline with mosaic after inverse white balance and demosaic after white balance"""
    from degrade_pipeline import _noise_generator, _trace, finish_srgb, make_record, unprocess

    stats = ClampStats()
    gen = _noise_generator(rng)
    options = context.options
    raw = unprocess(img, params, context.ccms, trace, stats)
    plane = mosaic(raw)
    check_k(params.k)
    plane = plane.with_data(plane.data * params.k)
    plane = plane.with_data(shot_read_noise(plane.data, params.delta_s, params.delta_r, gen))
    plane = plane.with_data(quantization_noise(plane.data, params.bits, gen, options.quant_mode))
    plane = white_balance_plane(plane, params.g_r, params.g_b, clip=options.clip_white_balance)
    rgb = demosaic(plane)
    _trace(trace, "demosaic", rgb)
    out = finish_srgb(rgb, params, context.ccms, options, trace, stats)
    return out, make_record(BaselineMethod.OURS_MOSAIC.value, rng, context, stats, params=params)


def synthesize_baseline(img: PlanarImage, method: str, rng: SeededRng, context, trace=None):
    """Sample and apply one alternative synthesizer; returns (image, record)"""
    from degrade_pipeline import make_record

    chosen = BaselineMethod.OURS_MOSAIC if method == "ours" else parse_method(method)
    if chosen is BaselineMethod.OURS_MOSAIC:
        params = sample_params(rng, context.ranges, context.ccms, context.options.ccm_mode)
        return degrade_with_mosaic(img, params, rng, context, trace)

    if context.options.mosaic:
        # single-stage methods have no raw domain to mosaic
        context = replace(context, options=replace(context.options, mosaic=False))
    stats = ClampStats()
    params = sample_baseline_params(chosen, rng, context.ranges, context.baselines)
    out = apply_baseline(img, params, rng.generator(RngPurpose.NOISE), stats)
    return out, make_record(chosen.value, rng, context, stats, baseline_params=params.to_dict())


def replay_baseline(record, source: PlanarImage, rng: SeededRng, context) -> PlanarImage:
    if record.method == BaselineMethod.OURS_MOSAIC.value:
        out, _ = degrade_with_mosaic(source, record.params, rng, context)
        return out
    params = BaselineParams.from_dict(record.baseline_params)
    return apply_baseline(source, params, rng.generator(RngPurpose.NOISE))
