"""
Sensor-domain corruption
Light attenuation, heteroscedastic shot/read noise, ADC quantization noise and
sampling of the degradation parameters
"""
from __future__ import annotations

from dataclasses import dataclass, fields, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from color_pipeline import (GAMMA_EPSILON, GAMMA_RANGE, CcmMode, CcmSelection, CcmSet,
                            GammaParams, PlanarImage, select_ccm)
from error_handler import ConfigurationError, ParameterError

K_RANGE = (0.01, 1.0)
LITERAL_BITS = (12, 14, 16)
MIN_TRUNCATION_MASS = 1e-6


class RngPurpose(Enum):
    """Independent sub-streams of one image stream"""
    PARAMS = 0
    NOISE = 1
    CONTENT = 2


@dataclass(frozen=True)
class SeededRng:
    """(master seed, stream index) -> reproducible numpy generators"""
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ParameterError(f"seed {self.seed} is not a 64-bit unsigned integer", parameter="seed")
        if self.stream < 0:
            raise ParameterError(f"stream {self.stream} is negative", parameter="stream")

    def generator(self, purpose: RngPurpose = RngPurpose.PARAMS) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream), purpose.value))
        return np.random.Generator(np.random.PCG64(sequence))


class QuantMode(Enum):
    LITERAL = "literal"    # half width 1/(2B)
    BITDEPTH = "bitdepth"  # half width 1/2^(B+1)
    OFF = "off"


@dataclass(frozen=True)
class UniformRange:
    low: float
    high: float


@dataclass(frozen=True)
class TruncatedGaussian:
    mean: float
    std: float
    low: float
    high: float

    def mass(self) -> float:
        a = (self.low - self.mean) / self.std
        b = (self.high - self.mean) / self.std
        return float(special.ndtr(b) - special.ndtr(a))


@dataclass(frozen=True)
class ReadNoiseLaw:
    """log10(delta_r) ~ N(slope * log10(delta_s) + intercept, sigma)"""
    slope: float = 2.18
    intercept: float = 0.12
    sigma: float = 0.26


def _check_keys(data: Dict[str, Any], allowed: Sequence[str], prefix: str):
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigurationError(f"Unknown configuration key '{prefix}.{unknown[0]}'",
                                 field_name=f"{prefix}.{unknown[0]}")


def _float_fields(cls, data: Dict[str, Any], prefix: str, default):
    if data is None:
        return default
    if not isinstance(data, dict):
        raise ConfigurationError(f"'{prefix}' must be a mapping", field_name=prefix)
    names = [f.name for f in fields(cls)]
    _check_keys(data, names, prefix)
    values = {}
    for name in names:
        raw = data.get(name, getattr(default, name))
        try:
            values[name] = float(raw)
        except (TypeError, ValueError):
            raise ConfigurationError(f"'{prefix}.{name}' must be a number, got {raw!r}",
                                     field_name=f"{prefix}.{name}")
    return cls(**values)


@dataclass(frozen=True)
class ParamRanges:
    """Sampling distributions of every degradation parameter"""
    k: TruncatedGaussian = TruncatedGaussian(mean=0.1, std=0.08, low=0.01, high=1.0)
    log_shot: UniformRange = UniformRange(-4.0, -2.0)
    read_noise: ReadNoiseLaw = ReadNoiseLaw()
    bits: Tuple[int, ...] = (12, 14, 16)
    g_r: UniformRange = UniformRange(1.9, 2.4)
    g_b: UniformRange = UniformRange(1.5, 1.9)
    gamma: UniformRange = UniformRange(2.0, 3.5)

    def __post_init__(self):
        self.validate()

    def validate(self):
        def fail(name, message):
            raise ConfigurationError(f"ranges.{name}: {message}", field_name=f"ranges.{name}")

        for name in ("log_shot", "g_r", "g_b", "gamma"):
            r = getattr(self, name)
            if not r.low <= r.high:
                fail(f"{name}.high", f"upper bound {r.high} below lower bound {r.low}")
        if not self.k.low < self.k.high:
            fail("k.high", f"upper bound {self.k.high} not above lower bound {self.k.low}")
        if self.k.low < K_RANGE[0] or self.k.high > K_RANGE[1]:
            fail("k", f"bounds must lie in {list(K_RANGE)}")
        if self.k.std <= 0:
            fail("k.std", "must be positive")
        if self.k.mass() < MIN_TRUNCATION_MASS:
            fail("k", "truncation interval has no probability mass")
        if self.g_r.low <= 0 or self.g_b.low <= 0:
            fail("g_r" if self.g_r.low <= 0 else "g_b", "gains must be positive")
        if self.gamma.low < GAMMA_RANGE[0] or self.gamma.high > GAMMA_RANGE[1]:
            fail("gamma", f"bounds must lie in {list(GAMMA_RANGE)}")
        if self.read_noise.sigma < 0:
            fail("read_noise.sigma", "must be non-negative")
        if not self.bits or any(int(b) != b or b < 1 for b in self.bits):
            fail("bits", "must be a non-empty list of positive integers")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ParamRanges":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError("'ranges' must be a mapping", field_name="ranges")
        default = cls()
        _check_keys(data, [f.name for f in fields(cls)], "ranges")
        bits = data.get("bits", default.bits)
        if not isinstance(bits, (list, tuple)):
            raise ConfigurationError("'ranges.bits' must be a list", field_name="ranges.bits")
        return cls(
            k=_float_fields(TruncatedGaussian, data.get("k"), "ranges.k", default.k),
            log_shot=_float_fields(UniformRange, data.get("log_shot"), "ranges.log_shot", default.log_shot),
            read_noise=_float_fields(ReadNoiseLaw, data.get("read_noise"), "ranges.read_noise",
                                     default.read_noise),
            bits=tuple(bits),
            g_r=_float_fields(UniformRange, data.get("g_r"), "ranges.g_r", default.g_r),
            g_b=_float_fields(UniformRange, data.get("g_b"), "ranges.g_b", default.g_b),
            gamma=_float_fields(UniformRange, data.get("gamma"), "ranges.gamma", default.gamma),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["bits"] = list(self.bits)
        return data

    def violations(self, params: "DegradationParams") -> List[str]:
        """Names of parameters of `params` that fall outside these ranges"""
        out = []
        if not self.k.low <= params.k <= self.k.high:
            out.append("k")
        log_shot = np.log10(params.delta_s) if params.delta_s > 0 else -np.inf
        if not self.log_shot.low - 1e-12 <= log_shot <= self.log_shot.high + 1e-12:
            out.append("delta_s")
        if not params.delta_r > 0:
            out.append("delta_r")
        if params.bits not in self.bits:
            out.append("bits")
        for name in ("g_r", "g_b", "gamma"):
            r = getattr(self, name)
            if not r.low <= getattr(params, name) <= r.high:
                out.append(name)
        return out


@dataclass(frozen=True)
class DegradationParams:
    """Ground-truth parameters of one degradation event"""
    k: float
    delta_s: float
    delta_r: float
    bits: int
    g_r: float
    g_b: float
    gamma: float
    ccm_selection: CcmSelection
    epsilon: float = GAMMA_EPSILON

    @property
    def gamma_params(self) -> GammaParams:
        return GammaParams(self.gamma, self.epsilon)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': self.k, 'delta_s': self.delta_s, 'delta_r': self.delta_r, 'bits': self.bits,
            'g_r': self.g_r, 'g_b': self.g_b, 'gamma': self.gamma, 'epsilon': self.epsilon,
            'ccm_selection': self.ccm_selection.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DegradationParams":
        return cls(k=float(data['k']), delta_s=float(data['delta_s']), delta_r=float(data['delta_r']),
                   bits=int(data['bits']), g_r=float(data['g_r']), g_b=float(data['g_b']),
                   gamma=float(data['gamma']), epsilon=float(data.get('epsilon', GAMMA_EPSILON)),
                   ccm_selection=CcmSelection.from_dict(data['ccm_selection']))


def sample_truncated_gaussian(gen: np.random.Generator, dist: TruncatedGaussian, size: int) -> np.ndarray:
    """Rejection sampling from N(mean, std^2) restricted to [low, high]"""
    out = np.empty(size)
    filled = 0
    chunk = max(16, int(np.ceil(2.0 * size / dist.mass())))
    while filled < size:
        draws = gen.normal(dist.mean, dist.std, chunk)
        accepted = draws[(draws >= dist.low) & (draws <= dist.high)]
        take = min(accepted.size, size - filled)
        out[filled:filled + take] = accepted[:take]
        filled += take
    return out


def sample_param_table(gen: np.random.Generator, ranges: ParamRanges, n: int) -> Dict[str, np.ndarray]:
    """Vectorised draw of n parameter tuples (CCM selection excluded)"""
    k = sample_truncated_gaussian(gen, ranges.k, n)
    log_shot = gen.uniform(ranges.log_shot.low, ranges.log_shot.high, n)
    law = ranges.read_noise
    log_read = gen.normal(law.slope * log_shot + law.intercept, law.sigma)
    bits = gen.choice(np.asarray(ranges.bits, dtype=np.int64), size=n)
    g_r = gen.uniform(ranges.g_r.low, ranges.g_r.high, n)
    g_b = gen.uniform(ranges.g_b.low, ranges.g_b.high, n)
    gamma = gen.uniform(ranges.gamma.low, ranges.gamma.high, n)
    return {
        'k': k, 'delta_s': 10.0 ** log_shot, 'delta_r': 10.0 ** log_read, 'bits': bits,
        'g_r': g_r, 'g_b': g_b, 'gamma': gamma,
    }


def sample_params(rng: Union[SeededRng, np.random.Generator], ranges: ParamRanges, ccms: CcmSet,
                  ccm_mode: CcmMode = CcmMode.PICK_ONE) -> DegradationParams:
    """Draw one DegradationParams from the configured ranges"""
    gen = rng.generator(RngPurpose.PARAMS) if isinstance(rng, SeededRng) else rng
    table = sample_param_table(gen, ranges, 1)
    _, selection = select_ccm(gen, ccms, ccm_mode)
    return DegradationParams(
        k=float(table['k'][0]), delta_s=float(table['delta_s'][0]), delta_r=float(table['delta_r'][0]),
        bits=int(table['bits'][0]), g_r=float(table['g_r'][0]), g_b=float(table['g_b'][0]),
        gamma=float(table['gamma'][0]), ccm_selection=selection,
    )


def check_k(k: float, name: str = "k"):
    if not K_RANGE[0] <= k <= K_RANGE[1]:
        raise ParameterError(f"{name}={k} outside {list(K_RANGE)}", parameter=name)


def attenuate(img: PlanarImage, k: float) -> PlanarImage:
    """f(x) = k * x"""
    check_k(k)
    return img.with_data(img.data * k)


def shot_read_noise(signal: np.ndarray, delta_s: float, delta_r: float,
                    gen: np.random.Generator) -> np.ndarray:
    """signal + N(0, delta_r^2 + delta_s * signal); negative signal contributes no shot variance"""
    if delta_s < 0 or delta_r < 0:
        raise ParameterError("noise parameters must be non-negative", parameter="delta_s")
    variance = delta_r ** 2 + delta_s * np.maximum(signal, 0.0)
    return signal + np.sqrt(variance) * gen.standard_normal(signal.shape)


def add_shot_read_noise(img: PlanarImage, params: DegradationParams,
                        gen: np.random.Generator) -> PlanarImage:
    """y ~ N(s, delta_r^2 + delta_s * s) for the already attenuated signal s = k * x"""
    return img.with_data(shot_read_noise(img.data, params.delta_s, params.delta_r, gen))


def quantization_half_width(bits: int, mode: QuantMode) -> float:
    if int(bits) != bits or bits < 1:
        raise ParameterError(f"invalid quantization parameter B={bits}", parameter="bits")
    if mode is QuantMode.LITERAL:
        if bits not in LITERAL_BITS:
            raise ParameterError(f"literal quantization takes B in {list(LITERAL_BITS)}, got {bits}",
                                 parameter="bits")
        return 1.0 / (2.0 * bits)
    if mode is QuantMode.BITDEPTH:
        return 2.0 ** -(int(bits) + 1)
    return 0.0


def quantization_noise(values: np.ndarray, bits: int, gen: np.random.Generator,
                       mode: QuantMode = QuantMode.LITERAL) -> np.ndarray:
    half = quantization_half_width(bits, mode)
    if mode is QuantMode.OFF:
        return values
    return values + gen.uniform(-half, half, values.shape)


def add_quantization_noise(img: PlanarImage, bits: int, gen: np.random.Generator,
                           mode: QuantMode = QuantMode.LITERAL) -> PlanarImage:
    """x + U(-h, h) per value, h from `quantization_half_width`"""
    return img.with_data(quantization_noise(img.data, bits, gen, mode))
