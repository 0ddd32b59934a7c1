"""
Statistical and numerical conformance checks
Noise law moments, parameter sampling distributions, inverse-pair round trips and batch
determinism, collected into one machine-readable report
"""
from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from scipy import stats

from color_pipeline import (CcmSelection, CcmMode, CcmSet, ColorState, GammaParams, PlanarImage,
                            apply_ccm, gamma_correct, gamma_invert, tone_invert, tone_map, white_balance)
from logger import get_logger, log_operation, system_info
from sensor_noise import (DegradationParams, ParamRanges, QuantMode, RngPurpose, SeededRng,
                          quantization_half_width, quantization_noise, sample_param_table, shot_read_noise)

# check streams sit above any image stream of a realistic batch
CHECK_STREAM = 2 ** 32
GRID_POINTS = 1000
CHI_SQUARE_BINS = 20
# the eps clamp sits below this, so the gamma pair is exact on [GAMMA_GRID_LOW, 1]
GAMMA_GRID_LOW = 1e-4
QUANT_CHECK_BITS = 14
P_THRESHOLD = 0.01
DETERMINISM_JOBS = 8

logger = get_logger("lowlight.verify")


@dataclass
class CheckEntry:
    name: str
    expected: Any
    observed: Any
    tolerance: Any
    passed: bool
    p_value: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "expected": self.expected, "observed": self.observed,
                "tolerance": self.tolerance, "p_value": self.p_value, "pass": bool(self.passed)}


@dataclass
class VerificationReport:
    entries: List[CheckEntry] = field(default_factory=list)
    environment: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def extend(self, entries: List[CheckEntry]):
        for entry in entries:
            logger.info("Check complete", check=entry.name, passed=entry.passed,
                        observed=entry.observed, event_type="check_complete")
        self.entries.extend(entries)

    def to_dict(self) -> Dict[str, Any]:
        return {"verdict": "pass" if self.passed else "fail",
                "environment": self.environment,
                "checks": [e.to_dict() for e in self.entries]}

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        return path


def _generator(seed: int, check: int) -> np.random.Generator:
    return SeededRng(seed, CHECK_STREAM + check).generator(RngPurpose.NOISE)


def verify_noise_law(k: float = 0.1, x0: float = 0.5, delta_s: float = 0.001, delta_r: float = 0.01,
                     n: int = 10 ** 6, seed: int = 0, label: str = "noise_law") -> List[CheckEntry]:
    """Moments of N(k x0, delta_r^2 + delta_s k x0) draws: mean within 4 standard errors,
    variance within 2 %; with both noise terms at zero every draw must equal k x0 exactly"""
    signal = k * x0
    expected_var = delta_r ** 2 + delta_s * signal
    draws = shot_read_noise(np.full(n, signal), delta_s, delta_r, _generator(seed, 0))

    if expected_var == 0:
        deviation = float(np.max(np.abs(draws - signal)))
        exact = deviation == 0.0
        return [
            CheckEntry(f"{label}.mean", signal, signal + deviation, 0.0, exact),
            CheckEntry(f"{label}.variance", 0.0, deviation ** 2, 0.0, exact),
        ]

    mean = float(draws.mean())
    var = float(draws.var(ddof=1))
    mean_tol = float(4.0 * np.sqrt(expected_var / n))
    var_tol = 0.02 * expected_var
    return [
        CheckEntry(f"{label}.mean", signal, mean, mean_tol, abs(mean - signal) <= mean_tol),
        CheckEntry(f"{label}.variance", expected_var, var, var_tol, abs(var - expected_var) <= var_tol),
    ]


def _max_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def _grid_image(low: float = 0.0, state: ColorState = ColorState.SRGB_ENCODED) -> PlanarImage:
    grid = np.linspace(low, 1.0, GRID_POINTS)
    return PlanarImage(np.repeat(grid[:, None, None], 3, axis=2), state)


def _color_grid(seed: int) -> np.ndarray:
    return _generator(seed, 1).uniform(0.0, 1.0, (GRID_POINTS, 1, 3))


def degenerate_params(gamma: float = 2.2) -> DegradationParams:
    """k = 1, no noise, unit gains and a single identity CCM"""
    return DegradationParams(k=1.0, delta_s=0.0, delta_r=0.0, bits=12, g_r=1.0, g_b=1.0, gamma=gamma,
                             ccm_selection=CcmSelection(CcmMode.PICK_ONE, (1.0,), 0))


def verify_roundtrips(ccms: CcmSet, tol: float = 1e-6, identity_tol: float = 1e-5,
                      seed: int = 0) -> List[CheckEntry]:
    """Inverse-pair compositions on 1000-point grids for every color stage, plus the full
    degenerate pipeline in tone-remap mode"""
    from degrade_pipeline import PipelineOptions, SynthesisContext, degrade_full

    entries = []
    for gamma in (2.0, 2.2, 3.5):
        g = GammaParams(gamma)
        domain = _grid_image(GAMMA_GRID_LOW, ColorState.LINEAR_SRGB)
        back = gamma_invert(gamma_correct(domain, g), g)
        err = _max_error(back.data, domain.data)
        entries.append(CheckEntry(f"roundtrip.gamma[{gamma}]", 0.0, err, tol, err <= tol))

    full = _grid_image()
    err = _max_error(tone_invert(tone_map(full)).data, full.data)
    entries.append(CheckEntry("roundtrip.tone", 0.0, err, tol, err <= tol))

    linear = PlanarImage(_color_grid(seed), ColorState.LINEAR_CAMERA)
    for g_r, g_b in ((1.9, 1.5), (2.4, 1.9)):
        back = white_balance(white_balance(linear, g_r, g_b), 1.0 / g_r, 1.0 / g_b)
        err = _max_error(back.data, linear.data)
        entries.append(CheckEntry(f"roundtrip.white_balance[{g_r},{g_b}]", 0.0, err, tol, err <= tol))

    srgb = PlanarImage(_color_grid(seed), ColorState.LINEAR_SRGB)
    for name, matrix, inverse in zip(ccms.names, ccms.matrices, ccms.inverses):
        back = apply_ccm(apply_ccm(srgb, inverse), matrix)
        err = _max_error(back.data, srgb.data)
        entries.append(CheckEntry(f"roundtrip.ccm[{name}]", 0.0, err, tol, err <= tol))

    encoded = _grid_image(1e-3)
    identity = CcmSet(["identity"], [np.eye(3)])
    context = SynthesisContext(ccms=identity, options=PipelineOptions(quant_mode=QuantMode.OFF, tone_remap=True))
    out, _ = degrade_full(encoded, degenerate_params(), SeededRng(seed), context)
    err = _max_error(out.data, encoded.data)
    entries.append(CheckEntry("roundtrip.degenerate_pipeline", 0.0, err, identity_tol, err <= identity_tol))
    return entries


def _uniformity(name: str, values: np.ndarray, low: float, high: float) -> CheckEntry:
    counts, _ = np.histogram(values, bins=CHI_SQUARE_BINS, range=(low, high))
    p = float(stats.chisquare(counts).pvalue)
    return CheckEntry(name, f"uniform on [{low}, {high}]", int(counts.sum()), f"p > {P_THRESHOLD}",
                      p > P_THRESHOLD, p_value=p)


def verify_sampling(ranges: Optional[ParamRanges] = None, n: int = 10 ** 5, seed: int = 0) -> List[CheckEntry]:
    """Range containment, KS for k, chi-square uniformity, bit-depth frequencies and the
    read-noise regression line"""
    ranges = ranges or ParamRanges()
    table = sample_param_table(_generator(seed, 2), ranges, n)
    log_shot = np.log10(table["delta_s"])
    log_read = np.log10(table["delta_r"])

    violations = int(
        np.count_nonzero((table["k"] < ranges.k.low) | (table["k"] > ranges.k.high))
        + np.count_nonzero((log_shot < ranges.log_shot.low - 1e-12) | (log_shot > ranges.log_shot.high + 1e-12))
        + np.count_nonzero(~np.isin(table["bits"], ranges.bits))
        + sum(np.count_nonzero((table[name] < getattr(ranges, name).low) | (table[name] > getattr(ranges, name).high))
              for name in ("g_r", "g_b", "gamma"))
    )
    entries = [CheckEntry("sampling.range_violations", 0, violations, 0, violations == 0)]

    k = ranges.k
    truncated = stats.truncnorm((k.low - k.mean) / k.std, (k.high - k.mean) / k.std, loc=k.mean, scale=k.std)
    p = float(stats.kstest(table["k"], truncated.cdf).pvalue)
    entries.append(CheckEntry("sampling.k_truncated_gaussian", "KS against truncated normal",
                              float(table["k"].mean()), f"p > {P_THRESHOLD}", p > P_THRESHOLD, p_value=p))

    for name in ("gamma", "g_r", "g_b"):
        r = getattr(ranges, name)
        entries.append(_uniformity(f"sampling.{name}_uniform", table[name], r.low, r.high))
    entries.append(_uniformity("sampling.log_shot_uniform", log_shot, ranges.log_shot.low, ranges.log_shot.high))

    half = quantization_half_width(QUANT_CHECK_BITS, QuantMode.LITERAL)
    noise = quantization_noise(np.zeros(n), QUANT_CHECK_BITS, _generator(seed, 5), QuantMode.LITERAL)
    entries.append(_uniformity("sampling.quantization_uniform", noise, -half, half))

    share = 1.0 / len(ranges.bits)
    for b in ranges.bits:
        freq = float(np.mean(table["bits"] == b))
        entries.append(CheckEntry(f"sampling.bits_frequency[{b}]", share, freq, 0.02, abs(freq - share) <= 0.02))

    law = ranges.read_noise
    fit = stats.linregress(log_shot, log_read)
    entries.append(CheckEntry("sampling.read_noise_slope", law.slope, float(fit.slope), 0.02,
                              abs(fit.slope - law.slope) <= 0.02))
    entries.append(CheckEntry("sampling.read_noise_intercept", law.intercept, float(fit.intercept), 0.05,
                              abs(fit.intercept - law.intercept) <= 0.05))
    return entries


def write_synthetic_corpus(directory: Path, count: int, seed: int, size=(32, 48)) -> List[Path]:
    """Smooth gradients with a few random rectangles, written as 8-bit PNG"""
    from image_io import write_image

    directory.mkdir(parents=True, exist_ok=True)
    gen = _generator(seed, 4)
    h, w = size
    v, u = np.mgrid[0:h, 0:w]
    paths = []
    for i in range(count):
        base = gen.uniform(0.1, 0.6, 3)
        slope = gen.uniform(-0.3, 0.3, (2, 3))
        data = base + (u[..., None] / w) * slope[0] + (v[..., None] / h) * slope[1]
        for _ in range(3):
            y0, x0 = gen.integers(0, h - 8), gen.integers(0, w - 8)
            data[y0:y0 + 8, x0:x0 + 8] = gen.uniform(0.0, 1.0, 3)
        path = directory / f"img_{i:03d}.png"
        write_image(PlanarImage(np.clip(data, 0.0, 1.0), ColorState.SRGB_ENCODED), path)
        paths.append(path)
    return paths


def strip_timing(manifest: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in manifest.items() if k != "timing"}


def compare_outputs(a: Path, b: Path, manifest_name: str = "manifest.json") -> List[str]:
    """Names of files that differ between two batch output directories (manifest timing excluded)"""
    names = sorted({p.name for p in a.iterdir()} | {p.name for p in b.iterdir()})
    differing = []
    for name in names:
        pa, pb = a / name, b / name
        if not pa.exists() or not pb.exists():
            differing.append(name)
        elif name == manifest_name:
            with open(pa, encoding="utf-8") as fa, open(pb, encoding="utf-8") as fb:
                if strip_timing(json.load(fa)) != strip_timing(json.load(fb)):
                    differing.append(name)
        elif pa.read_bytes() != pb.read_bytes():
            differing.append(name)
    return differing


def verify_determinism(context, seed: int, images: int = 20, jobs: int = DETERMINISM_JOBS,
                       workdir: Optional[Path] = None, method: str = "ours") -> List[CheckEntry]:
    """Same batch at parallelism 1 and `jobs`: identical bytes; every sidecar replays exactly"""
    from degrade_pipeline import degrade_batch, replay_batch

    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        root = Path(tmp)
        write_synthetic_corpus(root / "src", images, seed)
        degrade_batch(root / "src", root / "serial", context, seed, jobs=1, method=method)
        degrade_batch(root / "src", root / "parallel", context, seed, jobs=jobs, method=method)
        differing = compare_outputs(root / "serial", root / "parallel")
        replayed = replay_batch(root / "src", root / "serial", context)

    return [
        CheckEntry(f"determinism.jobs_1_vs_{jobs}[{method}]", 0, len(differing), 0, not differing),
        CheckEntry(f"determinism.replay[{method}]", images, len(replayed["matched"]), 0,
                   len(replayed["matched"]) == images and not replayed["mismatched"]),
    ]


@log_operation("verify")
def run_verification(config, seed: int, noise_samples: int = 10 ** 6, sampling_samples: int = 10 ** 5,
                     determinism: bool = True, jobs: int = DETERMINISM_JOBS) -> VerificationReport:
    report = VerificationReport(environment={
        "seed": seed, "config_hash": config.config_hash, **system_info(),
    })
    report.extend(verify_noise_law(n=noise_samples, seed=seed))
    report.extend(verify_noise_law(delta_s=0.0, delta_r=0.0, n=1000, seed=seed, label="noise_law.noiseless"))
    report.extend(verify_roundtrips(config.ccms, seed=seed))
    report.extend(verify_sampling(config.ranges, sampling_samples, seed))
    if determinism:
        report.extend(verify_determinism(config.context(), seed, jobs=jobs))
    return report
