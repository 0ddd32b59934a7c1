"""
Low-light degradation pipeline
unprocess (a)-(d) -> attenuation and sensor noise -> reprocess (e)-(h), degradation
records and sidecars, the parallel batch driver and bit-exact replay
"""
from __future__ import annotations

import functools
import json
import time
from concurrent import futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from color_pipeline import (ClampStats, CcmMode, CcmSet, ColorState, PlanarImage, apply_ccm,
                            gamma_correct, gamma_invert, tone_invert, tone_map, white_balance)
from error_handler import (ErrorContext, ErrorHandler, InvalidImageError, OutputError,
                           ReplayMismatchError, SynthesisError, reraise_as)
from image_io import ensure_within, file_checksum, read_image, to_uint8, write_image
from logger import OperationTimer, get_logger
from progress_tracker import BatchProgress, BatchStats
from sensor_noise import (DegradationParams, ParamRanges, QuantMode, RngPurpose, SeededRng,
                          add_quantization_noise, add_shot_read_noise, attenuate, sample_params)

SCHEMA_VERSION = 1
TOOL_VERSION = "1.0.0"
TARGET_NAMES = ("k", "inv_bits", "inv_g_r", "inv_g_b", "inv_gamma")
METHOD_OURS = "ours"
METHOD_OURS_MOSAIC = "ours-mosaic"

logger = get_logger("lowlight.pipeline")


@dataclass(frozen=True)
class PipelineOptions:
    quant_mode: QuantMode = QuantMode.LITERAL
    ccm_mode: CcmMode = CcmMode.PICK_ONE
    tone_remap: bool = False
    mosaic: bool = False
    clip_white_balance: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'quant_mode': self.quant_mode.value, 'ccm_mode': self.ccm_mode.value,
            'tone_remap': self.tone_remap, 'mosaic': self.mosaic,
            'clip_white_balance': self.clip_white_balance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineOptions":
        return cls(quant_mode=QuantMode(data.get('quant_mode', QuantMode.LITERAL.value)),
                   ccm_mode=CcmMode(data.get('ccm_mode', CcmMode.PICK_ONE.value)),
                   tone_remap=bool(data.get('tone_remap', False)),
                   mosaic=bool(data.get('mosaic', False)),
                   clip_white_balance=bool(data.get('clip_white_balance', False)))


@dataclass(frozen=True)
class SynthesisContext:
    """Everything a synthesizer needs besides the image and its random stream"""
    ccms: CcmSet
    ranges: ParamRanges = field(default_factory=ParamRanges)
    options: PipelineOptions = field(default_factory=PipelineOptions)
    baselines: Any = None
    config_hash: str = ""


@dataclass
class DegradationRecord:
    """Sidecar content: enough to rebuild the degraded image bit-exactly from its source"""
    method: str
    options: PipelineOptions
    params: Optional[DegradationParams] = None
    baseline_params: Optional[Dict[str, Any]] = None
    normalized_targets: Optional[List[float]] = None
    source_id: str = ""
    seed: Optional[int] = None
    stream: Optional[int] = None
    config_hash: str = ""
    clipped_pixels: int = 0
    tone_clamped: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': self.schema_version,
            'method': self.method,
            'source_id': self.source_id,
            'seed': self.seed,
            'stream': self.stream,
            'config_hash': self.config_hash,
            'options': self.options.to_dict(),
            'params': self.params.to_dict() if self.params else None,
            'baseline_params': self.baseline_params,
            'normalized_targets': self.normalized_targets,
            'target_names': list(TARGET_NAMES) if self.normalized_targets is not None else None,
            'clipped_pixels': self.clipped_pixels,
            'tone_clamped': self.tone_clamped,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DegradationRecord":
        version = data.get('schema_version')
        if version != SCHEMA_VERSION:
            raise ReplayMismatchError(f"sidecar schema version {version} is not {SCHEMA_VERSION}")
        return cls(
            method=data['method'],
            options=PipelineOptions.from_dict(data.get('options', {})),
            params=DegradationParams.from_dict(data['params']) if data.get('params') else None,
            baseline_params=data.get('baseline_params'),
            normalized_targets=data.get('normalized_targets'),
            source_id=data.get('source_id', ""),
            seed=data.get('seed'),
            stream=data.get('stream'),
            config_hash=data.get('config_hash', ""),
            clipped_pixels=int(data.get('clipped_pixels', 0)),
            tone_clamped=int(data.get('tone_clamped', 0)),
        )

    def save(self, path: Path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
            f.write("\n")

    @classmethod
    @reraise_as(ReplayMismatchError, "load_sidecar")
    def load(cls, path: Path) -> "DegradationRecord":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def target_bounds(ranges: ParamRanges) -> List[Tuple[float, float]]:
    """Min-max bounds of (k, 1/B, 1/g_r, 1/g_b, 1/gamma) over the sampling ranges"""
    return [
        (ranges.k.low, ranges.k.high),
        (1.0 / max(ranges.bits), 1.0 / min(ranges.bits)),
        (1.0 / ranges.g_r.high, 1.0 / ranges.g_r.low),
        (1.0 / ranges.g_b.high, 1.0 / ranges.g_b.low),
        (1.0 / ranges.gamma.high, 1.0 / ranges.gamma.low),
    ]


def normalize_targets(params: DegradationParams, ranges: ParamRanges) -> List[float]:
    raw = (params.k, 1.0 / params.bits, 1.0 / params.g_r, 1.0 / params.g_b, 1.0 / params.gamma)
    out = []
    for value, (lo, hi) in zip(raw, target_bounds(ranges)):
        out.append(0.0 if hi == lo else (value - lo) / (hi - lo))
    return out


def denormalize_targets(targets: Sequence[float], ranges: ParamRanges) -> Dict[str, float]:
    """Inverse of normalize_targets, returning k, bits, g_r, g_b, gamma"""
    values = [lo + t * (hi - lo) for t, (lo, hi) in zip(targets, target_bounds(ranges))]
    return {'k': values[0], 'bits': 1.0 / values[1], 'g_r': 1.0 / values[2],
            'g_b': 1.0 / values[3], 'gamma': 1.0 / values[4]}


@dataclass
class PipelineTrace:
    """Stage-by-stage color state log"""
    steps: List[Tuple[str, ColorState]] = field(default_factory=list)
    value_ranges: List[Tuple[float, float]] = field(default_factory=list)

    def record(self, stage: str, img: PlanarImage):
        self.steps.append((stage, img.state))
        self.value_ranges.append((float(img.data.min()), float(img.data.max())))

    @property
    def stages(self) -> List[str]:
        return [s for s, _ in self.steps]

    @property
    def states(self) -> List[ColorState]:
        return [st for _, st in self.steps]


UNPROCESS_STAGES = (
    ("input", ColorState.SRGB_ENCODED),
    ("tone_invert", ColorState.SRGB_ENCODED),
    ("gamma_invert", ColorState.LINEAR_SRGB),
    ("ccm_invert", ColorState.LINEAR_CAMERA),
    ("white_balance_invert", ColorState.LINEAR_CAMERA),
)
CORRUPT_STAGES = (
    ("attenuate", ColorState.LINEAR_CAMERA),
    ("shot_read_noise", ColorState.LINEAR_CAMERA),
)
REPROCESS_STAGES = (
    ("quantization_noise", ColorState.LINEAR_CAMERA),
    ("white_balance", ColorState.LINEAR_CAMERA),
    ("ccm", ColorState.LINEAR_SRGB),
    ("gamma", ColorState.SRGB_ENCODED),
)


def expected_stages(tone_remap: bool) -> List[Tuple[str, ColorState]]:
    stages = list(UNPROCESS_STAGES + CORRUPT_STAGES + REPROCESS_STAGES)
    if tone_remap:
        stages.append(("tone_map", ColorState.SRGB_ENCODED))
    return stages


def assert_stage_order(trace: PipelineTrace, tone_remap: bool = False):
    expected = expected_stages(tone_remap)
    if trace.steps != expected:
        raise InvalidImageError(f"stage order {trace.steps} differs from {expected}")


def _trace(trace: Optional[PipelineTrace], stage: str, img: PlanarImage):
    if trace is not None:
        trace.record(stage, img)


def _noise_generator(rng: Union[SeededRng, np.random.Generator]) -> np.random.Generator:
    return rng.generator(RngPurpose.NOISE) if isinstance(rng, SeededRng) else rng


def unprocess(img: PlanarImage, params: DegradationParams, ccms: CcmSet,
              trace: Optional[PipelineTrace] = None,
              stats: Optional[ClampStats] = None) -> PlanarImage:
    """(a) invert tone map, (b) invert gamma, (c) sRGB -> cRGB, (d) invert white balance"""
    if img.state is not ColorState.SRGB_ENCODED:
        raise InvalidImageError(f"unprocess expects an sRGB-encoded image, got {img.state.value}")
    _trace(trace, "input", img)
    x = tone_invert(img, stats)
    _trace(trace, "tone_invert", x)
    x = gamma_invert(x, params.gamma_params)
    _trace(trace, "gamma_invert", x)
    _, inverse = ccms.compose(params.ccm_selection)
    x = apply_ccm(x, inverse)
    _trace(trace, "ccm_invert", x)
    x = white_balance(x, 1.0 / params.g_r, 1.0 / params.g_b)
    _trace(trace, "white_balance_invert", x)
    return x


def reprocess(img: PlanarImage, params: DegradationParams, ccms: CcmSet,
              rng: Union[SeededRng, np.random.Generator],
              options: Optional[PipelineOptions] = None,
              trace: Optional[PipelineTrace] = None,
              stats: Optional[ClampStats] = None) -> PlanarImage:
    """(e) quantization noise, (f) white balance, (g) cRGB -> sRGB, (h) gamma; final clip"""
    options = options or PipelineOptions()
    stats = stats if stats is not None else ClampStats()
    if img.state is not ColorState.LINEAR_CAMERA:
        raise InvalidImageError(f"reprocess expects a linear camera image, got {img.state.value}")
    gen = _noise_generator(rng)
    x = add_quantization_noise(img, params.bits, gen, options.quant_mode)
    _trace(trace, "quantization_noise", x)
    x = white_balance(x, params.g_r, params.g_b, clip=options.clip_white_balance)
    _trace(trace, "white_balance", x)
    return finish_srgb(x, params, ccms, options, trace, stats)


def finish_srgb(img: PlanarImage, params: DegradationParams, ccms: CcmSet, options: PipelineOptions,
                trace: Optional[PipelineTrace], stats: ClampStats) -> PlanarImage:
    """(g) and (h) plus the display clip and the optional tone remap"""
    matrix, _ = ccms.compose(params.ccm_selection)
    x = apply_ccm(img, matrix)
    _trace(trace, "ccm", x)
    x = gamma_correct(x, params.gamma_params)
    _trace(trace, "gamma", x)
    x, clipped = x.clipped()
    stats.clipped_pixels += clipped
    if options.tone_remap:
        x = tone_map(x, stats)
        _trace(trace, "tone_map", x)
    return x


def degrade_full(img: PlanarImage, params: DegradationParams,
                 rng: Union[SeededRng, np.random.Generator], context: SynthesisContext,
                 trace: Optional[PipelineTrace] = None) -> Tuple[PlanarImage, DegradationRecord]:
    """t_deg(x) = t_ISP(k * t_unprocess(x) + x_noise + x_quan)"""
    stats = ClampStats()
    gen = _noise_generator(rng)
    raw = unprocess(img, params, context.ccms, trace, stats)
    x = attenuate(raw, params.k)
    _trace(trace, "attenuate", x)
    x = add_shot_read_noise(x, params, gen)
    _trace(trace, "shot_read_noise", x)
    out = reprocess(x, params, context.ccms, gen, context.options, trace, stats)
    return out, make_record(METHOD_OURS, rng, context, stats, params=params)


def make_record(method: str, rng: Union[SeededRng, np.random.Generator], context: SynthesisContext,
                stats: ClampStats, params: Optional[DegradationParams] = None,
                baseline_params: Optional[Dict[str, Any]] = None) -> DegradationRecord:
    seeded = rng if isinstance(rng, SeededRng) else None
    return DegradationRecord(
        method=method,
        options=context.options,
        params=params,
        baseline_params=baseline_params,
        normalized_targets=normalize_targets(params, context.ranges) if params else None,
        seed=seeded.seed if seeded else None,
        stream=seeded.stream if seeded else None,
        config_hash=context.config_hash,
        clipped_pixels=stats.clipped_pixels,
        tone_clamped=stats.tone_clamped,
    )


def synthesize(img: PlanarImage, method: str, rng: SeededRng, context: SynthesisContext,
               trace: Optional[PipelineTrace] = None) -> Tuple[PlanarImage, DegradationRecord]:
    """Sample fresh parameters for `method` from the stream and degrade"""
    if method == METHOD_OURS and not context.options.mosaic:
        params = sample_params(rng, context.ranges, context.ccms, context.options.ccm_mode)
        return degrade_full(img, params, rng, context, trace)
    from baseline_synthesis import synthesize_baseline
    return synthesize_baseline(img, method, rng, context, trace)


def replay(record: DegradationRecord, source: PlanarImage,
           context: SynthesisContext) -> PlanarImage:
    """Rebuild the degraded image described by `record`"""
    if record.config_hash and context.config_hash and record.config_hash != context.config_hash:
        raise ReplayMismatchError(
            f"config hash {context.config_hash[:12]} does not match sidecar {record.config_hash[:12]}")
    if record.seed is None or record.stream is None:
        raise ReplayMismatchError("sidecar carries no seed/stream; noise cannot be replayed")
    rng = SeededRng(record.seed, record.stream)
    replay_context = SynthesisContext(ccms=context.ccms, ranges=context.ranges, options=record.options,
                                      baselines=context.baselines, config_hash=context.config_hash)
    if record.method == METHOD_OURS and not record.options.mosaic:
        out, _ = degrade_full(source, record.params, rng, replay_context)
        return out
    from baseline_synthesis import replay_baseline
    return replay_baseline(record, source, rng, replay_context)


# Batch driver

def _output_names(source: Path) -> Tuple[str, str]:
    return f"{source.stem}.png", f"{source.stem}.deg.json"


def list_inputs(input_dir: Path, extensions: Sequence[str]) -> List[Path]:
    allowed = {e.lower() for e in extensions}
    return sorted((p for p in input_dir.iterdir() if p.is_file() and p.suffix.lower() in allowed),
                  key=lambda p: p.name)


def _process_one(task: Tuple[int, str], output_dir: str, seed: int, method: str,
                 context: SynthesisContext, trace: bool) -> Dict[str, Any]:
    """Worker: degrade one file, write image + sidecar, return its manifest entry"""
    index, source = task
    source = Path(source)
    out_root = Path(output_dir)
    image_name, sidecar_name = _output_names(source)
    handler = ErrorHandler()
    try:
        img = read_image(source)
        stage_trace = PipelineTrace() if trace else None
        out, record = synthesize(img, method, SeededRng(seed, index), context, stage_trace)
        record.source_id = source.name
        if stage_trace is not None:
            logger.info("Stage trace", source=source.name, stages=stage_trace.stages,
                        states=[s.value for s in stage_trace.states],
                        value_ranges=stage_trace.value_ranges, event_type="stage_trace")
    except SynthesisError as e:
        if not e.recoverable:
            raise
        entry = handler.handle_error(e, ErrorContext("degrade", file_path=source.name, stream=index))
        return {'status': 'failed', 'source': source.name, 'error': entry}
    except (OSError, ValueError) as e:
        entry = handler.handle_error(e, ErrorContext("degrade", file_path=source.name, stream=index))
        return {'status': 'failed', 'source': source.name, 'error': entry}

    try:
        write_image(out, ensure_within(out_root, out_root / image_name))
        record.save(ensure_within(out_root, out_root / sidecar_name))
    except OSError as e:
        raise OutputError(f"cannot write outputs for {source.name}: {e}") from e

    logger.debug("Image degraded", source=source.name, stream=index, method=method,
                 clipped_pixels=record.clipped_pixels, event_type="image_degraded")
    return {'status': 'completed', 'source': source.name, 'source_sha256': file_checksum(source),
            'output': image_name, 'sidecar': sidecar_name, 'record': record.to_dict()}


def degrade_batch(input_dir: Union[str, Path], output_dir: Union[str, Path], context: SynthesisContext,
                  seed: int, jobs: int = 1, method: str = METHOD_OURS,
                  extensions: Sequence[str] = (".png", ".ppm"),
                  manifest_name: str = "manifest.json", trace: bool = False) -> Dict[str, Any]:
    """Degrade every image of `input_dir` into `output_dir`; returns the manifest"""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    SeededRng(seed)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        marker = output_dir / ".write_check"
        marker.write_bytes(b"")
        marker.unlink()
    except OSError as e:
        raise OutputError(f"output directory {output_dir} is not writable: {e}") from e

    sources = list_inputs(input_dir, extensions)
    error_handler = ErrorHandler()
    progress = BatchProgress(total=len(sources), operation=f"degrade:{method}")
    stats = BatchStats(context.ranges)

    tasks, seen = [], {}
    for index, source in enumerate(sources):
        image_name, _ = _output_names(source)
        if image_name in seen:
            entry = error_handler.handle_error(
                InvalidImageError(f"output name {image_name} already produced by {seen[image_name]}"),
                ErrorContext("degrade", file_path=source.name, stream=index))
            progress.update(source.name, success=False)
            stats.add_failure(entry)
            continue
        seen[image_name] = source.name
        tasks.append((index, str(source)))

    worker = functools.partial(_process_one, output_dir=str(output_dir), seed=seed, method=method,
                               context=context, trace=trace)
    started = time.perf_counter()
    logger.info("Batch started", input_dir=str(input_dir), files=len(sources), jobs=jobs,
                method=method, seed=seed, event_type="batch_start")

    with OperationTimer(logger, "degrade_batch", files=len(tasks)):
        if jobs > 1 and len(tasks) > 1:
            with futures.ProcessPoolExecutor(max_workers=jobs) as executor:
                results = list(executor.map(worker, tasks, chunksize=1))
        else:
            results = [worker(t) for t in tasks]

    entries = []
    for result in results:
        if result['status'] == 'completed':
            stats.add_record(result['record'])
            entries.append({k: v for k, v in result.items() if k != 'status'})
            progress.update(result['source'], success=True)
        else:
            error_handler.merge_entry(result['error'])
            stats.add_failure(result['error'])
            progress.update(result['source'], success=False)

    manifest = {
        'schema_version': SCHEMA_VERSION,
        'tool_version': TOOL_VERSION,
        'config_hash': context.config_hash,
        'seed': seed,
        'method': method,
        'options': context.options.to_dict(),
        'count': len(entries),
        'entries': sorted(entries, key=lambda e: e['source']),
        'errors': sorted(stats.failures, key=lambda e: e['file'] or ""),
        'error_summary': error_handler.get_error_report(),
        'stats': stats.report(),
        'timing': progress.timing(time.perf_counter() - started, jobs),
    }
    try:
        with open(ensure_within(output_dir, output_dir / manifest_name), 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise OutputError(f"cannot write manifest: {e}") from e

    progress.finish()
    return manifest


def replay_batch(input_dir: Union[str, Path], output_dir: Union[str, Path], context: SynthesisContext,
                 manifest_name: str = "manifest.json") -> Dict[str, Any]:
    """Replay every sidecar listed in a manifest and compare against the stored images"""
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    with open(output_dir / manifest_name, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    if manifest.get('schema_version') != SCHEMA_VERSION:
        raise ReplayMismatchError(f"manifest schema version {manifest.get('schema_version')} unsupported")

    matched, mismatched = [], []
    for entry in manifest.get('entries', []):
        checksum = entry.get('source_sha256')
        if checksum and file_checksum(input_dir / entry['source']) != checksum:
            mismatched.append(entry['source'])
            logger.error("Source image changed since the batch was written", source=entry['source'],
                         event_type="replay_mismatch")
            continue
        record = DegradationRecord.load(output_dir / entry['sidecar'])
        source = read_image(input_dir / entry['source'])
        rebuilt = to_uint8(replay(record, source, context).data)
        stored = to_uint8(read_image(output_dir / entry['output']).data)
        if np.array_equal(rebuilt, stored):
            matched.append(entry['source'])
        else:
            mismatched.append(entry['source'])
            logger.error("Replay mismatch", source=entry['source'],
                         differing_values=int(np.count_nonzero(rebuilt != stored)),
                         event_type="replay_mismatch")
    return {'matched': matched, 'mismatched': mismatched}
