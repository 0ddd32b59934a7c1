"""Unprocess/reprocess composition, records, batch driver and replay"""
import json
from dataclasses import replace

import numpy as np
import pytest

from color_pipeline import CcmMode, CcmSelection, ColorState, PlanarImage, tone_invert, gamma_invert
from degrade_pipeline import (
    METHOD_OURS, METHOD_OURS_MOSAIC, SCHEMA_VERSION, DegradationRecord, PipelineOptions, PipelineTrace,
    SynthesisContext, assert_stage_order, degrade_batch, degrade_full, denormalize_targets,
    normalize_targets, replay, replay_batch, reprocess, synthesize, unprocess,
)
from error_handler import InvalidImageError, OutputError, ReplayMismatchError
from helpers import constant_image, gradient_image, write_png
from image_io import read_image, to_uint8
from sensor_noise import DegradationParams, ParamRanges, QuantMode, SeededRng, sample_params

ONE_HOT = CcmSelection(CcmMode.PICK_ONE, (1.0,), 0)


def make_params(selection=ONE_HOT, **overrides) -> DegradationParams:
    values = dict(k=0.1, delta_s=1e-3, delta_r=1e-2, bits=14, g_r=2.0, g_b=1.7, gamma=2.2,
                  ccm_selection=selection)
    values.update(overrides)
    return DegradationParams(**values)


def degenerate(gamma=2.2) -> DegradationParams:
    return make_params(k=1.0, delta_s=0.0, delta_r=0.0, g_r=1.0, g_b=1.0, gamma=gamma)


def luminance(img: PlanarImage) -> float:
    return float(np.mean(img.data @ np.array([0.2126, 0.7152, 0.0722])))


class TestUnprocess:

    def test_white_fixed_point(self, default_ccms):
        selection = CcmSelection(CcmMode.PICK_ONE, (0.0, 1.0, 0.0, 0.0), 1)
        params = make_params(selection, g_r=2.2, g_b=1.6, gamma=2.7)
        out = unprocess(constant_image(1.0), params, default_ccms)
        assert out.state is ColorState.LINEAR_CAMERA
        np.testing.assert_allclose(out.data[0, 0], [1 / 2.2, 1.0, 1 / 1.6], atol=1e-12)

    def test_degenerate_reduces_to_tone_and_gamma(self, identity_ccms):
        img = gradient_image()
        params = degenerate(gamma=2.5)
        out = unprocess(img, params, identity_ccms)
        expected = gamma_invert(tone_invert(img), params.gamma_params)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-15)

    def test_mostly_non_negative(self, default_ccms):
        gen = np.random.default_rng(0)
        negative, total = 0, 0
        for i in range(100):
            base = gen.uniform(0.2, 0.8, 3)
            ramp = np.linspace(-0.1, 0.1, 8)[:, None, None] * gen.uniform(-1, 1, 3)
            img = PlanarImage(np.broadcast_to(base + ramp, (8, 8, 3)), ColorState.SRGB_ENCODED)
            params = sample_params(SeededRng(5, i), ParamRanges(), default_ccms)
            out = unprocess(img, params, default_ccms)
            negative += int(np.count_nonzero(np.any(out.data < 0, axis=2)))
            total += 64
        assert negative / total <= 1e-3

    def test_rejects_linear_input(self, identity_ccms):
        with pytest.raises(InvalidImageError):
            unprocess(constant_image(0.5, state=ColorState.LINEAR_SRGB), degenerate(), identity_ccms)


class TestReprocess:

    def test_zero_image_hits_epsilon_floor(self, identity_ccms):
        params = make_params(gamma=2.0)
        img = constant_image(0.0, state=ColorState.LINEAR_CAMERA)
        out = reprocess(img, params, identity_ccms, SeededRng(0), PipelineOptions(quant_mode=QuantMode.OFF))
        np.testing.assert_allclose(out.data, 1e-5 ** 0.5)

    def test_round_trip_with_tone_remap(self, identity_ccms):
        x = PlanarImage(np.repeat(np.linspace(1e-3, 1.0, 1000)[None, :, None], 3, axis=2),
                        ColorState.SRGB_ENCODED)
        options = PipelineOptions(quant_mode=QuantMode.OFF, tone_remap=True)
        params = degenerate()
        out = reprocess(unprocess(x, params, identity_ccms), params, identity_ccms, SeededRng(0), options)
        assert np.max(np.abs(out.data - x.data)) <= 1e-5

    def test_quantization_draw_reproduces(self, identity_ccms):
        img = constant_image(0.2, state=ColorState.LINEAR_CAMERA)
        a = reprocess(img, make_params(), identity_ccms, SeededRng(3, 1))
        b = reprocess(img, make_params(), identity_ccms, SeededRng(3, 1))
        np.testing.assert_array_equal(a.data, b.data)

    def test_output_in_display_range(self, default_ccms):
        img = PlanarImage(np.random.default_rng(1).normal(0.3, 0.4, (8, 8, 3)), ColorState.LINEAR_CAMERA)
        params = make_params(CcmSelection(CcmMode.PICK_ONE, (1.0, 0.0, 0.0, 0.0), 0))
        out = reprocess(img, params, default_ccms, SeededRng(0))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestDegradeFull:

    def test_degenerate_identity(self, identity_ccms):
        x = PlanarImage(np.repeat(np.linspace(1e-3, 1.0, 1000)[None, :, None], 3, axis=2),
                        ColorState.SRGB_ENCODED)
        context = SynthesisContext(ccms=identity_ccms,
                                   options=PipelineOptions(quant_mode=QuantMode.OFF, tone_remap=True))
        out, record = degrade_full(x, degenerate(), SeededRng(0), context)
        assert np.max(np.abs(out.data - x.data)) <= 1e-5
        assert record.method == METHOD_OURS

    def test_low_k_darkens(self, identity_ccms):
        img = constant_image(0.5, (16, 16))
        context = SynthesisContext(ccms=identity_ccms)
        out, _ = degrade_full(img, make_params(k=0.05), SeededRng(1), context)
        assert luminance(out) < luminance(img)

    def test_luminance_monotone_in_k(self, default_ccms):
        img = gradient_image((32, 32))
        selection = CcmSelection(CcmMode.PICK_ONE, (1.0, 0.0, 0.0, 0.0), 0)
        context = SynthesisContext(ccms=default_ccms, options=PipelineOptions(quant_mode=QuantMode.BITDEPTH))
        means = []
        for k in (0.01, 0.05, 0.1, 0.5, 1.0):
            params = make_params(selection, k=k, delta_s=1e-4, delta_r=1e-4)
            out, _ = degrade_full(img, params, SeededRng(4, 0), context)
            means.append(luminance(out))
        assert all(b >= a for a, b in zip(means, means[1:]))

    def test_stage_order(self, default_ccms):
        for tone_remap in (False, True):
            trace = PipelineTrace()
            context = SynthesisContext(ccms=default_ccms, options=PipelineOptions(tone_remap=tone_remap))
            synthesize(gradient_image(), METHOD_OURS, SeededRng(2, 0), context, trace)
            assert_stage_order(trace, tone_remap)
            assert trace.states[-1] is ColorState.SRGB_ENCODED

    def test_stage_order_mismatch(self):
        with pytest.raises(InvalidImageError):
            assert_stage_order(PipelineTrace())

    def test_record_targets(self, context):
        _, record = synthesize(gradient_image(), METHOD_OURS, SeededRng(8, 3), context)
        assert record.seed == 8 and record.stream == 3
        assert record.config_hash == context.config_hash
        assert len(record.normalized_targets) == 5
        assert all(0.0 <= t <= 1.0 for t in record.normalized_targets)
        values = denormalize_targets(record.normalized_targets, context.ranges)
        assert values['k'] == pytest.approx(record.params.k)
        assert values['gamma'] == pytest.approx(record.params.gamma)
        assert values['bits'] == pytest.approx(record.params.bits)

    def test_degenerate_target_range(self):
        ranges = ParamRanges.from_dict({"bits": [12]})
        assert normalize_targets(make_params(bits=12), ranges)[1] == 0.0

    def test_mosaic_option_uses_mosaic_pipeline(self, context):
        mosaic_context = replace(context, options=PipelineOptions(mosaic=True))
        _, record = synthesize(gradient_image(), METHOD_OURS, SeededRng(1), mosaic_context)
        assert record.method == METHOD_OURS_MOSAIC


class TestRecordAndReplay:

    def test_record_survives_json(self, context, tmp_path):
        _, record = synthesize(gradient_image(), METHOD_OURS, SeededRng(8, 3), context)
        record.save(tmp_path / "r.deg.json")
        assert DegradationRecord.load(tmp_path / "r.deg.json") == record

    def test_replay_is_bit_exact(self, context):
        img = gradient_image()
        out, record = synthesize(img, METHOD_OURS, SeededRng(8, 3), context)
        loaded = DegradationRecord.from_dict(json.loads(json.dumps(record.to_dict())))
        np.testing.assert_array_equal(to_uint8(replay(loaded, img, context).data), to_uint8(out.data))

    def test_schema_version_checked(self, context):
        _, record = synthesize(gradient_image(), METHOD_OURS, SeededRng(1), context)
        data = record.to_dict()
        data['schema_version'] = SCHEMA_VERSION + 1
        with pytest.raises(ReplayMismatchError):
            DegradationRecord.from_dict(data)

    def test_config_hash_checked(self, context):
        img = gradient_image()
        _, record = synthesize(img, METHOD_OURS, SeededRng(1), context)
        record.config_hash = "0" * 64
        with pytest.raises(ReplayMismatchError):
            replay(record, img, context)

    def test_missing_stream(self, context):
        img = gradient_image()
        _, record = synthesize(img, METHOD_OURS, SeededRng(1), context)
        record.stream = None
        with pytest.raises(ReplayMismatchError):
            replay(record, img, context)


class TestBatch:

    def test_manifest(self, image_dir, tmp_path, context):
        out = tmp_path / "dark"
        manifest = degrade_batch(image_dir, out, context, seed=17)
        assert manifest['count'] == 4
        assert manifest['schema_version'] == SCHEMA_VERSION
        assert manifest['config_hash'] == context.config_hash
        assert [e['source'] for e in manifest['entries']] == [f"img_{i:02d}.png" for i in range(4)]
        assert {e['record']['stream'] for e in manifest['entries']} == {0, 1, 2, 3}
        assert manifest['errors'] == []
        assert 'timing' in manifest and 'histograms' in manifest['stats']
        for entry in manifest['entries']:
            assert (out / entry['output']).is_file()
            assert (out / entry['sidecar']).is_file()
        assert json.loads((out / "manifest.json").read_text())['count'] == 4

    def test_parallel_output_is_identical(self, image_dir, tmp_path, context):
        serial = degrade_batch(image_dir, tmp_path / "a", context, seed=5, jobs=1)
        parallel = degrade_batch(image_dir, tmp_path / "b", context, seed=5, jobs=3)
        for entry in serial['entries']:
            assert (tmp_path / "a" / entry['output']).read_bytes() == \
                (tmp_path / "b" / entry['output']).read_bytes()
            assert (tmp_path / "a" / entry['sidecar']).read_bytes() == \
                (tmp_path / "b" / entry['sidecar']).read_bytes()
        serial.pop('timing')
        parallel.pop('timing')
        assert serial == parallel

    def test_empty_directory(self, tmp_path, context):
        empty = tmp_path / "empty"
        empty.mkdir()
        manifest = degrade_batch(empty, tmp_path / "out", context, seed=1)
        assert manifest['count'] == 0 and manifest['entries'] == []

    def test_failures_are_recorded(self, image_dir, tmp_path, context):
        (image_dir / "broken.png").write_bytes(b"not an image")
        write_png(image_dir / "extra.png", np.zeros((4, 4, 3), dtype=np.uint8))
        manifest = degrade_batch(image_dir, tmp_path / "out", context, seed=1)
        assert manifest['count'] == 5
        assert [e['file'] for e in manifest['errors']] == ["broken.png"]
        assert manifest['error_summary']['total_errors'] == 1

    def test_duplicate_stems(self, image_dir, tmp_path, context):
        from PIL import Image
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(image_dir / "img_01.ppm", format="PPM")
        manifest = degrade_batch(image_dir, tmp_path / "out", context, seed=1)
        assert manifest['count'] == 4
        assert [e['file'] for e in manifest['errors']] == ["img_01.ppm"]

    def test_unwritable_output(self, image_dir, tmp_path, context):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OutputError):
            degrade_batch(image_dir, blocker, context, seed=1)

    def test_replay_batch(self, image_dir, tmp_path, context):
        out = tmp_path / "dark"
        degrade_batch(image_dir, out, context, seed=23)
        result = replay_batch(image_dir, out, context)
        assert len(result['matched']) == 4 and result['mismatched'] == []

    def test_replay_batch_detects_tampering(self, image_dir, tmp_path, context):
        out = tmp_path / "dark"
        degrade_batch(image_dir, out, context, seed=23)
        sidecar = out / "img_02.deg.json"
        data = json.loads(sidecar.read_text())
        data['params']['k'] = min(1.0, data['params']['k'] * 3)
        sidecar.write_text(json.dumps(data))
        result = replay_batch(image_dir, out, context)
        assert result['mismatched'] == ["img_02.png"]

    def test_replay_batch_detects_changed_source(self, image_dir, tmp_path, context):
        out = tmp_path / "dark"
        manifest = degrade_batch(image_dir, out, context, seed=23)
        assert all(len(e['source_sha256']) == 64 for e in manifest['entries'])
        write_png(image_dir / "img_03.png", np.zeros((12, 16, 3), dtype=np.uint8))
        result = replay_batch(image_dir, out, context)
        assert result['mismatched'] == ["img_03.png"] and len(result['matched']) == 3

    def test_written_image_decodes(self, image_dir, tmp_path, context):
        out = tmp_path / "dark"
        degrade_batch(image_dir, out, context, seed=2)
        img = read_image(out / "img_00.png")
        assert img.data.shape == (12, 16, 3)
