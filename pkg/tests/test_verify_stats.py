"""Statistical and determinism checks behind the `verify` command"""
import json

import pytest

from sensor_noise import ParamRanges
from verify_stats import (
    CheckEntry, VerificationReport, compare_outputs, run_verification, verify_determinism,
    verify_noise_law, verify_roundtrips, verify_sampling, write_synthetic_corpus,
)


def by_name(entries):
    return {e.name: e for e in entries}


class TestNoiseLaw:

    def test_moments(self):
        entries = by_name(verify_noise_law(n=10 ** 5, seed=3))
        assert entries["noise_law.mean"].passed
        assert entries["noise_law.variance"].passed
        assert entries["noise_law.variance"].expected == pytest.approx(1e-4 + 1e-3 * 0.05)

    def test_noiseless_draws_are_exact(self):
        entries = verify_noise_law(delta_s=0.0, delta_r=0.0, n=500, label="quiet")
        assert [e.name for e in entries] == ["quiet.mean", "quiet.variance"]
        assert all(e.passed and e.tolerance == 0.0 for e in entries)


class TestRoundtrips:

    def test_all_stages_invert(self, default_ccms):
        entries = verify_roundtrips(default_ccms)
        failed = [e.name for e in entries if not e.passed]
        assert not failed
        names = {e.name for e in entries}
        assert "roundtrip.tone" in names and "roundtrip.degenerate_pipeline" in names
        assert sum(name.startswith("roundtrip.ccm[") for name in names) == 4

    def test_gamma_pair_is_exact_down_to_clamp_margin(self, default_ccms):
        entries = by_name(verify_roundtrips(default_ccms))
        for gamma in (2.0, 2.2, 3.5):
            assert entries[f"roundtrip.gamma[{gamma}]"].observed < 1e-12


class TestSampling:

    @pytest.fixture(scope="class")
    def entries(self):
        return by_name(verify_sampling(ParamRanges(), n=10 ** 5, seed=0))

    def test_ranges_hold(self, entries):
        assert entries["sampling.range_violations"].observed == 0

    def test_bit_depths_are_balanced(self, entries):
        for b in (12, 14, 16):
            assert entries[f"sampling.bits_frequency[{b}]"].passed

    def test_read_noise_regression(self, entries):
        assert entries["sampling.read_noise_slope"].passed
        assert entries["sampling.read_noise_intercept"].passed

    def test_goodness_of_fit_passes_at_default_seed(self, entries):
        fits = [e for e in entries.values() if e.p_value is not None]
        assert {e.name for e in fits} == {
            "sampling.k_truncated_gaussian", "sampling.gamma_uniform", "sampling.g_r_uniform",
            "sampling.g_b_uniform", "sampling.log_shot_uniform", "sampling.quantization_uniform"}
        assert all(e.passed for e in fits), [e.to_dict() for e in fits if not e.passed]

    def test_quantization_check_uses_fourteen_bits(self, entries):
        assert entries["sampling.quantization_uniform"].expected == f"uniform on [{-1 / 28}, {1 / 28}]"

    def test_narrowed_bits(self):
        entries = by_name(verify_sampling(ParamRanges(bits=(14,)), n=2000, seed=1))
        assert entries["sampling.bits_frequency[14]"].observed == 1.0


class TestDeterminism:

    def test_serial_and_parallel_agree(self, context, tmp_path):
        entries = verify_determinism(context, seed=2, images=3, jobs=2, workdir=tmp_path)
        assert all(e.passed for e in entries), [e.to_dict() for e in entries]

    def test_baseline_method(self, context, tmp_path):
        entries = verify_determinism(context, seed=2, images=2, jobs=2, workdir=tmp_path, method="retinex")
        assert entries[0].name == "determinism.jobs_1_vs_2[retinex]"
        assert all(e.passed for e in entries)

    def test_compare_outputs_finds_changes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_synthetic_corpus(a, 2, seed=1)
        write_synthetic_corpus(b, 2, seed=1)
        assert compare_outputs(a, b) == []
        (b / "img_001.png").write_bytes(b"changed")
        (b / "extra.png").write_bytes(b"")
        assert compare_outputs(a, b) == ["extra.png", "img_001.png"]

    def test_manifest_timing_is_ignored(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for directory, seconds in ((a, 1.0), (b, 2.5)):
            directory.mkdir()
            (directory / "manifest.json").write_text(json.dumps({"count": 1, "timing": {"seconds": seconds}}))
        assert compare_outputs(a, b) == []


class TestReport:

    def test_verdict_and_file(self, tmp_path):
        report = VerificationReport(environment={"seed": 1})
        report.extend([CheckEntry("a", 0, 0, 0, True)])
        assert report.passed
        report.extend([CheckEntry("b", 1, 2, 0, False)])
        path = report.write(tmp_path / "out" / "report.json")
        data = json.loads(path.read_text())
        assert data["verdict"] == "fail"
        assert [c["pass"] for c in data["checks"]] == [True, False]

    @pytest.mark.slow
    def test_full_run(self, app_config):
        report = run_verification(app_config, seed=0, jobs=4)
        assert report.passed, [e.to_dict() for e in report.entries if not e.passed]
