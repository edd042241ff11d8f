"""Scaling-measurement helpers: attention oracle, table layout, op counts."""

import numpy as np
import pytest

from mambaloc.bench import (LENGTHS, attention_reference, format_table,
                            op_count_report, scaling_table, time_attention,
                            time_scan)


class TestAttentionReference:
    def test_matches_manual_softmax(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(6, 4))
        k = rng.normal(size=(6, 4))
        v = rng.normal(size=(6, 4))
        out = attention_reference(q, k, v)
        scores = q @ k.T / 2.0
        expect = np.zeros_like(out)
        for i in range(6):
            w = np.exp(scores[i])
            w /= w.sum()
            expect[i] = w @ v
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(2.0, 3.0, (8, 5))
        out = attention_reference(rng.normal(size=(8, 5)), rng.normal(size=(8, 5)), v)
        assert np.all(out >= v.min(axis=0) - 1e-12)
        assert np.all(out <= v.max(axis=0) + 1e-12)

    def test_uniform_keys_average_values(self):
        v = np.arange(12.0).reshape(4, 3)
        out = attention_reference(np.zeros((4, 2)), np.zeros((4, 2)), v)
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (4, 1)), atol=1e-12)


class TestTimers:
    def test_timers_return_positive_seconds(self):
        assert time_scan(32, reps=1) > 0.0
        assert time_attention(32, reps=1) > 0.0

    def test_default_lengths_double(self):
        assert LENGTHS == (1024, 2048, 4096, 8192)
        assert all(b == 2 * a for a, b in zip(LENGTHS, LENGTHS[1:]))


@pytest.fixture(scope="module")
def rows():
    return scaling_table(lengths=(64, 128))


class TestScalingTable:
    def test_row_structure(self, rows):
        assert len(rows) == 2
        for length, scan_s, attn_s, scan_x, attn_x in rows:
            assert scan_s > 0.0 and attn_s > 0.0

    def test_first_row_has_no_ratio(self, rows):
        assert np.isnan(rows[0][3]) and np.isnan(rows[0][4])

    def test_later_ratios_are_time_quotients(self, rows):
        assert rows[1][3] == pytest.approx(rows[1][1] / rows[0][1])
        assert rows[1][4] == pytest.approx(rows[1][2] / rows[0][2])

    def test_format_table_layout(self, rows):
        lines = format_table(rows).splitlines()
        assert lines[0] == "length\tscan_s\tattn_s\tscan_x\tattn_x"
        assert len(lines) == 3
        assert lines[1].split("\t")[0] == "64"
        assert lines[2].split("\t")[0] == "128"


class TestOpCountReport:
    def test_pixel_doubling_is_linear(self, capsys):
        report = op_count_report()
        capsys.readouterr()
        lines = report.splitlines()
        assert lines[0].startswith("params: ")
        macs_a = int(lines[1].split(": ")[1])
        macs_b = int(lines[2].split(": ")[1])
        ratio = float(lines[3].split(": ")[1])
        assert ratio == pytest.approx(macs_b / macs_a, abs=1e-4)
        assert 1.9 <= ratio <= 2.1
