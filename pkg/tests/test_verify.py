from __future__ import annotations

import json
import math

import numpy as np
import pytest

from lasalt import verify
from lasalt.errors import TrajectoryExhaustedError
from lasalt.grid import TorusGrid
from lasalt.runconfig import RunConfig, desk_config

from .conftest import RESOURCES, small_config_dict


QUICK_CHEAP = ["A-1", "A-2", "A-11"]


@pytest.fixture(scope="module")
def cheap_summary() -> verify.VerifySummary:
    return verify.run_verify(
        desk_config(), ladder=verify.Ladder.quick(), only=QUICK_CHEAP
    )


def test_cheap_criteria_pass(cheap_summary):
    """Operator reduction, heat kernel and the ellipticity gate hold on the desk."""
    assert [c.id for c in cheap_summary.criteria] == ["E-1", *QUICK_CHEAP]
    assert cheap_summary.passed
    assert cheap_summary.failed == []
    assert cheap_summary["A-1"].value <= 1e-10
    assert cheap_summary["A-2"].value <= 1e-6
    assert "refused" in cheap_summary["A-11"].note
    with pytest.raises(KeyError):
        cheap_summary["A-5"]


def test_summary_dict(cheap_summary):
    data = cheap_summary.as_dict()
    config = desk_config()
    assert data["config_hash"] == config.config_hash
    assert data["grid_n"] == config.grid.n
    assert data["passed"] is True
    assert data["skipped"] == []
    assert data["criteria"][0]["id"] == "E-1"


def test_summary_save(tmp_path, cheap_summary):
    """The JSON and the Markdown rendering land side by side."""
    cheap_summary.save(tmp_path / "verify")
    data = json.loads((tmp_path / "verify" / "verify.json").read_text())
    assert data == json.loads(json.dumps(cheap_summary.as_dict()))
    text = (tmp_path / "verify" / "verify.md").read_text()
    assert "**Overall: PASS**" in text


def test_degenerate_noise_stops_the_ladder():
    """A failing ellipticity certificate skips every other criterion."""
    config = RunConfig.from_file(RESOURCES / "degenerate.json")
    summary = verify.run_verify(config, ladder=verify.Ladder.quick())
    assert [c.id for c in summary.criteria] == ["E-1"]
    assert not summary["E-1"].passed
    assert summary["E-1"].value == pytest.approx(0.0, abs=1e-12)
    assert summary.skipped[0] == "A-1"
    assert len(summary.skipped) == 12
    assert not summary.passed


def test_numerical_error_fails_one_criterion(monkeypatch):
    def broken(config):
        msg = "no data"
        raise TrajectoryExhaustedError(msg)

    monkeypatch.setattr(verify, "check_operator_reduction", broken)
    summary = verify.run_verify(
        desk_config(), ladder=verify.Ladder.quick(), only=["A-1", "A-11"]
    )
    assert not summary["A-1"].passed
    assert summary["A-1"].note.startswith("TrajectoryExhaustedError")
    assert summary["A-11"].passed
    assert summary.failed == ["A-1"]


def test_conservation(trajectory):
    """Buoyancy mass is conserved pathwise and in expectation."""
    config = RunConfig.from_dict(small_config_dict())
    summary = verify.run_verify(config, only=["A-10"], trajectory=trajectory)
    assert summary["A-10"].passed
    assert "pathwise" in summary["A-10"].note
    assert "expectation" in summary["A-10"].note


def test_canonical_eps():
    assert verify.canonical_eps(RunConfig.from_dict(small_config_dict())) == 0.3
    degenerate = RunConfig.from_file(RESOURCES / "degenerate.json")
    assert verify.canonical_eps(degenerate) == verify.DEFAULT_EPS


def test_with_span():
    """Shortened runs keep a snapshot stride that divides the step count."""
    config = RunConfig.from_dict(small_config_dict())
    short = verify.with_span(config, 0.025)
    assert short.solver.t_end == pytest.approx(0.025)
    assert short.solver.save_every == 1
    assert verify.with_span(config, 0.02).solver.save_every == 2
    assert short.config_hash != config.config_hash


def test_anomaly_data():
    config = RunConfig.from_dict(small_config_dict())
    assert verify.anomaly_data(config) == "blob_anomaly(3.14159, 3.14159, 0.8, 1.0)"
    moded = RunConfig.from_dict(
        small_config_dict(initial={"theta": "mode(1, 1, 0.0, 1.0)"})
    )
    c = repr(math.pi)
    assert verify.anomaly_data(moded) == f"blob_anomaly({c}, {c}, 0.6, 1.0)"


def test_band_limited_field():
    """Only modes inside the cutoff radius are populated and the seed fixes the field."""
    grid = TorusGrid(32)
    f = verify.band_limited_field(grid, 3, kmax=4)
    coeffs = np.fft.fft2(f.values)
    k = np.fft.fftfreq(32, 1 / 32)
    outside = k[:, None] ** 2 + k[None, :] ** 2 > 16
    assert np.abs(coeffs[outside]).max() < 1e-9
    np.testing.assert_array_equal(f.values, verify.band_limited_field(grid, 3, 4).values)


@pytest.mark.parametrize(
    ("gaps", "passed"),
    [
        ([1.0, 0.5, 0.5 / 1.38], False),
        ([1.0, 1 / 1.3, 1 / 1.69], False),
        ([1.0, 0.6, 0.36], True),
        ([1.0, 0.5, 0.25], True),
    ],
)
def test_strat_ito_gate_needs_every_ratio(monkeypatch, gaps: list[float], passed: bool):
    """Each halving of dt has to shrink the Stratonovich-Itô gap by sqrt 2."""
    monkeypatch.setattr(verify, "strat_ito_gaps", lambda *args: gaps)
    config = RunConfig.from_dict(small_config_dict())
    criterion = verify.check_strat_ito(config, verify.Ladder.quick())
    assert criterion.passed is passed
    assert criterion.threshold == pytest.approx(math.sqrt(2.0))
    assert criterion.value == pytest.approx(min(a / b for a, b in zip(gaps, gaps[1:])))


def test_quick_ladder_is_smaller():
    full, quick = verify.Ladder(), verify.Ladder.quick()
    assert quick.covariance_members < full.covariance_members
    assert quick.heat_t < full.heat_t


if __name__ == "__main__":
    pytest.main([__file__])
