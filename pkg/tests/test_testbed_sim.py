import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enginefault import testbed_sim as sim
from enginefault.testbed_sim import (
    DEFAULT_TEMPLATES, CorpusConfig, FaultSpec, InvalidArgument, Shape, SimConfig, Site,
    generate_cycle, generate_dataset, inject_fault, read_run, simulate_run, write_run,
)


@pytest.fixture(scope="module")
def clean_run():
    return simulate_run(generate_cycle(3, 120), seed=11)


def test_cycle_shape_and_determinism():
    a = generate_cycle(7, 1800)
    b = generate_cycle(7, 1800)
    assert len(a.time_s) == 1801
    assert a.time_s[0] == 0 and a.time_s[-1] == 1800
    np.testing.assert_array_equal(np.diff(a.time_s), 1.0)
    for f in ("speed_rpm", "torque_nm"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert (generate_cycle(7, 60).speed_rpm >= 0).all()


@pytest.mark.parametrize("bad", [0, -5, 9])
def test_cycle_rejects_short_duration(bad):
    with pytest.raises(InvalidArgument):
        generate_cycle(1, bad)


def test_channel_counts_and_rates(clean_run):
    widths = {name: t.values.shape[1] for name, t in clean_run.tables().items()}
    assert widths == {"omega": 1, "torque": 1, "input_signal": 5, "output_signal": 9, "states_signal": 13}
    assert len(clean_run.omega.time_s) == 121
    assert len(clean_run.input_signal.time_s) == 241
    for t in clean_run.tables().values():
        assert np.all(np.diff(t.time_s) > 0)
        assert np.isfinite(t.values).all()


def test_simulation_is_deterministic(clean_run):
    again = simulate_run(generate_cycle(3, 120), seed=11)
    for name, t in clean_run.tables().items():
        assert t.values.tobytes() == again.tables()[name].values.tobytes()


def test_constant_cycle_without_noise_settles():
    n = 301
    cyc = sim.DrivingCycle(300, np.arange(n, dtype=float), np.full(n, 2000.0), np.full(n, 100.0))
    run = simulate_run(cyc, seed=0, config=SimConfig(noise_scale=0.0))
    tail = run.states_signal.values[-40:]
    np.testing.assert_allclose(tail, np.broadcast_to(tail[-1], tail.shape), atol=1e-9)


@pytest.mark.parametrize("template", DEFAULT_TEMPLATES, ids=lambda t: f"f{t.fault_id}")
def test_zero_magnitude_is_identity(clean_run, template):
    faulty = inject_fault(clean_run, template.spec(40.0, 0.0))
    for name, t in clean_run.tables().items():
        np.testing.assert_array_equal(faulty.tables()[name].values, t.values)


@pytest.mark.parametrize("template", DEFAULT_TEMPLATES, ids=lambda t: f"f{t.fault_id}")
def test_faults_are_causal_and_visible(clean_run, template):
    onset = 50.0
    faulty = inject_fault(clean_run, template.spec(onset, 2.0))
    changed = False
    for name, t in clean_run.tables().items():
        f = faulty.tables()[name]
        before = t.time_s < onset
        assert f.values[before].tobytes() == t.values[before].tobytes()
        changed |= not np.array_equal(f.values, t.values)
    assert changed
    assert faulty.fault.fault_id == template.fault_id
    assert clean_run.fault is None


def test_pulse_touches_exactly_its_duration():
    run = simulate_run(generate_cycle(5, 60), seed=2, config=SimConfig(signal_rate_hz=1.0))
    spec = FaultSpec(10, Site.SENSOR, 7, Shape.PULSE, onset_s=20.0, duration_s=3.0, magnitude=2.0)
    faulty = inject_fault(run, spec)
    diff = faulty.output_signal.values[:, 7] != run.output_signal.values[:, 7]
    assert diff.sum() == 3
    np.testing.assert_array_equal(np.flatnonzero(diff), [20, 21, 22])


def test_abrupt_sensor_offset_is_magnitude_std(clean_run):
    spec = FaultSpec(8, Site.SENSOR, 2, Shape.ABRUPT, onset_s=90.0, magnitude=2.0)
    faulty = inject_fault(clean_run, spec)
    x = clean_run.output_signal.values[:, 2]
    after = clean_run.output_signal.time_s >= 90.0
    np.testing.assert_allclose(faulty.output_signal.values[after, 2] - x[after], 2.0 * x.std())
    np.testing.assert_array_equal(faulty.output_signal.values[~after, 2], x[~after])


def test_stuck_holds_onset_value(clean_run):
    spec = FaultSpec(11, Site.SENSOR, 8, Shape.STUCK, onset_s=30.0, magnitude=2.0)
    y = inject_fault(clean_run, spec).output_signal.values[:, 8]
    after = clean_run.output_signal.time_s >= 30.0
    assert np.all(y[after] == y[after][0])


def test_state_fault_propagates_to_outputs(clean_run):
    spec = FaultSpec(6, Site.STATE, 7, Shape.ABRUPT, onset_s=40.0)
    faulty = inject_fault(clean_run, spec)
    assert not np.array_equal(faulty.output_signal.values, clean_run.output_signal.values)
    np.testing.assert_array_equal(faulty.input_signal.values, clean_run.input_signal.values)


@pytest.mark.parametrize("site, channel", [(Site.ACTUATOR, 5), (Site.STATE, 13), (Site.SENSOR, 9),
                                           (Site.SENSOR, -1)])
def test_channel_bounds(site, channel):
    with pytest.raises(InvalidArgument):
        FaultSpec(1, site, channel, Shape.ABRUPT, 10.0)


@pytest.mark.parametrize("kwargs", [{"fault_id": 0}, {"fault_id": 12}, {"magnitude": -1.0},
                                    {"onset_s": -1.0}, {"duration_s": 0.0}])
def test_fault_spec_validation(kwargs):
    base = dict(fault_id=1, site=Site.ACTUATOR, channel=0, shape=Shape.ABRUPT, onset_s=5.0)
    base.update(kwargs)
    with pytest.raises(InvalidArgument):
        FaultSpec(**base)


def test_onset_outside_run_rejected(clean_run):
    with pytest.raises(InvalidArgument):
        inject_fault(clean_run, FaultSpec(1, Site.ACTUATOR, 0, Shape.ABRUPT, 500.0))


def test_write_read_round_trip(tmp_path, clean_run):
    spec = FaultSpec(4, Site.ACTUATOR, 3, Shape.PULSE, 30.0, 30.0, 2.0)
    run = inject_fault(clean_run, spec)
    write_run(run, tmp_path / "r")
    back = read_run(tmp_path / "r")
    for name, t in run.tables().items():
        np.testing.assert_allclose(back.tables()[name].values, t.values, rtol=1e-11)
        np.testing.assert_allclose(back.tables()[name].time_s, t.time_s, rtol=1e-12)
    assert back.fault == spec
    meta = json.loads((tmp_path / "r" / "meta.json").read_text())
    for key in ("fault_id", "site", "channel", "shape", "onset_s", "duration_s", "magnitude", "seed"):
        assert key in meta
    header = (tmp_path / "r" / "states_signal.csv").read_text().splitlines()[0]
    assert header.split(",")[0] == "time_s" and len(header.split(",")) == 14


def test_persistent_fault_duration_written_as_null(tmp_path, clean_run):
    run = inject_fault(clean_run, FaultSpec(1, Site.ACTUATOR, 0, Shape.ABRUPT, 30.0))
    write_run(run, tmp_path / "r")
    meta = json.loads((tmp_path / "r" / "meta.json").read_text())
    assert meta["duration_s"] is None
    assert math.isinf(read_run(tmp_path / "r").fault.duration_s)


def test_missing_cells_only_in_input_table(tmp_path, clean_run):
    write_run(clean_run, tmp_path / "r", missing_fraction=0.05)
    text = (tmp_path / "r" / "input_signal.csv").read_text()
    assert ",," in text or ",\n" in text
    assert ",," not in (tmp_path / "r" / "output_signal.csv").read_text()


def test_generate_dataset_layout(tmp_path):
    cfg = CorpusConfig(runs_per_class=2, duration_s=30)
    paths = generate_dataset(cfg, tmp_path, workers=1)
    assert len(paths) == 24
    classes = sorted(p.name for p in tmp_path.iterdir())
    assert classes == sorted(str(i) for i in range(12))
    for run_dir in (tmp_path / "0").iterdir():
        assert run_dir.name.startswith("run_")
        assert json.loads((run_dir / "meta.json").read_text())["fault_id"] == 0
    for fid in range(1, 12):
        for run_dir in (tmp_path / str(fid)).iterdir():
            assert json.loads((run_dir / "meta.json").read_text())["fault_id"] == fid


def test_parallel_generation_matches_sequential(tmp_path):
    cfg = CorpusConfig(runs_per_class=1, duration_s=20)
    generate_dataset(cfg, tmp_path / "a", workers=1)
    generate_dataset(cfg, tmp_path / "b", workers=2)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.*"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(Shape)), st.floats(0.1, 5.0), st.floats(0.0, 100.0))
def test_any_shape_leaves_pre_onset_untouched(shape, magnitude, onset):
    t = np.arange(0, 120, 0.5)
    x = np.sin(t / 7.0) * 3 + 1
    dur = 10.0 if shape in (Shape.PULSE,) else math.inf
    spec = FaultSpec(1, Site.ACTUATOR, 0, shape, onset, dur, magnitude)
    y = sim.apply_shape(x, t, spec, 119.5)
    np.testing.assert_array_equal(y[t < onset], x[t < onset])
