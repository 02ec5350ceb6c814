import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvcohmap.pulses import (
    Channel,
    CompileError,
    DeviceDelays,
    InstructionList,
    PulseProgram,
    Segment,
    build_rabi_sequence,
    compensate_aom,
    dequantize,
    quantization_errors,
    quantize,
    read_instructions,
    total_duration,
    validate,
    write_instructions,
)

GRID = 3.3


def single(channel, start, duration):
    return PulseProgram((Segment(channel, start, duration),))


def _mw_on_tick(il):
    return next(t for t, m in il.instructions if m & Channel.MW)


@pytest.mark.parametrize("t, tick", [(10.0, 3), (0.0, 0), (1.65, 1), (1.6, 0), (4.95, 2)])
def test_nearest_tick_ties_later(t, tick):
    assert _mw_on_tick(quantize(single(Channel.MW, t, 100.0), GRID)) == tick


def test_edge_at_10ns_error():
    prog = single(Channel.MW, 10.0, 100.0)
    il = quantize(prog, GRID)
    assert (3, int(Channel.MW)) in il.instructions
    assert quantization_errors(prog, il)[0] == pytest.approx(-0.1, abs=1e-12)


def test_mw_930_spans_282_ticks():
    il = quantize(single(Channel.MW, 0.0, 930.0), GRID)
    assert il.instructions == ((0, 2), (282, 0))
    assert il.total_ticks == 282
    assert 282 * GRID == pytest.approx(930.6)


def test_zero_length_after_rounding_is_an_error():
    with pytest.raises(CompileError):
        quantize(single(Channel.MW, 10.0, 1.0), GRID)
    with pytest.raises(ValueError):
        Segment(Channel.MW, 0.0, 0.0)
    with pytest.raises(ValueError):
        quantize(single(Channel.MW, 0.0, 10.0), 0.0)


def test_simultaneous_edges_merge():
    prog = PulseProgram((Segment(Channel.LASER, 33.0, 66.0), Segment(Channel.CAMERA, 33.0, 33.0)))
    il = quantize(prog, GRID)
    assert il.instructions == ((0, 0), (10, 5), (20, 1), (30, 0))
    assert il.mask_at(15) == 5 and il.mask_at(25) == 1 and il.mask_at(100) == 0


def test_instruction_ticks_strictly_increasing():
    with pytest.raises(ValueError):
        InstructionList(GRID, ((0, 1), (0, 0)), 1)


def test_rabi_sequence_shape():
    prog = build_rabi_sequence(930.0, 300.0, 300.0, gap=1000.0)
    lasers = prog.on_segments(Channel.LASER)
    (mw,) = prog.on_segments(Channel.MW)
    assert mw.duration == 930.0
    assert mw.start == lasers[0].end + 1000.0
    assert lasers[1].start == mw.end + 1000.0
    assert lasers[0].duration == 300_000.0
    assert validate(prog) == []


def test_rabi_sequence_tau_zero_has_no_mw():
    prog = build_rabi_sequence(0.0)
    assert prog.on_segments(Channel.MW) == []
    assert validate(prog) == []


def test_rabi_sequence_errors():
    with pytest.raises(ValueError):
        build_rabi_sequence(-1.0)
    with pytest.raises(ValueError):
        build_rabi_sequence(10.0, gap=-5.0)


@given(st.floats(0, 1e6, allow_nan=False), st.floats(0, 5000, allow_nan=False))
def test_rabi_sequence_always_valid(tau, gap):
    assert validate(build_rabi_sequence(tau, gap=gap)) == []


def test_validate_overlapping_mw():
    prog = PulseProgram((Segment(Channel.MW, 0.0, 100.0), Segment(Channel.MW, 50.0, 100.0)))
    assert len(validate(prog)) == 1


def test_validate_mw_overlapping_readout():
    base = build_rabi_sequence(930.0, gap=1000.0)
    init, readout = base.on_segments(Channel.LASER)
    (mw,) = base.on_segments(Channel.MW)
    shifted = Segment(Channel.LASER, mw.end - 100.0, readout.duration)
    prog = PulseProgram((init, mw, shifted))
    violations = validate(prog)
    assert len(violations) == 1 and "overlaps LASER" in violations[0]


def test_validate_negative_time():
    prog = single(Channel.CAMERA, -5.0, 10.0)
    assert len(validate(prog)) == 1


def test_total_duration():
    assert total_duration(single(Channel.LASER, 0.0, 300_000.0)) == 300_000.0
    assert total_duration(build_rabi_sequence(930.0, 300.0, 300.0, gap=500.0)) == 601_930.0
    assert total_duration(PulseProgram()) == 0.0


def test_compensate_aom_examples():
    prog = single(Channel.LASER, 1000.0, 500.0)
    out = compensate_aom(prog, DeviceDelays(130.0, 35.0))
    assert out.segments[0].start == 870.0
    assert out.segments[0].duration == 500.0
    assert out.metadata["aom_rise_ns"] == 35.0
    assert out.metadata["switching_time_ns"] == 165.0
    assert compensate_aom(prog, DeviceDelays(0.0, 35.0)) == prog
    with pytest.raises(CompileError):
        compensate_aom(single(Channel.LASER, 50.0, 500.0), DeviceDelays())


def test_compensate_aom_leaves_mw_and_stays_valid():
    prog = build_rabi_sequence(930.0, lead_in=130.0)
    out = compensate_aom(prog, DeviceDelays())
    mw_in = prog.on_segments(Channel.MW)
    assert out.on_segments(Channel.MW) == mw_in
    for a, b in zip(prog.on_segments(Channel.LASER), out.on_segments(Channel.LASER)):
        assert a.start - b.start == 130.0
    assert validate(out) == []


def test_device_delays_validation():
    with pytest.raises(ValueError):
        DeviceDelays(-1.0, 0.0)


@st.composite
def programs(draw):
    segs = []
    for ch in Channel:
        t = draw(st.floats(0, 50))
        for _ in range(draw(st.integers(0, 4))):
            dur = draw(st.floats(GRID, 500))
            segs.append(Segment(ch, t, dur))
            t += dur + draw(st.floats(GRID, 200))
    return PulseProgram(tuple(segs), draw(st.integers(1, 200)))


@given(programs(), st.sampled_from([GRID, 1.0, 2.5]))
def test_quantization_error_bound(prog, grid):
    if not prog.segments:
        return
    il = quantize(prog, grid)
    assert np.all(np.abs(quantization_errors(prog, il)) <= grid / 2 + 1e-9)


@given(programs())
def test_round_trip_idempotent(prog):
    il = quantize(prog, GRID)
    back = dequantize(il)
    il2 = quantize(back, GRID)
    assert il2 == il
    assert dequantize(il2) == back


@given(st.lists(st.floats(0, 1e5), max_size=10), st.floats(0, 500))
def test_compensate_preserves_durations(starts, delay):
    segs = tuple(Segment(Channel.LASER, 500.0 + s, 10.0 + i) for i, s in enumerate(starts))
    out = compensate_aom(PulseProgram(segs), DeviceDelays(delay, 0.0))
    assert sorted(s.duration for s in out.segments) == sorted(s.duration for s in segs)


def test_text_format_round_trip(tmp_path):
    prog = compensate_aom(build_rabi_sequence(930.0, lead_in=132.0), DeviceDelays())
    il = quantize(prog, GRID)
    path = tmp_path / "seq.txt"
    write_instructions(path, il)
    lines = path.read_text().splitlines()
    assert lines[0] == "grid_ns=3.3"
    assert lines[1] == "0\t0"
    assert all(len(ln.split("\t")) == 2 for ln in lines[1:])
    back = read_instructions(path)
    assert back.instructions == il.instructions
    assert back.grid == GRID
    with pytest.raises(ValueError):
        (tmp_path / "bad.txt").write_text("0\t1\n")
        read_instructions(tmp_path / "bad.txt")
