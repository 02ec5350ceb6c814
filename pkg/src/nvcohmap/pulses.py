"""Rabi pulse programs and their compilation to a tick grid.

A :class:`PulseProgram` is a declarative list of channel segments in ns. The
compiler advances laser commands to absorb the AOM delay, rounds every edge to
the pulse card's tick grid and merges coincident edges into one instruction
carrying the combined channel mask.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DEFAULT_GRID_NS",
    "Channel",
    "CompileError",
    "DeviceDelays",
    "InstructionList",
    "PulseProgram",
    "Segment",
    "build_rabi_sequence",
    "compensate_aom",
    "dequantize",
    "quantization_errors",
    "quantize",
    "read_instructions",
    "total_duration",
    "validate",
    "write_instructions",
]

DEFAULT_GRID_NS = 3.3


class CompileError(ValueError):
    """A program cannot be compiled as requested."""


class Channel(enum.IntFlag):
    LASER = 1
    MW = 2
    CAMERA = 4


@dataclass(frozen=True)
class Segment:
    channel: Channel
    start: float
    duration: float
    level: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel", Channel(self.channel))
        if not self.duration > 0:
            raise ValueError(f"segment duration must be positive, got {self.duration}")

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class PulseProgram:
    segments: tuple = ()
    repeat_count: int = 1
    channels: frozenset = frozenset(Channel)
    # timing annotations (AOM advance, rise time); not part of program identity
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(sorted(self.segments, key=lambda s: (s.start, s.channel))))
        if self.repeat_count < 1:
            raise ValueError("repeat_count must be >= 1")

    def on_segments(self, channel=None):
        return [s for s in self.segments if s.level and (channel is None or s.channel == channel)]


@dataclass(frozen=True)
class DeviceDelays:
    aom_delay: float = 130.0
    aom_rise: float = 35.0

    def __post_init__(self):
        if self.aom_delay < 0 or self.aom_rise < 0:
            raise ValueError("device delays must be nonnegative")

    @property
    def switching_time(self) -> float:
        return self.aom_delay + self.aom_rise


@dataclass(frozen=True)
class InstructionList:
    grid: float
    instructions: tuple  # ((tick, mask), ...)
    total_ticks: int
    repeat_count: int = 1

    def __post_init__(self):
        ticks = [t for t, _ in self.instructions]
        if any(b <= a for a, b in zip(ticks, ticks[1:])):
            raise ValueError("instruction ticks must be strictly increasing")

    def mask_at(self, tick) -> int:
        mask = 0
        for t, m in self.instructions:
            if t > tick:
                break
            mask = m
        return mask


def build_rabi_sequence(tau, init_duration=300.0, readout_duration=300.0, gap=1000.0, lead_in=0.0):
    """One Rabi shot: optical initialization, dark MW pulse of length ``tau``, optical readout.

    ``init_duration`` and ``readout_duration`` are in us; ``tau``, ``gap`` and
    ``lead_in`` in ns. The MW pulse is separated from both laser pulses by
    ``gap``. A ``lead_in`` delays the whole shot, leaving room for the AOM advance.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    if init_duration <= 0 or readout_duration <= 0:
        raise ValueError("laser durations must be positive")
    init_ns = init_duration * 1e3
    segs = [Segment(Channel.LASER, lead_in, init_ns)]
    t = lead_in + init_ns + gap
    if tau > 0:
        segs.append(Segment(Channel.MW, t, tau))
    segs.append(Segment(Channel.LASER, t + tau + gap, readout_duration * 1e3))
    return PulseProgram(tuple(segs))


def _overlap(a, b):
    return a.start < b.end and b.start < a.end


def _optical(program):
    """Segments as they act on the sample, undoing any AOM command advance."""
    adv = program.metadata.get("aom_advance_ns", 0.0)
    if not adv:
        return list(program.segments)
    return [replace(s, start=s.start + adv) if s.channel == Channel.LASER else s
            for s in program.segments]


def validate(program) -> list:
    """Return a list of human-readable violations; empty means valid."""
    violations = []
    segs = [s for s in _optical(program) if s.level]
    for s in program.segments:
        if s.start < 0:
            violations.append(f"{s.channel.name} segment starts at negative time {s.start} ns")
    for ch in Channel:
        own = sorted((s for s in segs if s.channel == ch), key=lambda s: s.start)
        for a, b in zip(own, own[1:]):
            if b.start < a.end:
                violations.append(
                    f"{ch.name} segments overlap: [{a.start}, {a.end}) and [{b.start}, {b.end})"
                )
    lasers = [s for s in segs if s.channel == Channel.LASER]
    for mw in (s for s in segs if s.channel == Channel.MW):
        for las in lasers:
            if _overlap(mw, las):
                violations.append(
                    f"MW [{mw.start}, {mw.end}) overlaps LASER [{las.start}, {las.end})"
                )
    return violations


def total_duration(program) -> float:
    if not program.segments:
        return 0.0
    return max(s.end for s in program.segments) - min(s.start for s in program.segments)


def compensate_aom(program, delays):
    """Advance every LASER edge by the AOM delay so light arrives at the requested times.

    The rise time only shapes the optical edge; it is recorded in the metadata,
    not compensated.
    """
    d = float(delays.aom_delay)
    segs = []
    for s in program.segments:
        if s.channel == Channel.LASER and d:
            s = replace(s, start=s.start - d)
            if s.start < 0:
                raise CompileError(
                    f"AOM advance of {d} ns puts a LASER command at {s.start} ns; add lead-in time"
                )
        segs.append(s)
    meta = dict(program.metadata)
    meta.update(aom_advance_ns=meta.get("aom_advance_ns", 0.0) + d, aom_rise_ns=delays.aom_rise,
                switching_time_ns=delays.switching_time)
    return PulseProgram(tuple(segs), program.repeat_count, program.channels, meta)


def _to_tick(t, grid):
    # nearest tick, ties toward the later tick
    return int(math.floor(t / grid + 0.5))


def quantize(program, grid=DEFAULT_GRID_NS) -> InstructionList:
    if not grid > 0:
        raise ValueError("grid must be positive")
    windows = []
    for s in program.on_segments():
        a, b = _to_tick(s.start, grid), _to_tick(s.end, grid)
        if a < 0:
            raise CompileError(f"{s.channel.name} edge at {s.start} ns is before t=0")
        if b <= a:
            raise CompileError(
                f"{s.channel.name} segment [{s.start}, {s.end}) ns vanishes on a {grid} ns grid"
            )
        windows.append((a, b, int(s.channel)))

    span_ns = max([s.end for s in program.segments] + [program.metadata.get("span_ns", 0.0)])
    total = max(int(math.ceil(span_ns / grid - 1e-9)), 0)
    edges = sorted({0} | {w[0] for w in windows} | {w[1] for w in windows})
    instructions = []
    for tick in edges:
        mask = 0
        for a, b, ch in windows:
            if a <= tick < b:
                mask |= ch
        if not instructions or instructions[-1][1] != mask:
            instructions.append((tick, mask))
    total = max(total, instructions[-1][0])
    return InstructionList(float(grid), tuple(instructions), total, program.repeat_count)


def dequantize(il) -> PulseProgram:
    """Rebuild the program an instruction list realizes exactly (edges at tick multiples)."""
    segs = []
    last = il.instructions[-1][0] if il.instructions else 0
    sentinel = ((max(il.total_ticks, last + 1), 0),)
    for ch in Channel:
        start = None
        for tick, mask in il.instructions + sentinel:
            on = bool(mask & ch)
            if on and start is None:
                start = tick
            elif not on and start is not None:
                segs.append(Segment(ch, start * il.grid, (tick - start) * il.grid))
                start = None
    return PulseProgram(tuple(segs), il.repeat_count, metadata={"span_ns": il.total_ticks * il.grid})


def quantization_errors(program, il) -> np.ndarray:
    """Signed error (quantized minus requested, ns) of every ON-segment edge."""
    out = []
    for s in program.on_segments():
        for t in (s.start, s.end):
            out.append(_to_tick(t, il.grid) * il.grid - t)
    return np.asarray(out, dtype=float)


def write_instructions(path, il):
    """Text export: ``grid_ns=<grid>`` then one ``tick<TAB>mask-hex`` line per instruction.

    Mask bit 0 is LASER, bit 1 MW, bit 2 CAMERA.
    """
    with open(path, "w") as fh:
        fh.write(f"grid_ns={il.grid:g}\n")
        for tick, mask in il.instructions:
            fh.write(f"{tick}\t{mask:x}\n")


def read_instructions(path) -> InstructionList:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("grid_ns="):
        raise ValueError(f"{path}: missing grid_ns header")
    grid = float(lines[0].split("=", 1)[1])
    instructions = []
    for ln in lines[1:]:
        tick, mask = ln.split("\t")
        instructions.append((int(tick), int(mask, 16)))
    total = instructions[-1][0] if instructions else 0
    return InstructionList(grid, tuple(instructions), total)
