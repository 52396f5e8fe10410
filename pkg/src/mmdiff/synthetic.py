"""Synthetic multimodal series: calendar seasonality, AR(1) noise, and announced level shifts.

Each level shift is announced by a short text report that ends 1-3 intervals
before the shift starts, so the text stream carries information about the
future that the history alone does not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import FREQUENCIES, Report, SeriesFrame, format_timestamp, parse_timestamp, shift
from .encoders import calendar_features
from .errors import ConfigError

SURGE_TEMPLATES = ("surge expected", "sharp increase expected", "demand spike expected")
DECLINE_TEMPLATES = ("decline expected", "sharp drop expected", "demand slump expected")


@dataclass(frozen=True)
class SyntheticSpec:
    length: int = 800
    freq: str = "weekly"
    start: str = "2000-01-03"
    channels: int = 1
    seasonal_amplitude: float = 1.0
    noise_std: float = 0.3
    ar_coef: float = 0.6
    event_rate: float = 0.05
    event_magnitude: float = 2.0
    event_duration: int = 8
    lead_min: int = 1
    lead_max: int = 3

    def __post_init__(self):
        if self.length < 2:
            raise ConfigError("synthetic length must be >= 2")
        if self.freq not in FREQUENCIES:
            raise ConfigError(f"frequency must be one of {FREQUENCIES}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.noise_std < 0 or self.seasonal_amplitude < 0 or self.event_magnitude < 0:
            raise ConfigError("amplitude, noise std and event magnitude must be >= 0")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ConfigError("event rate must lie in [0, 1]")
        if not -1.0 < self.ar_coef < 1.0:
            raise ConfigError("AR coefficient must lie in (-1, 1)")
        if self.event_duration < 1 or not 1 <= self.lead_min <= self.lead_max:
            raise ConfigError("need event_duration >= 1 and 1 <= lead_min <= lead_max")
        parse_timestamp(self.start)


@dataclass(frozen=True)
class Event:
    onset: int
    magnitude: float
    duration: int
    lead: int
    report_index: int

    def as_dict(self) -> dict:
        return {"onset": self.onset, "magnitude": self.magnitude, "duration": self.duration,
                "lead": self.lead, "report_index": self.report_index}


def seasonal_component(dates, amplitude: float, channels: int = 1) -> np.ndarray:
    """Sinusoid locked to position within the calendar year; channel ``c`` is phase-shifted by ``c/channels`` of a year."""
    base = np.array([math.atan2(f[4], f[5]) for f in map(calendar_features, dates)])
    phase = 2 * math.pi * np.arange(channels) / channels
    return amplitude * np.sin(base[:, None] + phase[None, :])


def event_component(length: int, events: list[Event], channels: int = 1) -> np.ndarray:
    out = np.zeros((length, channels))
    for e in events:
        out[e.onset : e.onset + e.duration] += e.magnitude
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> tuple[SeriesFrame, list[Report], list[Event]]:
    rng = np.random.default_rng([seed, 7])
    t0 = parse_timestamp(spec.start)
    dates = [shift(t0, spec.freq, i) for i in range(spec.length)]
    seasonal = seasonal_component(dates, spec.seasonal_amplitude, spec.channels)

    noise = np.zeros((spec.length, spec.channels))
    if spec.noise_std > 0:
        innov = rng.standard_normal((spec.length, spec.channels)) * spec.noise_std * math.sqrt(1 - spec.ar_coef**2)
        noise[0] = rng.standard_normal(spec.channels) * spec.noise_std
        for i in range(1, spec.length):
            noise[i] = spec.ar_coef * noise[i - 1] + innov[i]

    events: list[Event] = []
    reports: list[Report] = []
    draws = rng.random(spec.length)
    signs = rng.random(spec.length) < 0.5
    leads = rng.integers(spec.lead_min, spec.lead_max + 1, size=spec.length)
    templates = rng.integers(0, len(SURGE_TEMPLATES), size=spec.length)
    for i in range(spec.length):
        if draws[i] >= spec.event_rate or i - leads[i] < 0:
            continue
        mag = spec.event_magnitude * (1.0 if signs[i] else -1.0)
        end_idx = i - int(leads[i])
        text = (SURGE_TEMPLATES if mag > 0 else DECLINE_TEMPLATES)[templates[i]]
        reports.append(Report(dates[max(end_idx - 1, 0)], dates[end_idx], text, len(reports)))
        events.append(Event(i, mag, spec.event_duration, int(leads[i]), len(reports) - 1))

    values = seasonal + noise + event_component(spec.length, events, spec.channels)
    names = [f"value_{c}" if spec.channels > 1 else "value" for c in range(spec.channels)]
    frame = SeriesFrame([format_timestamp(d) for d in dates], values, names, spec.freq, dates=dates)
    reports.sort(key=lambda r: (r.start, r.end))
    return frame, reports, events
