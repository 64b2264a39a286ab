"""Synthetic fNIRS-like sessions with planted pain-response profiles.

A session is a baseline segment followed by a shuffled train of painful
(rating 7) and innocuous (rating 3) stimuli. Painful stimuli add a
gamma-shaped hemodynamic bump to the channels a profile weights; innocuous
ones add a scaled-down copy. Noise is AR(1) plus a cardiac sinusoid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .ingest import PAIN_RATING, Session, atomic_write_text, write_session

INNOCUOUS_RATING = 3
N_CHANNELS = 24
INFORMATIVE_BLOCK = tuple(range(8, 16))  # channels 9-16
DEFAULT_COHORT_SIZE = 38


@dataclass(frozen=True)
class NoiseSpec:
    ar1_coeff: float = 0.98
    noise_sd: float = 0.5
    cardiac_hz: float = 1.1
    cardiac_amp: float = 0.3

    def __post_init__(self):
        if not 0 <= self.ar1_coeff < 1:
            raise ValueError("AR(1) coefficient must lie in [0, 1)")
        if self.noise_sd < 0 or self.cardiac_amp < 0:
            raise ValueError("noise amplitudes must be nonnegative")


@dataclass(frozen=True)
class ProfileSpec:
    profile_id: str
    channel_gain: tuple[float, ...]
    response_peak_s: float = 6.0
    response_width_s: float = 4.0
    amplitude: float = 1.0
    noise: NoiseSpec = NoiseSpec()
    innocuous_scale: float = 0.3
    session_jitter: float = 0.1  # relative sd of the per-session amplitude

    def __post_init__(self):
        gain = tuple(float(g) for g in self.channel_gain)
        object.__setattr__(self, "channel_gain", gain)
        if any(g < 0 for g in gain) or not any(g > 0 for g in gain):
            raise ValueError(f"profile {self.profile_id}: gains must be >= 0 with at least one positive")
        if not (self.response_peak_s > 0 and self.response_width_s > 0):
            raise ValueError(f"profile {self.profile_id}: peak and width must be positive")


def hemodynamic_bump(t, peak_s: float, width_s: float, amplitude: float) -> np.ndarray:
    """Gamma-density shaped response, zero for ``t <= 0``, maximal (= amplitude) at ``peak_s``.

    The shape ``k`` and scale are set so that the mode is ``peak_s`` and the
    standard deviation of the density is ``width_s``; peak 6 s with width 4 s
    gives ``k = 4``.
    """
    if not (peak_s > 0 and width_s > 0):
        raise ValueError("peak and width must be positive")
    t = np.asarray(t, dtype=float)
    ratio = peak_s / width_s
    k = ((ratio + math.sqrt(ratio**2 + 4)) / 2) ** 2
    u = np.where(t > 0, t / peak_s, 1.0)
    shape = np.exp((k - 1) * (np.log(u) - u + 1))
    return amplitude * np.where(t > 0, shape, 0.0)


def ar1_noise(rng: np.random.Generator, n: int, n_channels: int, coeff: float, sd: float) -> np.ndarray:
    """Stationary AR(1) series with marginal standard deviation ``sd``."""
    if sd == 0:
        return np.zeros((n_channels, n))
    innov = rng.standard_normal((n_channels, n)) * sd * math.sqrt(1 - coeff**2)
    innov[:, 0] = rng.standard_normal(n_channels) * sd
    return signal.lfilter([1.0], [1.0, -coeff], innov, axis=1)


def generate_session(
    profile: ProfileSpec,
    n_pain_events: int = 6,
    n_innocuous_events: int = 6,
    seed: int = 0,
    session_id: str = "s00",
    subject_id: str = "",
    sample_rate_hz: float = 25.0,
    baseline_s: float = 120.0,
    gap_s: float = 10.0,
    onset_spacing_s: float = 30.0,
    tail_s: float = 30.0,
) -> Session:
    """One recording: baseline, then stimuli every ``onset_spacing_s`` seconds.

    Onset spacing defaults to a 5 s stimulus plus 25 s of rest.
    """
    rng = np.random.default_rng(seed)
    M = len(profile.channel_gain)
    ratings = np.array([PAIN_RATING] * n_pain_events + [INNOCUOUS_RATING] * n_innocuous_events)
    ratings = rng.permutation(ratings)
    first = baseline_s + gap_s
    onsets = first + onset_spacing_s * np.arange(len(ratings))
    duration = (onsets[-1] if len(onsets) else first) + tail_s
    n = int(round(duration * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz

    amp = profile.amplitude * (1 + profile.session_jitter * rng.standard_normal())
    gain = np.asarray(profile.channel_gain)
    clean = np.zeros(n)
    for onset, rating in zip(onsets, ratings):
        scale = 1.0 if rating == PAIN_RATING else profile.innocuous_scale
        clean += scale * hemodynamic_bump(t - onset, profile.response_peak_s, profile.response_width_s, amp)
    x = gain[:, None] * clean[None, :]

    nz = profile.noise
    x = x + ar1_noise(rng, n, M, nz.ar1_coeff, nz.noise_sd)
    if nz.cardiac_amp > 0:
        phase = rng.uniform(0, 2 * np.pi, size=(M, 1))
        x = x + nz.cardiac_amp * np.sin(2 * np.pi * nz.cardiac_hz * t[None, :] + phase)

    return Session(
        id=session_id,
        sample_rate_hz=sample_rate_hz,
        channels=x,
        events=tuple((float(o), int(r)) for o, r in zip(onsets, ratings)),
        baseline_span_s=(0.0, baseline_s),
        subject_id=subject_id or session_id,
    )


def block_gain(channels, n_channels: int = N_CHANNELS, value: float = 1.0) -> tuple[float, ...]:
    g = np.zeros(n_channels)
    g[list(channels)] = value
    return tuple(g)


def default_profiles(noise: NoiseSpec = NoiseSpec(), amplitude: float = 1.0) -> list[ProfileSpec]:
    """Three profiles whose responsive channels are different parts of channels 9-16."""
    return [
        ProfileSpec("A", block_gain(range(8, 11)), 5.0, 10 / 3, amplitude, noise),
        ProfileSpec("B", block_gain(range(13, 16)), 9.0, 4.0, amplitude, noise),
        ProfileSpec("C", block_gain(range(10, 14)), 7.0, 5.0, amplitude, noise),
    ]


def split_counts(total: int, n_groups: int) -> list[int]:
    base, extra = divmod(total, n_groups)
    return [base + (i < extra) for i in range(n_groups)]


@dataclass
class Cohort:
    sessions: list
    truth: dict  # session_id -> profile_id
    profiles: list = field(default_factory=list)


def generate_cohort(
    profiles: list[ProfileSpec] | None = None,
    sessions_per_profile: list[int] | None = None,
    seed: int = 0,
    n_sessions: int = DEFAULT_COHORT_SIZE,
    **session_kwargs,
) -> Cohort:
    """Sessions for each profile (38 split as evenly as possible by default)."""
    profiles = default_profiles() if profiles is None else list(profiles)
    if not profiles:
        raise ValueError("need at least one profile")
    counts = sessions_per_profile or split_counts(n_sessions, len(profiles))
    if len(counts) != len(profiles):
        raise ValueError("sessions_per_profile must have one entry per profile")
    seeds = np.random.SeedSequence(seed).spawn(sum(counts))
    sessions, truth = [], {}
    # interleave profiles so session order carries no profile information
    plan = []
    for p, c in zip(profiles, counts):
        plan += [p] * c
    order = np.random.default_rng(seed).permutation(len(plan))
    for idx, j in enumerate(order):
        profile = plan[j]
        sid = f"s{idx + 1:02d}"
        s = generate_session(profile, seed=int(seeds[idx].generate_state(1)[0]), session_id=sid, **session_kwargs)
        sessions.append(s)
        truth[sid] = profile.profile_id
    return Cohort(sessions, truth, profiles)


def write_cohort(cohort: Cohort, directory, header_comment: str | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [write_session(s, directory, header_comment) for s in cohort.sessions]
    lines = [f"# {header_comment}"] if header_comment else []
    lines.append("session_id,true_profile")
    lines += [f"{sid},{pid}" for sid, pid in cohort.truth.items()]
    atomic_write_text(directory / "ground_truth.csv", "\n".join(lines) + "\n")
    return paths


def with_noise(profiles, **noise_changes) -> list[ProfileSpec]:
    return [replace(p, noise=replace(p.noise, **noise_changes)) for p in profiles]
