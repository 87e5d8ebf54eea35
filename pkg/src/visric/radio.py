"""Two-level SNR source driven by scene ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .scene import SceneConfig, blocked_at


@dataclass(frozen=True)
class RadioConfig:
    sample_period_ms: int = 10
    snr_los_db: float = 28.0
    blockage_loss_db: float = 10.0
    noise_sigma_db: float = 1.5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_period_ms < 1:
            raise ValueError("sample_period_ms must be >= 1")
        if self.blockage_loss_db < 0:
            raise ValueError("blockage_loss_db must be >= 0")
        if self.noise_sigma_db < 0:
            raise ValueError("noise_sigma_db must be >= 0")

    @property
    def sample_period_ns(self) -> int:
        return self.sample_period_ms * 1_000_000

    @classmethod
    def from_dict(cls, d: dict) -> "RadioConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def make_rng(config: RadioConfig) -> np.random.Generator:
    return np.random.default_rng(config.rng_seed)


def sample_snr(config: RadioConfig, time_s: float, blocked: bool, rng: np.random.Generator) -> int:
    """One SNR sample in centi-dB.

    A standard normal is drawn on every call, even with zero noise, so the
    stream position depends only on the number of calls.
    """
    z = rng.standard_normal()
    snr = config.snr_los_db - (config.blockage_loss_db if blocked else 0.0) + config.noise_sigma_db * z
    return int(round(snr * 100.0))


def sample_count(duration_s: float, sample_period_ms: int) -> int:
    # integer milliseconds keep 0.2 s / 10 ms == 20 exact
    return int(round(duration_s * 1000)) // sample_period_ms


class RadioModel:
    """Deterministic SNR stream for one UE of a scene."""

    def __init__(self, config: RadioConfig, scene: SceneConfig | None = None):
        self.config = config
        self.scene = scene
        self.rng = make_rng(config)

    def blocked(self, time_s: float) -> bool:
        return self.scene is not None and blocked_at(self.scene, time_s)

    def samples(self, duration_s: float) -> Iterator[tuple[int, int]]:
        """Yield (sample_time_ns, snr_centi_db) over ``duration_s`` seconds."""
        period_ns = self.config.sample_period_ns
        for j in range(sample_count(duration_s, self.config.sample_period_ms)):
            t_ns = j * period_ns
            t = t_ns / 1e9
            yield t_ns, sample_snr(self.config, t, self.blocked(t), self.rng)
