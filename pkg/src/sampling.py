"""Per-round client sampling."""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

_logger = logging.getLogger(__name__)

SamplingMode = Literal["fixed", "bernoulli"]


class SamplingPolicy(BaseModel):
    """How S_k is drawn each round.

    ``fixed`` draws ``size`` distinct clients uniformly (each client then has
    inclusion probability size/p); ``bernoulli`` includes client i
    independently with probability ``probs[i]``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: SamplingMode = "fixed"
    size: int | None = Field(10, ge=1)
    probs: list[float] | None = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_mode(self) -> SamplingPolicy:
        if self.mode == "fixed" and self.size is None:
            raise ValueError("fixed-size sampling needs 'size'")
        if self.mode == "bernoulli":
            if not self.probs:
                raise ValueError("bernoulli sampling needs 'probs'")
            if any(not 0.0 < q <= 1.0 for q in self.probs):
                raise ValueError("every inclusion probability must lie in (0, 1]")
        return self

    def validate_for(self, p: int) -> None:
        """Check the policy against the client count of a run."""
        if self.mode == "fixed" and not 1 <= (self.size or 0) <= p:
            raise ValueError(f"sample size {self.size} outside [1, {p}]")
        if self.mode == "bernoulli" and len(self.probs or []) != p:
            raise ValueError(f"expected {p} inclusion probabilities, got {len(self.probs or [])}")

    def inclusion_probabilities(self, p: int) -> np.ndarray:
        if self.mode == "fixed":
            return np.full(p, (self.size or 0) / p)
        return np.asarray(self.probs, dtype=np.float64)


def sample_clients(policy: SamplingPolicy, p: int, round: int) -> np.ndarray:
    """Sorted client indices S_k for ``round``; a pure function of (seed, round)."""
    rng = np.random.default_rng([policy.seed, round])
    if policy.mode == "fixed":
        size = policy.size or p
        if size >= p:
            return np.arange(p)
        return np.sort(rng.choice(p, size=size, replace=False))

    probs = policy.inclusion_probabilities(p)
    while True:
        picked = np.flatnonzero(rng.random(p) < probs)
        if picked.size:
            return picked
        _logger.warning("Round %d: empty Bernoulli sample, drawing again", round)
