"""Sliding-window majority vote over per-frame verdicts.

A window of capacity T keeps the T+1 most recent verdicts for frames that
contained the tracked object (the current frame plus up to T past ones).
Frames where the object is absent are gated out: they neither vote nor age
the window. The stream verdict is adversarial iff the (weighted) mean of the
stored verdicts is at least 0.5; ties alarm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class _Absent:
    __slots__ = ()

    def __repr__(self):
        return "ABSENT"


ABSENT = _Absent()

ALL = None  # capacity sentinel: unbounded window


@dataclass(frozen=True)
class StreamVerdict:
    value: str  # "adversarial" | "clean" | "absent"
    s: float | None = None

    def __post_init__(self):
        if self.value not in ("adversarial", "clean", "absent"):
            raise ValueError(f"bad stream verdict {self.value!r}")
        if (self.s is None) != (self.value == "absent"):
            raise ValueError("vote fraction s present iff the object was present")


@dataclass(frozen=True)
class WindowState:
    """Immutable vote window; step() returns the successor state."""

    capacity: int | None = ALL  # T; ALL means unbounded
    votes: tuple = ()
    weights: tuple = ()
    seen: int = 0  # present frames observed so far

    def __post_init__(self):
        if self.capacity is not ALL and self.capacity < 0:
            raise ValueError("capacity must be >= 0 or ALL")
        if len(self.votes) != len(self.weights):
            raise ValueError("votes and weights must align")

    def step(self, verdict, weight: float = 1.0):
        """Advance by one frame; verdict is 0, 1, or ABSENT.

        Returns (next state, StreamVerdict for this frame).
        """
        if verdict is ABSENT:
            return self, StreamVerdict("absent")
        if verdict not in (0, 1):
            raise ValueError(f"frame verdict must be 0, 1 or ABSENT, got {verdict!r}")
        if not (math.isfinite(weight) and weight > 0):
            raise ValueError("weight must be finite and > 0")
        votes = self.votes + (int(verdict),)
        weights = self.weights + (float(weight),)
        if self.capacity is not ALL and len(votes) > self.capacity + 1:
            votes = votes[-(self.capacity + 1) :]
            weights = weights[-(self.capacity + 1) :]
        total_w = sum(weights)
        s = sum(v * w for v, w in zip(votes, weights)) / total_w
        state = WindowState(self.capacity, votes, weights, self.seen + 1)
        value = "adversarial" if s >= 0.5 else "clean"
        return state, StreamVerdict(value, s)


def replay(stream, capacity=ALL):
    """Fold step() over a whole verdict stream; pure batch form."""
    state = WindowState(capacity=capacity)
    out = []
    for verdict in stream:
        state, sv = state.step(verdict)
        out.append(sv)
    return out
