"""Structured captions: subject slots (color, shape) and motion slots (direction, speed).

A caption is four categorical slots. Slots may be unset (None), which encodes to the
per-slot null token at index 0; that is also what condition dropout feeds the model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SHAPES = ("square", "circle", "triangle", "cross")
DIRECTIONS = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")
SPEEDS = (1, 2, 3)

NULL = "<null>"

SUBJECT_SLOTS = ("color", "shape")
MOTION_SLOTS = ("direction", "speed")
SLOTS = SUBJECT_SLOTS + MOTION_SLOTS

# screen coordinates: x right, y down, so N points to -y
DIRECTION_VECTORS = {
    "E": (1.0, 0.0),
    "NE": (np.sqrt(0.5), -np.sqrt(0.5)),
    "N": (0.0, -1.0),
    "NW": (-np.sqrt(0.5), -np.sqrt(0.5)),
    "W": (-1.0, 0.0),
    "SW": (-np.sqrt(0.5), np.sqrt(0.5)),
    "S": (0.0, 1.0),
    "SE": (np.sqrt(0.5), np.sqrt(0.5)),
}


@dataclass(frozen=True)
class CaptionTokens:
    """One structured caption; None leaves a slot unspecified."""

    color: str | None
    shape: str | None
    direction: str | None
    speed: int | None

    def __post_init__(self):
        if self.color is not None and self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape is not None and self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.speed is not None and self.speed not in SPEEDS:
            raise ValueError(f"unknown speed {self.speed!r}")

    @property
    def subject(self) -> tuple[str | None, str | None]:
        return (self.color, self.shape)

    @property
    def motion(self) -> tuple[str | None, int | None]:
        return (self.direction, self.speed)

    def with_subject(self, color: str | None = None, shape: str | None = None) -> "CaptionTokens":
        out = self
        if color is not None:
            out = replace(out, color=color)
        if shape is not None:
            out = replace(out, shape=shape)
        return out

    def without_motion(self) -> "CaptionTokens":
        return replace(self, direction=None, speed=None)

    def same_motion(self, other: "CaptionTokens") -> bool:
        return self.motion == other.motion

    def text(self) -> str:
        color = self.color or "any-color"
        shape = self.shape or "thing"
        if self.direction is None and self.speed is None:
            return f"{color} {shape}"
        direction = self.direction or "somewhere"
        speed = f"{self.speed}px/f" if self.speed is not None else "any speed"
        return f"{color} {shape} moving {direction} at {speed}"

    def to_dict(self) -> dict:
        return {"color": self.color, "shape": self.shape,
                "direction": self.direction, "speed": self.speed}

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionTokens":
        return cls(d.get("color"), d.get("shape"), d.get("direction"), d.get("speed"))


NULL_CAPTION = CaptionTokens(None, None, None, None)


class CaptionVocab:
    """Per-slot token tables; index 0 of every slot is the null token."""

    def __init__(self):
        self.slot_tokens = {
            "color": (NULL,) + COLORS,
            "shape": (NULL,) + SHAPES,
            "direction": (NULL,) + DIRECTIONS,
            "speed": (NULL,) + tuple(str(s) for s in SPEEDS),
        }
        self._index = {
            slot: {tok: i for i, tok in enumerate(tokens)}
            for slot, tokens in self.slot_tokens.items()
        }
        # offsets turn per-slot indices into one flat id space
        self.slot_offsets = {}
        off = 0
        for slot in SLOTS:
            self.slot_offsets[slot] = off
            off += len(self.slot_tokens[slot])
        self.total_tokens = off

    def slot_sizes(self) -> dict[str, int]:
        return {slot: len(tokens) for slot, tokens in self.slot_tokens.items()}

    def encode_slots(self, caption: CaptionTokens) -> tuple[int, int, int, int]:
        """Per-slot indices (0 = null) in slot order color, shape, direction, speed."""
        values = {
            "color": caption.color,
            "shape": caption.shape,
            "direction": caption.direction,
            "speed": None if caption.speed is None else str(caption.speed),
        }
        return tuple(
            0 if values[slot] is None else self._index[slot][values[slot]] for slot in SLOTS
        )

    def encode(self, caption: CaptionTokens) -> list[int]:
        """Flat token-id sequence, one id per slot, unique across slots."""
        return [
            idx + self.slot_offsets[slot]
            for slot, idx in zip(SLOTS, self.encode_slots(caption))
        ]

    def to_dict(self) -> dict:
        return {slot: list(tokens) for slot, tokens in self.slot_tokens.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionVocab":
        vocab = cls()
        if {k: list(v) for k, v in vocab.slot_tokens.items()} != {
            k: list(v) for k, v in d.items()
        }:
            raise ValueError("checkpoint vocabulary does not match this build")
        return vocab


def sample_subject_edit(
    caption: CaptionTokens,
    rng: np.random.Generator,
    slots: tuple[str, ...] = SUBJECT_SLOTS,
) -> CaptionTokens:
    """Draw an edited caption whose listed subject slots differ from the original.

    Motion slots are never touched.
    """
    bad = set(slots) - set(SUBJECT_SLOTS)
    if bad:
        raise ValueError(f"only subject slots can be edited, got {sorted(bad)}")
    edited = caption
    if "color" in slots:
        pool = [c for c in COLORS if c != caption.color]
        edited = edited.with_subject(color=pool[int(rng.integers(len(pool)))])
    if "shape" in slots:
        pool = [s for s in SHAPES if s != caption.shape]
        edited = edited.with_subject(shape=pool[int(rng.integers(len(pool)))])
    return edited
