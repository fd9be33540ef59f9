from __future__ import annotations

import enum


class Label(str, enum.Enum):
    """Subject class. PD is the positive class everywhere in the package."""

    CONTROL = "CONTROL"
    PD = "PD"

    @property
    def positive(self) -> bool:
        return self is Label.PD

    @property
    def target(self) -> int:
        return int(self is Label.PD)

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        text = str(value).strip().upper()
        if text in ("1", "PD", "POS", "POSITIVE"):
            return cls.PD
        if text in ("0", "CONTROL", "NC", "NEG", "NEGATIVE", "NORMAL", "HC"):
            return cls.CONTROL
        raise ValueError(f"unknown label {value!r}")


LABELS = (Label.CONTROL, Label.PD)
