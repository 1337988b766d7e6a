"""Prompt variants understood by the victim model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

from .errors import ContractError


@dataclass(frozen=True)
class Point:
    row: int
    col: int

    def check(self, size: int) -> None:
        if not (0 <= self.row < size and 0 <= self.col < size):
            raise ContractError(f"point {self} outside a {size}x{size} image")


@dataclass(frozen=True)
class Box:
    """Inclusive pixel box: rows r0..r1, columns c0..c1."""

    r0: int
    c0: int
    r1: int
    c1: int

    def check(self, size: int) -> None:
        if self.r0 > self.r1 or self.c0 > self.c1:
            raise ContractError(f"degenerate box {self}")
        Point(self.r0, self.c0).check(size)
        Point(self.r1, self.c1).check(size)

    def contains(self, other: "Box") -> bool:
        return (self.r0 <= other.r0 and self.c0 <= other.c0
                and self.r1 >= other.r1 and self.c1 >= other.c1)


@dataclass(frozen=True)
class MultiPoint:
    points: Tuple[Point, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ContractError("MultiPoint needs at least one point")

    def check(self, size: int) -> None:
        for p in self.points:
            p.check(size)


@dataclass(frozen=True)
class Everything:
    grid: int = 8

    def check(self, size: int) -> None:
        if self.grid < 2:
            raise ContractError(f"everything-mode grid must be >= 2, got {self.grid}")


Prompt = Union[Point, Box, MultiPoint, Everything]


def prompt_to_dict(p: Prompt) -> dict:
    if isinstance(p, Point):
        return {"type": "point", "row": p.row, "col": p.col}
    if isinstance(p, Box):
        return {"type": "box", "r0": p.r0, "c0": p.c0, "r1": p.r1, "c1": p.c1}
    if isinstance(p, MultiPoint):
        return {"type": "multipoint", "points": [[q.row, q.col] for q in p.points]}
    return {"type": "everything", "grid": p.grid}
