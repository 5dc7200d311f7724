"""Slot values, templates, and facts: the data model the rest of the system stores.

A slot holds exactly one of four value kinds: Symbol (unquoted identifier such
as a location code), Text (quoted string), Integer (epoch milliseconds and
other counts), or Float. Identity is type-strict throughout: Integer 20 and
Float 20.0 are different values, and so are Symbol 730 and Text "730".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Mapping


class KbError(Exception):
    """Base class for everything this package raises on purpose."""


class DuplicateTemplate(KbError):
    pass


class DuplicateSlot(KbError):
    pass


class UnknownTemplate(KbError):
    pass


class UnknownSlot(KbError):
    pass


@dataclass(frozen=True, slots=True)
class Symbol:
    """Unquoted identifier: location codes, the nil filler, bare words."""

    name: str

    def __str__(self) -> str:
        return self.name

    def __repr__(self) -> str:
        return self.name


NIL = Symbol("nil")

# SlotValue = Symbol | str | int | float; bool is not a slot value even though
# Python treats it as an int subtype (value_key rejects it via exact type check).
SlotValue = Symbol | str | int | float


def value_key(v: SlotValue) -> tuple:
    """Hashable identity key for a slot value.

    Kind tag first so Symbol/Text and Integer/Float never collide; floats are
    compared bitwise (so -0.0 != 0.0 and nan == nan, which keeps the engine's
    set semantics total).
    """
    t = type(v)
    if t is Symbol:
        return ("s", v.name)
    if t is str:
        return ("t", v)
    if t is int:
        return ("i", v)
    if t is float:
        return ("f", struct.pack(">d", v))
    raise TypeError(f"not a slot value: {v!r}")


def is_slot_value(v: object) -> bool:
    return type(v) in (Symbol, str, int, float)


def values_equal(a: SlotValue, b: SlotValue) -> bool:
    """Type-strict equality; the relation behind eq/neq and duplicate detection."""
    return value_key(a) == value_key(b)


@dataclass(frozen=True, slots=True)
class Template:
    """A named fact shape: ordered, distinct slot names."""

    name: str
    slots: tuple[str, ...]

    def has_slot(self, slot: str) -> bool:
        return slot in self.slots


class TemplateRegistry:
    """Templates of one knowledge base, unique by name, insertion-ordered."""

    def __init__(self) -> None:
        self._by_name: dict[str, Template] = {}

    def define(self, name: str, slots: list[str] | tuple[str, ...]) -> Template:
        if name in self._by_name:
            raise DuplicateTemplate(f"template {name} is already defined")
        if not slots:
            raise KbError(f"template {name} needs at least one slot")
        seen: set[str] = set()
        for s in slots:
            if s in seen:
                raise DuplicateSlot(f"template {name} repeats slot {s}")
            seen.add(s)
        t = Template(name, tuple(slots))
        self._by_name[name] = t
        return t

    def get(self, name: str) -> Template:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownTemplate(f"unknown template {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self) -> Iterator[Template]:
        return iter(self._by_name.values())

    def __len__(self) -> int:
        return len(self._by_name)


class Fact:
    """One immutable fact. `id` is None until the engine asserts it.

    `key` is the precomputed identity of (template, slot values) used for
    duplicate detection; it deliberately ignores `id`.
    """

    __slots__ = ("id", "template", "values", "key")

    def __init__(self, template: Template, values: dict[str, SlotValue], id: int | None = None):
        self.id = id
        self.template = template
        self.values = values
        self.key = (template.name, tuple(value_key(values[s]) for s in template.slots))

    def value(self, slot: str) -> SlotValue:
        try:
            return self.values[slot]
        except KeyError:
            raise UnknownSlot(f"template {self.template.name} has no slot {slot}") from None

    def __repr__(self) -> str:
        inner = " ".join(f"({s} {self.values[s]!r})" for s in self.template.slots)
        tag = f"f-{self.id}" if self.id is not None else "f-?"
        return f"<{tag} ({self.template.name} {inner})>"


def make_fact(template: Template, bindings: Mapping[str, SlotValue]) -> Fact:
    """Build an unasserted fact; unset slots are filled with the nil Symbol."""
    values: dict[str, SlotValue] = {}
    for slot in bindings:
        if slot not in template.slots:
            raise UnknownSlot(f"template {template.name} has no slot {slot}")
    for slot in template.slots:
        v = bindings.get(slot, NIL)
        if not is_slot_value(v):
            raise TypeError(f"slot {slot}: not a slot value: {v!r}")
        values[slot] = v
    return Fact(template, values)


def facts_equal(a: Fact, b: Fact) -> bool:
    """Same template and slot-wise identical values; ids are irrelevant."""
    return a.key == b.key
