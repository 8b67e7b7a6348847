"""Constraint language: DSL parsing, English templates, exact costs and ground-truth masks.

The DSL is::

    budget(entity=lava, max=5)
    relation(entity=water, distance=2[, max=0])
    sequence(trigger=grass, forbidden=water[, max=0])
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .env import (
    COST_ENTITIES,
    ENTITY_BY_NAME,
    ENTITY_NAMES,
    Entity,
    EpisodeState,
)

MAX_THRESHOLD = 5


class ConstraintError(ValueError):
    pass


class ConstraintSyntaxError(ConstraintError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ConstraintSemanticError(ConstraintError):
    pass


def _cost_entity(value) -> Entity:
    if isinstance(value, str):
        if value.lower() not in ENTITY_BY_NAME:
            raise ConstraintSemanticError(f"unknown entity {value!r}")
        value = ENTITY_BY_NAME[value.lower()]
    kind = Entity(value)
    if kind not in COST_ENTITIES:
        raise ConstraintSemanticError(f"{ENTITY_NAMES[kind]!r} is not a cost entity")
    return kind


def _check_threshold(h: int) -> int:
    if not 0 <= h <= MAX_THRESHOLD:
        raise ConstraintSemanticError(f"threshold {h} outside [0, {MAX_THRESHOLD}]")
    return int(h)


@dataclass(frozen=True)
class Budgetary:
    entity: Entity
    h_C: int

    def __post_init__(self):
        object.__setattr__(self, "entity", _cost_entity(self.entity))
        object.__setattr__(self, "h_C", _check_threshold(self.h_C))


@dataclass(frozen=True)
class Relational:
    entity: Entity
    distance: int
    h_C: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entity", _cost_entity(self.entity))
        if self.distance < 1:
            raise ConstraintSemanticError(f"distance must be >= 1, got {self.distance}")
        object.__setattr__(self, "h_C", _check_threshold(self.h_C))


@dataclass(frozen=True)
class Sequential:
    trigger: Entity
    forbidden: Entity
    h_C: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trigger", _cost_entity(self.trigger))
        object.__setattr__(self, "forbidden", _cost_entity(self.forbidden))
        if self.trigger == self.forbidden:
            raise ConstraintSemanticError("trigger and forbidden entity must differ")
        object.__setattr__(self, "h_C", _check_threshold(self.h_C))


ConstraintSpec = Union[Budgetary, Relational, Sequential]

VARIANT_NAMES = {Budgetary: "budget", Relational: "relation", Sequential: "sequence"}


def variant_name(spec: ConstraintSpec) -> str:
    return VARIANT_NAMES[type(spec)]


# --------------------------------------------------------------------------- DSL

_TOKEN_RE = re.compile(r"\s*(?:(?P<int>\d+)|(?P<ident>[A-Za-z_]+)|(?P<punct>[(),=]))")


def _lex(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ConstraintSyntaxError(f"unexpected character {text[start]!r}", _byte_offset(text, start))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _lex(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def error(self, message: str):
        raise ConstraintSyntaxError(message, _byte_offset(self.text, self.peek()[2]))

    def expect_punct(self, ch: str):
        kind, value, _ = self.peek()
        if kind != "punct" or value != ch:
            self.error(f"expected {ch!r}, found {value or 'end of input'!r}")
        self.i += 1

    def expect_keyword(self, word: str):
        kind, value, _ = self.peek()
        if kind != "ident" or value.lower() != word:
            self.error(f"expected {word!r}, found {value or 'end of input'!r}")
        self.i += 1

    def ident(self) -> str:
        kind, value, _ = self.peek()
        if kind != "ident":
            self.error(f"expected a name, found {value or 'end of input'!r}")
        self.i += 1
        return value.lower()

    def integer(self) -> int:
        kind, value, _ = self.peek()
        if kind != "int":
            self.error(f"expected an integer, found {value or 'end of input'!r}")
        self.i += 1
        return int(value)

    def field(self, name: str, value_kind: str):
        self.expect_keyword(name)
        self.expect_punct("=")
        return self.ident() if value_kind == "entity" else self.integer()

    def optional_max(self) -> int:
        kind, value, _ = self.peek()
        if kind == "punct" and value == ",":
            self.i += 1
            return self.field("max", "int")
        return 0

    def constraint(self) -> ConstraintSpec:
        head = self.ident()
        if head not in ("budget", "relation", "sequence"):
            self.i -= 1
            self.error(f"unknown constraint kind {head!r}")
        self.expect_punct("(")
        if head == "budget":
            entity = self.field("entity", "entity")
            self.expect_punct(",")
            h = self.field("max", "int")
            self.expect_punct(")")
            result = lambda: Budgetary(entity, h)
        elif head == "relation":
            entity = self.field("entity", "entity")
            self.expect_punct(",")
            dist = self.field("distance", "int")
            h = self.optional_max()
            self.expect_punct(")")
            result = lambda: Relational(entity, dist, h)
        else:
            trig = self.field("trigger", "entity")
            self.expect_punct(",")
            forb = self.field("forbidden", "entity")
            h = self.optional_max()
            self.expect_punct(")")
            result = lambda: Sequential(trig, forb, h)
        if self.peek()[0] != "eof":
            self.error("trailing input")
        # semantic checks run only after the whole text parsed cleanly
        return result()


def parse_constraint(text) -> ConstraintSpec:
    if isinstance(text, ConstraintText):
        text = text.text
    return _Parser(text).constraint()


def to_dsl(spec: ConstraintSpec) -> str:
    """Canonical DSL string; ``parse_constraint(to_dsl(s)) == s``."""
    if isinstance(spec, Budgetary):
        return f"budget(entity={ENTITY_NAMES[spec.entity]}, max={spec.h_C})"
    extra = f", max={spec.h_C}" if spec.h_C else ""
    if isinstance(spec, Relational):
        return f"relation(entity={ENTITY_NAMES[spec.entity]}, distance={spec.distance}{extra})"
    return (
        f"sequence(trigger={ENTITY_NAMES[spec.trigger]}, "
        f"forbidden={ENTITY_NAMES[spec.forbidden]}{extra})"
    )


# --------------------------------------------------------------------- templates

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")
_WORD_RE = re.compile(r"[a-z]+|\d+")


def tokenize(text: str) -> List[str]:
    """Lowercase word/digit tokens; number words zero..five become digits."""
    out = []
    for tok in _WORD_RE.findall(text.lower()):
        if tok in NUMBER_WORDS:
            tok = str(NUMBER_WORDS.index(tok))
        out.append(tok)
    return out


@dataclass(frozen=True)
class ConstraintText:
    text: str
    template_id: Optional[int] = None

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("constraint text must be non-empty")

    @property
    def tokens(self) -> List[str]:
        return tokenize(self.text)


@dataclass(frozen=True)
class TemplateBank:
    templates: Dict[str, Tuple[str, ...]]
    heldout: Dict[str, frozenset]

    @classmethod
    def parse(cls, source: str) -> "TemplateBank":
        train: Dict[str, List[str]] = {}
        held: Dict[str, List[str]] = {}
        target, variant = train, None
        for raw in source.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("%%"):
                if line[2:].strip() != "heldout":
                    raise ValueError(f"unknown marker {line!r}")
                target = held
                variant = None
            elif line.startswith("@"):
                variant = line[1:].strip()
                if variant not in VARIANT_NAMES.values():
                    raise ValueError(f"unknown template variant {variant!r}")
                target.setdefault(variant, [])
            else:
                if variant is None:
                    raise ValueError(f"template outside a variant block: {line!r}")
                target[variant].append(line)
        templates, heldout = {}, {}
        for v in VARIANT_NAMES.values():
            a, b = train.get(v, []), held.get(v, [])
            templates[v] = tuple(a + b)
            heldout[v] = frozenset(range(len(a), len(a) + len(b)))
        return cls(templates, heldout)

    def ids(self, variant: str, split: str = "all") -> List[int]:
        n = len(self.templates[variant])
        if split == "all":
            return list(range(n))
        if split == "train":
            return [i for i in range(n) if i not in self.heldout[variant]]
        if split in ("heldout", "eval"):
            return sorted(self.heldout[variant])
        raise ValueError(f"unknown split {split!r}")


@lru_cache(maxsize=1)
def default_bank() -> TemplateBank:
    source = resources.files("safegrid").joinpath("templates.txt").read_text(encoding="utf-8")
    return TemplateBank.parse(source)


def _number(n: int, word: bool) -> str:
    return NUMBER_WORDS[n] if word and 0 <= n < len(NUMBER_WORDS) else str(n)


def render_template(spec: ConstraintSpec, template_id: int, bank: Optional[TemplateBank] = None) -> ConstraintText:
    bank = bank or default_bank()
    variant = variant_name(spec)
    options = bank.templates[variant]
    if not 0 <= template_id < len(options):
        raise KeyError(f"no {variant} template with id {template_id}")
    slots = {}
    if isinstance(spec, Budgetary):
        slots = dict(entity=ENTITY_NAMES[spec.entity], n=_number(spec.h_C, False), n_word=_number(spec.h_C, True))
    elif isinstance(spec, Relational):
        slots = dict(
            entity=ENTITY_NAMES[spec.entity], n=_number(spec.distance, False), n_word=_number(spec.distance, True)
        )
    else:
        slots = dict(trigger=ENTITY_NAMES[spec.trigger], forbidden=ENTITY_NAMES[spec.forbidden])
    text = options[template_id].format(**slots)
    return ConstraintText(text[0].upper() + text[1:], template_id)


# ------------------------------------------------------------------------- costs

def _within(cells: np.ndarray, pos, kind: Entity, radius: int) -> bool:
    rows, cols = np.nonzero(cells == kind)
    if rows.size == 0:
        return False
    return int(np.min(np.abs(rows - pos[0]) + np.abs(cols - pos[1]))) <= radius


def step_cost(prev_state: EpisodeState, action: int, next_state: EpisodeState, spec: ConstraintSpec) -> int:
    """Cost (0 or 1) of the transition ``prev_state -> next_state``.

    Entry-type costs (budgetary, sequential) are charged only when the agent
    changes cell; relational cost is charged every step spent inside the radius.
    """
    pos = next_state.agent_pos
    moved = tuple(pos) != tuple(prev_state.agent_pos)
    here = Entity(next_state.cells[pos])
    if isinstance(spec, Budgetary):
        return int(moved and here == spec.entity)
    if isinstance(spec, Relational):
        return int(_within(next_state.cells, pos, spec.entity, spec.distance))
    return int(moved and here == spec.forbidden and spec.trigger in prev_state.visited_kinds)


def trajectory_cost(states: Sequence[EpisodeState], actions: Sequence[int], spec: ConstraintSpec) -> np.ndarray:
    return np.array([step_cost(s, a, t, spec) for s, a, t in zip(states[:-1], actions, states[1:])])


# ------------------------------------------------------------------------- masks

def _manhattan_dilate(hits: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(hits, dtype=bool)
    rows, cols = np.nonzero(hits)
    if rows.size == 0:
        return out
    ii, jj = np.indices(hits.shape)
    for r, c in zip(rows, cols):
        out |= (np.abs(ii - r) + np.abs(jj - c)) <= radius
    return out


def ground_truth_mask(obs: np.ndarray, spec: ConstraintSpec, visited_kinds: Iterable[Entity]) -> np.ndarray:
    if isinstance(spec, Budgetary):
        mask = obs == spec.entity
    elif isinstance(spec, Relational):
        mask = _manhattan_dilate(obs == spec.entity, spec.distance)
    else:
        if spec.trigger in set(visited_kinds):
            mask = obs == spec.forbidden
        else:
            mask = np.zeros(obs.shape, dtype=bool)
    return mask.astype(np.int8)


def budget_mask(mask: np.ndarray, cumulative_cost: float, h_C: float) -> np.ndarray:
    """Signed over-budget value on masked cells, zero elsewhere."""
    if cumulative_cost < 0:
        raise ValueError("cumulative cost must be non-negative")
    return np.where(np.asarray(mask) == 1, float(cumulative_cost) - float(h_C), 0.0)


def merge_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    if len(masks) == 0:
        raise ValueError("merge_masks needs at least one mask")
    total = np.sum(np.stack([np.asarray(m) for m in masks]), axis=0)
    return np.clip(total, 0, 1).astype(np.int8)
