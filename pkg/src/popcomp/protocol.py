"""Agent states and pairwise transition rules for every PopComp variant.

Internally a protocol state is a small integer code so the simulation kernels
can work on flat ``uint8`` arrays:

    0            neutral N
    1 + 2*L + c  level L (0 = baseline) with color c (0 = X, 1 = Y)

Detection-style variants merge the two colors: they accept either color as
input but every state they create is X-colored (read as ``U_L``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numba
import numpy as np

NEUTRAL = 0
LEVEL_INF = 1 << 30
MAX_LEVEL_CAP = 126
MAX_COUNTER_BOUND = 127


class Variant(enum.IntEnum):
    COMPARISON = 0
    DETECTION = 1
    COUNTER_COMPARISON = 2
    COIN_DETECTION = 3
    LEAK_FP_DETECTION = 4
    LEAK_FN_DETECTION = 5

    @property
    def merged(self) -> bool:
        return self not in (Variant.COMPARISON, Variant.COUNTER_COMPARISON)

    @property
    def has_counter(self) -> bool:
        return self is Variant.COUNTER_COMPARISON

    @property
    def probabilistic(self) -> bool:
        return self in (
            Variant.COIN_DETECTION,
            Variant.LEAK_FP_DETECTION,
            Variant.LEAK_FN_DETECTION,
        )

    @classmethod
    def parse(cls, name: str | Variant) -> Variant:
        if isinstance(name, Variant):
            return name
        key = name.replace("-", "_").replace(" ", "_").upper()
        aliases = {
            "COUNTER": "COUNTER_COMPARISON",
            "COIN": "COIN_DETECTION",
            "LEAK_FP": "LEAK_FP_DETECTION",
            "LEAKFP": "LEAK_FP_DETECTION",
            "LEAKFPDETECTION": "LEAK_FP_DETECTION",
            "LEAK_FN": "LEAK_FN_DETECTION",
            "LEAKFN": "LEAK_FN_DETECTION",
            "LEAKFNDETECTION": "LEAK_FN_DETECTION",
            "COUNTERCOMPARISON": "COUNTER_COMPARISON",
            "COINDETECTION": "COIN_DETECTION",
        }
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}") from None


class Role(enum.Enum):
    BASELINE_X = "BaselineX"
    BASELINE_Y = "BaselineY"
    STRONG = "Strong"
    NEUTRAL = "Neutral"


class Color(enum.IntEnum):
    X = 0
    Y = 1

    def swapped(self) -> Color:
        return Color(1 - self)


class Output(enum.Enum):
    X = "X"
    Y = "Y"
    UNDECIDED = "Undecided"


@dataclass(frozen=True)
class AgentState:
    role: Role
    color: Color | None = None
    level: float = 0
    counter: int | None = None

    @classmethod
    def baseline(cls, color: Color, counter: int | None = None) -> AgentState:
        role = Role.BASELINE_X if color == Color.X else Role.BASELINE_Y
        return cls(role, Color(color), 0, counter)

    @classmethod
    def strong(cls, color: Color, level: int, counter: int | None = None) -> AgentState:
        if level < 1:
            raise ValueError(f"strong level must be >= 1, got {level}")
        return cls(Role.STRONG, Color(color), int(level), counter)

    @classmethod
    def neutral(cls, counter: int | None = None) -> AgentState:
        return cls(Role.NEUTRAL, None, math.inf, counter)

    @classmethod
    def parse(cls, text: str) -> AgentState:
        """Parse ``"X0"``, ``"Y3"``, ``"U2"``, ``"N"``, optionally with ``"@c"`` counter."""
        text = text.strip()
        counter = None
        if "@" in text:
            text, _, c = text.partition("@")
            counter = int(c)
        text = text.strip().upper()
        if text == "N":
            return cls.neutral(counter)
        if len(text) < 2 or text[0] not in "XYU" or not text[1:].isdigit():
            raise ValueError(f"cannot parse agent state {text!r}")
        color = Color.Y if text[0] == "Y" else Color.X
        level = int(text[1:])
        if level == 0:
            return cls.baseline(color, counter)
        return cls.strong(color, level, counter)

    @property
    def is_baseline(self) -> bool:
        return self.role in (Role.BASELINE_X, Role.BASELINE_Y)

    def swapped(self) -> AgentState:
        """Mirror image under X <-> Y; counters change sign since they count X as +1."""
        counter = None if self.counter is None else -self.counter
        if self.role is Role.NEUTRAL:
            return AgentState.neutral(counter)
        if self.is_baseline:
            return AgentState.baseline(self.color.swapped(), counter)
        return AgentState.strong(self.color.swapped(), int(self.level), counter)

    def with_counter(self, counter: int | None) -> AgentState:
        return replace(self, counter=counter)

    def label(self) -> str:
        if self.role is Role.NEUTRAL:
            base = "N"
        else:
            base = f"{self.color.name}{int(self.level)}"
        return base if self.counter is None else f"{base}@{self.counter}"

    def __str__(self) -> str:
        return self.label()


@dataclass(frozen=True)
class LeakPolicy:
    """Generic leak policy: which non-catalytic agent gets rewritten, and to what."""

    kind: str  # "fixed" | "worst_case" | "random"
    source: int = NEUTRAL
    target: int = NEUTRAL

    KINDS = ("fixed", "worst_case", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown leak policy {self.kind!r}")
        if self.kind == "fixed":
            for code in (self.source, self.target):
                if 1 <= code <= 2:
                    raise ValueError("leak policy may not name a catalytic baseline state")

    @classmethod
    def fixed(cls, source: AgentState | str, target: AgentState | str) -> LeakPolicy:
        src = AgentState.parse(source) if isinstance(source, str) else source
        dst = AgentState.parse(target) if isinstance(target, str) else target
        if src.is_baseline or dst.is_baseline:
            raise ValueError("leak policy may not name a catalytic baseline state")
        return cls("fixed", encode_state(src), encode_state(dst))

    @classmethod
    def parse(cls, text: str) -> LeakPolicy:
        key = text.strip()
        low = key.lower().replace("-", "_")
        if low in ("worst_case", "worstcase", "worst_case_majority_flip", "worstcasemajorityflip"):
            return cls("worst_case")
        if low in ("random", "random_non_catalytic", "randomnoncatalytic"):
            return cls("random")
        if "->" in key:
            src, _, dst = key.partition("->")
            return cls.fixed(src, dst)
        raise ValueError(f"unknown leak policy {text!r}")

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"{decode_state(self.source).label()}->{decode_state(self.target).label()}"
        return self.kind


@dataclass(frozen=True)
class GenericLeak:
    rate: float
    policy: LeakPolicy

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"generic leak rate must lie in [0, 1), got {self.rate}")


def default_level_cap(n: int) -> int:
    lg = math.log2(n)
    return math.ceil(lg) + 2 * math.ceil(math.log2(lg)) if lg > 1 else max(1, math.ceil(lg))


def default_counter_bound(n: int) -> int:
    lg = math.log2(n)
    return math.ceil(math.log2(lg)) if lg > 1 else 0


@dataclass(frozen=True)
class ProtocolParams:
    n: int
    s: int
    variant: Variant = Variant.COMPARISON
    m: int = 0
    p: float = 1.0
    zeta: float = 0.0
    generic_leak: GenericLeak | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.n < 2:
            raise ValueError(f"population needs n >= 2, got {self.n}")
        if not 1 <= self.s <= MAX_LEVEL_CAP:
            raise ValueError(f"level cap s must lie in [1, {MAX_LEVEL_CAP}], got {self.s}")
        if not 0 <= self.m <= MAX_COUNTER_BOUND:
            raise ValueError(f"counter bound m must lie in [0, {MAX_COUNTER_BOUND}], got {self.m}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"coin probability p must lie in (0, 1], got {self.p}")
        if not 0.0 <= self.zeta < 1.0:
            raise ValueError(f"leak rate zeta must lie in [0, 1), got {self.zeta}")

    @classmethod
    def auto(cls, n: int, variant: Variant | str = Variant.COMPARISON, s: int | None = None,
             m: int | None = None, **kw) -> ProtocolParams:
        s = default_level_cap(n) if s is None else s
        m = default_counter_bound(n) if m is None else m
        return cls(n=n, s=s, variant=Variant.parse(variant), m=m, **kw)

    @property
    def n_codes(self) -> int:
        return 2 * self.s + 3

    @property
    def width(self) -> int:
        """Number of counter values carried per protocol state (1 without a counter)."""
        return 2 * self.m + 1 if self.variant.has_counter else 1

    def as_dict(self) -> dict:
        d = {
            "n": self.n,
            "s": self.s,
            "variant": self.variant.name,
            "m": self.m,
            "p": self.p,
            "zeta": self.zeta,
            "generic_leak": None,
        }
        if self.generic_leak is not None:
            d["generic_leak"] = {
                "rate": self.generic_leak.rate,
                "policy": self.generic_leak.policy.describe(),
            }
        return d


# ---------------------------------------------------------------------------
# integer codes


@numba.njit(cache=True, inline="always")
def code_level(code):
    if code == 0:
        return LEVEL_INF
    return (code - 1) >> 1


@numba.njit(cache=True, inline="always")
def code_color(code):
    if code == 0:
        return 0
    return (code - 1) & 1


@numba.njit(cache=True, inline="always")
def make_code(level, color):
    return 1 + 2 * level + color


def encode_state(state: AgentState) -> int:
    if state.role is Role.NEUTRAL:
        return NEUTRAL
    return 1 + 2 * int(state.level) + int(state.color)


def decode_state(code: int, counter: int | None = None) -> AgentState:
    code = int(code)
    if code == NEUTRAL:
        return AgentState.neutral(counter)
    level, color = (code - 1) >> 1, Color((code - 1) & 1)
    if level == 0:
        return AgentState.baseline(color, counter)
    return AgentState.strong(color, level, counter)


def code_label(code: int) -> str:
    return decode_state(code).label()


def validate_state(state: AgentState, params: ProtocolParams) -> None:
    if state.role is Role.STRONG:
        if state.color is None or not 1 <= state.level <= params.s:
            raise ValueError(f"strong state {state} outside levels 1..{params.s}")
    elif state.is_baseline:
        if state.level != 0:
            raise ValueError(f"baseline state {state} must have level 0")
    if params.variant.has_counter:
        if state.counter is None or not -params.m <= state.counter <= params.m:
            raise ValueError(f"counter of {state} outside [-{params.m}, {params.m}]")


# ---------------------------------------------------------------------------
# transition kernels


@numba.njit(cache=True)
def transition_codes(a, b, variant, s, p, zeta, u):
    """Apply one interaction to the ordered code pair ``(a, b)``.

    Returns ``(a', b', leaked)`` where ``leaked`` is 1 when a structured leak
    branch of the LeakFP/LeakFN variants replaced the regular reaction.
    """
    merged = variant != 0 and variant != 2
    la = code_level(a)
    lb = code_level(b)

    if la == 0 or lb == 0:
        if la == 0 and lb == 0:
            return a, b, 0
        base = a if la == 0 else b
        col = 0 if merged else code_color(base)
        new = make_code(1, col)
        leaked = 0
        if variant == 5 and u < zeta:
            new = 0
            leaked = 1
        if la == 0:
            return a, new, leaked
        return new, b, leaked

    lvl = la if la <= lb else lb
    if lvl == LEVEL_INF:
        if variant == 4 and u < zeta:
            return 3, 3, 1
        return a, b, 0

    if variant == 4 and u < zeta:
        return 3, 3, 1

    if lvl == s:
        return 0, 0, 0

    col = code_color(a) if la <= lb else code_color(b)
    if merged:
        col = 0
    new = make_code(lvl + 1, col)

    if variant == 3:
        if u < p:
            return new, new, 0
        if la <= lb:
            return a, new, 0
        return new, b, 0
    if variant == 5 and u < zeta:
        return 0, 0, 1
    return new, new, 0


@numba.njit(cache=True, inline="always")
def counter_step(own, partner_code, m):
    if partner_code == 0:
        return own
    if code_color(partner_code) == 0:
        return own + 1 if own < m else m
    return own - 1 if own > -m else -m


def counter_update(own_counter: int, partner_pre_state: AgentState, m: int) -> int:
    """New counter after meeting ``partner_pre_state``, clamped to ``[-m, m]``."""
    return int(counter_step(int(own_counter), encode_state(partner_pre_state), int(m)))


def transition(first: AgentState, second: AgentState, params: ProtocolParams,
               rand: float = 0.0) -> tuple[AgentState, AgentState]:
    v = params.variant
    a, b, _ = transition_codes(encode_state(first), encode_state(second), int(v),
                               params.s, params.p, params.zeta, float(rand))
    if v.has_counter:
        ca = counter_step(first.counter, encode_state(second), params.m)
        cb = counter_step(second.counter, encode_state(first), params.m)
        return decode_state(a, int(ca)), decode_state(b, int(cb))
    return decode_state(a, first.counter), decode_state(b, second.counter)


def output_of(state: AgentState, variant: Variant | str) -> Output:
    variant = Variant.parse(variant)
    if variant.has_counter:
        c = state.counter or 0
        if c > 0:
            return Output.X
        if c < 0:
            return Output.Y
        return Output.UNDECIDED
    if state.role is Role.NEUTRAL:
        return Output.UNDECIDED
    if variant.merged:
        return Output.X
    return Output.X if state.color == Color.X else Output.Y


def output_table(params: ProtocolParams) -> np.ndarray:
    """Output index (0 = X, 1 = Y, 2 = Undecided) for every flat count slot."""
    width = params.width
    out = np.empty(params.n_codes * width, dtype=np.int8)
    for code in range(params.n_codes):
        for k in range(width):
            counter = k - params.m if params.variant.has_counter else None
            o = output_of(decode_state(code, counter), params.variant)
            out[code * width + k] = (Output.X, Output.Y, Output.UNDECIDED).index(o)
    return out


def all_states(params: ProtocolParams) -> list[AgentState]:
    """Every valid state for ``params`` (with every counter value if enabled)."""
    codes = [NEUTRAL] + list(range(1, params.n_codes))
    if not params.variant.has_counter:
        return [decode_state(c) for c in codes]
    return [decode_state(c, k) for c in codes for k in range(-params.m, params.m + 1)]
