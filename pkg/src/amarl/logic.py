"""PCTL with reward operators: abstract syntax and a PRISM-style parser.

Accepted syntax, e.g.::

    P<0.15 [ F captured_all ]        P=? [ a U<=5 b ]
    R>=7 [ F end_all ]               R{"team"}=? [ C<=10 ]
    !a & (b | "area_1=RoomA")        Pmax=? [ F goal_1 ]
"""
from __future__ import annotations

import re
from dataclasses import dataclass

COMPARATORS = ("<", "<=", ">", ">=")


class FormulaSyntaxError(ValueError):
    def __init__(self, message: str, position: int, text: str = ""):
        super().__init__(f"{message} at position {position}" + (f": {text!r}" if text else ""))
        self.position = position


class FormulaSemanticError(ValueError):
    pass


# --- state formulas -------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: bool

    def __str__(self):
        return "true" if self.value else "false"


@dataclass(frozen=True)
class Atom:
    name: str

    def __str__(self):
        return self.name if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", self.name) else f'"{self.name}"'


@dataclass(frozen=True)
class Not:
    arg: object

    def __str__(self):
        return f"!{_wrap(self.arg)}"


@dataclass(frozen=True)
class And:
    left: object
    right: object

    def __str__(self):
        return f"{_wrap(self.left)} & {_wrap(self.right)}"


@dataclass(frozen=True)
class Prob:
    op: str | None          # None for the "=?" query form
    bound: float | None
    path: object
    opt: str | None = None  # "min"/"max" for games, None otherwise

    def __str__(self):
        head = "P" + (self.opt or "")
        return f"{head}{_bound(self.op, self.bound)} [ {self.path} ]"


@dataclass(frozen=True)
class Reward:
    op: str | None
    bound: float | None
    kind: object            # Instant, Cumulative or Reach
    structure: str | None = None
    opt: str | None = None

    def __str__(self):
        head = "R" + (f'{{"{self.structure}"}}' if self.structure else "") + (self.opt or "")
        return f"{head}{_bound(self.op, self.bound)} [ {self.kind} ]"


# --- path formulas and reward variants --------------------------------------

@dataclass(frozen=True)
class Next:
    arg: object

    def __str__(self):
        return f"X {_wrap(self.arg)}"


@dataclass(frozen=True)
class Until:
    left: object
    right: object
    bound: int | None = None

    def __str__(self):
        op = "U" if self.bound is None else f"U<={self.bound}"
        if self.left == Const(True):
            op = "F" if self.bound is None else f"F<={self.bound}"
            return f"{op} {_wrap(self.right)}"
        return f"{_wrap(self.left)} {op} {_wrap(self.right)}"


@dataclass(frozen=True)
class Globally:
    arg: object

    def __str__(self):
        return f"G {_wrap(self.arg)}"


@dataclass(frozen=True)
class Instant:
    k: int

    def __str__(self):
        return f"I={self.k}"


@dataclass(frozen=True)
class Cumulative:
    k: int

    def __str__(self):
        return f"C<={self.k}"


@dataclass(frozen=True)
class Reach:
    target: object

    def __str__(self):
        return f"F {_wrap(self.target)}"


def Or(a, b):
    return Not(And(Not(a), Not(b)))


def eventually(phi, bound=None):
    return Until(Const(True), phi, bound)


def _wrap(f):
    return f"({f})" if isinstance(f, And) else str(f)


def _bound(op, bound):
    return "=?" if op is None else f"{op}{bound:g}"


def is_weak(f) -> bool:
    """True iff the formula uses neither next nor bounded until."""
    if isinstance(f, (Next, Instant, Cumulative)):
        return isinstance(f, (Instant, Cumulative))
    if isinstance(f, Until) and f.bound is not None:
        return False
    return all(is_weak(c) for c in _children(f))


def relaxed_preserved(f, agent_atoms) -> bool:
    """Whether a weak probability formula keeps its value under relaxed branching.

    Accepted shapes: every atom belongs to a single agent's atom set, or the
    path is plain reachability ``true U phi``.
    """
    if not is_weak(f):
        return False
    names = atoms(f)
    if any(names <= set(a) for a in agent_atoms):
        return True
    path = getattr(f, "path", None)
    return isinstance(path, Until) and path.bound is None and path.left == Const(True)


def atoms(f) -> set[str]:
    if isinstance(f, Atom):
        return {f.name}
    out = set()
    for c in _children(f):
        out |= atoms(c)
    return out


def _children(f):
    if isinstance(f, (Not, Next, Globally)):
        return (f.arg,)
    if isinstance(f, (And, Until)):
        return (f.left, f.right)
    if isinstance(f, Prob):
        return (f.path,)
    if isinstance(f, Reward):
        return (f.kind,)
    if isinstance(f, Reach):
        return (f.target,)
    return ()


# --- parser ------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)
  | (?P<str>"[^"]*")
  | (?P<query>=\?)
  | (?P<cmp><=|>=|<|>)
  | (?P<sym>[!&|()\[\]{}=])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)


def _tokenize(text: str):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaSyntaxError("unexpected character", pos, text[pos])
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None, kind=None):
        tok = self.toks[self.i]
        if (value is not None and tok[1] != value) or (kind is not None and tok[0] != kind):
            want = value if value is not None else kind
            raise FormulaSyntaxError(f"expected {want!r}", tok[2], tok[1])
        self.i += 1
        return tok

    def at(self, value):
        return self.toks[self.i][1] == value

    def state(self):
        left = self.conj()
        while self.at("|"):
            self.take("|")
            left = Or(left, self.conj())
        return left

    def conj(self):
        left = self.unary()
        while self.at("&"):
            self.take("&")
            left = And(left, self.unary())
        return left

    def unary(self):
        if self.at("!"):
            self.take("!")
            return Not(self.unary())
        return self.primary()

    def primary(self):
        kind, val, pos = self.peek()
        if val == "(":
            self.take("(")
            f = self.state()
            self.take(")")
            return f
        if kind == "str":
            self.i += 1
            return Atom(val[1:-1])
        if kind == "ident":
            if val == "true":
                self.i += 1
                return Const(True)
            if val == "false":
                self.i += 1
                return Const(False)
            if val in ("P", "Pmin", "Pmax"):
                return self.prob()
            if val in ("R", "Rmin", "Rmax"):
                return self.reward()
            self.i += 1
            return Atom(val)
        raise FormulaSyntaxError("expected a state formula", pos, val)

    def _bound(self, what):
        kind, val, pos = self.peek()
        if kind == "query":
            self.i += 1
            return None, None
        if kind != "cmp":
            raise FormulaSyntaxError("expected comparison or '=?'", pos, val)
        self.i += 1
        _, num, npos = self.take(kind="num")
        bound = float(num)
        if what == "P" and not 0.0 <= bound <= 1.0:
            raise FormulaSemanticError(f"probability bound {bound} outside [0,1] at position {npos}")
        if what == "R" and bound < 0:
            raise FormulaSemanticError(f"reward bound {bound} is negative at position {npos}")
        return val, bound

    def prob(self):
        _, head, _ = self.take(kind="ident")
        opt = head[1:] or None
        op, bound = self._bound("P")
        self.take("[")
        path = self.path()
        self.take("]")
        return Prob(op, bound, path, opt)

    def reward(self):
        _, head, _ = self.take(kind="ident")
        structure = None
        if self.at("{"):
            self.take("{")
            _, s, _ = self.take(kind="str")
            structure = s[1:-1]
            self.take("}")
        opt = head[1:] or None
        if opt is None and self.peek()[0] == "ident" and self.peek()[1] in ("min", "max"):
            opt = self.take(kind="ident")[1]
        op, bound = self._bound("R")
        self.take("[")
        kind, val, pos = self.peek()
        if val == "F":
            self.i += 1
            body = Reach(self.state())
        elif val == "C":
            self.i += 1
            self.take("<=")
            body = Cumulative(self._int())
        elif val == "I":
            self.i += 1
            self.take("=")
            body = Instant(self._int())
        else:
            raise FormulaSyntaxError("expected 'F', 'C<=k' or 'I=k'", pos, val)
        self.take("]")
        return Reward(op, bound, body, structure, opt)

    def _int(self):
        _, num, pos = self.take(kind="num")
        if not re.fullmatch(r"\d+", num):
            raise FormulaSemanticError(f"step bound {num!r} at position {pos} is not a natural number")
        return int(num)

    def _step_bound(self):
        if self.at("<="):
            self.take("<=")
            return self._int()
        return None

    def path(self):
        kind, val, pos = self.peek()
        if kind == "ident" and val == "X":
            self.i += 1
            return Next(self.state())
        if kind == "ident" and val == "F":
            self.i += 1
            k = self._step_bound()
            return Until(Const(True), self.state(), k)
        if kind == "ident" and val == "G":
            self.i += 1
            return Globally(self.state())
        left = self.state()
        tok = self.peek()
        if tok[1] != "U":
            raise FormulaSyntaxError("expected 'U'", tok[2], tok[1])
        self.i += 1
        k = self._step_bound()
        return Until(left, self.state(), k)


def parse(text: str):
    """Parse a state formula."""
    p = _Parser(text)
    f = p.state()
    tok = p.peek()
    if tok[0] != "end":
        raise FormulaSyntaxError("trailing input", tok[2], tok[1])
    return f


def parse_path(text: str):
    p = _Parser(text)
    f = p.path()
    tok = p.peek()
    if tok[0] != "end":
        raise FormulaSyntaxError("trailing input", tok[2], tok[1])
    return f


def read_properties(lines) -> list[tuple[str, ...]]:
    """Split a property file into rows of whitespace-separated columns.

    Blank lines and ``#`` comments are skipped.  A row is either just the
    property, or a tag column followed by the property.
    """
    rows = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        if head in ("safety", "optimality", "metric"):
            rows.append((head, rest.strip()))
        else:
            rows.append((line,))
    return rows
