"""The rule language: tokenizer, parser, validator, and pretty-printer.

A strict CLIPS-style subset: deftemplate with simple slots, defrule with an
optional salience declaration, defquery with declared parameters, and
top-level assert. Slot constraints are a literal or a single variable;
connective constraints and not/exists/or condition elements are out of scope.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .facts import KbError, Symbol, SlotValue, TemplateRegistry

OPS = ("+", "-", "*", "/", "<", ">", "<=", ">=", "eq", "neq")

# ============================================================
# errors
# ============================================================


class LexError(KbError):
    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"{line}:{column}: {message}")


class ParseError(KbError):
    def __init__(self, line: int, column: int, expected: str, found: str):
        self.line = line
        self.column = column
        self.expected = expected
        self.found = found
        super().__init__(f"{line}:{column}: expected {expected}, found {found}")


# ============================================================
# tokens
# ============================================================

LP = "lp"
RP = "rp"
SYM = "sym"
VAR = "var"
INT = "int"
FLOAT = "float"
STR = "str"
ARROW = "arrow"  # =>
ADDR = "addr"  # <-
PUNCT = "punct"  # & | ~ — reserved, always rejected by the parser
EOF = "eof"


@dataclass(frozen=True, slots=True)
class Token:
    kind: str
    value: object
    line: int
    col: int

    def show(self) -> str:
        if self.kind == EOF:
            return "end of input"
        if self.kind == STR:
            return f'"{self.value}"'
        return str(self.value)


_INT_RE = re.compile(r"[+-]?[0-9]+\Z")
_FLOAT_RE = re.compile(
    r"[+-]?(?:[0-9]+\.[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?\Z|[+-]?[0-9]+[eE][+-]?[0-9]+\Z"
)

# Typographic quotes normalize to their straight forms before lexing; the
# replacements are all single characters so token positions stay true.
_QUOTE_NORMALIZATION = str.maketrans({"\u201c": '"', "\u201d": '"', "\u2018": "'", "\u2019": "'"})

_SYMBOL_BREAKERS = set(' \t\r\n()"\';&|~?')


def tokenize(text: str) -> list[Token]:
    """Lex `text` into tokens. Raises LexError with line/column on bad input."""
    src = text.translate(_QUOTE_NORMALIZATION)
    toks: list[Token] = []
    i = 0
    n = len(src)
    line = 1
    col = 1

    def step(k: int = 1) -> None:
        nonlocal i, line, col
        for _ in range(k):
            if i < n and src[i] == "\n":
                line += 1
                col = 1
            else:
                col += 1
            i += 1

    while i < n:
        c = src[i]
        if c in " \t\r\n":
            step()
            continue
        if c == ";":
            while i < n and src[i] != "\n":
                step()
            continue
        tline, tcol = line, col
        if c == "(":
            toks.append(Token(LP, "(", tline, tcol))
            step()
            continue
        if c == ")":
            toks.append(Token(RP, ")", tline, tcol))
            step()
            continue
        if c in "&|~":
            toks.append(Token(PUNCT, c, tline, tcol))
            step()
            continue
        if c in "\"'":
            quote = c
            step()
            buf: list[str] = []
            while True:
                if i >= n:
                    raise LexError(tline, tcol, "unterminated string")
                ch = src[i]
                if ch == quote:
                    step()
                    break
                if ch == "\\":
                    step()
                    if i >= n:
                        raise LexError(tline, tcol, "unterminated string")
                    esc = src[i]
                    buf.append({"n": "\n", "t": "\t"}.get(esc, esc))
                    step()
                    continue
                buf.append(ch)
                step()
            toks.append(Token(STR, "".join(buf), tline, tcol))
            continue
        if c == "?":
            step()
            start = i
            while i < n and src[i] not in _SYMBOL_BREAKERS:
                step()
            name = src[start:i]
            if not name:
                raise LexError(tline, tcol, "expected a variable name after ?")
            toks.append(Token(VAR, name, tline, tcol))
            continue
        # bare word: symbol, number, or one of the two arrows
        start = i
        while i < n and src[i] not in _SYMBOL_BREAKERS:
            step()
        word = src[start:i]
        if not word:
            raise LexError(tline, tcol, f"unexpected character {c!r}")
        if word == "=>":
            toks.append(Token(ARROW, word, tline, tcol))
        elif word == "<-":
            toks.append(Token(ADDR, word, tline, tcol))
        elif _INT_RE.match(word):
            toks.append(Token(INT, int(word), tline, tcol))
        elif _FLOAT_RE.match(word):
            toks.append(Token(FLOAT, float(word), tline, tcol))
        else:
            toks.append(Token(SYM, word, tline, tcol))
    toks.append(Token(EOF, None, line, col))
    return toks


# ============================================================
# AST
# ============================================================


@dataclass(frozen=True, slots=True)
class Literal:
    value: SlotValue


@dataclass(frozen=True, slots=True)
class Var:
    name: str


@dataclass(frozen=True, slots=True)
class FuncCall:
    op: str
    args: tuple  # of Expr


Expr = Literal | Var | FuncCall


@dataclass(frozen=True, slots=True)
class Pattern:
    template: str
    slots: tuple  # of (slot name, Literal | Var)
    address: str | None = None


@dataclass(frozen=True, slots=True)
class Test:
    expr: FuncCall


ConditionElement = Pattern | Test


@dataclass(frozen=True, slots=True)
class AssertSpec:
    template: str
    slots: tuple  # of (slot name, Expr)


@dataclass(frozen=True, slots=True)
class AssertAction:
    facts: tuple  # of AssertSpec


@dataclass(frozen=True, slots=True)
class RetractAction:
    variables: tuple  # of str


@dataclass(frozen=True, slots=True)
class ModifyAction:
    variable: str
    updates: tuple  # of (slot name, Expr)


@dataclass(frozen=True, slots=True)
class BindAction:
    variable: str
    expr: Expr


Action = AssertAction | RetractAction | ModifyAction | BindAction


@dataclass(frozen=True, slots=True)
class TemplateDef:
    name: str
    slots: tuple  # of str
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class RuleDef:
    name: str
    salience: int
    lhs: tuple  # of ConditionElement
    rhs: tuple  # of Action
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class QueryDef:
    name: str
    parameters: tuple  # of str
    lhs: tuple  # of ConditionElement
    line: int = field(default=0, compare=False)


@dataclass(frozen=True, slots=True)
class TopLevelAssert:
    facts: tuple  # of AssertSpec
    line: int = field(default=0, compare=False)


Construct = TemplateDef | RuleDef | QueryDef | TopLevelAssert


# ============================================================
# parser
# ============================================================


class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.i = 0

    def peek(self, ahead: int = 0) -> Token:
        return self.toks[min(self.i + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != EOF:
            self.i += 1
        return t

    def fail(self, expected: str, tok: Token | None = None) -> ParseError:
        t = tok or self.peek()
        return ParseError(t.line, t.col, expected, t.show())

    def expect(self, kind: str, what: str) -> Token:
        t = self.peek()
        if t.kind != kind:
            raise self.fail(what, t)
        return self.next()

    def expect_word(self, word: str) -> Token:
        t = self.peek()
        if t.kind != SYM or t.value != word:
            raise self.fail(word, t)
        return self.next()

    # ---- program

    def program(self) -> list[Construct]:
        out: list[Construct] = []
        while self.peek().kind != EOF:
            out.append(self.construct())
        return out

    def construct(self) -> Construct:
        lp = self.expect(LP, "(")
        head = self.peek()
        if head.kind != SYM:
            raise self.fail("deftemplate, defrule, defquery, or assert", head)
        if head.value == "deftemplate":
            return self.template_def(lp)
        if head.value == "defrule":
            return self.rule_def(lp)
        if head.value == "defquery":
            return self.query_def(lp)
        if head.value == "assert":
            return self.top_assert(lp)
        raise self.fail("deftemplate, defrule, defquery, or assert", head)

    def template_def(self, lp: Token) -> TemplateDef:
        self.next()  # deftemplate
        name = self.expect(SYM, "template name")
        slots: list[str] = []
        while self.peek().kind == LP:
            self.next()
            self.expect_word("slot")
            slots.append(self.expect(SYM, "slot name").value)
            self.expect(RP, ")")
        self.expect(RP, ")")
        return TemplateDef(name.value, tuple(slots), line=lp.line)

    def rule_def(self, lp: Token) -> RuleDef:
        self.next()  # defrule
        name = self.expect(SYM, "rule name")
        salience = 0
        if self._at_declare():
            salience = self.declare_salience()
        lhs: list[ConditionElement] = []
        while self.peek().kind != ARROW:
            if self.peek().kind == EOF:
                raise self.fail("=>")
            lhs.append(self.condition_element())
        self.next()  # =>
        rhs: list[Action] = []
        while self.peek().kind != RP:
            rhs.append(self.action())
        self.next()  # )
        return RuleDef(name.value, salience, tuple(lhs), tuple(rhs), line=lp.line)

    def _at_declare(self) -> bool:
        return (
            self.peek().kind == LP
            and self.peek(1).kind == SYM
            and self.peek(1).value == "declare"
        )

    def declare_salience(self) -> int:
        self.next()  # (
        self.next()  # declare
        self.expect(LP, "(")
        self.expect_word("salience")
        t = self.expect(INT, "integer salience")
        self.expect(RP, ")")
        self.expect(RP, ")")
        return t.value

    def query_def(self, lp: Token) -> QueryDef:
        self.next()  # defquery
        name = self.expect(SYM, "query name")
        self.expect(LP, "(")
        self.expect_word("declare")
        self.expect(LP, "(")
        self.expect_word("variables")
        params: list[str] = []
        while self.peek().kind == VAR:
            params.append(self.next().value)
        if not params:
            raise self.fail("at least one ?parameter")
        self.expect(RP, ")")
        self.expect(RP, ")")
        lhs: list[ConditionElement] = []
        while self.peek().kind != RP:
            lhs.append(self.condition_element())
        self.next()  # )
        return QueryDef(name.value, tuple(params), tuple(lhs), line=lp.line)

    def top_assert(self, lp: Token) -> TopLevelAssert:
        self.next()  # assert
        facts = self.assert_specs()
        self.expect(RP, ")")
        return TopLevelAssert(tuple(facts), line=lp.line)

    # ---- condition elements

    def condition_element(self) -> ConditionElement:
        t = self.peek()
        if t.kind == VAR:
            addr = self.next().value
            self.expect(ADDR, "<-")
            pat = self.pattern()
            return Pattern(pat.template, pat.slots, address=addr)
        if t.kind == LP:
            if self.peek(1).kind == SYM and self.peek(1).value == "test":
                self.next()
                self.next()
                call = self.funcall()
                self.expect(RP, ")")
                return Test(call)
            return self.pattern()
        raise self.fail("a pattern or (test ...)", t)

    def pattern(self) -> Pattern:
        self.expect(LP, "(")
        tmpl = self.expect(SYM, "template name")
        slots: list[tuple[str, Literal | Var]] = []
        while self.peek().kind == LP:
            self.next()
            slot = self.expect(SYM, "slot name")
            c = self.peek()
            constraint: Literal | Var
            if c.kind == VAR:
                constraint = Var(self.next().value)
            elif c.kind in (INT, FLOAT, STR):
                constraint = Literal(self.next().value)
            elif c.kind == SYM:
                constraint = Literal(Symbol(self.next().value))
            else:
                raise self.fail("a literal or a single variable", c)
            nxt = self.peek()
            if nxt.kind == PUNCT:
                raise self.fail("') — connective constraints are not supported", nxt)
            if nxt.kind != RP:
                raise self.fail("') — slot takes a single literal or variable", nxt)
            self.next()
            slots.append((slot.value, constraint))
        self.expect(RP, ")")
        return Pattern(tmpl.value, tuple(slots))

    # ---- actions

    def action(self) -> Action:
        self.expect(LP, "(")
        head = self.expect(SYM, "assert, retract, modify, or bind")
        if head.value == "assert":
            facts = self.assert_specs()
            self.expect(RP, ")")
            return AssertAction(tuple(facts))
        if head.value == "retract":
            variables: list[str] = []
            while self.peek().kind == VAR:
                variables.append(self.next().value)
            if not variables:
                raise self.fail("at least one ?fact-address")
            self.expect(RP, ")")
            return RetractAction(tuple(variables))
        if head.value == "modify":
            var = self.expect(VAR, "?fact-address").value
            updates: list[tuple[str, Expr]] = []
            while self.peek().kind == LP:
                self.next()
                slot = self.expect(SYM, "slot name")
                e = self.expr()
                self.expect(RP, ")")
                updates.append((slot.value, e))
            if not updates:
                raise self.fail("at least one (slot expr)")
            self.expect(RP, ")")
            return ModifyAction(var, tuple(updates))
        if head.value == "bind":
            var = self.expect(VAR, "?variable").value
            e = self.expr()
            self.expect(RP, ")")
            return BindAction(var, e)
        raise self.fail("assert, retract, modify, or bind", head)

    def assert_specs(self) -> list[AssertSpec]:
        specs: list[AssertSpec] = []
        while self.peek().kind == LP:
            self.next()
            tmpl = self.expect(SYM, "template name")
            slots: list[tuple[str, Expr]] = []
            while self.peek().kind == LP:
                self.next()
                slot = self.expect(SYM, "slot name")
                e = self.expr()
                self.expect(RP, ")")
                slots.append((slot.value, e))
            self.expect(RP, ")")
            specs.append(AssertSpec(tmpl.value, tuple(slots)))
        if not specs:
            raise self.fail("at least one (Template ...) to assert")
        return specs

    # ---- expressions

    def expr(self) -> Expr:
        t = self.peek()
        if t.kind == VAR:
            return Var(self.next().value)
        if t.kind in (INT, FLOAT, STR):
            return Literal(self.next().value)
        if t.kind == SYM:
            return Literal(Symbol(self.next().value))
        if t.kind == LP:
            return self.funcall()
        raise self.fail("an expression", t)

    def funcall(self) -> FuncCall:
        self.expect(LP, "(")
        op = self.peek()
        if op.kind != SYM or op.value not in OPS:
            raise self.fail("an operator (" + " ".join(OPS) + ")", op)
        self.next()
        args: list[Expr] = []
        while self.peek().kind != RP:
            args.append(self.expr())
        self.next()  # )
        return FuncCall(op.value, tuple(args))


def parse_program(text: str) -> list[Construct]:
    """Parse KB text into constructs in source order."""
    return _Parser(tokenize(text)).program()


# ============================================================
# pretty-printer
# ============================================================


def _fmt_literal(v: SlotValue) -> str:
    t = type(v)
    if t is Symbol:
        return v.name
    if t is str:
        body = v.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
        return f'"{body}"'
    return repr(v)  # int and float round-trip through repr


def _fmt_expr(e: Expr) -> str:
    if isinstance(e, Literal):
        return _fmt_literal(e.value)
    if isinstance(e, Var):
        return f"?{e.name}"
    return "(" + " ".join([e.op] + [_fmt_expr(a) for a in e.args]) + ")"


def _fmt_pattern(p: Pattern) -> str:
    parts = [p.template] + [f"({s} {_fmt_expr(c)})" for s, c in p.slots]
    body = "(" + " ".join(parts) + ")"
    if p.address is not None:
        return f"?{p.address} <- {body}"
    return body


def _fmt_ce(ce: ConditionElement) -> str:
    if isinstance(ce, Test):
        return f"(test {_fmt_expr(ce.expr)})"
    return _fmt_pattern(ce)


def _fmt_assert_spec(s: AssertSpec) -> str:
    parts = [s.template] + [f"({slot} {_fmt_expr(e)})" for slot, e in s.slots]
    return "(" + " ".join(parts) + ")"


def _fmt_action(a: Action) -> str:
    if isinstance(a, AssertAction):
        return "(assert " + " ".join(_fmt_assert_spec(s) for s in a.facts) + ")"
    if isinstance(a, RetractAction):
        return "(retract " + " ".join(f"?{v}" for v in a.variables) + ")"
    if isinstance(a, ModifyAction):
        ups = " ".join(f"({s} {_fmt_expr(e)})" for s, e in a.updates)
        return f"(modify ?{a.variable} {ups})"
    return f"(bind ?{a.variable} {_fmt_expr(a.expr)})"


def format_construct(c: Construct) -> str:
    if isinstance(c, TemplateDef):
        lines = [f"(deftemplate {c.name}"]
        lines += [f"  (slot {s})" for s in c.slots]
        return "\n".join(lines) + ")"
    if isinstance(c, RuleDef):
        lines = [f"(defrule {c.name}"]
        if c.salience != 0:
            lines.append(f"  (declare (salience {c.salience}))")
        lines += [f"  {_fmt_ce(ce)}" for ce in c.lhs]
        lines.append("  =>")
        lines += [f"  {_fmt_action(a)}" for a in c.rhs]
        return "\n".join(lines) + ")"
    if isinstance(c, QueryDef):
        lines = [f"(defquery {c.name}"]
        lines.append("  (declare (variables " + " ".join(f"?{p}" for p in c.parameters) + "))")
        lines += [f"  {_fmt_ce(ce)}" for ce in c.lhs]
        return "\n".join(lines) + ")"
    if isinstance(c, TopLevelAssert):
        return "(assert " + " ".join(_fmt_assert_spec(s) for s in c.facts) + ")"
    raise TypeError(f"not a construct: {c!r}")


def format_program(constructs: list[Construct]) -> str:
    return "\n\n".join(format_construct(c) for c in constructs) + "\n"


# ============================================================
# validation
# ============================================================


@dataclass(frozen=True, slots=True)
class Diagnostic:
    kind: str  # unknown-template | unknown-slot | unbound-variable | not-fact-address | address-in-expression | duplicate-rule | duplicate-template | unbound-parameter | top-level-variable
    target: str  # rule/query/construct name
    message: str

    def __str__(self) -> str:
        return f"{self.target}: {self.kind}: {self.message}"


def _expr_vars(e: Expr) -> set[str]:
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, FuncCall):
        out: set[str] = set()
        for a in e.args:
            out |= _expr_vars(a)
        return out
    return set()


def _check_pattern_slots(
    name: str, template: str, slot_names: list[str], registry: TemplateRegistry, diags: list[Diagnostic]
) -> bool:
    """Template + slot existence for one pattern-ish thing. True if template known."""
    if template not in registry:
        diags.append(Diagnostic("unknown-template", name, f"unknown template {template}"))
        return False
    t = registry.get(template)
    for s in slot_names:
        if not t.has_slot(s):
            diags.append(Diagnostic("unknown-slot", name, f"template {template} has no slot {s}"))
    return True


def _validate_lhs(
    name: str, lhs: tuple, registry: TemplateRegistry, diags: list[Diagnostic], pre_bound: set[str] = frozenset()
) -> tuple[set[str], dict[str, str]]:
    """Walk condition elements left to right.

    Returns (bound slot variables, address variable -> template). Diagnostics
    for unknown templates/slots, tests on unbound variables, and address
    variables leaking into expressions.
    """
    bound: set[str] = set(pre_bound)
    addresses: dict[str, str] = {}
    for ce in lhs:
        if isinstance(ce, Pattern):
            _check_pattern_slots(name, ce.template, [s for s, _ in ce.slots], registry, diags)
            if ce.address is not None:
                if ce.address in bound or ce.address in addresses:
                    diags.append(
                        Diagnostic(
                            "address-in-expression",
                            name,
                            f"?{ce.address} is already bound and cannot re-bind as a fact address",
                        )
                    )
                addresses[ce.address] = ce.template
            for _, c in ce.slots:
                if isinstance(c, Var):
                    if c.name in addresses:
                        diags.append(
                            Diagnostic(
                                "address-in-expression",
                                name,
                                f"fact address ?{c.name} used as a slot value",
                            )
                        )
                    bound.add(c.name)
        else:  # Test
            for v in _expr_vars(ce.expr):
                if v in addresses:
                    diags.append(
                        Diagnostic("address-in-expression", name, f"fact address ?{v} used in a test")
                    )
                elif v not in bound:
                    diags.append(Diagnostic("unbound-variable", name, f"?{v} is not bound by an earlier pattern"))
    return bound, addresses


def validate_rule(rule: RuleDef, registry: TemplateRegistry) -> list[Diagnostic]:
    """Template/slot existence, binding discipline, address-variable usage."""
    diags: list[Diagnostic] = []
    bound, addresses = _validate_lhs(rule.name, rule.lhs, registry, diags)

    def check_expr(e: Expr, where: str) -> None:
        for v in _expr_vars(e):
            if v in addresses:
                diags.append(Diagnostic("address-in-expression", rule.name, f"fact address ?{v} used in {where}"))
            elif v not in bound:
                diags.append(Diagnostic("unbound-variable", rule.name, f"?{v} is not bound ({where})"))

    for a in rule.rhs:
        if isinstance(a, AssertAction):
            for spec in a.facts:
                _check_pattern_slots(rule.name, spec.template, [s for s, _ in spec.slots], registry, diags)
                for _, e in spec.slots:
                    check_expr(e, "assert")
        elif isinstance(a, RetractAction):
            for v in a.variables:
                if v not in addresses:
                    diags.append(Diagnostic("not-fact-address", rule.name, f"retract of non-address ?{v}"))
        elif isinstance(a, ModifyAction):
            if a.variable not in addresses:
                diags.append(Diagnostic("not-fact-address", rule.name, f"modify of non-address ?{a.variable}"))
            else:
                tname = addresses[a.variable]
                if tname in registry:
                    t = registry.get(tname)
                    for s, _ in a.updates:
                        if not t.has_slot(s):
                            diags.append(
                                Diagnostic("unknown-slot", rule.name, f"template {tname} has no slot {s}")
                            )
            for _, e in a.updates:
                check_expr(e, "modify")
        elif isinstance(a, BindAction):
            check_expr(a.expr, "bind")
            if a.variable in addresses:
                diags.append(
                    Diagnostic("address-in-expression", rule.name, f"bind re-targets fact address ?{a.variable}")
                )
            bound.add(a.variable)
    return diags


def validate_query(query: QueryDef, registry: TemplateRegistry) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    bound, _ = _validate_lhs(query.name, query.lhs, registry, diags, pre_bound=set(query.parameters))
    pattern_vars: set[str] = set()
    for ce in query.lhs:
        if isinstance(ce, Pattern):
            for _, c in ce.slots:
                if isinstance(c, Var):
                    pattern_vars.add(c.name)
    for p in query.parameters:
        if p not in pattern_vars:
            diags.append(Diagnostic("unbound-parameter", query.name, f"parameter ?{p} occurs in no pattern"))
    return diags


def validate_program(constructs: list[Construct]) -> list[Diagnostic]:
    """Validate a whole program in source order (templates must precede use)."""
    diags: list[Diagnostic] = []
    registry = TemplateRegistry()
    rule_names: set[str] = set()
    for c in constructs:
        if isinstance(c, TemplateDef):
            if c.name in registry:
                diags.append(Diagnostic("duplicate-template", c.name, f"template {c.name} redefined"))
            else:
                try:
                    registry.define(c.name, list(c.slots))
                except KbError as e:
                    diags.append(Diagnostic("duplicate-template", c.name, str(e)))
        elif isinstance(c, RuleDef):
            if c.name in rule_names:
                diags.append(Diagnostic("duplicate-rule", c.name, f"rule {c.name} redefined"))
            rule_names.add(c.name)
            diags.extend(validate_rule(c, registry))
        elif isinstance(c, QueryDef):
            if c.name in rule_names:
                diags.append(Diagnostic("duplicate-rule", c.name, f"name {c.name} redefined"))
            rule_names.add(c.name)
            diags.extend(validate_query(c, registry))
        elif isinstance(c, TopLevelAssert):
            for spec in c.facts:
                _check_pattern_slots("(assert)", spec.template, [s for s, _ in spec.slots], registry, diags)
                for _, e in spec.slots:
                    for v in _expr_vars(e):
                        diags.append(
                            Diagnostic("top-level-variable", "(assert)", f"?{v} cannot appear outside a rule")
                        )
    return diags
