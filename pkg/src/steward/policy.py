"""The placement-policy language.

A policy is plain text, one statement per line (``\\`` continues a line,
``#`` opens a comment when at line start or preceded by whitespace):

* directives: ``On <site predicate>``, ``Partition <name>``,
  ``When <site predicate>``, ``Until <site predicate>``
* rules: ``Delete | Protect | Dismiss`` (dataset replicas) and
  ``DeleteBlock | ProtectBlock | DismissBlock`` (block replicas), each with
  an optional predicate; the final rule must omit its predicate and acts as
  the default
* ordering: ``Order (increasing|decreasing) <attr> ...``

Predicates are boolean combinations (``and``, ``or``, ``not``, parentheses)
of terms ``attr == literal``, ``attr != literal``, ``attr < n``,
``attr > n``, ``attr in [pattern ...]`` (``*`` wildcards), or a bare boolean
attribute. Attributes are namespaced ``dataset.``, ``replica.``,
``blockreplica.``, ``site.`` and must exist in the attribute registry at
parse time. Numeric literals may carry k/M/G/T/P suffixes (SI decimal).

Rules are applied on a first-match basis and sort every replica into KEEP
(cannot be deleted), DISMISS (may be deleted if the site needs cleaning), or
DELETE (removed unconditionally).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

from . import inventory as inv
from .util import parse_size

KEEP = "KEEP"
DISMISS = "DISMISS"
DELETE = "DELETE"

ACTION_DELETE = "Delete"
ACTION_PROTECT = "Protect"
ACTION_DISMISS = "Dismiss"
ACTION_DELETE_BLOCK = "DeleteBlock"
ACTION_PROTECT_BLOCK = "ProtectBlock"
ACTION_DISMISS_BLOCK = "DismissBlock"

_DATASET_ACTIONS = {ACTION_DELETE: DELETE, ACTION_PROTECT: KEEP, ACTION_DISMISS: DISMISS}
_BLOCK_ACTIONS = {ACTION_DELETE_BLOCK: DELETE, ACTION_PROTECT_BLOCK: KEEP,
                  ACTION_DISMISS_BLOCK: DISMISS}

STRING = "string"
NUMBER = "number"
BOOL = "bool"

# Which attribute namespaces are legal in which predicate position.
SITE_SCOPE = frozenset({"site"})
DATASET_SCOPE = frozenset({"site", "dataset", "replica"})
BLOCK_SCOPE = frozenset({"site", "dataset", "blockreplica"})
DATASET_ONLY_SCOPE = frozenset({"dataset"})


class PolicyError(ValueError):
    """Parse-time failure; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EvaluationError(RuntimeError):
    """An attribute producer failed or was unavailable at evaluation time."""


# ---------------------------------------------------------------------------
# Attribute registry.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    """The objects a predicate term may refer to."""

    site: object = None
    dataset: object = None
    dataset_replica: object = None
    block_replica: object = None


@dataclass
class EvalContext:
    """Run-time surroundings of a policy evaluation.

    Producers derive attribute values from here; results are cached for the
    lifetime of the context (one application cycle).
    """

    inventory: object = None
    now: float = 0.0
    history: object = None
    site_occupancy: Optional[Callable] = None
    cache: dict = dc_field(default_factory=dict)

    def cached(self, key, fn):
        try:
            return self.cache[key]
        except KeyError:
            value = fn()
            self.cache[key] = value
            return value


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str
    getter: Callable  # (Target, EvalContext) -> value or None


class AttributeRegistry:
    """Name -> definition map; policies resolve against one at parse time."""

    def __init__(self):
        self._defs: dict[str, AttributeDef] = {}

    def register(self, name, kind, getter):
        self._defs[name] = AttributeDef(name, kind, getter)

    def lookup(self, name) -> AttributeDef | None:
        return self._defs.get(name)

    def copy(self) -> "AttributeRegistry":
        reg = AttributeRegistry()
        reg._defs = dict(self._defs)
        return reg


def _need(target_attr):
    def decorator(fn):
        def getter(target, ctx):
            obj = getattr(target, target_attr)
            if obj is None:
                raise EvaluationError(
                    f"no {target_attr} bound for attribute evaluation")
            return fn(obj, ctx)
        return getter
    return decorator


def _days(seconds):
    return seconds / 86400.0


def _usage_rank(ds, ctx):
    override = ds.attrs.get("usage_rank")
    if override is not None:
        try:
            return float(override)
        except (TypeError, ValueError):
            raise EvaluationError(
                f"usage_rank attribute of {ds.name!r} is not numeric") from None

    def compute():
        last = None
        if ctx.history is not None:
            last = ctx.history.last_access(ds.name)
        if last is None:
            last = ds.last_update
        return _days(ctx.now - last)

    return ctx.cached(("usage_rank", ds.name), compute)


def _on_tape(ds, ctx):
    override = ds.attrs.get("on_tape")
    if override is not None:
        return str(override)

    def compute():
        best = "NONE"
        for dr in ds.replicas.values():
            if dr.site.storage_kind != inv.TAPE:
                continue
            if dr.classification == inv.COMPLETE:
                return "FULL"
            best = "PARTIAL"
        return best

    return ctx.cached(("on_tape", ds.name), compute)


def _num_full_disk_copies(ds, ctx):
    def compute():
        count = 0
        for dr in ds.replicas.values():
            if (dr.site.storage_kind == inv.DISK
                    and dr.site.status == inv.READY
                    and dr.classification == inv.COMPLETE):
                count += 1
        return count

    return ctx.cached(("num_full_disk_copies", ds.name), compute)


def _site_occupancy(site, ctx):
    if ctx.site_occupancy is None:
        raise EvaluationError("site.occupancy is not available in this context")
    return ctx.site_occupancy(site)


def _replica_group(dr, ctx):
    names = {br.group.name for br in dr.block_replicas.values()}
    return names.pop() if len(names) == 1 else ""


def default_registry() -> AttributeRegistry:
    reg = AttributeRegistry()
    r = reg.register

    r("dataset.name", STRING, _need("dataset")(lambda d, c: d.name))
    r("dataset.status", STRING, _need("dataset")(lambda d, c: d.status))
    r("dataset.data_type", STRING, _need("dataset")(lambda d, c: d.data_type))
    r("dataset.size", NUMBER, _need("dataset")(lambda d, c: float(d.size)))
    r("dataset.num_files", NUMBER, _need("dataset")(lambda d, c: float(d.num_files)))
    r("dataset.last_update", NUMBER, _need("dataset")(lambda d, c: d.last_update))
    r("dataset.usage_rank", NUMBER, _need("dataset")(_usage_rank))
    r("dataset.on_tape", STRING, _need("dataset")(_on_tape))
    r("dataset.num_full_disk_copies", NUMBER, _need("dataset")(_num_full_disk_copies))

    r("replica.size", NUMBER, _need("dataset_replica")(lambda dr, c: float(dr.size_on_site)))
    r("replica.num_files", NUMBER, _need("dataset_replica")(lambda dr, c: float(dr.present_files())))
    r("replica.last_update", NUMBER, _need("dataset_replica")(
        lambda dr, c: max((br.last_update for br in dr.block_replicas.values()), default=0.0)))
    r("replica.is_complete", BOOL, _need("dataset_replica")(
        lambda dr, c: dr.classification == inv.COMPLETE))
    r("replica.is_partial", BOOL, _need("dataset_replica")(
        lambda dr, c: dr.classification == inv.PARTIAL))
    r("replica.is_incomplete", BOOL, _need("dataset_replica")(
        lambda dr, c: dr.classification == inv.INCOMPLETE))
    r("replica.is_custodial", BOOL, _need("dataset_replica")(
        lambda dr, c: any(br.is_custodial for br in dr.block_replicas.values())))
    r("replica.is_locked", BOOL, _need("dataset_replica")(
        lambda dr, c: any(br.is_locked for br in dr.block_replicas.values())))
    r("replica.is_enforced", BOOL, _need("dataset_replica")(
        lambda dr, c: all(br.is_enforced for br in dr.block_replicas.values())))
    r("replica.group", STRING, _need("dataset_replica")(_replica_group))

    r("blockreplica.size", NUMBER, _need("block_replica")(lambda br, c: float(br.size_on_site)))
    r("blockreplica.is_complete", BOOL, _need("block_replica")(lambda br, c: br.is_complete))
    r("blockreplica.is_custodial", BOOL, _need("block_replica")(lambda br, c: br.is_custodial))
    r("blockreplica.is_locked", BOOL, _need("block_replica")(lambda br, c: br.is_locked))
    r("blockreplica.is_enforced", BOOL, _need("block_replica")(lambda br, c: br.is_enforced))
    r("blockreplica.group", STRING, _need("block_replica")(lambda br, c: br.group.name))
    r("blockreplica.last_update", NUMBER, _need("block_replica")(lambda br, c: br.last_update))

    r("site.name", STRING, _need("site")(lambda s, c: s.name))
    r("site.kind", STRING, _need("site")(lambda s, c: s.storage_kind))
    r("site.status", STRING, _need("site")(lambda s, c: s.status))
    r("site.occupancy", NUMBER, _need("site")(_site_occupancy))
    return reg


_DEFAULT_REGISTRY = None


def get_default_registry() -> AttributeRegistry:
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        _DEFAULT_REGISTRY = default_registry()
    return _DEFAULT_REGISTRY


# ---------------------------------------------------------------------------
# Expression tree.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Compare:
    attr: str
    op: str  # == != < >
    value: object  # float for number attrs, str for string attrs, bool for bool


@dataclass(frozen=True)
class InPatterns:
    attr: str
    patterns: tuple


@dataclass(frozen=True)
class BoolAttr:
    attr: str


@dataclass(frozen=True)
class Not:
    child: object


@dataclass(frozen=True)
class And:
    children: tuple


@dataclass(frozen=True)
class Or:
    children: tuple


@dataclass(frozen=True)
class Rule:
    action: str
    predicate: object  # expression node or None for the default rule


@dataclass(frozen=True)
class OrderKey:
    decreasing: bool
    attr: str


@dataclass(frozen=True)
class PolicyProgram:
    site_selector: object = None
    partition: str | None = None
    trigger: object = None  # When
    stop: object = None  # Until
    rules: tuple = ()
    order_spec: tuple = ()

    def dataset_rules(self):
        return [(i, r) for i, r in enumerate(self.rules) if r.action in _DATASET_ACTIONS]

    def block_rules(self):
        return [(i, r) for i, r in enumerate(self.rules) if r.action in _BLOCK_ACTIONS]

    def rule_text(self, index: int) -> str:
        return _print_rule(self.rules[index])


# ---------------------------------------------------------------------------
# Lexing / parsing.
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"==|!=|<|>|\(|\)|\[|\]|,|[^\s()\[\],<>!=]+")

_DIRECTIVES = ("On", "When", "Until", "Partition")
_ACTIONS = tuple(_DATASET_ACTIONS) + tuple(_BLOCK_ACTIONS)


def _strip_comment(line: str) -> str:
    for i, ch in enumerate(line):
        if ch == "#" and (i == 0 or line[i - 1] in " \t"):
            return line[:i]
    return line


def _logical_lines(text: str):
    """Yield (first_lineno, joined_line) honoring backslash continuations."""
    pending = ""
    start = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if pending:
            pending = pending + " " + line
        else:
            pending = line
            start = lineno
        if pending.endswith("\\"):
            pending = pending[:-1].strip()
            continue
        if pending:
            yield start, pending
        pending = ""
    if pending:
        yield start, pending


def _tokenize(line: str, lineno: int) -> list[str]:
    tokens = []
    pos = 0
    for match in _TOKEN_RE.finditer(line):
        if line[pos:match.start()].strip():
            raise PolicyError(f"cannot tokenize {line[pos:match.start()]!r}", lineno)
        tokens.append(match.group(0))
        pos = match.end()
    if line[pos:].strip():
        raise PolicyError(f"cannot tokenize {line[pos:]!r}", lineno)
    return tokens


class _TokenCursor:
    def __init__(self, tokens, lineno):
        self.tokens = tokens
        self.lineno = lineno
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise PolicyError("unexpected end of statement", self.lineno)
        self.pos += 1
        return tok

    def expect(self, token):
        tok = self.next()
        if tok != token:
            raise PolicyError(f"expected {token!r}, got {tok!r}", self.lineno)

    @property
    def exhausted(self):
        return self.pos >= len(self.tokens)


def _looks_numeric(text: str) -> bool:
    try:
        parse_size(text)
        return True
    except ValueError:
        return False


class _PredicateParser:
    def __init__(self, cursor: _TokenCursor, registry: AttributeRegistry, scope):
        self.cur = cursor
        self.registry = registry
        self.scope = scope

    def parse(self):
        node = self._or_expr()
        return node

    def _or_expr(self):
        children = [self._and_expr()]
        while self.cur.peek() == "or":
            self.cur.next()
            children.append(self._and_expr())
        return children[0] if len(children) == 1 else Or(tuple(children))

    def _and_expr(self):
        children = [self._unary()]
        while self.cur.peek() == "and":
            self.cur.next()
            children.append(self._unary())
        return children[0] if len(children) == 1 else And(tuple(children))

    def _unary(self):
        tok = self.cur.peek()
        if tok == "not":
            self.cur.next()
            return Not(self._unary())
        if tok == "(":
            self.cur.next()
            node = self._or_expr()
            self.cur.expect(")")
            return node
        return self._term()

    def _attr_def(self, name) -> AttributeDef:
        lineno = self.cur.lineno
        if "." not in name:
            raise PolicyError(f"expected a namespaced attribute, got {name!r}", lineno)
        namespace = name.split(".", 1)[0]
        if namespace not in ("dataset", "replica", "blockreplica", "site"):
            raise PolicyError(f"unknown attribute namespace {namespace!r}", lineno)
        if namespace not in self.scope:
            raise PolicyError(
                f"attribute {name!r} is out of scope here "
                f"(allowed namespaces: {', '.join(sorted(self.scope))})", lineno)
        adef = self.registry.lookup(name)
        if adef is None:
            raise PolicyError(f"unknown attribute {name!r}", lineno)
        return adef

    def _term(self):
        lineno = self.cur.lineno
        name = self.cur.next()
        adef = self._attr_def(name)
        op = self.cur.peek()
        if op in ("==", "!=", "<", ">"):
            self.cur.next()
            return self._compare(adef, op, lineno)
        if op == "in":
            self.cur.next()
            if adef.kind != STRING:
                raise PolicyError(
                    f"'in' applies to string attributes, {name!r} is {adef.kind}", lineno)
            return InPatterns(name, tuple(self._pattern_list()))
        if adef.kind != BOOL:
            raise PolicyError(
                f"attribute {name!r} ({adef.kind}) cannot stand alone as a predicate",
                lineno)
        return BoolAttr(name)

    def _compare(self, adef, op, lineno):
        literal = self.cur.next()
        if adef.kind == NUMBER:
            if not _looks_numeric(literal):
                raise PolicyError(
                    f"attribute {adef.name!r} is numeric but {literal!r} is not", lineno)
            return Compare(adef.name, op, float(parse_size(literal)))
        if adef.kind == BOOL:
            if op not in ("==", "!="):
                raise PolicyError(
                    f"boolean attribute {adef.name!r} supports only == and !=", lineno)
            if literal not in ("true", "false"):
                raise PolicyError(
                    f"boolean attribute {adef.name!r} compares with true/false", lineno)
            return Compare(adef.name, op, literal == "true")
        # string attribute
        if op not in ("==", "!="):
            raise PolicyError(
                f"attribute {adef.name!r} is a string; < and > do not apply", lineno)
        return Compare(adef.name, op, literal)

    def _pattern_list(self):
        self.cur.expect("[")
        patterns = []
        while True:
            tok = self.cur.next()
            if tok == "]":
                break
            if tok == ",":
                continue
            patterns.append(tok)
        if not patterns:
            raise PolicyError("empty pattern list", self.cur.lineno)
        return patterns


def _parse_predicate(cursor, registry, scope):
    parser = _PredicateParser(cursor, registry, scope)
    node = parser.parse()
    if not cursor.exhausted:
        raise PolicyError(f"trailing tokens {cursor.tokens[cursor.pos:]!r}", cursor.lineno)
    return node


def parse(text: str, registry: AttributeRegistry | None = None) -> PolicyProgram:
    """Parse policy text into a program; raises PolicyError with line numbers."""
    registry = registry or get_default_registry()
    site_selector = None
    partition = None
    trigger = None
    stop = None
    rules: list[Rule] = []
    order_spec: list[OrderKey] = []
    seen_order = False

    for lineno, line in _logical_lines(text):
        tokens = _tokenize(line, lineno)
        if not tokens:
            continue
        head = tokens[0]
        cursor = _TokenCursor(tokens[1:], lineno)
        if head in _DIRECTIVES:
            if rules or seen_order:
                raise PolicyError(f"directive {head!r} must precede the rules", lineno)
            if head == "Partition":
                if partition is not None:
                    raise PolicyError("duplicate Partition directive", lineno)
                partition = cursor.next()
                if not cursor.exhausted:
                    raise PolicyError("Partition takes a single name", lineno)
            else:
                node = _parse_predicate(cursor, registry, SITE_SCOPE)
                if head == "On":
                    if site_selector is not None:
                        raise PolicyError("duplicate On directive", lineno)
                    site_selector = node
                elif head == "When":
                    if trigger is not None:
                        raise PolicyError("duplicate When directive", lineno)
                    trigger = node
                else:
                    if stop is not None:
                        raise PolicyError("duplicate Until directive", lineno)
                    stop = node
        elif head in _ACTIONS:
            if seen_order:
                raise PolicyError("rules must precede the Order statement", lineno)
            if cursor.exhausted:
                rules.append(Rule(head, None))
            else:
                scope = DATASET_SCOPE if head in _DATASET_ACTIONS else BLOCK_SCOPE
                rules.append(Rule(head, _parse_predicate(cursor, registry, scope)))
        elif head == "Order":
            if seen_order:
                raise PolicyError("duplicate Order statement", lineno)
            seen_order = True
            while not cursor.exhausted:
                direction = cursor.next()
                if direction not in ("increasing", "decreasing"):
                    raise PolicyError(
                        f"expected increasing/decreasing, got {direction!r}", lineno)
                attr = cursor.next()
                adef = registry.lookup(attr)
                if adef is None:
                    raise PolicyError(f"unknown attribute {attr!r}", lineno)
                namespace = attr.split(".", 1)[0]
                if namespace not in DATASET_SCOPE:
                    raise PolicyError(
                        f"Order keys must be dataset/replica/site attributes, "
                        f"got {attr!r}", lineno)
                order_spec.append(OrderKey(direction == "decreasing", attr))
            if not order_spec:
                raise PolicyError("Order requires at least one key", lineno)
        else:
            raise PolicyError(f"unknown keyword {head!r}", lineno)

    if not rules:
        raise PolicyError("a policy must contain at least one rule", 1)
    for r in rules[:-1]:
        if r.predicate is None:
            raise PolicyError(
                "only the final rule may omit its predicate", 1)
    final_dataset_rules = [r for r in rules if r.action in _DATASET_ACTIONS]
    if not final_dataset_rules or final_dataset_rules[-1].predicate is not None \
            or rules[-1].action not in _DATASET_ACTIONS:
        raise PolicyError(
            "the final rule must be a predicate-free dataset-level default", 1)
    if trigger is not None and stop is None:
        raise PolicyError("a When directive requires an Until directive", 1)

    return PolicyProgram(
        site_selector=site_selector,
        partition=partition,
        trigger=trigger,
        stop=stop,
        rules=tuple(rules),
        order_spec=tuple(order_spec),
    )


# ---------------------------------------------------------------------------
# Pretty printing.
# ---------------------------------------------------------------------------


def _fmt_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _print_node(node, parent=None) -> str:
    if isinstance(node, Compare):
        if isinstance(node.value, bool):
            literal = "true" if node.value else "false"
        elif isinstance(node.value, float):
            literal = _fmt_number(node.value)
        else:
            literal = str(node.value)
        return f"{node.attr} {node.op} {literal}"
    if isinstance(node, InPatterns):
        return f"{node.attr} in [{' '.join(node.patterns)}]"
    if isinstance(node, BoolAttr):
        return node.attr
    if isinstance(node, Not):
        inner = _print_node(node.child, parent="not")
        if isinstance(node.child, (And, Or)):
            inner = f"({inner})"
        return f"not {inner}"
    if isinstance(node, And):
        parts = []
        for child in node.children:
            text = _print_node(child, parent="and")
            if isinstance(child, Or):
                text = f"({text})"
            parts.append(text)
        return " and ".join(parts)
    if isinstance(node, Or):
        return " or ".join(_print_node(c, parent="or") for c in node.children)
    raise TypeError(f"unknown node {node!r}")


def _print_rule(rule: Rule) -> str:
    if rule.predicate is None:
        return rule.action
    return f"{rule.action} {_print_node(rule.predicate)}"


def pretty_print(program: PolicyProgram) -> str:
    lines = []
    if program.site_selector is not None:
        lines.append(f"On {_print_node(program.site_selector)}")
    if program.partition is not None:
        lines.append(f"Partition {program.partition}")
    if program.trigger is not None:
        lines.append(f"When {_print_node(program.trigger)}")
    if program.stop is not None:
        lines.append(f"Until {_print_node(program.stop)}")
    lines.extend(_print_rule(r) for r in program.rules)
    if program.order_spec:
        keys = " ".join(
            f"{'decreasing' if k.decreasing else 'increasing'} {k.attr}"
            for k in program.order_spec)
        lines.append(f"Order {keys}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


def _pattern_regex(patterns):
    parts = [re.escape(p).replace(r"\*", ".*") for p in patterns]
    return re.compile(r"^(?:" + "|".join(parts) + r")$")


def compile_node(node, registry: AttributeRegistry) -> Callable:
    """Compile an expression tree into fn(Target, EvalContext) -> bool.

    Missing values (producer returned None) make ``==``, ``<``, ``>``,
    ``in`` false and ``!=`` true.
    """
    if isinstance(node, Compare):
        adef = registry.lookup(node.attr)
        if adef is None:
            raise PolicyError(f"unknown attribute {node.attr!r}")
        getter, op, want = adef.getter, node.op, node.value
        coerce = float if adef.kind == NUMBER else (lambda v: v)
        if op == "==":
            return lambda t, c: (lambda v: v is not None and coerce(v) == want)(getter(t, c))
        if op == "!=":
            return lambda t, c: (lambda v: v is None or coerce(v) != want)(getter(t, c))
        if op == "<":
            return lambda t, c: (lambda v: v is not None and coerce(v) < want)(getter(t, c))
        return lambda t, c: (lambda v: v is not None and coerce(v) > want)(getter(t, c))
    if isinstance(node, InPatterns):
        adef = registry.lookup(node.attr)
        if adef is None:
            raise PolicyError(f"unknown attribute {node.attr!r}")
        getter = adef.getter
        regex = _pattern_regex(node.patterns)
        return lambda t, c: (lambda v: v is not None and bool(regex.match(str(v))))(getter(t, c))
    if isinstance(node, BoolAttr):
        adef = registry.lookup(node.attr)
        if adef is None:
            raise PolicyError(f"unknown attribute {node.attr!r}")
        getter = adef.getter
        return lambda t, c: bool(getter(t, c))
    if isinstance(node, Not):
        child = compile_node(node.child, registry)
        return lambda t, c: not child(t, c)
    if isinstance(node, And):
        children = [compile_node(ch, registry) for ch in node.children]
        return lambda t, c: all(fn(t, c) for fn in children)
    if isinstance(node, Or):
        children = [compile_node(ch, registry) for ch in node.children]
        return lambda t, c: any(fn(t, c) for fn in children)
    raise TypeError(f"unknown node {node!r}")


@dataclass(frozen=True)
class CompiledPredicate:
    node: object
    fn: Callable


def compile_predicate(text: str, registry: AttributeRegistry | None = None,
                      scope=BLOCK_SCOPE) -> CompiledPredicate:
    """Parse and compile a standalone predicate (e.g. a partition rule)."""
    registry = registry or get_default_registry()
    tokens = _tokenize(text.strip(), 1)
    cursor = _TokenCursor(tokens, 1)
    node = _parse_predicate(cursor, registry, scope)
    return CompiledPredicate(node, compile_node(node, registry))


def evaluate_on_replica(pred: CompiledPredicate, block_replica, inventory) -> bool:
    """Evaluate a block-replica predicate with a minimal context."""
    target = Target(site=block_replica.site,
                    dataset=block_replica.block.dataset,
                    block_replica=block_replica)
    return pred.fn(target, EvalContext(inventory=inventory))


class CompiledPolicy:
    """A program plus its compiled predicate closures."""

    def __init__(self, program: PolicyProgram, registry: AttributeRegistry | None = None):
        self.program = program
        self.registry = registry or get_default_registry()
        self.site_selector = (compile_node(program.site_selector, self.registry)
                              if program.site_selector is not None else None)
        self.trigger = (compile_node(program.trigger, self.registry)
                        if program.trigger is not None else None)
        self.stop = (compile_node(program.stop, self.registry)
                     if program.stop is not None else None)
        self.dataset_rules = [
            (i, rule, compile_node(rule.predicate, self.registry)
             if rule.predicate is not None else None)
            for i, rule in program.dataset_rules()]
        self.block_rules = [
            (i, rule, compile_node(rule.predicate, self.registry)
             if rule.predicate is not None else None)
            for i, rule in program.block_rules()]
        self._order_getters = [
            (key.decreasing, self.registry.lookup(key.attr).getter)
            for key in program.order_spec]

    def selects_site(self, site, ctx) -> bool:
        if self.site_selector is None:
            return True
        return self.site_selector(Target(site=site), ctx)

    def triggered(self, site, ctx) -> bool:
        if self.trigger is None:
            return False
        return self.trigger(Target(site=site), ctx)

    def satisfied(self, site, ctx) -> bool:
        """The Until predicate; True when no further deletions are required."""
        if self.stop is None:
            return True
        return self.stop(Target(site=site), ctx)


@dataclass(frozen=True)
class Classification:
    category: str  # KEEP | DISMISS | DELETE
    rule_index: int


def compile_program(program: PolicyProgram,
                    registry: AttributeRegistry | None = None) -> CompiledPolicy:
    return CompiledPolicy(program, registry)


def classify(policy: CompiledPolicy, dataset_replica, ctx: EvalContext) -> Classification:
    """First-match classification of one dataset replica.

    Raises EvaluationError if an attribute producer fails; callers treat the
    replica as KEEP for the cycle and report the error.
    """
    target = Target(site=dataset_replica.site,
                    dataset=dataset_replica.dataset,
                    dataset_replica=dataset_replica)
    for index, rule, fn in policy.dataset_rules:
        if fn is None or fn(target, ctx):
            return Classification(_DATASET_ACTIONS[rule.action], index)
    raise EvaluationError("no rule matched; the default rule is missing")


def classify_block(policy: CompiledPolicy, block_replica, ctx: EvalContext):
    """First-match over block-level rules; None if no block rule matches."""
    if not policy.block_rules:
        return None
    target = Target(site=block_replica.site,
                    dataset=block_replica.block.dataset,
                    block_replica=block_replica)
    for index, rule, fn in policy.block_rules:
        if fn is None or fn(target, ctx):
            return Classification(_BLOCK_ACTIONS[rule.action], index)
    return None


def sort_candidates(policy: CompiledPolicy, replicas, ctx: EvalContext) -> list:
    """Stable lexicographic sort of dataset replicas by the order spec.

    Missing attribute values sort last under either direction. Without an
    order spec the input order is preserved.
    """
    if not policy._order_getters:
        return list(replicas)

    keyed = []
    for dr in replicas:
        target = Target(site=dr.site, dataset=dr.dataset, dataset_replica=dr)
        values = []
        for decreasing, getter in policy._order_getters:
            try:
                value = getter(target, ctx)
            except EvaluationError:
                value = None
            values.append(value)
        keyed.append((values, dr))

    import functools

    directions = [k.decreasing for k in policy.program.order_spec]

    def cmp(a, b):
        for (va, vb), decreasing in zip(zip(a[0], b[0]), directions):
            if va is None and vb is None:
                continue
            if va is None:
                return 1
            if vb is None:
                return -1
            if va == vb:
                continue
            less = -1 if va < vb else 1
            return -less if decreasing else less
        return 0

    keyed.sort(key=functools.cmp_to_key(cmp))
    return [dr for _, dr in keyed]
