"""Monitor policy files: parsing, canonical rendering and rule matching.

Format::

    SYS_NUM ACTION
    0        0      // read     ALLOW
    BLACKLIST   0  "/path/to/top/secret*"
    BLACKLIST  43  "112.233.0.0/16"

Path patterns: ``*`` matches any suffix, ``[...]`` matches one or more
characters of the class, everything else is literal, whole-string match.
Rules on network syscalls take IPv4 CIDR blocks instead.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import ipaddress
import re
from dataclasses import dataclass, field
from typing import Optional

from . import syscalls
from .errors import ParseError


class Action(enum.IntEnum):
    ALLOW = 0
    LOG = 1
    NOTIFY = 2
    TRAP = 3
    KILL = 5


class ListKind(enum.Enum):
    BLACKLIST = "BLACKLIST"
    WHITELIST = "WHITELIST"


@dataclass(frozen=True)
class Rule:
    kind: ListKind
    sysno: int
    pattern: str

    @property
    def network(self) -> bool:
        return self.sysno in syscalls.NETWORK

    def matches(self, value: Optional[str]) -> bool:
        if value is None:
            return False
        if self.network:
            try:
                return ipaddress.IPv4Address(value) in _cidr(self.pattern)
            except ValueError:
                return False
        return _glob(self.pattern).fullmatch(value) is not None


@dataclass
class Policy:
    actions: dict = field(default_factory=dict)
    rules: list = field(default_factory=list)
    digest: bytes = field(default=b"", compare=False)

    def rules_for(self, sysno: int) -> list:
        return [(i, r) for i, r in enumerate(self.rules) if r.sysno == sysno]


@functools.lru_cache(maxsize=1024)
def _cidr(text: str) -> ipaddress.IPv4Network:
    return ipaddress.IPv4Network(text, strict=True)


@functools.lru_cache(maxsize=1024)
def _glob(pattern: str) -> "re.Pattern":
    out = []
    i = 0
    while i < len(pattern):
        ch = pattern[i]
        if ch == "*":
            if pattern.startswith("**", i):
                raise ValueError("'**' is not supported")
            out.append(".*")
            i += 1
        elif ch == "[":
            j = i + 1
            body = []
            while j < len(pattern) and pattern[j] != "]":
                if pattern[j] == "\\":
                    if j + 1 >= len(pattern):
                        raise ValueError("dangling escape in character class")
                    body.append(pattern[j:j + 2])
                    j += 2
                elif pattern[j] == "[":
                    raise ValueError("nested '[' in character class")
                else:
                    body.append(pattern[j])
                    j += 1
            if j >= len(pattern):
                raise ValueError("unbalanced '['")
            if not body:
                raise ValueError("empty character class")
            out.append("[" + "".join(body) + "]+")
            i = j + 1
        elif ch == "]":
            raise ValueError("unbalanced ']'")
        elif ch == "\\":
            if i + 1 >= len(pattern):
                raise ValueError("dangling escape")
            out.append(re.escape(pattern[i + 1]))
            i += 2
        else:
            out.append(re.escape(ch))
            i += 1
    try:
        return re.compile("".join(out), re.DOTALL)
    except re.error as exc:
        raise ValueError(str(exc)) from None


def _strip_comment(line: str) -> str:
    in_quote = False
    i = 0
    while i < len(line):
        ch = line[i]
        if ch == "\\" and in_quote:
            i += 2
            continue
        if ch == '"':
            in_quote = not in_quote
        elif not in_quote and line.startswith("//", i):
            return line[:i]
        i += 1
    return line


_ACTION_LINE = re.compile(r"(\d+)\s+(\d+)")
_RULE_LINE = re.compile(r'(BLACKLIST|WHITELIST)\s+(\d+)\s+"((?:[^"\\]|\\.)*)"')
_HEADER = re.compile(r"SYS_NUM\s+ACTION")


def load_policy(data: bytes) -> Policy:
    """Parse a policy file. The digest is SHA-256 over the raw bytes."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"not UTF-8: {exc}") from None
    policy = Policy(digest=hashlib.sha256(data).digest())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line or _HEADER.fullmatch(line):
            continue
        m = _ACTION_LINE.fullmatch(line)
        if m:
            sysno, code = int(m.group(1)), int(m.group(2))
            try:
                action = Action(code)
            except ValueError:
                raise ParseError(lineno, f"undefined action code {code}") from None
            if sysno in policy.actions:
                raise ParseError(lineno, f"duplicate action for syscall {sysno}")
            policy.actions[sysno] = action
            continue
        m = _RULE_LINE.fullmatch(line)
        if m:
            rule = Rule(ListKind(m.group(1)), int(m.group(2)), m.group(3))
            try:
                if rule.network:
                    _cidr(rule.pattern)
                else:
                    _glob(rule.pattern)
            except ValueError as exc:
                kind = "malformed CIDR" if rule.network else "bad pattern"
                raise ParseError(lineno, f"{kind} {rule.pattern!r}: {exc}") from None
            policy.rules.append(rule)
            continue
        if re.sub(r"\\.", "", line).count('"') % 2:
            raise ParseError(lineno, "unbalanced quotes")
        raise ParseError(lineno, f"unrecognized line {line!r}")
    return policy


def render(policy: Policy) -> str:
    """Canonical text form; ``load_policy(render(p).encode()) == p``."""
    lines = ["SYS_NUM ACTION"]
    for sysno, action in sorted(policy.actions.items()):
        lines.append(f"{sysno:<8} {int(action):<6} // {syscalls.name(sysno):<8} {action.name}")
    if policy.rules:
        lines.append("")
    for rule in policy.rules:
        lines.append(f'{rule.kind.value:<10} {rule.sysno:>3}  "{rule.pattern}"')
    return "\n".join(lines) + "\n"
