"""Dockerfile subset parser.

Supports the six instructions an ownership-flattening builder needs: FROM,
RUN, COPY, ENV, WORKDIR, ARG. Multi-stage builds and exec-form RUN are
rejected. Parsing is pure: no filesystem or environment access.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass

log = logging.getLogger(__name__)

_VAR_RE = re.compile(r"\$(?:\{([A-Za-z_][A-Za-z0-9_]*)\}|([A-Za-z_][A-Za-z0-9_]*))")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Kind(enum.Enum):
    FROM = "FROM"
    RUN = "RUN"
    COPY = "COPY"
    ENV = "ENV"
    WORKDIR = "WORKDIR"
    ARG = "ARG"


class ParseError(Exception):
    """Recipe text that cannot be interpreted; carries the 1-based source line."""

    def __init__(self, msg, line=None):
        if line is not None:
            msg = "line %d: %s" % (line, msg)
        super().__init__(msg)
        self.line = line


class MissingFromError(ParseError):
    pass


class UnknownInstructionError(ParseError):
    pass


class UnterminatedContinuationError(ParseError):
    pass


class WrongKindError(Exception):
    pass


@dataclass(frozen=True)
class Instruction:
    """One parsed instruction. Only the fields for its kind are set."""

    kind: Kind
    line: int
    image: str | None = None          # FROM
    command: str | None = None        # RUN
    sources: tuple[str, ...] | None = None  # COPY
    dest: str | None = None           # COPY
    key: str | None = None            # ENV / ARG
    value: str | None = None          # ENV / ARG
    path: str | None = None           # WORKDIR

    def render(self):
        """Source-form text, one line, continuations collapsed."""
        if self.kind is Kind.FROM:
            return "FROM %s" % self.image
        if self.kind is Kind.RUN:
            return "RUN %s" % self.command
        if self.kind is Kind.COPY:
            return "COPY %s %s" % (" ".join(self.sources), self.dest)
        if self.kind is Kind.ENV:
            return "ENV %s=%s" % (self.key, self.value)
        if self.kind is Kind.ARG:
            if self.value is None:
                return "ARG %s" % self.key
            return "ARG %s=%s" % (self.key, self.value)
        return "WORKDIR %s" % self.path


@dataclass(frozen=True)
class Recipe:
    instructions: tuple[Instruction, ...]
    source_path: str

    def __post_init__(self):
        if not self.instructions or self.instructions[0].kind is not Kind.FROM:
            raise MissingFromError("recipe must start with FROM")
        if sum(1 for i in self.instructions if i.kind is Kind.FROM) != 1:
            raise ParseError("exactly one FROM is supported")
        lines = [i.line for i in self.instructions]
        if lines != sorted(lines) or len(set(lines)) != len(lines):
            raise ParseError("instruction line numbers must strictly increase")

    @property
    def base_image(self):
        return self.instructions[0].image


def _logical_lines(text):
    """Return (start_line, text) pairs with comment lines dropped and
    continuations joined.

    A trailing backslash removes itself and the newline; the next line is
    appended verbatim, matching reference Dockerfile interpreters.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    physical = [(n, ln) for n, ln in enumerate(lines, 1)
                if not ln.lstrip().startswith("#")]
    out = []
    acc = None
    acc_line = None
    for n, ln in physical:
        if acc is None:
            acc, acc_line = ln, n
        else:
            acc += ln
        if acc.endswith("\\"):
            acc = acc[:-1]
            continue
        if acc.strip():
            out.append((acc_line, acc))
        acc = None
    if acc is not None:
        raise UnterminatedContinuationError("trailing backslash at end of file",
                                            acc_line)
    return out


def _expand(text, variables, line):
    def sub(m):
        name = m.group(1) or m.group(2)
        if name not in variables:
            log.warning("line %d: undefined variable $%s expands to empty string",
                        line, name)
            return ""
        return variables[name]

    return _VAR_RE.sub(sub, text)


def _split_kv(rest, line, keyword):
    head, _, tail = rest.partition(" ")
    if "=" in head:
        key, _, value = rest.partition("=")
        key = key.strip()
    else:
        key, value = head, (tail.strip() if tail.strip() else None)
    if not _NAME_RE.match(key or ""):
        raise ParseError("%s needs a valid name, got %r" % (keyword, key), line)
    return key, value


def parse(text, source_path, build_args=None):
    """Parse Dockerfile text into a Recipe.

    build_args override ARG defaults. ARG/ENV values substitute into later
    instruction payloads via $NAME / ${NAME}; undefined names expand to the
    empty string with a warning.
    """
    build_args = dict(build_args or {})
    variables = {}
    instructions = []
    for line, raw in _logical_lines(text):
        parts = raw.strip().split(None, 1)
        keyword = parts[0]
        rest = parts[1] if len(parts) > 1 else ""
        kind = _KEYWORDS.get(keyword.upper())
        if kind is None:
            raise UnknownInstructionError("unknown instruction %r" % keyword, line)
        if not instructions and kind is not Kind.FROM:
            raise MissingFromError(
                "%s precedes FROM; the first instruction must be FROM"
                % keyword.upper(), line)
        rest = _expand(rest.strip(), variables, line)

        if kind is Kind.FROM:
            if instructions:
                raise ParseError("multi-stage builds are not supported "
                                 "(second FROM)", line)
            if not rest or len(rest.split()) != 1:
                raise ParseError("FROM takes exactly one image reference "
                                 "(AS stages are not supported)", line)
            instructions.append(Instruction(kind, line, image=rest))
        elif kind is Kind.RUN:
            if rest.startswith("["):
                raise UnknownInstructionError(
                    "exec-form RUN is not supported; use shell form", line)
            if not rest:
                raise ParseError("RUN requires a command", line)
            instructions.append(Instruction(kind, line, command=rest))
        elif kind is Kind.COPY:
            parts = rest.split()
            if any(p.startswith("--") for p in parts):
                raise ParseError("COPY flags are not supported", line)
            if len(parts) < 2:
                raise ParseError("COPY needs at least one source and a "
                                 "destination", line)
            instructions.append(Instruction(kind, line,
                                            sources=tuple(parts[:-1]),
                                            dest=parts[-1]))
        elif kind is Kind.ENV:
            key, value = _split_kv(rest, line, "ENV")
            value = "" if value is None else value
            variables[key] = value
            instructions.append(Instruction(kind, line, key=key, value=value))
        elif kind is Kind.ARG:
            key, default = _split_kv(rest, line, "ARG")
            value = build_args.get(key, default)
            variables[key] = "" if value is None else value
            instructions.append(Instruction(kind, line, key=key, value=value))
        else:  # WORKDIR
            if not rest:
                raise ParseError("WORKDIR requires a path", line)
            instructions.append(Instruction(kind, line, path=rest))
    if not instructions:
        raise MissingFromError("no instructions found; recipe must start with FROM")
    return Recipe(tuple(instructions), source_path)


_KEYWORDS = {k.value: k for k in Kind}


def shell_form(run):
    """Argument vector executing a RUN instruction through the shell."""
    if run.kind is not Kind.RUN:
        raise WrongKindError("shell_form needs a RUN instruction, got %s"
                             % run.kind.value)
    return ["/bin/sh", "-c", run.command]


def serialize(recipe):
    """One instruction per line; parse(serialize(r)) round-trips payloads."""
    return "\n".join(i.render() for i in recipe.instructions) + "\n"
