"""Rules and targets: the YAML input model for the parallel make."""

from __future__ import annotations

import io
import os
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Union

import yaml

Source = Union[str, os.PathLike, IO[str]]


class PmakeError(Exception):
    pass


class ParseError(PmakeError):
    def __init__(self, message: str, line: int | None = None, source: str = ""):
        self.line = line
        self.source = source
        where = f"{source}:" if source else ""
        where += f"{line}: " if line is not None else (": " if source else "")
        super().__init__(f"{where}{message}")


class UnsupportedIterable(PmakeError):
    pass


@dataclass(frozen=True)
class ResourceSet:
    """One rule instance's allocation; ``time`` is in minutes."""

    time: float
    nrs: int = 1
    cpu: int = 1
    gpu: int = 0
    ranks: int = 1

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError("time must be > 0")
        if self.nrs < 1 or self.cpu < 1 or self.ranks < 1 or self.gpu < 0:
            raise ValueError("need nrs >= 1, cpu >= 1, ranks >= 1, gpu >= 0")

    @property
    def node_hours(self) -> float:
        return self.time / 60.0 * self.nrs


@dataclass
class Loop:
    """``var -> iterable`` bindings plus the templates they fill in."""

    vars: dict[str, list]
    templates: dict[str, str]


@dataclass
class Rule:
    name: str
    resources: ResourceSet
    script: str
    inp: dict[str, str] = field(default_factory=dict)
    out: dict[str, str] = field(default_factory=dict)
    setup: str = ""
    loop: Loop | None = None

    @property
    def variable(self) -> str | None:
        """The single template variable bound by matching an output name."""
        names = set()
        for tpl in self.out.values():
            names.update(template_fields(tpl))
        return next(iter(names)) if names else None


@dataclass
class Target:
    name: str
    dirname: str = "."
    out: dict[str, str] = field(default_factory=dict)
    loop: Loop | None = None
    attrs: dict[str, Any] = field(default_factory=dict)


_RULE_KEYS = {"resources", "inp", "out", "setup", "script", "loop"}
_RESOURCE_KEYS = {"time", "nrs", "cpu", "gpu", "ranks"}
_RANGE = re.compile(r"^\s*range\s*\(\s*(-?\d+)\s*(?:,\s*(-?\d+)\s*(?:,\s*(-?\d+)\s*)?)?\)\s*$")
_INT = re.compile(r"^-?\d+$")


def template_fields(template: str) -> list[str]:
    """Root names referenced by ``{...}`` fields, e.g. ``"{inp[a]}-{n}"`` gives ``["inp", "n"]``."""
    out = []
    for _, fname, _, _ in string.Formatter().parse(template):
        if fname is None:
            continue
        root = re.split(r"[.\[]", fname, maxsplit=1)[0]
        if root and root not in out:
            out.append(root)
    return out


def expand_iterable(spec: Any) -> list:
    """``range(...)`` with the usual half-open meaning, or a comma list.

    Only these forms are accepted; nothing is evaluated.
    """
    if isinstance(spec, list):
        return list(spec)
    if isinstance(spec, bool) or not isinstance(spec, (str, int)):
        raise UnsupportedIterable(f"unsupported iterable {spec!r}")
    if isinstance(spec, int):
        return [spec]
    m = _RANGE.match(spec)
    if m:
        args = [int(a) for a in m.groups() if a is not None]
        if len(args) == 3 and args[2] == 0:
            raise UnsupportedIterable("range() step must not be zero")
        return list(range(*args))
    text = spec.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    if "(" in text or ")" in text:
        raise UnsupportedIterable(f"unsupported iterable {spec!r}; use range(...) or a comma list")
    items = [x.strip() for x in text.split(",")]
    if not text.strip() or any(not x for x in items):
        raise UnsupportedIterable(f"unsupported iterable {spec!r}")
    return [int(x) if _INT.match(x) else x.strip("'\"") for x in items]


# --- YAML with line numbers ---------------------------------------------


def _read(source: Source) -> tuple[str, str]:
    if isinstance(source, os.PathLike):
        path = Path(source)
        return path.read_text(), str(path)
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        return source.read(), getattr(source, "name", "")
    return source, ""


def _line_index(node, path=(), index=None) -> dict[tuple, int]:
    index = {} if index is None else index
    index.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            index[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), index)
    return index


class _Doc:
    def __init__(self, source: Source, what: str):
        text, self.name = _read(source)
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ParseError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                             mark.line + 1 if mark else None, self.name) from exc
        self.lines = _line_index(node) if node is not None else {}
        if self.data is None:
            self.data = {}
        if not isinstance(self.data, dict):
            raise ParseError(f"{what} file must be a mapping of names", 1, self.name)

    def error(self, message: str, *path) -> ParseError:
        for k in range(len(path), -1, -1):
            if path[:k] in self.lines:
                return ParseError(message, self.lines[path[:k]], self.name)
        return ParseError(message, None, self.name)


def _templates(doc: _Doc, value: Any, *path) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise doc.error(f"{path[-1]} must map names to file templates", *path)
    out = {}
    for k, v in value.items():
        if not isinstance(v, (str, int, float)) or isinstance(v, bool):
            raise doc.error(f"template {k!r} must be text", *path, k)
        out[str(k)] = str(v)
    return out


def _loop(doc: _Doc, value: Any, templates_key: str, *path) -> Loop:
    if not isinstance(value, dict):
        raise doc.error("loop must be a mapping", *path)
    templates = _templates(doc, value.get(templates_key), *path, templates_key)
    if not templates:
        raise doc.error(f"loop needs a {templates_key!r} section of templates", *path)
    variables = {}
    for k, v in value.items():
        if k == templates_key:
            continue
        try:
            variables[str(k)] = expand_iterable(v)
        except UnsupportedIterable as exc:
            raise doc.error(str(exc), *path, k) from exc
    if not variables:
        raise doc.error("loop declares no variable", *path)
    return Loop(variables, templates)


def parse_rules(source: Source) -> list[Rule]:
    doc = _Doc(source, "rules")
    rules = []
    for name, body in doc.data.items():
        name = str(name)
        if not isinstance(body, dict):
            raise doc.error(f"rule {name!r} must be a mapping", name)
        unknown = set(body) - _RULE_KEYS
        if unknown:
            raise doc.error(f"rule {name!r}: unknown keys {sorted(unknown)}", name, sorted(unknown)[0])
        res = body.get("resources")
        if not isinstance(res, dict) or "time" not in res:
            raise doc.error(f"rule {name!r}: resources.time is required", name, "resources")
        bad = set(res) - _RESOURCE_KEYS
        if bad:
            raise doc.error(f"rule {name!r}: unknown resource keys {sorted(bad)}", name, "resources")
        try:
            resources = ResourceSet(**res)
        except (TypeError, ValueError) as exc:
            raise doc.error(f"rule {name!r}: {exc}", name, "resources") from exc
        if not isinstance(body.get("script"), str):
            raise doc.error(f"rule {name!r}: script is required", name)
        rule = Rule(
            name=name,
            resources=resources,
            script=body["script"],
            inp=_templates(doc, body.get("inp"), name, "inp"),
            out=_templates(doc, body.get("out"), name, "out"),
            setup=str(body.get("setup") or ""),
            loop=_loop(doc, body["loop"], "inp", name, "loop") if "loop" in body else None,
        )
        fields = {f for tpl in rule.out.values() for f in template_fields(tpl)}
        if len(fields) > 1:
            raise doc.error(
                f"rule {name!r}: out templates use {len(fields)} variables {sorted(fields)}; only one is allowed",
                name, "out")
        rules.append(rule)
    return rules


def parse_targets(source: Source) -> list[Target]:
    doc = _Doc(source, "targets")
    targets = []
    for name, body in doc.data.items():
        name = str(name)
        if not isinstance(body, dict):
            raise doc.error(f"target {name!r} must be a mapping", name)
        attrs = {str(k): v for k, v in body.items() if k not in ("dirname", "out", "loop")}
        targets.append(
            Target(
                name=name,
                dirname=str(body.get("dirname") or "."),
                out=_templates(doc, body.get("out"), name, "out"),
                loop=_loop(doc, body["loop"], "tgt", name, "loop") if "loop" in body else None,
                attrs=attrs,
            )
        )
    return targets
