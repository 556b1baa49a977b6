"""Sectioned ``key = value`` text shared by model files and run configs.

Grammar::

    file     := (blank | comment | header | entry)*
    header   := "[" name "]"
    entry    := key "=" value
    comment  := "#" anything

Keys may repeat inside a section (e.g. ``term``); their order is kept.
Section names may repeat only when the caller allows it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class Section:
    name: str
    entries: list = field(default_factory=list)
    line: int = 0

    def keys(self) -> list[str]:
        return [k for k, _ in self.entries]

    def get_all(self, key: str) -> list[str]:
        return [v for k, v in self.entries if k == key]

    def get(self, key: str, default: str | None = None) -> str | None:
        vals = self.get_all(key)
        if len(vals) > 1:
            raise ConfigError(f"[{self.name}] key {key!r} given {len(vals)} times", key=f"{self.name}.{key}")
        return vals[0] if vals else default

    def check_keys(self, allowed, repeatable=()) -> None:
        seen = set()
        for k in self.keys():
            if k not in allowed:
                raise ConfigError(f"unknown key {k!r} in [{self.name}]", key=f"{self.name}.{k}")
            if k in seen and k not in repeatable:
                raise ConfigError(f"[{self.name}] key {k!r} given more than once", key=f"{self.name}.{k}")
            seen.add(k)


def parse_sections(text: str) -> list[Section]:
    """Split text into sections; entries before the first header are an error."""
    out: list[Section] = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"line {no}: malformed section header {raw!r}")
            out.append(Section(line[1:-1].strip(), [], no))
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {no}: expected 'key = value', got {raw!r}")
        if not out:
            raise ConfigError(f"line {no}: entry {key.strip()!r} outside any section", key=key.strip())
        out[-1].entries.append((key.strip(), value.strip()))
    return out


def format_sections(sections: list[tuple[str, list[tuple[str, str]]]]) -> str:
    blocks = []
    for name, entries in sections:
        blocks.append("\n".join([f"[{name}]"] + [f"{k} = {v}" for k, v in entries]))
    return "\n\n".join(blocks) + "\n"


def fmt_float(x: float) -> str:
    return repr(float(x))


def fmt_floats(xs) -> str:
    return ", ".join(fmt_float(x) for x in xs)


def to_float(value: str, key: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}", key=key) from exc


def to_int(value: str, key: str) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key) from exc
    if not f.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
    return int(f)


def to_floats(value: str, key: str) -> tuple:
    if not value.strip():
        return ()
    return tuple(to_float(v.strip(), key) for v in value.split(","))


def to_bool(value: str, key: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
