"""Flat ``key = value`` text configs and run provenance records.

One zero-dependency format serves run configs, checkpoint metadata, and the
provenance record written next to every CLI output: one ``key = value`` pair
per line, ``#`` comments, blank lines ignored.  Keys are validated against a
schema by the CLI; this module only parses and formats.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ConfigError, FormatError


def parse_flat(text: str) -> dict[str, str]:
    """Parse flat key=value text into an ordered dict of strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_flat(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_flat(path.read_text())


def format_flat(values: dict) -> str:
    return "".join(f"{k} = {_to_text(v)}\n" for k, v in values.items())


def write_flat(values: dict, path) -> None:
    Path(path).write_text(format_flat(values))


def _to_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_to_text(v) for v in value)
    return str(value)


def parse_bool(text: str, key: str = "") -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key or 'value'}: expected a boolean, got {text!r}")


def parse_int_list(text: str, key: str = "") -> list[int]:
    try:
        items = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"{key or 'value'}: expected comma-separated integers, got {text!r}") from e
    if not items:
        raise ConfigError(f"{key or 'value'}: empty list")
    return items


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(out_dir, command: str, values: dict, hashes: dict[str, str]) -> Path:
    """Write the flat provenance record that makes a run reproducible."""
    record: dict = {"command": command}
    record.update(values)
    for name, digest in hashes.items():
        record[f"sha256_{name}"] = digest
    path = Path(out_dir) / "provenance.txt"
    write_flat(record, path)
    return path
