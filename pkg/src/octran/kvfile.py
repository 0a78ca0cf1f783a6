"""Flat `key=value` text files used for configs, cameras and scene specs."""
from __future__ import annotations

from pathlib import Path


class KVError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KVError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise KVError(f"line {lineno}: empty key")
        if key in out:
            raise KVError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def format_kv(d: dict) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in d.items())


def parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise KVError(f"not a boolean: {s!r}")


def parse_floats(s: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(x) for x in s.split(","))
    if n is not None and len(vals) != n:
        raise KVError(f"expected {n} comma-separated numbers, got {s!r}")
    return vals


def parse_ints(s: str, n: int | None = None) -> tuple[int, ...]:
    vals = tuple(int(x) for x in s.split(","))
    if n is not None and len(vals) != n:
        raise KVError(f"expected {n} comma-separated integers, got {s!r}")
    return vals
