"""Plain-text key=value experiment configs.

One `key=value` per line; blank lines and `#` comments are skipped. Block
strategy overrides use dotted keys (`strategy.Layer3=dgconv`). The same
format is shared by the architecture specs and the experiment harness;
consumers validate the key set.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text or an unknown/invalid key (a usage error)."""


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def apply_overrides(config: dict[str, str], overrides) -> dict[str, str]:
    merged = dict(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def format_config(config: dict[str, str]) -> str:
    return "\n".join(f"{k}={v}" for k, v in sorted(config.items())) + "\n"
