"""Flat key=value run configuration with one include level.

Files look like:

    # comment
    include base.cfg
    steps = 6000
    lr = 2e-4

Included files are resolved relative to the including file and may not include
further files. Later keys win, and command-line overrides win over files. Every
command resolves its full default set through this object, so the manifest echo
is sufficient to re-run without the original shell invocation.
"""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _parse_lines(text: str, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include\t"):
            raise ConfigError(f"{source}:{lineno}: nested include is not allowed", key="include")
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value.strip()
    return values


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    body_lines = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line.startswith("include ") or line.startswith("include\t"):
            inc = (path.parent / line.split(None, 1)[1]).resolve()
            if not inc.is_file():
                raise ConfigError(f"{path}:{lineno}: include not found: {inc}", key="include")
            values.update(_parse_lines(inc.read_text(), str(inc)))
        else:
            body_lines.append(raw)
    values.update(_parse_lines("\n".join(body_lines), str(path)))
    return values


class RunConfig:
    """Resolved string key-value map with typed accessors."""

    def __init__(self, values: dict[str, str], known: set[str] | None = None):
        self.values = dict(values)
        if known is not None:
            unknown = sorted(set(self.values) - known)
            if unknown:
                raise ConfigError(f"unknown config key {unknown[0]!r}", key=unknown[0])

    @classmethod
    def resolve(
        cls,
        defaults: dict[str, str],
        file_path: str | None = None,
        overrides: dict[str, str] | None = None,
    ) -> "RunConfig":
        values = dict(defaults)
        file_values = read_config_file(file_path) if file_path else {}
        cli_values = dict(overrides or {})
        for src in (file_values, cli_values):
            for key in src:
                if key not in defaults:
                    raise ConfigError(f"unknown config key {key!r}", key=key)
            values.update(src)
        return cls(values, known=set(defaults))

    def _require(self, key: str) -> str:
        if key not in self.values or self.values[key] == "":
            raise ConfigError(f"missing required config key {key!r}", key=key)
        return self.values[key]

    def get_str(self, key: str) -> str:
        return self._require(key)

    def get_int(self, key: str) -> int:
        raw = self._require(key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} must be an integer, got {raw!r}", key=key)

    def get_float(self, key: str) -> float:
        raw = self._require(key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} must be a number, got {raw!r}", key=key)

    def get_bool(self, key: str) -> bool:
        raw = self._require(key).lower()
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r} must be boolean, got {raw!r}", key=key)

    def get_path(self, key: str) -> Path:
        return Path(self._require(key)).expanduser()

    def get_list(self, key: str) -> list[str]:
        raw = self._require(key)
        return [item.strip() for item in raw.split(",") if item.strip()]

    def get_int_list(self, key: str) -> list[int]:
        out = []
        for item in self.get_list(key):
            try:
                out.append(int(item))
            except ValueError:
                raise ConfigError(f"key {key!r} must list integers, got {item!r}", key=key)
        return out

    def manifest_dict(self) -> dict[str, str]:
        return dict(sorted(self.values.items()))


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    """--set key=value arguments."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_manifest(path, command: str, config: RunConfig, extra: dict | None = None) -> None:
    from . import __version__

    payload = {
        "command": command,
        "config": config.manifest_dict(),
        "format_version": 1,
        "package_version": __version__,
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
