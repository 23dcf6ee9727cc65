"""Flat ``key=value`` run configuration.

A run's settings come from three layers, later ones winning: built-in
defaults, an optional config file, then command-line flags. Unknown keys
are rejected in both the file and the flags. The resolved config is
echoed beside every run's outputs as ``config.txt``.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "command": (str, ""),
    "seed": (int, 0),
    # data
    "data": (str, ""),
    "out": (str, ""),
    "n_scenes": (int, 50),
    "image_size": (str, "128,128"),
    "density_range": (str, "5,40"),
    # PENet
    "phase": (int, 1),
    "epochs": (int, 40),
    "width_mult": (float, 1 / 8),
    "init": (str, ""),
    # PFDNet
    "iters": (int, 200),
    "batch": (int, 4),
    "lr": (float, 1e-3),
    "persp_source": (str, "gt"),
    "penet": (str, ""),
    "penet_mode": (str, "supervised"),
    "lambda_persp": (float, 1.0),
    "n_pfc": (int, 6),
    "flip_prob": (float, 0.5),
    "model": (str, ""),
    # bench
    "op": (str, "fdconv"),
    "shape": (str, "1,256,96,128"),
    "k": (int, 3),
    "rates": (str, "1,4"),
    "windows": (str, "3,7"),
    "bench_repeats": (int, 5),
}


def _parse(key: str, raw) -> object:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    try:
        return kind(str(raw).strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from exc


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _parse(key, value)
    return values


class RunConfig(dict):
    """Resolved settings; attribute access for convenience."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def resolve(cls, file=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls({k: default for k, (_, default) in SCHEMA.items()})
        if file:
            cfg.update(read_config_file(file))
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg[key] = _parse(key, value)
        return cfg

    def echo(self) -> str:
        return "".join(f"{k}={self[k]}\n" for k in sorted(self))

    def write(self, directory) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "config.txt").write_text(self.echo())


def int_list(text: str, name: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from exc


def float_list(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from exc
