"""Flat ``key = value`` configuration files."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

from .months import parse_month
from .synthetic import Contagion, SynthConfig


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Blank lines and ``#`` comments are ignored; later keys override earlier ones."""
    out: dict[str, str] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{no}: empty key")
        out[key] = value
    return out


def load_config(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    try:
        return parse_config(p.read_text(encoding="utf-8"), str(p))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None


def apply_overrides(cfg: dict[str, str], overrides: Iterable[str]) -> dict[str, str]:
    out = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (p.strip() for p in item.split("=", 1))
        out[k] = v
    return out


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def section(cfg: dict[str, str], keys: Iterable[str]) -> dict[str, str]:
    keys = set(keys)
    return {k: v for k, v in cfg.items() if k in keys}


SYNTH_KEYS = {f for f in SynthConfig.__dataclass_fields__ if f != "contagion"} | \
    set(Contagion.__dataclass_fields__)


def synth_config(cfg: dict[str, str]) -> SynthConfig:
    """Build a generator config, naming the offending key on bad values."""
    base = SynthConfig()
    kw, ckw = {}, {}
    for key, raw in section(cfg, SYNTH_KEYS).items():
        target = ckw if key in Contagion.__dataclass_fields__ else kw
        default = getattr(base.contagion if target is ckw else base, key)
        try:
            if key == "start_month":
                parse_month(raw)
                value = raw
            elif isinstance(default, int) and not isinstance(default, bool):
                value = int(raw)
            else:
                value = float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        target[key] = value
    return SynthConfig(contagion=Contagion(**ckw), **kw)


SPLIT_DEFAULTS = {"train_months": "18", "test_months": "10", "val_fraction": "0.2", "split_seed": "0",
                  "lookback": "6", "train_start": "", "correlation_threshold": "0.70"}
