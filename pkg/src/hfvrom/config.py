"""INI run configuration.

Sections and keys (defaults in brackets; case-dependent defaults follow the
selected case)::

    [case]   case (required: manufactured | cavity), n (required, >= 1),
             output [out], dump_times [t_end]
    [fluid]  rho [1], mu [0.01], diffusivity [0 manufactured, 0.01 cavity]
    [time]   cfl [1], t_end [2.5 manufactured, 5 cavity],
             snapshot_interval [0.01], tolerance [1e-10]
    [pod]    kappa_wu [0.99999 | 0.9999], kappa_pi [0.9999 | 0.99],
             kappa_y [0.9999]
    [rom]    dt_divisor [50], ablate_pressure [false],
             method [consistent], dissipation [exact]

Relative ``output`` paths resolve against the config file's directory.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError

CASES = ("manufactured", "cavity")
SCHEMA = {
    "case": ("case", "n", "output", "dump_times"),
    "fluid": ("rho", "mu", "diffusivity"),
    "time": ("cfl", "t_end", "snapshot_interval", "tolerance"),
    "pod": ("kappa_wu", "kappa_pi", "kappa_y"),
    "rom": ("dt_divisor", "ablate_pressure", "method", "dissipation"),
}
CASE_DEFAULTS = {
    "manufactured": {"diffusivity": 0.0, "t_end": 2.5,
                     "kappa": {"momentum": 0.99999, "pressure": 0.9999}},
    "cavity": {"diffusivity": 1e-2, "t_end": 5.0,
               "kappa": {"momentum": 0.9999, "pressure": 0.99, "species": 0.9999}},
}


@dataclass(frozen=True)
class RunConfig:
    case: str
    n: int
    output: Path = Path("out")
    dump_times: tuple = ()
    rho: float = 1.0
    mu: float = 1e-2
    diffusivity: float = 0.0
    cfl: float = 1.0
    t_end: float = 2.5
    snapshot_interval: float = 1e-2
    tolerance: float = 1e-10
    kappa: dict = field(default_factory=dict)
    dt_divisor: int = 50
    ablate_pressure: bool = False
    method: str = "consistent"
    dissipation: str = "exact"

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _locate(text, section, key):
    """Line number (1-based) of ``key`` inside ``[section]``, or ``None``."""
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip().lower()
        elif current == section and re.match(rf"{re.escape(key)}\s*[=:]", line, re.I):
            return no
    return None


def _number(raw, kind, key, line):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}"
                          + (f" (line {line})" if line else ""), key=key, line=line) from None


def parse_config(text: str, base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",),
                                       interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}",
                          line=line) from None

    values = {}
    lines = {}
    for section in parser.sections():
        name = section.strip().lower()
        if name not in SCHEMA:
            line = next((no for no, raw in enumerate(text.splitlines(), 1)
                         if raw.strip().lower() == f"[{name}]"), None)
            raise ConfigError(f"unknown section [{section}] (line {line})", key=section, line=line)
        for key, raw in parser.items(section):
            line = _locate(text, name, key)
            if key not in SCHEMA[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}] (line {line})",
                                  key=key, line=line)
            values[key] = raw.strip()
            lines[key] = line

    for key in ("case", "n"):
        if key not in values:
            raise ConfigError(f"missing required key {key!r} in [case]", key=key)
    case = values["case"].lower()
    if case not in CASES:
        raise ConfigError(f"case must be one of {CASES}, got {case!r} (line {lines['case']})",
                          key="case", line=lines["case"])
    defaults = CASE_DEFAULTS[case]

    def num(key, kind, default):
        if key not in values:
            return default
        return _number(values[key], kind, key, lines[key])

    def bad(key, why):
        raise ConfigError(f"{key} {why} (line {lines.get(key)})", key=key, line=lines.get(key))

    n = num("n", int, None)
    if n < 1:
        bad("n", "must be >= 1")
    rho = num("rho", float, 1.0)
    mu = num("mu", float, 1e-2)
    diffusivity = num("diffusivity", float, defaults["diffusivity"])
    if rho <= 0:
        bad("rho", "must be positive")
    if mu < 0:
        bad("mu", "must be nonnegative")
    if diffusivity < 0:
        bad("diffusivity", "must be nonnegative")
    cfl = num("cfl", float, 1.0)
    t_end = num("t_end", float, defaults["t_end"])
    interval = num("snapshot_interval", float, 1e-2)
    tolerance = num("tolerance", float, 1e-10)
    for key, val in (("cfl", cfl), ("snapshot_interval", interval), ("tolerance", tolerance)):
        if not val > 0:
            bad(key, "must be positive")
    if t_end < 0:
        bad("t_end", "must be nonnegative")

    kappa = dict(defaults["kappa"])
    for key, var in (("kappa_wu", "momentum"), ("kappa_pi", "pressure"), ("kappa_y", "species")):
        if key in values:
            val = num(key, float, None)
            if not 0 < val <= 1:
                bad(key, "must lie in (0, 1]")
            kappa[var] = val
    if case == "cavity":
        kappa.setdefault("species", 0.9999)

    divisor = num("dt_divisor", int, 50)
    if divisor < 1:
        bad("dt_divisor", "must be >= 1")
    ablate = values.get("ablate_pressure", "false").lower()
    if ablate not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
        bad("ablate_pressure", "must be a boolean")
    method = values.get("method", "consistent")
    if method not in ("consistent", "derivative"):
        bad("method", "must be 'consistent' or 'derivative'")
    dissipation = values.get("dissipation", "exact")
    if dissipation not in ("exact", "frozen"):
        bad("dissipation", "must be 'exact' or 'frozen'")

    dumps = ()
    if "dump_times" in values:
        parts = [p for p in re.split(r"[,\s]+", values["dump_times"]) if p]
        dumps = tuple(_number(p, float, "dump_times", lines["dump_times"]) for p in parts)
    else:
        dumps = (t_end,)

    output = Path(values.get("output", "out"))
    if not output.is_absolute() and base_dir is not None:
        output = Path(base_dir) / output

    return RunConfig(case=case, n=n, output=output, dump_times=dumps, rho=rho, mu=mu,
                     diffusivity=diffusivity, cfl=cfl, t_end=t_end,
                     snapshot_interval=interval, tolerance=tolerance, kappa=kappa,
                     dt_divisor=divisor, ablate_pressure=ablate in ("true", "yes", "1", "on"),
                     method=method, dissipation=dissipation)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base_dir=path.parent)
