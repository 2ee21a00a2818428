"""Design configuration: a sectioned ``key = value`` file.

Sections and keys (defaults in brackets)::

    [design]      mode = single|double, beta (single mode), seed [42]
    [source]      x_min x_max y_min y_max nx ny, density + density parameters
    [target]      as [source]
    [surface_f]   kind = constant|plane|paraboloid|csv + parameters
    [surface_g]   as [surface_f] (double mode)
    [optics]      n1 [1] n2 [1] n3 [1], field = collimated|point-source, source_point = p1, p2, p3
    [solver]      method [auto], epsilon, max_iter [10000], marginal_tol [1e-6], exact_cap [4096]
    [conditions]  alpha [0.9] alpha1 [0.25] alpha2 [1.0]
    [verify]      ray_count [100000] l1_tol [0.05] plane

Densities: ``uniform``; ``gaussian`` with ``sigma``, ``center = cx, cy``;
``ramp`` with ``axis`` [0] and ``slope`` [1] giving ``1 + slope * t`` for the
normalised coordinate ``t`` in [0, 1]; ``csv`` with ``path``.
Surfaces: ``constant`` with ``value``; ``plane`` with ``z0``, ``slope = a, b``;
``paraboloid`` with ``a``, ``z0``, ``center``; ``csv`` with ``path``.
Relative paths resolve against the file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cost import CostModel
from .errors import ConfigError
from .geometry import Grid2, IncidentField, Surface, incident_field, read_grid_csv

DENSITIES = ("uniform", "gaussian", "ramp", "csv")
SURFACES = ("constant", "plane", "paraboloid", "csv")


class _Section:
    """Typed access to one config section with field-naming errors."""

    def __init__(self, parser: configparser.ConfigParser, name: str, required: bool = True):
        if not parser.has_section(name):
            if required:
                raise ConfigError(f"missing section [{name}]")
            parser.add_section(name)
        self.name = name
        self.raw = parser[name]
        self.used: dict[str, str] = {}

    def _get(self, key, default):
        if key in self.raw:
            return self.raw[key].strip()
        if default is _REQUIRED:
            raise ConfigError(f"[{self.name}] missing required field '{key}'")
        return default

    def str(self, key, default=None):
        v = self._get(key, default)
        if v is not None:
            self.used[key] = v
        return v

    def float(self, key, default=None, positive=False):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            out = float(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] field '{key}' is not a number: {v!r}") from None
        if not np.isfinite(out) or (positive and out <= 0):
            raise ConfigError(f"[{self.name}] field '{key}' must be a positive finite number, got {v!r}")
        self.used[key] = repr(out)
        return out

    def int(self, key, default=None, minimum=None):
        v = self._get(key, default)
        if v is None:
            return None
        try:
            out = int(v)
        except ValueError:
            raise ConfigError(f"[{self.name}] field '{key}' is not an integer: {v!r}") from None
        if minimum is not None and out < minimum:
            raise ConfigError(f"[{self.name}] field '{key}' must be >= {minimum}, got {out}")
        self.used[key] = str(out)
        return out

    def vector(self, key, n, default=None):
        v = self._get(key, default)
        if v is None:
            return None
        if isinstance(v, tuple):
            vals = v
        else:
            try:
                vals = tuple(float(s) for s in v.split(","))
            except ValueError:
                raise ConfigError(f"[{self.name}] field '{key}' must be {n} comma-separated numbers") from None
        if len(vals) != n:
            raise ConfigError(f"[{self.name}] field '{key}' must have {n} components, got {len(vals)}")
        self.used[key] = ", ".join(repr(float(x)) for x in vals)
        return tuple(float(x) for x in vals)

    def path(self, key, base: Path):
        p = Path(self.str(key, _REQUIRED))
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"[{self.name}] field '{key}': no such file {p}")
        self.used[key] = str(p)
        return p


_REQUIRED = object()


@dataclass
class DensitySpec:
    kind: str
    params: dict

    def evaluate(self, grid: Grid2) -> np.ndarray:
        x = grid.nodes
        if self.kind == "uniform":
            return np.ones(grid.size)
        if self.kind == "gaussian":
            c = np.asarray(self.params["center"])
            return np.exp(-np.sum((x - c) ** 2, axis=1) / (2 * self.params["sigma"] ** 2))
        if self.kind == "ramp":
            a = self.params["axis"]
            lo, hi = (grid.x_min, grid.x_max) if a == 0 else (grid.y_min, grid.y_max)
            return 1.0 + self.params["slope"] * (x[:, a] - lo) / (hi - lo)
        file_grid, values = read_grid_csv(self.params["path"], "density")
        if file_grid != grid:
            raise ConfigError(f"density file {self.params['path']} does not match the domain grid")
        return values


@dataclass
class SurfaceSpec:
    kind: str
    params: dict

    def build(self, region: Grid2) -> Surface:
        p = self.params
        if self.kind == "constant":
            return Surface.constant(p["value"])
        if self.kind == "csv":
            return Surface.load_csv(p["path"])
        if self.kind == "plane":
            s = Surface.plane(p["z0"], p["slope"])
        else:
            s = Surface.paraboloid(p["a"], p["z0"], p["center"])
        if s.is_constant:
            return s
        # bracket height for the ray/surface root finder
        top = float(np.max(s.eval(region.nodes)))
        return dataclasses.replace(s, zmax=top + 1e-9 * max(1.0, abs(top)))


@dataclass
class DesignConfig:
    mode: str
    source: Grid2
    target: Grid2
    rho0: DensitySpec
    rho1: DensitySpec
    f: SurfaceSpec
    g: SurfaceSpec | None
    beta: float | None
    n1: float
    n2: float
    n3: float
    field: IncidentField
    method: str
    epsilon: float | None
    max_iter: int
    marginal_tol: float
    exact_cap: int
    alpha: float
    alpha1: float
    alpha2: float
    ray_count: int
    l1_tol: float
    plane: float | None
    seed: int
    echo: dict[str, dict[str, str]]

    def surfaces(self) -> tuple[Surface, Surface]:
        region = _hull(self.source, self.target)
        f = self.f.build(region)
        g = Surface.constant(self.beta) if self.mode == "single" else self.g.build(region)
        return f, g

    def model(self) -> CostModel:
        f, g = self.surfaces()
        scale = self.source.diameter
        if self.mode == "single":
            return CostModel.single(f, self.beta, self.n1, self.n2, self.field, scale)
        return CostModel.double(f, g, self.n1, self.n2, self.n3, self.field, scale)

    def output_plane(self) -> float:
        """Height of the plane where landing points are recorded."""
        if self.mode == "single":
            return self.beta
        if self.plane is not None:
            return self.plane
        _, g = self.surfaces()
        return float(np.max(g.eval(self.target.nodes))) + 1.0

    def to_text(self, extra: dict[str, dict[str, str]] | None = None) -> str:
        """Canonical echo of every resolved field, in a fixed order."""
        lines = []
        for section, items in list(self.echo.items()) + list((extra or {}).items()):
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)


def _hull(a: Grid2, b: Grid2) -> Grid2:
    return Grid2(max(a.nx, b.nx), max(a.ny, b.ny), min(a.x_min, b.x_min), max(a.x_max, b.x_max),
                 min(a.y_min, b.y_min), max(a.y_max, b.y_max))


def _grid(sec: _Section) -> Grid2:
    vals = [sec.float(k, _REQUIRED) for k in ("x_min", "x_max", "y_min", "y_max")]
    nx = sec.int("nx", _REQUIRED, minimum=2)
    ny = sec.int("ny", _REQUIRED, minimum=2)
    if not (vals[0] < vals[1] and vals[2] < vals[3]):
        raise ConfigError(f"[{sec.name}] needs x_min < x_max and y_min < y_max")
    return Grid2(nx, ny, *vals)


def _density(sec: _Section, base: Path) -> DensitySpec:
    kind = sec.str("density", "uniform")
    if kind not in DENSITIES:
        raise ConfigError(f"[{sec.name}] field 'density' must be one of {', '.join(DENSITIES)}, got {kind!r}")
    if kind == "gaussian":
        return DensitySpec(kind, {"sigma": sec.float("sigma", _REQUIRED, positive=True),
                                  "center": sec.vector("center", 2, _REQUIRED)})
    if kind == "ramp":
        axis = sec.int("axis", "0")
        if axis not in (0, 1):
            raise ConfigError(f"[{sec.name}] field 'axis' must be 0 or 1")
        slope = sec.float("slope", "1.0")
        if slope <= -1:
            raise ConfigError(f"[{sec.name}] field 'slope' must exceed -1 to keep the density positive")
        return DensitySpec(kind, {"axis": axis, "slope": slope})
    if kind == "csv":
        return DensitySpec(kind, {"path": sec.path("path", base)})
    return DensitySpec(kind, {})


def _surface(sec: _Section, base: Path) -> SurfaceSpec:
    kind = sec.str("kind", _REQUIRED)
    if kind not in SURFACES:
        raise ConfigError(f"[{sec.name}] field 'kind' must be one of {', '.join(SURFACES)}, got {kind!r}")
    if kind == "constant":
        return SurfaceSpec(kind, {"value": sec.float("value", _REQUIRED)})
    if kind == "plane":
        return SurfaceSpec(kind, {"z0": sec.float("z0", _REQUIRED), "slope": sec.vector("slope", 2, "0, 0")})
    if kind == "paraboloid":
        return SurfaceSpec(kind, {"a": sec.float("a", _REQUIRED), "z0": sec.float("z0", _REQUIRED),
                                  "center": sec.vector("center", 2, "0, 0")})
    return SurfaceSpec(kind, {"path": sec.path("path", base)})


SECTIONS = ("design", "source", "target", "surface_f", "surface_g", "optics", "solver", "conditions", "verify")


def parse_config(text: str, base: Path | str = ".", ignore: tuple[str, ...] = ()) -> DesignConfig:
    """Parse and validate configuration text; raises ``ConfigError`` naming the offending field.

    Sections listed in ``ignore`` are skipped (used for manifest extras).
    """
    base = Path(base)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS) - set(ignore)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    design = _Section(parser, "design")
    mode = design.str("mode", _REQUIRED)
    if mode not in ("single", "double"):
        raise ConfigError(f"[design] field 'mode' must be single or double, got {mode!r}")
    beta = design.float("beta", _REQUIRED) if mode == "single" else None
    seed = design.int("seed", "42", minimum=0)

    src = _Section(parser, "source")
    source = _grid(src)
    rho0 = _density(src, base)
    tgt = _Section(parser, "target")
    target = _grid(tgt)
    rho1 = _density(tgt, base)

    sf = _Section(parser, "surface_f")
    f = _surface(sf, base)
    sg = _Section(parser, "surface_g", required=mode == "double")
    g = _surface(sg, base) if mode == "double" else None

    opt = _Section(parser, "optics", required=False)
    n1 = opt.float("n1", "1.0", positive=True)
    n2 = opt.float("n2", "1.0", positive=True)
    n3 = opt.float("n3", "1.0", positive=True)
    kind = opt.str("field", "collimated")
    if kind == "collimated":
        field = incident_field("collimated")
    elif kind == "point-source":
        P = opt.vector("source_point", 3, _REQUIRED)
        if not P[2] < 0:
            raise ConfigError("[optics] field 'source_point' needs p3 < 0")
        field = incident_field("point-source", P)
    else:
        raise ConfigError(f"[optics] field 'field' must be collimated or point-source, got {kind!r}")

    sol = _Section(parser, "solver", required=False)
    method = sol.str("method", "auto")
    if method not in ("auto", "exact", "sinkhorn"):
        raise ConfigError(f"[solver] field 'method' must be auto, exact or sinkhorn, got {method!r}")
    epsilon = sol.float("epsilon", None, positive=True)
    max_iter = sol.int("max_iter", "10000", minimum=1)
    marginal_tol = sol.float("marginal_tol", "1e-6", positive=True)
    exact_cap = sol.int("exact_cap", "4096", minimum=1)

    cond = _Section(parser, "conditions", required=False)
    alpha = cond.float("alpha", "0.9", positive=True)
    alpha1 = cond.float("alpha1", "0.25", positive=True)
    alpha2 = cond.float("alpha2", "1.0", positive=True)

    ver = _Section(parser, "verify", required=False)
    ray_count = ver.int("ray_count", "100000", minimum=1)
    l1_tol = ver.float("l1_tol", "0.05", positive=True)
    plane = ver.float("plane", None)

    sections = [design, src, tgt, sf, sg, opt, sol, cond, ver]
    for sec in sections:
        extra = set(sec.raw.keys()) - set(sec.used)
        if extra:
            raise ConfigError(f"[{sec.name}] unknown field(s): {', '.join(sorted(extra))}")
    echo = {sec.name: dict(sorted(sec.used.items())) for sec in sections if sec.used}

    return DesignConfig(
        mode=mode, source=source, target=target, rho0=rho0, rho1=rho1, f=f, g=g, beta=beta,
        n1=n1, n2=n2, n3=n3, field=field, method=method, epsilon=epsilon, max_iter=max_iter,
        marginal_tol=marginal_tol, exact_cap=exact_cap, alpha=alpha, alpha1=alpha1, alpha2=alpha2,
        ray_count=ray_count, l1_tol=l1_tol, plane=plane, seed=seed, echo=echo,
    )


def load_config(path) -> DesignConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)
