"""Scene configuration files and particle seeding.

A scene is a YAML document; see ``FORMATS.md`` for the schema. Omitted fields
take the defaults below (unit box, 25 nodes per axis, dt = 3e-4, gravity 9.8
downwards, 150 frames sampled every 10 steps).
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import tensor_math as tm
from .boundary import BoundaryCondition
from .constitutive import ElasticModel, MaterialField, MaterialSpec, PhysicalParams, PlasticModel
from .errors import EmptySource, MPMError, ParseError, ValidationError
from .mpm import GridSpec, Simulation, StepParams, init_state
from .points import load_points

CFL_LIMIT = 0.5
SOURCE_KINDS = ("box", "sphere", "point_file")


@dataclass(frozen=True)
class LearnableMaterial:
    """Placeholder whose categories are estimated; ``params`` is the starting guess."""

    params: PhysicalParams = field(default_factory=PhysicalParams)


@dataclass(frozen=True)
class ParticleSource:
    kind: str
    lower: tuple = None
    upper: tuple = None
    center: tuple = None
    radius: float = None
    path: str = None
    extent: float = None
    opacity_threshold: float = 0.0
    density: float = 1000.0
    velocity: tuple = (0.0, 0.0, 0.0)
    material: int = 0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValidationError(f"unknown source kind '{self.kind}'")
        if not self.density > 0:
            raise ValidationError("source density must be positive")
        need = {"box": ("lower", "upper"), "sphere": ("center", "radius"), "point_file": ("path",)}[self.kind]
        for name in need:
            if getattr(self, name) is None:
                raise ValidationError(f"{self.kind} source needs '{name}'")
        if self.kind == "box" and any(h < l for l, h in zip(self.lower, self.upper)):
            raise ValidationError("box upper corner must not be below the lower corner")
        if self.kind == "sphere" and self.radius < 0:
            raise ValidationError("sphere radius must be non-negative")

    def bounds(self):
        if self.kind == "box":
            return np.asarray(self.lower, float), np.asarray(self.upper, float)
        if self.kind == "sphere":
            c = np.asarray(self.center, float)
            return c - self.radius, c + self.radius
        return None


@dataclass
class Particles:
    """Seeded particles with their source bookkeeping and render kernels."""

    positions: np.ndarray
    masses: np.ndarray
    volumes: np.ndarray
    velocities: np.ndarray
    material: np.ndarray
    source: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray

    def __len__(self):
        return len(self.positions)


@dataclass
class SceneConfig:
    lower: tuple = (0.0, 0.0, 0.0)
    size: float = 1.0
    grid_resolution: int = 25
    dt: float = 3e-4
    gravity: tuple = (0.0, 0.0, -9.8)
    sample_every: int = 10
    frames: int = 150
    seed: int = 0
    materials: list = field(default_factory=lambda: [MaterialSpec()])
    sources: list = field(default_factory=list)
    boundary_conditions: list = field(default_factory=list)
    base_dir: str = field(default=".", compare=False)

    @property
    def grid(self):
        return GridSpec(self.grid_resolution, tuple(self.lower), self.size)

    @property
    def step_params(self):
        return StepParams(self.dt, tuple(self.gravity))

    @property
    def n_steps(self):
        return self.frames * self.sample_every

    @property
    def learnable(self):
        return [isinstance(m, LearnableMaterial) for m in self.materials]

    def concrete_materials(self, overrides=None):
        """Material specs with learnable slots filled by ``overrides`` or their starting guess."""
        out = []
        for i, m in enumerate(self.materials):
            if isinstance(m, LearnableMaterial):
                m = (overrides or {}).get(i, MaterialSpec(ElasticModel.FIXED_COROTATED, PlasticModel.IDENTITY, m.params))
            out.append(m)
        return out

    def sample(self):
        parts = [sample_source(s, self.grid, self.seed + i, self.base_dir) for i, s in enumerate(self.sources)]
        if not parts:
            z3 = np.zeros((0, 3))
            return Particles(z3, np.zeros(0), np.zeros(0), z3, np.zeros(0, int), np.zeros(0, int),
                             np.zeros((0, 3, 3)), np.zeros(0))
        for i, p in enumerate(parts):
            p.source = np.full(len(p), i)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return Particles(*(cat(f.name) for f in fields(Particles)))

    def build(self, overrides=None, threads=1):
        particles = self.sample()
        grid = self.grid
        state = init_state(particles.positions, particles.masses, particles.volumes, grid)
        state.v = tm.as_tensor(particles.velocities)
        field_ = MaterialField.from_specs(self.concrete_materials(overrides), particles.material)
        params = StepParams(self.dt, tuple(self.gravity), threads)
        sim = Simulation(state, field_, grid, params, tuple(self.boundary_conditions))
        sim.particles = particles
        return sim

    def to_dict(self):
        mats = []
        for m in self.materials:
            p = m.params
            entry = {"E": p.E, "nu": p.nu, "friction_angle": p.friction_angle, "yield_stress": p.yield_stress}
            if isinstance(m, LearnableMaterial):
                mats.append({"learnable": True, **entry})
            else:
                mats.append({"elastic": m.elastic.name.lower(), "plastic": m.plastic.name.lower(), **entry})
        return {
            "domain": {"lower": list(self.lower), "size": self.size},
            "grid_resolution": self.grid_resolution,
            "dt": self.dt,
            "gravity": list(self.gravity),
            "frames": {"sample_every": self.sample_every, "count": self.frames},
            "seed": self.seed,
            "materials": mats,
            "sources": [_plain({k: v for k, v in asdict(s).items() if v is not None}) for s in self.sources],
            "boundary_conditions": [_plain(asdict(b)) for b in self.boundary_conditions],
        }


def _plain(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, float) and math.isinf(v):
            continue
        out[k] = v
    return out


# -- seeding ---------------------------------------------------------------------

def _inside(source, pts):
    if source.kind == "box":
        lo, hi = source.bounds()
        return np.all((pts >= lo) & (pts <= hi), -1)
    c = np.asarray(source.center, float)
    return np.sum((pts - c) ** 2, -1) <= source.radius ** 2


def kernel_std(grid):
    """Standard deviation given to the render kernel of a procedurally seeded particle."""
    return grid.dx / 4


def sample_shape(source, grid, seed=0):
    """Seed 8 jittered particles in every grid cell whose center lies inside the shape."""
    dx = grid.dx
    res = grid.resolution
    centers = tm.as_tensor(grid.lower).numpy() + (_cell_indices(res) + 0.5) * dx
    cells = centers[_inside(source, centers)]
    if len(cells) == 0:
        raise EmptySource(f"{source.kind} source covers no grid cell")
    sub = (np.stack(np.meshgrid(*[[-0.25, 0.25]] * 3, indexing="ij"), -1).reshape(8, 3)) * dx
    rng = np.random.default_rng(seed)
    pts = (cells[:, None, :] + sub[None]).reshape(-1, 3)
    pts = pts + rng.uniform(-dx / 8, dx / 8, size=pts.shape)
    n = len(pts)
    volume = (dx / 2) ** 3
    return _particles(source, pts, np.full(n, volume), grid)


def _cell_indices(res):
    r = np.arange(res)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3).astype(np.float64)


def _particles(source, pts, volumes, grid, cloud=None):
    n = len(pts)
    if cloud is not None and cloud.covariances is not None:
        cov, opa = cloud.covariances, cloud.opacities
    else:
        cov = np.broadcast_to(np.eye(3) * kernel_std(grid) ** 2, (n, 3, 3)).copy()
        opa = np.ones(n)
    return Particles(
        positions=pts, masses=source.density * volumes, volumes=volumes,
        velocities=np.broadcast_to(np.asarray(source.velocity, float), (n, 3)).copy(),
        material=np.full(n, source.material), source=np.zeros(n, int),
        covariances=cov, opacities=opa,
    )


def sample_source(source, grid, seed=0, base_dir="."):
    if source.kind != "point_file":
        return sample_shape(source, grid, seed)
    path = Path(base_dir) / source.path
    lo = np.asarray(grid.lower, float)
    cloud = load_points(path, source.opacity_threshold,
                        center=tuple(lo + 0.5 * grid.size if source.center is None else source.center),
                        extent=0.5 * grid.size if source.extent is None else source.extent)
    _check_margin(cloud.positions.min(0), cloud.positions.max(0), grid, "point cloud")
    return _particles(source, cloud.positions, np.full(len(cloud), (grid.dx / 2) ** 3), grid, cloud)


def _check_margin(lo, hi, grid, what):
    glo, ghi = (b.numpy() for b in grid.clamp_bounds())
    if np.any(lo < glo - 1e-12) or np.any(hi > ghi + 1e-12):
        raise ValidationError(f"{what} must lie inside the domain minus a {2}-cell margin "
                              f"[{glo.tolist()}, {ghi.tolist()}]")


# -- parsing ---------------------------------------------------------------------

def _line_map(node, path=(), out=None):
    """Map every key path in a composed YAML tree to its 1-based line."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


class _Fields:
    """Typed access to a parsed mapping that reports the line of a bad field."""

    def __init__(self, data, path, lines):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ParseError("expected a mapping", line=lines.get(path), field=_dotted(path))
        self.data, self.path, self.lines = data, path, lines
        self.used = set()

    def line(self, key=None):
        return self.lines.get(self.path + ((key,) if key is not None else ()), self.lines.get(self.path))

    def fail(self, key, message):
        raise ParseError(message, line=self.line(key), field=_dotted(self.path + (key,)))

    def get(self, key, kind, default=None):
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            return default
        v = self.data[key]
        try:
            if kind == "float":
                if isinstance(v, bool):
                    raise TypeError
                return float(v)
            if kind == "int":
                if isinstance(v, bool) or float(v) != int(v):
                    raise TypeError
                return int(v)
            if kind == "vec3":
                if not isinstance(v, (list, tuple)) or len(v) != 3:
                    raise TypeError
                return tuple(float(c) for c in v)
            if kind == "str":
                if not isinstance(v, str):
                    raise TypeError
                return v
            if kind == "bool":
                if not isinstance(v, bool):
                    raise TypeError
                return v
        except (TypeError, ValueError):
            self.fail(key, f"field '{key}' must be a {kind}, got {v!r}")
        return v

    def finish(self):
        extra = set(self.data) - self.used
        if extra:
            key = sorted(extra, key=str)[0]
            self.fail(key, f"unknown field '{key}'")


def _dotted(path):
    return ".".join(str(p) for p in path)


def _section(reader, key, kind):
    reader.used.add(key)
    v = reader.data.get(key)
    if v is None:
        return [] if kind == "list" else {}
    ok = isinstance(v, list) if kind == "list" else isinstance(v, dict)
    if not ok:
        reader.fail(key, f"field '{key}' must be a {kind}")
    return v


def _wrap(reader, key, fn):
    """Run a constructor and tag its validation error with the field's line."""
    try:
        return fn()
    except ParseError:
        raise
    except ValidationError as exc:
        raise type(exc)(f"{exc} (line {reader.line(key)}, field '{_dotted(reader.path + (key,))}')") from None


def _parse_params(r):
    d = PhysicalParams()
    return PhysicalParams(
        E=r.get("E", "float", d.E), nu=r.get("nu", "float", d.nu),
        friction_angle=r.get("friction_angle", "float", d.friction_angle),
        yield_stress=r.get("yield_stress", "float", d.yield_stress),
    )


def _parse_material(entry, path, lines):
    if entry == "learnable":
        return LearnableMaterial()
    r = _Fields(entry, path, lines)
    if r.get("learnable", "bool", False):
        out = _wrap(r, "learnable", lambda: LearnableMaterial(_parse_params(r)))
    else:
        el = r.get("elastic", "str", "fixed_corotated")
        pl = r.get("plastic", "str", "identity")
        out = _wrap(r, "elastic", lambda: MaterialSpec(el, pl, _parse_params(r)))
    r.finish()
    return out


def _parse_source(entry, path, lines):
    r = _Fields(entry, path, lines)
    kw = dict(
        kind=r.get("kind", "str"), lower=r.get("lower", "vec3"), upper=r.get("upper", "vec3"),
        center=r.get("center", "vec3"), radius=r.get("radius", "float"), path=r.get("path", "str"),
        extent=r.get("extent", "float"), opacity_threshold=r.get("opacity_threshold", "float", 0.0),
        density=r.get("density", "float", 1000.0), velocity=r.get("velocity", "vec3", (0.0, 0.0, 0.0)),
        material=r.get("material", "int", 0),
    )
    if kw["kind"] is None:
        r.fail("kind", "source needs a 'kind'")
    r.finish()
    return _wrap(r, "kind", lambda: ParticleSource(**kw))


def _parse_bc(entry, path, lines):
    r = _Fields(entry, path, lines)
    kw = dict(
        kind=r.get("kind", "str"), point=r.get("point", "vec3", (0.0, 0.0, 0.0)),
        normal=r.get("normal", "vec3", (0.0, 0.0, 1.0)), thickness=r.get("thickness", "int", 3),
        lower=r.get("lower", "vec3"), upper=r.get("upper", "vec3"),
        start=r.get("start", "float", 0.0), end=r.get("end", "float", math.inf),
        vector=r.get("vector", "vec3", (0.0, 0.0, 0.0)),
    )
    if kw["kind"] is None:
        r.fail("kind", "boundary condition needs a 'kind'")
    r.finish()
    return _wrap(r, "kind", lambda: BoundaryCondition(**kw))


def parse_scene(text, base_dir="."):
    """Build a validated :class:`SceneConfig` from YAML text."""
    try:
        data = yaml.safe_load(text)
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                         line=None if mark is None else mark.line + 1) from None
    lines = _line_map(node) if node is not None else {}
    top = _Fields(data, (), lines)
    dom = _Fields(_section(top, "domain", "dict"), ("domain",), lines)
    frames = _Fields(_section(top, "frames", "dict"), ("frames",), lines)
    cfg = SceneConfig(
        lower=dom.get("lower", "vec3", (0.0, 0.0, 0.0)), size=dom.get("size", "float", 1.0),
        grid_resolution=top.get("grid_resolution", "int", 25), dt=top.get("dt", "float", 3e-4),
        gravity=top.get("gravity", "vec3", (0.0, 0.0, -9.8)),
        sample_every=frames.get("sample_every", "int", 10), frames=frames.get("count", "int", 150),
        seed=top.get("seed", "int", 0), base_dir=str(base_dir),
    )
    mats = _section(top, "materials", "list")
    if mats:
        cfg.materials = [_parse_material(m, ("materials", i), lines) for i, m in enumerate(mats)]
    cfg.sources = [_parse_source(s, ("sources", i), lines) for i, s in enumerate(_section(top, "sources", "list"))]
    cfg.boundary_conditions = [_parse_bc(b, ("boundary_conditions", i), lines)
                               for i, b in enumerate(_section(top, "boundary_conditions", "list"))]
    for r in (top, dom, frames):
        r.finish()
    validate_scene(cfg, top)
    return cfg


def validate_scene(cfg, reader=None):
    def fail(key, msg):
        if reader is not None:
            raise ValidationError(f"{msg} (line {reader.line(key)})")
        raise ValidationError(msg)

    try:
        grid = cfg.grid
        StepParams(cfg.dt, tuple(cfg.gravity))
    except ValidationError as exc:
        fail("grid_resolution", str(exc))
    if cfg.sample_every < 1 or cfg.frames < 0:
        fail("frames", "frames need sample_every >= 1 and count >= 0")
    if not cfg.materials:
        fail("materials", "at least one material is required")
    for i, s in enumerate(cfg.sources):
        if not 0 <= s.material < len(cfg.materials):
            fail("sources", f"source {i} refers to material {s.material}, only {len(cfg.materials)} defined")
        if s.kind != "point_file":
            _check_margin(*s.bounds(), grid, f"source {i}")
        params = cfg.materials[s.material].params
        speed = math.sqrt((params.lam + 2 * params.mu) / s.density)
        if cfg.dt * speed > CFL_LIMIT * grid.dx:
            fail("dt", f"CFL guard: dt * wave speed = {cfg.dt * speed:.3g} m exceeds "
                       f"{CFL_LIMIT} * dx = {CFL_LIMIT * grid.dx:.3g} m for source {i}")
    return cfg


def load_scene(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"scene file not found: {path}", missing=True)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read scene file {path}: {exc}", missing=isinstance(exc, OSError)) from None
    return parse_scene(text, path.parent)


def dump_scene(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_scene(cfg, path):
    Path(path).write_text(dump_scene(cfg))


def apply_overrides(cfg, **overrides):
    """Return a copy with top-level fields replaced where the override is not None."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    try:
        return validate_scene(replace(cfg, **changes))
    except MPMError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
