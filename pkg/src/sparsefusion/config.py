"""Pipeline configuration: an INI file with one section per component.

Every key is optional; ``DEFAULTS`` lists them all with their default
values.  Keys are referred to as ``section.key`` (``grid.N``, ``fusion.mode``).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fusion import FusionParams
from .geometry import Intrinsics
from .grid import AuxCodec, GridConfig
from .registration import MatchParams

DEFAULTS = """\
[grid]
N = 32
M = 8
origin = -0.5, -0.5, -0.5
side = 1.0
# truncation defaults to 4 voxels
truncation =
# pool capacity in blocks; defaults to N^3 / 8
pool_capacity =
precision = quantized
variance_min = 1e-8
variance_max = 1e-2

[fusion]
mode = kalman
w_fixed = 0.1
w_max = 20
weight = 1.0
# process variance Q; defaults to (0.1 * truncation / 127)^2
q =
sigma0 = 2.5e-4
refinement_steps = 0
edge_weighting = true
sample_stride =

[match]
# defaults to 10 voxels
max_distance =
max_normal_angle_deg = 30
max_iterations = 15
convergence_epsilon = 1e-5
eigen_threshold = 0.005
min_matches = 10

[camera]
width = 320
height = 240
fov_deg = 60
# explicit fx/fy/cx/cy override fov_deg
fx =
fy =
cx =
cy =
near = 0.1
far = 3.0

[input]
# synthetic | dfrm
source = synthetic
# sphere | cluster
scene = sphere
scene_center = 0, 0, 0
scene_radius = 0.3
satellites = 10
scene_seed = 3
# orbit, or a trajectory CSV path
trajectory = orbit
orbit_frames = 20
orbit_distance = 0.9
# arcs of 360 degrees or more close the loop
orbit_arc_deg = 360
orbit_elevation_deg = 25
# alternate the camera above and below the equator
orbit_alternate = true
noise_sigma0 = 0
# directory of *.dfrm frames when source = dfrm
directory =

[run]
# icp | ground_truth | icp_with_hook
tracking = icp
seed = 0
output_dir = out
write_snapshot = true

[filters]
trials = 30
steps = 200
truth = 0.0
sigma_start = 0.01
# sigma grows linearly to sigma_start * ramp over the run; 1 keeps it constant
ramp = 10
# fixed blend weight; the other filters are matched to it early on
w = 0.1
# steps averaged for the final (tail) error
tail = 50

[memory]
# comma-separated NxM pairs (blocks per axis x voxels per block axis)
sweep = 8x8, 16x8, 16x16, 32x8
# bytes; combinations above it are flagged
threshold = 1610612736
"""


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _opt_float(text):
    text = text.strip()
    return float(text) if text else None


def _opt_int(text):
    text = text.strip()
    return int(text) if text else None


@dataclass
class InputConfig:
    source: str = "synthetic"
    scene: str = "sphere"
    scene_center: tuple = (0.0, 0.0, 0.0)
    scene_radius: float = 0.3
    satellites: int = 10
    scene_seed: int = 3
    trajectory: str = "orbit"
    orbit_frames: int = 20
    orbit_distance: float = 0.9
    orbit_arc_deg: float = 360.0
    orbit_elevation_deg: float = 25.0
    orbit_alternate: bool = True
    noise_sigma0: float = 0.0
    directory: str | None = None


@dataclass
class FilterSettings:
    trials: int = 30
    steps: int = 200
    truth: float = 0.0
    sigma_start: float = 0.01
    ramp: float = 10.0
    w: float = 0.1
    tail: int = 50


def parse_sweep(text):
    """``"8x8, 16x8"`` -> ``[(8, 8), (16, 8)]``."""
    pairs = []
    for item in text.replace(";", ",").split(","):
        item = item.strip().lower()
        if not item:
            continue
        n, _, m = item.partition("x")
        try:
            pairs.append((int(n), int(m)))
        except ValueError:
            raise ValueError(f"bad sweep entry {item!r}, expected NxM") from None
    return pairs


@dataclass
class PipelineConfig:
    grid: GridConfig
    fusion: FusionParams
    match: MatchParams
    camera: Intrinsics
    input: InputConfig = field(default_factory=InputConfig)
    pool_capacity: int | None = None
    precision: str = "quantized"
    tracking: str = "icp"
    seed: int = 0
    output_dir: Path = Path("out")
    write_snapshot: bool = True
    filters: FilterSettings = field(default_factory=FilterSettings)
    memory_sweep: list = field(default_factory=lambda: [(8, 8), (16, 8), (16, 16), (32, 8)])
    memory_threshold: int = 1536 * 1024 * 1024
    base_dir: Path = Path(".")

    def validate(self):
        if self.tracking not in ("icp", "ground_truth", "icp_with_hook"):
            raise ValueError(f"unknown tracking mode {self.tracking!r}")
        if self.precision not in ("quantized", "float"):
            raise ValueError(f"unknown precision {self.precision!r}")
        inp = self.input
        if inp.source not in ("synthetic", "dfrm"):
            raise ValueError(f"unknown input source {inp.source!r}")
        if inp.source == "synthetic" and inp.scene not in ("sphere", "cluster"):
            raise ValueError(f"unknown scene {inp.scene!r}")
        if inp.source == "dfrm":
            if not inp.directory or not self.resolve(inp.directory).is_dir():
                raise FileNotFoundError(f"frame directory {inp.directory!r} not found")
        if inp.trajectory != "orbit" and not self.resolve(inp.trajectory).is_file():
            raise FileNotFoundError(f"trajectory file {inp.trajectory!r} not found")
        if self.tracking == "icp_with_hook" and inp.source == "dfrm" and inp.trajectory == "orbit":
            raise ValueError("icp_with_hook needs a trajectory file for dfrm input")
        return self

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def with_grid(self, n, m):
        """Same box and truncation policy with a different block layout."""
        g = self.grid
        grid = GridConfig(n, m, g.box_origin, g.box_side, None, g.bytes_per_voxel, g.aux)
        return replace(self, grid=grid, pool_capacity=None)


def parse_config(text, base_dir=".") -> PipelineConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(DEFAULTS)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ValueError(f"malformed config: {e}") from None
    g, f, mt, c, i, r = (cp[s] for s in ("grid", "fusion", "match", "camera", "input", "run"))
    fl, mem = cp["filters"], cp["memory"]

    fusion = FusionParams(
        mode=f["mode"].strip(), w_fixed=float(f["w_fixed"]), w_max=float(f["w_max"]),
        weight=float(f["weight"]), process_variance=_opt_float(f["q"]), sigma0=float(f["sigma0"]),
        refinement_steps=int(f["refinement_steps"]), edge_weighting=f.getboolean("edge_weighting"),
        sample_stride=_opt_int(f["sample_stride"]))
    aux = fusion.aux_codec(AuxCodec(variance_min=float(g["variance_min"]),
                                    variance_max=float(g["variance_max"])))
    grid = GridConfig(int(g["N"]), int(g["M"]), _floats(g["origin"]), float(g["side"]),
                      _opt_float(g["truncation"]), aux=aux)
    vs = grid.voxel_size
    match = MatchParams(
        max_distance=_opt_float(mt["max_distance"]) or 10.0 * vs,
        max_normal_angle=math.radians(float(mt["max_normal_angle_deg"])),
        max_iterations=int(mt["max_iterations"]),
        convergence_epsilon=float(mt["convergence_epsilon"]),
        eigen_threshold=float(mt["eigen_threshold"]),
        min_extent=vs, min_matches=int(mt["min_matches"]))
    w, h = int(c["width"]), int(c["height"])
    near, far = float(c["near"]), float(c["far"])
    if _opt_float(c["fx"]) is not None:
        fx = float(c["fx"])
        camera = Intrinsics(w, h, fx, _opt_float(c["fy"]) or fx,
                            _opt_float(c["cx"]) if _opt_float(c["cx"]) is not None else (w - 1) / 2,
                            _opt_float(c["cy"]) if _opt_float(c["cy"]) is not None else (h - 1) / 2,
                            near, far)
    else:
        camera = Intrinsics.from_fov(w, h, float(c["fov_deg"]), near, far)
    inp = InputConfig(
        source=i["source"].strip(), scene=i["scene"].strip(), scene_center=_floats(i["scene_center"]),
        scene_radius=float(i["scene_radius"]), satellites=int(i["satellites"]),
        scene_seed=int(i["scene_seed"]), trajectory=i["trajectory"].strip(),
        orbit_frames=int(i["orbit_frames"]), orbit_distance=float(i["orbit_distance"]),
        orbit_arc_deg=float(i["orbit_arc_deg"]), orbit_elevation_deg=float(i["orbit_elevation_deg"]),
        orbit_alternate=i.getboolean("orbit_alternate"),
        noise_sigma0=float(i["noise_sigma0"]), directory=i["directory"].strip() or None)
    return PipelineConfig(
        grid=grid, fusion=fusion, match=match, camera=camera, input=inp,
        pool_capacity=_opt_int(g["pool_capacity"]), precision=g["precision"].strip(),
        tracking=r["tracking"].strip(), seed=int(r["seed"]), output_dir=Path(r["output_dir"].strip()),
        write_snapshot=r.getboolean("write_snapshot"),
        filters=FilterSettings(int(fl["trials"]), int(fl["steps"]), float(fl["truth"]),
                               float(fl["sigma_start"]), float(fl["ramp"]), float(fl["w"]),
                               int(fl["tail"])),
        memory_sweep=parse_sweep(mem["sweep"]), memory_threshold=int(mem["threshold"]),
        base_dir=Path(base_dir))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    cfg = parse_config(text, base_dir=path.parent)
    cfg = replace(cfg, output_dir=cfg.resolve(cfg.output_dir))
    return cfg.validate()


def default_config(**overrides) -> PipelineConfig:
    return replace(parse_config(""), **overrides)
