"""
Experiment engine behind the command-line harness.

An experiment directory holds everything one configuration produces:

    fields/field_000.rfld          reference fields (1 x n for the 1-D benchmark)
    topology.csv                   link network with effective per-link sigma
    intervals.csv                  1-D benchmark observation intervals
    observations/field_000.csv     link_id,y
    ensembles/<method>/*.npy       sampler ensembles
    recon/<method>/*.rfld          point reconstructions
    oracle/{mean,cov,draws}.npy    exact 1-D posterior
    metrics.csv, summary.csv, metrics.json
    plots/                         CSV value grids for external plotting
    manifest.json                  resolved config, seeds, timings and file hashes
"""

import hashlib
import json
import logging
import os
import platform
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy
import sklearn
import yaml
from sklearn.gaussian_process.kernels import RBF

from . import __version__
from .baselines import (IdwConfig, fit_variogram_l1, gauges_from_model, gmz_reconstruct,
                        idw_interpolate, ordinary_krige)
from .censored_gp import CensoredField, CensoredGpParams, censored_gp_covariance, em_fit, sample_censored_field
from .data import (load_ensemble, load_field, load_observation, load_topology, save_ensemble, save_field,
                   save_field_csv, save_observation, save_topology)
from .denoiser_io import load_external_denoiser
from .diffusion import GaussianDenoiser, ancestral_sample, karras_schedule
from .forward import (LinearGaussianLikelihood, LinkLikelihood, NoiseModel, Observation, RainField, Topology,
                      build_observation_model, sample_observation)
from .geometry import GridSpec, LinkSegment, segment_length_inside
from .gp1d import (Gp1dProblem, IntervalSet, OraclePosterior1D, RbfKernel1D, build_gp1d_problem, default_grid,
                   oracle_draws)
from .metrics import (ensemble_field_metrics, ensemble_metrics, field_metrics, metrics_table)
from .samplers import (ExternalAlgorithmError, SamplerConfig, UnknownAlgorithmError, canonical_tag,
                       draw_ensemble, load_sampler_config, sampler_schedule)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SCENARIOS = ("gp1d", "cml-synthetic", "ablation-few-long", "ablation-many-short")
PRIOR_SOURCES = ("gaussian-analytic", "external-denoiser", "censored-gp")
TOPOLOGY_SOURCES = ("file", "random", "few-long", "many-short")
BASELINES = {"idw": "IDW", "gmz": "GMZ", "ok": "OK", "kriging": "OK"}
DEFAULT_TOPOLOGY = {"cml-synthetic": "random", "ablation-few-long": "few-long",
                    "ablation-many-short": "many-short"}

DEFAULT_RUNTIME_CAP = 180.0
OUTPUT_ROOT_ENV = "CMLRAIN_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"
REFERENCE_NOTE = ("Reference fields are synthetic draws from the configured prior "
                  "(clamped at zero), not radar observations.")

PILOT_STEPS = 3
PILOT_MEMBERS = 2
PILOT_SEED = 12345

FEW_LONG_LINKS = 25
FEW_LONG_MIN_FRACTION = 0.6
MANY_SHORT_LINKS = 100
MANY_SHORT_LENGTHS = (2.0, 4.0)
MAX_TOPOLOGY_TRIES = 100000

CONFIG_KEYS = {"name", "scenario", "params", "grid", "topology", "noise", "prior", "methods", "seed",
               "runtime_cap_seconds", "output_dir", "assume_linear_operator", "schedule", "n_samples",
               "sampler_config_dir"}


class ConfigError(ValueError):
    """Raised for invalid experiment configurations."""
    pass


def derive_seed(*parts) -> int:
    """Integer seed from a path of ints and names (names hashed with crc32)."""
    words = [zlib.crc32(str(p).encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def field_name(index: int) -> str:
    return f"field_{index:03d}"


@dataclass
class MethodSpec:
    """A requested reconstruction method."""
    name: str
    kind: str
    params: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"name": self.name, "kind": self.kind, "params": dict(self.params)}


def parse_method(entry) -> MethodSpec:
    """Accept `"DPS"` or `{name: DPS, params: {...}}`."""
    if isinstance(entry, str):
        name, params = entry, {}
    elif isinstance(entry, dict) and "name" in entry:
        name, params = entry["name"], dict(entry.get("params") or {})
    else:
        raise ConfigError(f"Invalid method entry: {entry!r}")
    if str(name).lower() in BASELINES:
        return MethodSpec(BASELINES[str(name).lower()], "baseline", params)
    try:
        return MethodSpec(canonical_tag(name), "sampler", params)
    except ExternalAlgorithmError:
        return MethodSpec(str(name).upper(), "external", params)
    except UnknownAlgorithmError as exc:
        raise ConfigError(str(exc)) from exc


def _scenario_defaults(scenario: str) -> Dict:
    if scenario == "gp1d":
        return {
            "params": {"lengthscale": 0.6, "grid_n": 50, "sigma": 0.1, "n_intervals": 8,
                       "n_oracle_draws": 10000, "n_sw_reference": 500, "n_projections": 128},
            "schedule": {"sigma_min": 2e-3, "sigma_max": 100.0},
            "n_samples": 500,
        }
    return {
        "params": {"n_fields": 5},
        "grid": {"height": 36, "width": 48},
        "topology": {"source": DEFAULT_TOPOLOGY[scenario]},
        "noise": {"kind": "heteroscedastic", "sigma": 0.1},
        "prior": {"source": "gaussian-analytic", "mean": 1.0, "variance": 1.0, "lengthscale": 5.0},
        "schedule": {"sigma_min": 2e-3, "sigma_max": 80.0},
        "n_samples": 10,
    }


@dataclass
class ExperimentConfig:
    """
    Resolved experiment configuration.

    Args:
        name: Run name (also the default output subdirectory)
        scenario: One of SCENARIOS
        params: Scenario parameters (1-D benchmark constants, n_fields, em block)
        grid: {height, width}
        topology: {source, path, n_links, length_range, a_range, b_range, coordinate_frame}
        noise: {kind, sigma}
        prior: {source, ...} for the reference fields and the sampler denoiser
        methods: Requested samplers and baselines
        seed: Base seed
        runtime_cap_seconds: Per-batch wall-clock cap for samplers
        output_dir: Output directory (None falls back to the environment root)
        assume_linear_operator: Reconstruct with every b_i set to 1
        schedule: {sigma_min, sigma_max}
        n_samples: Ensemble size per reconstruction
        sampler_config_dir: Directory with <algorithm>.yaml hyperparameter files
    """
    name: str
    scenario: str
    methods: List[MethodSpec]
    params: Dict = field(default_factory=dict)
    grid: Dict = field(default_factory=dict)
    topology: Dict = field(default_factory=dict)
    noise: Dict = field(default_factory=dict)
    prior: Dict = field(default_factory=dict)
    seed: int = 0
    runtime_cap_seconds: float = DEFAULT_RUNTIME_CAP
    output_dir: Optional[str] = None
    assume_linear_operator: bool = False
    schedule: Dict = field(default_factory=dict)
    n_samples: int = 10
    sampler_config_dir: str = "configs/samplers"
    base_dir: str = "."

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"Unknown scenario '{self.scenario}'. Available: {', '.join(SCENARIOS)}")
        if not self.methods:
            raise ConfigError("At least one method must be requested")
        if not self.runtime_cap_seconds > 0:
            raise ConfigError("runtime_cap_seconds must be positive")
        if int(self.n_samples) < 1:
            raise ConfigError("n_samples must be at least 1")
        if self.scenario == "gp1d":
            bad = [m.name for m in self.methods if m.kind == "baseline"]
            if bad:
                raise ConfigError(f"Baselines {bad} need a CML network and do not apply to gp1d")
        else:
            if self.prior.get("source") not in PRIOR_SOURCES:
                raise ConfigError(f"Unknown prior source '{self.prior.get('source')}'")
            if self.topology.get("source") not in TOPOLOGY_SOURCES:
                raise ConfigError(f"Unknown topology source '{self.topology.get('source')}'")
            if self.topology.get("source") == "file" and not self.topology.get("path"):
                raise ConfigError("Topology source 'file' needs a path")
            if self.noise.get("kind") not in ("isotropic", "heteroscedastic", "per-link"):
                raise ConfigError(f"Unknown noise kind '{self.noise.get('kind')}'")
            if int(self.grid.get("height", 0)) < 1 or int(self.grid.get("width", 0)) < 1:
                raise ConfigError("Grid height and width must be positive")

    @classmethod
    def from_dict(cls, raw: Dict, base_dir: PathLike = ".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("Experiment config must be a mapping")
        unknown = set(raw) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        scenario = raw.get("scenario")
        if scenario not in SCENARIOS:
            raise ConfigError(f"Unknown scenario '{scenario}'. Available: {', '.join(SCENARIOS)}")
        defaults = _scenario_defaults(scenario)

        def merged(key):
            out = dict(defaults.get(key, {}))
            out.update(raw.get(key) or {})
            return out

        return cls(
            name=str(raw.get("name", scenario)),
            scenario=scenario,
            methods=[parse_method(m) for m in raw.get("methods") or []],
            params=merged("params"),
            grid=merged("grid"),
            topology=merged("topology"),
            noise=merged("noise"),
            prior=merged("prior"),
            seed=int(raw.get("seed", 0)),
            runtime_cap_seconds=float(raw.get("runtime_cap_seconds", DEFAULT_RUNTIME_CAP)),
            output_dir=raw.get("output_dir"),
            assume_linear_operator=bool(raw.get("assume_linear_operator", False)),
            schedule=merged("schedule"),
            n_samples=int(raw.get("n_samples", defaults["n_samples"])),
            sampler_config_dir=str(raw.get("sampler_config_dir", "configs/samplers")),
            base_dir=str(base_dir),
        )

    @classmethod
    def from_file(cls, path: PathLike) -> "ExperimentConfig":
        """Load a YAML (or JSON) experiment file."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return cls.from_dict(raw, path.parent)

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       runtime_cap: Optional[float] = None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        if runtime_cap is not None:
            changes["runtime_cap_seconds"] = float(runtime_cap)
        return replace(self, **changes)

    def resolve_path(self, path: PathLike) -> Path:
        path = Path(path)
        if path.is_absolute() or path.exists():
            return path
        return Path(self.base_dir) / path

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root or "runs") / self.name

    @property
    def task(self) -> str:
        return "gp" if self.scenario == "gp1d" else "cml"

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["methods"] = [m.to_dict() for m in self.methods]
        return out


def synthesize_topology(kind: str, grid: GridSpec, rng, n_links: Optional[int] = None,
                        length_range: Tuple[float, float] = (3.0, 12.0),
                        a_range: Tuple[float, float] = (0.1, 0.3),
                        b_range: Tuple[float, float] = (0.8, 1.2)) -> Topology:
    """
    Seeded synthetic link network.

    random: midpoints uniform in the domain, lengths uniform in length_range.
    few-long: 25 links with end points on the (inset) domain boundary, each
        at least 60% of the domain diagonal long.
    many-short: 100 links of 2-4 cells placed fully inside the domain, b = 1.
    """
    rng = np.random.default_rng(rng)
    x_min, x_max, y_min, y_max = grid.extent()
    diag = grid.diagonal()
    segments = []

    if kind == "random":
        n = int(n_links or 40)
        for _ in range(n):
            mid = rng.uniform([x_min, y_min], [x_max, y_max])
            length = rng.uniform(*length_range)
            angle = rng.uniform(0.0, np.pi)
            half = 0.5 * length * np.array([np.cos(angle), np.sin(angle)])
            segments.append(LinkSegment(mid - half, mid + half))
    elif kind == "few-long":
        n = int(n_links or FEW_LONG_LINKS)
        inset = 0.25 * min(grid.spacing)
        lo = np.array([x_min + inset, y_min + inset])
        hi = np.array([x_max - inset, y_max - inset])
        perimeter = 2.0 * np.sum(hi - lo)

        def boundary_point(u):
            w, h = hi - lo
            d = u * perimeter
            if d < w:
                return lo + [d, 0.0]
            if d < w + h:
                return lo + [w, d - w]
            if d < 2 * w + h:
                return lo + [2 * w + h - d, h]
            return lo + [0.0, perimeter - d]

        tries = 0
        while len(segments) < n:
            tries += 1
            if tries > MAX_TOPOLOGY_TRIES:
                raise ValueError("Could not place long links; the grid is too small")
            p0, p1 = boundary_point(rng.uniform()), boundary_point(rng.uniform())
            seg = LinkSegment(p0, p1)
            if segment_length_inside(grid, seg) >= FEW_LONG_MIN_FRACTION * diag:
                segments.append(seg)
    elif kind == "many-short":
        n = int(n_links or MANY_SHORT_LINKS)
        margin = 0.5 * MANY_SHORT_LENGTHS[1] * max(grid.spacing)
        if x_max - x_min <= 2 * margin or y_max - y_min <= 2 * margin:
            raise ValueError("Grid is too small for short links placed fully inside")
        for _ in range(n):
            mid = rng.uniform([x_min + margin, y_min + margin], [x_max - margin, y_max - margin])
            length = rng.uniform(*MANY_SHORT_LENGTHS) * min(grid.spacing)
            angle = rng.uniform(0.0, np.pi)
            half = 0.5 * length * np.array([np.cos(angle), np.sin(angle)])
            segments.append(LinkSegment(mid - half, mid + half))
    else:
        raise ValueError(f"Unknown topology kind: {kind}")

    a = rng.uniform(*a_range, size=n)
    b = np.ones(n) if kind == "many-short" else rng.uniform(*b_range, size=n)
    return Topology([f"L{i:03d}" for i in range(n)], segments, a, b)


def rbf_prior(grid: GridSpec, mean: float, variance: float, lengthscale: float,
              jitter: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """Constant-mean isotropic RBF prior on the cell centres."""
    cov = variance * RBF(length_scale=lengthscale)(grid.cell_centers())
    cov[np.diag_indices_from(cov)] += jitter * variance
    return np.full(grid.size, float(mean)), cov


@dataclass
class RunManifest:
    """Provenance record written next to the outputs."""
    config: Dict = field(default_factory=dict)
    seeds: Dict = field(default_factory=dict)
    versions: Dict = field(default_factory=dict)
    timings: Dict = field(default_factory=dict)
    files: Dict = field(default_factory=dict)
    failures: Dict = field(default_factory=dict)
    reductions: Dict = field(default_factory=dict)
    audit: Dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            return cls()
        with open(path) as fh:
            raw = json.load(fh)
        return cls(**{k: raw.get(k, {}) for k in asdict(cls())})

    def refresh_files(self, root: PathLike):
        root = Path(root)
        self.files = {p.relative_to(root).as_posix(): file_sha256(p)
                      for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST_NAME}

    def save(self, root: PathLike):
        self.refresh_files(root)
        with open(Path(root) / MANIFEST_NAME, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def library_versions() -> Dict[str, str]:
    return {"cmlrain": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "scikit-learn": sklearn.__version__,
            "pyyaml": yaml.__version__}


@dataclass
class MethodOutcome:
    """Status of one method in a reconstruct run."""
    name: str
    ok: bool
    seconds: float
    error: Optional[str] = None
    error_type: Optional[str] = None
    reductions: List[Dict] = field(default_factory=list)


class Experiment:
    """
    Runs the simulate / reconstruct / evaluate / oracle / em-fit stages of one config.

    Args:
        config: Resolved experiment configuration
        parallel_methods: Run methods concurrently in reconstruct
    """

    def __init__(self, config: ExperimentConfig, parallel_methods: bool = False):
        self.config = config
        self.parallel_methods = parallel_methods
        self.out = config.resolve_output_dir()
        self.grid = None
        if config.scenario != "gp1d":
            self.grid = GridSpec(int(config.grid["height"]), int(config.grid["width"]))

    # ------------------------------------------------------------------ paths

    def _path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def reference_files(self) -> List[Path]:
        return sorted(self._path("fields").glob("field_*.rfld"))

    def _manifest(self) -> RunManifest:
        manifest = RunManifest.load(self._path(MANIFEST_NAME))
        manifest.config = self.config.to_dict()
        manifest.versions = library_versions()
        manifest.seeds["base"] = self.config.seed
        manifest.seeds["derivation"] = "SeedSequence([seed, field_index, crc32(stage or method)])"
        return manifest

    def _prepare_output(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"Output directory {self.out} is not writable: {exc}") from exc
        if not os.access(self.out, os.W_OK):
            raise ConfigError(f"Output directory {self.out} is not writable")

    # ------------------------------------------------------------------ gp1d

    def _gp1d_kernel(self) -> RbfKernel1D:
        return RbfKernel1D(float(self.config.params["lengthscale"]))

    def _load_gp1d_problem(self) -> Gp1dProblem:
        p = self.config.params
        iv = pd.read_csv(self._path("intervals.csv"))
        intervals = IntervalSet(iv[["start", "end"]].to_numpy(float), float(p["sigma"]))
        obs = load_observation(self._path("observations", field_name(0) + ".csv"))
        truth = load_field(self._path("fields", field_name(0) + ".rfld")).ravel()
        return Gp1dProblem(kernel=self._gp1d_kernel(), grid=default_grid(int(p["grid_n"])),
                           intervals=intervals, truth=truth, y=obs.y)

    def _simulate_gp1d(self, manifest: RunManifest):
        p = self.config.params
        problem = build_gp1d_problem(lengthscale=float(p["lengthscale"]), grid_n=int(p["grid_n"]),
                                     sigma=float(p["sigma"]), seed=derive_seed(self.config.seed, 0, "simulate"),
                                     intervals=p.get("intervals"), n_intervals=int(p["n_intervals"]))
        pd.DataFrame(problem.intervals.intervals, columns=["start", "end"]).to_csv(
            self._path("intervals.csv"), index=False, float_format="%.17g")
        save_field(self._path("fields", field_name(0) + ".rfld"), problem.truth[None, :])
        link_ids = [f"I{i:03d}" for i in range(len(problem.intervals))]
        save_observation(self._path("observations", field_name(0) + ".csv"), Observation(problem.y), link_ids)
        manifest.audit["problem"] = problem.to_dict()

    # ------------------------------------------------------------------ CML

    def _topology(self, seed: int) -> Topology:
        t = self.config.topology
        if t["source"] == "file":
            return load_topology(self.config.resolve_path(t["path"]), t.get("coordinate_frame"))
        opts = {k: tuple(t[k]) for k in ("length_range", "a_range", "b_range") if k in t}
        return synthesize_topology(t["source"], self.grid, seed, n_links=t.get("n_links"), **opts)

    def _noise(self, topology: Topology) -> NoiseModel:
        n = self.config.noise
        kind = n["kind"]
        if kind == "per-link":
            return NoiseModel.from_topology(topology)
        sigma = float(n["sigma"])
        if kind == "isotropic":
            return NoiseModel.isotropic(sigma, len(topology))
        return NoiseModel.heteroscedastic(sigma, topology.lengths)

    def _censored_params(self) -> CensoredGpParams:
        p = self.config.prior
        return CensoredGpParams(float(p.get("mu", 0.0)), tuple(p.get("lengthscales", (5.0, 5.0))),
                                float(p.get("variance", 1.0)), float(p.get("beta", 1.0)))

    def _external_denoiser(self):
        path = self.config.prior.get("path")
        if not path:
            raise ConfigError("Prior source 'external-denoiser' needs a path")
        den = load_external_denoiser(self.config.resolve_path(path))
        if den.dim != self.grid.size:
            raise ConfigError(f"Denoiser dimension {den.dim} does not match the {self.grid.shape} grid")
        return den

    def _reference_fields(self, n_fields: int, seed: int) -> np.ndarray:
        p = self.config.prior
        source = p["source"]
        if source == "gaussian-analytic":
            mean, cov = rbf_prior(self.grid, p.get("mean", 1.0), p.get("variance", 1.0), p.get("lengthscale", 5.0))
            draws = np.random.default_rng(seed).multivariate_normal(mean, cov, size=n_fields, method="eigh")
        elif source == "censored-gp":
            params = self._censored_params()
            gens = np.random.SeedSequence(seed).spawn(n_fields)
            draws = np.stack([sample_censored_field(params, self.grid, g).values.ravel() for g in gens])
        else:
            den = self._external_denoiser()
            sched = karras_schedule(int(p.get("n_steps", 50)), float(self.config.schedule["sigma_min"]),
                                    float(self.config.schedule["sigma_max"]))
            draws = ancestral_sample(sched, den, seed, batch=n_fields)
        return np.maximum(draws, 0.0).reshape(n_fields, *self.grid.shape)

    def _simulate_cml(self, manifest: RunManifest):
        seed = self.config.seed
        topology = self._topology(derive_seed(seed, 0, "topology"))
        noise = self._noise(topology)
        topology = replace(topology, sigma=np.asarray(noise.sigmas))
        save_topology(self._path("topology.csv"), topology)
        model = build_observation_model(self.grid, topology, noise)

        n_fields = int(self.config.params.get("n_fields", 5))
        fields_ = self._reference_fields(n_fields, derive_seed(seed, 0, "fields"))
        for i, values in enumerate(fields_):
            save_field(self._path("fields", field_name(i) + ".rfld"), values)
            obs = sample_observation(model, RainField(values, self.grid), derive_seed(seed, i, "observation"))
            save_observation(self._path("observations", field_name(i) + ".csv"), obs, topology.link_ids)

        audit = {"n_links": len(topology), "n_fields": n_fields, "noise_kind": noise.kind,
                 "sigma": noise.base_sigma, "sigma_min": float(noise.sigmas.min()),
                 "sigma_max": float(noise.sigmas.max()), "reference_note": REFERENCE_NOTE}
        if noise.kind == "heteroscedastic":
            audit["sigma_within_bound"] = bool(np.all(noise.sigmas > 0.5 * noise.base_sigma)
                                               and np.all(noise.sigmas <= noise.base_sigma))
        manifest.audit["simulate"] = audit

    def _load_model(self):
        topology = load_topology(self._path("topology.csv"))
        model = build_observation_model(self.grid, topology)
        if self.config.assume_linear_operator:
            model = model.with_linear_operator()
        return topology, model

    # ------------------------------------------------------------------ stages

    def simulate(self) -> Dict:
        """Write reference fields, topology and noisy observations."""
        self._prepare_output()
        manifest = self._manifest()
        t0 = time.perf_counter()
        if self.config.scenario == "gp1d":
            self._simulate_gp1d(manifest)
        else:
            self._simulate_cml(manifest)
        manifest.timings["simulate"] = time.perf_counter() - t0
        manifest.seeds["simulate"] = derive_seed(self.config.seed, 0, "simulate")
        manifest.save(self.out)
        logger.info("Simulated %d reference field(s) into %s", len(self.reference_files()), self.out)
        return manifest.audit

    def oracle(self) -> OraclePosterior1D:
        """Exact 1-D posterior: mean, symmetric covariance and oracle draws."""
        if self.config.scenario != "gp1d":
            raise ConfigError("The oracle command only applies to the gp1d scenario")
        manifest = self._manifest()
        posterior = self._load_gp1d_problem().oracle()
        upper = np.triu(posterior.cov)
        cov = upper + np.triu(upper, 1).T
        posterior = OraclePosterior1D(posterior.grid, posterior.mean, cov)
        n_draws = int(self.config.params.get("n_oracle_draws", 10000))
        draws = oracle_draws(posterior, n_draws, derive_seed(self.config.seed, 0, "oracle"))
        for name, arr in (("mean", posterior.mean), ("cov", cov), ("draws", draws)):
            save_ensemble(self._path("oracle", name + ".npy"), arr)
        manifest.seeds["oracle"] = derive_seed(self.config.seed, 0, "oracle")
        manifest.save(self.out)
        return posterior

    def _load_oracle(self) -> Tuple[OraclePosterior1D, np.ndarray]:
        mean_path = self._path("oracle", "mean.npy")
        if not mean_path.exists():
            self.oracle()
        grid = default_grid(int(self.config.params["grid_n"]))
        posterior = OraclePosterior1D(grid, load_ensemble(mean_path),
                                      load_ensemble(self._path("oracle", "cov.npy")))
        return posterior, load_ensemble(self._path("oracle", "draws.npy"))

    # ------------------------------------------------------------------ reconstruct

    def sampler_config(self, method: MethodSpec) -> SamplerConfig:
        """Default hyperparameters for the task from configs/samplers, overridden by the method's params."""
        path = self.config.resolve_path(Path(self.config.sampler_config_dir) / f"{method.name.lower()}.yaml")
        if path.exists():
            return load_sampler_config(path, self.config.task, **method.params)
        return SamplerConfig.from_dict(method.name, method.params)

    def _sigma_range(self) -> Tuple[float, float]:
        return float(self.config.schedule["sigma_min"]), float(self.config.schedule["sigma_max"])

    def fit_runtime_cap(self, cfg: SamplerConfig, denoiser, likelihood) -> Tuple[SamplerConfig, List[Dict]]:
        """
        Shrink a sampler config until one batch fits the runtime cap.

        A short pilot run estimates the cost per (step, member); TDS particles are
        halved first, then the number of steps.
        """
        cap = self.config.runtime_cap_seconds
        is_tds = cfg.algorithm == "TDS"

        def members(c):
            return c.n_particles if is_tds else self.config.n_samples

        pilot = replace(cfg, n_steps=min(cfg.n_steps, PILOT_STEPS))
        pilot_members = min(members(cfg), PILOT_MEMBERS)
        t0 = time.perf_counter()
        pilot.build().sample(sampler_schedule(pilot, *self._sigma_range()), denoiser, likelihood,
                             PILOT_SEED, batch=pilot_members)
        unit = (time.perf_counter() - t0) / (pilot.n_steps * pilot_members)

        reductions = []
        while unit * cfg.n_steps * members(cfg) > cap:
            if is_tds and cfg.n_particles > 1:
                new, what = replace(cfg, n_particles=max(1, cfg.n_particles // 2)), "n_particles"
            elif cfg.n_steps > 1:
                new, what = replace(cfg, n_steps=max(1, cfg.n_steps // 2)), "n_steps"
            else:
                break
            logger.warning("%s: estimated %.1fs exceeds the %.0fs cap; %s %d -> %d", cfg.algorithm,
                           unit * cfg.n_steps * members(cfg), cap, what, getattr(cfg, what), getattr(new, what))
            reductions.append({"parameter": what, "from": getattr(cfg, what), "to": getattr(new, what)})
            cfg = new
        return cfg, reductions

    def _build_denoiser(self):
        if self.config.scenario == "gp1d":
            cov = self._load_gp1d_problem().prior_covariance()
            return GaussianDenoiser(np.zeros(cov.shape[0]), cov)
        p = self.config.prior
        if p["source"] == "gaussian-analytic":
            mean, cov = rbf_prior(self.grid, p.get("mean", 1.0), p.get("variance", 1.0), p.get("lengthscale", 5.0))
            return GaussianDenoiser(mean, cov, nonnegative=True)
        if p["source"] == "censored-gp":
            params = self._censored_params()
            return GaussianDenoiser(np.full(self.grid.size, params.mu), censored_gp_covariance(params, self.grid),
                                    nonnegative=True)
        return self._external_denoiser()

    def _problems(self) -> List[Tuple[int, object, Optional[object]]]:
        """(field index, likelihood, observation model) per reference field."""
        if self.config.scenario == "gp1d":
            problem = self._load_gp1d_problem()
            lik = LinearGaussianLikelihood(problem.operator, problem.y, problem.intervals.noise_sigma)
            return [(0, lik, None)]
        topology, model = self._load_model()
        out = []
        for i, _ in enumerate(self.reference_files()):
            obs = load_observation(self._path("observations", field_name(i) + ".csv"), topology.link_ids)
            out.append((i, LinkLikelihood(model, obs.y), model))
        if not out:
            raise FileNotFoundError(f"No reference fields under {self._path('fields')}; run simulate first")
        return out

    def _run_sampler(self, method: MethodSpec, problems, denoiser) -> Tuple[Dict, List[Dict]]:
        cfg = self.sampler_config(method)
        cfg, reductions = self.fit_runtime_cap(cfg, denoiser, problems[0][1])
        sampler = cfg.build()
        schedule = sampler_schedule(cfg, *self._sigma_range())
        results = {}
        for index, lik, _ in problems:
            ens = draw_ensemble(sampler, schedule, denoiser, lik, self.config.n_samples,
                                derive_seed(self.config.seed, index, method.name))
            results[index] = ens.samples
            logger.info("%s field %d: %d members", method.name, index, len(ens))
        return results, reductions

    def _run_baseline(self, method: MethodSpec, problems) -> Dict:
        p = dict(method.params)
        idw_cfg = IdwConfig(**{k: p.pop(k) for k in ("p", "roi", "eps") if k in p})
        results = {}
        for index, lik, model in problems:
            y = lik.y
            if method.name == "IDW":
                recon = idw_interpolate(gauges_from_model(model, y), self.grid, idw_cfg)
            elif method.name == "GMZ":
                recon = gmz_reconstruct(model.segments, y, model.params, self.grid, model.inside_lengths,
                                        k_points=int(p.get("k_points", 5)), n_iters=int(p.get("n_iters", 20)),
                                        idw_cfg=idw_cfg)
            else:
                gauges = gauges_from_model(model, y)
                variogram = fit_variogram_l1(gauges, **{k: int(p[k]) for k in ("n_bins", "n_starts") if k in p})
                recon = ordinary_krige(gauges, self.grid, variogram)
            results[index] = recon
        return results

    def _write_method(self, method: MethodSpec, results: Dict):
        for index, res in sorted(results.items()):
            name = field_name(index)
            if method.kind == "sampler":
                shape = (len(res),) + (self.grid.shape if self.grid is not None else (res.shape[1],))
                save_ensemble(self._path("ensembles", method.name, name + ".npy"), res.reshape(shape))
                mean = res.mean(axis=0)
                if self.grid is not None:
                    mean = np.maximum(mean, 0.0).reshape(self.grid.shape)
                save_field(self._path("recon", method.name, name + ".rfld"), np.atleast_2d(mean))
            elif hasattr(res, "variance"):
                save_field(self._path("recon", method.name, name + ".rfld"), res.field.values)
                save_ensemble(self._path("recon", method.name, name + "_variance.npy"), res.variance)
            else:
                save_field(self._path("recon", method.name, name + ".rfld"), res.values)

    def _reconstruct_method(self, method: MethodSpec, problems, denoiser, denoiser_error) -> MethodOutcome:
        t0 = time.perf_counter()
        reductions = []
        try:
            if method.kind == "external":
                canonical_tag(method.name)
            if method.kind == "sampler":
                if denoiser_error is not None:
                    raise denoiser_error
                results, reductions = self._run_sampler(method, problems, denoiser)
            else:
                results = self._run_baseline(method, problems)
            self._write_method(method, results)
        except Exception as exc:
            logger.warning("%s failed: %s: %s", method.name, type(exc).__name__, exc)
            return MethodOutcome(method.name, False, time.perf_counter() - t0, str(exc), type(exc).__name__,
                                 reductions)
        return MethodOutcome(method.name, True, time.perf_counter() - t0, reductions=reductions)

    def reconstruct(self) -> List[MethodOutcome]:
        """Run every requested method; a failing method is recorded and skipped."""
        manifest = self._manifest()
        problems = self._problems()
        denoiser, denoiser_error = None, None
        if any(m.kind == "sampler" for m in self.config.methods):
            try:
                denoiser = self._build_denoiser()
            except Exception as exc:
                denoiser_error = exc
                logger.warning("Could not build the prior denoiser: %s", exc)

        def run(m):
            return self._reconstruct_method(m, problems, denoiser, denoiser_error)

        if self.parallel_methods and len(self.config.methods) > 1:
            with ThreadPoolExecutor(max_workers=len(self.config.methods)) as pool:
                outcomes = list(pool.map(run, self.config.methods))
        else:
            outcomes = [run(m) for m in self.config.methods]

        for o in outcomes:
            manifest.timings[f"reconstruct/{o.name}"] = o.seconds
            manifest.seeds[o.name] = [derive_seed(self.config.seed, i, o.name) for i, _, _ in problems]
            manifest.failures.pop(o.name, None)
            if not o.ok:
                manifest.failures[o.name] = {"type": o.error_type, "message": o.error}
            if o.reductions:
                manifest.reductions[o.name] = o.reductions
        manifest.save(self.out)
        return outcomes

    # ------------------------------------------------------------------ evaluate

    def _method_outputs(self, method: MethodSpec, n_refs: int) -> Optional[List[Path]]:
        recon_dir = self._path("recon", method.name)
        if not recon_dir.exists():
            logger.warning("No outputs for %s; skipping", method.name)
            return None
        files = sorted(recon_dir.glob("field_*.rfld"))
        expected = [field_name(i) + ".rfld" for i in range(n_refs)]
        if [f.name for f in files] != expected:
            raise ValueError(f"{method.name}: outputs {[f.name for f in files]} are not aligned with "
                             f"the {n_refs} reference field(s)")
        return files

    def evaluate(self) -> pd.DataFrame:
        """Per-field metrics, aggregates with 95% CIs and plot dumps."""
        manifest = self._manifest()
        refs = self.reference_files()
        if not refs:
            raise FileNotFoundError(f"No reference fields under {self._path('fields')}")
        gp = self.config.scenario == "gp1d"
        oracle, oracle_samples = self._load_oracle() if gp else (None, None)
        p = self.config.params
        rows = []
        for method in self.config.methods:
            files = self._method_outputs(method, len(refs))
            if files is None:
                continue
            for index, (ref_path, recon_path) in enumerate(zip(refs, files)):
                ref = load_field(ref_path)
                ens_path = self._path("ensembles", method.name, field_name(index) + ".npy")
                if ens_path.exists():
                    ens = load_ensemble(ens_path)
                    fm = ensemble_field_metrics(ens, ref)
                else:
                    ens = None
                    fm = field_metrics(load_field(recon_path), ref)
                row = {"method": method.name, "field": index, **fm.to_dict()}
                if gp and ens is not None:
                    n_ref = min(int(p.get("n_sw_reference", 500)), len(oracle_samples))
                    em = ensemble_metrics(ens.reshape(len(ens), -1), oracle, oracle_samples[:n_ref],
                                          int(p.get("n_projections", 128)), derive_seed(self.config.seed, 0, "sw"))
                    row.update(em.to_dict())
                    self._dump_gp_plot(method.name, ens.reshape(len(ens), -1))
                elif not gp:
                    save_field_csv(self._path("plots", method.name, field_name(index) + ".csv"),
                                   load_field(recon_path))
                rows.append(row)
        if not gp:
            for index, ref_path in enumerate(refs):
                save_field_csv(self._path("plots", "reference", field_name(index) + ".csv"), load_field(ref_path))
        elif oracle is not None:
            pd.DataFrame({"s": oracle.grid, "mean": oracle.mean, "q05": oracle.quantile(0.05),
                          "q95": oracle.quantile(0.95)}).to_csv(self._path("plots", "oracle.csv"), index=False)

        per_field = pd.DataFrame(rows)
        summary = metrics_table(rows)
        self._path("plots").mkdir(parents=True, exist_ok=True)
        per_field.to_csv(self._path("metrics.csv"), index=False)
        summary.to_csv(self._path("summary.csv"))
        report = {"scenario": self.config.scenario, "note": None if gp else REFERENCE_NOTE,
                  "rows": per_field.to_dict(orient="records"),
                  "aggregate": summary.reset_index().to_dict(orient="records")}
        with open(self._path("metrics.json"), "w") as fh:
            json.dump(report, fh, indent=2, default=_json_default)
        manifest.save(self.out)
        return summary

    def _dump_gp_plot(self, method: str, samples: np.ndarray):
        q05, q95 = np.quantile(samples, [0.05, 0.95], axis=0)
        grid = default_grid(int(self.config.params["grid_n"]))
        self._path("plots").mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"s": grid, "mean": samples.mean(axis=0), "q05": q05, "q95": q95}).to_csv(
            self._path("plots", f"{method}.csv"), index=False)

    # ------------------------------------------------------------------ em-fit

    def em_fit(self, fields_dir: Optional[PathLike] = None):
        """Fit the censored GP to a directory of reference fields and write em_fit.json."""
        directory = Path(fields_dir) if fields_dir else self._path("fields")
        files = sorted(directory.glob("*.rfld"))
        if not files:
            raise FileNotFoundError(f"No .rfld fields under {directory}")
        opts = dict(self.config.params.get("em") or {})
        self._prepare_output()
        manifest = self._manifest()
        t0 = time.perf_counter()
        params, report = em_fit([CensoredField(load_field(f)) for f in files],
                                beta_grid=tuple(opts.get("beta_grid", (1.0,))),
                                em_iters=int(opts.get("em_iters", 10)),
                                gibbs_sweeps=int(opts.get("gibbs_sweeps", 20)),
                                rng=derive_seed(self.config.seed, 0, "em-fit"),
                                holdout_fraction=float(opts.get("holdout_fraction", 0.2)))
        with open(self._path("em_fit.json"), "w") as fh:
            json.dump({"params": params.to_dict(), "report": report.to_dict(), "n_fields": len(files)},
                      fh, indent=2, default=_json_default)
        manifest.timings["em-fit"] = time.perf_counter() - t0
        manifest.save(self.out)
        return params, report
