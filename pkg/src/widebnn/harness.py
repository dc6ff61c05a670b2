"""Experiment orchestration: width sweeps, reference curves, reports, artifacts.

Every run derives one seed per (width, seed-index) cell from the base seed,
so cells are reproducible independently of scheduling; a sweep run with a
worker pool emits bit-identical numbers to a serial run. Artifacts are CSV
files with pinned headers, an optional SVG figure, and a metadata block
(seed, config hash, package version) sufficient to repeat the run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds, counterexample, data, mfvi, net, nngp
from .errors import ConfigError
from .svgplot import Chart

__version__ = "0.1.0"

EXPERIMENTS = ("posterior_plot", "convergence", "rmse_sweep", "counterexample",
               "bounds_table", "verify")

CONVERGENCE_CSV_HEADER = "width,seed,max_mean_dist,bound,nngp_dist,final_kl,final_elbo"
RMSE_CSV_HEADER = ("dataset,width,split,rmse_mean_to_prior,rmse_mean_to_test_y,"
                   "rmse_var_to_prior_var,final_kl,final_elbo")
PLOT_CSV_HEADER = "curve,width,x,mean,sd"

DESK_WIDTHS = (64, 256, 1024, 4096)
DESK_STEPS = 5000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dataset: str = "two_points"
    activation: str = "tanh"
    depth: int = 1
    widths: tuple = (64, 256, 1024)
    seeds: tuple = (0,)
    include_final_bias: bool = True
    train: mfvi.TrainConfig = field(default_factory=mfvi.TrainConfig)
    grid_points: int = 25
    grid_lo: float = -1.0
    grid_hi: float = 1.0
    n_pred_samples: int = 1000
    n_splits: int = 5
    n_restarts: int = 2
    test_fraction: float = 0.1
    dataset_size: int = 100
    output_dir: str = "out"
    threads: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if len(self.widths) == 0:
            raise ConfigError("width list must be nonempty")
        if len(self.seeds) == 0:
            raise ConfigError("seed list must be nonempty")
        if self.grid_points < 2:
            raise ConfigError("grid needs at least 2 points")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.grid_lo, self.grid_hi, self.grid_points)


_TRAIN_KEYS = ("steps", "batch_size", "learning_rate", "momentum", "mc_samples",
               "grad_clip_norm", "cosine_restart_period", "init_nu", "seed")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from flat JSON-style keys; unknown keys are an error."""
    raw = dict(raw)
    train_kwargs = {k: raw.pop(k) for k in list(raw) if k in _TRAIN_KEYS}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"train"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        train = mfvi.TrainConfig(**train_kwargs)
        return ExperimentConfig(train=train, **raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    train = out.pop("train")
    out.update(train)
    out["widths"] = list(cfg.widths)
    out["seeds"] = list(cfg.seeds)
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_desk_preset(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cap runtime: 5000-step fits and widths bounded by 4096."""
    widths = tuple(w for w in cfg.widths if w <= max(DESK_WIDTHS)) or DESK_WIDTHS
    return replace(cfg, widths=widths, train=replace(cfg.train, steps=DESK_STEPS))


def cell_seed(base_seed: int, *parts: int) -> int:
    """Deterministic per-cell seed derived from (base_seed, parts...)."""
    state = np.random.SeedSequence([int(base_seed), *[int(p) for p in parts]])
    return int(state.generate_state(1, dtype=np.uint64)[0] % (2**63))


def cell_rng(base_seed: int, *parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), *map(int, parts)]))


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    name = cfg.dataset
    if name == "two_points":
        return data.make_two_points()
    if name == "sine":
        return data.make_sine(cfg.dataset_size, cell_rng(cfg.base_seed, 101))
    if name == "toy":
        return data.make_toy(cfg.dataset_size, cell_rng(cfg.base_seed, 102))
    if name.startswith("csv:"):
        try:
            _, path, target = name.split(":", 2)
        except ValueError:
            raise ConfigError("csv dataset spec must be 'csv:<path>:<target>'") from None
        target2: int | str = int(target) if target.lstrip("-").isdigit() else target
        return data.load_uci_csv(path, target2)
    raise ConfigError(f"unknown dataset {name!r}")


def build_arch(cfg: ExperimentConfig, width: int, d_in: int) -> net.Architecture:
    return net.Architecture(
        depth_L=cfg.depth, width_M=width, d_in=d_in, d_out=1,
        activation=net.activation(cfg.activation),
        include_final_bias=cfg.include_final_bias,
    )


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    width: int
    seed_index: int
    metrics: dict
    wall_clock: float
    version: str = __version__

    def __post_init__(self):
        for k, v in self.metrics.items():
            if v is not None and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")


def _write_lines(path, header: str, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("" if c is None else (repr(c) if isinstance(c, float) else str(c))
                              for c in row) + "\n")


def write_metadata(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    meta = {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "base_seed": cfg.base_seed,
        "version": __version__,
    }
    if extra:
        meta.update(extra)
    path = os.path.join(cfg.output_dir, "metadata.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def _map_cells(fn, cells, threads: int):
    if threads <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


# ---------------------------------------------------------------------------
# Trend helper
# ---------------------------------------------------------------------------

def isotonic_fit(values: np.ndarray, increasing: bool = False) -> np.ndarray:
    """Pool-adjacent-violators fit of a monotone sequence (least squares)."""
    v = np.asarray(values, dtype=float)
    if increasing:
        return -isotonic_fit(-v, increasing=False)
    # nonincreasing fit: blocks merge when a later mean exceeds an earlier one
    means = list(v)
    counts = [1] * len(means)
    i = 0
    while i < len(means) - 1:
        if means[i] < means[i + 1] - 1e-15:
            m = (means[i] * counts[i] + means[i + 1] * counts[i + 1]) / (counts[i] + counts[i + 1])
            means[i] = m
            counts[i] += counts[i + 1]
            del means[i + 1], counts[i + 1]
            i = max(i - 1, 0)
        else:
            i += 1
    out = []
    for m, c in zip(means, counts):
        out.extend([m] * c)
    return np.asarray(out)


def trend_nonincreasing(per_width_values: list[np.ndarray]) -> bool:
    """Sign test for a non-increasing trend within the seed noise band.

    Adjacent width means may not increase by more than twice the combined
    standard error of their difference, and the last mean must not exceed
    the first by that same allowance.
    """
    means = np.array([np.mean(v) for v in per_width_values])
    ses = np.array([
        np.std(v, ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0
        for v in per_width_values
    ])
    for i in range(len(means) - 1):
        allow = 2.0 * math.hypot(ses[i], ses[i + 1])
        if means[i + 1] > means[i] + allow:
            return False
    allow = 2.0 * math.hypot(ses[0], ses[-1])
    return means[-1] <= means[0] + allow


# ---------------------------------------------------------------------------
# Convergence sweep
# ---------------------------------------------------------------------------

def _convergence_cell(args):
    cfg, width, seed_index = args
    started = time.perf_counter()
    ds = load_dataset(cfg)
    arch = build_arch(cfg, width, ds.d_in)
    train_cfg = replace(cfg.train, seed=cell_seed(cfg.base_seed, width, seed_index))
    q, _ = mfvi.train(arch, ds, mfvi.gaussian_likelihood(ds.noise_sigma2), train_cfg)

    grid_X = cfg.grid[:, None]
    rng = cell_rng(cfg.base_seed, width, seed_index, 1)
    diff, _ = mfvi.predictive_mean_gap_to_prior(q, arch, grid_X, cfg.n_pred_samples, rng)
    max_dist = float(np.max(np.abs(diff)))
    final_kl = float(mfvi.kl_to_standard_normal(q))
    elbo, _ = mfvi.elbo_estimate(q, arch, ds, mfvi.gaussian_likelihood(ds.noise_sigma2),
                                 256, cell_rng(cfg.base_seed, width, seed_index, 2))
    return {
        "width": width,
        "seed_index": seed_index,
        "max_mean_dist": max_dist,
        "final_kl": final_kl,
        "final_elbo": float(elbo),
        "wall_clock": time.perf_counter() - started,
    }


@dataclass
class ConvergenceResult:
    records: list
    widths: tuple
    bound_by_width: dict
    nngp_dist: float
    csv_path: str | None

    def per_width_distances(self) -> list[np.ndarray]:
        return [
            np.array([r.metrics["max_mean_dist"] for r in self.records if r.width == w])
            for w in self.widths
        ]


def theoretical_mean_bound(arch: net.Architecture, kl: float, x_norm: float) -> float:
    """Predictive-mean distance bound at the given divergence budget."""
    inp = bounds.BoundInputs(M=arch.width_M, L=arch.depth_L, d_in=arch.d_in,
                             x_norm=x_norm, kl=kl,
                             even_part=arch.activation.even_part or 0.0)
    if arch.depth_L == 1:
        return bounds.mean_bound_1hl(inp).value
    return bounds.mean_bound_deep(inp).value


def run_convergence(cfg: ExperimentConfig, write: bool = True) -> ConvergenceResult:
    """Train over widths x seeds; compare grid mean distances against theory.

    Per cell: fit, then the largest grid distance between the fit's
    predictive mean and the prior mean (common random numbers). The bound
    curve evaluates the single-layer mean bound at the Monte-Carlo
    divergence cap; the reference line is the same distance for the
    infinite-width posterior.
    """
    ds = load_dataset(cfg)
    if ds.d_in != 1:
        raise ConfigError("convergence sweep expects a 1-d input dataset")
    widths = tuple(sorted(cfg.widths))
    grid_X = cfg.grid[:, None]
    x_norm = float(np.max(np.abs(cfg.grid)))

    bound_by_width = {}
    for w in widths:
        arch = build_arch(cfg, w, ds.d_in)
        kl_cap, _ = bounds.kl_bound_empirical(ds, arch, ds.noise_sigma2, 512,
                                              cell_rng(cfg.base_seed, w, 3))
        bound_by_width[w] = theoretical_mean_bound(arch, kl_cap, x_norm)

    ref_arch = build_arch(cfg, widths[-1], ds.d_in)
    gp = nngp.nngp_posterior(ref_arch, ds.X, ds.y, grid_X, ds.noise_sigma2)
    nngp_dist = float(np.max(np.abs(gp.mean)))

    cells = [(cfg, w, s) for w in widths for s in range(len(cfg.seeds))]
    raw = _map_cells(_convergence_cell, cells, cfg.threads)
    chash = config_hash(cfg)
    records = [
        RunRecord(chash, m["width"], m["seed_index"],
                  {k: m[k] for k in ("max_mean_dist", "final_kl", "final_elbo")},
                  m["wall_clock"])
        for m in raw
    ]

    csv_path = None
    if write:
        csv_path = os.path.join(cfg.output_dir, "convergence.csv")
        rows = [
            (r.width, r.seed_index, r.metrics["max_mean_dist"], bound_by_width[r.width],
             nngp_dist, r.metrics["final_kl"], r.metrics["final_elbo"])
            for r in records
        ]
        _write_lines(csv_path, CONVERGENCE_CSV_HEADER, rows)
        write_metadata(cfg)
        _convergence_chart(cfg, records, widths, bound_by_width, nngp_dist)
    return ConvergenceResult(records, widths, bound_by_width, nngp_dist, csv_path)


def _convergence_chart(cfg, records, widths, bound_by_width, nngp_dist):
    chart = Chart(title="max predictive-mean distance to the prior",
                  x_label="width", y_label="distance", log_x=True, log_y=True)
    per_w = {
        w: [r.metrics["max_mean_dist"] for r in records if r.width == w] for w in widths
    }
    floor = 1e-12
    means = [max(float(np.mean(per_w[w])), floor) for w in widths]
    los = [max(float(np.min(per_w[w])), floor) for w in widths]
    his = [max(float(np.max(per_w[w])), floor) for w in widths]
    chart.add_band("seed range", widths, los, his, color="#1f6fb2")
    chart.add_series("observed", widths, means, color="#1f6fb2")
    chart.add_series("bound", widths, [bound_by_width[w] for w in widths],
                     color="#d1495b", dashed=True)
    chart.add_series("infinite-width posterior", widths,
                     [max(nngp_dist, floor)] * len(widths), color="#3a7d44", dashed=True)
    chart.write(os.path.join(cfg.output_dir, "convergence.svg"))


# ---------------------------------------------------------------------------
# RMSE sweep
# ---------------------------------------------------------------------------

def _split_dataset(cfg: ExperimentConfig, split: int):
    rng = cell_rng(cfg.base_seed, 201, split)
    name = cfg.dataset
    if name == "two_points":
        return data.make_two_points(), None
    if name in ("sine", "toy"):
        maker = data.make_sine if name == "sine" else data.make_toy
        pool = maker(cfg.dataset_size + 100, rng)
        train, test = data.standardize_split(pool, 100 / (cfg.dataset_size + 100), rng)
        return train, test
    ds = load_dataset(cfg)
    train, test = data.standardize_split(ds, cfg.test_fraction, rng)
    return train, test


def _rmse_cell(args):
    cfg, width, split = args
    started = time.perf_counter()
    train_ds, test_ds = _split_dataset(cfg, split)
    arch = build_arch(cfg, width, train_ds.d_in)
    lik = mfvi.gaussian_likelihood(train_ds.noise_sigma2)

    best = None
    for restart in range(cfg.n_restarts):
        tc = replace(cfg.train, seed=cell_seed(cfg.base_seed, width, split, restart))
        q, _ = mfvi.train(arch, train_ds, lik, tc)
        elbo, _ = mfvi.elbo_estimate(q, arch, train_ds, lik, 256,
                                     cell_rng(cfg.base_seed, width, split, restart, 1))
        if best is None or elbo > best[0]:
            best = (elbo, q)
    elbo, q = best

    rng = cell_rng(cfg.base_seed, width, split, 9)
    eval_X = rng.uniform(-1.0, 1.0, size=(100, train_ds.d_in))
    pm = mfvi.predictive_moments(q, arch, eval_X, cfg.n_pred_samples, rng)
    prior_var = nngp.output_variance(arch, eval_X)
    rmse_prior = float(np.sqrt(np.mean(pm.mean[:, 0] ** 2)))
    rmse_var = float(np.sqrt(np.mean((pm.variance[:, 0] - prior_var) ** 2)))
    rmse_test = None
    if test_ds is not None and test_ds.n > 0:
        pm_test = mfvi.predictive_moments(q, arch, test_ds.X, cfg.n_pred_samples, rng)
        rmse_test = float(np.sqrt(np.mean((pm_test.mean[:, 0] - test_ds.y) ** 2)))
    return {
        "width": width,
        "split": split,
        "rmse_mean_to_prior": rmse_prior,
        "rmse_mean_to_test_y": rmse_test,
        "rmse_var_to_prior_var": rmse_var,
        "final_kl": float(mfvi.kl_to_standard_normal(q)),
        "final_elbo": float(elbo),
        "wall_clock": time.perf_counter() - started,
    }


@dataclass
class RmseResult:
    records: list
    widths: tuple
    csv_path: str | None

    def metric_by_width(self, key: str) -> list[np.ndarray]:
        return [
            np.array([r.metrics[key] for r in self.records
                      if r.width == w and r.metrics[key] is not None])
            for w in self.widths
        ]


def run_rmse_sweep(cfg: ExperimentConfig, write: bool = True) -> RmseResult:
    """Fit width x split cells (best of n_restarts by ELBO) and tabulate RMSEs."""
    widths = tuple(sorted(cfg.widths))
    cells = [(cfg, w, s) for w in widths for s in range(cfg.n_splits)]
    raw = _map_cells(_rmse_cell, cells, cfg.threads)
    chash = config_hash(cfg)
    records = []
    for m in raw:
        metrics = {k: m[k] for k in (
            "rmse_mean_to_prior", "rmse_mean_to_test_y", "rmse_var_to_prior_var",
            "final_kl", "final_elbo")}
        records.append(RunRecord(chash, m["width"], m["split"], metrics, m["wall_clock"]))

    csv_path = None
    if write:
        csv_path = os.path.join(cfg.output_dir, "rmse_sweep.csv")
        rows = [
            (cfg.dataset, r.width, r.seed_index, r.metrics["rmse_mean_to_prior"],
             r.metrics["rmse_mean_to_test_y"], r.metrics["rmse_var_to_prior_var"],
             r.metrics["final_kl"], r.metrics["final_elbo"])
            for r in records
        ]
        _write_lines(csv_path, RMSE_CSV_HEADER, rows)
        write_metadata(cfg)
    return RmseResult(records, widths, csv_path)


# ---------------------------------------------------------------------------
# Posterior plot
# ---------------------------------------------------------------------------

@dataclass
class PlotResult:
    curves: list  # rows (curve, width, x, mean, sd)
    csv_path: str | None
    svg_path: str | None


def run_posterior_plot(cfg: ExperimentConfig, write: bool = True,
                       n_sample_paths: int = 4) -> PlotResult:
    """Mean and one-sigma bands per width, with infinite-width references."""
    ds = load_dataset(cfg)
    if ds.d_in != 1:
        raise ConfigError("posterior plot expects a 1-d input dataset")
    grid = cfg.grid
    grid_X = grid[:, None]
    lik = mfvi.gaussian_likelihood(ds.noise_sigma2)
    rows = []

    ref_arch = build_arch(cfg, max(cfg.widths), 1)
    prior_sd = np.sqrt(nngp.output_variance(ref_arch, grid_X))
    for x, s in zip(grid, prior_sd):
        rows.append(("nngp_prior", 0, float(x), 0.0, float(s)))
    gp = nngp.nngp_posterior(ref_arch, ds.X, ds.y, grid_X, ds.noise_sigma2)
    for x, m, v in zip(grid, gp.mean, gp.variance):
        rows.append(("nngp_posterior", 0, float(x), float(m), float(math.sqrt(max(v, 0.0)))))

    for width in sorted(cfg.widths):
        arch = build_arch(cfg, width, 1)
        tc = replace(cfg.train, seed=cell_seed(cfg.base_seed, width, 0))
        q, _ = mfvi.train(arch, ds, lik, tc)
        rng = cell_rng(cfg.base_seed, width, 0, 1)
        pm = mfvi.predictive_moments(q, arch, grid_X, cfg.n_pred_samples, rng)
        sd = np.sqrt(np.maximum(pm.variance[:, 0], 0.0))
        for x, m, s in zip(grid, pm.mean[:, 0], sd):
            rows.append(("mfvi", width, float(x), float(m), float(s)))
        eps = rng.standard_normal((n_sample_paths, q.n_params))
        paths = net.forward_many(arch, mfvi.sample_reparam(q, eps), grid_X)
        for k in range(n_sample_paths):
            for x, v in zip(grid, paths[k, :, 0]):
                rows.append((f"sample_{k}", width, float(x), float(v), None))

    csv_path = svg_path = None
    if write:
        csv_path = os.path.join(cfg.output_dir, "posterior_plot.csv")
        _write_lines(csv_path, PLOT_CSV_HEADER, rows)
        svg_path = os.path.join(cfg.output_dir, "posterior_plot.svg")
        _plot_chart(cfg, ds, rows, svg_path)
        write_metadata(cfg)
    return PlotResult(rows, csv_path, svg_path)


def _plot_chart(cfg, ds, rows, svg_path):
    chart = Chart(title="predictive bands vs infinite-width references",
                  x_label="x", y_label="f(x)")
    widest = max(cfg.widths)
    groups: dict = {}
    for curve, width, x, m, s in rows:
        groups.setdefault((curve, width), []).append((x, m, s))
    palette = {"nngp_prior": "#3a7d44", "nngp_posterior": "#8d6a9f", "mfvi": "#1f6fb2"}
    for (curve, width), pts in groups.items():
        xs = [p[0] for p in pts]
        ms = [p[1] for p in pts]
        if curve.startswith("sample_") and width == widest:
            chart.add_series("", xs, ms, color="#9ec5e8")
            continue
        if curve == "mfvi" and width != widest:
            continue
        if curve in palette:
            sds = [p[2] for p in pts]
            label = f"{curve} (M={width})" if curve == "mfvi" else curve
            chart.add_band("", xs, [m - s for m, s in zip(ms, sds)],
                           [m + s for m, s in zip(ms, sds)], color=palette[curve])
            chart.add_series(label, xs, ms, color=palette[curve])
    chart.add_points("data", list(ds.X[:, 0]), list(ds.y))
    chart.write(svg_path)


# ---------------------------------------------------------------------------
# Counterexample driver and the verification battery
# ---------------------------------------------------------------------------

def run_counterexample(cfg: ExperimentConfig, write: bool = True):
    """Delegates to the counterexample module with widths/config from cfg."""
    spec = counterexample.default_spec(width=max(cfg.widths))
    if cfg.activation != "relu":
        spec = dataclasses.replace(
            spec, arch=dataclasses.replace(spec.arch, activation=net.activation(cfg.activation))
        )
    train_cfg = replace(cfg.train, seed=cell_seed(cfg.base_seed, 301))
    report = counterexample.run_counterexample_check(
        spec, train_cfg, widths=tuple(sorted(cfg.widths)),
        n_pred_samples=cfg.n_pred_samples,
    )
    if write:
        os.makedirs(cfg.output_dir, exist_ok=True)
        report.to_csv(os.path.join(cfg.output_dir, "counterexample.csv"))
        write_metadata(cfg, extra={"threshold": report.threshold,
                                   "ideal_gap": report.ideal_gap,
                                   "passed": report.passed})
    return report


@dataclass(frozen=True)
class VerifyCheck:
    name: str
    passed: bool
    details: dict


@dataclass(frozen=True)
class VerifyReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_json(self, path=None) -> str:
        blob = {
            "passed": self.passed,
            "checks": [dataclasses.asdict(c) for c in self.checks],
            "version": __version__,
        }
        text = json.dumps(blob, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def run_verify(base_seed: int = 0, fault: str | None = None) -> VerifyReport:
    """Fast self-check battery: identities, bounds, gradients, norm lemmas.

    fault="sigma_shift" corrupts the parameter-bound input (a test hook
    proving that failures surface in the report and exit code).
    """
    checks = []

    # closed-form divergence vs numeric integration on a few coordinates
    from scipy.integrate import quad
    rng = cell_rng(base_seed, 1)
    q = mfvi.MeanFieldGaussian(rng.normal(0, 1, 4), rng.normal(0, 0.3, 4))
    num = 0.0
    for mu, s in zip(q.mu, q.sigma):
        def integrand(t, mu=mu, s=s):
            lq = -0.5 * math.log(2 * math.pi * s * s) - (t - mu) ** 2 / (2 * s * s)
            lp = -0.5 * math.log(2 * math.pi) - t * t / 2
            return math.exp(lq) * (lq - lp)
        num += quad(integrand, mu - 12 * s, mu + 12 * s, limit=200)[0]
    gap = abs(num - mfvi.kl_to_standard_normal(q))
    checks.append(VerifyCheck("kl_closed_form", gap < 1e-8, {"gap": gap}))

    # pathwise gradient vs central differences with shared noise
    grad_gap = _gradient_check(cell_rng(base_seed, 2))
    checks.append(VerifyCheck("pathwise_gradient", grad_gap <= 1e-4,
                              {"max_rel_err": grad_gap}))

    # parameter-norm consequences of the divergence budget
    rng = cell_rng(base_seed, 3)
    arch = net.Architecture(2, 6, 2, activation=net.activation("tanh"))
    worst = math.inf
    all_pass = True
    for _ in range(100):
        qq = mfvi.MeanFieldGaussian(
            rng.normal(0, 0.5, net.param_count(arch)),
            rng.normal(0, 0.2, net.param_count(arch)),
        )
        if fault == "sigma_shift":
            stale = bounds.verify_param_bounds(qq, arch)
            shifted = mfvi.MeanFieldGaussian(qq.mu, np.log(qq.sigma + 10.0))
            lhs = float(np.sum((shifted.sigma - 1.0) ** 2))
            item = bounds.CheckItem("sigma_minus_one_sq", lhs, stale.items[1].bound)
            all_pass = all_pass and item.passed
            worst = min(worst, item.slack)
            continue
        rep = bounds.verify_param_bounds(qq, arch)
        all_pass = all_pass and rep.passed
        worst = min(worst, min(item.slack for item in rep.items))
    checks.append(VerifyCheck("param_bounds", all_pass, {"min_slack": worst}))

    # spectral-norm moment caps
    for (i, j) in ((8, 8), (64, 64), (16, 128)):
        rep = bounds.mc_opnorm_checks(i, j, 1.0, 100, cell_rng(base_seed, 4, i, j))
        checks.append(VerifyCheck(
            f"opnorm_{i}x{j}", rep.passed,
            {item.name: item.slack for item in rep.items},
        ))

    # divergence of the spiked-output family is scale / 2 exactly
    rng = cell_rng(base_seed, 5)
    worst = 0.0
    for _ in range(5):
        arch = net.Architecture(int(rng.integers(1, 3)), int(rng.integers(2, 30)),
                                int(rng.integers(1, 4)),
                                activation=net.activation("relu"))
        scale = float(rng.uniform(0.1, 20.0))
        qq = counterexample.spiked_output_distribution(arch, scale)
        worst = max(worst, abs(mfvi.kl_to_standard_normal(qq) - scale / 2))
    checks.append(VerifyCheck("spiked_family_divergence", worst < 1e-12, {"max_err": worst}))

    return VerifyReport(tuple(checks))


def _gradient_check(rng: np.random.Generator) -> float:
    arch = net.Architecture(2, 4, 2, activation=net.activation("tanh"))
    n_params = net.param_count(arch)
    X = rng.normal(0, 1, (3, 2))
    y = rng.normal(0, 1, 3)
    lik = mfvi.gaussian_likelihood(0.5)
    q = mfvi.MeanFieldGaussian(rng.normal(0, 0.5, n_params), rng.normal(0, 0.2, n_params))
    eps = rng.standard_normal((8, n_params))
    _, _, _, g_mu, g_ls = mfvi.elbo_and_grad_given_noise(q, arch, X, y, lik, eps)
    return _fd_max_rel_err(q, arch, X, y, lik, eps, g_mu, g_ls)


def _fd_max_rel_err(q, arch, X, y, lik, eps, g_mu, g_ls, h: float = 1e-5,
                    coords: int | None = 16) -> float:
    """Max relative error of the analytic gradient vs central differences."""
    n = q.n_params
    idx = np.arange(n) if coords is None or coords >= n else \
        np.linspace(0, n - 1, coords).astype(int)
    worst = 0.0

    def err(analytic, fd):
        return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)

    for i in idx:
        for which, grad in (("mu", g_mu), ("ls", g_ls)):
            mu = q.mu.copy()
            ls = q.log_sigma.copy()
            tgt = mu if which == "mu" else ls
            tgt[i] += h
            hi = mfvi.elbo_value_given_noise(mfvi.MeanFieldGaussian(mu, ls), arch, X, y, lik, eps)
            tgt[i] -= 2 * h
            lo = mfvi.elbo_value_given_noise(mfvi.MeanFieldGaussian(mu, ls), arch, X, y, lik, eps)
            worst = max(worst, err(grad[i], (hi - lo) / (2 * h)))
    return worst
