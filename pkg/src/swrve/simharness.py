"""Monte Carlo engine for coverage, bias and SE-accuracy studies over scenario grids."""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import CovStructure, IccSpec, VarianceComponents, icc_to_components
from .datagen import GenSpec, generate
from .design import TrialDesign, build_design
from .errors import ConfigError, DegenerateSample, SwrveError
from .inference import parse_dof_rule, satterthwaite_dof, wald_from_se
from .lmm import CellData, FitOptions, reml_fit
from .rve import ESTIMATORS, robust_vcov

__all__ = [
    "Analysis",
    "Scenario",
    "SimSummary",
    "MeasureBlock",
    "DEFAULT_ANALYSES",
    "SIM_CSV_HEADER",
    "measures",
    "run_scenario",
    "run_grid",
    "expand_grid",
    "load_config",
    "summary_rows",
]

SIM_CSV_HEADER = (
    "generator", "I", "S", "K", "rho0", "rho1", "cac", "theta",
    "working_model", "variance_source", "dof_rule",
    "bias", "coverage", "avg_se", "emp_se", "pct_se_err", "reject_rate", "n_converged", "mcse",
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Analysis:
    """One working model, variance source and dof rule; ``TRUE`` means the generator's structure."""

    working_model: str
    variance_source: str = "model"
    dof_rule: str = "I-2"

    def __post_init__(self):
        wm = str(self.working_model).upper()
        wm = "TRUE" if wm == "TRUE" else CovStructure.parse(wm).value
        vs = "model" if str(self.variance_source).lower() == "model" else str(self.variance_source).upper()
        if vs != "model" and vs not in ESTIMATORS:
            raise ConfigError(f"unknown variance source {self.variance_source!r}")
        object.__setattr__(self, "working_model", wm)
        object.__setattr__(self, "variance_source", vs)
        object.__setattr__(self, "dof_rule", parse_dof_rule(self.dof_rule))

    def structure(self, generator: CovStructure) -> CovStructure:
        return generator if self.working_model == "TRUE" else CovStructure(self.working_model)

    @property
    def label(self) -> str:
        return f"{self.working_model}/{self.variance_source}/{self.dof_rule}"


DEFAULT_ANALYSES = tuple(
    [Analysis(wm, vs) for wm in ("EXCH", "NE") for vs in ("model",) + ESTIMATORS]
    + [Analysis("TRUE", "model")]
)


@dataclass(frozen=True)
class Scenario:
    n_clusters: int
    n_sequences: int
    cluster_period_size: int
    rho0: float
    rho1: float
    cac: float = 0.8
    generator: CovStructure = CovStructure.NE_RI
    theta: float = 0.0
    n_reps: int = 2000
    seed: int = 0
    analyses: tuple = DEFAULT_ANALYSES
    alpha: float = 0.05
    sigma_eps: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "generator", CovStructure.parse(self.generator))
        if self.generator not in (CovStructure.NE_RI, CovStructure.DTD_RI):
            raise ConfigError("generator must be NE_RI or DTD_RI")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be positive")
        object.__setattr__(self, "analyses", tuple(self.analyses))

    @property
    def key(self) -> tuple:
        return (self.generator.value, self.n_clusters, self.n_sequences, self.cluster_period_size,
                _fmt(self.rho0), _fmt(self.rho1), _fmt(self.cac), _fmt(self.theta))

    def design(self) -> TrialDesign:
        return build_design(self.n_clusters, self.n_sequences, self.cluster_period_size)

    def components(self) -> VarianceComponents:
        return icc_to_components(IccSpec(self.rho0, self.rho1, self.cac, self.sigma_eps), self.generator)

    def stream_seed(self) -> int:
        """Seed for this scenario's replicates, derived from its content and the run seed."""
        code = [ord(ch) for ch in self.generator.value]
        key = code + [self.n_clusters, self.n_sequences, self.cluster_period_size] + [
            int(round(v * 1e6)) % (1 << 32) for v in (self.rho0, self.rho1, self.cac, self.theta)
        ]
        state = np.random.SeedSequence(int(self.seed), spawn_key=tuple(key)).generate_state(2, np.uint64)
        return int(state[0]) << 64 | int(state[1])


@dataclass(frozen=True)
class MeasureBlock:
    bias: float
    coverage: float
    avg_se: float
    emp_se: float
    pct_se_err: float | None
    reject_rate: float
    n_converged: int
    mcse: float


@dataclass(frozen=True)
class SimSummary:
    scenario: Scenario
    blocks: dict = field(repr=False)  # Analysis -> MeasureBlock | None
    n_failed_fits: dict = field(repr=False, default_factory=dict)

    def __getitem__(self, analysis) -> MeasureBlock | None:
        if not isinstance(analysis, Analysis):
            analysis = Analysis(*analysis)
        return self.blocks[analysis]


def _mean(values) -> float:
    return math.fsum(values) / len(values)


def measures(estimates, ses, covers, theta_true: float, rejects=None) -> MeasureBlock:
    """Performance measures over converged replicates.

    Empirical SE is centered at the mean estimate with divisor ``n``; the
    percentage SE error is absent when the empirical SE is zero.
    """
    est = [float(v) for v in estimates]
    n = len(est)
    if n < 2:
        raise DegenerateSample(f"need at least 2 converged replicates, got {n}")
    mean = _mean(est)
    emp = math.sqrt(math.fsum((v - mean) ** 2 for v in est) / n)
    avg = _mean([float(v) for v in ses])
    cov = _mean([1.0 if c else 0.0 for c in covers])
    rej = _mean([1.0 if r else 0.0 for r in rejects]) if rejects is not None else math.nan
    pct = 100.0 * (avg / emp - 1.0) if emp > 0.0 else None
    return MeasureBlock(
        bias=mean - theta_true,
        coverage=cov,
        avg_se=avg,
        emp_se=emp,
        pct_se_err=pct,
        reject_rate=rej,
        n_converged=n,
        mcse=math.sqrt(cov * (1.0 - cov) / n),
    )


def _replicate(sc: Scenario, design, vc, seed, rep, options):
    """Estimates for every analysis on one dataset; ``None`` marks an excluded analysis."""
    data = generate(GenSpec(design, sc.generator, vc, theta=sc.theta, seed=seed, replicate_id=rep))
    cells = CellData.from_dataset(data)
    fits, rvs = {}, {}
    out = []
    for a in sc.analyses:
        structure = a.structure(sc.generator)
        if structure not in fits:
            try:
                fit = reml_fit(cells, structure=structure, options=options)
            except SwrveError:
                fit = None
            fits[structure] = fit if fit is not None and fit.converged else None
        fit = fits[structure]
        if fit is None:
            out.append(None)
            continue
        try:
            if a.variance_source == "model":
                rv = None
                se = math.sqrt(fit.model_vcov[-1, -1])
            else:
                rk = (structure, a.variance_source)
                if rk not in rvs:
                    rvs[rk] = robust_vcov(fit, a.variance_source)
                rv = rvs[rk]
                se = rv.treatment_se
            if a.dof_rule == "I-2":
                dof = sc.n_clusters - 2
            else:
                if rv is None:
                    raise SwrveError("Satterthwaite needs an adjustment-based variance")
                dof = satterthwaite_dof(fit, rv)
            w = wald_from_se(fit.treatment_effect, se, dof, 0.0, sc.alpha)
        except SwrveError:
            out.append(None)
            continue
        out.append((w.estimate, w.se, w.covers(sc.theta), w.reject))
    return out


def run_scenario(sc: Scenario, *, threads: int = 1, options: FitOptions | None = None,
                 dump=None) -> SimSummary:
    """Simulate ``sc.n_reps`` datasets and summarize every analysis.

    Each replicate is independent and seeded from the scenario, so results
    do not depend on ``threads``.  ``dump``, if given, is a writable text
    stream receiving one CSV line per replicate and analysis.
    """
    design = sc.design()
    vc = sc.components()
    seed = sc.stream_seed()
    options = options or FitOptions()

    def job(rep):
        return _replicate(sc, design, vc, seed, rep, options)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(sc.n_reps)))
    else:
        results = [job(rep) for rep in range(sc.n_reps)]

    if dump is not None:
        for rep, row in enumerate(results):
            for a, r in zip(sc.analyses, row):
                cells = ["NA"] * 4 if r is None else [repr(r[0]), repr(r[1]), str(int(r[2])), str(int(r[3]))]
                dump.write(",".join([*map(str, sc.key), str(rep), a.label, *cells]) + "\n")

    blocks, failed = {}, {}
    for idx, a in enumerate(sc.analyses):
        ok = [row[idx] for row in results if row[idx] is not None]
        failed[a] = sc.n_reps - len(ok)
        try:
            blocks[a] = measures([r[0] for r in ok], [r[1] for r in ok], [r[2] for r in ok],
                                 sc.theta, [r[3] for r in ok])
        except DegenerateSample:
            blocks[a] = None
    return SimSummary(sc, blocks, failed)


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return "NA"
    return f"{v:.10g}"


def summary_rows(summary: SimSummary) -> list:
    sc = summary.scenario
    rows = []
    for a in sc.analyses:
        b = summary.blocks.get(a)
        head = [*sc.key, a.working_model, a.variance_source, a.dof_rule]
        if b is None:
            n_ok = sc.n_reps - summary.n_failed_fits.get(a, sc.n_reps)
            rows.append(head + ["NA"] * 6 + [str(n_ok), "NA"])
        else:
            rows.append(head + [_fmt(b.bias), _fmt(b.coverage), _fmt(b.avg_se), _fmt(b.emp_se),
                                _fmt(b.pct_se_err), _fmt(b.reject_rate), str(b.n_converged),
                                _fmt(b.mcse)])
    return rows


def load_config(source) -> dict:
    """Parse a YAML scenario config, reporting the offending line on errors."""
    import yaml

    if isinstance(source, dict):
        cfg = source
    else:
        text = str(source)
        if isinstance(source, Path) or "\n" not in text:
            try:
                text = Path(text).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        try:
            cfg = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"line {mark.line + 1}: " if mark is not None else ""
            raise ConfigError(f"{where}{getattr(exc, 'problem', None) or exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    known = {"schema_version", "seed", "reps", "alpha", "generators", "design", "icc", "theta",
             "theta_by_I", "analyses", "threads"}
    extra = set(cfg) - known
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
    return cfg


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def expand_grid(cfg: dict, *, reps: int | None = None, seed: int | None = None,
                alpha: float | None = None) -> list:
    """Cartesian product of the config's design and ICC axes, in a fixed order.

    Order: generator, I, S, K, ICC pair.  Combinations with ``I`` not a
    multiple of ``S`` are skipped.
    """
    cfg = load_config(cfg)
    if "seed" not in cfg and seed is None:
        raise ConfigError("a seed is required")
    run_seed = int(seed if seed is not None else cfg["seed"])
    n_reps = int(reps if reps is not None else cfg.get("reps", 2000))
    alpha = float(alpha if alpha is not None else cfg.get("alpha", 0.05))
    design = cfg.get("design") or {}
    icc = cfg.get("icc") or {}
    try:
        gens = [CovStructure.parse(g) for g in _as_list(cfg.get("generators", ["NE_RI"]))]
        Is = [int(v) for v in _as_list(design.get("I", []))]
        Ss = [int(v) for v in _as_list(design.get("S", []))]
        Ks = [int(v) for v in _as_list(design.get("K", []))]
        pairs = [tuple(float(x) for x in p) for p in icc.get("pairs", [])]
        cac = float(icc.get("cac", 0.8))
        theta_by_I = {int(k): float(v) for k, v in (cfg.get("theta_by_I") or {}).items()}
        theta = float(cfg.get("theta", 0.0))
        analyses = tuple(Analysis(**a) for a in cfg["analyses"]) if cfg.get("analyses") else DEFAULT_ANALYSES
    except (TypeError, ValueError, SwrveError) as exc:
        raise ConfigError(str(exc)) from None
    if any(len(p) != 2 for p in pairs):
        raise ConfigError("each ICC pair must have two entries")
    out = []
    for gen, I, S, K, (r0, r1) in itertools.product(gens, Is, Ss, Ks, pairs):
        if I % S:
            continue
        out.append(Scenario(I, S, K, r0, r1, cac, gen, theta_by_I.get(I, theta), n_reps, run_seed,
                            analyses, alpha))
    return out


def _read_existing(path: Path) -> dict:
    """Completed scenario blocks of a previous run, keyed by scenario key."""
    blocks: dict = {}
    if not path.exists():
        return blocks
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SIM_CSV_HEADER:
            return blocks
        for row in reader:
            if len(row) != len(SIM_CSV_HEADER):
                break
            blocks.setdefault(tuple(row[:8]), []).append(row)
    return blocks


def run_grid(config, out=None, *, threads: int = 1, reps: int | None = None,
             seed: int | None = None, alpha: float | None = None, resume: bool = False,
             options: FitOptions | None = None, progress=None, dump=None):
    """Run every scenario of a grid config and write the long-format CSV.

    Returns ``(summaries, n_failed_scenarios)``.  With ``resume`` the blocks
    of completed scenarios already in ``out`` are kept verbatim.
    """
    scenarios = expand_grid(config, reps=reps, seed=seed, alpha=alpha)
    path = Path(out) if out is not None else None
    existing = _read_existing(path) if (resume and path is not None) else {}
    fh = path.open("w", newline="") if path is not None else io.StringIO()
    summaries, failed = [], 0
    try:
        fh.write(",".join(SIM_CSV_HEADER) + "\n")
        fh.flush()
        for i, sc in enumerate(scenarios):
            key = tuple(str(k) for k in sc.key)
            prior = existing.get(key)
            if prior is not None and len(prior) == len(sc.analyses):
                for row in prior:
                    fh.write(",".join(row) + "\n")
                fh.flush()
                summaries.append(None)
                continue
            try:
                summary = run_scenario(sc, threads=threads, options=options, dump=dump)
                rows = summary_rows(summary)
            except SwrveError:
                failed += 1
                summary = None
                rows = [[*sc.key, a.working_model, a.variance_source, a.dof_rule]
                        + ["NA"] * 6 + ["0", "NA"] for a in sc.analyses]
            for row in rows:
                fh.write(",".join(str(v) for v in row) + "\n")
            fh.flush()
            summaries.append(summary)
            if progress is not None:
                progress(i + 1, len(scenarios), sc)
    finally:
        if path is not None:
            fh.close()
    return summaries, failed
