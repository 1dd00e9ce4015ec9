"""Simulated cross-sectional stepped-wedge outcomes under the NE+RI and DTD-RI generators."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import CovStructure, VarianceComponents
from .design import TrialDesign
from .errors import InvalidSpec, SchemaError

__all__ = [
    "GenSpec",
    "Dataset",
    "CSV_HEADER",
    "substream",
    "sample_mvn_ar1",
    "generate",
]

CSV_HEADER = ("cluster", "period", "individual", "treated", "y")


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; identical regardless of call order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


@dataclass(frozen=True)
class GenSpec:
    design: TrialDesign
    generator: CovStructure
    vc: VarianceComponents
    theta: float = 0.0
    mu: float = 0.0
    seed: int = 0
    replicate_id: int = 0

    def __post_init__(self):
        gen = CovStructure.parse(self.generator)
        if gen not in (CovStructure.NE_RI, CovStructure.DTD_RI):
            raise InvalidSpec(f"data generator must be NE_RI or DTD_RI, got {gen.value}")
        object.__setattr__(self, "generator", gen)
        self.vc.check(gen)
        if not math.isfinite(self.theta) or not math.isfinite(self.mu):
            raise InvalidSpec("theta and mu must be finite")


@dataclass(frozen=True)
class Dataset:
    """Long-format outcomes, one row per individual.

    ``cluster`` and ``individual`` are 0-based; ``period`` runs ``1..J``.
    """

    cluster: np.ndarray
    period: np.ndarray
    individual: np.ndarray
    treated: np.ndarray
    y: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.y)
        for name in ("cluster", "period", "individual", "treated"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"column {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1 if len(self) else 0

    @property
    def n_periods(self) -> int:
        return int(self.period.max()) if len(self) else 0

    def take(self, index) -> "Dataset":
        return Dataset(*(getattr(self, name)[index] for name in CSV_HEADER))

    def with_y(self, y) -> "Dataset":
        return Dataset(self.cluster, self.period, self.individual, self.treated, np.asarray(y, float))

    def to_csv(self, path=None) -> str | None:
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for c, p, k, t, y in zip(
            self.cluster.tolist(), self.period.tolist(), self.individual.tolist(),
            self.treated.tolist(), self.y.tolist(),
        ):
            buf.write(f"{c},{p},{k},{t},{y!r}\n")
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text)
        return None

    @classmethod
    def from_csv(cls, source) -> "Dataset":
        """Read a CSV with header ``cluster,period,individual,treated,y``."""
        if isinstance(source, (str, Path)) and "\n" not in str(source):
            text = Path(source).read_text()
        else:
            text = str(source)
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty dataset file") from None
        header = [h.strip() for h in header]
        if tuple(header) != CSV_HEADER:
            raise SchemaError(f"expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise SchemaError(f"line {lineno}: expected 5 fields, got {len(row)}")
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4])))
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
        if not rows:
            raise SchemaError("dataset has no rows")
        cols = list(zip(*rows))
        ds = cls(
            np.asarray(cols[0], dtype=np.intp),
            np.asarray(cols[1], dtype=np.intp),
            np.asarray(cols[2], dtype=np.intp),
            np.asarray(cols[3], dtype=np.int8),
            np.asarray(cols[4], dtype=float),
        )
        if ds.cluster.min() < 0 or ds.period.min() < 1:
            raise SchemaError("cluster must be >= 0 and period >= 1")
        if not np.isin(ds.treated, (0, 1)).all():
            raise SchemaError("treated must be 0 or 1")
        if not np.isfinite(ds.y).all():
            raise SchemaError("y must be finite")
        return ds


def sample_mvn_ar1(n_periods: int, tau_gamma_sq: float, r: float, rng: np.random.Generator, size=None):
    """Stationary AR(1) draws with covariance ``tau_gamma_sq * r**|j-l|``.

    ``size`` adds leading independent replicate dimensions.
    """
    if not 0.0 <= r < 1.0:
        raise InvalidSpec(f"decay must lie in [0, 1), got {r}")
    shape = (n_periods,) if size is None else tuple(np.atleast_1d(size)) + (n_periods,)
    z = rng.standard_normal(shape)
    tau = math.sqrt(tau_gamma_sq)
    innov = tau * math.sqrt(1.0 - r * r)
    out = np.empty(shape)
    out[..., 0] = tau * z[..., 0]
    for j in range(1, n_periods):
        out[..., j] = r * out[..., j - 1] + innov * z[..., j]
    return out


def generate(spec: GenSpec) -> Dataset:
    """Draw one dataset; deterministic in ``(spec.seed, spec.replicate_id)``."""
    d = spec.design
    vc = spec.vc
    I, J, K = d.n_clusters, d.n_periods, d.cluster_period_size
    rng = substream(spec.seed, spec.replicate_id)

    alpha = rng.standard_normal(I) * math.sqrt(vc.tau_alpha_sq)
    v = rng.standard_normal(I) * math.sqrt(vc.tau_v_sq)
    if spec.generator is CovStructure.DTD_RI:
        gamma = sample_mvn_ar1(J, vc.tau_gamma_sq, vc.decay, rng, size=I)
    else:
        gamma = rng.standard_normal((I, J)) * math.sqrt(vc.tau_gamma_sq)
    eps = rng.standard_normal((I, J, K)) * math.sqrt(vc.sigma_eps_sq)

    X = d.treatment.astype(float)
    period_effect = np.arange(1, J + 1, dtype=float)
    cell_mean = spec.mu + alpha[:, None] + period_effect[None, :] + (spec.theta + v[:, None]) * X + gamma
    y = cell_mean[:, :, None] + eps

    cluster = np.repeat(np.arange(I, dtype=np.intp), J * K)
    period = np.tile(np.repeat(np.arange(1, J + 1, dtype=np.intp), K), I)
    individual = np.tile(np.arange(K, dtype=np.intp), I * J)
    treated = np.repeat(d.treatment.reshape(-1), K).astype(np.int8)
    return Dataset(cluster, period, individual, treated, y.reshape(-1))
