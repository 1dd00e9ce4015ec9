"""Random-effects structures, marginal covariance matrices and ICC parameterizations."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .design import TrialDesign
from .errors import IndexOutOfRange, InfeasibleIcc, InvalidSpec, NotPositiveDefinite

__all__ = [
    "CovStructure",
    "VarianceComponents",
    "IccSpec",
    "IccPanel",
    "icc_to_components",
    "components_to_icc",
    "ar1_matrix",
    "build_V",
    "build_Z_R",
    "woodbury_inverse",
]


class CovStructure(str, enum.Enum):
    EXCH = "EXCH"
    NE = "NE"
    NE_RI = "NE_RI"
    DTD_RI = "DTD_RI"

    @classmethod
    def parse(cls, value) -> "CovStructure":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_").replace("+", "_")
        if key == "DTD":
            key = "DTD_RI"
        try:
            return cls(key)
        except ValueError:
            raise InvalidSpec(f"unknown covariance structure {value!r}") from None

    @property
    def components(self) -> frozenset:
        return _USED[self]

    @property
    def has_decay(self) -> bool:
        return self is CovStructure.DTD_RI


_USED = {
    CovStructure.EXCH: frozenset({"tau_alpha_sq"}),
    CovStructure.NE: frozenset({"tau_alpha_sq", "tau_gamma_sq"}),
    CovStructure.NE_RI: frozenset({"tau_alpha_sq", "tau_gamma_sq", "tau_v_sq"}),
    CovStructure.DTD_RI: frozenset({"tau_gamma_sq", "tau_v_sq", "decay"}),
}


@dataclass(frozen=True)
class VarianceComponents:
    tau_alpha_sq: float = 0.0
    tau_gamma_sq: float = 0.0
    tau_v_sq: float = 0.0
    decay: float = 0.0
    sigma_eps_sq: float = 1.0

    def __post_init__(self):
        for name in ("tau_alpha_sq", "tau_gamma_sq", "tau_v_sq"):
            value = getattr(self, name)
            if not (value >= 0.0 and math.isfinite(value)):
                raise InvalidSpec(f"{name} must be a finite nonnegative variance, got {value}")
        if not (self.sigma_eps_sq > 0.0 and math.isfinite(self.sigma_eps_sq)):
            raise InvalidSpec(f"sigma_eps_sq must be positive, got {self.sigma_eps_sq}")
        if not 0.0 <= self.decay < 1.0:
            raise InvalidSpec(f"decay must lie in [0, 1), got {self.decay}")

    def check(self, structure: CovStructure) -> None:
        """Raise if a component outside ``structure`` is set."""
        structure = CovStructure.parse(structure)
        unused = {"tau_alpha_sq", "tau_gamma_sq", "tau_v_sq", "decay"} - structure.components
        bad = [name for name in sorted(unused) if getattr(self, name) != 0.0]
        if bad:
            raise InvalidSpec(f"{structure.value} does not use {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IccSpec:
    """Within-period ICCs in both arms, control-arm CAC and the error SD."""

    wpicc_control: float
    wpicc_intervention: float
    cac_control: float
    sigma_eps: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.wpicc_control < 1.0:
            raise InvalidSpec(f"wpicc_control must be in (0, 1), got {self.wpicc_control}")
        if not 0.0 < self.wpicc_intervention < 1.0:
            raise InvalidSpec(f"wpicc_intervention must be in (0, 1), got {self.wpicc_intervention}")
        if not 0.0 < self.cac_control <= 1.0:
            raise InvalidSpec(f"cac_control must be in (0, 1], got {self.cac_control}")
        if not self.sigma_eps > 0.0:
            raise InvalidSpec(f"sigma_eps must be positive, got {self.sigma_eps}")


def _ratio(num: float, den: float):
    return None if den == 0.0 else num / den


@dataclass(frozen=True)
class IccPanel:
    """Every ICC/CAC cell for one structure, in both arms.

    For the decay structure the between-period quantities depend on the lag;
    the stored values are at lag 1 and :meth:`bpicc` / :meth:`cac` give any lag.
    A CAC whose denominator variance is zero is ``None``.
    """

    structure: CovStructure
    components: VarianceComponents
    wpicc_control: float
    wpicc_intervention: float
    bpicc_control: float
    bpicc_intervention: float
    cac_control: float | None
    cac_intervention: float | None

    def bpicc(self, lag: int, treated: bool = False) -> float:
        c = self.components
        shared, total = _between_and_total(self.structure, c, lag, treated)
        return shared / (total + c.sigma_eps_sq)

    def cac(self, lag: int, treated: bool = False) -> float | None:
        c = self.components
        shared, total = _between_and_total(self.structure, c, lag, treated)
        return _ratio(shared, total)

    def to_icc_spec(self) -> IccSpec:
        return IccSpec(
            self.wpicc_control,
            self.wpicc_intervention,
            self.cac_control,
            math.sqrt(self.components.sigma_eps_sq),
        )

    def to_dict(self) -> dict:
        out = {
            "structure": self.structure.value,
            "wpicc_control": self.wpicc_control,
            "wpicc_intervention": self.wpicc_intervention,
            "bpicc_control": self.bpicc_control,
            "bpicc_intervention": self.bpicc_intervention,
            "cac_control": self.cac_control,
            "cac_intervention": self.cac_intervention,
        }
        out.update(self.components.to_dict())
        return out


def _between_and_total(structure, c, lag, treated):
    """Between-period shared variance at ``lag`` and within-period cluster variance."""
    v = c.tau_v_sq if treated else 0.0
    if structure is CovStructure.EXCH:
        return c.tau_alpha_sq, c.tau_alpha_sq
    if structure is CovStructure.DTD_RI:
        decayed = c.tau_gamma_sq * c.decay ** abs(lag) if lag else c.tau_gamma_sq
        return decayed + v, c.tau_gamma_sq + v
    between = c.tau_alpha_sq + (c.tau_gamma_sq if lag == 0 else 0.0)
    return between + v, c.tau_alpha_sq + c.tau_gamma_sq + v


def components_to_icc(vc: VarianceComponents, structure) -> IccPanel:
    structure = CovStructure.parse(structure)
    vc.check(structure)
    s2 = vc.sigma_eps_sq
    _, within_c = _between_and_total(structure, vc, 0, False)
    _, within_t = _between_and_total(structure, vc, 0, True)
    between_c, _ = _between_and_total(structure, vc, 1, False)
    between_t, _ = _between_and_total(structure, vc, 1, True)
    return IccPanel(
        structure=structure,
        components=vc,
        wpicc_control=within_c / (within_c + s2),
        wpicc_intervention=within_t / (within_t + s2),
        bpicc_control=between_c / (within_c + s2),
        bpicc_intervention=between_t / (within_t + s2),
        cac_control=_ratio(between_c, within_c),
        cac_intervention=_ratio(between_t, within_t),
    )


def icc_to_components(spec: IccSpec, structure) -> VarianceComponents:
    """Invert the ICC definitions for the two random-intervention generators."""
    structure = CovStructure.parse(structure)
    if structure not in (CovStructure.NE_RI, CovStructure.DTD_RI):
        raise InvalidSpec(f"ICC inversion is defined for NE_RI and DTD_RI, not {structure.value}")
    s2 = spec.sigma_eps**2
    control = spec.wpicc_control * s2 / (1.0 - spec.wpicc_control)
    treated = spec.wpicc_intervention * s2 / (1.0 - spec.wpicc_intervention)
    tau_v_sq = treated - control
    if tau_v_sq < 0.0:
        if tau_v_sq > -1e-15 * treated:
            tau_v_sq = 0.0
        else:
            raise InfeasibleIcc(
                f"intervention ICC {spec.wpicc_intervention} below control ICC {spec.wpicc_control}"
            )
    if structure is CovStructure.NE_RI:
        tau_alpha_sq = spec.cac_control * control
        return VarianceComponents(
            tau_alpha_sq=tau_alpha_sq,
            tau_gamma_sq=control - tau_alpha_sq,
            tau_v_sq=tau_v_sq,
            sigma_eps_sq=s2,
        )
    if spec.cac_control >= 1.0:
        raise InvalidSpec("decay structure needs CAC < 1")
    return VarianceComponents(
        tau_gamma_sq=control, tau_v_sq=tau_v_sq, decay=spec.cac_control, sigma_eps_sq=s2
    )


def ar1_matrix(n: int, r: float) -> np.ndarray:
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    if r == 0.0:
        return np.eye(n)
    return r ** lag.astype(float)


def _check_cluster(design: TrialDesign, cluster: int) -> None:
    if not 0 <= cluster < design.n_clusters:
        raise IndexOutOfRange(f"cluster {cluster} outside 0..{design.n_clusters - 1}")


def build_V(design: TrialDesign, cluster: int, structure, vc: VarianceComponents) -> np.ndarray:
    """Dense ``n_i x n_i`` marginal covariance of one cluster (period-major order)."""
    structure = CovStructure.parse(structure)
    vc.check(structure)
    _check_cluster(design, cluster)
    J, K = design.n_periods, design.cluster_period_size
    t = design.treatment[cluster].astype(float)
    if structure.has_decay:
        period_corr = ar1_matrix(J, vc.decay)
    else:
        period_corr = np.eye(J)
    cells = vc.tau_alpha_sq + vc.tau_gamma_sq * period_corr + vc.tau_v_sq * np.outer(t, t)
    V = np.kron(cells, np.ones((K, K)))
    V[np.diag_indices_from(V)] += vc.sigma_eps_sq
    return V


def build_Z_R(design: TrialDesign, cluster: int, structure, vc: VarianceComponents):
    """Random-effects design ``Z_i`` and block-diagonal covariance ``R``."""
    structure = CovStructure.parse(structure)
    vc.check(structure)
    _check_cluster(design, cluster)
    J, K = design.n_periods, design.cluster_period_size
    ones = np.ones((K, 1))
    columns, blocks = [], []
    if "tau_alpha_sq" in structure.components:
        columns.append(np.ones((J * K, 1)))
        blocks.append(np.array([[vc.tau_alpha_sq]]))
    if "tau_gamma_sq" in structure.components:
        columns.append(np.kron(np.eye(J), ones))
        corr = ar1_matrix(J, vc.decay) if structure.has_decay else np.eye(J)
        blocks.append(vc.tau_gamma_sq * corr)
    if "tau_v_sq" in structure.components:
        t = design.treatment[cluster].astype(float)
        columns.append(np.repeat(t, K)[:, None])
        blocks.append(np.array([[vc.tau_v_sq]]))
    Z = np.hstack(columns)
    q = Z.shape[1]
    R = np.zeros((q, q))
    start = 0
    for block in blocks:
        size = block.shape[0]
        R[start : start + size, start : start + size] = block
        start += size
    return Z, R


def woodbury_inverse(Z: np.ndarray, R: np.ndarray, sigma_eps_sq: float):
    """Inverse and log-determinant of ``Z R Z' + s2 I`` through the ``q x q`` system.

    Uses ``V^-1 = (I - Z R (s2 I + Z'Z R)^-1 Z') / s2`` and the determinant
    lemma, which stay valid when ``R`` is singular.
    """
    n, q = Z.shape
    ZtZ = Z.T @ Z
    core = sigma_eps_sq * np.eye(q) + ZtZ @ R
    inner = np.linalg.solve(core, Z.T)
    Vinv = (np.eye(n) - Z @ R @ inner) / sigma_eps_sq
    sign, logdet_core = np.linalg.slogdet(np.eye(q) + ZtZ @ R / sigma_eps_sq)
    if sign <= 0:
        raise NotPositiveDefinite("marginal covariance is not positive definite")
    logdet = n * math.log(sigma_eps_sq) + logdet_core
    return Vinv, logdet
