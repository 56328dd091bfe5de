"""Problem settings, peak distributions, and dataset generation.

Agents live on the segment [0, 1]. A dataset bundles true peaks (R samples
of n agents) with a misreport tensor (M alternative reports per agent per
sample), plus the problem setting and the master seed that produced it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """A dataset file (or in-memory dataset) violates the schema."""


@dataclass(frozen=True)
class DistributionSpec:
    """Peak distribution on [0, 1]: uniform, truncated normal, or beta.

    Normal draws are restricted to [0, 1] by rejection sampling (resampling
    out-of-range draws), never by clipping, so no probability mass piles up
    at the endpoints.
    """

    kind: str
    mu: float = 0.5
    sigma: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "normal", "beta"):
            raise ValueError(f"unknown distribution kind: {self.kind!r}")
        if self.kind == "normal" and self.sigma <= 0:
            raise ValueError("normal distribution needs sigma > 0")
        if self.kind == "beta" and (self.alpha <= 0 or self.beta <= 0):
            raise ValueError("beta distribution needs alpha > 0 and beta > 0")

    @classmethod
    def uniform(cls) -> "DistributionSpec":
        return cls("uniform")

    @classmethod
    def normal(cls, mu: float = 0.5, sigma: float = 1.0) -> "DistributionSpec":
        return cls("normal", mu=mu, sigma=sigma)

    @classmethod
    def make_beta(cls, alpha: float, beta: float) -> "DistributionSpec":
        return cls("beta", alpha=alpha, beta=beta)

    @classmethod
    def parse(cls, text: str) -> "DistributionSpec":
        """Parse a CLI-style spec: ``uniform``, ``normal:0.5,1``, ``beta:1,9``.

        The shorthands ``normal``, ``beta1`` and ``beta2`` expand to the
        benchmark defaults normal(0.5, 1), beta(1, 9) and beta(9, 1).
        """
        name, _, argtext = text.partition(":")
        name = name.strip().lower()
        if name == "uniform":
            return cls.uniform()
        if name == "beta1" and not argtext:
            return cls.make_beta(1.0, 9.0)
        if name == "beta2" and not argtext:
            return cls.make_beta(9.0, 1.0)
        if name == "normal":
            if not argtext:
                return cls.normal()
            mu, sigma = (float(v) for v in argtext.split(","))
            return cls.normal(mu, sigma)
        if name == "beta":
            if not argtext:
                raise ValueError("beta distribution needs alpha,beta parameters")
            alpha, beta = (float(v) for v in argtext.split(","))
            return cls.make_beta(alpha, beta)
        raise ValueError(f"unknown distribution spec: {text!r}")

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        if self.kind == "normal":
            return {"kind": "normal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "beta", "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_dict(cls, data: dict) -> "DistributionSpec":
        kind = data.get("kind")
        if kind == "uniform":
            return cls.uniform()
        if kind == "normal":
            return cls.normal(float(data["mu"]), float(data["sigma"]))
        if kind == "beta":
            return cls.make_beta(float(data["alpha"]), float(data["beta"]))
        raise DatasetError(f"unknown distribution kind in file: {kind!r}")


@dataclass(frozen=True)
class ProblemSetting:
    """Configuration shared by all instances of one experiment.

    ``weights`` holds one positive weight per agent; ``epsilon`` is the
    regret threshold above which a mechanism's fitness is penalized.
    """

    n: int
    k: int
    weights: tuple[float, ...]
    distribution: DistributionSpec
    epsilon: float = 0.0
    r: int = 1000
    m: int = 10

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one agent")
        if self.k < 1:
            raise ValueError("need at least one facility")
        if self.r < 1:
            raise ValueError("need at least one sample")
        if self.m < 0:
            raise ValueError("misreport count must be >= 0")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if len(self.weights) != self.n:
            raise ValueError("weights length must equal agent count")
        if any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive")

    @property
    def weighted(self) -> bool:
        return any(w != 1 for w in self.weights)

    @classmethod
    def unweighted(cls, n: int, k: int, distribution: DistributionSpec,
                   epsilon: float = 0.0, r: int = 1000, m: int = 10) -> "ProblemSetting":
        return cls(n=n, k=k, weights=(1.0,) * n, distribution=distribution,
                   epsilon=epsilon, r=r, m=m)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "K": self.k,
            "weights": list(self.weights),
            "distribution": self.distribution.to_dict(),
            "epsilon": self.epsilon,
            "R": self.r,
            "M": self.m,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSetting":
        return cls(
            n=int(data["n"]),
            k=int(data["K"]),
            weights=tuple(float(w) for w in data["weights"]),
            distribution=DistributionSpec.from_dict(data["distribution"]),
            epsilon=float(data["epsilon"]),
            r=int(data["R"]),
            m=int(data["M"]),
        )


@dataclass
class Dataset:
    """True peaks plus misreports for one problem setting.

    peaks has shape (R, n); misreports has shape (R, n, M). Every entry
    lies in [0, 1].
    """

    setting: ProblemSetting
    seed: int
    peaks: np.ndarray
    misreports: np.ndarray

    def validate(self) -> None:
        s = self.setting
        if self.peaks.shape != (s.r, s.n):
            raise DatasetError(
                f"peaks shape {self.peaks.shape} does not match setting (R={s.r}, n={s.n})")
        if self.misreports.shape != (s.r, s.n, s.m):
            raise DatasetError(
                f"misreports shape {self.misreports.shape} does not match "
                f"setting (R={s.r}, n={s.n}, M={s.m})")
        for name, arr in (("peaks", self.peaks), ("misreports", self.misreports)):
            if arr.size and (not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0):
                raise DatasetError(f"{name} contain values outside [0, 1]")


def sample_peaks(spec: DistributionSpec, n: int, r: int, seed: int) -> np.ndarray:
    """Draw an (R, n) matrix of peaks, deterministic in the seed."""
    if n < 1 or r < 1:
        raise ValueError("n and R must be >= 1")
    rng = np.random.default_rng(seed)
    if spec.kind == "uniform":
        return rng.random((r, n))
    if spec.kind == "beta":
        return rng.beta(spec.alpha, spec.beta, size=(r, n))
    # Truncated normal via rejection: redraw until every value lands in range.
    out = np.empty(r * n, dtype=np.float64)
    filled = 0
    while filled < out.size:
        draw = rng.normal(spec.mu, spec.sigma, size=out.size - filled)
        kept = draw[(draw >= 0.0) & (draw <= 1.0)]
        out[filled:filled + kept.size] = kept
        filled += kept.size
    return out.reshape(r, n)


def sample_misreports(n: int, r: int, m: int, seed: int) -> np.ndarray:
    """Draw an (R, n, M) tensor of i.i.d. uniform misreports.

    Misreports are independent of the true peaks; uniform coverage of the
    whole segment maximizes the chance of catching a profitable deviation.
    """
    if m < 0:
        raise ValueError("M must be >= 0")
    rng = np.random.default_rng(seed)
    return rng.random((r, n, m))


def generate_dataset(setting: ProblemSetting, seed: int) -> Dataset:
    """Generate peaks and misreports from one master seed.

    The master seed splits into independent per-purpose streams so either
    part can be regenerated alone without disturbing the other.
    """
    peaks_seed, mis_seed = (
        int(s) for s in np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64))
    ds = Dataset(
        setting=setting,
        seed=int(seed),
        peaks=sample_peaks(setting.distribution, setting.n, setting.r, peaks_seed),
        misreports=sample_misreports(setting.n, setting.r, setting.m, mis_seed),
    )
    ds.validate()
    return ds


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as JSON; floats keep full round-trip precision."""
    dataset.validate()
    payload = {
        "schema_version": SCHEMA_VERSION,
        "setting": dataset.setting.to_dict(),
        "seed": dataset.seed,
        "peaks": dataset.peaks.tolist(),
        "misreports": dataset.misreports.tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset file {path}: {exc}") from exc
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version: {payload.get('schema_version')!r}")
    try:
        setting = ProblemSetting.from_dict(payload["setting"])
        seed = int(payload["seed"])
        peaks = np.asarray(payload["peaks"], dtype=np.float64)
        misreports = np.asarray(payload["misreports"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed dataset file: {exc}") from exc
    if misreports.size == 0:
        misreports = misreports.reshape(setting.r, setting.n, setting.m)
    if peaks.ndim != 2 or misreports.ndim != 3:
        raise DatasetError("peaks must be 2-D and misreports 3-D")
    ds = Dataset(setting=setting, seed=seed, peaks=peaks, misreports=misreports)
    ds.validate()
    return ds


def arbitrary_weight_sets(n: int) -> list[tuple[float, ...]]:
    """Fixed catalog of integer weight sets used by the arbitrary-weight runs."""
    raw = json.loads(
        resources.files("facmech").joinpath("data/arbitrary_weights.json").read_text())
    try:
        sets = raw[str(n)]
    except KeyError:
        raise ValueError(f"no stored weight sets for n={n}") from None
    return [tuple(float(w) for w in ws) for ws in sets]
