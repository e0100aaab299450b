"""Per-(user, gesture) templates and Mahalanobis matching scores."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dsp import FeatureSeries, FeatureVector

TEMPLATE_STORE_VERSION = 1
DEFAULT_SHRINKAGE = 0.01
# reciprocal condition number below which a covariance is treated as singular
_RCOND = 1e-12


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Template:
    user: int
    gesture: int
    centroid: np.ndarray
    covariance: np.ndarray
    inverse_covariance: np.ndarray
    shrinkage: float = DEFAULT_SHRINKAGE
    n_vectors: int = 0
    threshold: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.centroid.shape[0]

    def with_threshold(self, threshold: float | None) -> "Template":
        return Template(
            self.user, self.gesture, self.centroid, self.covariance,
            self.inverse_covariance, self.shrinkage, self.n_vectors, threshold, self.meta,
        )


@dataclass(frozen=True)
class MatchScore:
    value: float
    claimant: tuple
    template: tuple[int, int]
    n_windows: int


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, FeatureSeries):
        return vectors.vectors
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(np.asarray(vectors, dtype=float))
    rows = [v.values if isinstance(v, FeatureVector) else v for v in vectors]
    return np.atleast_2d(np.asarray(rows, dtype=float))


def shrunk_covariance(x: np.ndarray, shrinkage: float) -> np.ndarray:
    """(1 - s) * S + s * (tr(S) / D) * I with S the unbiased sample covariance."""
    s = np.cov(x, rowvar=False, ddof=1)
    s = np.atleast_2d(s)
    d = s.shape[0]
    target = np.trace(s) / d
    cov = (1.0 - shrinkage) * s
    cov[np.diag_indices(d)] += shrinkage * target
    return (cov + cov.T) / 2.0


def enroll(vectors, user: int, gesture: int, shrinkage: float = DEFAULT_SHRINKAGE, meta=None) -> Template:
    x = _as_matrix(vectors)
    if x.shape[0] < 2:
        raise ValueError(f"enrollment needs at least 2 vectors, got {x.shape[0]}")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    centroid = x.mean(axis=0)
    cov = shrunk_covariance(x, shrinkage)
    eig = np.linalg.eigvalsh(cov)
    if eig[-1] <= 0 or eig[0] <= _RCOND * eig[-1]:
        hint = " (use shrinkage > 0)" if shrinkage == 0 else ""
        raise SingularCovarianceError(
            f"covariance for user {user}, gesture {gesture} is singular{hint}; "
            f"eigenvalue range [{eig[0]:.3g}, {eig[-1]:.3g}]"
        )
    inv = np.linalg.inv(cov)
    inv = (inv + inv.T) / 2.0
    return Template(
        user=int(user), gesture=int(gesture), centroid=centroid, covariance=cov,
        inverse_covariance=inv, shrinkage=float(shrinkage), n_vectors=x.shape[0],
        meta=dict(meta or {}),
    )


def score_matrix(x: np.ndarray, t: Template) -> np.ndarray:
    """Mahalanobis distance of every row of ``x`` to the template."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != t.dim:
        raise ValueError(f"feature length {x.shape[1]} does not match template length {t.dim}")
    d = x - t.centroid
    q = np.einsum("ij,ij->i", d @ t.inverse_covariance, d)
    return np.sqrt(np.maximum(q, 0.0))


def score_vector(p, t: Template) -> float:
    values = p.values if isinstance(p, FeatureVector) else np.asarray(p, dtype=float)
    if values.ndim != 1 or values.shape[0] != t.dim:
        raise ValueError(f"feature length {values.shape} does not match template length {t.dim}")
    return float(score_matrix(values[None], t)[0])


_REDUCERS = {"mean": np.mean, "median": np.median, "min": np.min}


def score_attempt(series: FeatureSeries, t: Template, reduce: str = "mean") -> MatchScore:
    """One attempt score: per-window distances reduced (mean by default)."""
    if len(series) == 0:
        raise ValueError("cannot score an empty feature series")
    distances = score_matrix(series.vectors, t)
    value = float(_REDUCERS[reduce](distances))
    return MatchScore(value, series.identity, (t.user, t.gesture), len(series))


# -- template store ----------------------------------------------------------------


def config_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_templates(path, templates: Iterable[Template], selection: str, cfg_hash: str, extra=None) -> None:
    doc = {
        "version": TEMPLATE_STORE_VERSION,
        "selection": selection,
        "config_hash": cfg_hash,
        "extra": extra or {},
        "templates": [
            {
                "user": t.user,
                "gesture": t.gesture,
                "centroid": t.centroid.tolist(),
                "covariance": t.covariance.tolist(),
                "shrinkage": t.shrinkage,
                "n_vectors": t.n_vectors,
                "threshold": t.threshold,
                "meta": t.meta,
            }
            for t in sorted(templates, key=lambda t: (t.user, t.gesture))
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


@dataclass
class TemplateStore:
    selection: str
    config_hash: str
    templates: dict[tuple[int, int], Template]
    extra: dict = field(default_factory=dict)

    def get(self, user: int, gesture: int) -> Template:
        try:
            return self.templates[(user, gesture)]
        except KeyError:
            raise KeyError(f"no template enrolled for user {user}, gesture {gesture}") from None


def load_templates(path, expected_hash: str | None = None) -> TemplateStore:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != TEMPLATE_STORE_VERSION:
        raise ValueError(f"{path}: unsupported template store version {doc.get('version')}")
    if expected_hash is not None and doc["config_hash"] != expected_hash:
        raise ConfigMismatchError(
            f"{path}: templates were built with config {doc['config_hash']}, "
            f"current config is {expected_hash}"
        )
    templates = {}
    for item in doc["templates"]:
        cov = np.asarray(item["covariance"], dtype=float)
        inv = np.linalg.inv(cov)
        t = Template(
            user=item["user"], gesture=item["gesture"],
            centroid=np.asarray(item["centroid"], dtype=float), covariance=cov,
            inverse_covariance=(inv + inv.T) / 2.0, shrinkage=item["shrinkage"],
            n_vectors=item["n_vectors"], threshold=item["threshold"], meta=item.get("meta", {}),
        )
        templates[(t.user, t.gesture)] = t
    return TemplateStore(doc["selection"], doc["config_hash"], templates, doc.get("extra", {}))
