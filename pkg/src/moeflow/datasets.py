"""Synthetic target distributions: Gaussian-mixture grids, two half-moons,
and explicit mixtures for the 1-D verification suites.

Everything is generated on the fly from (spec, seed); CSV export exists for
inspection only. Mixture components may have std = 0 (point masses), which
the 1-D checks use heavily; log_density refuses those since the density is
then not a function.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError, UnsupportedSpecError, ValidationError

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class MixtureSpec:
    """Analytic description of a target distribution.

    kind "grid" and "explicit" carry components as (weight, mean, std)
    tuples with isotropic stds (std = 0 means a point mass). kind
    "halfmoon" carries the circle geometry instead; it has no closed-form
    density. Tuples rather than arrays keep the spec hashable so sample
    sets can be fingerprinted.
    """

    kind: str
    dim: int = 2
    components: tuple = ()
    radius: float = 1.0
    noise_std: float = 0.08
    vertical_offset: float = 0.5
    horizontal_offset: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("grid", "halfmoon", "explicit"):
            raise InvalidSpecError(f"unknown spec kind {self.kind!r}")
        if self.dim < 1:
            raise InvalidSpecError("dim must be positive")
        if self.kind == "halfmoon":
            if self.dim != 2:
                raise InvalidSpecError("halfmoon is 2-D only")
            if self.radius <= 0:
                raise InvalidSpecError("halfmoon radius must be positive")
            if self.noise_std < 0:
                raise InvalidSpecError("noise_std must be non-negative")
            return
        if not self.components:
            raise InvalidSpecError("mixture needs at least one component")
        for w, mean, std in self.components:
            if w < 0:
                raise InvalidSpecError("component weights must be non-negative")
            if std < 0:
                raise InvalidSpecError("component std must be non-negative")
            if len(mean) != self.dim:
                raise InvalidSpecError("component mean has wrong dimension")
        total = float(np.sum([w for w, _, _ in self.components]))
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise InvalidSpecError(f"component weights sum to {total}, not 1")

    # Convenience views for the mixture kinds.
    def weights(self) -> np.ndarray:
        self._require_mixture()
        return np.array([w for w, _, _ in self.components])

    def means(self) -> np.ndarray:
        self._require_mixture()
        return np.array([list(m) for _, m, _ in self.components])

    def stds(self) -> np.ndarray:
        self._require_mixture()
        return np.array([s for _, _, s in self.components])

    def _require_mixture(self):
        if self.kind == "halfmoon":
            raise UnsupportedSpecError("halfmoon has no mixture components")


def grid_spec(side: int = 5, extent: float = 2.0, std: float = 0.05, seed: int = 0) -> MixtureSpec:
    """Equal-weight s x s lattice of isotropic Gaussians on [-extent, extent]^2."""
    if side < 1:
        raise InvalidSpecError("side must be >= 1")
    axis = np.linspace(-extent, extent, side) if side > 1 else np.array([0.0])
    weight = 1.0 / (side * side)
    comps = tuple(
        (weight, (float(x), float(y)), float(std)) for x in axis for y in axis
    )
    return MixtureSpec(kind="grid", dim=2, components=comps, seed=seed)


def halfmoon_spec(
    radius: float = 1.0,
    noise_std: float = 0.08,
    vertical_offset: float = 0.5,
    horizontal_offset: float = 1.0,
    seed: int = 0,
) -> MixtureSpec:
    """Two interleaved half-circles, the usual two-moons construction."""
    return MixtureSpec(
        kind="halfmoon",
        dim=2,
        radius=radius,
        noise_std=noise_std,
        vertical_offset=vertical_offset,
        horizontal_offset=horizontal_offset,
        seed=seed,
    )


def explicit_spec(components, dim: int | None = None, seed: int = 0) -> MixtureSpec:
    """Mixture from (weight, mean, std) triples; means may be scalars in 1-D."""
    canon = []
    for w, mean, std in components:
        mean_t = (float(mean),) if np.ndim(mean) == 0 else tuple(float(v) for v in mean)
        canon.append((float(w), mean_t, float(std)))
    if dim is None:
        dim = len(canon[0][1]) if canon else 1
    return MixtureSpec(kind="explicit", dim=dim, components=tuple(canon), seed=seed)


def is_sign_symmetric(spec: MixtureSpec, tol: float = 1e-12) -> bool:
    """True when the target density is invariant under z -> -z.

    Mixtures qualify when the components pair up under mean negation with
    matching weights and stds. The half-moon target is point-symmetric
    about the moons' midpoint, not the origin, so it never qualifies.
    """
    if spec.kind == "halfmoon":
        return False
    comps = [(w, np.asarray(m, dtype=np.float64), s) for w, m, s in spec.components]
    unmatched = list(range(len(comps)))
    for i, (w, mean, std) in enumerate(comps):
        if i not in unmatched:
            continue
        for j in list(unmatched):
            wj, mj, sj = comps[j]
            if (
                abs(w - wj) <= tol
                and abs(std - sj) <= tol
                and np.abs(mean + mj).max() <= tol
            ):
                unmatched.remove(j)
                if i != j:
                    unmatched.remove(i)
                break
        else:
            return False
    return not unmatched


def spec_fingerprint(spec: MixtureSpec, seed) -> str:
    """Stable hash of (spec, sampling seed) identifying a SampleSet's origin."""
    payload = {
        "kind": spec.kind,
        "dim": spec.dim,
        "components": [[w, list(m), s] for w, m, s in spec.components],
        "halfmoon": [spec.radius, spec.noise_std, spec.vertical_offset, spec.horizontal_offset],
        "spec_seed": spec.seed,
        "sample_seed": seed,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SampleSet:
    """Points drawn from one spec, tagged with the generating fingerprint."""

    points: np.ndarray
    spec_fingerprint: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValidationError("points must be a 2-D array (n, m)")
        if not np.isfinite(self.points).all():
            raise ValidationError("sample set contains non-finite points")

    def __len__(self):
        return self.points.shape[0]


def sample_with_rng(spec: MixtureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points using the caller's generator (training hot path)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if spec.kind == "halfmoon":
        moon = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        x = np.where(
            moon == 0,
            spec.radius * np.cos(theta),
            spec.horizontal_offset - spec.radius * np.cos(theta),
        )
        y = np.where(
            moon == 0,
            spec.radius * np.sin(theta),
            spec.vertical_offset - spec.radius * np.sin(theta),
        )
        pts = np.stack([x, y], axis=1)
        if spec.noise_std > 0:
            pts = pts + spec.noise_std * rng.standard_normal((n, 2))
        return pts
    weights = spec.weights()
    means = spec.means()
    stds = spec.stds()
    idx = rng.choice(len(weights), size=n, p=weights)
    pts = means[idx] + stds[idx, None] * rng.standard_normal((n, spec.dim))
    return pts


def sample(spec: MixtureSpec, n: int, seed: int | None = None) -> SampleSet:
    """Draw n i.i.d. points from the spec; seed defaults to spec.seed."""
    use_seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(use_seed)
    pts = sample_with_rng(spec, n, rng)
    return SampleSet(pts, spec_fingerprint(spec, use_seed))


def sample_noise(n: int, m: int, seed: int = 0) -> SampleSet:
    """Standard normal noise draws z0 ~ N(0, I_m)."""
    if n < 1 or m < 1:
        raise ValidationError("n and m must be >= 1")
    rng = np.random.default_rng(seed)
    return SampleSet(rng.standard_normal((n, m)), f"noise-{m}d-{seed}")


def log_density(spec: MixtureSpec, x) -> np.ndarray | float:
    """log of the mixture density, stabilized with log-sum-exp.

    Defined only for grid/explicit specs with strictly positive stds.
    Accepts one point (m,) or a batch (n, m).
    """
    if spec.kind == "halfmoon":
        raise UnsupportedSpecError("halfmoon has no closed-form density")
    stds = spec.stds()
    if np.any(stds == 0):
        raise UnsupportedSpecError("point-mass component has no density")
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    pts = np.atleast_2d(x_arr)
    if pts.shape[1] != spec.dim:
        raise ValidationError(f"points must have dimension {spec.dim}")
    means = spec.means()
    log_w = np.log(spec.weights())
    # (n, C) squared distances to each component mean.
    d2 = np.sum((pts[:, None, :] - means[None, :, :]) ** 2, axis=2)
    log_norm = -0.5 * spec.dim * np.log(2 * np.pi * stds**2)
    terms = log_w[None, :] + log_norm[None, :] - d2 / (2 * stds[None, :] ** 2)
    mx = terms.max(axis=1, keepdims=True)
    out = (mx + np.log(np.exp(terms - mx).sum(axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


# -- CSV export/import -------------------------------------------------------


def save_samples_csv(path, points) -> None:
    """One point per row, header x0,x1,..., 9 decimal places, LF endings."""
    pts = points.points if isinstance(points, SampleSet) else np.asarray(points)
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(f"x{i}" for i in range(pts.shape[1])) + "\n")
        for row in pts:
            fh.write(",".join(f"{v:.9f}" for v in row) + "\n")


def load_samples_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty CSV") from None
        if not all(h.strip().startswith("x") for h in header):
            raise ValidationError(f"{path}: unexpected header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: bad value ({exc})") from None
            if len(rows[-1]) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} columns")
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
