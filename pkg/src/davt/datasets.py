"""Seeded synthetic benchmarks: Blob, model-X CIT triples, glyph rotations, symmetry.

All randomness flows through a Philox (counter-based) generator and Gaussian
draws use the Box-Muller transform, so a generator's output is fully
determined by its parameters and seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Batch, ConfigError, Observation, Tag

HYPOTHESES = ("null", "alt")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Box-Muller standard normals of the given shape."""
    shape = (size,) if isinstance(size, int) else tuple(size)
    n = int(np.prod(shape))
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * m)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:n].reshape(shape)


def _check_hypothesis(h: str) -> None:
    if h not in HYPOTHESES:
        raise ConfigError(f"hypothesis must be one of {HYPOTHESES}, got {h!r}")


def _check_spd(c: np.ndarray, name: str) -> None:
    if c.shape != (2, 2) or not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
        raise ConfigError(f"{name} must be a symmetric positive definite 2x2 matrix")


def rotated_covariance(eigenvalues=(4.0, 0.25), degrees: float = 45.0) -> np.ndarray:
    th = math.radians(degrees)
    r = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return r @ np.diag(eigenvalues) @ r.T


# -- Blob ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlobParams:
    """Nine Gaussians on a 3x3 grid; under the alternative Y uses ``alt_cov``.

    ``rho`` correlates the first coordinates of the X and Y noise. When
    ``shared_component`` is true (the default whenever rho != 0) X and Y are
    drawn around the same grid centre, so rho = 1 makes the pair as dependent
    as the marginals allow.
    """

    spacing: float = 5.0
    base_cov: np.ndarray = field(default_factory=lambda: np.eye(2))
    alt_cov: np.ndarray = field(default_factory=rotated_covariance)
    rho: float = 0.0
    hypothesis: str = "null"
    shared_component: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "base_cov", np.array(self.base_cov, dtype=np.float64))
        object.__setattr__(self, "alt_cov", np.array(self.alt_cov, dtype=np.float64))
        _check_spd(self.base_cov, "base_cov")
        _check_spd(self.alt_cov, "alt_cov")
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.spacing > 0:
            raise ConfigError("spacing must be positive")
        _check_hypothesis(self.hypothesis)

    @property
    def centers(self) -> np.ndarray:
        g = self.spacing * np.array([-1.0, 0.0, 1.0])
        return np.array([(a, b) for a in g for b in g])

    @property
    def y_cov(self) -> np.ndarray:
        return self.alt_cov if self.hypothesis == "alt" else self.base_cov

    @property
    def coupled(self) -> bool:
        return self.rho != 0.0 if self.shared_component is None else bool(self.shared_component)

    def to_dict(self) -> dict:
        return {
            "spacing": self.spacing,
            "base_cov": self.base_cov.tolist(),
            "alt_cov": self.alt_cov.tolist(),
            "rho": self.rho,
            "hypothesis": self.hypothesis,
            "shared_component": self.shared_component,
        }


def gen_blob(n: int, params: BlobParams, rng: np.random.Generator) -> Batch:
    """n pair observations (X, Y), each component a point in the plane."""
    if n < 1:
        raise ConfigError("n must be positive")
    centers = params.centers
    kx = rng.integers(0, 9, size=n)
    ky = kx if params.coupled else rng.integers(0, 9, size=n)
    xi = standard_normal(rng, (n, 2))
    eta = standard_normal(rng, (n, 2))
    rho = params.rho
    # correlate the first standard-normal coordinate of X and Y noise
    eta[:, 0] = rho * xi[:, 0] + math.sqrt(1.0 - rho * rho) * eta[:, 0]
    lx = np.linalg.cholesky(params.base_cov)
    ly = np.linalg.cholesky(params.y_cov)
    x = centers[kx] + xi @ lx.T
    y = centers[ky] + eta @ ly.T
    return Batch(np.stack([x, y], axis=1), Tag.PAIR)


def gen_blob_labelled(n: int, params: BlobParams, rng: np.random.Generator) -> Batch:
    """Two-sample data recast for independence testing.

    Each observation is (W, L) with L one-hot for the source sample (X or Y)
    chosen by a fair coin, and W drawn from that sample.
    """
    pairs = gen_blob(n, params, rng)
    coin = rng.random(n) < 0.5
    w = np.where(coin[:, None], pairs.data[:, 0], pairs.data[:, 1])
    label = np.where(coin[:, None], [1.0, 0.0], [0.0, 1.0])
    return Batch(np.stack([w, label], axis=1), Tag.PAIR)


# -- model-X conditional independence ---------------------------------------------


@dataclass(frozen=True)
class CitParams:
    """W ~ N(0, I_d), U | W ~ N(a.w, 1); V | W, U ~ N((b.w)^2 [+ 3u under alt], 1)."""

    d: int = 20
    a: np.ndarray = None
    b: np.ndarray = None
    hypothesis: str = "null"
    effect: float = 3.0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be positive")
        a = np.zeros(self.d) if self.a is None else np.array(self.a, dtype=np.float64)
        b = np.zeros(self.d) if self.b is None else np.array(self.b, dtype=np.float64)
        if a.shape != (self.d,) or b.shape != (self.d,):
            raise ConfigError("a and b must both have length d")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        _check_hypothesis(self.hypothesis)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, hypothesis: str = "null", **kw) -> CitParams:
        """Coefficients a, b drawn from N(0, I_d) / sqrt(d)."""
        a = standard_normal(rng, d) / math.sqrt(d)
        b = standard_normal(rng, d) / math.sqrt(d)
        return cls(d, a, b, hypothesis, **kw)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "hypothesis": self.hypothesis,
            "effect": self.effect,
        }


def gen_cit(n: int, params: CitParams, rng: np.random.Generator) -> Batch:
    """n triples laid out as (u, v, w_1..w_d)."""
    if n < 1:
        raise ConfigError("n must be positive")
    w = standard_normal(rng, (n, params.d))
    u = w @ params.a + standard_normal(rng, n)
    v = (w @ params.b) ** 2 + standard_normal(rng, n)
    if params.hypothesis == "alt":
        v = v + params.effect * u
    return Batch(np.column_stack([u, v, w]), Tag.CIT_TRIPLE)


def modelx_resample_batch(triples: Batch, params: CitParams, rng: np.random.Generator) -> Batch:
    """Pair each triple (U, V, W) with (U~, V, W), U~ drawn afresh from the known U | W."""
    if triples.tag is not Tag.CIT_TRIPLE:
        raise ConfigError(f"expected cit-triple observations, got {triples.tag.value}")
    data = triples.data
    w = data[:, 2:]
    u_new = w @ params.a + standard_normal(rng, len(data))
    resampled = data.copy()
    resampled[:, 0] = u_new
    return Batch(np.stack([data, resampled], axis=1), Tag.AUGMENTED_CIT_PAIR)


def modelx_resample(triple: Observation, params: CitParams, rng: np.random.Generator) -> Observation:
    if triple.tag is not Tag.CIT_TRIPLE:
        raise ConfigError(f"expected a cit-triple observation, got {triple.tag.value}")
    return modelx_resample_batch(Batch(triple.data[None], Tag.CIT_TRIPLE), params, rng)[0]


# -- rotated glyphs ---------------------------------------------------------------------

GLYPH_SIX = np.array(
    [
        [0, 0, 0, 1, 1, 1, 0, 0],
        [0, 0, 1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0, 0, 0],
        [0, 1, 0, 1, 1, 0, 0, 0],
        [0, 1, 1, 0, 0, 1, 0, 0],
        [0, 1, 0, 0, 0, 0, 1, 0],
        [0, 0, 1, 0, 0, 1, 0, 0],
        [0, 0, 0, 1, 1, 0, 0, 0],
    ],
    dtype=np.float64,
)
GLYPH_SIX.setflags(write=False)


def nine_from_six(six: np.ndarray) -> np.ndarray:
    """The six turned upside down with its (0, 0) corner pixel toggled."""
    nine = np.rot90(six, 2).copy()
    nine[0, 0] = 1.0 - nine[0, 0]
    return nine


ROTATIONS = (90, 180, 270, 360)


@dataclass(frozen=True)
class GlyphParams:
    """Mixture of rotated sixes and nines; X favours sixes with weight p, Y nines.

    ``noise_std`` adds i.i.d. Gaussian pixel noise (rotation invariant, so the
    null at p = 0.5 is unaffected).
    """

    p: float = 0.5
    side: int = 8
    glyph_six: np.ndarray = field(default_factory=lambda: GLYPH_SIX.copy())
    noise_std: float = 0.3

    def __post_init__(self):
        six = np.array(self.glyph_six, dtype=np.float64)
        if six.shape != (self.side, self.side):
            raise ConfigError("glyph raster must be side x side")
        if not np.all(np.isin(six, (0.0, 1.0))):
            raise ConfigError("glyph raster must be binary")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        object.__setattr__(self, "glyph_six", six)

    @property
    def glyph_nine(self) -> np.ndarray:
        return nine_from_six(self.glyph_six)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "side": self.side,
            "glyph_six": self.glyph_six.astype(int).tolist(),
            "glyph_nine": self.glyph_nine.astype(int).tolist(),
            "noise_std": self.noise_std,
        }


def _glyph_draws(n: int, weight_six: float, params: GlyphParams, rng) -> tuple[np.ndarray, np.ndarray]:
    is_six = rng.random(n) < weight_six
    turns = rng.integers(1, 5, size=n)  # 1..4 quarter turns = 90..360 degrees
    protos = np.stack([params.glyph_six, params.glyph_nine])
    imgs = np.empty((n, params.side, params.side))
    for k in range(1, 5):
        sel = turns == k
        imgs[sel] = np.rot90(protos, k % 4, axes=(1, 2))[np.where(is_six[sel], 0, 1)]
    if params.noise_std > 0:
        imgs = imgs + params.noise_std * standard_normal(rng, imgs.shape)
    return imgs, is_six


def gen_glyph_stream(n: int, params: GlyphParams, rng: np.random.Generator, return_classes: bool = False):
    """n pairs (X, Y) with X ~ p P6 + (1-p) P9 and Y ~ p P9 + (1-p) P6."""
    if n < 1:
        raise ConfigError("n must be positive")
    x, x_six = _glyph_draws(n, params.p, params, rng)
    y, y_six = _glyph_draws(n, 1.0 - params.p, params, rng)
    batch = Batch(np.stack([x, y], axis=1), Tag.PAIR)
    if return_classes:
        return batch, x_six, y_six
    return batch


# -- symmetry ---------------------------------------------------------------------------

SYMMETRY_MODES = ("null", "shifted")


def gen_symmetric(n: int, mode: str, rng: np.random.Generator, shift: float = 0.5) -> Batch:
    """Scalars from N(0, 1) (null) or N(shift, 1) (shifted)."""
    if mode not in SYMMETRY_MODES:
        raise ConfigError(f"mode must be one of {SYMMETRY_MODES}")
    if n < 1:
        raise ConfigError("n must be positive")
    z = standard_normal(rng, n)
    if mode == "shifted":
        z = z + shift
    return Batch(z[:, None], Tag.PLAIN)
