"""Pick the λ whose real encode lands on a target bitrate."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

from .bitstream import LAMBDA_SCALE, serialize
from .codec import LoadedModel, compress

logger = logging.getLogger(__name__)

MAX_PROBES = 20


class TargetOutOfRangeError(ValueError):
    def __init__(self, target: float, span: tuple[float, float]):
        super().__init__(f"target {target:g} bpp is outside the achievable span [{span[0]:.6g}, {span[1]:.6g}] bpp")
        self.target = target
        self.span = span


@dataclass
class Probe:
    lam: float
    bpp: float
    blob: bytes = field(repr=False)


@dataclass
class RateControlResult:
    lam: float
    bpp: float
    blob: bytes = field(repr=False)
    probes: list[Probe]
    converged: bool
    target: float

    @property
    def deviation(self) -> float:
        return abs(self.bpp - self.target) / self.target


def _snap(lam: float) -> float:
    return max(1, round(lam * LAMBDA_SCALE)) / LAMBDA_SCALE


def search_lambda(
    encode: Callable[[float], tuple[float, bytes]],
    span: tuple[float, float],
    target: float,
    tolerance: float = 0.01,
    max_probes: int = MAX_PROBES,
) -> RateControlResult:
    """Bisection on log λ over ``span`` using ``encode(lam) -> (bpp, blob)``.

    The bracket endpoints are probed first. A probe whose bpp falls outside the
    current bracket means bpp(λ) is not monotone there; the search then stops and
    returns the best probe seen.
    """
    if target <= 0:
        raise ValueError("target bpp must be positive")
    if max_probes < 2:
        raise ValueError("need at least two probes to bracket the target")
    probes: list[Probe] = []

    def probe(lam: float) -> Probe:
        bpp, blob = encode(lam)
        p = Probe(lam, bpp, blob)
        probes.append(p)
        logger.debug("probe %d: lambda=%.6g bpp=%.6g", len(probes), lam, bpp)
        return p

    def done(p: Probe, converged: bool) -> RateControlResult:
        return RateControlResult(p.lam, p.bpp, p.blob, probes, converged, target)

    def best() -> Probe:
        return min(probes, key=lambda p: abs(p.bpp - target))

    lo = probe(_snap(span[0]))
    if abs(lo.bpp - target) <= tolerance * target:
        return done(lo, True)
    hi = probe(_snap(span[1]))
    if abs(hi.bpp - target) <= tolerance * target:
        return done(hi, True)
    if hi.bpp < lo.bpp:
        logger.warning("bpp decreases from lambda %g to %g; rate is not monotone", lo.lam, hi.lam)
        return done(best(), False)
    if not lo.bpp <= target <= hi.bpp:
        raise TargetOutOfRangeError(target, (lo.bpp, hi.bpp))

    while len(probes) < max_probes:
        lam = _snap(math.exp(0.5 * (math.log(lo.lam) + math.log(hi.lam))))
        if lam in (lo.lam, hi.lam):
            logger.warning("lambda bracket [%g, %g] cannot be split at header precision", lo.lam, hi.lam)
            break
        mid = probe(lam)
        if abs(mid.bpp - target) <= tolerance * target:
            return done(mid, True)
        if not lo.bpp <= mid.bpp <= hi.bpp:
            logger.warning("monotone rate assumption violated at lambda %g (bpp %g); using best probe", lam, mid.bpp)
            break
        if mid.bpp < target:
            lo = mid
        else:
            hi = mid
    b = best()
    return done(b, abs(b.bpp - target) <= tolerance * target)


def rate_control(img, loaded: LoadedModel, target: float, tolerance: float = 0.01, max_probes: int = MAX_PROBES) -> RateControlResult:
    h, w = img.shape[:2]

    def encode(lam: float) -> tuple[float, bytes]:
        blob = serialize(compress(img, loaded, lam))
        return 8.0 * len(blob) / (h * w), blob

    return search_lambda(encode, loaded.lambda_span, target, tolerance, max_probes)
