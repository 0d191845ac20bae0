"""Volume quality metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 99.0
PEAK_CONVENTION = "max(reference) - min(reference)"


@dataclass
class MetricReport:
    psnr_db: float
    mse: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        psnr = self.psnr_db if math.isfinite(self.psnr_db) else PSNR_CAP_DB
        out = {"psnr_db": min(float(psnr), PSNR_CAP_DB), "mse": float(self.mse), "peak_convention": PEAK_CONVENTION}
        out.update({k: float(v) if isinstance(v, (int, float, np.floating)) else v for k, v in self.extras.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _arr(v):
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def mse(reference, test) -> float:
    ref, tst = _arr(reference), _arr(test)
    if ref.shape != tst.shape:
        raise ValueError(f"dims mismatch: reference {ref.shape} vs test {tst.shape}")
    return float(np.mean((ref - tst) ** 2))


def psnr(reference, test, **extras) -> MetricReport:
    """PSNR with the peak taken as the dynamic range of ``reference``.

    Identical inputs give ``psnr_db = inf`` (serialised as 99 dB).
    """
    ref = _arr(reference)
    err = mse(reference, test)
    peak = float(ref.max() - ref.min())
    if peak <= 0:
        raise ValueError("reference volume is constant; PSNR peak is zero")
    value = math.inf if err == 0 else 10.0 * math.log10(peak * peak / err)
    return MetricReport(value, err, dict(extras))
