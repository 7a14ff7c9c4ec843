"""Shipped operating modes, observer gains and thresholds."""

from __future__ import annotations

import numpy as np

from platoonsec.detection import ObserverGains, ThresholdConfig
from platoonsec.model import ModeParams
from platoonsec.supervisor import HIGHWAY, URBAN

HIGHWAY_PARAMS = ModeParams(
    mode_id=HIGHWAY, name="highway", k1=0.2, k2=1.5, k3=2.0, time_headway=0.5,
    standstill=2.0, engine_lag=0.1, v_max=40.0,
)
URBAN_PARAMS = ModeParams(
    mode_id=URBAN, name="urban", k1=0.2, k2=2.0, k3=0.0, time_headway=1.3,
    standstill=2.0, engine_lag=0.1, v_max=16.7,
)

# rows: headway channel, velocity channel
REFERENCE_GAIN_ROWS = {
    HIGHWAY: [[0.2, 0.2, 0.4, 0.8], [0.2, -0.2, -0.2, 0.8]],
    URBAN: [[0.2, 0.2, 1.2, -1.2], [0.2, 1.2, -1.8, -1.2]],
}

# the reference highway gains leave A - LC unstable under this plant, and the
# reference urban ones settle too slowly through the detector chain; these are
# the nearest matrices that fix each problem
GAIN_ROWS = {
    HIGHWAY: [[0.64, -0.08, 0.49, 0.73], [0.23, 0.32, -0.2, 0.91]],
    URBAN: [[0.17, 0.26, 1.19, -1.17], [0.19, 1.23, -1.78, -1.21]],
}

# isolators run a low-gain copy of the detector gain so a wrong executed mode
# is not absorbed by output injection
ISOLATOR_SCALE = 0.05

THRESHOLDS = {HIGHWAY: (4.0, 6.0), URBAN: (1.0, 3.0)}
WINDOW = 20


def default_modes() -> dict:
    return {HIGHWAY: HIGHWAY_PARAMS, URBAN: URBAN_PARAMS}


def default_gains(rows=None, isolator_scale: float = ISOLATOR_SCALE) -> dict:
    rows = rows or GAIN_ROWS
    return {
        m: ObserverGains.from_channel_rows(m, np.array(r), isolator_scale * np.array(r))
        for m, r in rows.items()
    }


def default_thresholds() -> ThresholdConfig:
    return ThresholdConfig(dict(THRESHOLDS), WINDOW)
