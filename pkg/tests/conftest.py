from __future__ import annotations

import numpy as np

from cootest.scene import Box3D
from cootest.rng import SplitMix64


def make_box(x=0.0, y=0.0, z=0.0, l=2.0, w=2.0, h=2.0, yaw=0.0, conf=1.0) -> Box3D:
    return Box3D.create((x, y, z), (l, w, h), yaw, conf)


def random_box(stream: SplitMix64, span=4.0) -> Box3D:
    return Box3D.create(
        (stream.uniform(-span, span), stream.uniform(-span, span), stream.uniform(-1, 1)),
        (stream.uniform(1.0, 5.0), stream.uniform(1.0, 3.0), stream.uniform(0.8, 2.0)),
        stream.uniform(-np.pi, np.pi),
        stream.uniform(0.05, 1.0),
    )
