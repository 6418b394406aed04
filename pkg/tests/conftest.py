#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
测试公共夹具：GYS参数（衰减0.21 dB/km，50 km，p_c=0.045，p_d=1.7e-6，p_e=0.033）
"""

import numpy as np
import pytest

from src.models.detection import optimize_eve_channel
from src.models.params import AliceParams, BobParams, EveParams, SystemParams

GYS_BOB = dict(efficiency=0.045, dark_count=1.7e-6, misalignment=0.033)


def gys_system(intensities=(0.48, 5.0), distance_ab=50.0, afterpulse=0.0, eve=None):
    return SystemParams(
        alice=AliceParams(intensities=tuple(intensities), attenuation=0.21, distance_ab=distance_ab),
        bob=BobParams(afterpulse=afterpulse, **GYS_BOB),
        eve=eve or EveParams(),
    )


@pytest.fixture
def gys():
    """无窃听的GYS系统，两个强度"""
    return gys_system()


@pytest.fixture
def gys_eve():
    """GYS系统加Eve：d_AE=10 km，k=3，Δ=0.2，p_EB 按伪装准则优化"""
    theta = gys_system(eve=EveParams(distance_ae=10.0, channel_eff=1.0, photons_per_pulse=3.0, intercept_fraction=0.2))
    return theta.with_values({"channel_eff": optimize_eve_channel(theta)})


@pytest.fixture
def gys_afterpulse(gys_eve):
    """带后脉冲（p_a=0.1）且探测器参数按±10%拆分的GYS系统"""
    bob = gys_eve.bob.model_copy(update={"afterpulse": (0.1, 0.1)}).split(0.1)
    return gys_eve.model_copy(update={"bob": bob})


@pytest.fixture
def gys_config():
    """与 configs/gys.json 结构一致的配置字典（两个固定强度，便于快速测试）"""
    return {
        "alice": {"intensities": [0.48, 5.0], "attenuation": 0.21, "distance_ab": 50.0},
        "bob": {"afterpulse": 0.0, **GYS_BOB},
        "eve": {"distance_ae": 10.0, "channel_eff": "optimized", "photons_per_pulse": 3.0, "intercept_fraction": 0.2},
        "session": {"pulses": 20000, "runs": 4, "seed": 11, "model": "iid"},
    }


def random_system(rng, n_lambda=2, afterpulse=False):
    """在参数域内部随机抽取一个系统（含Eve，p_EB 不做优化）"""
    distance_ab = rng.uniform(5.0, 100.0)
    bob = BobParams(
        afterpulse=tuple(rng.uniform(0.01, 0.2, 2)) if afterpulse else 0.0,
        efficiency=tuple(rng.uniform(0.02, 0.5, 2)),
        dark_count=tuple(rng.uniform(1e-7, 1e-4, 2)),
        misalignment=rng.uniform(0.005, 0.1),
    )
    eve = EveParams(
        distance_ae=rng.uniform(0.05, 0.95) * distance_ab,
        channel_eff=rng.uniform(0.05, 0.95),
        photons_per_pulse=rng.uniform(1.2, 6.0),
        intercept_fraction=rng.uniform(0.05, 0.95),
    )
    alice = AliceParams(
        intensities=tuple(sorted(rng.uniform(0.1, 10.0, n_lambda))),
        attenuation=rng.uniform(0.15, 0.3),
        distance_ab=distance_ab,
    )
    return SystemParams(alice=alice, bob=bob, eve=eve)


def assert_gradient_close(analytic, numeric, rtol=1e-5, floor=1e-8):
    """按数值梯度的最大范数衡量相对误差"""
    analytic = np.atleast_1d(np.asarray(analytic, dtype=float))
    numeric = np.atleast_1d(np.asarray(numeric, dtype=float))
    scale = max(float(np.max(np.abs(numeric))), floor)
    assert float(np.max(np.abs(analytic - numeric))) <= rtol * scale
