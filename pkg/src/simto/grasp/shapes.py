"""Parametric 2D stand-ins for feature-rich objects (counter-clockwise, centred at the origin)."""
from __future__ import annotations

import numpy as np


def _polar(r, theta):
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def circle(radius=30.0, n=96):
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return _polar(np.full(n, radius), theta)


def curvy_ball(radius=30.0, bumps=6, amplitude=0.15, n=192):
    """Disc with smooth sinusoidal bumps."""
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return _polar(radius * (1 + amplitude * np.cos(bumps * theta)), theta)


def star(outer=35.0, inner=17.0, points=5):
    theta = np.linspace(0, 2 * np.pi, 2 * points, endpoint=False) + np.pi / 2
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return _polar(r, theta)


def gear(root=26.0, tip=33.0, teeth=12, per_tooth=8):
    n = teeth * per_tooth
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    phase = (np.arange(n) % per_tooth) / per_tooth
    r = np.where((phase >= 0.25) & (phase < 0.75), tip, root)
    return _polar(r, theta)


def spiky_ball(radius=24.0, spike=12.0, spikes=8, n_arc=6):
    pts = []
    for k in range(spikes):
        t0 = 2 * np.pi * k / spikes
        dt = 2 * np.pi / spikes
        arc = t0 + np.linspace(0, 0.6 * dt, n_arc, endpoint=False)
        pts.append(_polar(np.full(n_arc, radius), arc))
        pts.append(_polar(np.array([radius + spike]), np.array([t0 + 0.8 * dt])))
    return np.concatenate(pts)


def hourglass(height=70.0, width=50.0, waist=22.0, n=24):
    """Profile of an upright hourglass: wide ends, narrow waist."""
    y = np.linspace(-height / 2, height / 2, n)
    half = waist / 2 + (width - waist) / 2 * (2 * y / height) ** 2
    right = np.column_stack([half, y])
    left = np.column_stack([-half[::-1], y[::-1]])
    return np.concatenate([right, left])


SHAPES = {
    "circle": circle,
    "curvy_ball": curvy_ball,
    "star": star,
    "gear": gear,
    "spiky_ball": spiky_ball,
    "hourglass": hourglass,
}
