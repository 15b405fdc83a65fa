"""Rebuild src/envtrack/data/biosemi64.json.

Positions are reconstructed from 10-10 geometry on a unit sphere: the
midline and the 10 % circumference ring are placed at their nominal angles,
every coronal row is the circle through its two ring electrodes and its
midline electrode, cut into equal arcs.  The result is projected
azimuthal-equidistantly (vertex at the origin, nasion at +y, right at +x,
radius 0.5 at the equator).
"""
import json
from pathlib import Path

import numpy as np


def sph(theta_deg, phi_deg):
    t, p = np.radians(theta_deg), np.radians(phi_deg)
    return np.array([np.sin(t) * np.sin(p), np.sin(t) * np.cos(p), np.cos(t)])


def arc(a, b, c, n_seg):
    """Points splitting the circle through a -> b -> c into 2*n_seg equal arcs."""
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    # circumcentre: equidistant from a, b, c and in their plane
    A = np.array([ab, ac, normal])
    rhs = np.array([np.dot(ab, (a + b) / 2), np.dot(ac, (a + c) / 2), np.dot(normal, a)])
    centre = np.linalg.solve(A, rhs)
    u = (a - centre) / np.linalg.norm(a - centre)
    w = np.cross(normal / np.linalg.norm(normal), u)
    ang_c = np.arctan2(np.dot(c - centre, w), np.dot(c - centre, u))
    if ang_c < 0:
        ang_c += 2 * np.pi
    r = np.linalg.norm(a - centre)
    pts = []
    for k in range(2 * n_seg + 1):
        ang = ang_c * k / (2 * n_seg)
        p = centre + r * (np.cos(ang) * u + np.sin(ang) * w)
        pts.append(p / np.linalg.norm(p))
    return pts


def project(p):
    theta = np.degrees(np.arccos(np.clip(p[2], -1, 1)))
    phi = np.arctan2(p[0], p[1])
    r = theta / 180.0
    return (float(r * np.sin(phi)), float(r * np.cos(phi)))


pos = {}
# midline
for name, theta in [("Fpz", 72), ("AFz", 54), ("Fz", 36), ("FCz", 18), ("Cz", 0),
                    ("CPz", 18), ("Pz", 36), ("POz", 54), ("Oz", 72), ("Iz", 90)]:
    phi = 0 if name in ("Fpz", "AFz", "Fz", "FCz", "Cz") else 180
    pos[name] = sph(theta, phi)
# 10 % ring
ring = {"Fp1": -18, "AF7": -36, "F7": -54, "FT7": -72, "T7": -90, "TP7": -108,
        "P7": -126, "PO7": -144, "O1": -162}
for name, phi in ring.items():
    pos[name] = sph(72, phi)
    mirror = {"Fp1": "Fp2", "O1": "O2"}.get(name, name[:-1] + "8")
    pos[mirror] = sph(72, -phi)
pos["P9"] = sph(90, -126)
pos["P10"] = sph(90, 126)

rows = {
    "AF": ("AF7", "AFz", "AF8", ["AF5", "AF3", "AF1"]),
    "F": ("F7", "Fz", "F8", ["F5", "F3", "F1"]),
    "FC": ("FT7", "FCz", "FT8", ["FC5", "FC3", "FC1"]),
    "C": ("T7", "Cz", "T8", ["C5", "C3", "C1"]),
    "CP": ("TP7", "CPz", "TP8", ["CP5", "CP3", "CP1"]),
    "P": ("P7", "Pz", "P8", ["P5", "P3", "P1"]),
    "PO": ("PO7", "POz", "PO8", ["PO5", "PO3", "PO1"]),
}
for left, mid, right, inner in rows.values():
    pts = arc(pos[left], pos[mid], pos[right], 4)
    for k, name in enumerate(inner, start=1):
        pos[name] = pts[k]
        even = name[:-1] + str(int(name[-1]) + 1)
        pos[even] = pts[8 - k]

BIOSEMI64 = ["Fp1", "AF7", "AF3", "F1", "F3", "F5", "F7", "FT7", "FC5", "FC3", "FC1",
             "C1", "C3", "C5", "T7", "TP7", "CP5", "CP3", "CP1", "P1", "P3", "P5", "P7",
             "P9", "PO7", "PO3", "O1", "Iz", "Oz", "POz", "Pz", "CPz", "Fpz", "Fp2",
             "AF8", "AF4", "AFz", "Fz", "F2", "F4", "F6", "F8", "FT8", "FC6", "FC4",
             "FC2", "FCz", "Cz", "C2", "C4", "C6", "T8", "TP8", "CP6", "CP4", "CP2",
             "P2", "P4", "P6", "P8", "P10", "PO8", "PO4", "O2"]
assert len(BIOSEMI64) == 64 and len(set(BIOSEMI64)) == 64
doc = {
    "name": "biosemi64",
    "note": "2-D reconstruction from nominal 10-10 geometry (azimuthal equidistant); "
            "not digitised positions",
    "positions": {ch: [round(v, 6) for v in project(pos[ch])] for ch in BIOSEMI64},
}
out = Path(__file__).resolve().parents[1] / "src" / "envtrack" / "data" / "biosemi64.json"
out.write_text(json.dumps(doc, indent=1) + "\n")
print(out)
