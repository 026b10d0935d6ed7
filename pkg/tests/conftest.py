from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

SMALL = {
    "domain": {"R": 1.0, "L": 2.0, "N_z": 4, "N_rho": 3, "N_theta": 8},
    "time": {"T": 0.05, "N": 5},
    "fluid": {"enabled": "true", "rho_F": 1.0, "mu_F": 0.5, "convection": "true", "c_stab": 0.1},
    "shell": {"h": 0.1, "lambda": 50.0, "mu": 50.0, "rho_K": 1.0, "n_z": 8, "n_theta": 8},
    "net": {"topology": "none", "rho_S": 1.0},
    "bc": {"P_in": "expr: sin(2*pi*t)", "P_out": "0"},
    "init": {"preset": "rest", "amplitude": 0.0},
    "output": {"dir": "out", "cadence": 0},
}


def render(sections: dict) -> str:
    out = []
    for name, body in sections.items():
        out.append(f"[{name}]")
        out += [f"{k} = {v}" for k, v in body.items()]
        out.append("")
    return "\n".join(out)


@pytest.fixture
def write_config(tmp_path):
    """Write a small configuration, with per-section overrides, and return its path."""

    def make(name="case.ini", drop=(), **overrides):
        sections = {k: dict(v) for k, v in SMALL.items()}
        for sec, vals in overrides.items():
            sections.setdefault(sec, {}).update(vals)
        for sec, key in drop:
            sections[sec].pop(key)
        path = tmp_path / name
        path.write_text(render(sections))
        return path

    return make
