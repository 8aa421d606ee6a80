import os
import subprocess
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

VERSION = "0.4.0"

# Output Configuration (the only environment override)
OUTPUT_DIR = os.getenv("GIBBS_OUTPUT_DIR", "runs")

# Presets shipped in-repo
PRESET_DIR = Path(__file__).resolve().parent / "data"

# Discretization
DEFAULT_N_MODES = 32
GRID_FACTOR = 4                # synthesis grid M = GRID_FACTOR * N

# Statistics
Z_THRESHOLD = 5.0
N_BATCHES = 50
MIN_EFFECTIVE_SAMPLES = 100

# pCN step adaptation window during burn-in
PCN_TARGET_ACCEPTANCE = (0.25, 0.40)
PCN_ADAPT_EVERY = 50

# Oracles
ED_DEFAULT_DIM = 60
ED_MAX_DIM = 960
ED_TRACE_TAIL = 1e-10
QUADRATURE_MAX_POINTS = 10**7
QUADRATURE_MIN_ORDER = 20


def version_string():
    """git-describe-style version, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{VERSION}"


def validate_config():
    """Validate configuration values."""
    problems = []

    if DEFAULT_N_MODES < 1:
        problems.append("DEFAULT_N_MODES must be >= 1")
    if GRID_FACTOR < 4:
        problems.append("GRID_FACTOR must be >= 4 (sup and Hoelder norms need M >= 4N)")
    if Z_THRESHOLD <= 0:
        problems.append("Z_THRESHOLD must be positive")
    if N_BATCHES < 2:
        problems.append("N_BATCHES must be >= 2")
    lo, hi = PCN_TARGET_ACCEPTANCE
    if not 0 < lo < hi < 1:
        problems.append("PCN_TARGET_ACCEPTANCE must satisfy 0 < lo < hi < 1")
    if QUADRATURE_MIN_ORDER < 20:
        problems.append("QUADRATURE_MIN_ORDER must be >= 20")
    if ED_DEFAULT_DIM > ED_MAX_DIM:
        problems.append("ED_DEFAULT_DIM exceeds ED_MAX_DIM")
    if not PRESET_DIR.is_dir():
        problems.append(f"preset directory not found: {PRESET_DIR}")

    out = Path(OUTPUT_DIR)
    if out.exists() and not out.is_dir():
        problems.append(f"GIBBS_OUTPUT_DIR is not a directory: {out}")

    if problems:
        raise ValueError(f"Invalid configuration: {'; '.join(problems)}")

    return True


if __name__ == "__main__":
    try:
        validate_config()
        print(f" Configuration valid ({version_string()}), output -> {OUTPUT_DIR}")
    except ValueError as e:
        print(f" Configuration error: {e}")
