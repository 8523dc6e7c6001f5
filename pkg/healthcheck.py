#!/usr/bin/env python3
"""
Health check for the PLRNN state-space toolkit.
Diagnoses common installation issues and validates the numerical core.
"""

import os
import sys

import numpy as np

from config import Config

REQUIRED_PACKAGES = ["numpy", "scipy", "pandas", "tqdm", "dotenv"]


def print_status(message, status="INFO"):
    """Print formatted status message."""
    colors = {
        "INFO": "\033[94m",  # Blue
        "SUCCESS": "\033[92m",  # Green
        "WARNING": "\033[93m",  # Yellow
        "ERROR": "\033[91m",  # Red
        "RESET": "\033[0m",  # Reset
    }
    if not sys.stdout.isatty():
        print(f"{status}: {message}")
        return
    print(f"{colors.get(status, '')}{status}: {message}{colors['RESET']}")


def check_python_version():
    """Check Python version compatibility."""
    print_status("Checking Python version...")
    version = sys.version_info
    label = f"Python {version.major}.{version.minor}.{version.micro}"
    if (version.major, version.minor) >= (3, 11):
        print_status(f"{label} - OK", "SUCCESS")
        return True
    print_status(f"{label} - Requires Python 3.11+", "ERROR")
    return False


def check_required_packages():
    """Check if required packages are installed."""
    print_status("Checking required packages...")
    missing_packages = []
    for package in REQUIRED_PACKAGES:
        try:
            __import__(package)
            print_status(f"✓ {package}", "SUCCESS")
        except ImportError:
            print_status(f"✗ {package} - MISSING", "ERROR")
            missing_packages.append(package)

    if missing_packages:
        print_status("Install missing packages: pip install -r requirements.txt", "WARNING")
        return False
    return True


def check_banded_solver():
    """Factorize and solve a small block-tridiagonal system against a dense solve."""
    print_status("Checking banded Cholesky solver...")
    try:
        from banded import banded_cholesky, solve_cholesky_banded, to_lower_banded

        M, T = 2, 6
        n = M * T
        rng = np.random.default_rng(0)
        dense = np.zeros((n, n))
        for t in range(T):
            block = rng.standard_normal((M, M))
            dense[t * M:(t + 1) * M, t * M:(t + 1) * M] = block @ block.T + 4 * np.eye(M)
            if t:
                off = 0.3 * rng.standard_normal((M, M))
                dense[t * M:(t + 1) * M, (t - 1) * M:t * M] = off
                dense[(t - 1) * M:t * M, t * M:(t + 1) * M] = off.T
        rhs = rng.standard_normal(n)
        factor, _ = banded_cholesky(to_lower_banded(dense, 2 * M - 1), "health check")
        error = np.max(np.abs(solve_cholesky_banded(factor, rhs) - np.linalg.solve(dense, rhs)))
    except Exception as e:
        print_status(f"Banded solver failed: {e}", "ERROR")
        return False

    if error < 1e-8:
        print_status(f"Banded solve matches dense solve (max error {error:.1e})", "SUCCESS")
        return True
    print_status(f"Banded solve deviates from dense solve by {error:.1e}", "ERROR")
    return False


def check_output_dir():
    """Check that the configured output directory is writable."""
    print_status("Checking output directory...")
    try:
        result = Config.validate_config()
    except ValueError as e:
        print_status(f"Invalid configuration: {e}", "ERROR")
        return False
    if result["output_dir_writable"]:
        print_status(f"{result['output_dir']} is writable", "SUCCESS")
        print_status(
            f"workers={result['workers']}, log_level={result['log_level']}, "
            f"environment={result['environment']}",
            "INFO",
        )
        return True
    print_status(f"{result['output_dir']} is not writable", "ERROR")
    print_status("Set PLRNN_SSM_OUTPUT_DIR to a writable directory", "INFO")
    return False


CHECKS = [check_python_version, check_required_packages, check_banded_solver, check_output_dir]


def run_healthcheck():
    """Run all checks.

    Returns:
        Mapping from check name to pass/fail
    """
    print_status("=== PLRNN-SSM HEALTH CHECK ===", "INFO")
    print_status(f"Working directory: {os.getcwd()}", "INFO")
    print("")

    results = {}
    for check in CHECKS:
        results[check.__name__] = bool(check())
        print("")

    passed = sum(results.values())
    print_status("=== HEALTH CHECK SUMMARY ===", "INFO")
    print_status(
        f"Passed: {passed}/{len(CHECKS)} checks",
        "SUCCESS" if passed == len(CHECKS) else "WARNING",
    )
    return results


def main():
    """Run all health checks; exit status 1 if any fails."""
    results = run_healthcheck()
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
