"""Tests for the installation health check."""

import healthcheck


def test_banded_solver_check_passes():
    assert healthcheck.check_banded_solver()


def test_output_dir_check_uses_configured_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("PLRNN_SSM_OUTPUT_DIR", str(tmp_path / "health"))
    assert healthcheck.check_output_dir()
    assert (tmp_path / "health").is_dir()


def test_missing_package_is_reported(monkeypatch, capsys):
    monkeypatch.setattr(healthcheck, "REQUIRED_PACKAGES", ["numpy", "no_such_package_xyz"])
    assert not healthcheck.check_required_packages()
    assert "no_such_package_xyz - MISSING" in capsys.readouterr().out


def test_main_exit_status(monkeypatch):
    monkeypatch.setattr(healthcheck, "CHECKS", [lambda: True])
    assert healthcheck.main() == 0
    monkeypatch.setattr(healthcheck, "CHECKS", [lambda: True, lambda: False])
    assert healthcheck.main() == 1
