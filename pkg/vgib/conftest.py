import pytest


@pytest.fixture(autouse=True)
def isolated_registry(tmp_path, monkeypatch):
    """Every test gets its own run registry file."""
    monkeypatch.setenv("VGIB_DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    monkeypatch.delenv("VGIB_SEED", raising=False)
