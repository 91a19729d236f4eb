import os

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Carpeta aislada para logs, traza SQLite y artefactos."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("TRACE_DB_PATH", str(tmp_path / "trace.db"))
    for key in [k for k in os.environ if k.startswith("MLSLAB_")]:
        monkeypatch.delenv(key)
    return tmp_path
