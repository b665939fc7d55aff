import builtins

import numpy as np
import pytest

from apa import plots

pytest.importorskip("matplotlib")


def test_figures_written_and_deterministic(tmp_path):
    C = np.corrcoef(np.random.default_rng(0).normal(size=(6, 10)))
    labels = ["a", "a", "b", "b", "c", "c"]
    for name in ("x", "y"):
        assert plots.plot_correlation(C, labels, tmp_path / f"{name}_c.png") is not None
        plots.plot_roc([("a", [0, 0.5, 1], [0, 1, 1])], tmp_path / f"{name}_r.png")
        plots.plot_confusion([[3, 1], [0, 4]], ["a", "b"], tmp_path / f"{name}_m.png")
    for kind in ("c", "r", "m"):
        a = (tmp_path / f"x_{kind}.png").read_bytes()
        assert a[:8] == b"\x89PNG\r\n\x1a\n"
        assert a == (tmp_path / f"y_{kind}.png").read_bytes()


def test_missing_matplotlib_warns_and_skips(tmp_path, monkeypatch):
    real_import = builtins.__import__

    def fake_import(name, *args, **kwargs):
        if name.startswith("matplotlib"):
            raise ImportError(name)
        return real_import(name, *args, **kwargs)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    with pytest.warns(RuntimeWarning, match="matplotlib"):
        assert plots.plot_confusion([[1]], ["a"], tmp_path / "m.png") is None
    assert not (tmp_path / "m.png").exists()
