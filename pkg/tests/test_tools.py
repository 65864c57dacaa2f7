import numpy as np
import pytest

from jointmask.features import LogMelSpectrogram
from jointmask.linguistic import VocabError
from jointmask.tools import SimilarityMatrix, cosine_matrix, export_plot_data, phoneme_similarity, read_plot_csv


def test_cosine_matrix_basic():
    a = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    m = cosine_matrix(a, a)
    np.testing.assert_allclose(np.diag(m), 1.0)
    assert m[0, 1] == 0.0
    assert m[0, 2] == pytest.approx(2 ** -0.5)


def test_similarity_on_checkpoint(overfit_run):
    ckpt = overfit_run["ckpt"]
    syms = list(ckpt.vocab.symbols[:6])
    m = phoneme_similarity(ckpt, syms, syms)
    assert np.all(np.abs(m.values) <= 1.0)
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-6)
    assert set(m.nearest) == set(syms)
    assert all(m.nearest[s] == s for s in syms)


def test_similarity_unknown_symbol(overfit_run):
    with pytest.raises(VocabError):
        phoneme_similarity(overfit_run["ckpt"], ["nope"], ["x0"])


def test_two_by_two_csv(tmp_path):
    m = SimilarityMatrix(("a", "b"), ("c", "d"), np.array([[1.0, 0.25], [-0.5, 0.125]]))
    path = export_plot_data(m, tmp_path / "m.csv", tmp_path / "m.png", title="t")
    lines = path.read_text().splitlines()
    assert lines[0] == ",c,d"
    assert len(lines) == 3
    rows, cols, values = read_plot_csv(path)
    assert rows == ["a", "b"] and cols == ["c", "d"]
    assert values.size == 4
    assert np.array_equal(values, m.values)
    assert (tmp_path / "m.png").stat().st_size > 0


def test_spectrogram_csv_rows(tmp_path):
    spec = LogMelSpectrogram(np.random.default_rng(0).normal(size=(81, 80)))
    path = export_plot_data(spec, tmp_path / "s.csv", tmp_path / "s.png")
    rows, cols, values = read_plot_csv(path)
    assert rows is None and len(cols) == 80
    assert values.shape == (81, 80)
    assert np.max(np.abs(values - spec.frames)) <= 1e-9


def test_plain_array_and_non_finite(tmp_path):
    export_plot_data(np.eye(3), tmp_path / "e.csv")
    assert read_plot_csv(tmp_path / "e.csv")[2].tolist() == np.eye(3).tolist()
    with pytest.raises(ValueError):
        export_plot_data(np.array([[np.inf]]), tmp_path / "bad.csv")
