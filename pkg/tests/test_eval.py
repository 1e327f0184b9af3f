import csv
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import linalg

from ditjscc.channel import ChannelConfig, cbr
from ditjscc.diffusion import GuidanceConfig
from ditjscc.eval import (
    BA_HEADER,
    SWEEP_HEADER,
    Evaluator,
    MetricReport,
    _sqrt_psd_eigs,
    ba_comparison,
    branch_ablation,
    class_consistency,
    feature_cosine,
    frechet_distance,
    half_split,
    plot_sweep,
    psnr,
    psnr_per_image,
    sweep_cbr,
    write_csv,
)
from ditjscc.system import SystemConfig


def test_psnr_conventions():
    x = torch.rand(2, 3, 8, 8)
    assert psnr(x, x) == math.inf
    assert torch.isinf(psnr_per_image(x, x)).all()
    y = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert psnr(y, y + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, x[:1])


def test_psnr_against_pixel_loop():
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(2, 3, 5, 5, generator=g), torch.rand(2, 3, 5, 5, generator=g)
    total, n = 0.0, 0
    for v in np.nditer((x - y).double().numpy()):
        total += float(v) ** 2
        n += 1
    assert psnr(x, y) == pytest.approx(10 * math.log10(n / total), abs=1e-9)


def test_feature_cosine_bounds(extractor):
    x = torch.rand(8, 3, 32, 32)
    assert torch.allclose(feature_cosine(x, x, extractor), torch.ones(8, dtype=torch.float64), atol=1e-6)
    c = feature_cosine(x, 1 - x, extractor)
    assert (c <= 1 + 1e-9).all() and (c >= -1 - 1e-9).all()


def test_same_class_pairs_score_higher(extractor, corpus):
    _, test = corpus.split(600)
    x = test.tensor()
    lab = test.labels
    g = np.random.default_rng(0)
    a = g.integers(len(x), size=2000)
    b = g.integers(len(x), size=2000)
    cos = feature_cosine(x[a], x[b], extractor).numpy()
    same = lab[a] == lab[b]
    assert cos[same].mean() > cos[~same].mean() + 0.2


def test_class_consistency_on_clean_images(extractor, corpus):
    _, test = corpus.split(600)
    assert class_consistency(test.tensor(), test.labels, extractor) > 0.85


def test_frechet_identical_and_symmetric():
    g = np.random.default_rng(0)
    a, b = g.normal(size=(400, 6)), g.normal(1.0, 2.0, size=(300, 6))
    assert abs(frechet_distance(a, a)) < 1e-6
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-9


def test_frechet_one_dimensional_closed_form():
    g = np.random.default_rng(1)
    a = g.normal(0.0, 1.0, size=10**5)
    b = g.normal(1.0, 1.0, size=10**5)
    assert frechet_distance(a, b) == pytest.approx(1.0, abs=0.03)


def test_frechet_matches_scipy_sqrtm():
    g = np.random.default_rng(2)
    mix = g.normal(size=(5, 5))
    a = g.normal(size=(500, 5)) @ mix
    b = g.normal(0.3, 1.0, size=(500, 5)) @ mix.T
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(ca @ cb).real
    ref = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca + cb - 2 * covmean)
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-8)


def test_frechet_errors():
    with pytest.raises(ValueError, match="samples"):
        frechet_distance(np.zeros((5, 4)), np.zeros((5, 4)))
    with pytest.raises(np.linalg.LinAlgError, match="condition"):
        _sqrt_psd_eigs(np.diag([1.0, -0.5]), "test")
    w, _ = _sqrt_psd_eigs(np.diag([1.0, -1e-12]), "test")  # tiny negatives are clipped
    assert w.min() == 0.0


@given(st.integers(0, 10**6), st.integers(1, 4), st.floats(0.1, 5.0))
@settings(max_examples=30, deadline=None)
def test_frechet_properties(seed, d, scale):
    g = np.random.default_rng(seed)
    a = g.normal(size=(10 * d + 20, d))
    b = scale * g.normal(size=(10 * d + 20, d)) + g.normal(size=d)
    assert abs(frechet_distance(a, a)) < 1e-6
    dab = frechet_distance(a, b)
    assert dab >= 0.0
    assert abs(dab - frechet_distance(b, a)) < 1e-9 * max(1.0, dab)


# evaluation harness on a stub system whose distortion falls with rate


class StubSystem:
    def __init__(self, extractor):
        self.extractor = extractor
        self.cfg = SystemConfig()

    def reconstruct(self, x, k_s, k_d, channel, guidance, generator):
        noise = torch.randn(x.shape, generator=generator)
        return (x + noise * 0.5 / (1 + (k_s + 2 * k_d) / 64)).clamp(0, 1)


@pytest.fixture(scope="module")
def evaluator(extractor, corpus):
    _, test = corpus.split(600)
    sub = test.stratified(40)
    return Evaluator(StubSystem(extractor), sub.tensor(), sub.labels, ChannelConfig(), GuidanceConfig(), seed=0, batch=64)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_half_split():
    ks = SystemConfig().candidates.ks_set
    assert half_split(512, ks) == (256, 256)
    assert half_split(384, ks) == (192, 192)
    assert half_split(128, ks) == (64, 64)
    assert half_split(192, ks) == (64, 128)  # tie toward fewer semantic symbols


def test_sweep_rows_match_direct_evaluation(evaluator, tmp_path):
    cbrs = [cbr(k, 32, 32) for k in (128, 256, 512)]
    rows = sweep_cbr(evaluator, cbrs)
    assert len(rows) == 3
    direct = MetricReport.measure(evaluator.images, evaluator._run(np.arange(len(evaluator.images)), 128, 128,
                                                                  GuidanceConfig()), evaluator.labels,
                                  evaluator.system.extractor)
    assert rows[1][6:] == direct.row()
    write_csv(tmp_path / "s.csv", SWEEP_HEADER, rows)
    out = read_csv(tmp_path / "s.csv")
    assert tuple(out[0]) == SWEEP_HEADER and len(out) == 4
    assert [float(r[0]) for r in out[1:]] == pytest.approx(cbrs, abs=1e-6)
    feat = [float(r[7]) for r in out[1:]]
    assert feat == sorted(feat)
    plot_sweep(tmp_path / "s.svg", rows)
    svg = (tmp_path / "s.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_results_do_not_depend_on_evaluation_order(extractor, evaluator):
    fresh = Evaluator(evaluator.system, evaluator.images, evaluator.labels, evaluator.channel, evaluator.guidance)
    a = fresh.report(64, 64)
    b = evaluator.report(64, 64)
    assert a.row() == b.row()


def test_branch_grid_rows(evaluator):
    pairs = [(0, 128), (64, 64), (128, 0)]
    rows = branch_ablation(evaluator, pairs)
    assert [(int(r[2]), int(r[3])) for r in rows] == pairs
    assert all(int(r[1]) == 128 for r in rows)


def test_ba_comparison_budget_parity(evaluator):
    n = len(evaluator.images)
    kcba = [(192, 320) if i % 2 else (320, 192) for i in range(n)]
    rows = ba_comparison(evaluator, {"fixed": [(256, 256)] * n, "kcba": kcba})
    assert [r[0] for r in rows] == ["fixed", "kcba"]
    assert abs(float(rows[0][1]) - float(rows[1][1])) <= 1
    assert len(rows[0]) == len(BA_HEADER)


def test_per_image_reconstruction_groups_allocations(evaluator):
    n = len(evaluator.images)
    allocs = [(64, 64)] * n
    assert torch.equal(evaluator.reconstruct_per_image(allocs), evaluator.reconstruct(64, 64))
