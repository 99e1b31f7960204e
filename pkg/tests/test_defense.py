import numpy as np
import pytest

from defdr.core import Prng
from defdr.defense import DefendedCache, DefenseConfig, defend, defend_many
from defdr.svd import defend_svd
from defdr.tsne import TsneConfig, defend_tsne


def test_config_validation_and_labels():
    assert DefenseConfig("svd").label == "SVD"
    assert DefenseConfig("tsne").label == "t-SNE"
    assert DefenseConfig("identity").label == "none"
    assert DefenseConfig("svd", 0.9).at(0.5).info == 0.5
    with pytest.raises(ValueError):
        DefenseConfig("pca")
    with pytest.raises(ValueError):
        DefenseConfig("svd", 0.0)


def test_dispatch_matches_the_direct_calls():
    imgs = Prng(1).random((2, 16, 16, 3))
    tsne = TsneConfig(perplexity=5.0, iterations=40)
    np.testing.assert_allclose(defend(imgs[0], DefenseConfig("svd", 0.8)), defend_svd(imgs[0], 0.8), atol=1e-12)
    np.testing.assert_allclose(defend(imgs, DefenseConfig("tsne", 0.9, tsne=tsne))[1],
                               defend_tsne(imgs[1], tsne, 0.9), atol=1e-8)
    out = defend_many(imgs, DefenseConfig("identity"), [0.5, 0.9])
    assert all(np.array_equal(v, imgs) and v is not imgs for v in out.values())


def test_cache_reuses_and_extends_entries():
    imgs = Prng(2).random((3, 16, 16, 3))
    cache = DefendedCache()
    cfg = DefenseConfig("svd", 0.9)
    a = cache.defend_many("set", imgs, cfg, [0.9])
    b = cache.defend_many("set", imgs, cfg.at(0.5), [0.9, 0.7])
    assert b[0.9] is a[0.9]
    np.testing.assert_allclose(b[0.7], defend_many(imgs, cfg, [0.7])[0.7], atol=1e-12)
    other = cache.defend_many("set", imgs, DefenseConfig("svd", 0.9, svd_mode="energy"), [0.9])
    assert other[0.9] is not a[0.9]
