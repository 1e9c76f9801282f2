import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from drfuse.estimators import DRFusion, LatentCodec, check_corpus, check_frames, check_sequence_pair
from drfuse.training import SyntheticCorpus


@pytest.fixture(scope="module")
def corpus():
    return SyntheticCorpus.generate(2, seed=0, length=4)


@pytest.fixture(scope="module")
def codec(corpus):
    return LatentCodec(hidden=8, steps=3, batch=2).fit(corpus)


def test_get_params_and_clone():
    est = DRFusion(scale=1.0, steps=7)
    p = est.get_params()
    assert p["scale"] == 1.0 and p["steps"] == 7 and p["history"] == 8
    c = clone(est)
    assert c.get_params() == p and c is not est
    est.set_params(scale=0.0)
    assert est.scale == 0.0
    assert LatentCodec().get_params()["lambda_temp"] == 1.0


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_frames(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        check_frames(np.full((1, 4, 4), 2.0))
    with pytest.raises(ValueError):
        check_frames(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_sequence_pair(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        check_corpus([])
    assert check_frames(np.zeros((1, 4, 4))).dtype == torch.float64


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        LatentCodec().transform(np.zeros((1, 32, 32)))
    with pytest.raises(NotFittedError):
        DRFusion().predict(np.zeros((1, 32, 32)), np.zeros((1, 32, 32)))


def test_codec_transform_roundtrip_shapes(codec, corpus):
    x = corpus.stream(0, "vi")[:2].numpy()
    z = codec.transform(x)
    assert z.shape == (2, 8, 8, 8)
    assert codec.inverse_transform(z).shape == (2, 32, 32)
    assert len(codec.log_.rows) >= 1 and codec.latent_scale_ > 0
    with pytest.raises(ValueError):
        codec.inverse_transform(z[:, :4])


def test_pipeline_fit_predict(codec, corpus):
    est = DRFusion(codec=codec, prior_steps=2, prior_batch=2, stage2_steps=2, stage2_batch=2, steps=2)
    est.fit(corpus)
    ir, vi = corpus.stream(0, "ir")[:2].numpy(), corpus.stream(0, "vi")[:2].numpy()
    out = est.predict(ir, vi)
    assert out.shape == (2, 32, 32) and len(est.report_.rows) == 2
    again = est.predict((ir, vi))
    assert np.array_equal(out, again)
    off = est.predict(ir, vi, use_guidance=False)
    assert np.array_equal(off[0], out[0])
    with pytest.raises(ValueError):
        est.predict(ir, vi[:1])
