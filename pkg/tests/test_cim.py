"""Cross-scale interaction: shapes, gating convexity and gradients."""
import numpy as np
import pytest

from mamba_moc import autograd as ag
from mamba_moc import functional as F
from mamba_moc.autograd import Tensor
from mamba_moc.cim import CrossScaleInteraction, FeaturePyramid, cim_align, cim_distribute, cim_fuse
from mamba_moc.errors import ShapeError

from _helpers import check_gradients


def pyramid(rng, c=2, s=8, batch=1):
    return FeaturePyramid(*(Tensor(rng.normal(size=(batch, s // f, s // f, c * m)))
                            for f, m in ((1, 1), (2, 2), (4, 4))))


def test_pyramid_validation(rng):
    p = pyramid(rng)
    assert p.validate() is p and p.channels == 2
    bad = FeaturePyramid(p.f1, p.f2, Tensor(np.zeros((1, 2, 2, 7))))
    with pytest.raises(ShapeError):
        bad.validate()
    bad = FeaturePyramid(p.f1, Tensor(np.zeros((1, 3, 3, 4))), p.f3)
    with pytest.raises(ShapeError):
        bad.validate()


def test_stage_shapes(rng):
    cim = CrossScaleInteraction(2, 3, rng)
    p = pyramid(rng, batch=2)
    aligned = cim_align(cim, p)
    assert aligned.shape == (2, 2, 2, 4)
    fused = cim_fuse(cim, aligned)
    assert fused.shape == (2, 2, 2, 14)
    out = cim_distribute(cim, fused, p)
    assert [f.shape for f in out.levels] == [f.shape for f in p.levels]
    with pytest.raises(ShapeError):
        cim.distribute(Tensor(np.zeros((2, 2, 2, 13))), p)


def test_align_pools_each_level_to_stride_16(rng):
    cim = CrossScaleInteraction(1, 2, rng)
    with ag.no_grad():
        cim.align_proj.weight.data[...] = 0.0
        cim.align_proj.weight.data[0, 0, 0, 0] = 1.0      # pass f1 channel 0 through
        cim.align_proj.weight.data[0, 0, 5, 1] = 1.0      # pass f3 channel 2 through
    p = pyramid(rng, c=1)
    out = cim.align(p).data
    np.testing.assert_allclose(out[..., 0], F.avgpool2d(p.f1, 4).data[..., 0], rtol=1e-6)
    np.testing.assert_allclose(out[..., 1], p.f3.data[..., 2], rtol=1e-6)


def test_gated_output_is_convex_combination(rng):
    cim = CrossScaleInteraction(2, 3, rng)
    p = pyramid(rng)
    fused = Tensor(rng.normal(size=(1, 2, 2, 14)))
    out = cim.distribute(fused, p)
    parts = ag.split(fused, [2, 4, 8])
    for level, part, f, factor in zip(out.levels, parts, p.levels, (4, 2, 1)):
        up = F.upsample_bilinear(part, factor).data
        lo, hi = np.minimum(f.data, up), np.maximum(f.data, up)
        assert np.all(level.data >= lo - 1e-6) and np.all(level.data <= hi + 1e-6)


@pytest.mark.parametrize("bias,which", [(60.0, "f"), (-60.0, "up")])
def test_saturated_gates_select_one_source(bias, which, rng):
    cim = CrossScaleInteraction(2, 3, rng)
    with ag.no_grad():
        for gate in cim.gates:
            gate.weight.data[...] = 0.0
            gate.bias.data[...] = bias
    p = pyramid(rng)
    fused = Tensor(rng.normal(size=(1, 2, 2, 14)))
    out = cim.distribute(fused, p)
    parts = ag.split(fused, [2, 4, 8])
    for level, part, f, factor in zip(out.levels, parts, p.levels, (4, 2, 1)):
        want = f.data if which == "f" else F.upsample_bilinear(part, factor).data
        np.testing.assert_allclose(level.data, want, atol=1e-6)


def test_cim_gradients(rng):
    with ag.default_dtype(np.float64):
        cim = CrossScaleInteraction(1, 2, rng)
        p = pyramid(rng, c=1)
        for f in p.levels:
            f.requires_grad = True
        ws = [Tensor(rng.normal(size=f.shape)) for f in p.levels]

        def loss():
            out = cim(p)
            terms = [ag.sum_(ag.mul(o, w)) for o, w in zip(out.levels, ws)]
            return ag.add(ag.add(terms[0], terms[1]), terms[2])

        check_gradients(loss, list(p.levels) + cim.parameters(), rtol=1e-5, atol=1e-8)
