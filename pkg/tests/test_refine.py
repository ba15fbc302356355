import numpy as np
import pytest
import torch

from sgreg.networks import build_bundle, parameter_checksum
from sgreg.refine import (
    ExternalRefineConfig,
    RefineConfig,
    optimize_params_batch,
    refine,
    refine_external,
)
from sgreg.synthdata import generate_conflict_pair, generate_plain_pair
from sgreg.training import TrainConfig, predict, train
from sgreg.transform import AffineBounds


@pytest.fixture(scope="module")
def trained_stn_u():
    samples = [generate_plain_pair(i, image_size=32) for i in range(12)]
    bundle, _ = train(TrainConfig(variant="STN-u", epochs=30, batch_size=6, seed=2), samples)
    return bundle, samples


def test_zero_learning_rate_returns_one_pass_prediction(trained_stn_u):
    bundle, samples = trained_stn_u
    s = generate_plain_pair(500, image_size=32)
    one_pass, _, _ = predict(bundle, s.M, s.F)
    params, trace = refine(bundle, s.M, s.F, RefineConfig(max_iters=1, learning_rate=0.0))
    assert torch.allclose(params.vector(), one_pass.vector(), atol=1e-12)
    assert trace.iterations_run == 1
    assert torch.allclose(trace.initial_params.vector(), one_pass.vector(), atol=1e-12)


def test_perfect_pair_converges_immediately():
    # fresh model, M == F: refinement loss starts at zero (32x32 sampling is
    # exact in float32), so nothing moves
    bundle = build_bundle("STN-u", "affine", (32, 32), seed=0)
    s = generate_plain_pair(7, image_size=32)
    params, trace = refine(bundle, s.M, s.M, RefineConfig(max_iters=100, learning_rate=1e-3))
    assert trace.converged
    assert trace.iterations_run == 1
    assert params.vector().abs().max() < 1e-6


def test_refine_leaves_inputs_unmodified(trained_stn_u):
    bundle, _ = trained_stn_u
    s = generate_plain_pair(501, image_size=32)
    stn_before = parameter_checksum(bundle.stn)
    itn_before = parameter_checksum(bundle.itn)
    refine(bundle, s.M, s.F, RefineConfig(max_iters=25, learning_rate=1e-3))
    assert parameter_checksum(bundle.stn) == stn_before
    assert parameter_checksum(bundle.itn) == itn_before


def test_itn_stays_frozen_during_refinement():
    samples = [generate_conflict_pair(i, image_size=32) for i in range(8)]
    bundle, _ = train(TrainConfig(variant="ISTN-e", epochs=5, batch_size=4, seed=3), samples)
    before = parameter_checksum(bundle.itn)
    refine(bundle, samples[0].M, samples[0].F, RefineConfig(max_iters=25, learning_rate=1e-3))
    assert parameter_checksum(bundle.itn) == before


def test_best_loss_is_non_increasing_and_achieved(trained_stn_u):
    bundle, _ = trained_stn_u
    s = generate_plain_pair(502, image_size=32)
    params, trace = refine(bundle, s.M, s.F, RefineConfig(max_iters=120, learning_rate=1e-3))
    losses = np.array(trace.losses)
    assert len(losses) == trace.iterations_run
    best_so_far = np.minimum.accumulate(losses)
    assert (np.diff(best_so_far) <= 0).all()
    # the returned parameters reproduce the best loss seen
    from sgreg.losses import loss_refine
    from sgreg.training import prediction_field
    from sgreg.transform import resample

    field = prediction_field(bundle, s.M, s.F, params)
    value = float(loss_refine(resample(s.M, field).data.float(), s.F.data.float()))
    assert value == pytest.approx(losses.min(), rel=1e-4)


def test_final_loss_never_worse_than_initial(trained_stn_u):
    bundle, _ = trained_stn_u
    for seed in (503, 504, 505):
        s = generate_plain_pair(seed, image_size=32)
        _, trace = refine(bundle, s.M, s.F, RefineConfig(max_iters=80, learning_rate=3e-3))
        assert min(trace.losses) <= trace.losses[0] + 1e-12


def test_non_finite_input_returns_best_so_far_with_diagnostic(trained_stn_u):
    bundle, _ = trained_stn_u
    s = generate_plain_pair(506, image_size=32)
    s.M.data[3, 3] = float("nan")  # poison after construction
    params, trace = refine(bundle, s.M, s.F, RefineConfig(max_iters=10, learning_rate=1e-3))
    assert not trace.converged
    assert trace.diagnostic is not None and "non-finite" in trace.diagnostic
    assert torch.isfinite(params.vector()).all()


def test_external_zero_learning_rate_returns_initial(trained_stn_u):
    bundle, _ = trained_stn_u
    s = generate_plain_pair(507, image_size=32)
    one_pass, _, _ = predict(bundle, s.M, s.F)
    params = refine_external(
        bundle, s.M, s.F, ExternalRefineConfig(iters=5, learning_rate=0.0, restarts=1)
    )
    assert torch.allclose(params.vector(), one_pass.vector(), atol=1e-5)


def test_external_batched_matches_sequential():
    # the batched core must give the same result as one-pair-at-a-time calls
    samples = [generate_plain_pair(600 + i, image_size=32) for i in range(3)]
    s_m = torch.stack([s.S_M.data.float() for s in samples])[:, None]
    s_f = torch.stack([s.S_F.data.float() for s in samples])[:, None]
    cfg = ExternalRefineConfig(iters=40, restarts=2, seed=5)
    kwargs = dict(transform_model="affine", affine_bounds=AffineBounds())
    batched, batched_loss = optimize_params_batch(s_m, s_f, cfg=cfg, **kwargs)
    for i in range(3):
        single, single_loss = optimize_params_batch(s_m[i][None], s_f[i][None], cfg=cfg, **kwargs)
        assert torch.allclose(single[0], batched[i], atol=1e-6)
        assert float(single_loss[0]) == pytest.approx(float(batched_loss[i]), rel=1e-5)


def test_refine_loss_equals_intensity_mse_for_identity_itn(trained_stn_u):
    # with an identity representation network the refinement loss is exactly
    # the unsupervised intensity loss
    bundle, _ = trained_stn_u
    s = generate_plain_pair(508, image_size=32)
    from sgreg.losses import loss_refine, loss_stn_u
    from sgreg.training import prediction_field
    from sgreg.transform import resample

    params, _, _ = predict(bundle, s.M, s.F)
    field = prediction_field(bundle, s.M, s.F, params)
    warped = resample(s.M, field).data
    assert float(loss_refine(warped, s.F.data)) == float(loss_stn_u(warped, s.F.data))


def test_refine_config_validation():
    with pytest.raises(ValueError, match="max_iters"):
        RefineConfig(max_iters=0)
    with pytest.raises(ValueError, match="convergence_tol"):
        RefineConfig(convergence_tol=-1)
