import numpy as np
import pytest

from mmlip.autoencoder import (
    AdamState,
    MlpSpec,
    ModelFusion,
    ModelSpec,
    MultimodalAutoencoder,
    TrainConfig,
    adam_step,
    default_spec,
    summarize,
    train,
)
from mmlip.autoencoder import snapshot
from mmlip.errors import ShapeError, TrainingDivergenceError
from mmlip.fusion import FusionMethod
from mmlip.synthdata import SyntheticSpec, generate

from oracles import autoencoder_forward

KINDS = ("sum", "concat", "attention")


def _small_model(method, seed, dims=(3, 2), hidden=4, latent=3):
    return MultimodalAutoencoder.init(default_spec(dims, method, hidden=hidden, latent=latent), seed)


def _inputs(rng, dims, batch=None):
    shape = (lambda d: (d,)) if batch is None else (lambda d: (batch, d))
    return [rng.standard_normal(shape(d)) for d in dims]


def _identity_model(d):
    spec = ModelSpec((MlpSpec((d, d), ()),), ModelFusion(FusionMethod.SUM))
    return MultimodalAutoencoder(spec, {"enc0.W0": np.eye(d), "enc0.b0": np.zeros(d),
                                        "dec0.W0": np.eye(d), "dec0.b0": np.zeros(d)})


@pytest.mark.parametrize("method", KINDS)
def test_forward_matches_straight_line_oracle(method):
    rng = np.random.default_rng(0)
    for seed in range(5):
        model = _small_model(method, seed)
        xs = _inputs(rng, (3, 2))
        out, recons = model.forward(xs)
        u, ref = autoencoder_forward(model, xs)
        np.testing.assert_allclose(out.u, u, rtol=1e-12, atol=1e-12)
        for r, e in zip(recons, ref):
            np.testing.assert_allclose(r, e, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("method", KINDS)
def test_loss_matches_oracle(method):
    rng = np.random.default_rng(1)
    model = _small_model(method, 3)
    xs = _inputs(rng, (3, 2), batch=6)
    per_sample = []
    for b in range(6):
        _, recons = autoencoder_forward(model, [x[b] for x in xs])
        per_sample.append(sum(np.sum((x[b] - r) ** 2) for x, r in zip(xs, recons)))
    expected = np.mean(per_sample)
    if method == "attention":
        expected += model.spec.fusion.lambda_reg * sum(np.sum(w * w) for c in model.attention_chains() for w in c)
    assert model.loss(xs) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_identity_model_reconstructs_input():
    model = _identity_model(4)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    _, recons = model.forward([x])
    np.testing.assert_array_equal(recons[0], x)
    assert model.loss([x]) == 0.0
    _, grads = model.backward([x])
    assert all(np.all(g == 0) for g in grads.values())


def test_zero_decoders():
    model = _small_model("sum", 0, dims=(2, 2))
    params = {k: (np.zeros_like(v) if k.startswith("dec") else v) for k, v in model.params.items()}
    model = model.with_params(params)
    xs = [np.array([0.6, 0.8]), np.array([1.0, 0.0])]
    _, recons = model.forward(xs)
    assert all(np.all(r == 0) for r in recons)
    assert model.loss(xs) == pytest.approx(2.0, abs=1e-15)


def test_shape_errors():
    model = _small_model("sum", 0)
    with pytest.raises(ShapeError):
        model.forward([np.zeros(3)])
    with pytest.raises(ShapeError):
        model.forward([np.zeros(3), np.zeros(5)])


def _flat_fd(model, xs, name, step=1e-6):
    p = model.params[name]
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        hi, lo = dict(model.params), dict(model.params)
        hi[name] = p.copy()
        lo[name] = p.copy()
        hi[name][idx] += step
        lo[name][idx] -= step
        g[idx] = (model.with_params(hi).loss(xs) - model.with_params(lo).loss(xs)) / (2 * step)
    return g


@pytest.mark.parametrize("method", KINDS)
def test_gradients_match_finite_differences(method):
    rng = np.random.default_rng(2)
    for seed in range(50):
        model = _small_model(method, seed)
        xs = _inputs(rng, (3, 2), batch=3)
        _, grads = model.backward(xs)
        for name in model.param_names():
            fd = _flat_fd(model, xs, name)
            err = np.linalg.norm(grads[name] - fd)
            assert err <= 1e-5 * np.linalg.norm(fd) + 1e-8, (seed, name, err)


def test_decoder_gradient_locality():
    rng = np.random.default_rng(3)
    model = _small_model("sum", 4)
    params = dict(model.params)
    # modality 1 contributes nothing to u, so its target can be set to D_1(u) exactly
    for k in ("enc1.W0", "enc1.b0", "enc1.W1", "enc1.b1"):
        params[k] = np.zeros_like(params[k])
    model = model.with_params(params)
    xs = _inputs(rng, (3, 2), batch=5)
    _, recons = model.forward(xs)
    xs[1] = recons[1]
    _, grads = model.backward(xs)
    for k, g in grads.items():
        if k.startswith("dec1."):
            assert np.all(g == 0), k
    assert any(np.any(g != 0) for k, g in grads.items() if k.startswith("dec0."))


@pytest.mark.parametrize("method", KINDS)
def test_encoder_gradient_globality(method):
    rng = np.random.default_rng(5)
    model = _small_model(method, 6, dims=(3, 3))
    params = dict(model.params)
    # decoder 0 outputs its last bias regardless of u; using that as x_0 zeroes residual 0
    for k in ("dec0.W0", "dec0.W1"):
        params[k] = np.zeros_like(params[k])
    model = model.with_params(params)
    xs = [np.tile(params["dec0.b1"], (4, 1)), rng.standard_normal((4, 3))]
    assert model.modality_losses(xs)[0] == 0.0
    _, grads = model.backward(xs)
    assert any(np.any(grads[k] != 0) for k in grads if k.startswith("enc0."))


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(params, {"w": np.zeros(2)}, AdamState.zeros(params), 0.1)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_first_step_magnitude_is_lr():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([3.0, -0.01, 100.0])}
    new, _ = adam_step(params, grads, AdamState.zeros(params), 1e-3)
    step = new["w"] - params["w"]
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-5)
    assert np.all(np.sign(step) == -np.sign(grads["w"]))


def test_adam_quadratic_bowl():
    scale = np.array([1.0, 4.0, 0.25])
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState.zeros(params)
    losses = []
    for _ in range(100):
        w = params["w"]
        losses.append(float(np.sum(scale * w * w)))
        params, state = adam_step(params, {"w": 2 * scale * w}, state, 0.01)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(TrainingDivergenceError):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState.zeros(params), 0.1)


@pytest.fixture(scope="module")
def dataset():
    return generate(SyntheticSpec())


def test_zero_epochs_returns_initialization(dataset):
    spec = default_spec(dataset.dims, "sum")
    log = train(spec, None, dataset, TrainConfig(epochs=0, seed=3))
    assert log.records == []
    init = MultimodalAutoencoder.init(log.model.spec, int(np.random.SeedSequence(
        TrainConfig(seed=3).trial_seed(0)).generate_state(3)[0]))
    for k in init.params:
        np.testing.assert_array_equal(log.model.params[k], init.params[k])


@pytest.mark.parametrize("method", KINDS)
def test_training_is_deterministic(dataset, method):
    cfg = TrainConfig(epochs=3, seed=11, lipschitz_every=2, lipschitz_pairs=64)
    spec = default_spec(dataset.dims, method)
    a = train(spec, None, dataset, cfg)
    b = train(spec, None, dataset, cfg)
    assert a.to_jsonl() == b.to_jsonl()
    assert snapshot.to_bytes(a.model) == snapshot.to_bytes(b.model)
    assert [r.epoch for r in a.records] == [1, 2, 3]
    assert [r.lipschitz is not None for r in a.records] == [True, True, True]


def test_sum_training_reduces_loss_tenfold(dataset):
    log = train(default_spec(dataset.dims, "sum"), None, dataset, TrainConfig(epochs=200, seed=0))
    assert not log.diverged
    assert log.records[-1].combined_loss * 10 <= log.initial_loss


def test_summary_statistics(dataset):
    cfg = TrainConfig(epochs=2, seed=1, lipschitz_pairs=32)
    logs = [train(default_spec(dataset.dims, "sum"), None, dataset, cfg, trial=t) for t in range(3)]
    rows = summarize(logs)
    assert len(rows) == 2
    vals = [lg.records[0].combined_loss for lg in logs]
    r = rows[0]
    assert r["combined_loss_mean"] == pytest.approx(np.mean(vals))
    assert r["combined_loss_std"] == pytest.approx(np.std(vals))
    assert r["combined_loss_min"] == min(vals) and r["combined_loss_max"] == max(vals)


def test_snapshot_round_trip(tmp_path):
    model = _small_model("attention", 9)
    path = snapshot.save(model, tmp_path / "m.snap", {"note": "x"})
    loaded, meta = snapshot.load(path)
    assert meta["note"] == "x"
    assert loaded.spec == model.spec
    for k in model.params:
        np.testing.assert_array_equal(loaded.params[k], model.params[k])
    assert snapshot.to_bytes(loaded, meta) == path.read_bytes()


def test_snapshot_rejects_garbage():
    with pytest.raises(Exception):
        snapshot.from_bytes(b"not a snapshot")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "the regularized attention model starts with a tiny fused latent (unit-norm inputs, "
    "normalized chains, 1/sqrt(d)) and its decoders grow to amplify it, so the data-pair "
    "gradient-Lipschitz estimate climbs by orders of magnitude over training"))
def test_attention_lipschitz_trajectory_bounded(dataset):
    log = train(default_spec(dataset.dims, "attention"), None, dataset, TrainConfig(epochs=200, seed=0))
    traj = [r.model_lipschitz for r in log.records if r.model_lipschitz is not None]
    assert max(traj) <= 10 * traj[0]
