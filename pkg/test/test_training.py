import numpy as np
import pytest
from debiaser.data import GenConfig, synth_generate
from debiaser.hsic import median_bandwidth
from debiaser.metrics import evaluate, predict
from debiaser.networks import classifier_graph, init_classifier, init_unet, unet_graph
from debiaser.tensor import Tensor, gradient_check, select_column, sigmoid
from debiaser.training import (
    Hyperparams,
    OptimState,
    TrainLog,
    composite_loss,
    pretrain_classifier,
    sgd_step,
    step_lr,
    train_debiaser,
)

PRETRAIN = Hyperparams(learning_rate=0.02, epochs=10, batch_size=32)


@pytest.fixture(scope="module")
def clean_data():
    return synth_generate(GenConfig(n_train=600, n_test=200, noise_sigma=0.0, seed=1))


@pytest.fixture(scope="module")
def classifier(clean_data):
    return pretrain_classifier(clean_data[0], PRETRAIN)


@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (6, 1e-3), (7, 1e-4), (13, 1e-4), (14, 1e-5)])
def test_step_lr(epoch, lr):
    assert step_lr(epoch, 1e-3, 7, 0.1) == pytest.approx(lr)


def test_step_lr_negative_epoch():
    with pytest.raises(ValueError):
        step_lr(-1, 1e-3, 7, 0.1)


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams(lam=-0.1)
    with pytest.raises(ValueError):
        Hyperparams(learning_rate=0.0)


def unet_with(value):
    params = init_unet(0)
    return params.with_tensors({name: np.full_like(v, value) for name, v in params.tensors.items()})


def test_sgd_zero_gradient_is_fixed_point():
    params = init_unet(0)
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    updated, _ = sgd_step(params, grads, OptimState.zeros_like(params), 0.1, 0.9)
    assert updated.to_bytes() == params.to_bytes()


def test_sgd_without_momentum():
    params = unet_with(1.0)
    grads = {name: np.full_like(v, 0.5) for name, v in params.tensors.items()}
    updated, _ = sgd_step(params, grads, OptimState.zeros_like(params), 0.1, 0.0)
    for name in updated:
        np.testing.assert_allclose(updated[name], 1.0 - 0.1 * 0.5, rtol=1e-6)


def test_sgd_momentum_unrolled():
    params = unet_with(0.0)
    grads = {name: np.full_like(v, 0.25) for name, v in params.tensors.items()}
    state = OptimState.zeros_like(params)
    updated, state = sgd_step(params, grads, state, 1.0, 0.9)
    updated, state = sgd_step(updated, grads, state, 1.0, 0.9)
    for name in updated:
        np.testing.assert_allclose(updated[name], -2.9 * 0.25, rtol=1e-6)


def test_sgd_refuses_frozen_params():
    params = init_classifier(0).freeze()
    grads = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    with pytest.raises(ValueError):
        sgd_step(params, grads, OptimState.zeros_like(params), 0.1, 0.9)


def test_composite_loss_vanishes():
    x = Tensor(np.random.default_rng(0).random((4, 1, 16, 16)))
    h = Tensor(np.full(4, 0.3))
    total, mse_part, hsic_part = composite_loss(x, x, h, Tensor([0.1, 0.9, 0.4, 0.6]), 0.07)
    assert total.item() == 0.0
    assert mse_part.item() == 0.0
    assert hsic_part.item() == 0.0


def test_composite_loss_lambda_zero():
    r = np.random.default_rng(1)
    x, recon = Tensor(r.random((4, 1, 16, 16))), Tensor(r.random((4, 1, 16, 16)))
    total, mse_part, _ = composite_loss(x, recon, Tensor(r.random(4)), Tensor(r.random(4)), 0.0)
    assert total.item() == mse_part.item()


def test_composite_loss_needs_two_samples():
    x = Tensor(np.zeros((1, 1, 16, 16)))
    with pytest.raises(ValueError):
        composite_loss(x, x, Tensor([0.5]), Tensor([0.5]), 0.07)


@pytest.mark.parametrize("seed", range(10))
def test_composite_loss_unet_gradients(seed):
    unet = init_unet(seed).astype(np.float64)
    weights = {k: Tensor(v) for k, v in init_classifier(seed).astype(np.float64).tensors.items()}
    x = Tensor(np.random.default_rng(seed).random((4, 1, 16, 16)))

    def heads(p):
        recon = unet_graph(p, x)
        logits = classifier_graph(weights, recon)
        return recon, sigmoid(select_column(logits, 0)), sigmoid(select_column(logits, 1))

    _, h1, h2 = heads({k: Tensor(v) for k, v in unet.tensors.items()})
    # bandwidths fixed at the unperturbed values
    sigmas = median_bandwidth(h1.data), median_bandwidth(h2.data)

    def loss(p):
        recon, h1, h2 = heads(p)
        return composite_loss(x, recon, h1, h2, 0.07, *sigmas)[0]

    errors = gradient_check(loss, unet.tensors, epsilon=1e-6, coordinates=8, seed=seed)
    assert max(errors.values()) <= 1e-4


def test_pretrain_rejects_constant_labels(clean_data):
    train = clean_data[0]
    constant = train.subset(np.flatnonzero(train.y == 1))
    with pytest.raises(ValueError):
        pretrain_classifier(constant, PRETRAIN)


def test_pretrain_is_deterministic(clean_data):
    hyper = Hyperparams(learning_rate=0.05, epochs=1, batch_size=64)
    first = pretrain_classifier(clean_data[0], hyper)
    second = pretrain_classifier(clean_data[0], hyper)
    assert first.to_bytes() == second.to_bytes()
    assert first.frozen


def test_pretrained_heads_are_accurate(clean_data, classifier):
    _, test = clean_data
    for head, labels in ((0, test.y), (1, test.s)):
        accuracy = np.mean((predict(classifier, test.images, head=head) >= 0.5) == labels)
        assert accuracy >= 0.95


def test_train_log_decomposition_and_frozen_classifier(clean_data, classifier):
    digest = classifier.digest()
    hyper = Hyperparams(epochs=1, batch_size=64, lam=0.07)
    unet, log = train_debiaser(clean_data[0].subset(range(256)), classifier, hyper)
    assert classifier.digest() == digest
    assert len(log.records) == 4
    for record in log.records:
        assert record.total == pytest.approx(record.mse + 0.07 * record.hsic, abs=1e-6)
        assert record.lr == pytest.approx(1e-3)
    assert log.to_csv().splitlines()[0] == "epoch,batch,mse,hsic,total,lr"


def test_train_requires_frozen_classifier(clean_data):
    with pytest.raises(ValueError):
        train_debiaser(clean_data[0], init_classifier(0), Hyperparams(epochs=1))


def test_train_is_deterministic(clean_data, classifier):
    train = clean_data[0].subset(range(128))
    hyper = Hyperparams(epochs=1, batch_size=32)
    unet_a, log_a = train_debiaser(train, classifier, hyper)
    unet_b, log_b = train_debiaser(train, classifier, hyper)
    assert unet_a.to_bytes() == unet_b.to_bytes()
    assert log_a.to_csv() == log_b.to_csv()


def test_reconstruction_only_training_reduces_mse(clean_data, classifier):
    hyper = Hyperparams(learning_rate=0.05, epochs=5, batch_size=32, lam=0.0)
    _, log = train_debiaser(clean_data[0].subset(range(320)), classifier, hyper)
    assert log.epoch_mean(4, "mse") < log.epoch_mean(0, "mse")


def test_epoch_mean_unknown_epoch():
    with pytest.raises(ValueError):
        TrainLog().epoch_mean(0)


@pytest.mark.slow
def test_lambda_reduces_dependence():
    train, _ = synth_generate(GenConfig(n_train=1000, n_test=10))
    classifier = pretrain_classifier(train, PRETRAIN)
    means = []
    for lam in (0.0, 0.07, 0.15):
        per_seed = []
        for seed in range(3):
            _, log = train_debiaser(train, classifier, Hyperparams(epochs=2, lam=lam, seed=seed))
            per_seed.append(log.epoch_mean(1, "hsic"))
        means.append(np.mean(per_seed))
    assert means[0] >= means[1] >= means[2]


@pytest.mark.slow
def test_debiasing_lowers_dp(clean_data, classifier):
    train, test = clean_data
    unet, _ = train_debiaser(train, classifier, Hyperparams(epochs=5, lam=0.07))
    original = evaluate(classifier, None, test)
    reconstructed = evaluate(classifier, unet, test)
    assert reconstructed.dp < original.dp
