import math

import numpy as np
import pytest

from r2a import corpus
from r2a.model import (
    AffineCritic,
    CheckpointError,
    Critic,
    LossWeights,
    ModelDims,
    R2AConfig,
    R2AModel,
    attention_generate,
    attention_loss,
    consistency_loss,
    critic_update,
    gradient_penalty,
    invariant_transform,
    lm_loss,
    load_model,
    multitask_step,
    r2a_infer,
    r2a_train,
    save_model,
    summarize,
    task_loss,
)
from r2a.numerics import Adam, Tensor, finite_difference_check, no_grad, parameter
from r2a.trainer import AttentionClassifier

DIMS = dict(embedding_dim=8, hidden=4, r2a_hidden=3, attention=3, predictor_hidden=5,
            critic_hidden=6, bins=5, dropout=0.1)


def dims(**kw):
    return ModelDims(**{**DIMS, **kw})


def toy_examples(n=12, seed=0, vocab=20, labeled=True):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        L = int(r.integers(3, 8))
        toks = tuple(int(t) for t in r.integers(2, vocab, size=L))
        rat = [0] * L
        rat[int(r.integers(0, L))] = 1
        out.append(corpus.Example(toks, int(r.integers(0, 2)) if labeled else None,
                                  tuple(rat) if labeled else None))
    return out


def toy_model(tasks=None, seed=0, **kw):
    emb = corpus.random_embeddings(20, DIMS["embedding_dim"], seed)
    return R2AModel(emb, tasks or {"a": 2, "b": 2}, dims(**kw), seed=seed)


def freq_for(examples, vocab=20):
    return corpus.rationale_frequency(examples, vocab)


# -- multitask step ---------------------------------------------------------

def test_untrained_two_class_loss_is_log_two():
    model = toy_model()
    exs = toy_examples()
    loss, alphas, _ = multitask_step(model, [("a", corpus.make_batch(exs)),
                                             ("b", corpus.make_batch(exs))])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
    assert set(alphas) == {"a", "b"}


def test_perfect_regression_has_zero_loss():
    y = np.array([0.5, -1.0, 2.0])
    assert task_loss(Tensor(y[:, None]), y, 1).item() == 0.0


def test_confident_correct_classifier_loss_vanishes():
    logits = Tensor(np.array([[40.0, -40.0], [-40.0, 40.0]]))
    assert task_loss(logits, np.array([0, 1]), 2).item() < 1e-30


def test_unknown_task_is_rejected():
    with pytest.raises(KeyError):
        multitask_step(toy_model(), [("zzz", corpus.make_batch(toy_examples(3)))])


# -- language-model loss -------------------------------------------------------

def test_untrained_lm_loss_is_log_bins():
    model = toy_model(bins=100)
    exs = toy_examples()
    batch = corpus.make_batch(exs)
    bins = corpus.assign_bins(20, 20, 0) % 100
    loss = lm_loss(model, model.encode(batch), batch, bins)
    assert loss.item() == pytest.approx(math.log(100), abs=1e-12)


def test_single_bin_lm_loss_is_zero():
    model = toy_model(bins=1)
    model.lm_fwd.W.data[...] = np.random.default_rng(1).normal(size=model.lm_fwd.W.shape)
    batch = corpus.make_batch(toy_examples())
    loss = lm_loss(model, model.encode(batch), batch, np.zeros(20, dtype=int))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_lm_loss_decreases_on_two_token_corpus():
    model = toy_model(bins=2, dropout=0.0)
    exs = [corpus.Example((2, 3) * 4)] * 4
    batch = corpus.make_batch(exs)
    bins = np.arange(20) % 2
    opt = Adam(model.main_parameters(), lr=1e-2)
    losses = []
    for _ in range(50):
        loss = lm_loss(model, model.encode(batch), batch, bins)
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_forward_lm_inputs_ignore_the_predicted_token():
    # position i is predicted from fwd_{i-1}: changing the last token leaves
    # every forward state used for prediction untouched
    model = toy_model(dropout=0.0)
    model.eval()
    a = model.encode(corpus.make_batch([corpus.Example((2, 3, 4))]))
    b = model.encode(corpus.make_batch([corpus.Example((2, 3, 9))]))
    assert np.array_equal(a.fwd.data[:, :2], b.fwd.data[:, :2])
    assert not np.array_equal(a.bwd_rev.data[:, :1], b.bwd_rev.data[:, :1])


# -- invariant transform ------------------------------------------------------

def test_invariant_transform_starts_as_identity():
    model = toy_model()
    h = Tensor(np.random.default_rng(3).normal(size=(2, 5, 8)))
    assert np.array_equal(invariant_transform(model, h).data, h.data)


def test_invariant_transform_is_positionwise():
    model = toy_model()
    rng = np.random.default_rng(4)
    model.inv.W.data[...] = rng.normal(size=model.inv.W.shape)
    model.inv.b.data[...] = rng.normal(size=model.inv.b.shape)
    h = rng.normal(size=(1, 5, 8))
    perm = rng.permutation(5)
    out = invariant_transform(model, Tensor(h)).data
    out_perm = invariant_transform(model, Tensor(h[:, perm])).data
    assert np.allclose(out_perm, out[:, perm], atol=1e-14)


def test_invariant_transform_gradient():
    model = toy_model()
    rng = np.random.default_rng(5)
    h = Tensor(rng.normal(size=(2, 3, 8)))
    w = rng.normal(size=(2, 3, 8))
    err = finite_difference_check(lambda: (invariant_transform(model, h) * w).sum(),
                                  model.inv.parameters())
    assert err < 1e-6


def test_summary_is_first_and_last_real_state():
    h = np.arange(2 * 4 * 3, dtype=float).reshape(2, 4, 3)
    s = summarize(Tensor(h), [4, 2]).data
    assert np.array_equal(s[0], np.concatenate([h[0, 0], h[0, 3]]))
    assert np.array_equal(s[1], np.concatenate([h[1, 0], h[1, 1]]))


# -- critic ------------------------------------------------------------------

def test_identical_batches_give_zero_estimate():
    rng = np.random.default_rng(6)
    critic = Critic(3, 8, rng)
    x = rng.normal(size=(16, 3))
    est = critic_update(critic, x, x, Adam(critic.parameters()), rng)
    assert est == pytest.approx(0.0, abs=1e-12)


def test_critic_recovers_point_mass_distance():
    rng = np.random.default_rng(7)
    critic = Critic(1, 100, rng)
    opt = Adam(critic.parameters(), lr=1e-3)
    src, tgt = np.zeros((32, 1)), np.ones((32, 1))
    for _ in range(300):
        est = critic_update(critic, src, tgt, opt, rng, penalty=10.0, iters=5)
    assert abs(abs(est) - 1.0) <= 0.2


def test_unit_slope_affine_critic_has_zero_penalty():
    for w in ([1.0], [0.6, 0.8], [0.0, -1.0, 0.0]):
        critic = AffineCritic(w, b=0.3)
        pts = np.random.default_rng(8).normal(size=(10, len(w)))
        assert gradient_penalty(critic, pts).item() == 0.0


def test_affine_critic_gives_exact_mean_gap():
    critic = AffineCritic([1.0])
    rng = np.random.default_rng(9)
    # with no ascent iterations the unit-slope witness is evaluated as is
    est = critic_update(critic, np.zeros((4, 1)), np.ones((4, 1)),
                        Adam(critic.parameters()), rng, iters=0)
    assert est == -1.0


def test_critic_rejects_empty_batch():
    rng = np.random.default_rng(10)
    critic = Critic(2, 4, rng)
    with pytest.raises(ValueError):
        critic_update(critic, np.zeros((0, 2)), np.ones((3, 2)), Adam(critic.parameters()), rng)


def test_critic_gradients():
    rng = np.random.default_rng(11)
    critic = Critic(3, 4, rng)
    x = Tensor(rng.normal(size=(5, 3)))
    pts = rng.normal(size=(5, 3))

    def f():
        return critic(x).mean() - 10.0 * gradient_penalty(critic, pts)

    assert finite_difference_check(f, critic.parameters()) < 1e-4


# -- attention generation -------------------------------------------------------

def r2a_batch(exs, vocab=20):
    return corpus.make_batch(exs, freq=freq_for(exs, vocab))


def test_zeroed_generator_gives_uniform_attention():
    model = toy_model()
    for p in [*model.enc_r2a.parameters(), model.att_r2a.W, model.att_r2a.b]:
        p.data[...] = 0.0
    exs = toy_examples(4)
    batch = r2a_batch(exs)
    with no_grad():
        h = invariant_transform(model, model.encode(batch).h)
        alpha = attention_generate(model, h, batch).data
    for row, n in zip(alpha, batch.lengths):
        assert np.allclose(row[:n], 1.0 / n, atol=1e-15)
        assert np.array_equal(row[n:], np.zeros(len(row) - n))


def test_generated_attention_is_a_distribution():
    model = toy_model()
    exs = toy_examples(10, seed=3)
    batch = r2a_batch(exs)
    with no_grad():
        h = invariant_transform(model, model.encode(batch).h)
        alpha = attention_generate(model, h, batch).data
    assert (alpha >= 0).all()
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-12)


def test_generation_rejects_length_mismatch():
    model = toy_model()
    batch = r2a_batch(toy_examples(3))
    h = Tensor(np.zeros((3, batch.ids.shape[1] + 1, 8)))
    with pytest.raises(ValueError):
        attention_generate(model, h, batch)


# -- attention and consistency losses ---------------------------------------------

def test_attention_loss_examples():
    a = Tensor(np.array([[0.1, 0.2, 0.3, 0.4]]))
    assert attention_loss(a, a).item() == 0.0
    one_hot = np.array([[1.0, 0.0, 0.0, 0.0]])
    uniform = Tensor(np.full((1, 4), 0.25))
    assert attention_loss(one_hot, uniform).item() == pytest.approx(0.4, abs=1e-12)
    pair = attention_loss(np.vstack([one_hot[0], a.data[0]]), Tensor(np.vstack([uniform.data[0],
                                                                                a.data[0]])))
    assert pair.item() == pytest.approx(0.2, abs=1e-12)


def test_attention_loss_rejects_zero_vector():
    with pytest.raises(ValueError):
        attention_loss(np.zeros((1, 3)), Tensor(np.full((1, 3), 1 / 3)))


def test_attention_loss_target_receives_no_gradient():
    target = parameter(np.array([[0.7, 0.2, 0.1]]))
    pred = parameter(np.array([[0.2, 0.5, 0.3]]))
    attention_loss(target, pred).backward()
    assert np.array_equal(target.grad, np.zeros((1, 3)))
    assert np.abs(pred.grad).sum() > 0


def test_consistency_loss_examples():
    r = np.array([[1.0, 0.0, 1.0, 0.0]])
    assert consistency_loss(Tensor(r * 0.5), r).item() == pytest.approx(0.0, abs=1e-15)
    assert consistency_loss(Tensor(np.array([[0.0, 0.6, 0.0, 0.4]])), r).item() == \
        pytest.approx(0.9, abs=1e-15)
    assert consistency_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[1.0, 0.0]])).item() == \
        pytest.approx(0.19289, abs=1e-5)
    with pytest.raises(ValueError):
        consistency_loss(Tensor(np.array([[0.5, 0.5]])), np.zeros((1, 2)))


def test_task_attention_heads_get_no_gradient_from_attention_loss():
    model = toy_model()
    # a peaked task attention keeps the distance off the flat part of the hinge
    model.att["a"].q.data *= 200.0
    exs = toy_examples(6)
    batch = r2a_batch(exs)
    out = model.encode(batch)
    _, alpha = model.classify("a", out.h, batch.mask)
    gen = attention_generate(model, invariant_transform(model, out.h), batch)
    for p in model.parameters():
        p.zero_grad()
    attention_loss(alpha, gen).backward()
    for p in [*model.att["a"].parameters(), *model.pred["a"].parameters()]:
        assert np.array_equal(p.grad, np.zeros_like(p.data))
    assert any(np.abs(p.grad).sum() > 0 for p in model.att_r2a.parameters())


# -- training ------------------------------------------------------------------

def small_suite(seed=0):
    spec = corpus.SyntheticSpec(seed=seed, source_train=48, source_dev=8, source_test=8,
                                target_train=16, target_dev=8, target_test=8,
                                target_unlabeled=48, target_large=8)
    return corpus.make_synthetic_suite(spec)


def small_embeddings(suite, dim=8):
    return corpus.synthetic_embeddings(suite.vocab, dim, suite.spec.seed, suite.spec)


def small_config(**kw):
    base = dict(epochs=3, batch_size=16, dims=dims(bins=10))
    return R2AConfig(**{**base, **kw})


def test_single_task_multitask_step_matches_standalone_classifier():
    suite = small_suite()
    emb = small_embeddings(suite)
    task = suite.sources["aspect0"]
    d = dims()
    model = R2AModel(emb, {"aspect0": 2}, d, seed=5)
    clf = AttentionClassifier(emb, 2, dims(), seed=5)
    opt_m, opt_c = Adam(model.main_parameters()), Adam(clf.parameters())
    for step in range(5):
        batch = corpus.make_batch(task["train"][step * 8:(step + 1) * 8])
        lm, _, _ = multitask_step(model, [("aspect0", batch)])
        logits, _ = clf.forward(batch)
        lc = task_loss(logits, batch.labels, 2)
        assert lm.item() == lc.item()
        for opt, loss in ((opt_m, lm), (opt_c, lc)):
            opt.zero_grad()
            loss.backward()
            opt.step()


def test_plain_multitask_training_reduces_label_loss():
    suite = small_suite()
    w = LossWeights(att=0.0, lm=0.0, wd=0.0)
    _, trace = r2a_train(suite.sources, suite.target["unlabeled"], small_embeddings(suite), w,
                         small_config(epochs=6, lr=1e-2))
    assert trace[-1]["lbl"] < trace[0]["lbl"]
    assert all(set(row) == {"epoch", "lbl", "total"} for row in trace)


def test_aspect_transfer_trace_has_no_wasserstein_term():
    suite = small_suite()
    _, trace = r2a_train(suite.sources, suite.target["unlabeled"], small_embeddings(suite),
                         LossWeights(wd=0.0), small_config(mode="aspect-transfer", epochs=2))
    assert all("wd" not in row and "cons" in row for row in trace)


def test_full_objective_is_finite_and_decreasing():
    suite = small_suite()
    _, trace = r2a_train(suite.sources, suite.target["unlabeled"], small_embeddings(suite),
                         LossWeights(), small_config(epochs=10, lr=5e-3))
    for row in trace:
        for key in ("lbl", "att", "lm", "wd", "total"):
            assert np.isfinite(row[key])
        for key in ("lbl", "att", "lm"):
            assert row[key] >= 0
        assert row["att"] <= 1.9
    assert trace[-1]["total"] < trace[0]["total"]


def test_training_requires_a_source_task():
    suite = small_suite()
    with pytest.raises(ValueError):
        r2a_train({}, suite.target["unlabeled"], small_embeddings(suite))


@pytest.fixture(scope="module")
def trained():
    suite = small_suite(seed=1)
    emb = small_embeddings(suite)
    model, _ = r2a_train(suite.sources, suite.target["unlabeled"], emb, LossWeights(),
                         small_config(epochs=3, lr=5e-3))
    return suite, model


def test_inference_is_deterministic_and_batch_invariant(trained):
    suite, model = trained
    train = suite.target["train"]
    freq = freq_for(train, len(suite.vocab))
    full = r2a_infer(model, train, freq)
    again = r2a_infer(model, train, freq)
    single = [r2a_infer(model, [ex], freq)[0] for ex in train[:5]]
    for a, b in zip(full, again):
        assert np.array_equal(a, b)
    for a, b, ex in zip(full, single, train):
        assert len(a) == len(ex)
        assert np.allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1) < 1e-12 and (a >= 0).all()


def test_inference_reacts_to_rationale_bits(trained):
    suite, model = trained
    ex = suite.target["train"][0]
    freq = freq_for(suite.target["train"], len(suite.vocab))
    flipped = corpus.Example(ex.tokens, ex.label, tuple(1 - r for r in ex.rationale))
    a = r2a_infer(model, [ex], freq)[0]
    b = r2a_infer(model, [flipped], freq)[0]
    assert not np.allclose(a, b)


def test_inference_requires_rationale(trained):
    suite, model = trained
    ex = suite.target["unlabeled"][0]
    with pytest.raises(ValueError):
        r2a_infer(model, [ex], freq_for(suite.target["train"], len(suite.vocab)))


def test_checkpoint_round_trip_and_vocab_check(trained, tmp_path):
    suite, model = trained
    path = tmp_path / "m.ckpt"
    cfg = small_config()
    save_model(path, model, suite.vocab.digest(), 0, LossWeights(), cfg)
    loaded, meta = load_model(path, suite.vocab.digest())
    assert meta["loss_weights"] == LossWeights().__dict__
    for (n, p), (m, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n == m and np.array_equal(p.data, q.data)
    with pytest.raises(CheckpointError):
        load_model(path, "0" * 64)
    save_model(tmp_path / "again.ckpt", loaded, suite.vocab.digest(), 0, LossWeights(), cfg)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_non_checkpoint_file_is_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_model(p)
