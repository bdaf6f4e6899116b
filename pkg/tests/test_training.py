import math

import numpy as np
import pytest

from tnlcfrs.grammar import GrammarDims, NumericError, materialize
from tnlcfrs.neural import forward, load_params, xavier_init, zero_params
from tnlcfrs.oracle import inside_explicit
from tnlcfrs.training import (AdamState, ConfigError, TrainConfig, adam_step,
                              clip_by_global_norm, format_config, grad_check, loss,
                              loss_and_grad, make_batches, nll, parse_overrides, perplexity,
                              read_config, read_log, train)

TINY = GrammarDims(2, 2, 3, 5)
RANKS = (2, 2, 2, 2)


def concentrated_params(K=25.0):
    """Parameters whose factors put all but ~exp(-K) mass on S -> A, A -> T T."""
    dims = GrammarDims(1, 1, 1, 1)
    p = zero_params(dims, (1, 1, 1, 1), 2)
    a = dict(p.arrays)
    for name in ("fV13", "fW13"):
        a[f"{name}.W1"] = np.eye(2)
        a[f"{name}.W2"] = np.eye(2)
    a["E1"] = np.array([[0.0, 0.0], [K, 0.0]])     # row 0: A, row 1: T
    a["R1e"] = np.array([[1.0, 0.0]])
    a["R2e"] = np.array([[-1.0, 0.0]])
    a["fU12.b2"] = np.array([K, 0.0])
    return p.replace(a)


def sample_corpus(n, seed, max_len=8):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(0, TINY.v, int(rng.integers(2, max_len + 1)))) for _ in range(n)]


def tiny_config(**kw):
    base = dict(d=8, r1=2, r2=2, r3=2, r4=2, preterminals=3, nt1=2, nt2=2,
                precision="f64", curriculum_start_len=6, curriculum_step=1,
                curriculum_max_len=8, batch_size=8, max_epochs=4, patience=2)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# configuration


def test_protocol_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2) == (0.002, 0.75, 0.999)
    assert (cfg.batch_size, cfg.grad_clip_norm) == (20, 3.0)
    assert (cfg.curriculum_start_len, cfg.curriculum_step) == (30, 5)
    assert (cfg.max_epochs, cfg.patience) == (20, 5)
    assert (cfg.d, cfg.ranks) == (512, (400, 4, 400, 4))
    assert cfg.symbol_counts() == (15, 15, 45)


def test_curriculum_schedule():
    cfg = TrainConfig(curriculum_max_len=40)
    assert [cfg.curriculum_len(e) for e in range(1, 6)] == [30, 35, 40, 40, 40]
    assert TrainConfig(curriculum_max_len=60).curriculum_len(7) == 60


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(patience=30),
                                dict(adam_beta1=1.0), dict(precision="f16"),
                                dict(batch_size=0), dict(early_stop="loss")])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nlearning_rate = 0.01\nbatch_size=4  # inline\n"
                    "bucket_by_length=false\nprecision=f64\n")
    kw = read_config(path)
    assert kw == {"learning_rate": 0.01, "batch_size": 4, "bucket_by_length": False,
                  "precision": "f64"}
    kw.update(parse_overrides({"batch_size": "9"}))
    cfg = TrainConfig(**kw)
    assert cfg.batch_size == 9 and cfg.learning_rate == 0.01
    assert "batch_size=9\n" in format_config(cfg)
    with pytest.raises(ConfigError):
        parse_overrides({"nonsense": "1"})
    with pytest.raises(ConfigError):
        parse_overrides({"batch_size": "two"})
    path.write_text("a=1\na=2\n")
    with pytest.raises(ConfigError):
        read_config(path)


def test_format_round_trips_through_file(tmp_path):
    cfg = tiny_config(seed=13)
    path = tmp_path / "c.txt"
    path.write_text(format_config(cfg))
    assert TrainConfig(**read_config(path)) == cfg


# ---------------------------------------------------------------------------
# loss and gradients


def test_concentrated_loss_is_zero():
    params = concentrated_params()
    value, _ = loss(params, [[0, 0]])
    assert abs(value) <= 1e-9
    assert abs(perplexity(params, [[0, 0]]) - 1.0) <= 1e-9


def test_repeated_sentence_batch():
    params = xavier_init(TINY, RANKS, 8, seed=0, dtype=np.float64)
    single, _ = loss(params, [[1, 2, 3, 0]])
    double, _ = loss(params, [[1, 2, 3, 0]] * 2)
    quad, _ = loss(params, [[1, 2, 3, 0]] * 4)
    assert single == double == quad


def test_loss_matches_explicit_oracle_single_precision():
    params = xavier_init(TINY, RANKS, 8, seed=3)
    batch = [[0, 1, 2], [4, 3, 2, 1, 0], [1, 1, 1, 1, 1, 1]]
    value, _ = loss(params, batch)
    g = materialize(forward(params.astype(np.float64)))
    want = -np.mean([inside_explicit(g, s)[0] for s in batch])
    assert abs(value - want) <= 1e-5 * abs(want)


def test_loss_refuses_short_sentences():
    params = xavier_init(TINY, RANKS, 8, seed=3, dtype=np.float64)
    with pytest.raises(ValueError):
        loss(params, [[1]])
    with pytest.raises(ValueError):
        loss(params, [])


def test_gradient_check_tiny_model():
    params = xavier_init(TINY, RANKS, 16, seed=1, dtype=np.float64)
    err = grad_check(params, [0, 3, 1, 4, 2, 2], epsilon=1e-5, probes=200)
    assert err <= 1e-4


def test_gradient_check_is_deterministic():
    params = xavier_init(TINY, RANKS, 8, seed=2, dtype=np.float64)
    a = grad_check(params, [1, 2, 0, 4], probes=30, seed=5, details=True)
    b = grad_check(params, [1, 2, 0, 4], probes=30, seed=5, details=True)
    assert a == b


def test_gradient_check_needs_double_precision():
    with pytest.raises(ValueError):
        grad_check(xavier_init(TINY, RANKS, 8, seed=2), [0, 1])


def test_emission_bias_gradient_at_zero_parameters():
    # uniform emissions: d loss / d bias[w] = len/v - count(w), absent words get len/v
    params = zero_params(TINY, RANKS, 4)
    sent = [0, 0, 3, 1]
    _, grads = loss_and_grad(params, [sent])
    counts = np.bincount(sent, minlength=TINY.v)
    np.testing.assert_allclose(grads["fQ.bo"], len(sent) / TINY.v - counts, atol=1e-12)
    assert not grads["fQ.Wo"].any()


# ---------------------------------------------------------------------------
# optimizer


def scalar_grads(params, name, value):
    grads = {k: np.zeros_like(a) for k, a in params.arrays.items()}
    grads[name].flat[0] = value
    return grads


def test_adam_one_step_closed_form():
    cfg = TrainConfig()
    params = zero_params(TINY, RANKS, 4)
    state, new = adam_step(AdamState.zeros(params), params, scalar_grads(params, "root", 1.0), cfg)
    # m_hat = g and v_hat = g^2 after bias correction, so the step is -lr * g / (|g| + eps)
    assert new.arrays["root"][0] == -cfg.learning_rate / (1.0 + cfg.adam_eps)
    assert state.t == 1
    assert state.m["root"][0] == pytest.approx(0.25, abs=1e-15)
    assert state.v["root"][0] == pytest.approx(0.001, abs=1e-15)
    for k, a in new.arrays.items():
        if k != "root":
            assert not a.any()
    assert not new.arrays["root"][1:].any()


def test_adam_zero_gradients():
    cfg = TrainConfig()
    params = xavier_init(TINY, RANKS, 4, seed=0, dtype=np.float64)
    zero = {k: np.zeros_like(a) for k, a in params.arrays.items()}
    state, new = adam_step(AdamState.zeros(params), params, zero, cfg)
    for k, a in params.arrays.items():
        assert np.array_equal(new.arrays[k], a)
    # nonzero moments only decay
    warm = AdamState({k: np.ones_like(a) for k, a in params.arrays.items()},
                     {k: np.ones_like(a) for k, a in params.arrays.items()}, 3)
    state, _ = adam_step(warm, params, zero, cfg)
    assert np.all(state.m["E1"] == cfg.adam_beta1)
    assert np.all(state.v["E1"] == cfg.adam_beta2)


def test_global_norm_clipping():
    grads = {"a": np.array([18.0, 0.0]), "b": np.array([[0.0, 24.0]])}
    clipped, norm = clip_by_global_norm(grads, 3.0)
    assert norm == 30.0
    np.testing.assert_allclose(clipped["a"], [1.8, 0.0], rtol=1e-15)
    np.testing.assert_allclose(clipped["b"], [[0.0, 2.4]], rtol=1e-15)
    total = math.sqrt(sum(float((g ** 2).sum()) for g in clipped.values()))
    assert total <= 3.0 + 1e-9
    same, _ = clip_by_global_norm({"a": np.array([1.0])}, 3.0)
    assert same["a"][0] == 1.0


def test_adam_clips_before_moments():
    cfg = TrainConfig()
    params = zero_params(TINY, RANKS, 4)
    state, _ = adam_step(AdamState.zeros(params), params, scalar_grads(params, "root", 30.0), cfg)
    assert state.m["root"][0] == pytest.approx((1 - cfg.adam_beta1) * 3.0, rel=1e-15)


def test_adam_refuses_non_finite_gradients():
    params = zero_params(TINY, RANKS, 4)
    with pytest.raises(NumericError):
        adam_step(AdamState.zeros(params), params, scalar_grads(params, "E1", np.nan),
                  TrainConfig())


# ---------------------------------------------------------------------------
# perplexity


def test_perplexity_uniform_emission_formula():
    params = zero_params(TINY, RANKS, 4)
    sent = [2, 0, 4, 1, 3]
    g = materialize(forward(params))
    structure = inside_explicit(g.replace(Q=np.ones((TINY.p, 1))), [0] * len(sent))[0]
    want = TINY.v * math.exp(-structure / len(sent))
    assert perplexity(params, [sent]) == pytest.approx(want, rel=1e-12)


def test_perplexity_duplication_and_exclusions():
    params = xavier_init(TINY, RANKS, 8, seed=4, dtype=np.float64)
    corpus = sample_corpus(10, 0)
    a = perplexity(params, corpus)
    assert perplexity(params, corpus + corpus) == pytest.approx(a, rel=1e-12)
    res = perplexity(params, corpus + [[1]], details=True)
    assert res.excluded == 1
    assert res.tokens == sum(len(s) for s in corpus)
    assert res.value == pytest.approx(a, rel=1e-12)


def test_perplexity_is_per_token():
    params = xavier_init(TINY, RANKS, 8, seed=4, dtype=np.float64)
    corpus = sample_corpus(6, 1)
    total = float(nll(params, corpus).sum())
    assert perplexity(params, corpus) == pytest.approx(
        math.exp(total / sum(map(len, corpus))), rel=1e-12)


# ---------------------------------------------------------------------------
# training loop


def test_batches_respect_curriculum_and_seed():
    cfg = tiny_config(batch_size=3)
    corpus = sample_corpus(40, 2)
    a = make_batches(corpus, 5, cfg, epoch=1)
    b = make_batches(corpus, 5, cfg, epoch=1)
    assert [x.tolist() for x in a] == [x.tolist() for x in b]
    got = sorted(i for batch in a for i in batch)
    assert got == [i for i, s in enumerate(corpus) if len(s) <= 5]
    assert all(len(x) <= 3 for x in a)
    c = make_batches(corpus, 5, cfg, epoch=2)
    assert [x.tolist() for x in a] != [x.tolist() for x in c]


def test_empty_first_curriculum_is_an_error():
    cfg = tiny_config(curriculum_start_len=3)
    with pytest.raises(ConfigError):
        train(cfg, [[0, 1, 2, 3, 4]] * 5, [[0, 1]], vocab_size=5)


def test_training_reduces_loss_and_logs(tmp_path):
    cfg = tiny_config(max_epochs=3, learning_rate=0.02)
    # every sentence fits the first curriculum length, so epochs see the same data
    corpus = sample_corpus(48, 3, max_len=6)
    res = train(cfg, corpus, sample_corpus(8, 4), vocab_size=5, out_dir=tmp_path)
    assert len(res.history) == 3
    assert res.history[-1].train_nll < res.history[0].train_nll
    log = read_log(tmp_path / "train_log.tsv")
    assert [r.epoch for r in log] == [1, 2, 3]
    assert [r.curriculum_len for r in log] == [6, 7, 8]
    best, _ = load_params(tmp_path / "best.npm")
    assert best.dtype == np.float64
    ppl = [r.dev_ppl for r in res.history]
    assert res.best_epoch == int(np.argmin(ppl)) + 1


def test_patience_zero_stops_at_first_non_improving_epoch():
    # a large step size makes the dev perplexity overshoot early
    cfg = tiny_config(max_epochs=8, patience=0, learning_rate=0.3)
    res = train(cfg, sample_corpus(48, 5), sample_corpus(8, 6), vocab_size=5)
    ppl = [r.dev_ppl for r in res.history]
    assert res.stopped_early
    assert len(ppl) < 8
    assert all(ppl[k] < min(ppl[:k], default=math.inf) for k in range(len(ppl) - 1))
    assert ppl[-1] >= min(ppl[:-1])


def test_resume_is_bit_exact(tmp_path):
    cfg = tiny_config(max_epochs=4)
    corpus, dev = sample_corpus(40, 7), sample_corpus(6, 8)
    full = train(cfg, corpus, dev, vocab_size=5, out_dir=tmp_path / "full")
    train(cfg.replace(max_epochs=2), corpus, dev, vocab_size=5, out_dir=tmp_path / "part")
    resumed = train(cfg, corpus, dev, vocab_size=5, out_dir=tmp_path / "part", resume=True)
    for k, a in full.params.arrays.items():
        assert a.tobytes() == resumed.params.arrays[k].tobytes()
    strip = [(r.epoch, r.train_nll, r.dev_ppl) for r in read_log(tmp_path / "full" / "train_log.tsv")]
    again = [(r.epoch, r.train_nll, r.dev_ppl) for r in read_log(tmp_path / "part" / "train_log.tsv")]
    assert strip == again


def test_same_seed_same_run():
    cfg = tiny_config(max_epochs=2)
    corpus, dev = sample_corpus(30, 9), sample_corpus(5, 10)
    a = train(cfg, corpus, dev, vocab_size=5)
    b = train(cfg, corpus, dev, vocab_size=5)
    for k, arr in a.params.arrays.items():
        assert arr.tobytes() == b.params.arrays[k].tobytes()
