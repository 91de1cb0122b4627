import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resdec.data import make_synthetic_task
from resdec.errors import ContractError, InputError
from resdec.evaluation import bleu, max_attention_histogram, perplexity, token_accuracy
from resdec.inference import AttentionTrace
from resdec.training import TrainConfig, init_params, train

CORPUS = [["the", "cat", "sat", "on", "the", "mat"], ["a", "dog", "ran", "far", "away"],
          ["birds", "fly", "south", "in", "winter", "months"]]


def test_identical_corpus_scores_one():
    r = bleu(CORPUS, CORPUS)
    assert r.score == 1.0 and r.brevity_penalty == 1.0 and r.precisions == (1.0,) * 4


def test_clipped_repeated_word():
    r = bleu([["the"] * 4], [["the", "cat"]])
    assert r.precisions[0] == 0.25 and r.precisions[1] == 0.0 and r.score == 0.0


def test_half_length_brevity_penalty():
    ref = [f"w{i}" for i in range(16)]
    r = bleu([ref[:8]], [ref])
    assert abs(r.brevity_penalty - math.exp(-1)) < 1e-9
    assert r.precisions == (1.0,) * 4
    assert abs(r.score - math.exp(-1)) < 1e-9


def test_longer_hypothesis_has_no_penalty():
    r = bleu([["a", "b", "c", "d", "e"]], [["a", "b", "c", "d"]])
    assert r.brevity_penalty == 1.0 and r.score < 1.0


def test_bleu_input_errors():
    with pytest.raises(InputError):
        bleu([], [])
    with pytest.raises(InputError):
        bleu([["a"]], [])


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(3)), st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8))
def test_bleu_permutation_invariant(perm, extra):
    hyps = [c[:-1] + list(extra) for c in CORPUS]
    a = bleu(hyps, CORPUS)
    b = bleu([hyps[i] for i in perm], [CORPUS[i] for i in perm])
    assert a == b


def test_bleu_is_one_only_for_exact_match():
    changed = [list(c) for c in CORPUS]
    changed[1][2] = "walked"
    assert bleu(changed, CORPUS).score < 1.0
    assert bleu([c[:-1] for c in CORPUS], CORPUS).score < 1.0


def test_token_accuracy_examples():
    assert token_accuracy(CORPUS, CORPUS) == 1.0
    assert token_accuracy([["x", "y"]], [["a", "b"]]) == 0.0
    assert token_accuracy([["a", "y"]], [["a", "b"]]) == 0.5
    assert token_accuracy([["a"]], [["a", "b"]]) == 0.5


def test_uniform_model_perplexity_is_vocab_size():
    cfg = TrainConfig(variant="baseline", embed_dim=4, hidden_dim=5, src_vocab=14, tgt_vocab=14, precision="double")
    p = init_params(cfg)
    for t in p.values():
        t.data[...] = 0.0
    ppl = perplexity(p, make_synthetic_task("copy", 10, (2, 6), 20, seed=0))
    assert ppl == pytest.approx(14, rel=1e-9)


def test_perplexity_of_memorized_sentence_approaches_one():
    seq = [(1, 4, 5, 6, 7, 8, 2)]
    cfg = TrainConfig(variant="mean_residual", lm=True, embed_dim=8, hidden_dim=16, tgt_vocab=10, dropout_p=0.0,
                      init_scale=0.1, max_epochs=300, batch_size=1, precision="double")
    r = train(cfg, seq, seq)
    ppl = perplexity(r.params, seq)
    assert 1.0 <= ppl < 1.05


def test_perplexity_rejects_wrong_variant():
    cfg = TrainConfig(variant="baseline", embed_dim=4, hidden_dim=5, src_vocab=14, tgt_vocab=14)
    with pytest.raises(ContractError):
        perplexity(init_params(cfg), make_synthetic_task("copy", 10, (2, 6), 4, seed=0), variant="memory_rnn")


def _trace(rows):
    n = len(rows)
    return AttentionTrace(list(range(n)), np.zeros((n, 1)), [np.asarray(r, float) for r in rows])


def test_histogram_all_previous_word():
    rows = [[1.0]] + [list(np.eye(t)[-1] * 0.6 + 0.4 / t) for t in range(2, 8)]
    h = max_attention_histogram([_trace(rows)])
    f = h.frequencies()
    assert f[-1] == 1.0 and sum(f.values()) == pytest.approx(1.0, abs=1e-6)
    assert all(v == 0.0 for k, v in f.items() if k != -1)


def test_histogram_two_steps():
    f = max_attention_histogram([_trace([[1.0], [0.7, 0.3]])]).frequencies()
    assert set(f) == {-1, -2} and f[-2] > 0 and sum(f.values()) == pytest.approx(1.0)


def test_histogram_ties_go_to_most_recent():
    f = max_attention_histogram([_trace([[1.0], [0.5, 0.5], [1 / 3] * 3])]).frequencies()
    assert f[-1] == 1.0


def test_histogram_opportunity_normalization():
    # -2 is chosen once out of two chances, -1 once out of three
    h = max_attention_histogram([_trace([[1.0], [0.9, 0.1], [0.1, 0.1, 0.8]])])
    assert h.counts == {-1: 2, -2: 1}
    assert h.opportunities == {-1: 3, -2: 2, -3: 1}
    raw = {-1: 2 / 3, -2: 1 / 2, -3: 0.0}
    total = sum(raw.values())
    for k, v in raw.items():
        assert h.frequency(k) == pytest.approx(v / total)


def test_histogram_uniform_random_argmax_matches_expectation():
    # a step with t previous words picks offset -k with probability 1/t, so the
    # expected choice rate at -k is the mean of 1/t over the steps where -k exists
    rng = np.random.default_rng(1234)
    length = 12
    traces = []
    for _ in range(2000):
        rows = []
        for t in range(1, length + 1):
            row = np.zeros(t)
            row[rng.integers(t)] = 1.0
            rows.append(row)
        traces.append(_trace(rows))
    f = max_attention_histogram(traces).frequencies()
    rate = {-k: np.mean([1 / t for t in range(k, length + 1)]) for k in range(1, length + 1)}
    total = sum(rate.values())
    assert set(f) == set(rate)
    for k, v in rate.items():
        assert f[k] == pytest.approx(v / total, abs=0.01)
    # flat when every step sees the same number of previous words
    rows = [np.eye(length)[rng.integers(length)] for _ in range(4000)]
    g = max_attention_histogram([_trace([r]) for r in rows]).frequencies()
    assert max(abs(v - 1 / length) for v in g.values()) < 0.015


def test_histogram_lines_and_contract(tmp_path):
    h = max_attention_histogram([_trace([[1.0], [0.2, 0.8]])])
    h.write(tmp_path / "h.txt")
    lines = (tmp_path / "h.txt").read_text().splitlines()
    assert lines == ["-1\t1.000000", "-2\t0.000000"]
    with pytest.raises(ContractError):
        max_attention_histogram([AttentionTrace([1], np.ones((1, 1)), None)])
