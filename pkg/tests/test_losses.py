import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechvec.errors import (
    ConfigError,
    DimensionError,
    InfeasibleLengthError,
    ParameterError,
    RangeError,
    VocabularyError,
)
from speechvec.losses import (
    TaskType,
    cls_contrastive,
    cls_contrastive_grad,
    cosent,
    cosent_grad,
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_grad,
    ctc_required_length,
    info_nce,
    info_nce_grad,
    mse_align,
    mse_align_grad,
    select_loss,
)


def unit(angle):
    return np.array([math.cos(angle), math.sin(angle)])


# ---------------------------------------------------------------------------
# alignment loss


class TestMseAlign:
    def test_identical_means_zero(self):
        seq = np.array([[1.0, 2.0], [3.0, 4.0]])
        other = np.array([[2.0, 3.0]])
        assert mse_align(seq, other) == 0.0

    def test_known_value(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[0.0, 1.0]])
        assert mse_align(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_matches_float64_recomputation(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 4)).astype(np.float32)
        b = rng.standard_normal((3, 4)).astype(np.float32)
        diff = a.astype(np.float64).mean(0) - b.astype(np.float64).mean(0)
        assert mse_align(a, b) == pytest.approx(float((diff * diff).sum()), rel=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            mse_align(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_gradients_vs_finite_difference(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((2, 3))
        _, da, db = mse_align_grad(a, b)
        h = 1e-6
        for arr, grads in ((a, da), (b, db)):
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    arr[i, j] += h
                    up = mse_align(a, b)
                    arr[i, j] -= 2 * h
                    down = mse_align(a, b)
                    arr[i, j] += h
                    assert grads[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-6)


# ---------------------------------------------------------------------------
# InfoNCE


def softmax_cross_entropy_oracle(sims, tau):
    logits = np.asarray(sims, dtype=np.float64) / tau
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return float(-math.log(probs[0]))


class TestInfoNce:
    def test_equal_similarities_ln2(self):
        q = unit(0.0)
        pos = unit(0.5)
        neg = unit(-0.5)  # same cosine to q as pos
        assert info_nce(q, pos, [neg], tau=0.07) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_perfect_separation_tiny_loss(self):
        q = np.array([1.0, 0.0])
        loss = info_nce(q, q, [-q], tau=0.07)
        assert loss == pytest.approx(math.log(1.0 + math.exp(-2.0 / 0.07)), abs=1e-15)
        assert loss < 1e-11

    def test_matches_softmax_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            q = rng.standard_normal(6)
            pos = rng.standard_normal(6)
            negs = [rng.standard_normal(6) for _ in range(3)]
            sims = [float(q @ pos / (np.linalg.norm(q) * np.linalg.norm(pos)))]
            sims += [float(q @ n / (np.linalg.norm(q) * np.linalg.norm(n))) for n in negs]
            assert info_nce(q, pos, negs, 0.07) == pytest.approx(
                softmax_cross_entropy_oracle(sims, 0.07), abs=1e-9)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_negative_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal(5)
        pos = rng.standard_normal(5)
        negs = [rng.standard_normal(5) for _ in range(4)]
        base = info_nce(q, pos, negs, 0.07)
        shuffled = [negs[i] for i in rng.permutation(4)]
        assert info_nce(q, pos, shuffled, 0.07) == pytest.approx(base, abs=1e-12)

    def test_monotone_in_similarities(self):
        q = unit(0.0)
        neg = unit(2.0)
        loss_close = info_nce(q, unit(0.1), [neg], 0.07)
        loss_far = info_nce(q, unit(0.4), [neg], 0.07)
        assert loss_close < loss_far  # decreasing in s+
        loss_neg_close = info_nce(q, unit(0.5), [unit(0.8)], 0.07)
        loss_neg_far = info_nce(q, unit(0.5), [unit(2.0)], 0.07)
        assert loss_neg_far < loss_neg_close  # increasing in each s-

    def test_parameter_errors(self):
        q = unit(0.0)
        with pytest.raises(ParameterError):
            info_nce(q, q, [unit(1.0)], tau=0.0)
        with pytest.raises(ConfigError):
            info_nce(q, q, [], tau=0.07)

    def test_gradients_vs_finite_difference(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal(4)
        pos = rng.standard_normal(4)
        negs = [rng.standard_normal(4) for _ in range(2)]
        _, dq, dpos, dnegs = info_nce_grad(q, pos, negs, 0.07)
        h = 1e-6

        def f():
            return info_nce(q, pos, negs, 0.07)

        for vec, grad in [(q, dq), (pos, dpos), (negs[0], dnegs[0]), (negs[1], dnegs[1])]:
            for i in range(4):
                vec[i] += h
                up = f()
                vec[i] -= 2 * h
                down = f()
                vec[i] += h
                assert grad[i] == pytest.approx((up - down) / (2 * h), abs=1e-5)


# ---------------------------------------------------------------------------
# cosent


def cosent_bruteforce(items, pairs, tau):
    cos = []
    for i, j, _ in pairs:
        u, v = np.asarray(items[i]), np.asarray(items[j])
        cos.append(float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v))))
    total = 0.0
    for a in range(len(pairs)):
        for b in range(len(pairs)):
            if pairs[a][2] > pairs[b][2]:
                total += math.exp((cos[b] - cos[a]) / tau)
    return math.log1p(total)


class TestCosent:
    def test_all_labels_equal_is_exactly_zero(self):
        items = [unit(0.0), unit(1.0), unit(2.0)]
        pairs = [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]
        assert cosent(items, pairs, 0.07) == 0.0

    def test_two_pair_reference_value(self):
        items = [unit(0.0), unit(math.acos(0.9)), unit(math.acos(0.1))]
        pairs = [(0, 1, 1.0), (0, 2, 0.0)]
        expected = math.log1p(math.exp((0.1 - 0.9) / 0.07))
        got = cosent(items, pairs, 0.07)
        assert got == pytest.approx(expected, rel=1e-6)
        assert got == pytest.approx(1.086e-5, rel=1e-2)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            items = [rng.standard_normal(5) for _ in range(6)]
            pairs = [(int(rng.integers(0, 6)), int(rng.integers(0, 6)),
                      float(rng.integers(0, 3))) for _ in range(4)]
            assert cosent(items, pairs, 0.07) == pytest.approx(
                cosent_bruteforce(items, pairs, 0.07), abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            items = [rng.standard_normal(3) for _ in range(4)]
            pairs = [(0, 1, 2.0), (1, 2, 1.0), (2, 3, 0.0)]
            assert cosent(items, pairs, 0.07) >= 0.0

    def test_bad_index_raises(self):
        with pytest.raises(RangeError):
            cosent([unit(0.0)], [(0, 3, 1.0)], 0.07)

    def test_gradients_vs_finite_difference(self):
        rng = np.random.default_rng(6)
        items = [rng.standard_normal(3) for _ in range(4)]
        pairs = [(0, 1, 2.0), (2, 3, 1.0), (0, 3, 0.0)]
        _, d_items = cosent_grad(items, pairs, 0.07)
        h = 1e-6
        for idx in range(4):
            for i in range(3):
                items[idx][i] += h
                up = cosent(items, pairs, 0.07)
                items[idx][i] -= 2 * h
                down = cosent(items, pairs, 0.07)
                items[idx][i] += h
                assert d_items[idx][i] == pytest.approx((up - down) / (2 * h), abs=1e-5)


# ---------------------------------------------------------------------------
# label contrastive


class TestClsContrastive:
    def test_bitwise_same_as_info_nce(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(5)
        pos = rng.standard_normal(5)
        negs = [rng.standard_normal(5) for _ in range(4)]
        assert cls_contrastive(x, pos, negs, 0.07) == info_nce(x, pos, negs, 0.07)
        ga = cls_contrastive_grad(x, pos, negs, 0.07)
        gb = info_nce_grad(x, pos, negs, 0.07)
        assert ga[0] == gb[0]
        assert np.array_equal(ga[1], gb[1])

    def test_five_way_softmax_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(6)
        labels = [rng.standard_normal(6) for _ in range(5)]
        sims = [float(x @ l / (np.linalg.norm(x) * np.linalg.norm(l))) for l in labels]
        assert cls_contrastive(x, labels[0], labels[1:], 0.07) == pytest.approx(
            softmax_cross_entropy_oracle(sims, 0.07), abs=1e-9)


# ---------------------------------------------------------------------------
# dispatch


class TestSelectLoss:
    def test_dispatch_table(self):
        assert select_loss(TaskType.RETRIEVAL) is info_nce
        assert select_loss(TaskType.RERANKING) is info_nce
        assert select_loss(TaskType.STS) is cosent
        assert select_loss(TaskType.PAIR_CLASSIFICATION) is cosent
        assert select_loss(TaskType.CLASSIFICATION) is cls_contrastive
        assert select_loss(TaskType.CLUSTERING) is cls_contrastive

    def test_total_over_task_type(self):
        for task in TaskType:
            assert callable(select_loss(task))

    def test_accepts_string_values(self):
        assert select_loss("retrieval") is info_nce

    def test_unknown_task_raises(self):
        with pytest.raises(RangeError):
            select_loss("translation")


# ---------------------------------------------------------------------------
# CTC


def collapse(path, blank):
    out = []
    prev = -1
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def brute_force_log_prob_table(log_probs):
    """Sum path probabilities for every collapsed label sequence."""
    t_steps, n_cols = log_probs.shape
    blank = n_cols - 1
    table = {}
    for path in itertools.product(range(n_cols), repeat=t_steps):
        lp = sum(log_probs[t, c] for t, c in enumerate(path))
        key = collapse(path, blank)
        table.setdefault(key, []).append(lp)
    out = {}
    for key, vals in table.items():
        m = max(vals)
        out[key] = m + math.log(sum(math.exp(v - m) for v in vals))
    return out


def random_log_probs(t_steps, n_cols, rng):
    x = rng.standard_normal((t_steps, n_cols))
    x -= x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


class TestCtcLoss:
    def test_single_forced_path(self):
        log_probs = np.array([[0.0, -1e9]])  # p(a)=1, p(blank)~0
        assert ctc_loss(log_probs, [0]) == pytest.approx(0.0, abs=1e-8)

    def test_uniform_two_frame_example(self):
        log_probs = np.log(np.full((2, 2), 0.5))
        # valid paths aa, a-, -a out of 4; P = 0.75
        assert ctc_loss(log_probs, [0]) == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ctc_loss(log_probs, [0]) == pytest.approx(0.287682, abs=1e-6)

    def test_exhaustive_small_grid(self):
        rng = np.random.default_rng(9)
        for v in (1, 2):
            for t_steps in (1, 2, 3, 4):
                lp = random_log_probs(t_steps, v + 1, rng)
                table = brute_force_log_prob_table(lp)
                for length in (1, 2):
                    for target in itertools.product(range(v), repeat=length):
                        if ctc_required_length(target) > t_steps:
                            with pytest.raises(InfeasibleLengthError):
                                ctc_loss(lp, list(target))
                            assert target not in table
                            continue
                        assert ctc_loss(lp, list(target)) == pytest.approx(
                            -table[target], abs=1e-9)

    def test_infeasible_length_distinct_error(self):
        lp = np.log(np.full((1, 3), 1.0 / 3.0))
        with pytest.raises(InfeasibleLengthError):
            ctc_loss(lp, [0, 0])

    def test_target_token_out_of_range(self):
        lp = np.log(np.full((3, 3), 1.0 / 3.0))
        with pytest.raises(VocabularyError):
            ctc_loss(lp, [2])  # 2 is the blank column

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(10)
        lp = random_log_probs(5, 4, rng)
        target = [0, 2, 0]
        loss, grad = ctc_loss_grad(lp, target)
        assert loss == pytest.approx(ctc_loss(lp, target), abs=1e-12)
        h = 1e-5
        for t in range(lp.shape[0]):
            for c in range(lp.shape[1]):
                lp[t, c] += h
                up = ctc_loss(lp, target)
                lp[t, c] -= 2 * h
                down = ctc_loss(lp, target)
                lp[t, c] += h
                assert grad[t, c] == pytest.approx((up - down) / (2 * h), abs=1e-5)

    def test_loss_positive_for_stochastic_inputs(self):
        rng = np.random.default_rng(11)
        lp = random_log_probs(6, 4, rng)
        assert ctc_loss(lp, [1, 2]) > 0.0


class TestCtcGreedyDecode:
    def test_collapse_rule(self):
        # frames argmax: a a blank b  -> "ab"
        lp = np.log(np.array([
            [0.8, 0.1, 0.1],
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
            [0.1, 0.8, 0.1],
        ]))
        assert ctc_greedy_decode(lp) == [0, 1]

    def test_all_blank_empty(self):
        lp = np.log(np.array([[0.1, 0.1, 0.8]] * 5))
        assert ctc_greedy_decode(lp) == []

    def test_blank_separates_repeats(self):
        lp = np.log(np.array([
            [0.8, 0.1, 0.1],
            [0.1, 0.1, 0.8],
            [0.8, 0.1, 0.1],
        ]))
        assert ctc_greedy_decode(lp) == [0, 0]

    def test_matches_rule_oracle_on_random_peaked_rows(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            t_steps = int(rng.integers(1, 9))
            n_cols = int(rng.integers(2, 6))
            lp = random_log_probs(t_steps, n_cols, rng)
            best = [int(np.argmax(row)) for row in lp]
            assert ctc_greedy_decode(lp) == list(collapse(best, n_cols - 1))

    def test_tie_breaks_toward_lower_index(self):
        lp = np.log(np.array([[0.5, 0.5, 1e-9]]))
        assert ctc_greedy_decode(lp) == [0]
