import math
import re

import numpy as np
import pytest

from smoe import tokenizer
from smoe.errors import DataError, SpecError
from smoe.evaluation import (QUESTION, SENTINEL, CurriculumStage, PasskeySpec, PasskeyTask, filler_text,
                             generate_passkey_prompt, passkey_eval, periodic_corpus, perplexity_vs_context,
                             train_passkey)
from smoe.model import ModelConfig, forward_batch, init_model

KEY_RE = re.compile(r"the pass key is (\d+)\. ")


def oracle(prompts, n):
    return [p + tokenizer.encode(KEY_RE.search(tokenizer.decode(p)).group(1)) for p in prompts]


def corrupted(prompts, n):
    out = []
    for p in prompts:
        key = KEY_RE.search(tokenizer.decode(p)).group(1)
        out.append(p + tokenizer.encode(str((int(key[0]) + 1) % 10) + key[1:]))
    return out


class TestPrompt:
    @pytest.mark.parametrize("context", [52, 64, 128, 256])
    @pytest.mark.parametrize("position", [0.0, 0.3, 1.0])
    def test_length_and_single_key(self, context, position):
        spec = PasskeySpec(context, position)
        prompt, key = generate_passkey_prompt(spec, 3)
        assert len(prompt) == context
        assert prompt[0] == tokenizer.BOS
        text = tokenizer.decode(prompt)
        key_text = tokenizer.decode(key)
        assert len(key_text) == 5 and key_text.isdigit()
        assert text.count(key_text) == 1
        assert sum(ch.isdigit() for ch in text) == 5
        assert text.endswith(QUESTION)

    def test_deterministic(self):
        spec = PasskeySpec(128, 0.5)
        assert generate_passkey_prompt(spec, 42) == generate_passkey_prompt(spec, 42)

    def test_position_zero(self):
        prompt, key = generate_passkey_prompt(PasskeySpec(128, 0.0), 1)
        assert tokenizer.decode(prompt).startswith(SENTINEL.format(key=tokenizer.decode(key)))

    def test_position_moves_sentinel(self):
        starts = [tokenizer.decode(generate_passkey_prompt(PasskeySpec(256, p), 0)[0]).index("the pass key")
                  for p in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert starts == sorted(starts) and starts[0] == 0

    def test_seeds_do_not_collide(self):
        spec = PasskeySpec(96, 0.5)
        prompts = {tuple(generate_passkey_prompt(spec, s)[0]) for s in range(1000)}
        assert len(prompts) == 1000

    def test_context_too_small(self):
        with pytest.raises(SpecError):
            generate_passkey_prompt(PasskeySpec(40, 0.5), 0)

    @pytest.mark.parametrize("bad", [{"position": 1.5}, {"key_length": 0}])
    def test_invalid_spec(self, bad):
        with pytest.raises(SpecError):
            generate_passkey_prompt(PasskeySpec(**{"context_len": 64, "position": 0.5, **bad}), 0)

    def test_filler_is_digit_free(self):
        text = filler_text(np.random.default_rng(0), 5000)
        assert len(text) == 5000
        assert not any(ch.isdigit() for ch in text)
        assert "pass" not in text and "key" not in text


class TestPasskeyEval:
    def test_oracle_stub(self):
        grid = passkey_eval(oracle, trials=4)
        assert grid.accuracy.shape == (3, 5)
        assert np.all(grid.accuracy == 1.0)

    def test_corrupted_stub(self):
        assert np.all(passkey_eval(corrupted, trials=4).accuracy == 0.0)

    def test_untrained_model_ten_digits(self):
        cfg = ModelConfig(dim=16, n_layers=1, head_dim=8, hidden_dim=32, n_heads=2, n_kv_heads=1,
                          context_len=128, vocab_size=258, num_experts=4, top_k_experts=2)
        grid = passkey_eval(init_model(cfg, seed=0), contexts=(64,), positions=(0.1, 0.5, 0.9), trials=10,
                            key_length=10)
        assert grid.accuracy.mean() < 0.01

    def test_tsv(self):
        grid = passkey_eval(oracle, contexts=(64,), positions=(0.5,), trials=1)
        assert grid.to_tsv(seed=3) == "# seed=3 trials=1\ncontext_len\tpos=0.5\n64\t1.0000\n"

    def test_task_batches(self):
        batch = PasskeyTask(64, 80).sample(np.random.default_rng(0), 3)
        assert batch.inputs.shape[0] == 3
        assert 64 <= batch.inputs.shape[1] - 4 <= 80
        assert np.all(batch.loss_weights.sum(axis=1) == 5)

    def test_text_weight_on_prompt_only(self):
        batch = PasskeyTask(64, 64, text_weight=0.25).sample(np.random.default_rng(1), 2)
        # targets are the 63 prompt tokens after BOS, then the 5 answer digits
        np.testing.assert_array_equal(batch.loss_weights[:, -5:], 1.0)
        np.testing.assert_array_equal(batch.loss_weights[:, :-5], 0.25)


class TestCurriculum:
    def test_parse(self):
        stage = CurriculumStage.parse("64-256:2000")
        assert (stage.min_context, stage.max_context, stage.steps) == (64, 256, 2000)
        assert stage.schedule == "cosine"

    @pytest.mark.parametrize("bad", ["64-256", "64:10", "a-b:3", "64-256:x", ""])
    def test_parse_rejects(self, bad):
        with pytest.raises(SpecError):
            CurriculumStage.parse(bad)

    def test_stages_run_in_order(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                          context_len=80, vocab_size=258, num_experts=4, top_k_experts=2)
        stages = (CurriculumStage(56, 60, 3), CurriculumStage(60, 76, 2))
        result = train_passkey(init_model(cfg, seed=0), stages, batch_size=2)
        assert len(result.losses) == 5
        again = train_passkey(init_model(cfg, seed=0), stages, batch_size=2)
        assert again.losses == result.losses

    def test_stage_longer_than_context(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                          context_len=80, vocab_size=258, num_experts=4, top_k_experts=2)
        with pytest.raises(SpecError, match="exceeds context_len"):
            train_passkey(init_model(cfg), (CurriculumStage(56, 77, 1),))

    def test_negative_text_weight(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                          context_len=80, vocab_size=258, num_experts=4, top_k_experts=2)
        with pytest.raises(SpecError):
            train_passkey(init_model(cfg), (CurriculumStage(56, 60, 1),), text_weight=-0.1)

    def test_no_stages(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                          context_len=80, vocab_size=258, num_experts=4, top_k_experts=2)
        with pytest.raises(SpecError):
            train_passkey(init_model(cfg), ())


class TestPerplexity:
    def test_uniform_logits(self):
        corpus = np.random.default_rng(0).integers(0, 258, size=1000)
        rows = perplexity_vs_context(lambda x: np.zeros(x.shape + (258,)), corpus, [1, 4, 16, 64])
        for _, ppl in rows:
            assert ppl == pytest.approx(258, abs=1e-6)

    def test_zero_head_model(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=8, n_heads=2, n_kv_heads=1,
                          context_len=32, vocab_size=20, num_experts=2, top_k_experts=1)
        model = init_model(cfg, seed=0, dtype=np.float64)
        model.params["output"][:] = 0
        corpus = np.random.default_rng(1).integers(0, 20, size=300)
        for _, ppl in perplexity_vs_context(model, corpus, [2, 8, 32]):
            assert abs(ppl - 20) <= 1e-6

    def test_window_one_is_bigram(self):
        cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=8, n_heads=2, n_kv_heads=1,
                          context_len=32, vocab_size=20, num_experts=2, top_k_experts=1)
        model = init_model(cfg, seed=2, dtype=np.float64)
        corpus = np.random.default_rng(2).integers(0, 20, size=200)
        logits, _, _ = forward_batch(model, corpus[:-1, None])
        logp = logits[:, 0, :] - np.log(np.exp(logits[:, 0, :]).sum(-1, keepdims=True))
        expected = math.exp(-np.mean(logp[np.arange(199), corpus[1:]]))
        assert perplexity_vs_context(model, corpus, [1])[0][1] == pytest.approx(expected, rel=1e-10)

    def test_at_least_one(self):
        corpus = np.arange(100) % 5
        confident = lambda x: np.where(np.arange(5) == ((x + 1) % 5)[..., None], 50.0, 0.0)  # noqa: E731
        assert perplexity_vs_context(confident, corpus, [4])[0][1] >= 1.0

    def test_short_corpus(self):
        with pytest.raises(DataError):
            perplexity_vs_context(lambda x: np.zeros(x.shape + (4,)), [0, 1, 2], [3])

    def test_periodic_corpus(self):
        corpus = periodic_corpus(np.random.default_rng(0), period=8, doc_len=64, docs=3)
        assert corpus.shape == (192,)
        docs = corpus.reshape(3, 64)
        assert np.all(docs[:, 8:] == docs[:, :-8])
        assert corpus.min() >= 97 and corpus.max() < 97 + 16
