import math
import string

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from protfuse.text_decoder import (BOS_ID, EOS_ID, PROTEIN_PLACEHOLDER_ID,
                                   TEXT_VOCAB_SIZE, ContextOverflowError,
                                   DecoderConfig, PlaceholderCountError, SplicedInput,
                                   assemble, detokenize_text,
                                   forward_loss, generate, init_decoder_params,
                                   make_embed_table, strip_specials, tokenize_text)

from conftest import finite_diff_gradcheck

CFG = DecoderConfig(d_model=16, num_layers=2, num_heads=2, max_positions=256)


def build(seed=0, cfg=CFG):
    return init_decoder_params(cfg, seed), make_embed_table(cfg, seed + 100)


class TestTokenizeText:
    def test_empty_string(self):
        assert tokenize_text("") == [BOS_ID, EOS_ID]

    def test_placeholder_literal(self):
        assert tokenize_text("<protein>") == [BOS_ID, PROTEIN_PLACEHOLDER_ID, EOS_ID]

    def test_placeholder_inline(self):
        ids = tokenize_text("a<protein>b")
        assert ids == [BOS_ID, ord("a"), PROTEIN_PLACEHOLDER_ID, ord("b"), EOS_ID]

    @given(st.text(alphabet=string.printable, min_size=0, max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_ascii(self, text):
        assert detokenize_text(tokenize_text(text)) == text


class TestAssemble:
    def test_splice_arithmetic(self):
        decoder, table = build()
        question = "Describe <protein> now."
        q_ids = tokenize_text(question)
        answer_ids = [ord(c) for c in "yes"]
        protein = torch.randn(4, 16)
        x = assemble(q_ids, [protein], answer_ids, table)
        # T = |question tokens| - placeholders + L + |answer tokens|
        assert x.embedding_rows.shape[0] == len(q_ids) - 1 + 4 + 3
        assert int(x.loss_mask.sum()) == 3 + 1  # answer + EOS
        assert x.protein_token_count == 4

    def test_two_placeholder_ppi_order(self):
        _, table = build()
        q_ids = tokenize_text("Do <protein> and <protein> interact?")
        a = torch.full((3, 16), 1.0)
        b = torch.full((5, 16), 2.0)
        x = assemble(q_ids, [a, b], [ord("n")], table)
        protein_rows = [i for i, tag in enumerate(x.segment_tags) if tag == "protein"]
        assert len(protein_rows) == 8
        first_block = x.embedding_rows[protein_rows[:3]]
        second_block = x.embedding_rows[protein_rows[3:]]
        assert torch.equal(first_block, a)
        assert torch.equal(second_block, b)

    def test_generation_prefix_has_no_loss(self):
        _, table = build()
        x = assemble(tokenize_text("hi <protein>"), [torch.randn(2, 16)], [], table)
        assert not x.loss_mask.any()
        assert x.segment_tags[0] == "question_text"

    def test_placeholder_count_mismatch(self):
        _, table = build()
        with pytest.raises(PlaceholderCountError):
            assemble(tokenize_text("no placeholder"), [torch.randn(2, 16)], [], table)
        with pytest.raises(PlaceholderCountError):
            assemble(tokenize_text("<protein>"), [], [], table)

    def test_answer_must_be_bare_ids(self):
        _, table = build()
        with pytest.raises(ValueError, match="special"):
            assemble(tokenize_text("<protein>"), [torch.randn(2, 16)],
                     tokenize_text("hi"), table)


class TestForwardLoss:
    def test_uniform_logits_loss_is_log_vocab(self):
        decoder, table = build(seed=1)
        with torch.no_grad():
            table.weight.zero_()
        x = assemble(tokenize_text("q <protein>"), [torch.randn(3, 16)],
                     [ord("a"), ord("b")], table)
        loss = float(forward_loss(x, decoder, table).detach())
        assert abs(loss - math.log(TEXT_VOCAB_SIZE)) / math.log(TEXT_VOCAB_SIZE) < 0.05

    def test_perturbation_after_last_loss_position_is_inert(self):
        decoder, table = build(seed=2)
        x = assemble(tokenize_text("q <protein>"), [torch.randn(3, 16)],
                     [ord(c) for c in "abcd"], table)
        # restrict the loss to early answer positions, then perturb a later row
        mask = x.loss_mask.clone()
        positions = torch.nonzero(mask).squeeze(1)
        keep = positions[:2]
        mask[:] = False
        mask[keep] = True
        base = SplicedInput(x.embedding_rows, x.token_ids, mask, x.segment_tags,
                            x.protein_token_count)
        loss_a = float(forward_loss(base, decoder, table).detach())
        rows = x.embedding_rows.clone()
        rows[int(positions[-1])] += 7.5
        perturbed = SplicedInput(rows, x.token_ids, mask, x.segment_tags,
                                 x.protein_token_count)
        loss_b = float(forward_loss(perturbed, decoder, table).detach())
        assert loss_a == loss_b

    def test_protein_perturbation_changes_loss(self):
        decoder, table = build(seed=3)
        protein = torch.randn(3, 16)
        q_ids = tokenize_text("q <protein>")
        answer = [ord(c) for c in "abc"]
        base = float(forward_loss(assemble(q_ids, [protein], answer, table),
                                  decoder, table).detach())
        bumped = float(forward_loss(assemble(q_ids, [protein + 1.0], answer, table),
                                    decoder, table).detach())
        assert base != bumped

    def test_loss_decomposes_per_position(self):
        decoder, table = build(seed=4)
        x = assemble(tokenize_text("qq <protein>"), [torch.randn(2, 16)],
                     [ord(c) for c in "xyz"], table)
        loss = float(forward_loss(x, decoder, table).detach())
        # independent recomputation: per-position cross entropies averaged
        with torch.no_grad():
            hidden, _ = decoder(x.embedding_rows)
            logits = hidden @ table.weight.t()
            positions = torch.nonzero(x.loss_mask).squeeze(1)
            per_pos = [float(F.cross_entropy(logits[p - 1].unsqueeze(0),
                                             x.token_ids[p].unsqueeze(0)))
                       for p in positions]
        assert loss == pytest.approx(sum(per_pos) / len(per_pos), rel=1e-6)

    def test_no_loss_positions_raises(self):
        decoder, table = build(seed=5)
        x = assemble(tokenize_text("q <protein>"), [torch.randn(2, 16)], [], table)
        with pytest.raises(ValueError, match="loss"):
            forward_loss(x, decoder, table)

    def test_context_overflow(self):
        cfg = DecoderConfig(d_model=16, num_layers=1, num_heads=2, max_positions=8)
        decoder = init_decoder_params(cfg, 0)
        table = make_embed_table(cfg, 1)
        x = assemble(tokenize_text("0123456789"), [], [], table)
        with pytest.raises(ContextOverflowError):
            decoder(x.embedding_rows)


class TestCausality:
    def test_logits_invariant_to_future_perturbations(self):
        decoder, table = build(seed=6)
        rows = torch.randn(12, 16)
        with torch.no_grad():
            hidden_a, _ = decoder(rows)
            rows_b = rows.clone()
            rows_b[9:] += torch.randn(3, 16)
            hidden_b, _ = decoder(rows_b)
        assert torch.equal(hidden_a[:9], hidden_b[:9])


class TestGenerate:
    def _constant_seven_params(self):
        decoder, table = build(seed=7)
        with torch.no_grad():
            for p in decoder.parameters():
                p.zero_()
            decoder.final_norm.bias[0] = 1.0
            table.weight.zero_()
            table.weight[7, 0] = 1.0
        return decoder, table

    def test_constant_emitter_oracle(self):
        decoder, table = self._constant_seven_params()
        out = generate(tokenize_text("q"), [], decoder, table, max_new_tokens=5)
        assert out == [7] * 5

    def test_deterministic(self):
        decoder, table = build(seed=8)
        q = tokenize_text("gen <protein>")
        protein = torch.randn(3, 16)
        a = generate(q, [protein], decoder, table, max_new_tokens=16)
        b = generate(q, [protein], decoder, table, max_new_tokens=16)
        assert a == b

    def test_tie_breaks_toward_lower_id(self):
        decoder, table = build(seed=9)
        with torch.no_grad():
            for p in decoder.parameters():
                p.zero_()
            table.weight.zero_()  # all logits equal -> token 0 wins
        out = generate(tokenize_text("q"), [], decoder, table, max_new_tokens=3)
        assert out == [0, 0, 0]

    def test_prefix_overflow_raises(self):
        cfg = DecoderConfig(d_model=16, num_layers=1, num_heads=2, max_positions=16)
        decoder = init_decoder_params(cfg, 0)
        table = make_embed_table(cfg, 1)
        with pytest.raises(ContextOverflowError):
            generate(tokenize_text("0123456789"), [], decoder, table, max_new_tokens=10)

    def test_kv_cache_matches_full_forward(self):
        decoder, table = build(seed=10)
        rows = torch.randn(10, 16)
        with torch.no_grad():
            full_hidden, _ = decoder(rows)
            part_hidden, past = decoder(rows[:6])
            inc_hidden, _ = decoder(rows[6:], past)
        assert torch.allclose(full_hidden[:6], part_hidden, atol=1e-5)
        assert torch.allclose(full_hidden[6:], inc_hidden, atol=1e-5)


def test_strip_specials():
    ids = tokenize_text("ab<protein>")
    assert strip_specials(ids) == [ord("a"), ord("b")]


def test_gradient_check_decoder():
    cfg = DecoderConfig(d_model=8, num_layers=1, num_heads=2, max_positions=64)
    decoder = init_decoder_params(cfg, 11).double()
    table = make_embed_table(cfg, 12).double()
    protein = torch.randn(2, 8, dtype=torch.float64)
    q_ids = tokenize_text("q <protein>")
    answer = [ord("a"), ord("b")]

    def loss_fn():
        x = assemble(q_ids, [protein], answer, table)
        return forward_loss(x, decoder, table)

    params = list(decoder.parameters()) + list(table.parameters())
    rel = finite_diff_gradcheck(loss_fn, params, max_coords_per_param=12)
    assert rel <= 1e-3
