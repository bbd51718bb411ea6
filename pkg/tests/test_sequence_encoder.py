import math
import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protfuse.nn_utils import seeded_generator
from protfuse.sequence_encoder import (CANONICAL_AAS, RESIDUE_VOCAB_SIZE,
                                       EmptySequenceError,
                                       SequenceEncoderConfig, UNKNOWN_ID,
                                       detokenize_residues, encode_sequence,
                                       init_sequence_params, mlm_loss, pretrain_mlm,
                                       tokenize_residues)

from conftest import finite_diff_gradcheck

CFG = SequenceEncoderConfig(d_seq=16, num_layers=2, num_heads=2)


class TestTokenize:
    def test_two_distinct_ids(self):
        ids = tokenize_residues("AG")
        assert len(ids) == 2
        assert ids[0] != ids[1]

    def test_noncanonical_maps_to_unknown(self):
        assert tokenize_residues("AZ")[1] == UNKNOWN_ID

    def test_empty_raises(self):
        with pytest.raises(EmptySequenceError):
            tokenize_residues("")

    @given(st.text(alphabet=CANONICAL_AAS, min_size=1, max_size=60))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_canonical(self, seq):
        assert detokenize_residues(tokenize_residues(seq)) == seq


class TestEncodeSequence:
    def test_single_residue_shape(self):
        enc = init_sequence_params(CFG, seed=0)
        out = encode_sequence(tokenize_residues("M"), enc)
        assert out.shape == (1, 16)

    def test_deterministic(self):
        enc = init_sequence_params(CFG, seed=0)
        ids = tokenize_residues("MKVLAT")
        assert torch.equal(enc(ids), enc(ids))

    def test_output_length_equals_residue_count(self):
        enc = init_sequence_params(CFG, seed=1)
        for L in (1, 5, 33):
            seq = "".join(random.Random(L).choices(CANONICAL_AAS, k=L))
            assert enc(tokenize_residues(seq)).shape == (L, 16)

    def test_bidirectional_witness(self):
        # changing the last residue must move row 0 for generic parameters
        enc = init_sequence_params(CFG, seed=2)
        base = tokenize_residues("AAAAAAA")
        changed = list(base)
        changed[-1] = tokenize_residues("W")[0]
        out_a = enc(base)
        out_b = enc(changed)
        assert not torch.allclose(out_a[0], out_b[0])
        assert not torch.allclose(out_a[-1], out_b[-1])

    def test_attention_rows_sum_to_one(self):
        enc = init_sequence_params(CFG, seed=3)
        _, all_weights = enc(tokenize_residues("MKVLATQR"), return_weights=True)
        for weights in all_weights:
            sums = weights.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


class TestMlm:
    def test_at_least_one_position_masked(self):
        # ceil(rate * L) >= 1 for every rate in (0, 1) and L >= 1
        for L in (1, 2, 7):
            for rate in (0.01, 0.15, 0.99):
                assert math.ceil(rate * L) >= 1

    def test_single_residue_sequence_allowed(self):
        enc = init_sequence_params(CFG, seed=4)
        loss = mlm_loss(enc, [tokenize_residues("A")], mask_rate=0.5,
                        gen=seeded_generator(0))
        assert torch.isfinite(loss)

    def test_uniform_logits_loss_near_log_vocab(self):
        enc = init_sequence_params(CFG, seed=5)
        with torch.no_grad():
            enc.mlm_head.weight.zero_()
            enc.mlm_head.bias.zero_()
        batch = [tokenize_residues("MKVLATQRAA"), tokenize_residues("GGSS")]
        loss = float(mlm_loss(enc, batch, 0.25, seeded_generator(1)).detach())
        assert abs(loss - math.log(RESIDUE_VOCAB_SIZE)) / math.log(RESIDUE_VOCAB_SIZE) < 0.05

    def test_mask_rate_validation(self):
        enc = init_sequence_params(CFG, seed=6)
        with pytest.raises(ValueError):
            mlm_loss(enc, [[0, 1]], 0.0, seeded_generator(0))

    def test_training_reduces_loss(self):
        rng = random.Random(0)
        corpus = [tokenize_residues("".join(rng.choices(CANONICAL_AAS[:6], k=12)))
                  for _ in range(20)]
        enc = init_sequence_params(CFG, seed=7)
        history = pretrain_mlm(enc, corpus, steps=200, lr=1e-3, seed=0)
        assert history[-1] < history[0]


def test_gradient_check_sequence_encoder():
    cfg = SequenceEncoderConfig(d_seq=8, num_layers=1, num_heads=2)
    enc = init_sequence_params(cfg, seed=8).double()
    ids = tokenize_residues("MKVLA")
    rel = finite_diff_gradcheck(lambda: enc(ids).sum(), enc.parameters())
    assert rel <= 1e-3
