"""Modality dropout masks and autoencoder imputation."""

import numpy as np
import numpy.testing as npt
import pytest

from lrmm import nn
from lrmm.data import Document, ModalityMask
from lrmm.encoders import EncoderConfig, encode_text, encode_visual, init_encoder_params
from lrmm.errors import DegenerateSample, InvalidArgument
from lrmm.imputation import (
    AutoencoderConfig,
    MDropConfig,
    apply_mask,
    impute,
    init_autoencoder_params,
    reconstruct,
    sample_mask,
    zero_input_prior,
)


def full_store(seed=0, d=4, d_h=6, vocab=12, visual_dim=5):
    cfg = EncoderConfig(embed_dim=d, lstm_hidden=d, visual_in_dim=visual_dim,
                        post_recurrent_dropout=0.0)
    store = nn.ParameterStore(rng_seed=seed)
    rng = np.random.default_rng(seed)
    init_encoder_params(store, cfg, vocab, rng)
    init_autoencoder_params(store, d, AutoencoderConfig(hidden=d_h), rng)
    return store, cfg


def doc(ids):
    return Document(token_ids=list(ids), original_length=len(ids))


# ----------------------------------------------------------------- mask draws


def test_mdrop_config_validation():
    with pytest.raises(InvalidArgument):
        MDropConfig(p_m=1.5)
    with pytest.raises(InvalidArgument):
        MDropConfig(n_m=1)
    with pytest.raises(InvalidArgument):
        MDropConfig(min_kept=0)
    with pytest.raises(InvalidArgument):
        MDropConfig(min_kept=4)


def test_sample_mask_identity_when_p_m_zero():
    rng = np.random.default_rng(0)
    cfg = MDropConfig(p_m=0.0)
    for _ in range(200):
        assert sample_mask(cfg, rng).as_array().all()


def test_sample_mask_respects_min_kept():
    rng = np.random.default_rng(1)
    cfg = MDropConfig(p_m=1.0, min_kept=3)
    for _ in range(500):
        assert sample_mask(cfg, rng).count() >= 3


def test_sample_mask_monte_carlo_matches_decision_rule_oracle():
    # oracle: drop frequency of one modality =
    #   p_m * P(dropped | >= min_kept survive), by direct enumeration
    n_m, min_kept = 4, 1
    keep_p = 1.0 - 1.0 / n_m

    def enum_drop_prob():
        total = 0.0
        dropped = 0.0
        for bits in range(2 ** n_m):
            keep = [(bits >> i) & 1 for i in range(n_m)]
            p = 1.0
            for k in keep:
                p *= keep_p if k else (1.0 - keep_p)
            if sum(keep) >= min_kept:
                total += p
                if not keep[0]:
                    dropped += p
        return dropped / total

    cond = enum_drop_prob()
    for p_m in (0.25, 0.5, 1.0):
        cfg = MDropConfig(p_m=p_m)
        rng = np.random.default_rng(42)
        draws = 20_000
        drops = np.zeros(4)
        for _ in range(draws):
            drops += ~sample_mask(cfg, rng).as_array()
        freq = drops / draws
        expected = p_m * cond
        npt.assert_allclose(freq, expected, atol=0.015)


def test_sample_mask_is_deterministic_given_seed():
    cfg = MDropConfig(p_m=0.7)
    a = [sample_mask(cfg, np.random.default_rng(7)).as_array() for _ in range(1)]
    b = [sample_mask(cfg, np.random.default_rng(7)).as_array() for _ in range(1)]
    npt.assert_array_equal(a, b)


# ----------------------------------------------------------------- apply mask


def embeddings_for(store, cfg, with_u=True, with_v=True):
    out = {"u": None, "o": None, "m": None, "v": None}
    if with_u:
        out["u"] = encode_text(doc([2, 3]), "u", store, cfg)
    out["o"] = encode_text(doc([4, 5]), "o", store, cfg)
    out["m"] = encode_text(doc([6]), "m", store, cfg)
    if with_v:
        out["v"] = encode_visual(np.ones(cfg.visual_in_dim), store, cfg)
    return out


def test_apply_mask_identity_keeps_everything():
    store, cfg = full_store()
    embs = embeddings_for(store, cfg)
    inputs, eff = apply_mask(embs, ModalityMask(True, True, True, True))
    assert eff.as_array().all()
    assert all(inputs[g] is embs[g] for g in "uomv")


def test_apply_mask_drops_and_intersects_with_availability():
    store, cfg = full_store()
    embs = embeddings_for(store, cfg, with_u=False)
    inputs, eff = apply_mask(embs, ModalityMask(True, True, False, True))
    assert inputs["u"] is None and not eff.u      # missing in data
    assert inputs["m"] is None and not eff.m      # masked away
    assert inputs["o"] is embs["o"] and eff.o


def test_apply_mask_degenerate_sample():
    store, cfg = full_store()
    embs = embeddings_for(store, cfg, with_u=False, with_v=False)
    with pytest.raises(DegenerateSample):
        apply_mask(embs, ModalityMask(True, False, False, True))


# -------------------------------------------------------------- reconstruction


def test_reconstruct_with_zero_parameters_gives_one_half():
    store, cfg = full_store()
    for g in "uomv":
        for suffix in ("w_vh", "b_vh", "w_hv", "b_hv"):
            store.tensor(f"ae_{g}.{suffix}").value[...] = 0.0
    emb = encode_visual(np.ones(cfg.visual_in_dim), store, cfg)
    rec, hids = reconstruct(emb, "v", store, cfg.lstm_hidden)
    npt.assert_allclose(rec.value, 0.5, atol=1e-15)
    npt.assert_allclose(hids[0].value, 0.5, atol=1e-15)


def test_reconstruct_text_averages_per_word_decodes():
    store, cfg = full_store(seed=3)
    emb = encode_text(doc([2, 5, 7]), "u", store, cfg)
    rec, hids = reconstruct(emb, "u", store, cfg.lstm_hidden)
    assert len(hids) == 3
    # manual recompute from word states
    w_vh = store.tensor("ae_u.w_vh").value
    b_vh = store.tensor("ae_u.b_vh").value
    w_hv = store.tensor("ae_u.w_hv").value
    b_hv = store.tensor("ae_u.b_hv").value
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    decs = []
    for w in emb.word_level:
        h = sig(w.value @ w_vh + b_vh)
        decs.append(sig(h @ w_hv + b_hv))
    npt.assert_allclose(rec.value, np.mean(decs, axis=0), atol=1e-12)


def test_zero_input_prior_matches_reconstruct_of_none():
    store, cfg = full_store(seed=4)
    hid, rec = zero_input_prior(store, "m", cfg.lstm_hidden)
    rec2, hids2 = reconstruct(None, "m", store, cfg.lstm_hidden)
    npt.assert_array_equal(rec.value[0], rec2.value)
    npt.assert_array_equal(hid.value[0], hids2[0].value)


def test_prior_depends_only_on_autoencoder_parameters():
    store, cfg = full_store(seed=5)
    _, rec_a = zero_input_prior(store, "u", cfg.lstm_hidden)
    store.tensor("lstm_u.w").value[...] += 1.0  # encoder change: no effect
    _, rec_b = zero_input_prior(store, "u", cfg.lstm_hidden)
    npt.assert_array_equal(rec_a.value, rec_b.value)
    store.tensor("ae_u.b_vh").value[...] += 0.5
    _, rec_c = zero_input_prior(store, "u", cfg.lstm_hidden)
    assert np.max(np.abs(rec_c.value - rec_b.value)) > 1e-9


def test_impute_routes_kept_vs_dropped():
    store, cfg = full_store(seed=6)
    embs = embeddings_for(store, cfg)
    recon, eff = impute(embs, ModalityMask(True, False, True, True), store,
                        cfg.lstm_hidden)
    assert set(recon) == {"u", "o", "m", "v"}
    assert eff.u and not eff.o
    # dropped slot equals the zero-input prior exactly
    _, prior = zero_input_prior(store, "o", cfg.lstm_hidden)
    npt.assert_array_equal(recon["o"].value, prior.value[0])
    # kept slot equals its direct reconstruction
    direct, _ = reconstruct(embs["u"], "u", store, cfg.lstm_hidden)
    npt.assert_array_equal(recon["u"].value, direct.value)


def test_impute_is_deterministic():
    store, cfg = full_store(seed=7)
    embs = embeddings_for(store, cfg)
    mask = ModalityMask(True, True, False, True)
    a, _ = impute(embs, mask, store, cfg.lstm_hidden)
    embs2 = embeddings_for(store, cfg)
    b, _ = impute(embs2, mask, store, cfg.lstm_hidden)
    for g in "uomv":
        npt.assert_array_equal(a[g].value, b[g].value)


def test_gradient_does_not_flow_into_dropped_modality_encoder():
    store, cfg = full_store(seed=8)
    store.zero_grad()
    with nn.Tape() as tape:
        embs = embeddings_for(store, cfg)
        recon, _ = impute(embs, ModalityMask(True, False, True, True), store,
                          cfg.lstm_hidden)
        loss = nn.tsum(nn.square(nn.concat([recon[g] for g in "uomv"], axis=-1)))
        tape.backward(loss)
    npt.assert_array_equal(store.tensor("lstm_o.w").grad, 0.0)
    assert np.any(store.tensor("lstm_u.w").grad != 0.0)
    # the dropped slot still trains its own autoencoder through the prior
    assert np.any(store.tensor("ae_o.b_vh").grad != 0.0)
