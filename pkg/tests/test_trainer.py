"""Training loop behavior: schedule, death/cloning, checkpoints, determinism."""

import json

import numpy as np
import pytest

from itco import objective as ob
from itco import trainer as tr
from itco.corpus import SyntheticSpec, Utterance, WindowGeometry, synth_corpus
from itco.model import CONFIRM, PREDICT


def tiny_corpus(seed=0, n_utts=10, windows=4, k=2):
    spec = SyntheticSpec(
        num_latent=k,
        x_channel=np.eye(k),
        y_channel=np.eye(k),
        latent_prior=np.full(k, 1.0 / k),
        num_utterances=n_utts,
        windows_per_utterance=windows,
        seed=seed,
        frames_per_side=2,
        gap=1,
    )
    utts, _ = synth_corpus(spec)
    return utts, spec


def tiny_config(**overrides):
    base = dict(
        geometry=WindowGeometry(total=5, past=2, gap=1, future=2),
        alphabet_size=8,
        hidden_dim=4,
        lr_schedule=((1, 0.4),),
        clone_at=0,
        seed=0,
        aligned_windows=True,
        detect_sample_utterances=4,
    )
    base.update(overrides)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_match_reference_schedule():
    config = tr.TrainConfig()
    assert config.lr_schedule == ((432, 0.4), (540, 0.2), (900, 0.1), (1080, 0.05))
    assert config.clone_at == 216
    assert config.alphabet_size == 64
    assert config.hidden_dim == 64
    assert config.dead_threshold == 1e-3
    assert config.clone_noise_sigma == 0.01
    assert config.budget_utterances == 108000


def test_config_lr_is_a_step_function_of_hundreds():
    config = tr.TrainConfig()
    assert config.lr_at(0) == 0.4
    assert config.lr_at(43199) == 0.4
    assert config.lr_at(43200) == 0.2
    assert config.lr_at(53999) == 0.2
    assert config.lr_at(54000) == 0.1
    assert config.lr_at(90000) == 0.05
    assert config.lr_at(107999) == 0.05


def test_config_single_segment_is_constant_lr():
    config = tiny_config(lr_schedule=((3, 0.7),), clone_at=1)
    for processed in (0, 100, 299):
        assert config.lr_at(processed) == 0.7


def test_config_rejects_bad_schedules():
    with pytest.raises(tr.TrainerError):
        tiny_config(lr_schedule=())
    with pytest.raises(tr.TrainerError):
        tiny_config(lr_schedule=((2, 0.4), (2, 0.2)))
    with pytest.raises(tr.TrainerError):
        tiny_config(lr_schedule=((2, 0.0),))
    with pytest.raises(tr.TrainerError):
        tiny_config(lr_schedule=((2, 0.4),), clone_at=2)
    with pytest.raises(tr.TrainerError):
        tiny_config(mode="sampled")
    with pytest.raises(tr.TrainerError):
        tiny_config(entropy_mode="windowed")


def test_config_json_round_trip():
    config = tiny_config(mode="adversarial", entropy_mode="global")
    again = tr.TrainConfig.from_json_dict(config.to_json_dict())
    assert again.to_json_dict() == config.to_json_dict()
    assert again.geometry == config.geometry


# ---------------------------------------------------------------------------
# death detection and cloning


def test_forced_negative_logit_is_detected_dead():
    utts, _ = tiny_corpus()
    config = tiny_config()
    state = tr.TrainState(config, input_dim=2)
    for side in (CONFIRM, PREDICT):
        state.ep.store[f"{side}.out.b"].value[3] = -1000.0
    live = tr.detect_dead_symbols(state, utts[:4])
    assert not live[3]
    assert live.sum() == 7


def test_uniform_models_have_no_dead_symbols():
    utts, _ = tiny_corpus()
    config = tiny_config()
    state = tr.TrainState(config, input_dim=2)
    for name, param in state.ep.store.items():
        param.value[...] = 0  # uniform outputs: 1/8 each, above 1e-3
    live = tr.detect_dead_symbols(state, utts[:4])
    assert live.all()


def test_dead_needs_both_models_below_threshold():
    utts, _ = tiny_corpus()
    config = tiny_config()
    state = tr.TrainState(config, input_dim=2)
    state.ep.store[f"{CONFIRM}.out.b"].value[2] = -1000.0  # predict side still lives
    live = tr.detect_dead_symbols(state, utts[:4])
    assert live[2]


def frozen_state_with_dead_slots(z=8, live=(0, 1), dtype=np.float64):
    """f64 state whose non-live symbols carry exactly zero probability."""
    config = tiny_config(alphabet_size=z)
    state = tr.TrainState(config, input_dim=2, dtype=dtype)
    for side in (CONFIRM, PREDICT):
        bias = state.ep.store[f"{side}.out.b"].value
        for sym in range(z):
            if sym not in live:
                bias[sym] = -2000.0  # exp underflows to exactly 0 in f64
    return state


def batch_terms(state, utts):
    xs, ys = [], []
    for u in utts:
        x, y = tr._utterance_windows(u, state.config)
        xs.append(x)
        ys.append(y)
    x = np.concatenate(xs).astype(state.ep.store.dtype)
    y = np.concatenate(ys).astype(state.ep.store.dtype)
    confirm = state.ep.encode_node(CONFIRM, y).value
    predict = state.ep.encode_node(PREDICT, x).value
    _, terms = ob.utterance_loss(confirm, predict)
    return terms


def test_clone_with_zero_noise_adds_exactly_one_bit_to_both_terms():
    utts, _ = tiny_corpus(n_utts=4)
    state = frozen_state_with_dead_slots()
    state.config.clone_noise_sigma = 0.0
    before = batch_terms(state, utts)
    tr.detect_dead_symbols(state, utts)
    assert state.live_mask.sum() == 2
    tr.clone_symbols(state)
    after = batch_terms(state, utts)
    assert abs(after.marginal_entropy_bits - before.marginal_entropy_bits - 1.0) < 1e-9
    assert abs(after.cross_entropy_bits - before.cross_entropy_bits - 1.0) < 1e-9
    assert abs(after.mi_bound_bits - before.mi_bound_bits) < 1e-9


def test_clone_pairs_high_marginal_live_symbols_first():
    utts, _ = tiny_corpus(n_utts=4)
    state = frozen_state_with_dead_slots(live=(0, 1))
    state.config.clone_noise_sigma = 0.0
    tr.detect_dead_symbols(state, utts)
    # make symbol 1 the heavier live symbol in the recorded sample average
    state.detect_mean_confirm = np.array([0.3, 0.7, 0, 0, 0, 0, 0, 0.0])
    tr.clone_symbols(state)
    event = state.clone_history[-1]
    assert tuple(event["pairs"][0]) == (1, 2)
    assert tuple(event["pairs"][1]) == (0, 3)
    assert event["dead_before"] == 6
    assert state.live_mask[2] and state.live_mask[3]
    # copies are exact with zero noise
    w = state.ep.store[f"{CONFIRM}.out.w"].value
    assert np.array_equal(w[2], w[1])
    assert np.array_equal(w[3], w[0])


def test_clone_noise_perturbs_only_the_copies():
    utts, _ = tiny_corpus(n_utts=4)
    state = frozen_state_with_dead_slots()
    state.config.clone_noise_sigma = 0.05
    tr.detect_dead_symbols(state, utts)
    w_before = state.ep.store[f"{CONFIRM}.out.w"].value.copy()
    tr.clone_symbols(state)
    w_after = state.ep.store[f"{CONFIRM}.out.w"].value
    (src0, dst0), (src1, dst1) = state.clone_history[-1]["pairs"]
    assert np.array_equal(w_after[src0], w_before[src0])
    assert np.array_equal(w_after[src1], w_before[src1])
    assert not np.array_equal(w_after[dst0], w_before[src0])
    assert np.allclose(w_after[dst0], w_before[src0], atol=0.5)


def test_clone_without_dead_symbols_is_a_noop():
    utts, _ = tiny_corpus()
    config = tiny_config()
    state = tr.TrainState(config, input_dim=2)
    for _, param in state.ep.store.items():
        param.value[...] = 0
    tr.detect_dead_symbols(state, utts[:4])
    before = state.ep.store["marginal.logits"].value.copy()
    tr.clone_symbols(state)
    assert np.array_equal(state.ep.store["marginal.logits"].value, before)
    assert state.clone_history == []


def test_clone_requires_detection_stats():
    state = tr.TrainState(tiny_config(), input_dim=2)
    with pytest.raises(tr.TrainerError):
        tr.clone_symbols(state)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    utts, _ = tiny_corpus()
    config = tiny_config(lr_schedule=((1, 0.4),), clone_at=0)
    state, _ = tr.train(utts, config)
    path = tmp_path / "state.itck"
    tr.save_checkpoint(state, path)
    loaded = tr.load_checkpoint(path)
    for name, param in state.ep.store.items():
        assert np.array_equal(loaded.ep.store[name].value, param.value), name
    assert loaded.epoch == state.epoch
    assert loaded.pos_in_epoch == state.pos_in_epoch
    assert loaded.processed == state.processed
    assert loaded.step == state.step
    assert loaded.cloned == state.cloned
    assert np.array_equal(loaded.live_mask, state.live_mask)
    assert loaded.epoch_accum == state.epoch_accum
    assert json.dumps(loaded.clone_history) == json.dumps(
        json.loads(json.dumps(state.clone_history))
    )


def test_checkpoint_rejects_bad_magic_and_corruption(tmp_path):
    state = tr.TrainState(tiny_config(), input_dim=2)
    path = tmp_path / "state.itck"
    tr.save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    bad_magic = tmp_path / "bad.itck"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(tr.TrainerError):
        tr.load_checkpoint(bad_magic)
    raw[30] ^= 0xFF
    corrupt = tmp_path / "corrupt.itck"
    corrupt.write_bytes(bytes(raw))
    with pytest.raises(tr.TrainerError):
        tr.load_checkpoint(corrupt)


def test_checkpoint_rejects_wrong_version(tmp_path):
    state = tr.TrainState(tiny_config(), input_dim=2)
    path = tmp_path / "state.itck"
    tr.save_checkpoint(state, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = np.asarray([99], dtype="<u4").tobytes()
    body = bytes(raw[:-4])
    import zlib

    versioned = tmp_path / "versioned.itck"
    versioned.write_bytes(body + np.asarray([zlib.crc32(body)], dtype="<u4").tobytes())
    with pytest.raises(tr.TrainerError):
        tr.load_checkpoint(versioned)


# ---------------------------------------------------------------------------
# the loop


def test_train_rejects_empty_and_unusably_short_corpora():
    config = tiny_config()
    with pytest.raises(tr.TrainerError):
        tr.train([], config)
    short = [Utterance("s", np.zeros((3, 2)))]
    with pytest.raises(tr.TrainerError):
        tr.train(short, config)


def test_train_skips_short_utterances_with_warning(caplog):
    utts, _ = tiny_corpus(n_utts=4)
    utts.append(Utterance("stub", np.ones((2, 2))))
    config = tiny_config(lr_schedule=((1, 0.4),))
    with caplog.at_level("WARNING"):
        _, records = tr.train(utts, config)
    assert any("stub" in message for message in caplog.messages)
    names = {r["utterance_id"] for r in records if r["type"] == "minibatch"}
    assert "stub" not in names


def test_metrics_stream_shapes_and_lr_schedule(tmp_path):
    utts, _ = tiny_corpus(n_utts=10)
    config = tiny_config(lr_schedule=((1, 0.4), (2, 0.2)), clone_at=1)
    metrics_path = tmp_path / "metrics.jsonl"
    state, records = tr.train(utts, config, metrics_path=metrics_path)
    assert state.processed == 200
    minibatches = [r for r in records if r["type"] == "minibatch"]
    epochs = [r for r in records if r["type"] == "epoch"]
    clones = [r for r in records if r["type"] == "clone"]
    assert len(minibatches) == 200
    assert len(epochs) == 20  # 10 utterances per epoch, budget 200
    assert len(clones) == 1
    assert clones[0]["processed"] == 100
    assert all(r["lr"] == 0.4 for r in minibatches[:100])
    assert all(r["lr"] == 0.2 for r in minibatches[100:])
    for r in minibatches:
        for key in ("utterance_id", "step", "cross_entropy_bits",
                    "marginal_entropy_bits", "mi_bound_bits", "saturation_count"):
            assert key in r
    # file mirrors the records list
    lines = metrics_path.read_text().splitlines()
    assert len(lines) == len(records)
    assert json.loads(lines[0]) == records[0]


def test_epoch_aggregates_average_the_minibatches():
    utts, _ = tiny_corpus(n_utts=5)
    config = tiny_config(lr_schedule=((1, 0.4),))  # budget 100 = 20 epochs
    _, records = tr.train(utts, config)
    first_epoch = next(r for r in records if r["type"] == "epoch")
    first_five = [r for r in records if r["type"] == "minibatch"][:5]
    want = np.mean([r["mi_bound_bits"] for r in first_five])
    assert abs(first_epoch["mean_mi_bound_bits"] - want) < 1e-12
    assert first_epoch["utterances"] == 5
    assert "live_symbols" in first_epoch


def test_training_makes_progress_on_easy_synthetic_task():
    utts, _ = tiny_corpus(n_utts=10, windows=6)
    config = tiny_config(lr_schedule=((3, 0.4),), clone_at=2)
    _, records = tr.train(utts, config)
    epochs = [r for r in records if r["type"] == "epoch"]
    assert epochs[-1]["mean_mi_bound_bits"] > epochs[0]["mean_mi_bound_bits"]


def test_two_runs_with_same_seed_are_byte_identical(tmp_path):
    utts, _ = tiny_corpus(n_utts=6)
    config = tiny_config(lr_schedule=((1, 0.4),))
    _, rec_a = tr.train(utts, config, metrics_path=tmp_path / "a.jsonl")
    _, rec_b = tr.train(utts, config, metrics_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert rec_a == rec_b
    _, rec_c = tr.train(utts, tiny_config(lr_schedule=((1, 0.4),), seed=1))
    assert rec_a != rec_c


def test_resume_reproduces_uninterrupted_run_exactly(tmp_path):
    utts, _ = tiny_corpus(n_utts=7)
    # clone fires at processed=100, stop straddles epochs and the clone
    config = tiny_config(lr_schedule=((2, 0.4),), clone_at=1)
    _, full = tr.train(utts, config, dev_corpus=utts[:2])

    ck = tmp_path / "ck"
    _, prefix = tr.train(utts, config, dev_corpus=utts[:2], checkpoint_dir=ck, stop_after=108)
    resumed_state = tr.load_checkpoint(ck / "interrupted.itck")
    _, suffix = tr.train(utts, config, dev_corpus=utts[:2], resume=resumed_state)

    stitched = prefix + suffix
    assert len(stitched) == len(full)
    for a, b in zip(stitched, full):
        assert a == b


def test_resume_with_different_config_is_rejected(tmp_path):
    utts, _ = tiny_corpus(n_utts=4)
    config = tiny_config(lr_schedule=((1, 0.4),))
    ck = tmp_path / "ck"
    tr.train(utts, config, checkpoint_dir=ck, stop_after=10)
    state = tr.load_checkpoint(ck / "interrupted.itck")
    other = tiny_config(lr_schedule=((1, 0.4),), seed=5)
    with pytest.raises(tr.TrainerError):
        tr.train(utts, other, resume=state)


def test_final_checkpoint_written_and_loadable(tmp_path):
    utts, _ = tiny_corpus(n_utts=5)
    config = tiny_config(lr_schedule=((1, 0.4),))
    ck = tmp_path / "ck"
    state, _ = tr.train(utts, config, checkpoint_dir=ck)
    final = tr.load_checkpoint(ck / "final.itck")
    assert final.processed == state.processed == 100
    assert (ck / "epoch_0000.itck").exists()


def test_global_entropy_mode_runs_and_checkpoints_buffer(tmp_path):
    utts, _ = tiny_corpus(n_utts=5)
    config = tiny_config(
        lr_schedule=((1, 0.4),), entropy_mode="global", entropy_buffer_windows=12
    )
    ck = tmp_path / "ck"
    state, records = tr.train(utts, config, checkpoint_dir=ck)
    assert state.entropy_buffer.shape == (12, 8)
    loaded = tr.load_checkpoint(ck / "final.itck")
    assert np.array_equal(loaded.entropy_buffer, state.entropy_buffer)
    assert any(r["type"] == "minibatch" for r in records)


def test_adversarial_mode_emits_marginal_term_and_resumes(tmp_path):
    utts, _ = tiny_corpus(n_utts=6)
    config = tiny_config(lr_schedule=((1, 0.4),), mode="adversarial")
    _, full = tr.train(utts, config)
    assert all(
        "adversarial_marginal_bits" in r for r in full if r["type"] == "minibatch"
    )
    ck = tmp_path / "ck"
    _, prefix = tr.train(utts, config, checkpoint_dir=ck, stop_after=33)
    state = tr.load_checkpoint(ck / "interrupted.itck")
    _, suffix = tr.train(utts, config, resume=state)
    assert prefix + suffix == full


def test_evaluate_on_corpus_is_deterministic_and_complete():
    utts, _ = tiny_corpus(n_utts=6)
    config = tiny_config(lr_schedule=((1, 0.4),))
    state, _ = tr.train(utts, config)
    a = tr.evaluate_on_corpus(state, utts[:3])
    b = tr.evaluate_on_corpus(state, utts[:3])
    assert a == b
    for key in (
        "dev_cross_entropy_bits",
        "dev_marginal_entropy_bits",
        "dev_mi_bound_bits",
        "dev_mean_entropy_psi_bits",
        "dev_mean_entropy_phi_bits",
        "dev_agreement",
    ):
        assert key in a
    assert 0.0 <= a["dev_agreement"] <= 1.0


def test_aligned_windows_restrict_to_generated_placements():
    utts, spec = tiny_corpus(n_utts=2, windows=4)
    aligned = tiny_config()
    free = tiny_config(aligned_windows=False)
    x_aligned, _ = tr._utterance_windows(utts[0], aligned)
    x_free, _ = tr._utterance_windows(utts[0], free)
    assert x_aligned.shape[0] == 4  # one per generated window
    assert x_free.shape[0] == utts[0].frames.shape[0] - spec.window_total + 1
