import numpy as np
import pytest

from blendtts.melspec import MelSpectrogram
from blendtts.records import RecordError, SynthesisRecord, load_record, save_record


def uniform_attention(n_blocks, n_enc):
    return np.full((n_blocks, n_enc), 1.0 / n_enc)


def make_record(**overrides):
    kwargs = dict(
        utterance_id="u1",
        speaker_id="spk0",
        mel=MelSpectrogram(np.random.default_rng(0).normal(size=(15, 80))),
        attention=uniform_attention(3, 6),
        stop_trajectory=np.array([0.1, 0.2, 0.9]),
        terminated=True,
        rng_seed=7,
        extra={"note": "fixture"},
    )
    kwargs.update(overrides)
    return SynthesisRecord(**kwargs)


class TestValidation:
    def test_valid_record(self):
        record = make_record()
        assert record.terminated
        assert record.attention.shape == (3, 6)

    def test_rows_must_be_distributions(self):
        bad = uniform_attention(3, 6)
        bad[1] *= 2.0
        with pytest.raises(RecordError, match="u1"):
            make_record(attention=bad)

    def test_negative_weights_rejected(self):
        bad = uniform_attention(3, 6)
        bad[0, 0] = -0.5
        bad[0, 1] = 0.5 + 2.0 / 6.0
        with pytest.raises(RecordError):
            make_record(attention=bad)

    def test_stop_length_must_match_blocks(self):
        with pytest.raises(RecordError, match="stop trajectory"):
            make_record(stop_trajectory=np.array([0.1]))

    def test_stop_values_within_unit_interval(self):
        with pytest.raises(RecordError):
            make_record(stop_trajectory=np.array([0.1, 0.2, 1.5]))

    def test_attention_must_be_2d(self):
        with pytest.raises(RecordError, match="2-D"):
            make_record(attention=np.ones(4))


class TestRoundTrip:
    def test_save_load(self, tmp_path):
        record = make_record()
        path = tmp_path / "u1.npz"
        save_record(path, record)
        again = load_record(path)
        assert again.utterance_id == record.utterance_id
        assert again.speaker_id == record.speaker_id
        assert again.terminated is True
        assert again.rng_seed == 7
        assert again.extra == {"note": "fixture"}
        assert np.array_equal(again.attention, record.attention)
        assert np.array_equal(again.stop_trajectory, record.stop_trajectory)
        assert np.array_equal(again.mel.frames, record.mel.frames)
        assert again.mel.frame_shift_ms == record.mel.frame_shift_ms

    def test_unterminated_round_trip(self, tmp_path):
        record = make_record(terminated=False)
        path = tmp_path / "u2.npz"
        save_record(path, record)
        assert load_record(path).terminated is False
