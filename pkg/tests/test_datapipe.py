import warnings

import numpy as np
import pytest

from apnea_cnn import datapipe as dp


def make_record(seconds, labels=None, pid="p", seed=0):
    r = np.random.default_rng(seed)
    labels = np.zeros(seconds, dtype=int) if labels is None else np.asarray(labels)
    return dp.EcgRecord(pid, r.standard_normal(seconds * dp.SAMPLE_RATE), labels)


def quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", dp.DataWarning)
        return fn(*args, **kwargs)


class TestRecordFormats:
    @pytest.fixture
    def record(self):
        labels = np.zeros(60, dtype=int)
        labels[20:35] = 1
        return make_record(60, labels, pid="ucddb002")

    def test_csv_round_trip(self, record, tmp_path):
        dp.write_csv_record(record, tmp_path / "a.csv")
        back = dp.load_record(tmp_path / "a.csv")
        assert back.patient_id == "ucddb002"
        assert back.samples.size == 7680
        np.testing.assert_array_equal(back.samples, record.samples)
        np.testing.assert_array_equal(back.second_labels, record.second_labels)

    def test_binary_round_trip(self, record, tmp_path):
        dp.write_binary_record(record, tmp_path / "a.ecgbin")
        back = dp.load_record(tmp_path / "a.ecgbin")
        np.testing.assert_array_equal(back.samples, record.samples)
        np.testing.assert_array_equal(back.second_labels, record.second_labels)

    def test_trailing_samples_dropped_with_warning(self, tmp_path):
        lines = ["p,128"] + ["0.5"] * (2 * 128 + 37)
        (tmp_path / "t.csv").write_text("\n".join(lines))
        (tmp_path / "t.labels").write_text("0\n1\n")
        with pytest.warns(dp.DataWarning, match="37 trailing"):
            rec = dp.load_record(tmp_path / "t.csv")
        assert rec.samples.size == 256

    def test_no_apnea_flag(self, tmp_path):
        dp.write_csv_record(make_record(12), tmp_path / "n.csv")
        with pytest.warns(dp.DataWarning):
            rec = dp.load_record(tmp_path / "n.csv")
        assert dp.NO_APNEA_FLAG in rec.flags and not rec.has_apnea

    @pytest.mark.parametrize("header", ["p", "p,250", "p,abc", ",128"])
    def test_bad_header(self, header, tmp_path):
        (tmp_path / "h.csv").write_text(header + "\n1.0\n")
        (tmp_path / "h.labels").write_text("0\n")
        with pytest.raises(dp.MalformedHeaderError):
            dp.load_record(tmp_path / "h.csv")

    def test_label_count_mismatch(self, tmp_path):
        (tmp_path / "m.csv").write_text("p,128\n" + "0\n" * 256)
        (tmp_path / "m.labels").write_text("0\n")
        with pytest.raises(dp.LengthMismatchError):
            dp.load_record(tmp_path / "m.csv")

    def test_unknown_label(self, tmp_path):
        (tmp_path / "u.csv").write_text("p,128\n" + "0\n" * 128)
        (tmp_path / "u.labels").write_text("A\n")
        with pytest.raises(dp.UnknownLabelError):
            dp.load_record(tmp_path / "u.csv")

    def test_missing_labels_file(self, tmp_path):
        (tmp_path / "x.csv").write_text("p,128\n" + "0\n" * 128)
        with pytest.raises(dp.RecordFormatError):
            dp.load_record(tmp_path / "x.csv")

    def test_truncated_binary(self, record, tmp_path):
        dp.write_binary_record(record, tmp_path / "a.ecgbin")
        blob = (tmp_path / "a.ecgbin").read_bytes()
        (tmp_path / "b.ecgbin").write_bytes(blob[:-5])
        with pytest.raises(dp.LengthMismatchError):
            dp.load_record(tmp_path / "b.ecgbin")

    def test_unsupported_suffix(self, tmp_path):
        with pytest.raises(dp.RecordFormatError):
            dp.load_record(tmp_path / "a.txt")


class TestWindows:
    def test_sixty_second_record(self):
        ws = dp.window_array(make_record(60))
        assert ws.x.shape == (50, 1408)

    def test_eleven_seconds_is_one_window(self):
        labels = np.zeros(11, dtype=int)
        labels[1] = 1
        ws = dp.window_array(make_record(11, labels))
        assert len(ws) == 1 and ws.y[0] == 1

    def test_too_short(self):
        with pytest.warns(dp.DataWarning):
            assert len(dp.window_array(make_record(10))) == 0

    def test_label_is_second_second(self, rng):
        labels = rng.integers(0, 2, 40)
        ws = dp.window_array(make_record(40, labels))
        np.testing.assert_array_equal(ws.y, labels[1:31])

    def test_window_contents(self):
        rec = make_record(30)
        ws = dp.window_array(rec)
        np.testing.assert_array_equal(ws.x[7], dp.normalize(rec.samples[7 * 128 : 7 * 128 + 1408]))
        # consecutive windows overlap by 1280 raw samples
        np.testing.assert_array_equal(rec.samples[7 * 128 + 128 : 7 * 128 + 1408], rec.samples[8 * 128 : 8 * 128 + 1280])

    def test_make_windows_matches_array(self):
        rec = make_record(15, pid="q")
        wins = dp.make_windows(rec)
        assert [w.start_second for w in wins] == list(range(5))
        assert all(w.patient_id == "q" for w in wins)

    def test_normalize(self, rng):
        z = dp.normalize(rng.standard_normal(1408) * 4 + 2)
        assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0, abs=1e-12)

    def test_normalize_constant(self):
        np.testing.assert_array_equal(dp.normalize(np.full(10, 3.0)), np.zeros(10))

    def test_concat_renumbers(self):
        ws = dp.WindowSet.concat([dp.window_array(make_record(12, pid="a")), dp.window_array(make_record(13, pid="b"))])
        np.testing.assert_array_equal(ws.index, np.arange(5))


class TestSplitting:
    def windows(self, n_pos, n_neg, seed=0):
        labels = np.array([1] * n_pos + [0] * n_neg)
        np.random.default_rng(seed).shuffle(labels)
        return dp.WindowSet(np.arange(labels.size, dtype=float)[:, None], labels, np.full(labels.size, "p"),
                            np.arange(labels.size), np.arange(labels.size))

    def test_partition_sizes(self):
        assert dp.partition_sizes(100) == (80, 10, 10)

    def test_split_is_a_partition(self):
        parts = dp.split_windows(self.windows(30, 70), seed=4)
        assert [len(p) for p in parts] == [80, 10, 10]
        joined = np.sort(np.concatenate([p.index for p in parts]))
        np.testing.assert_array_equal(joined, np.arange(100))

    def test_oversample_balances(self):
        ws = self.windows(10, 70)
        out = dp.oversample(ws, np.random.default_rng(0))
        assert out.class_counts() == {"non_apnea": 70, "apnea": 70}
        assert set(out.index[ws.y.size:]) <= set(np.flatnonzero(ws.y == 1))

    def test_single_class_warns(self):
        with pytest.warns(dp.DataWarning):
            out = dp.oversample(self.windows(0, 5), np.random.default_rng(0))
        assert len(out) == 5

    def test_test_partition_not_balanced(self):
        split = quiet(dp.split_and_balance, self.windows(20, 80), 1)
        raw = dp.split_windows(self.windows(20, 80), 1)
        assert split.test.class_counts() == raw[2].class_counts()
        t = split.train.class_counts()
        assert t["apnea"] == t["non_apnea"]

    def test_deterministic(self):
        a = quiet(dp.split_and_balance, self.windows(20, 80), 9)
        b = quiet(dp.split_and_balance, self.windows(20, 80), 9)
        for part in ("train", "validation", "test"):
            np.testing.assert_array_equal(getattr(a, part).index, getattr(b, part).index)

    def test_segments_mode_keeps_time_order(self):
        rec = make_record(110, pid="a")
        train, val, test = dp.split_windows(dp.window_array(rec), 0, "segments")
        assert train.start_seconds.max() < val.start_seconds.min() <= val.start_seconds.max() < test.start_seconds.min()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            dp.split_windows(self.windows(2, 2), 0, "random")


class TestSynthetic:
    def test_length_and_labels(self):
        prof = dp.SynthProfile(60, ((10, 25),))
        rec = dp.synth_record(prof, 0)
        assert rec.samples.size == 60 * 128
        assert rec.second_labels.sum() == 15 and rec.second_labels[10] == 1 and rec.second_labels[25] == 0

    def test_deterministic(self):
        prof = dp.SynthProfile(30, ((5, 12),))
        np.testing.assert_array_equal(dp.synth_record(prof, 4).samples, dp.synth_record(prof, 4).samples)

    def test_apnea_beats_faster(self):
        prof = dp.SynthProfile(40, ((0, 20),), noise_std=0.0, jitter=0)
        x = dp.synth_record(prof, 0).samples
        peaks = np.flatnonzero((x[1:-1] > x[:-2]) & (x[1:-1] >= x[2:]) & (x[1:-1] > 0.5)) + 1
        first, second = peaks[peaks < 19 * 128], peaks[peaks > 21 * 128]
        assert np.median(np.diff(first)) < np.median(np.diff(second))

    def test_random_profile_episodes_inside(self, rng):
        prof = dp.random_profile(600, rng)
        assert prof.apnea_episodes
        assert all(0 <= s < e <= 600 for s, e in prof.apnea_episodes)
