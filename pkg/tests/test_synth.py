import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sifdal.errors import ConfigurationError, ContractError, DataError, DatasetIOError
from sifdal.synth import (CLASSES, SampleRecord, SynthConfig, TrainingSet, apparent_size, generate_dataset,
                          generate_sample, parse_record, read_dataset, read_images, read_ppm, write_dataset,
                          write_ppm)


@pytest.mark.parametrize("real,alt,f,px", [(4.0, 30.0, 600.0, 80), (0.5, 75.0, 600.0, 4), (0.5, 75.0, 100.0, 2)])
def test_apparent_size_examples(real, alt, f, px):
    assert apparent_size(real, alt, f) == px


@given(st.floats(1, 50), st.floats(1, 100), st.floats(100, 1000))
def test_doubling_altitude_halves_size(real, alt, f):
    big, small = apparent_size(real, alt, f), apparent_size(real, 2 * alt, f)
    assert small >= 2
    if f * real / (2 * alt) >= 2.5:
        assert abs(small - f * real / alt / 2) <= 0.5 and abs(big - f * real / alt) <= 0.5


def test_apparent_size_rejects_bad_altitude():
    with pytest.raises(ContractError):
        apparent_size(1.0, 0.0, 100.0)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SynthConfig(altitude_range=(0.0, 10.0))
    with pytest.raises(ConfigurationError):
        SynthConfig(modes=(20.0, -5.0))


def test_generation_is_deterministic_and_random_access():
    cfg = SynthConfig(seed=3)
    r1, im1 = generate_sample(7, cfg)
    r2, im2 = generate_sample(7, cfg)
    assert r1 == r2 and im1.tobytes() == im2.tobytes()
    recs, ims = generate_dataset(3, cfg, start=6)
    assert recs[1] == r1 and ims[1].tobytes() == im1.tobytes()
    assert generate_sample(8, cfg)[1].tobytes() != im1.tobytes()


def test_high_altitude_boxes_are_smaller():
    cfg = SynthConfig(seed=11)
    for index in range(30):
        low, _ = generate_sample(index, cfg, altitude_m=5.0)
        high, _ = generate_sample(index, cfg, altitude_m=75.0)
        low_cls = {b[4]: (b[2] - b[0]) * (b[3] - b[1]) for b in low.boxes}
        for b in high.boxes:
            if b[4] in low_cls:
                assert (b[2] - b[0]) * (b[3] - b[1]) < low_cls[b[4]]


def test_records_respect_invariants():
    recs, ims = generate_dataset(200, SynthConfig(seed=5))
    for r, im in zip(recs, ims):
        assert im.shape == (64, 64, 3) and im.dtype == np.uint8
        assert 5.0 <= r.altitude_m <= 75.0
        assert set(r.imu) == {"roll_deg", "pitch_deg", "yaw_deg"}
        for x0, y0, x1, y1, c in r.boxes:
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64
            assert (x1 - x0) * (y1 - y0) >= 4 and 0 <= c < len(CLASSES)


def test_modes_give_three_altitude_groups():
    recs, _ = generate_dataset(300, SynthConfig(modes=(20.0, 50.0, 80.0)))
    alts = np.array([r.altitude_m for r in recs])
    for m in (20, 50, 80):
        assert np.sum(np.abs(alts - m) <= 6) > 60
    assert np.all(np.min(np.abs(alts[:, None] - np.array([20, 50, 80])[None]), axis=1) <= 6)


def test_small_fraction_rises_with_altitude():
    recs, _ = generate_dataset(500, SynthConfig(seed=18))
    alts = np.array([r.altitude_m for r in recs])
    cuts = np.quantile(alts, [1 / 3, 2 / 3])
    terciles = [[(b[2] - b[0]) * (b[3] - b[1]) for r in recs if lo < r.altitude_m <= hi for b in r.boxes]
                for lo, hi in ((-np.inf, cuts[0]), (cuts[0], cuts[1]), (cuts[1], np.inf))]
    small = [np.mean(np.array(a) < 32 ** 2) for a in terciles]
    # at 64x64 the upper terciles are entirely small, so the rise saturates
    assert small[0] <= small[1] <= small[2] and small[0] < small[2]
    tiny = [np.mean(np.array(a) < 16 ** 2) for a in terciles]
    assert tiny[0] < tiny[1] < tiny[2]


def test_scale_law_slope():
    # cars across an altitude range where every jittered car fits the frame
    cfg = SynthConfig(seed=2, altitude_range=(15.0, 75.0))
    xs, ys = [], []
    for r, _ in (generate_sample(i, cfg) for i in range(1000)):
        for b in r.boxes:
            if CLASSES[b[4]] == "car":
                xs.append(np.log(r.altitude_m))
                ys.append(np.log(max(b[2] - b[0], b[3] - b[1])))
    slope = np.polyfit(xs, ys, 1)[0]
    assert len(xs) > 500
    assert -1.05 <= slope <= -0.95, slope


def test_dataset_round_trip(tmp_path):
    recs, ims = generate_dataset(10, SynthConfig(seed=9))
    recs[0].height_level = 2
    write_dataset(recs, tmp_path, ims)
    back = read_dataset(tmp_path)
    assert back == recs
    assert all(a.tobytes() == b.tobytes() for a, b in zip(read_images(back, tmp_path), ims))
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == [f"{i:06d}.ppm" for i in range(10)]
    # altitude floats survive exactly
    assert [r.altitude_m for r in back] == [r.altitude_m for r in recs]


def test_manifest_keys_exact(tmp_path):
    recs, ims = generate_dataset(2, SynthConfig())
    write_dataset(recs, tmp_path, ims)
    line = (tmp_path / "manifest.jsonl").read_text().splitlines()[0]
    assert set(json.loads(line)) == {"image", "width", "height", "boxes", "altitude_m", "imu", "height_level"}


def test_missing_key_rejected_with_name_and_line():
    rec, _ = generate_sample(0)
    obj = json.loads(rec.to_json())
    del obj["altitude_m"]
    with pytest.raises(DataError, match=r"line 4.*altitude_m"):
        parse_record(json.dumps(obj), 4)
    obj = json.loads(rec.to_json())
    obj["notes"] = "x"
    with pytest.raises(DataError, match="notes"):
        parse_record(json.dumps(obj), 1)
    with pytest.raises(DataError, match="line 2"):
        parse_record("{not json", 2)


def test_out_of_bounds_box_rejected():
    rec = SampleRecord("images/000000.ppm", 64, 64, [[60.0, 0.0, 70.0, 5.0, 0]], 10.0,
                       {"roll_deg": 0.0, "pitch_deg": 0.0, "yaw_deg": 0.0})
    with pytest.raises(DataError, match="outside"):
        parse_record(rec.to_json(), 1)


def test_ppm_round_trip_and_truncation(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(path), img)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DatasetIOError, match="a.ppm"):
        read_ppm(path)
    with pytest.raises(DatasetIOError, match="missing.ppm"):
        read_ppm(tmp_path / "missing.ppm")


def test_training_set_requires_levels(tmp_path):
    recs, ims = generate_dataset(4, SynthConfig())
    with pytest.raises(DataError, match="height level"):
        TrainingSet.from_records(recs, ims)
    ts = TrainingSet.from_records(recs, ims, levels=[0, 1, 2, 0])
    assert ts.images.shape == (4, 3, 64, 64) and len(ts) == 4
    assert abs(ts.images.mean()) < 1.0
