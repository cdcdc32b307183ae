import numpy as np
import pytest

from shortcutlab.core import (
    ImageRecord,
    Manifest,
    ManifestError,
    load_manifest,
    save_manifest,
    save_image,
)


def _write_csv(path, rows, header="patient_id,study_id,image_id,image_path,label:chf,attr:age"):
    path.write_text("\n".join([header] + rows) + "\n")


def _png(tmp_path, name, value=0.5, side=8):
    save_image(np.full((side, side), value), tmp_path / name)
    return name


def test_empty_csv_gives_empty_manifest(tmp_path):
    csv_path = tmp_path / "m.csv"
    _write_csv(csv_path, [])
    m = load_manifest(csv_path, tmp_path)
    assert len(m) == 0
    assert m.declared_tasks == ["chf"]
    assert m.declared_attributes == ["age"]


def test_two_rows_prevalence(tmp_path):
    csv_path = tmp_path / "m.csv"
    _png(tmp_path, "a.png")
    _png(tmp_path, "b.png")
    _write_csv(csv_path, ["p1,s1,i1,a.png,1,0", "p2,s2,i2,b.png,0,1"])
    m = load_manifest(csv_path, tmp_path)
    assert m.prevalence("chf") == 0.5


def test_blank_attr_is_missing_and_round_trips(tmp_path):
    csv_path = tmp_path / "m.csv"
    _png(tmp_path, "a.png")
    _write_csv(csv_path, ["p1,s1,i1,a.png,1,"])
    m = load_manifest(csv_path, tmp_path)
    assert len(m) == 1
    assert m.records[0].attributes["age"] is None
    # round-trip oracle: write then re-load preserves the missing state
    out = tmp_path / "out"
    save_manifest(m, out / "m.csv", out / "img")
    m2 = load_manifest(out / "m.csv", out / "img")
    assert m2.records[0].attributes["age"] is None
    assert m2.records[0].labels["chf"] == 1


def test_round_trip_pixels_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    recs = [
        ImageRecord(f"i{k}", f"p{k}", f"s{k}", rng.uniform(0, 1, size=(16, 16)), {"chf": k % 2}, {})
        for k in range(4)
    ]
    m = Manifest(recs, ["chf"], [])
    for depth, step in [(8, 1 / 255), (16, 1 / 65535)]:
        out = tmp_path / f"d{depth}"
        save_manifest(m, out / "m.csv", out / "img", bit_depth=depth)
        m2 = load_manifest(out / "m.csv", out / "img")
        for a, b in zip(m.records, m2.records):
            assert np.max(np.abs(a.pixels - b.pixels)) <= step / 2 + 1e-12


def test_round_trip_bit_exact_after_one_cycle(tmp_path):
    rng = np.random.default_rng(1)
    recs = [ImageRecord("i0", "p0", "s0", rng.uniform(0, 1, (8, 8)), {"chf": 1}, {"age": 0})]
    m = Manifest(recs, ["chf"], ["age"])
    first = tmp_path / "first"
    save_manifest(m, first / "m.csv", first / "img")
    m1 = load_manifest(first / "m.csv", first / "img")
    second = tmp_path / "second"
    save_manifest(m1, second / "m.csv", second / "img")
    m2 = load_manifest(second / "m.csv", second / "img")
    assert np.array_equal(m1.records[0].pixels, m2.records[0].pixels)


def test_malformed_row_names_row_number(tmp_path):
    csv_path = tmp_path / "m.csv"
    _png(tmp_path, "a.png")
    _write_csv(csv_path, ["p1,s1,i1,a.png,1,0", "p2,s2,i2,a.png,2,0"])
    with pytest.raises(ManifestError, match="row 3"):
        load_manifest(csv_path, tmp_path)


def test_unreadable_image_names_image_id(tmp_path):
    csv_path = tmp_path / "m.csv"
    _write_csv(csv_path, ["p1,s1,i1,missing.png,1,0"])
    with pytest.raises(ManifestError, match="i1"):
        load_manifest(csv_path, tmp_path)


def test_duplicate_image_id_errors(tmp_path):
    csv_path = tmp_path / "m.csv"
    _png(tmp_path, "a.png")
    _write_csv(csv_path, ["p1,s1,i1,a.png,1,0", "p2,s2,i1,a.png,0,0"])
    with pytest.raises(ManifestError, match="duplicate image_id"):
        load_manifest(csv_path, tmp_path)


def test_undeclared_label_rejected():
    rec = ImageRecord("i0", "p0", "s0", np.zeros((4, 4)), {"oops": 1}, {})
    m = Manifest([rec], ["chf"], [])
    with pytest.raises(ManifestError, match="undeclared"):
        m.validate()
