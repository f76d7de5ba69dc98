import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import slide_dict, write_manifest_lines
from tilebench.core import (CohortManifest, ScoreRow, SlideRecord, SplitRole, Task, TileRecord,
                            dump_manifest, load_manifest, load_tiles, read_scores,
                            select_one_slide_per_patient, stable_hash, write_manifest, write_scores,
                            write_tiles)
from tilebench.errors import InvariantViolation, ParseError


def test_three_slide_manifest(tmp_path):
    p = write_manifest_lines(tmp_path / "m.jsonl", [slide_dict(i, label=i % 2) for i in range(3)])
    m = load_manifest(p)
    assert len(m) == 3
    assert m.task is Task.MSI
    assert [s.slide_id for s in m.slides] == ["S000", "S001", "S002"]


def test_duplicate_slide_id_rejected(tmp_path):
    p = write_manifest_lines(tmp_path / "m.jsonl", [slide_dict(0), slide_dict(0, patient="Q")])
    with pytest.raises(InvariantViolation):
        load_manifest(p)


@pytest.mark.parametrize("bad", [
    {"slide_id": "A", "patient_id": "P", "microns_per_pixel": 0},
    {"slide_id": "A", "patient_id": "P", "microns_per_pixel": -0.5},
    {"slide_id": "A", "patient_id": "P", "microns_per_pixel": 0.5, "labels": {"MSI": 2}},
    {"slide_id": "A", "patient_id": "P", "microns_per_pixel": 0.5, "labels": {"KRAS": 1}},
])
def test_invariant_violations(tmp_path, bad):
    p = write_manifest_lines(tmp_path / "m.jsonl", [bad])
    with pytest.raises(InvariantViolation):
        load_manifest(p)


@pytest.mark.parametrize("text", [
    "not json\n",
    '{"split_role": "train"}\n',
    '{"task": "MSI"}\n{"patient_id": "P", "microns_per_pixel": 0.5}\n',
    '{"task": "MSI"}\n[1, 2]\n',
    "",
])
def test_parse_errors(tmp_path, text):
    p = tmp_path / "m.jsonl"
    p.write_text(text)
    with pytest.raises(ParseError):
        load_manifest(p)


def test_msi_counts_report():
    slides = tuple(SlideRecord(f"S{i}", f"P{i}", "MCO", "", 0.5, {"MSI": int(i < 166)})
                   for i in range(1138))
    m = CohortManifest(Task.MSI, slides)
    assert m.counts_report() == "166:972"


def test_positive_classes():
    assert Task.MSI.positive_class == "MSI-H"
    assert Task.BRAF.positive_class == "BRAF-mutant"
    assert Task.CIMP.positive_class == "CIMP-H"


def test_optional_labels_per_task():
    s = SlideRecord("S", "P", "c", "", 0.5, {"MSI": 1})
    assert s.label("MSI") == 1
    assert s.label(Task.BRAF) is None


def _multi_slide_manifest(n_patients, per_patient):
    slides = tuple(SlideRecord(f"P{p}-S{k}", f"P{p}", "c", "", 0.5, {"MSI": p % 2})
                   for p in range(n_patients) for k in range(per_patient))
    return CohortManifest(Task.MSI, slides)


def test_single_slide_kept():
    m = _multi_slide_manifest(1, 1)
    assert select_one_slide_per_patient(m, 7).slides == m.slides


def test_selection_deterministic():
    m = _multi_slide_manifest(1, 3)
    a = select_one_slide_per_patient(m, 42)
    b = select_one_slide_per_patient(m, 42)
    assert a == b and len(a) == 1


def test_ten_patients_two_slides():
    assert len(select_one_slide_per_patient(_multi_slide_manifest(10, 2), 0)) == 10


def test_selection_ignores_order():
    m = _multi_slide_manifest(6, 3)
    rev = CohortManifest(m.task, m.slides[::-1])
    a = {s.slide_id for s in select_one_slide_per_patient(m, 3).slides}
    b = {s.slide_id for s in select_one_slide_per_patient(rev, 3).slides}
    assert a == b


def test_seed_changes_choice():
    m = _multi_slide_manifest(30, 3)
    picks = {tuple(s.slide_id for s in select_one_slide_per_patient(m, seed).slides) for seed in range(5)}
    assert len(picks) > 1


def test_empty_manifest_selection():
    m = CohortManifest(Task.MSI, ())
    assert len(select_one_slide_per_patient(m, 0)) == 0


def test_stable_hash_is_stable():
    assert stable_hash("a", 1) == stable_hash("a", 1)
    assert stable_hash("a", 1) != stable_hash("a1")
    assert 0 <= stable_hash("x") < 2 ** 64


slide_st = st.builds(
    lambda sid, pid, mpp, lab: SlideRecord(f"S{sid}", f"P{pid}", "c", f"img/{sid}.png", mpp, lab),
    st.integers(0, 10 ** 6), st.integers(0, 20),
    st.floats(0.1, 2.0, allow_nan=False),
    st.dictionaries(st.sampled_from(["MSI", "BRAF", "CIMP"]), st.integers(0, 1)))


def _manifest_from(slides):
    unique = {s.slide_id: s for s in slides}
    return CohortManifest(Task.BRAF, tuple(unique.values()), SplitRole.EXTERNAL_TEST)


@settings(max_examples=50, deadline=None)
@given(st.lists(slide_st, max_size=15))
def test_manifest_roundtrip(tmp_path_factory, slides):
    m = _manifest_from(slides)
    p = tmp_path_factory.mktemp("m") / "m.jsonl"
    write_manifest(m, p)
    back = load_manifest(p)
    assert back.slides == m.slides
    assert back.task == m.task and back.split_role == m.split_role
    assert dump_manifest(back) == dump_manifest(m)


@settings(max_examples=50, deadline=None)
@given(st.lists(slide_st, max_size=25), st.integers(0, 2 ** 63))
def test_selection_idempotent(slides, seed):
    m = _manifest_from(slides)
    once = select_one_slide_per_patient(m, seed)
    assert select_one_slide_per_patient(once, seed) == once
    assert len(once) == len({s.patient_id for s in m.slides})


@settings(max_examples=50, deadline=None)
@given(st.lists(slide_st, max_size=25))
def test_label_counts_match_recount(slides):
    m = _manifest_from(slides)
    pos = sum(1 for s in m.slides if s.labels.get("BRAF") == 1)
    neg = sum(1 for s in m.slides if s.labels.get("BRAF") == 0)
    assert m.label_counts() == (pos, neg)


def test_tile_record_invariants():
    with pytest.raises(InvariantViolation):
        TileRecord("S", -1, 0, 512, 224)
    with pytest.raises(InvariantViolation):
        TileRecord("S", 0, 0, 512, 224, tissue_probs=(0.1,) * 9)
    t = TileRecord("S", 512, 1024, 512, 224, tissue_probs=(1 / 9,) * 9)
    assert t.tile_id == "S_512_1024"


def test_tiles_roundtrip(tmp_path):
    tiles = [TileRecord("S", 0, 0, 512, 224, 0.05, True, (0.0,) * 8 + (1.0,), True, "a.png"),
             TileRecord("S", 512, 0, 512, 224)]
    write_tiles(tiles, tmp_path / "t.jsonl")
    assert load_tiles(tmp_path / "t.jsonl") == tiles


def test_scores_roundtrip(tmp_path):
    rows = [ScoreRow("P1", "MSI", 0.1 + 0.2, 1), ScoreRow("P2", "MSI", 1e-17, None)]
    write_scores(rows, tmp_path / "s.csv")
    assert read_scores(tmp_path / "s.csv") == rows
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "entity_id,task,score,label"


def test_scores_bad_header(tmp_path):
    (tmp_path / "s.csv").write_text("id,score\nP,0.5\n")
    with pytest.raises(ParseError):
        read_scores(tmp_path / "s.csv")


def test_manifest_header_is_self_describing(tmp_path):
    p = write_manifest_lines(tmp_path / "m.jsonl", [slide_dict(0, label=1)], role="external_test")
    m = load_manifest(p)
    assert m.split_role is SplitRole.EXTERNAL_TEST
    first = json.loads(dump_manifest(m).splitlines()[0])
    assert first == {"task": "MSI", "split_role": "external_test"}
