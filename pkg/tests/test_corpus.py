import filecmp
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from oracles import plan_violations
from wmspoof import audio, corpus
from wmspoof.codecs import CodecConfig
from wmspoof.corpus import Group, Roster, RosterMember, UtteranceRecord
from wmspoof.errors import ParseError, ValidationError


def make_records(n_bona, n_spoof):
    recs = [UtteranceRecord(f"b{i:05d}", f"bona/b{i:05d}.wav", "bonafide") for i in range(n_bona)]
    recs += [UtteranceRecord(f"s{i:05d}", f"spoof/s{i:05d}.wav", "spoof") for i in range(n_spoof)]
    return recs


def small_roster():
    return Roster((Group("hand", [RosterMember("lsb", CodecConfig("lsb")),
                                  RosterMember("dsss", CodecConfig("dsss"))]),
                   Group("dnn", [RosterMember("x"), RosterMember("y")])))


# ---------------------------------------------------------------- manifests

def test_native_manifest(tmp_path):
    m = tmp_path / "m.tsv"
    m.write_text("u1\ta/u1.wav\tbonafide\nu2\ta/u2.wav\tspoof\n")
    assert corpus.parse_manifest(m)[0] == UtteranceRecord("u1", "a/u1.wav", "bonafide")
    m.write_text("u1\ta/u1.wav\tbonafide\nu1\ta/u1b.wav\tspoof\n")
    with pytest.raises(ValidationError, match="u1"):
        corpus.parse_manifest(m)
    m.write_text("u1\ta/u1.wav\tgenuine\n")
    with pytest.raises(ValidationError):
        corpus.parse_manifest(m)


def test_asvspoof_manifest(tmp_path):
    m = tmp_path / "p.txt"
    m.write_text("LA_0079 LA_T_1138215 - - bonafide\nLA_0079 LA_T_1271820 - A01 spoof\n")
    recs = corpus.parse_manifest(m, "asvspoof_cm")
    assert recs[1] == UtteranceRecord("LA_T_1271820", "LA_T_1271820.wav", "spoof")


# ---------------------------------------------------------------- plan examples

def test_thousand_record_example():
    plan = corpus.build_mix_plan(make_records(400, 600), 0.5, seed=3)
    marked = plan.watermarked()
    assert len(marked) == 500
    assert Counter(r.label for r in marked) == {"spoof": 300, "bonafide": 200}
    assert plan.group_counts() == {"handcrafted": 250, "dnn": 250}
    counts = plan.member_counts()
    assert {counts[s] for s in ("lsb", "phase", "dsss", "svd_qim", "patchwork", "norm_space")} <= {41, 42}


def test_ratio_boundaries():
    recs = make_records(3, 4)
    assert corpus.build_mix_plan(recs, 0.0, 1).watermarked() == []
    full = corpus.build_mix_plan(recs, 1.0, 1, small_roster())
    assert sorted(full.group_counts().values()) == [3, 4]
    assert plan_violations(full, 1.0) == []
    with pytest.raises(ValidationError):
        corpus.build_mix_plan([], 0.5, 1)
    with pytest.raises(ValidationError):
        corpus.build_mix_plan(recs, 1.5, 1)


def test_determinism_and_order_independence():
    recs = make_records(37, 81)
    a = corpus.build_mix_plan(recs, 0.25, 9)
    b = corpus.build_mix_plan(list(reversed(recs)), 0.25, 9)
    assert a == b
    assert corpus.build_mix_plan(recs, 0.25, 10).assignments != a.assignments


def test_nested_mode_subsets():
    recs = make_records(123, 456)
    sets = [{r.utt_id for r in corpus.build_mix_plan(recs, p, 4, nested=True).watermarked()}
            for p in (0.25, 0.5, 0.75)]
    assert sets[0] <= sets[1] <= sets[2]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 300), st.integers(0, 300), st.floats(0, 1), st.integers(0, 2 ** 31))
def test_plan_invariants_property(n_bona, n_spoof, ratio, seed):
    if n_bona + n_spoof == 0:
        return
    plan = corpus.build_mix_plan(make_records(n_bona, n_spoof), ratio, seed)
    assert plan_violations(plan, ratio) == []


# ---------------------------------------------------------------- plan files

def test_plan_roundtrip(tmp_path):
    plan = corpus.build_mix_plan(make_records(400, 600), 0.75, 2)
    corpus.serialize_plan(plan, tmp_path / "p.txt")
    assert corpus.load_plan(tmp_path / "p.txt") == plan


def test_plan_file_errors(tmp_path):
    plan = corpus.build_mix_plan(make_records(10, 10), 0.5, 2)
    path = tmp_path / "p.txt"
    corpus.serialize_plan(plan, path)
    text = path.read_text()
    (tmp_path / "v.txt").write_text(text.replace("WMPLAN v1", "WMPLAN v2"))
    with pytest.raises(ParseError, match="line 1"):
        corpus.load_plan(tmp_path / "v.txt")
    (tmp_path / "r.txt").write_text(text.replace("ratio\t0.5", "ratio\t0.25"))
    with pytest.raises(ValidationError):
        corpus.load_plan(tmp_path / "r.txt")
    lines = text.splitlines()
    lines[-1] = lines[-1].split("\t")[0]
    (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line"):
        corpus.load_plan(tmp_path / "m.txt")


def test_empty_plan_file(tmp_path):
    plan = corpus.build_mix_plan(make_records(1, 0), 0.0, 0)
    corpus.serialize_plan(plan, tmp_path / "p.txt")
    lines = [ln for ln in (tmp_path / "p.txt").read_text().splitlines()
             if not ln.startswith(("b0", "records"))]
    lines.append("records\t0")
    (tmp_path / "e.txt").write_text("\n".join(lines) + "\n")
    empty = corpus.load_plan(tmp_path / "e.txt")
    assert empty.records == () and empty.watermarked() == []


# ---------------------------------------------------------------- materialisation

def write_fixture(root: Path, recs, rate=16000, seconds=1.0):
    for i, r in enumerate(recs):
        path = root / r.path
        path.parent.mkdir(parents=True, exist_ok=True)
        clip = audio.noise_plus_tones(i, seconds=seconds, sample_rate=rate)
        audio.write_wav(clip, path)


def test_materialize_clean_passthrough(tmp_path):
    recs = make_records(2, 2)
    write_fixture(tmp_path / "in", recs, rate=16000)
    plan = corpus.build_mix_plan(recs, 0.0, 0)
    report = corpus.materialize(plan, tmp_path / "in", tmp_path / "out")
    assert not report.failures()
    for r in recs:
        assert (tmp_path / "in" / r.path).read_bytes() == (tmp_path / "out" / r.path).read_bytes()


def test_materialize_counts_and_failures(tmp_path):
    recs = make_records(6, 6)
    ext = tmp_path / "ext"
    write_fixture(tmp_path / "in", recs[:-1], rate=22050)
    write_fixture(ext, recs[:-1])
    plan = corpus.build_mix_plan(recs, 1.0, 5, small_roster())
    report = corpus.materialize(plan, tmp_path / "in", tmp_path / "out", {"x": ext, "y": ext}, jobs=3)
    fails = report.failures()
    assert [f.utt_id for f in fails] == [recs[-1].utt_id]
    assert "missing audio" in fails[0].detail
    expected = plan.member_counts() - Counter(f.member for f in fails)
    assert report.counts() == expected
    written = sorted(p.relative_to(tmp_path / "out").as_posix() for p in (tmp_path / "out").rglob("*.wav"))
    assert len(written) == len(recs) - len(fails)
    for p in written:
        assert audio.read_wav(tmp_path / "out" / p).sample_rate == 16000
    assert "mean_segmental_snr_db" in report.to_tsv()


def test_materialize_twice_identical(tmp_path):
    recs = make_records(5, 5)
    write_fixture(tmp_path / "in", recs)
    plan = corpus.build_mix_plan(recs, 0.5, 1, Roster((
        Group("a", [RosterMember("dsss", CodecConfig("dsss")), RosterMember("lsb", CodecConfig("lsb"))]),
        Group("b", [RosterMember("phase", CodecConfig("phase"))]))))
    corpus.materialize(plan, tmp_path / "in", tmp_path / "o1", jobs=1)
    corpus.materialize(plan, tmp_path / "in", tmp_path / "o2", jobs=4)
    cmp = filecmp.dircmp(tmp_path / "o1", tmp_path / "o2")
    for r in recs:
        assert (tmp_path / "o1" / r.path).read_bytes() == (tmp_path / "o2" / r.path).read_bytes()
    assert not cmp.left_only and not cmp.right_only
