import numpy as np
import pytest

from oracles import eer_midpoint_oracle
from wmspoof import evaluation as ev
from wmspoof.errors import InvalidInputError, ParseError, UndefinedMetricError, ValidationError


def sset(bona, spoof):
    return ev.ScoreSet.from_arrays(list(bona) + list(spoof),
                                   ["bonafide"] * len(bona) + ["spoof"] * len(spoof))


# ---------------------------------------------------------------- EER

def test_eer_examples():
    assert ev.compute_eer(sset([0.9, 0.8], [0.1, 0.2])).eer == 0.0
    assert ev.compute_eer(sset([0.9, 0.8, 0.7], [0.1, 0.2, 0.75])).eer == pytest.approx(100 / 3)
    same = [0.1, 0.4, 0.4, 0.9]
    assert ev.compute_eer(sset(same, same)).eer == 50.0
    with pytest.raises(InvalidInputError):
        ev.compute_eer(sset([0.1, 0.2], []))


def _random_set(rng):
    n_b = int(rng.integers(1, 25))
    n_s = int(rng.integers(1, 25))
    # coarse grid so ties between and within classes are common
    grid = int(rng.choice([4, 16, 1000]))
    return (rng.integers(-grid, grid, n_b) / 8).tolist(), (rng.integers(-grid, grid, n_s) / 8).tolist()


@pytest.mark.parametrize("seed", range(50))
def test_eer_matches_oracle(seed):
    bona, spoof = _random_set(np.random.default_rng(seed))
    assert ev.compute_eer(sset(bona, spoof)).eer == float(eer_midpoint_oracle(bona, spoof) * 100)


@pytest.mark.parametrize("seed", range(20))
def test_eer_invariances(seed):
    bona, spoof = _random_set(np.random.default_rng(100 + seed))
    base = ev.compute_eer(sset(bona, spoof)).eer
    warped = ev.compute_eer(sset([2 * s + 7 for s in bona], [2 * s + 7 for s in spoof])).eer
    swapped = ev.compute_eer(sset([-s for s in spoof], [-s for s in bona])).eer
    assert warped == base
    assert swapped == base


def test_eer_bounds_and_threshold():
    res = ev.compute_eer(sset([3, 4, 5], [1, 2, 3.5]))
    assert 0 <= res.eer <= 100
    assert res.threshold in (3.0, 3.5, 4.0)


# ---------------------------------------------------------------- degradation

def test_relative_degradation():
    assert ev.relative_degradation(0.88, 0.73) == 20.55
    assert ev.relative_degradation(9.90, 7.32) == 35.25
    assert ev.relative_degradation(5.0, 5.0) == 0.0
    with pytest.raises(UndefinedMetricError):
        ev.relative_degradation(1.0, 0.0)


def test_round_half_up():
    assert ev.round2(0.125) == 0.13
    assert ev.round2(2.675) == 2.68  # the binary value is below 2.675; repr keeps the decimal intent
    assert ev.round2(-0.125) == -0.13


# ---------------------------------------------------------------- tables

def test_ratio_table_text_and_csv():
    cells = {("LA21", r): v for r, v in zip(ev.RATIOS, (0.88, 0.83, 0.79, 0.73))}
    table = ev.emit_ratio_table(cells)
    assert table.delta == {"LA21": 20.55}
    text = table.to_text()
    assert "20.55" in text and text.splitlines()[0].split()[:2] == ["dataset", "75%"]
    back = ev.parse_ratio_csv(table.to_csv())
    assert back[("LA21", "75%")] == 0.88 and back[("LA21", "75% delta(%)")] == 20.55


def test_ratio_table_minimal_and_errors():
    one = ev.emit_ratio_table({("ITW", 0.5): 7.83}, with_delta=False)
    assert one.body() == [["ITW", "7.83"]]
    with pytest.raises(ValidationError):
        ev.emit_ratio_table({("ITW", 0.5): 7.83})
    with pytest.raises(ValidationError):
        ev.emit_ratio_table({("ITW", 0.6): 7.83}, with_delta=False)


# ---------------------------------------------------------------- score files

def test_parse_scores_three_column(tmp_path):
    f = tmp_path / "s.txt"
    f.write_text("u1 0.93 bonafide\nu2 -1.5 spoof\n")
    s = ev.parse_scores(f)
    assert s.trials[0] == ev.Trial("u1", 0.93, "bonafide")
    f.write_text("u1 NaN bonafide\n")
    with pytest.raises(ParseError):
        ev.parse_scores(f)
    f.write_text("u1 0.5 bonafide\nu2 abc spoof\n")
    with pytest.raises(ParseError, match="line 2"):
        ev.parse_scores(f)


def test_parse_scores_sidecar_join(tmp_path):
    three = tmp_path / "three.txt"
    three.write_text("u1 0.93 bonafide\nu2 -1.5 spoof\n")
    two = tmp_path / "two.txt"
    two.write_text("u1 0.93\nu2 -1.5\n")
    side = tmp_path / "labels.tsv"
    side.write_text("u1\tx/u1.wav\tbonafide\nu2\tx/u2.wav\tspoof\n")
    assert ev.parse_scores(two, side) == ev.parse_scores(three)
    cm = tmp_path / "cm.txt"
    cm.write_text("LA_0001 u1 - - bonafide\nLA_0002 u2 - A07 spoof\n")
    assert ev.parse_scores(two, cm) == ev.parse_scores(three)
    side.write_text("u1\tx/u1.wav\tbonafide\n")
    with pytest.raises(ValidationError):
        ev.parse_scores(two, side)
    side.write_text("u1\tx/u1.wav\tbonafide\nu2\tx/u2.wav\tspoof\nu3\tx/u3.wav\tspoof\n")
    with pytest.raises(ValidationError):
        ev.parse_scores(two, side)


def test_write_scores_roundtrip(tmp_path):
    s = sset([0.1, 0.2], [0.3])
    ev.write_scores(s, tmp_path / "o.txt")
    assert ev.parse_scores(tmp_path / "o.txt") == s
