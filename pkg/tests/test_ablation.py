import math

import pytest

from raydiff.ablation import ROWS, AblationConfig, RowResult, directional_checks, run_ablation

TINY = AblationConfig(
    scenes=4, views=5, image_size=16, channels=(8, 16), stage1_steps=3, stage2_steps=2, batch_size=2,
    sample_steps=3, orbit_frames=6, window=3, max_test_scenes=1,
)


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    return out, run_ablation(TINY, out, log=lambda s: None)


def test_table_has_every_row(report):
    out, rep = report
    lines = (out / "ablation_table.csv").read_text().splitlines()
    assert lines[0].split(",")[:5] == ["row", "mode", "attention", "noise", "psnr"]
    assert [l.split(",")[0] for l in lines[1:]] == list(ROWS)
    for r in rep.rows.values():
        assert all(math.isfinite(x) for x in r.psnr + r.ssim + r.perceptual + r.pplc)
        assert len(r.psnr) == TINY.views - 1 and len(r.pplc) == 1


def test_shared_noise_row_reuses_attention_weights(report):
    _, rep = report
    assert rep.rows["E"].checkpoint_sha256 == rep.rows["F"].checkpoint_sha256
    assert rep.rows["D"].checkpoint_sha256 != rep.rows["E"].checkpoint_sha256
    names = [c.name for c in rep.checks]
    assert "F reuses E weights" in names and len(names) == 4


def test_attention_row_requires_base(tmp_path):
    with pytest.raises(ValueError, match="row D"):
        run_ablation(TINY, tmp_path, rows=("E",), log=lambda s: None)


def test_directional_checks_logic():
    rows = {k: RowResult(k) for k in "ABEF"}
    rows["A"].psnr, rows["B"].psnr = [10.0], [11.0]
    rows["E"].pplc, rows["F"].pplc = [1.0] * 10, [0.5] * 9 + [2.0]
    rows["E"].checkpoint_sha256 = rows["F"].checkpoint_sha256 = "ab"
    got = {c.name: c.passed for c in directional_checks(rows)}
    assert got == {"B beats A on held-out PSNR": True, "F lowers PPLC on most orbits": True, "F reuses E weights": True}
    rows["F"].pplc = [0.5] * 8 + [2.0] * 2
    assert not {c.name: c.passed for c in directional_checks(rows)}["F lowers PPLC on most orbits"]
