import numpy as np
import pytest

from hiermil import evaluation as ev
from hiermil.data import SubBagBatch
from hiermil.errors import ContractViolationError
from hiermil.mil import ForwardTrace


def make_pair(instance_attention, subbag_attention, slice_indices, origins,
              r=4, c=4, shape=(16, 16), volume_id="v0"):
    """Hand-built trace + batch for direct heatmap checks."""
    ia = np.asarray(instance_attention, dtype=float)
    M, K = ia.shape
    trace = ForwardTrace(
        embeddings=np.zeros((M, K, 2)), instance_attention=ia,
        subbag_predictions=np.full(M, 0.5), pooled=np.zeros((M, 2)),
        distilled=np.zeros((M, 2)), subbag_attention=np.asarray(subbag_attention, float),
        bag_prediction=0.5, volume_id=volume_id)
    batch = SubBagBatch(
        patches=np.zeros((M, K, r, c), dtype=np.float32),
        slice_indices=np.asarray(slice_indices), origins=np.asarray(origins),
        volume_id=volume_id, label=1, in_plane_shape=shape)
    return trace, batch


def test_single_patch_map(tmp_path):
    trace, batch = make_pair([[1.0]], [1.0], [3], [[[5, 6]]])
    rec = ev.export_heatmap(trace, batch, tmp_path)
    m = rec.maps[3]
    assert m[5:9, 6:10].min() == 1.0
    outside = m.copy()
    outside[5:9, 6:10] = 0
    assert outside.max() == 0.0


def test_two_patch_ratio_preserved(tmp_path):
    # non-overlapping 0.75/0.25 with full sub-bag attention: 1.0 vs 1/3
    trace, batch = make_pair([[0.75, 0.25]], [1.0], [0], [[[0, 0], [8, 8]]])
    rec = ev.export_heatmap(trace, batch, tmp_path)
    m = rec.maps[0]
    assert m[0:4, 0:4].max() == pytest.approx(1.0)
    assert m[8:12, 8:12].max() == pytest.approx(1 / 3)


def test_mass_conservation_before_normalisation(tmp_path):
    gen = np.random.default_rng(5)
    M, K, r, c = 3, 6, 5, 5
    ia = gen.dirichlet(np.ones(K), size=M)
    sa = gen.dirichlet(np.ones(M))
    origins = gen.integers(0, 16 - 5, size=(M, K, 2))
    trace, batch = make_pair(ia, sa, [2, 7, 9], origins, r=r, c=c)
    rec = ev.export_heatmap(trace, batch, tmp_path)

    # brute-force expected mass per slice: sum over pixels of avg weight
    for m_idx, s in enumerate((2, 7, 9)):
        acc = np.zeros((16, 16))
        cov = np.zeros((16, 16))
        for k in range(K):
            i, j = origins[m_idx, k]
            acc[i:i + r, j:j + c] += ia[m_idx, k] * sa[m_idx]
            cov[i:i + r, j:j + c] += 1
        expect = (acc[cov > 0] / cov[cov > 0]).sum()
        assert rec.pre_norm_mass[s] == pytest.approx(expect, abs=1e-6)


def test_argmax_inside_max_attention_patch(tmp_path):
    gen = np.random.default_rng(11)
    M, K = 2, 4
    ia = gen.dirichlet(np.ones(K), size=M)
    sa = gen.dirichlet(np.ones(M))
    origins = gen.integers(0, 12, size=(M, K, 2))
    trace, batch = make_pair(ia, sa, [1, 5], origins)
    rec = ev.export_heatmap(trace, batch, tmp_path)
    mp = rec.max_patch
    m = rec.maps[mp["slice"]]
    am = np.unravel_index(np.argmax(m), m.shape)
    assert mp["row"] <= am[0] < mp["row"] + mp["rows"]
    assert mp["col"] <= am[1] < mp["col"] + mp["cols"]
    # recorded max patch equals argmax over the per-patch rows
    best_row = rec.argmax_row()
    assert best_row[1] == mp["slice"]
    assert (best_row[2], best_row[3]) == (mp["row"], mp["col"])


def test_output_files_and_pgm_format(tmp_path):
    trace, batch = make_pair([[0.6, 0.4], [0.5, 0.5]], [0.7, 0.3], [4, 8],
                             [[[0, 0], [4, 4]], [[2, 2], [6, 6]]])
    rec = ev.export_heatmap(trace, batch, tmp_path)
    pgms = sorted(tmp_path.glob("*.pgm"))
    assert [p.name for p in pgms] == ["v0_slice004.pgm", "v0_slice008.pgm"]
    blob = pgms[0].read_bytes()
    assert blob.startswith(b"P5\n16 16\n255\n")
    assert len(blob) == len(b"P5\n16 16\n255\n") + 16 * 16
    csv_text = (tmp_path / "v0_patches.csv").read_text().splitlines()
    assert csv_text[0].split(",") == ["subbag_index", "slice", "row_offset", "col_offset",
                                      "rows", "cols", "instance_attention", "subbag_attention"]
    assert len(csv_text) == 1 + 4


def test_mismatched_volume_ids_rejected(tmp_path):
    trace, batch = make_pair([[1.0]], [1.0], [0], [[[0, 0]]])
    trace.volume_id = "other"
    with pytest.raises(ContractViolationError):
        ev.export_heatmap(trace, batch, tmp_path)
