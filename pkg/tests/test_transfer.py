import numpy as np
import pytest

from ndr_shkf import chaos
from ndr_shkf import kalman as kf
from ndr_shkf import policy as pl
from ndr_shkf.errors import OffsetOutOfRange
from ndr_shkf.filter import NdrFilter
from ndr_shkf.transfer import TABLE_OFFSETS, TransferMap, embed_cross_domain, embed_features, extract_adaptation


def test_index_at_origin():
    tm = TransferMap(0, 0)
    np.testing.assert_array_equal(tm.index(), [0, 1, 6, 7, 12, 13, 18, 19, 24, 25])
    assert tm.dst_dim == 126


def test_index_at_far_corner():
    tm = TransferMap(16, 4)
    idx = tm.index()
    np.testing.assert_array_equal(idx[:4], [4, 5, 10, 11])
    assert idx[-1] == 125


@pytest.mark.parametrize("x_off, z_off", TABLE_OFFSETS)
def test_embedding_round_trip(x_off, z_off):
    tm = TransferMap(x_off, z_off)
    rng = np.random.default_rng(x_off * 7 + z_off)
    nu_w, l, K = rng.normal(size=(2, 1)), rng.normal(size=(2, 1)), rng.normal(size=(3, 2))
    y = embed_cross_domain(tm, nu_w, l, K).data
    assert y.shape == (126, 1)
    src = np.concatenate([nu_w, l, K.reshape(-1, 1)])
    np.testing.assert_array_equal(tm.selection().T @ y, src)
    assert np.count_nonzero(y) == 10
    np.testing.assert_array_equal(y[tm.index()], src)
    Kd = y[12:].reshape(19, 6)
    np.testing.assert_array_equal(Kd[x_off : x_off + 3, z_off : z_off + 2], K)
    np.testing.assert_array_equal(embed_features(tm, src).data, y)


@pytest.mark.parametrize("x_off, z_off", TABLE_OFFSETS)
def test_extract_reads_active_slots(x_off, z_off):
    tm = TransferMap(x_off, z_off)
    d = np.arange(25.0).reshape(25, 1)
    dQ, dR = extract_adaptation(d, tm)
    np.testing.assert_array_equal(dQ.data[:, 0], np.arange(x_off, x_off + 3))
    np.testing.assert_array_equal(dR.data[:, 0], 19 + np.arange(z_off, z_off + 2))


@pytest.mark.parametrize("x_off, z_off", [(0, 5), (17, 0), (-1, 0), (0, -1), (20, 4)])
def test_offsets_out_of_range(x_off, z_off):
    with pytest.raises(OffsetOutOfRange):
        TransferMap(x_off, z_off)


def test_transferred_policy_drives_a_small_filter():
    arch = pl.PolicyArch.uav()
    w = pl.init_weights(arch, np.random.default_rng(0))
    model = kf.ChaosModel()
    filt = NdrFilter(model, w, arch, transfer=TransferMap(4, 1))
    ep = chaos.make_episodes(model.params, range(2), 30, seed=0)
    s = filt.init(ep.x_hat0, ep.P0)
    for k in range(30):
        s = filt.step(s, ep.measurements[:, k])
    assert np.isfinite(s.fs.x.data).all() and s.fs.q.shape == (2, 3, 1) and s.fs.r.shape == (2, 2, 1)
