import numpy as np
import pytest

from src.edges import detect_edges, distance_field, edge_map_from_mask


def _step(width=32, height=32, column=16, contrast=1.0):
    img = np.zeros((height, width))
    img[:, column:] = contrast
    return img


def test_step_gives_one_pixel_wide_line():
    em = detect_edges(_step())
    assert (em.mask.sum(axis=1) == 1).all()
    cols = np.nonzero(em.mask)[1]
    assert set(cols) <= {15, 16}
    assert em.strength.max() == pytest.approx(1.0)


def test_isolated_weak_edges_removed():
    img = _step(column=8)
    img[:, 24:] += 0.15
    em = detect_edges(img, low=0.1, high=0.2)
    assert em.mask[:, 6:10].any(axis=1).all()
    assert not em.mask[:, 20:].any()


def test_weak_edges_connected_to_strong_kept():
    img = np.zeros((32, 32))
    img[:16, 16:] = 1.0
    img[16:, 16:] = 0.15
    em = detect_edges(img, low=0.1, high=0.2)
    assert em.mask[28, 14:18].any()
    strict = detect_edges(img, low=0.2, high=0.2)
    assert not strict.mask[28, 14:18].any()


def test_flat_image_has_no_edges():
    em = detect_edges(np.full((10, 12), 0.3))
    assert not em.mask.any()
    assert np.isinf(em.distance).all()
    assert (em.nearest == -1).all()


def test_rgb_uint8_input():
    img = np.zeros((20, 20, 3), np.uint8)
    img[:, 10:] = 200
    assert detect_edges(img).mask.any()


def test_threshold_order():
    with pytest.raises(ValueError):
        detect_edges(_step(), low=0.5, high=0.2)


def test_disk_edges_follow_the_circle():
    radius, cy, cx = 20.0, 37.6, 40.3
    # 8 x 8 supersampled coverage
    sub = (np.arange(8) + 0.5) / 8.0 - 0.5
    rows, cols = np.mgrid[0:80, 0:80].astype(np.float64)
    r = rows[..., None, None] + sub[:, None]
    c = cols[..., None, None] + sub[None, :]
    img = (np.hypot(r - cy, c - cx) <= radius).mean(axis=(2, 3))
    em = detect_edges(img)
    er, ec = np.nonzero(em.mask)
    assert len(er) > 90
    assert np.abs(np.hypot(er - cy, ec - cx) - radius).max() <= 1.0


def test_distance_field_matches_brute_force(rng):
    mask = rng.random((15, 17)) < 0.05
    mask[3, 4] = True
    dist, nearest = distance_field(mask)
    edge = np.argwhere(mask)
    for r in range(15):
        for c in range(17):
            d = np.sqrt(((edge - [r, c]) ** 2).sum(axis=1))
            assert dist[r, c] == pytest.approx(d.min())
            assert mask[tuple(nearest[r, c])]
            assert np.hypot(*(nearest[r, c] - [r, c])) == pytest.approx(d.min())


def test_edge_map_from_mask_defaults():
    mask = np.zeros((5, 5), bool)
    mask[2, 2] = True
    em = edge_map_from_mask(mask)
    assert em.distance[2, 2] == 0.0
    assert em.distance[0, 0] == pytest.approx(np.sqrt(8.0))
    assert em.strength.sum() == 1.0
