import numpy as np
import pytest

from conftest import flood_fill_components
from fdaseg.phantom import (NoiseSpec, PhantomError, PhantomSpec, corrupt_to_noisy,
                            generate_phantom, load_centerline, load_sample,
                            save_centerline, save_sample)


def test_depth1_is_single_tube():
    s = generate_phantom(PhantomSpec(depth=1, seed=3))
    assert len(s.centerline) == 1
    assert s.centerline[0].generation == 0
    assert s.mask.data.sum() > 0


@pytest.mark.parametrize("depth,shape", [(1, (32, 32, 32)), (2, (32, 32, 32)),
                                         (3, (32, 32, 32)), (4, (64, 48, 48))])
def test_branch_count_closed_form(depth, shape):
    s = generate_phantom(PhantomSpec(shape=shape, depth=depth, seed=9))
    assert len(s.centerline) == 2 ** depth - 1


def test_same_seed_bit_identical():
    spec = PhantomSpec(depth=3, seed=21)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.mask.data, b.mask.data)
    for ba, bb in zip(a.centerline, b.centerline):
        assert np.array_equal(ba.points, bb.points)


def test_different_seed_differs():
    a = generate_phantom(PhantomSpec(depth=3, seed=1))
    b = generate_phantom(PhantomSpec(depth=3, seed=2))
    assert not np.array_equal(a.mask.data, b.mask.data)


def test_centerline_points_inside_mask(depth3_phantom):
    m = depth3_phantom.mask.data
    for branch in depth3_phantom.centerline:
        vox = np.rint(branch.points).astype(int)
        assert (m[vox[:, 0], vox[:, 1], vox[:, 2]] == 1).all()


def test_mask_single_26_component(depth3_phantom):
    _, n = flood_fill_components(depth3_phantom.mask.data, 26)
    assert n == 1


def test_generations_run_root_to_leaves(depth3_phantom):
    gens = sorted(b.generation for b in depth3_phantom.centerline)
    assert gens == [0, 1, 1, 2, 2, 2, 2]


def test_corrupt_identity_when_disabled(depth2_phantom):
    noise = NoiseSpec(n_patches=0, gaussian_noise_sigma=0.0, seed=4)
    out = corrupt_to_noisy(depth2_phantom, noise)
    assert np.array_equal(out.image.data, depth2_phantom.image.data)


def test_corrupt_preserves_anatomy(depth2_phantom):
    out = corrupt_to_noisy(depth2_phantom, NoiseSpec(seed=4))
    assert np.array_equal(out.mask.data, depth2_phantom.mask.data)
    for ba, bb in zip(out.centerline, depth2_phantom.centerline):
        assert np.array_equal(ba.points, bb.points)
        assert ba.generation == bb.generation


def test_corrupt_changes_image(depth2_phantom):
    out = corrupt_to_noisy(depth2_phantom,
                           NoiseSpec(n_patches=3, gaussian_noise_sigma=0.0, seed=4))
    assert np.abs(out.image.data - depth2_phantom.image.data).mean() > 0


def test_corrupt_deterministic(depth2_phantom):
    noise = NoiseSpec(seed=12)
    a = corrupt_to_noisy(depth2_phantom, noise)
    b = corrupt_to_noisy(depth2_phantom, noise)
    assert np.array_equal(a.image.data, b.image.data)


def test_spec_validation():
    with pytest.raises(PhantomError):
        PhantomSpec(depth=0)
    with pytest.raises(PhantomError):
        PhantomSpec(root_radius=0.5)
    with pytest.raises(PhantomError):
        PhantomSpec(radius_decay=1.0)
    with pytest.raises(PhantomError, match="underflow"):
        PhantomSpec(depth=6, root_radius=1.0, radius_decay=0.75)
    with pytest.raises(PhantomError, match="unknown"):
        PhantomSpec.from_dict({"depth": 2, "flavor": "mint"})


def test_tree_exits_bounds():
    with pytest.raises(PhantomError, match="bounds"):
        generate_phantom(PhantomSpec(shape=(16, 16, 16), depth=4,
                                     root_radius=4.0, radius_decay=0.9, seed=0))


def test_noise_spec_validation():
    with pytest.raises(PhantomError):
        NoiseSpec(n_patches=-1)
    with pytest.raises(PhantomError):
        NoiseSpec(patch_radius_range=(5.0, 2.0))
    with pytest.raises(PhantomError):
        NoiseSpec(blur_sigma=-1.0)


def test_sample_save_load_roundtrip(tmp_path, depth2_phantom):
    save_sample(depth2_phantom, str(tmp_path / "s0"))
    back = load_sample(str(tmp_path / "s0"))
    assert np.array_equal(back.image.data, depth2_phantom.image.data)
    assert np.array_equal(back.mask.data, depth2_phantom.mask.data)
    assert len(back.centerline) == len(depth2_phantom.centerline)
    for ba, bb in zip(back.centerline, depth2_phantom.centerline):
        assert np.allclose(ba.points, bb.points)
        assert ba.generation == bb.generation


def test_centerline_json_schema(tmp_path, depth2_phantom):
    path = str(tmp_path / "centerline.json")
    save_centerline(depth2_phantom.centerline, path)
    import json
    payload = json.load(open(path))
    assert isinstance(payload, list)
    for entry in payload:
        assert set(entry) == {"generation", "points"}
        assert all(len(p) == 3 for p in entry["points"])
    back = load_centerline(path)
    assert len(back) == len(depth2_phantom.centerline)
