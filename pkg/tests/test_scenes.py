import math

import numpy as np
import pytest

from csglab.errors import ConfigError, ContractError
from csglab.imageio import from_uint8, read_pgm, read_ppm, to_uint8, write_pgm, write_ppm
from csglab.scenes import (
    BG_CLASSES,
    NULL_TOKEN,
    SHAPE_CLASSES,
    SHAPE_COLORS,
    Prompt,
    build_dataset,
    decode_prompt,
    encode_prompt,
    generate_scene,
    iter_scenes,
    load_dataset,
    render_background,
    scene_seeds,
)


def test_generation_is_deterministic():
    a = generate_scene("solid_warm", "disc", 11, 12)
    b = generate_scene("solid_warm", "disc", 11, 12)
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.fg_mask, b.fg_mask)
    assert a.meta == b.meta


def test_disc_area_within_rasterisation_bounds():
    lo, hi = math.pi * 9 - 2 * math.pi * 3, math.pi * 25 + 2 * math.pi * 5
    for seed in range(300):
        n = int(generate_scene("checker", "disc", seed, None).fg_mask.sum())
        assert lo <= n <= hi


@pytest.mark.parametrize("shape", SHAPE_CLASSES)
def test_mask_is_partial_and_leaves_most_background(shape):
    for seed in range(200):
        m = generate_scene(BG_CLASSES[seed % 4], shape, seed, None).fg_mask
        assert 0 < m.sum() < m.size
        assert (~m).mean() >= 0.6


def test_mask_is_exactly_the_painted_region():
    # without noise, a pixel shows the shape colour iff it is in the mask
    for bg in BG_CLASSES:
        for shape in SHAPE_CLASSES:
            sc = generate_scene(bg, shape, 5, None)
            painted = np.all(sc.image == np.clip(SHAPE_COLORS[shape], -1, 1), axis=-1)
            assert np.array_equal(painted, sc.fg_mask)
            assert np.array_equal(sc.image[~sc.fg_mask], render_background(bg)[~sc.fg_mask])


def test_values_in_range():
    for _, _, sc in iter_scenes(50, seed=3):
        assert sc.image.min() >= -1 and sc.image.max() <= 1
        assert sc.image.shape == (16, 16, 3)


def test_prompt_encoding():
    a, b = encode_prompt("solid_warm", "disc"), encode_prompt("solid_warm", "square")
    assert a.L == 2 and a.k == 1
    assert a.tokens[0] == b.tokens[0] and a.tokens[1] != b.tokens[1]
    for bg in BG_CLASSES:
        for shape in SHAPE_CLASSES:
            p = encode_prompt(bg, shape)
            assert decode_prompt(p) == (bg, shape)
            assert NULL_TOKEN not in p.tokens
    with pytest.raises(ConfigError):
        encode_prompt("plaid", "disc")


def test_prompt_contract():
    with pytest.raises(ContractError):
        Prompt((), 0)
    with pytest.raises(ContractError):
        Prompt((1, 2), 2)
    p = Prompt((3, 6), 1)
    assert p.null().tokens == (0, 0) and p.null().is_null()
    assert p.replace(1, 5).tokens == (3, 5)


def test_scene_seeds_are_distinct():
    seeds = {scene_seeds(0, i) for i in range(500)}
    assert len(seeds) == 500


def test_uniform_mix_covers_every_pair():
    counts = {}
    for _, _, sc in iter_scenes(1200, seed=0):
        key = (sc.meta["bg_class"], sc.meta["shape_class"])
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 12 and min(counts.values()) >= 60


def test_dataset_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    build_dataset(10, a, seed=4)
    build_dataset(10, b, seed=4)
    lines = (a / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 10
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()
    data = load_dataset(a)
    assert data.images.shape == (10, 16, 16, 3)
    assert data.masks.shape == (10, 16, 16)
    assert list(data.splits).count("val") == 1
    for i in range(10):
        assert read_pgm(a / f"scene_{i:05d}_mask.pgm").shape == read_ppm(a / f"scene_{i:05d}.ppm").shape[:2]


def test_class_mix_restricts_pairs():
    mix = {"stripes/cross": 1.0}
    assert {(s.meta["bg_class"], s.meta["shape_class"]) for _, _, s in iter_scenes(20, mix, 1)} == {("stripes", "cross")}
    with pytest.raises(ConfigError):
        list(iter_scenes(5, {"stripes/star": 1.0}))


def test_netpbm_round_trip(tmp_path, rng):
    img = rng.uniform(-1, 1, (5, 7, 3))
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert np.max(np.abs(back - img)) <= 1 / 255 + 1e-12
    assert np.array_equal(to_uint8(from_uint8(to_uint8(img))), to_uint8(img))
    mask = rng.random((4, 6)) > 0.5
    write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm") > 127, mask)
    head = (tmp_path / "x.ppm").read_bytes()[:11]
    assert head.startswith(b"P6\n7 5\n255\n")
