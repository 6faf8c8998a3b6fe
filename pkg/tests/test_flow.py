"""Flow provider accuracy, pair enumeration boundaries, and the disk cache."""

import numpy as np
import pytest

from vsrpp import Tensor
from vsrpp.errors import ClipFormatError
from vsrpp.flow import (
    ConvFlowProvider,
    FlowCache,
    PyramidalFlowProvider,
    ZeroFlowProvider,
    flow_pairs,
    load_flow,
    save_flow,
)


def blurred_noise(rng, h, w, sigma=2.0):
    x = rng.standard_normal((h, w))
    m = min(8, (min(h, w) - 1) // 2)
    k = np.exp(-0.5 * (np.arange(-m, m + 1) / sigma) ** 2)
    k /= k.sum()
    x = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, x)
    x = np.apply_along_axis(lambda c: np.convolve(c, k, "same"), 0, x)
    x = (x - x.min()) / (x.max() - x.min())
    return x.astype(np.float32)


def as_frame(plane):
    return Tensor(np.broadcast_to(plane, (1, 3) + plane.shape).copy())


def shifted_pair(rng, h, w, tx, ty, margin=10):
    canvas = blurred_noise(rng, h + 2 * margin, w + 2 * margin)
    ref = canvas[margin:margin + h, margin:margin + w]
    nbr = canvas[margin - ty:margin - ty + h, margin - tx:margin - tx + w]
    return as_frame(ref), as_frame(nbr)


def test_identical_frames_near_zero_flow(rng):
    plane = blurred_noise(rng, 48, 48)
    f = PyramidalFlowProvider().estimate(as_frame(plane), as_frame(plane))
    assert np.abs(f.data).max() < 0.1


def test_constant_frames_exact_zero_flow():
    c = Tensor(np.full((1, 3, 32, 32), 0.42, np.float32))
    f = PyramidalFlowProvider().estimate(c, c)
    assert np.all(f.data == 0.0)


@pytest.mark.parametrize("shift", [(3, 0), (-4, 2), (0, -4), (1, 1)])
def test_integer_translation_recovered(rng, shift):
    tx, ty = shift
    ref, nbr = shifted_pair(rng, 64, 64, tx, ty)
    f = PyramidalFlowProvider().estimate(ref, nbr).data
    inner = f[:, :, 8:-8, 8:-8]
    assert abs(np.median(inner[0, 0]) - tx) <= 0.5
    assert abs(np.median(inner[0, 1]) - ty) <= 0.5


def test_endpoint_error_over_shift_sweep():
    errs = []
    for seed, (tx, ty) in enumerate([(1, 0), (2, -1), (-3, 3), (4, 0), (0, 4),
                                     (-2, -2), (3, 2), (-4, -1)]):
        rng = np.random.default_rng(900 + seed)
        ref, nbr = shifted_pair(rng, 64, 64, tx, ty)
        f = PyramidalFlowProvider().estimate(ref, nbr).data
        inner = f[:, :, 8:-8, 8:-8]
        epe = np.sqrt((inner[0, 0] - tx) ** 2 + (inner[0, 1] - ty) ** 2)
        errs.append(np.median(epe))
    assert max(errs) <= 0.5


def test_small_frames_reduce_levels_with_warning(rng):
    small = as_frame(blurred_noise(rng, 10, 10))
    with pytest.warns(UserWarning):
        f = PyramidalFlowProvider(levels=5).estimate(small, small)
    assert f.shape == (1, 2, 10, 10)


def test_magnitude_cap(rng):
    ref, nbr = shifted_pair(rng, 48, 48, 2, 0)
    f = PyramidalFlowProvider(max_magnitude=1.0).estimate(ref, nbr).data
    assert np.abs(f).max() <= 1.0


# ---------------------------------------------------------------------------
# flow_pairs boundary rules


def make_clip(rng, t, h=24, w=24):
    return [as_frame(blurred_noise(rng, h, w)) for _ in range(t)]


def test_single_frame_all_flows_zero(rng):
    frames = make_clip(rng, 1)
    fp = flow_pairs(frames, "forward", PyramidalFlowProvider())
    assert np.all(fp.first[0].data == 0.0)
    assert np.all(fp.second[0].data == 0.0)


def test_three_frames_forward_boundaries(rng):
    frames = make_clip(rng, 3)
    fp = flow_pairs(frames, "forward", ZeroFlowProvider())
    # i=0 has no predecessors at all; i=1 lacks the second-order source
    assert np.all(fp.first[0].data == 0.0)
    assert np.all(fp.second[0].data == 0.0)
    assert np.all(fp.second[1].data == 0.0)
    assert fp.first[2].shape == (1, 2, 24, 24)
    assert fp.second[2].shape == (1, 2, 24, 24)


def test_backward_direction_mirrors_indices(rng):
    frames = make_clip(rng, 4)
    fp = flow_pairs(frames, "backward", ZeroFlowProvider())
    assert np.all(fp.first[3].data == 0.0)
    assert np.all(fp.second[3].data == 0.0)
    assert np.all(fp.second[2].data == 0.0)


def test_constant_velocity_second_order_doubles_first(rng):
    h = w = 64
    margin = 16
    canvas = blurred_noise(rng, h + 2 * margin, w + 2 * margin)
    vx = 2
    frames = []
    for i in range(3):
        sl = canvas[margin:margin + h, margin - i * vx:margin - i * vx + w]
        frames.append(as_frame(sl))
    fp = flow_pairs(frames, "forward", PyramidalFlowProvider())
    inner = (0, 0, slice(10, -10), slice(10, -10))
    s1 = np.median(fp.first[2].data[inner])
    s2 = np.median(fp.second[2].data[inner])
    assert abs(s2 - 2.0 * s1) <= 1.0


def test_provider_swap_keeps_shapes(rng):
    frames = make_clip(rng, 3)
    a = flow_pairs(frames, "forward", PyramidalFlowProvider())
    b = flow_pairs(frames, "forward", ZeroFlowProvider())
    for fa, fb in zip(a.first + a.second, b.first + b.second):
        assert fa.shape == fb.shape


def test_conv_provider_trainable_and_zero_start(rng):
    prov = ConvFlowProvider(seed=3)
    assert prov.trainable
    assert len(prov.parameters()) == 6
    frames = make_clip(rng, 2)
    f = prov.estimate(frames[0], frames[1])
    assert f.shape == (1, 2, 24, 24)
    assert np.all(f.data == 0.0)  # final layer starts at zero
    assert f.requires_grad


# ---------------------------------------------------------------------------
# disk cache format


def test_flow_file_round_trip(tmp_path, rng):
    arr = rng.standard_normal((2, 9, 7)).astype(np.float32)
    path = tmp_path / "c0_forward_000003_1.flow"
    save_flow(path, arr, "forward", 3, 1)
    back, direction, i, p = load_flow(path)
    assert np.array_equal(back, arr)
    assert (direction, i, p) == ("forward", 3, 1)
    # header is 8 little-endian int32 values before the payload
    raw = path.read_bytes()
    header = np.frombuffer(raw[:32], dtype="<i4")
    assert header[0] == int.from_bytes(b"VFLW", "little")
    assert list(header[1:]) == [1, 2, 9, 7, 0, 3, 1]
    assert len(raw) == 32 + 2 * 9 * 7 * 4


def test_flow_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.flow"
    path.write_bytes(b"notaflowfile" * 4)
    with pytest.raises(ClipFormatError):
        load_flow(path)


def test_flow_cache_get_or_compute(tmp_path, rng):
    cache = FlowCache(str(tmp_path))
    calls = []

    def compute():
        calls.append(1)
        return np.ones((2, 4, 4), np.float32)

    a = cache.get_or_compute("clip", 2, 1, "backward", compute)
    b = cache.get_or_compute("clip", 2, 1, "backward", compute)
    assert np.array_equal(a, b)
    assert len(calls) == 1
