"""Smoke test for the mmvs_py extension.

Build it first:
    cargo build -p mmvs-py --release
then run:
    python3 python/smoke_test.py [path/to/libmmvs_py.so]
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("mmvs_py", str(path))
    spec = importlib.util.spec_from_file_location("mmvs_py", str(path), loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    lib = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "target" / "release" / "libmmvs_py.so"
    m = load(lib)

    cam = m.Camera.centered(50.0, 32, 24)
    assert (cam.width, cam.height, cam.cx) == (32, 24, 15.5), repr(cam)

    planes = m.inverse_depth_planes(0.5, 50.0, 16)
    assert len(planes) == 16 and planes[0] == 0.5 and planes[-1] == 50.0

    pose = m.Pose.translation(0.2, 0.0, 0.0)
    assert m.Pose(pose.to_row()).to_row() == pose.to_row()
    h = m.homography(cam, pose, 5.0)
    assert abs(h[0][2] - 50.0 * 0.2 / 5.0) < 1e-12

    image, depth = m.render_random_scene(7, cam, 1.0, 10.0)
    neighbour, _ = m.render_random_scene(7, cam, 1.0, 10.0, pose)
    assert len(image) == 3 * 24 * 32 and len(depth) == 24 * 32
    assert all(1.0 <= d <= 10.0 for d in depth)

    hist_planes = m.histogram_planes(depth, 8, 10.0)
    assert len(hist_planes) == 8 and hist_planes == sorted(hist_planes)

    masks = m.make_masks(depth, 24, 32, hist_planes)
    fused = m.fuse_masks([masks, masks], 24, 32)
    assert fused == masks
    decoded = m.decode_masks(masks, 24, 32, hist_planes)
    assert len(decoded) == len(depth)

    report = m.compute_metrics(depth, depth, 24, 32)
    assert report["l1_rel"] == 0.0 and report["sc_inv"] == 0.0, report
    report = m.compute_metrics([2.0 * d for d in depth], depth, 24, 32)
    assert abs(report["sc_inv"]) < 1e-12 and abs(report["l1_rel"] - 1.0) < 1e-12

    volume = m.warp_volume(image, neighbour, cam, pose, planes)
    assert len(volume) == 3 * 17 * 24 * 32

    net = m.MaskNet(16, 24, 32, seed=1, base_channels=2)
    assert net.parameter_count() > 0
    outs = net.forward(volume)
    assert [o[:3] for o in outs] == [(16, 3, 4), (16, 6, 8), (16, 12, 16), (16, 24, 32)]
    assert all(v == 0.5 for v in outs[-1][3])

    try:
        m.inverse_depth_planes(0.5, 50.0, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("one plane should be rejected")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
