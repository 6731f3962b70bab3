#!/usr/bin/env python3
"""Build the mlt_py extension, import it, and drive the pipeline end to end
at a tiny scale. Exits nonzero on any mismatch."""

import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def build_extension(workdir: pathlib.Path) -> None:
    subprocess.run(["cargo", "build", "-p", "mlt-py"], check=True, cwd=ROOT)
    built = ROOT / "target" / "debug" / "libmlt_py.so"
    if not built.exists():  # e.g. macOS
        built = ROOT / "target" / "debug" / "libmlt_py.dylib"
    shutil.copyfile(built, workdir / "mlt_py.so")
    sys.path.insert(0, str(workdir))


def tiny_config(mlt_py) -> str:
    cfg = json.loads(mlt_py.desk_config_json())
    cfg["model"]["coarse_count"] = 6
    cfg["model"]["backbone"]["widths"] = [2, 3, 4, 6]
    cfg["model"]["encoder"]["block_widths"] = [8, 6, 4]
    cfg["model"]["encoder"]["heads_per_block"] = 2
    cfg["model"]["encoder"]["layers_per_block"] = 1
    cfg["optim"]["epochs"] = 1
    cfg["optim"]["batch_size"] = 4
    cfg["optim"]["base_lr"] = 2e-3
    cfg["optim"]["seed"] = 3
    return json.dumps(cfg)


def main() -> None:
    workdir = pathlib.Path(tempfile.mkdtemp(prefix="mlt-smoke-"))
    build_extension(workdir)
    import mlt_py

    # schedule endpoints
    assert mlt_py.lr_at(0, 100, 1e-4) == 1e-4
    want = 1e-4 * math.cos(7 * math.pi / 16)
    assert abs(mlt_py.lr_at(100, 100, 1e-4) - want) < 1e-18

    # body: theta = 0 reproduces the rest template
    body = mlt_py.Body("desk")
    assert body.joint_count() == 24
    verts, joints = body.forward([0.0] * 72, [0.0] * 10)
    assert len(verts) == body.vertex_count() == 798
    assert len(joints) == 24
    template = body.template_vertices()
    drift = max(
        abs(a - b) for row, trow in zip(verts, template) for a, b in zip(row, trow)
    )
    assert drift == 0.0, f"rest pose drifted by {drift}"

    # fresh model forward: shape contract
    cfg = tiny_config(mlt_py)
    model = mlt_py.Model(cfg, seed=3)
    resolution = json.loads(cfg)["model"]["resolution"]
    out = model.infer([0.0] * resolution * resolution)
    assert len(out["theta"]) == 82
    assert len(out["joints3d"]) == 14
    assert len(out["template_coarse"]) == 6
    assert len(out["fine_vertices"]) == 798
    assert len(out["camera"]) == 3

    # dataset -> train one step -> reload checkpoint -> evaluate
    data_dir = workdir / "dataset"
    records_hash = mlt_py.generate_dataset(str(data_dir), cfg, 4, "easy", 11)
    assert len(records_hash) == 64
    report = mlt_py.train(cfg, str(data_dir), str(workdir / "ckpt"))
    assert report["steps"] == 1
    assert math.isfinite(report["final_loss"])
    restored = mlt_py.Model.load(report["checkpoint"])
    out2 = restored.infer([0.5] * resolution * resolution)
    assert len(out2["coarse_vertices"]) == 6
    metrics = mlt_py.evaluate_checkpoint(report["checkpoint"], str(data_dir))
    assert set(metrics) == {"mpve", "mpjpe", "pa_mpjpe"}
    assert all(math.isfinite(v) for v in metrics.values())

    print("smoke test passed")


if __name__ == "__main__":
    main()
