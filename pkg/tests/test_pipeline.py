import numpy as np
import pytest
from PIL import Image

from config import build_config
from guidance import TeacherOracle
from helpers import blob_image, central_difference, relative_error
from main import cmd_animate, cmd_fit_rest
from mesh_core import JacobianField, build_operators, compute_jacobians, grid_mesh, save_mesh
from nnkit import save_checkpoint
from pipeline import (
    Animator,
    PipelineError,
    build_oracle,
    cosine_lr,
    guidance_config,
    load_rest_jacobians,
    spatial_jacobians,
    spatial_jacobians_adjoint,
)
from render import RasterImage, to_uint8, warp
from trajectory import TrajectorySet, sample_all, save_trajectory


def _config(**overrides):
    base = {"frames": 4, "steps": 2, "render_size": 16, "window": 3, "seed": 3}
    base.update(overrides)
    return build_config(overrides=base, env={})


def _animator(mesh, image, config):
    rest = JacobianField.identity(mesh.face_count)
    return Animator(mesh, image, rest, config, build_oracle(config, mesh, image, rest))


def _bump_image(size):
    """Compactly supported bumps, zero within 0.15 of the grid mesh boundary."""
    xs, ys = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(size) + 0.5) / size)
    a = np.clip(1.0 - np.hypot(xs - 0.5, ys - 0.5) / 0.25, 0.0, None) ** 2
    b = np.clip(1.0 - np.hypot(xs - 0.45, ys - 0.55) / 0.2, 0.0, None) ** 2
    return RasterImage(np.stack([a, b, 0.5 * a, a], axis=-1))


def test_spatial_jacobians_match_per_frame(grid, rng):
    ops = build_operators(grid)
    stack = grid.vertices + 0.02 * rng.standard_normal((3,) + grid.vertices.shape)
    batched = spatial_jacobians(ops, stack)
    for t in range(3):
        assert np.allclose(batched[t], compute_jacobians(ops, stack[t]).per_face)


def test_spatial_jacobians_adjoint(grid, rng):
    ops = build_operators(grid)
    V = rng.standard_normal((3,) + grid.vertices.shape)
    G = rng.standard_normal((3, grid.face_count, 2, 2))
    lhs = np.sum(spatial_jacobians(ops, V) * G)
    rhs = np.sum(V * spatial_jacobians_adjoint(ops, G))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_cosine_schedule_endpoints():
    assert cosine_lr(1.0, 0, 100, 0.1) == pytest.approx(1.0)
    assert cosine_lr(1.0, 99, 100, 0.1) == pytest.approx(0.1)
    assert cosine_lr(1.0, 0, 1, 0.1) == 1.0


def test_rest_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "rest.ckpt"
    save_checkpoint(path, {"J0": np.zeros((3, 2, 2))})
    with pytest.raises(PipelineError, match="mesh needs") as info:
        load_rest_jacobians(path, 5)
    assert "fit-rest" in info.value.hint
    save_checkpoint(path, {"other": np.zeros(1)})
    with pytest.raises(PipelineError, match="J0"):
        load_rest_jacobians(path, 5)


def test_teacher_trajectory_frame_count_checked(tmp_path, grid):
    path = tmp_path / "teacher.json"
    save_trajectory(TrajectorySet(np.zeros((3, 4, 2)) + 0.5, 10), path)
    config = _config(oracle=f"teacher:{path}")
    with pytest.raises(PipelineError, match="10 frames"):
        build_oracle(config, grid, blob_image(16, 16), JacobianField.identity(grid.face_count))


def test_zero_steps_gives_static_warped_input(grid):
    image = blob_image(24, 24)
    animator = _animator(grid, image, _config(steps=0))
    final = animator.run(progress=False)
    frames = animator.render_full(final.vertices)
    assert np.allclose(frames[0], warp(image, grid, grid.vertices).pixels, atol=1e-9)
    assert np.allclose(frames, frames[0], atol=1e-9)
    assert animator.log == []


def test_zero_loss_weight_drops_flow_from_total(grid):
    animator = _animator(grid, blob_image(24, 24), _config(loss_weight=0.0))
    animator.run(progress=False)
    assert len(animator.log) == 2
    for _, sds, flow, total in animator.log:
        assert total == sds


def test_spatial_only_posing_runs(grid):
    animator = _animator(grid, blob_image(24, 24), _config(use_temporal=False))
    final = animator.run(progress=False)
    assert final.state is None
    assert np.array_equal(final.vertices, final.spatial_vertices)
    assert not any(name.startswith("f_r") for name in animator.loss_and_grads().grads)


def test_gradient_matches_finite_differences():
    mesh = grid_mesh(5, 5, (6, 12, 18))
    image = _bump_image(32)
    config = _config(t_min=0.5, t_max=0.5 + 1e-9, loss_weight=2.0)
    gconf = guidance_config(config)
    reference = np.random.default_rng(11).uniform(size=(4, 16, 16, 4))
    rest = JacobianField.identity(mesh.face_count)
    animator = Animator(mesh, image, rest, config, TeacherOracle(gconf, reference))

    rng = np.random.default_rng(5)
    store = animator.store
    rate_last = f"{animator.temporal.rate_mlp.prefix}.w{animator.temporal.rate_mlp.layers - 1}"
    store.params["traj.w3"][...] = 0.01 * rng.standard_normal(store["traj.w3"].shape)
    store.params[rate_last][...] = 0.05 * rng.standard_normal(store[rate_last].shape)

    abar, sigma = gconf.alpha_bar(0.5), gconf.sigma(0.5)
    lam = gconf.loss_weight

    def loss():
        fw = animator.forward()
        X = animator.render(fw.vertices)
        XP = animator.render(fw.spatial_vertices)
        sds = 0.5 * abar / sigma * np.sum((X - reference) ** 2)
        flow = np.sum((X - XP) ** 2) / sigma ** 4 + np.sum((fw.jacobians - fw.spatial_jacobians) ** 2) / 4
        return float(sds + lam * flow)

    grads = animator.loss_and_grads().grads
    for name in ("traj.w3", "traj.embedding", rate_last):
        picks = list(range(min(6, store[name].size)))
        fd = central_difference(loss, store.params[name], indices=picks)
        assert relative_error(grads[name].reshape(-1)[picks], fd.reshape(-1)[picks], floor=1e-8) < 5e-3, name


def _write_inputs(tmp_path):
    mesh_path = tmp_path / "mesh.json"
    save_mesh(grid_mesh(5, 5, (6, 12, 18)), mesh_path)
    image_path = tmp_path / "input.png"
    Image.fromarray(to_uint8(blob_image(32, 32))).save(image_path)
    return mesh_path, image_path


def test_animate_is_byte_deterministic(tmp_path):
    mesh_path, image_path = _write_inputs(tmp_path)
    common = {"mesh": str(mesh_path), "image": str(image_path), "rest_iterations": 50,
              "rest_checkpoint": str(tmp_path / "rest.ckpt"), "frames": 5, "steps": 3}
    cmd_fit_rest(_config(**common), progress=False)
    one = cmd_animate(_config(out_dir=str(tmp_path / "one"), **common), progress=False)
    two = cmd_animate(_config(out_dir=str(tmp_path / "two"), **common), progress=False)
    for key in ("gif", "loss_log", "params", "trajectory"):
        assert one[key].read_bytes() == two[key].read_bytes(), key
    assert len(list(one["frames"].glob("frame_*.png"))) == 5
    lines = one["loss_log"].read_text().splitlines()
    assert lines[0] == "step,L_SDS,L_flow,total"
    assert len(lines) == 4


@pytest.mark.slow
def test_recovers_teacher_trajectory(tmp_path):
    mesh = grid_mesh(6, 6, (8, 15, 27))
    image = blob_image(64, 64)
    rest = JacobianField.identity(mesh.face_count)
    kp = mesh.keypoint_positions
    drift = np.array([0.06, -0.04])
    offsets = np.array([[drift * (j + 1) / 3 + 0.02 * np.array([np.sin(i + j), np.cos(i - j)])
                         for j in range(3)] for i in range(3)])
    offsets = np.clip(offsets, -0.08, 0.08)
    teacher = TrajectorySet.from_offsets(kp, offsets, 24)
    path = tmp_path / "teacher.json"
    save_trajectory(teacher, path)

    config = build_config(overrides={"frames": 24, "steps": 700, "render_size": 32,
                                     "oracle": f"teacher:{path}", "seed": 0}, env={})
    animator = Animator(mesh, image, rest, config, build_oracle(config, mesh, image, rest))
    final = animator.run(progress=False)
    error = np.abs(sample_all(final.trajectory) - sample_all(teacher)).max()
    assert error < 0.02
