# src/pipeline.py
"""One optimization loop: trajectories -> Poisson poses -> temporal corrections -> frames -> losses.

Every forward stage has a matching hand-written backward; the Adam update covers the
trajectory MLP, keypoint embeddings and the temporal network.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from config import RunConfig
from deform_solver import FactorizedSystem, assemble, solve_adjoint_many, solve_many
from errors import InputError
from guidance import (
    FlowResult,
    GuidanceConfig,
    ScoreOracle,
    SDSResult,
    flow_matching_loss,
    make_oracle,
    sds_gradient,
    total_loss,
)
from mesh_core import DifferentialOperators, JacobianField, TriMesh, build_operators, jacobians_adjoint
from metrics import record_from_trajectory, save_record
from nnkit import ParamStore, accumulate, adam_step, load_checkpoint, save_checkpoint
from render import RasterImage, emit_frames, emit_gif, warp_gradient_many, warp_many
from temporal import (
    TemporalParams,
    TemporalState,
    init_temporal_params,
    integrate_backward,
    integrate_traced,
    total_jacobians,
)
from trajectory import (
    TrajectorySet,
    init_trajectory_params,
    load_trajectory,
    parameterize_mlp,
    parameterize_mlp_backward,
    sample_all,
    sample_all_gradient,
    save_trajectory,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_SDS", "L_flow", "total")


class PipelineError(InputError):
    label = "Pipeline Error"


# ============================================================
#  HELPERS
# ============================================================

def spatial_jacobians(ops: DifferentialOperators, vertex_stack: np.ndarray) -> np.ndarray:
    """Face gradients of every frame, (N, V, 2) -> (N, F, 2, 2)."""
    n = len(vertex_stack)
    flat = ops.gradient @ vertex_stack.transpose(1, 0, 2).reshape(ops.vertex_count, 2 * n)
    return flat.reshape(ops.face_count, 2, n, 2).transpose(2, 0, 3, 1)


def spatial_jacobians_adjoint(ops: DifferentialOperators, grad_jac: np.ndarray) -> np.ndarray:
    return np.stack([jacobians_adjoint(ops, g) for g in grad_jac])


def cosine_lr(base: float, step: int, total: int, final_fraction: float) -> float:
    if total <= 1:
        return base
    progress = step / (total - 1)
    return base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def load_rest_jacobians(path, face_count: int) -> JacobianField:
    arrays = load_checkpoint(path)
    if "J0" not in arrays:
        raise PipelineError("rest checkpoint has no 'J0' entry", where=str(path))
    if arrays["J0"].shape != (face_count, 2, 2):
        raise PipelineError(
            f"rest checkpoint holds {arrays['J0'].shape}, mesh needs ({face_count}, 2, 2)",
            where=str(path), hint="re-run fit-rest for this mesh",
        )
    return JacobianField(arrays["J0"])


def pose_frames(sys: FactorizedSystem, rest_jacobians: JacobianField, traj: TrajectorySet) -> np.ndarray:
    """Spatial-only posing: V^P_t = g(J_0, p_t) for every frame."""
    n = traj.frame_count
    jacs = np.broadcast_to(rest_jacobians.per_face, (n,) + rest_jacobians.per_face.shape)
    return solve_many(sys, jacs, sample_all(traj))


def render_teacher_clip(mesh: TriMesh, image: RasterImage, rest_jacobians: JacobianField,
                        traj: TrajectorySet, size: int, constraint_weight: float = 1000.0,
                        workers: Optional[int] = None) -> np.ndarray:
    """Frames of a known trajectory; the reference clip for the teacher oracle."""
    sys = assemble(build_operators(mesh), mesh, constraint_weight)
    return warp_many(image, mesh, pose_frames(sys, rest_jacobians, traj), size, size, workers)


def guidance_config(config: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(
        guidance_scale=config.guidance_scale,
        loss_weight=config.loss_weight,
        t_min=config.t_min,
        t_max=config.t_max,
        flow_t_min=config.flow_t_min,
        samples=config.sds_samples,
    )


def build_oracle(config: RunConfig, mesh: TriMesh, image: RasterImage,
                 rest_jacobians: JacobianField) -> ScoreOracle:
    """gaussian: centered on the static clip; teacher:<trajectory.json>: reference rendered from it."""
    gconf = guidance_config(config)
    name, _, arg = config.oracle.partition(":")
    size = config.render_size
    workers = config.workers or None
    if name == "gaussian":
        rest_frame = warp_many(image, mesh, mesh.vertices[None], size, size)
        return make_oracle("gaussian", gconf, mean=np.repeat(rest_frame, config.frames, axis=0))
    if name == "teacher":
        traj = load_trajectory(arg)
        if traj.frame_count != config.frames or traj.keypoint_count != mesh.keypoint_count:
            raise PipelineError(
                f"teacher trajectory has {traj.frame_count} frames and {traj.keypoint_count} keypoints; "
                f"run needs {config.frames} and {mesh.keypoint_count}", where=arg,
            )
        clip = render_teacher_clip(mesh, image, rest_jacobians, traj, size,
                                   config.constraint_weight, workers)
        return make_oracle("teacher", gconf, reference=clip)
    return make_oracle(config.oracle, gconf, timeout=config.timeout, retries=config.retries)


# ============================================================
#  ANIMATOR
# ============================================================

@dataclass
class Forward:
    trajectory: TrajectorySet
    spatial_vertices: np.ndarray       # V^P, (N, V, 2)
    vertices: np.ndarray               # V, (N, V, 2)
    spatial_jacobians: np.ndarray      # J^P, (N, F, 2, 2)
    jacobians: np.ndarray              # J = J^P + J^R
    state: Optional[TemporalState]
    trajectory_tape: tuple
    temporal_tape: Optional[tuple]


@dataclass
class StepResult:
    step: int
    sds: SDSResult
    flow: FlowResult
    total: float
    grads: dict


class Animator:
    def __init__(self, mesh: TriMesh, image: RasterImage, rest_jacobians: JacobianField,
                 config: RunConfig, oracle: ScoreOracle):
        if mesh.keypoint_count == 0:
            raise PipelineError("mesh has no keypoints to animate")
        self.mesh = mesh
        self.image = image
        self.rest_jacobians = rest_jacobians
        self.config = config
        self.oracle = oracle
        self.gconf = oracle.config
        self.ops = build_operators(mesh)
        self.sys = assemble(self.ops, mesh, config.constraint_weight)
        self.workers = config.workers or None

        init_seq, guide_seq = np.random.SeedSequence(config.seed).spawn(2)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(guide_seq)

        self.store = ParamStore()
        self.traj_spec = init_trajectory_params(self.store, mesh.keypoint_count, init_rng)
        self.temporal: TemporalParams = init_temporal_params(self.store, init_rng)
        self.rest_keypoints = mesh.keypoint_positions
        self.log: List[tuple] = []

    # ---- forward ----

    def forward(self) -> Forward:
        cfg = self.config
        traj, traj_tape = parameterize_mlp(self.rest_keypoints, self.store, self.traj_spec,
                                           cfg.frames, cfg.motion_scale)
        VP = pose_frames(self.sys, self.rest_jacobians, traj)
        JP = spatial_jacobians(self.ops, VP)
        if not cfg.use_temporal:
            return Forward(traj, VP, VP, JP, JP, None, traj_tape, None)
        state, temporal_tape = integrate_traced(TemporalState.start(JP, cfg.window), self.temporal)
        J = total_jacobians(state)
        V = solve_many(self.sys, J, sample_all(traj))
        return Forward(traj, VP, V, JP, J, state, traj_tape, temporal_tape)

    def render(self, vertex_stack: np.ndarray, size: Optional[int] = None) -> np.ndarray:
        w = h = size or self.config.render_size
        return warp_many(self.image, self.mesh, vertex_stack, w, h, self.workers)

    # ---- loss and backward ----

    def loss_and_grads(self, step: int = 0) -> StepResult:
        cfg = self.config
        lam = self.gconf.loss_weight
        fw = self.forward()
        frames = self.render(fw.vertices)
        frames_spatial = self.render(fw.spatial_vertices) if cfg.use_temporal else frames

        sds = sds_gradient(frames, self.oracle, self.gconf, self.rng, cfg.prompt)
        flow = flow_matching_loss(frames, frames_spatial, fw.jacobians, fw.spatial_jacobians,
                                  self.oracle, self.gconf, self.rng, cfg.prompt)
        total = total_loss(sds.value, flow.value, lam)

        g_frames = sds.gradient + lam * flow.grad_total_frames
        gV = warp_gradient_many(self.image, self.mesh, fw.vertices, g_frames, self.workers)
        grads = {}
        if cfg.use_temporal:
            dJ, dT = solve_adjoint_many(self.sys, gV)
            dJ += lam * flow.grad_total_jac
            temporal_grads, gJP = integrate_backward(fw.state, self.temporal, fw.temporal_tape, dJ)
            accumulate(grads, temporal_grads)
            gJP += dJ + lam * flow.grad_spatial_jac
            gVP = spatial_jacobians_adjoint(self.ops, gJP)
            gVP += warp_gradient_many(self.image, self.mesh, fw.spatial_vertices,
                                      lam * flow.grad_spatial_frames, self.workers)
            _, dT_spatial = solve_adjoint_many(self.sys, gVP)
            dT += dT_spatial
        else:
            _, dT = solve_adjoint_many(self.sys, gV)

        grad_cp = sample_all_gradient(fw.trajectory, dT)
        accumulate(grads, parameterize_mlp_backward(self.store, fw.trajectory_tape, grad_cp))
        return StepResult(step, sds, flow, total, grads)

    def step(self, step: int) -> StepResult:
        result = self.loss_and_grads(step)
        cfg = self.config
        lr = cosine_lr(cfg.effective_lr, step, cfg.steps, cfg.lr_final_fraction)
        adam_step(self.store, result.grads, lr)
        self.log.append((step, result.sds.value, result.flow.value, result.total))
        return result

    def run(self, progress: bool = True) -> Forward:
        bar = tqdm(range(self.config.steps), desc="animate", unit="step", disable=not progress)
        for step in bar:
            result = self.step(step)
            bar.set_postfix(loss=f"{result.total:.4g}")
            if step % 50 == 0:
                logger.debug("step %d: L_SDS %.5g, L_flow %.5g, total %.5g",
                             step, result.sds.value, result.flow.value, result.total)
        return self.forward()

    # ---- artifacts ----

    def write_outputs(self, out_dir, final: Optional[Forward] = None) -> dict:
        out_dir = Path(out_dir)
        final = final or self.forward()
        frames = self.render_full(final.vertices)
        paths = {
            "frames": out_dir / "frames",
            "gif": out_dir / "animation.gif",
            "trajectory": out_dir / "trajectory.json",
            "motion": out_dir / "motion.json",
            "params": out_dir / "params.ckpt",
            "loss_log": out_dir / "loss_log.csv",
        }
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise PipelineError(f"cannot create output directory: {e.strerror}", where=str(out_dir)) from e
        emit_frames(frames, paths["frames"])
        emit_gif(frames, paths["gif"], self.config.fps)
        save_trajectory(final.trajectory, paths["trajectory"])
        save_record(record_from_trajectory(final.trajectory), paths["motion"])
        save_checkpoint(paths["params"], self.store.params)
        write_loss_log(self.log, paths["loss_log"])
        return paths

    def render_full(self, vertex_stack: np.ndarray) -> np.ndarray:
        return warp_many(self.image, self.mesh, vertex_stack, self.image.width, self.image.height,
                         self.workers)


def write_loss_log(rows, path):
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for step, sds, flow, total in rows:
                writer.writerow([step, repr(float(sds)), repr(float(flow)), repr(float(total))])
    except OSError as e:
        raise PipelineError(f"cannot write loss log: {e.strerror}", where=str(path)) from e
