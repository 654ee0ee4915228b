import logging
import sys
from pathlib import Path

import numpy as np
from tqdm import tqdm

from config import RunConfig, pfode_rates, require_paths
from deform_solver import fit_rest_jacobians, rest_objective
from errors import FlexMeshError, NumericError
from mesh_core import JacobianField, build_operators, load_mesh
from metrics import load_record, write_metrics_csv
from nnkit import save_checkpoint
from pfode import NoiseSchedule, verify_fokker_planck
from pipeline import Animator, build_oracle, load_rest_jacobians
from render import load_image

logger = logging.getLogger(__name__)


class VerificationError(NumericError):
    label = "Verification Failed"


def cmd_fit_rest(config: RunConfig, progress: bool = True) -> Path:
    require_paths(config, "mesh")
    mesh = load_mesh(config.mesh)
    ops = build_operators(mesh)

    rng = np.random.default_rng(config.seed)
    noise = config.rest_init_noise * rng.standard_normal((mesh.face_count, 2, 2))
    init = JacobianField(JacobianField.identity(mesh.face_count).per_face + noise)

    with tqdm(total=config.rest_iterations, desc="fit-rest", unit="it", disable=not progress) as bar:
        def report(it, objective):
            bar.update(1)
            if it % 100 == 0:
                bar.set_postfix(objective=f"{objective:.3e}")

        fit = fit_rest_jacobians(mesh, ops, config.rest_iterations, config.rest_step,
                                 weight=config.constraint_weight, init=init, progress=report)

    path = config.rest_checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, {"J0": fit.jacobians.per_face})
    print(f"rest fit: objective {rest_objective(fit.jacobians):.3e}, "
          f"mean deviation {fit.mean_deviation:.3e} after {fit.iterations} iterations")
    print(f"checkpoint written to {path}")
    return path


def cmd_animate(config: RunConfig, progress: bool = True) -> dict:
    require_paths(config, "mesh", "image")
    mesh = load_mesh(config.mesh)
    image = load_image(config.image)
    rest = load_rest_jacobians(config.rest_checkpoint_path, mesh.face_count)
    oracle = build_oracle(config, mesh, image, rest)

    animator = Animator(mesh, image, rest, config, oracle)
    final = animator.run(progress=progress)
    paths = animator.write_outputs(config.out_dir, final)
    if animator.log:
        step, sds, flow, total = animator.log[-1]
        print(f"step {step}: L_SDS {sds:.5g}, L_flow {flow:.5g}, total {total:.5g}")
    print(f"animation written to {paths['gif']}")
    return paths


def cmd_metrics(record_path, output=None) -> tuple:
    record = load_record(record_path)
    output = Path(output) if output else Path(record_path).with_name("metrics.csv")
    ds, ae = write_metrics_csv(record, output)
    print(f"DS {ds:.6g}")
    print(f"AE {ae:.6g}")
    return ds, ae


def cmd_pfode_demo(config: RunConfig):
    rates = pfode_rates(config)
    schedule = NoiseSchedule(rates=rates, base_variance=np.ones(len(rates)), steps=config.pfode_steps)
    report = verify_fokker_planck(schedule, trials=config.particles, seed=config.seed,
                                  c_dot_scale=config.fault_injection)
    print(report.summary())
    if not report.passed:
        raise VerificationError(
            f"covariance error {report.max_relative_error:.4f} exceeds {report.tolerance:.2f}",
            hint="expected when --fault-injection differs from 1",
        )
    return report


def run(command, *args, color=None, **kwargs) -> int:
    """Run a command and map failures to exit codes: 0 ok, 1 numeric, 2 input or config."""
    color = sys.stderr.isatty() if color is None else color
    try:
        command(*args, **kwargs)
    except FlexMeshError as e:
        print(e.render(color=color), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"Internal error: {e}", file=sys.stderr)
        return 1
    return 0
