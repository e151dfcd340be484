"""End-to-end workflows: dataset synthesis, noise calibration, denoiser
training, estimation runs, and the preconditioner comparison.

All functions take a validated configuration dict (see ``covdiff.config``)
and derive every random draw from the run seed through named streams, so
rerunning a command with the same configuration reproduces its outputs.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .config import (
    cov_spec_from,
    objective_config_from,
    samples_from,
    sensing_config_from,
    sigma_n_from,
    solver_config_from,
    unet_spec_from,
)
from .datamodel import (
    load_cube,
    make_partitions,
    sample_gaussian_data,
    synth_covariance,
    write_cube,
)
from .denoiser import (
    MODE_KEY,
    TrainHyper,
    TrainingSet,
    TrainState,
    load_params,
    save_params,
    train,
)
from .diffusion import (
    ErrorStats,
    calibrate_schedule,
    chain_scale,
    load_schedule,
    save_schedule,
    symmetric_unit_noise,
)
from .errors import CalibrationError, MissingArtifactError, ValidationError
from .evalreport import emit_heatmap, run_comparison, write_report_csv
from .linalg import (
    frobenius_norm,
    load_matrix_csv,
    project_psd,
    save_matrix_csv,
    symmetrize,
)
from .objective import clean_gradient, expected_clean_gradient, gradient
from .optimizer import (
    PreconditionerConfig,
    SolverConfig,
    backprojection_init,
    pgd_run,
    save_trace_csv,
)
from .sensing import (
    SensingConfig,
    draw_projections,
    exact_measurements,
    measure_dataset,
    single_projection,
)
from .container import load_tensors, save_tensors
from .unet import PARAM_ORDER


def partition_levels(n, p_max, p_min=2):
    """Divisors of ``n`` in ``[p_min, p_max]`` -- the usable partition grid."""
    if n % p_max != 0:
        raise ValidationError(f"p={p_max} does not divide n={n}")
    levels = [d for d in range(p_min, p_max + 1) if n % d == 0]
    if not levels or levels[-1] != p_max:
        raise ValidationError(
            f"no usable partition levels between {p_min} and {p_max} for n={n}"
        )
    return np.array(levels, dtype=int)


def random_iterate(sigma_true, spread, gen):
    """PSD iterate near the truth: centered Wishart bump of relative size
    ``spread``, projected back to the cone."""
    l = sigma_true.shape[0]
    a = gen.standard_normal((l, l))
    w = symmetrize(a @ a.T / l - np.eye(l))
    bump = spread * frobenius_norm(sigma_true) / frobenius_norm(w) * w
    return project_psd(sigma_true + bump)


@dataclass(frozen=True)
class GradientPair:
    """A noisy multi-partition gradient and its clean reference."""

    noisy: object
    clean: object
    p: int


def sample_noisy_gradient(x, sigma_iter, p, m, sigma_n, cfg_obj, seed):
    """One multi-partition gradient with fresh partitions/projections/noise."""
    l, n = x.shape
    plan = make_partitions(n, p, seed)
    ens = draw_projections(SensingConfig(l=l, m=m, p=p, sigma_n=sigma_n), seed)
    meas = measure_dataset(x, plan, ens, sigma_n, seed)
    return gradient(sigma_iter, meas, ens, cfg_obj)


def sample_gradient_pair(x, sigma_true, sigma_iter, p, m, sigma_n, cfg_obj, seed):
    """Draw one (noisy, clean) gradient pair at a shared iterate.

    Fresh partitions, projection ensemble, sensing noise, and clean-reference
    projection all derive from ``seed``.
    """
    noisy = sample_noisy_gradient(x, sigma_iter, p, m, sigma_n, cfg_obj, seed)
    sp = single_projection(x.shape[0], m, seed)
    clean = clean_gradient(sigma_iter, x, sp, cfg_obj, sigma_n, seed)
    return GradientPair(noisy=noisy, clean=clean, p=p)


def _subseed(gen):
    return int(gen.integers(0, 2**63 - 1))


def _spread(gen, spread_range):
    lo, hi = spread_range
    return float(np.exp(gen.uniform(np.log(lo), np.log(hi))))


def measure_error_stats(x, sigma_true, levels, m, sigma_n, cfg_obj, seed,
                        instances=32, repeats=4, spread_range=(0.05, 0.5),
                        trajectory_fraction=0.5):
    """Per-partition-level gradient noise scales and the clean-gradient scale.

    The statistic at level ``p`` is the median over iterates of the
    entrywise RMS of ``(grad_p - p * grad_clean) / sqrt(p)`` -- the noise
    contributed per partition level, which grows like ``sqrt(p)`` under
    sample splitting.  The clean reference is the projection-averaged
    gradient (:func:`covdiff.objective.expected_clean_gradient`), every
    iterate is shared across levels (paired design), and each iterate's RMS
    pools ``repeats`` independent ensemble draws; the median then guards
    against the iterate-size spread.
    """
    pool = []
    if trajectory_fraction > 0:
        pool = trajectory_iterates(
            x, sigma_true, int(levels[-1]), m, sigma_n, cfg_obj, seed
        )
    # Paired design: every level sees the same iterate sequence, so the
    # level-to-level comparison is not polluted by iterate-size variation.
    iterates = []
    for i in range(instances):
        gen = rngmod.stream(seed, rngmod.CALIBRATION, i)
        if pool and gen.uniform() < trajectory_fraction:
            iterates.append(pool[int(gen.integers(len(pool)))])
        else:
            iterates.append(random_iterate(sigma_true, _spread(gen, spread_range), gen))
    s_data = x @ x.T / x.shape[1]
    refs = [
        expected_clean_gradient(s_data, it, m, sigma_n, cfg_obj) for it in iterates
    ]
    stds = np.empty(len(levels))
    for j, p in enumerate(levels):
        rms = np.empty(instances)
        for i in range(instances):
            gen = rngmod.stream(seed, rngmod.CALIBRATION, j, i)
            sq = 0.0
            for _ in range(repeats):
                noisy = sample_noisy_gradient(
                    x, iterates[i], int(p), m, sigma_n, cfg_obj, _subseed(gen)
                )
                err = (noisy.grad - p * refs[i]) / math.sqrt(p)
                sq += float(np.mean(err * err))
            rms[i] = math.sqrt(sq / repeats)
        stds[j] = float(np.median(rms))
    pooled = np.concatenate([np.abs(r).ravel() for r in refs])
    l = sigma_true.shape[0]
    clean_scale = float(np.median(pooled)) * 1.4826 * l
    return ErrorStats(partitions=np.asarray(levels, int), stds=stds,
                      clean_scale=clean_scale)


def trajectory_iterates(x, sigma_true, p, m, sigma_n, cfg_obj, seed,
                        runs=3, iters=120):
    """Snapshots from short unpreconditioned solves on fresh instances.

    Training on iterates the optimizer actually visits (rather than only
    synthetic bumps around the truth) keeps the denoiser on-distribution
    along the whole descent path, including the backprojection start.
    """
    solver = SolverConfig(
        max_iters=iters,
        preconditioner=PreconditionerConfig(kind="identity"),
    )
    pool = []
    n = x.shape[1]
    l = x.shape[0]
    for r in range(runs):
        gen = rngmod.stream(seed, rngmod.ITERATE, r)
        inst = _subseed(gen)
        plan = make_partitions(n, p, inst)
        ens = draw_projections(SensingConfig(l=l, m=m, p=p, sigma_n=sigma_n), inst)
        meas = measure_dataset(x, plan, ens, sigma_n, inst)
        _, trace = pgd_run(
            meas, ens, cfg_obj, backprojection_init(meas, ens), solver,
            seed=inst, keep_iterates=True,
        )
        pool.extend(trace.iterates)
    return pool


def build_training_set(x, sigma_true, schedule, m, sigma_n, cfg_obj, seed,
                       count, spread_range=(0.05, 0.5), noise_source="measured",
                       trajectory_fraction=0.5):
    """Generate ``count`` training records under ``schedule``.

    ``measured`` mode draws real partition gradients at the step's partition
    count and reads the noise off the marginal identity, so training inputs
    match what the solver-time normalizer produces.  ``synthetic`` mode
    injects isotropic symmetric noise instead (textbook forward process).
    Clean targets are projection-averaged reference gradients (noise-free
    regression targets); iterates mix synthetic bumps around the truth with
    snapshots of real descent trajectories (``trajectory_fraction``).
    """
    l = sigma_true.shape[0]
    c = schedule.scale_c
    p_max = int(schedule.partition_of_step[-1])
    pool = []
    if trajectory_fraction > 0:
        pool = trajectory_iterates(x, sigma_true, p_max, m, sigma_n, cfg_obj, seed)
    s_data = x @ x.T / x.shape[1]
    x0s = np.empty((count, l, l))
    epss = np.empty((count, l, l))
    ks = np.empty(count, dtype=int)
    for r in range(count):
        gen = rngmod.stream(seed, rngmod.TRAINING_SET, r)
        k = int(gen.integers(1, schedule.t + 1))
        abar = schedule.alpha_bar_at(k)
        p_k = schedule.partition_at(k)
        if pool and gen.uniform() < trajectory_fraction:
            sigma_iter = pool[int(gen.integers(len(pool)))]
        else:
            sigma_iter = random_iterate(sigma_true, _spread(gen, spread_range), gen)
        noisy = sample_noisy_gradient(
            x, sigma_iter, p_k, m, sigma_n, cfg_obj, _subseed(gen)
        )
        clean = expected_clean_gradient(s_data, sigma_iter, m, sigma_n, cfg_obj)
        if noise_source == "measured":
            # Per-instance scale: the chain input is the unit-norm gradient
            # direction times sqrt(abar), so the network reads the noise
            # fraction off the structure instead of the magnitude.  The
            # schedule's global scale_c still defines the calibration units.
            c_inst = chain_scale(noisy.grad, p_k)
            x0 = clean / c_inst
            xk = math.sqrt(abar) * noisy.grad / (p_k * c_inst)
            eps = (xk - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)
        elif noise_source == "synthetic":
            x0 = clean / c
            eps = symmetric_unit_noise(gen, l)
        else:
            raise ValidationError(f"unknown noise source {noise_source!r}")
        x0s[r] = symmetrize(x0)
        epss[r] = symmetrize(eps)
        ks[r] = k
    return TrainingSet(x0=x0s, eps=epss, k=ks, schedule=schedule)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _out(cfg, name):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    return os.path.join(cfg["out_dir"], name)


def _require(path, what):
    if not os.path.exists(path):
        raise MissingArtifactError(f"{what} not found: {path}", path=path)
    return path


def cmd_synth(cfg):
    """Write the synthetic cube and its ground-truth covariance."""
    seed = int(cfg["seed"])
    spec = cov_spec_from(cfg)
    sigma = synth_covariance(spec, seed)
    rows, cols = int(cfg["data"]["rows"]), int(cfg["data"]["cols"])
    x = sample_gaussian_data(sigma, rows * cols, seed)
    cube = x.reshape(spec.l, rows, cols)
    cube_path = _out(cfg, cfg["data"]["cube"])
    sigma_path = _out(cfg, cfg["data"]["sigma_true"])
    write_cube(cube_path, cube)
    save_matrix_csv(sigma_path, sigma)
    return {"cube": cube_path, "sigma_true": sigma_path}


def _load_experiment(cfg):
    cube_path = _require(_out(cfg, cfg["data"]["cube"]), "cube")
    sigma_path = _require(_out(cfg, cfg["data"]["sigma_true"]), "ground-truth covariance")
    x = load_cube(cube_path)
    sigma_true = load_matrix_csv(sigma_path)
    if x.shape != (int(cfg["data"]["l"]), samples_from(cfg)):
        raise ValidationError(
            f"cube geometry {x.shape} does not match configuration"
        )
    return x, sigma_true


def cmd_calibrate(cfg):
    """Measure gradient-noise stats over the partition grid; write the schedule."""
    x, sigma_true = _load_experiment(cfg)
    seed = int(cfg["seed"])
    levels = partition_levels(
        x.shape[1], int(cfg["sensing"]["p"]), int(cfg["diffusion"]["p_min"])
    )
    stats = measure_error_stats(
        x,
        sigma_true,
        levels,
        m=int(cfg["sensing"]["m"]),
        sigma_n=sigma_n_from(cfg, sigma_true),
        cfg_obj=objective_config_from(cfg),
        seed=seed,
        instances=int(cfg["diffusion"]["calibration_instances"]),
        spread_range=tuple(cfg["diffusion"]["iterate_spread"]),
        trajectory_fraction=float(cfg["diffusion"]["trajectory_fraction"]),
    )
    try:
        schedule = calibrate_schedule(stats)
    except CalibrationError as exc:
        raise CalibrationError(
            f"{exc}; measured levels {list(stats.partitions)} "
            f"stds {[float(f'{s:.6g}') for s in stats.stds]}"
        ) from exc
    path = _out(cfg, cfg["diffusion"]["schedule"])
    save_schedule(path, schedule)
    return {"schedule": path, "stats": stats}


CHECKPOINT_META = "meta/step"


def _save_checkpoint(path, state):
    tensors = {
        CHECKPOINT_META: np.array([float(state.step)]),
        "param/mode": state.params.get(MODE_KEY, np.zeros(1)),
    }
    for n in PARAM_ORDER:
        tensors[f"param/{n}"] = state.params[n]
        tensors[f"adam_m/{n}"] = state.adam_m[n]
        tensors[f"adam_v/{n}"] = state.adam_v[n]
    save_tensors(path, tensors)


def _load_checkpoint(path):
    tensors = load_tensors(path)
    params = {n: tensors[f"param/{n}"] for n in PARAM_ORDER}
    params[MODE_KEY] = tensors["param/mode"]
    return TrainState(
        params=params,
        adam_m={n: tensors[f"adam_m/{n}"] for n in PARAM_ORDER},
        adam_v={n: tensors[f"adam_v/{n}"] for n in PARAM_ORDER},
        step=int(tensors[CHECKPOINT_META][0]),
    )


def cmd_train(cfg):
    """Build the training set, train the denoiser, save weights and the log."""
    x, sigma_true = _load_experiment(cfg)
    seed = int(cfg["seed"])
    schedule = load_schedule(_require(_out(cfg, cfg["diffusion"]["schedule"]), "schedule"))
    den = cfg["denoiser"]
    dataset = build_training_set(
        x,
        sigma_true,
        schedule,
        m=int(cfg["sensing"]["m"]),
        sigma_n=sigma_n_from(cfg, sigma_true),
        cfg_obj=objective_config_from(cfg),
        seed=seed,
        count=int(den["records"]),
        spread_range=tuple(cfg["diffusion"]["iterate_spread"]),
        noise_source=den["noise_source"],
        trajectory_fraction=float(cfg["diffusion"]["trajectory_fraction"]),
    )
    state = None
    total_steps = int(den["steps"])
    if den["checkpoint"]:
        ckpt_path = _out(cfg, den["checkpoint"])
        if os.path.exists(ckpt_path):
            state = _load_checkpoint(ckpt_path)
    remaining = total_steps - (state.step if state else 0)
    cap = int(den.get("max_steps_per_run", 0) or 0)
    if cap > 0:
        remaining = min(remaining, cap)
    if remaining < 1:
        remaining = 0
    hyper = TrainHyper(
        lr=float(den["lr"]),
        batch=int(den["batch"]),
        steps=max(remaining, 1),
        seed=seed,
        val_fraction=float(den["val_fraction"]),
    )
    result = train(
        dataset, hyper, spec=unet_spec_from(cfg), state=state, total_steps=total_steps
    )
    weights_path = _out(cfg, den["weights"])
    save_params(weights_path, result.params)
    log_path = _out(cfg, den["log"])
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for row in result.log:
            fh.write(f"{row['step']},{repr(row['loss'])},{repr(row['lr'])}\n")
    if den["checkpoint"]:
        _save_checkpoint(_out(cfg, den["checkpoint"]), result.state)
    return {
        "weights": weights_path,
        "log": log_path,
        "val_loss": result.val_loss,
        "zero_loss": result.zero_loss,
    }


def _solver_for(cfg, method):
    if method == "diffusion":
        schedule = load_schedule(
            _require(_out(cfg, cfg["diffusion"]["schedule"]), "schedule")
        )
        params = load_params(
            _require(_out(cfg, cfg["denoiser"]["weights"]), "denoiser weights")
        )
        return solver_config_from(cfg, kind=method, schedule=schedule, params=params)
    return solver_config_from(cfg, kind=method)


def build_problem(cfg, sigma_true, eval_seed):
    """Deterministic problem instance for one evaluation seed.

    Evaluation data is drawn fresh from the ground-truth covariance (stream
    disjoint from training and calibration), so the denoiser is tested on
    unseen realizations.
    """
    base = int(cfg["seed"])
    gen = rngmod.stream(base, rngmod.EVAL, int(eval_seed))
    instance_seed = _subseed(gen)
    n = samples_from(cfg)
    scfg = sensing_config_from(cfg, sigma_true)
    x = sample_gaussian_data(sigma_true, n, instance_seed)
    plan = make_partitions(n, scfg.p, instance_seed)
    ens = draw_projections(scfg, instance_seed)
    if cfg["solver"]["exact_measurements"]:
        meas = exact_measurements(sigma_true, ens, scfg.sigma_n)
    else:
        meas = measure_dataset(x, plan, ens, scfg.sigma_n, instance_seed)
    init = backprojection_init(meas, ens)
    return meas, ens, objective_config_from(cfg), init


def cmd_estimate(cfg, method=None):
    """Run one estimation with the configured (or given) preconditioner."""
    method = method or cfg["solver"]["preconditioner"]
    _, sigma_true = _load_experiment(cfg)
    solver = _solver_for(cfg, method)
    meas, ens, cfg_obj, init = build_problem(cfg, sigma_true, eval_seed=0)
    sigma_hat, trace = pgd_run(
        meas, ens, cfg_obj, init, solver, seed=int(cfg["seed"])
    )
    est_path = _out(cfg, f"estimate_{method}.csv")
    trace_path = _out(cfg, f"trace_{method}.csv")
    save_matrix_csv(est_path, sigma_hat)
    save_trace_csv(trace_path, trace)
    return {"estimate": est_path, "trace": trace_path, "trace_obj": trace}


def cmd_compare(cfg, methods=("identity", "gaussian", "diffusion")):
    """Paired three-way comparison; writes the report CSV and heat maps."""
    _, sigma_true = _load_experiment(cfg)
    solvers = {m: _solver_for(cfg, m) for m in methods}
    seeds = cfg["eval"]["seeds"]
    seeds = list(range(int(seeds))) if isinstance(seeds, int) else [int(s) for s in seeds]
    report, estimates = run_comparison(
        problem_builder=lambda s: build_problem(cfg, sigma_true, s),
        methods=list(methods),
        solver_factory=lambda m: solvers[m],
        sigma_true=sigma_true,
        seeds=seeds,
        cos_threshold=float(cfg["eval"]["cos_threshold"]),
        keep_estimates=True,
    )
    report_path = _out(cfg, cfg["eval"]["report"])
    write_report_csv(report_path, report)
    files = {"report": report_path}
    if cfg["eval"]["heatmaps"]:
        est_hi = max(
            float(np.max(np.abs(v))) for v in estimates.values()
        )
        est_hi = max(est_hi, float(np.max(np.abs(sigma_true))))
        err_hi = max(
            float(np.max(np.abs(v - sigma_true))) for v in estimates.values()
        )
        for (m, seed), sigma_hat in estimates.items():
            p1 = _out(cfg, f"estimate_{m}_seed{seed}.svg")
            p2 = _out(cfg, f"abs_error_{m}_seed{seed}.svg")
            emit_heatmap(sigma_hat, p1, scale=(0.0, est_hi))
            emit_heatmap(np.abs(sigma_hat - sigma_true), p2, scale=(0.0, err_hi))
            files[f"estimate_{m}_{seed}"] = p1
            files[f"abs_error_{m}_{seed}"] = p2
    return {"files": files, "report_obj": report}
