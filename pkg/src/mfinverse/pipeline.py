"""Two-phase workflow orchestration: ground truth, conditional training,
inference (multi-fidelity and single-fidelity references), refinement,
reporting, and the gradient audit harness.

All artifacts live in a run directory; every command is deterministic given
the config and seeds, and the simulation budget is tracked so the cost
accounting (HF solves during training + refinement only) can be asserted.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .conditional import (
    ConditionalModel,
    TrainingSet,
    feature_image,
    sample_training_inputs,
    velocity_image,
)
from .config import ConfigError
from .darcy import DarcySolver, PressureBC, save_velocities
from .likelihood import clip_gradient, marginalized_grads, mf_loglik, mf_loglik_grads
from .mesh import (
    Mesh,
    ObservationGrid,
    interpolation_matrix,
    load_field,
    save_field,
)
from .observations import ObservationSet, gen_observations, make_ground_truth
from .posteriors import MultiFidelityPosterior, SingleFidelityPosterior
from .prior import MarkovPrior, make_prior
from .report import make_report
from .svi import SparseGaussian, SviConfig, run_inference


class MissingArtifactError(FileNotFoundError):
    """A required prior-stage output is absent (CLI exit code 3)."""


# ---------------------------------------------------------------------------
# problem assembly


class Problem:
    """Meshes, prior, solvers, and the observation grid for one config."""

    def __init__(self, cfg: dict):
        mf = cfg["mesh_field"]
        self.field_mesh = Mesh(mf["n_ele_x"], mf["n_ele_y"])
        self.prior = make_prior(
            self.field_mesh,
            mu0=mf["mu0"],
            a0=mf["a0"],
            b0=mf["b0"],
            eps_reg=mf["eps_reg"],
        )
        obs = cfg["observations"]
        self.grid = ObservationGrid.uniform(obs["grid_rows"], obs["grid_cols"])
        lf, hf = cfg["darcy"]["lf"], cfg["darcy"]["hf"]
        self.lf_mesh = Mesh(lf["n_ele_x"], lf["n_ele_y"])
        self.lf_solver = DarcySolver(self.lf_mesh, PressureBC(lf["bc"]), self.grid)
        self.hf_solver = DarcySolver(self.field_mesh, PressureBC(hf["bc"]), self.grid)
        # restriction of the field to the LF solver's nodes
        self.R = interpolation_matrix(self.field_mesh, self.lf_mesh.node_coords())
        self.S = interpolation_matrix(self.field_mesh, self.grid.coords)
        self.cfg = cfg


# ---------------------------------------------------------------------------
# parallel simulation dispatch

_WORKER_SOLVER = None


def _init_worker(mesh_shape, bc_kind, grid_shape):
    global _WORKER_SOLVER
    _WORKER_SOLVER = DarcySolver(
        Mesh(*mesh_shape), PressureBC(bc_kind), ObservationGrid.uniform(*grid_shape)
    )


def _solve_worker(x):
    return _WORKER_SOLVER.solve(x).Y


def solve_batch(solver: DarcySolver, xs: np.ndarray, workers: int = 1) -> np.ndarray:
    """Velocities for each input field, ordered by sample index.

    With workers > 1 a process pool handles the solves; the owning solver's
    call counter is advanced by the dispatch size either way so budget
    accounting stays exact.
    """
    xs = np.atleast_2d(xs)
    if workers <= 1 or xs.shape[0] < 2:
        return np.stack([solver.solve(x).Y for x in xs])
    args = (
        (solver.mesh.n_ele_x, solver.mesh.n_ele_y),
        solver.bc.kind,
        (solver.grid.rows, solver.grid.cols),
    )
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=args) as pool:
        ys = list(pool.map(_solve_worker, xs))
    solver.n_calls += xs.shape[0]
    return np.stack(ys)


# ---------------------------------------------------------------------------
# commands


def cmd_truth(cfg: dict, out: str) -> ObservationSet:
    p = Problem(cfg)
    obs_cfg = cfg["observations"]
    x_gt = make_ground_truth(p.prior, obs_cfg["delta_gt"], obs_cfg["seed"])
    y_gt = p.hf_solver.solve(x_gt).Y
    snr = np.inf if obs_cfg["snr"] == "inf" else float(obs_cfg["snr"])
    obs = gen_observations(y_gt, snr, obs_cfg["seed"], p.grid)

    os.makedirs(out, exist_ok=True)
    save_field(os.path.join(out, "x_gt.csv"), x_gt, p.field_mesh)
    save_velocities(os.path.join(out, "y_gt.csv"), p.grid, y_gt)
    obs.save(os.path.join(out, "observations.csv"))
    return obs


def build_training_set(p: Problem, xs: np.ndarray, workers: int = 1) -> TrainingSet:
    """LF and HF batches for the sampled inputs, assembled channel-wise."""
    y_hf = solve_batch(p.hf_solver, xs, workers)
    x_lf = xs @ p.R.T
    y_lf = solve_batch(p.lf_solver, x_lf, workers)
    x_obs = xs @ p.S.T
    rows, cols = p.grid.rows, p.grid.cols
    z = np.stack([feature_image(y_lf[i], x_obs[i], rows, cols) for i in range(len(xs))])
    y = np.stack([velocity_image(y_hf[i], rows, cols) for i in range(len(xs))])
    return TrainingSet(z=z, y=y)


def calibration_stats(model: ConditionalModel, z: np.ndarray, y: np.ndarray) -> dict:
    """Standardized residual diagnostics on held-out records."""
    M, V = model.predict(z)
    r = (y - M) / np.sqrt(V)
    return {
        "residual_mean": float(r.mean()),
        "residual_var": float(r.var()),
        "coverage_3sigma": float(np.mean(np.abs(r) <= 3.0)),
        "n_records": int(z.shape[0]),
    }


def cmd_train(cfg: dict, out: str, workers: int = 1):
    p = Problem(cfg)
    tr = cfg["training"]
    xs = sample_training_inputs(
        p.prior, (tr["delta_min"], tr["delta_max"]), tr["n_train"], tr["seed"]
    )
    full = build_training_set(p, xs, workers)

    n_hold = int(round(tr["holdout_fraction"] * tr["n_train"]))
    n_fit = tr["n_train"] - n_hold
    data = TrainingSet(z=full.z[:n_fit], y=full.y[:n_fit])

    cc = cfg["conditional"]
    model = ConditionalModel.for_training_set(
        data,
        channels=tuple(cc["channels"]),
        bottleneck=cc["bottleneck"],
        dropout=cc["dropout"],
        pool=cc["pool"],
        seed=cc["seed"],
        nugget=cc["nugget"],
    )
    losses = model.train(
        data,
        epochs=cc["epochs"],
        batch_size=cc["batch_size"],
        learning_rate=cc["learning_rate"],
        optimizer=cc["optimizer"],
        seed=cc["seed"],
    )

    os.makedirs(out, exist_ok=True)
    data.save(os.path.join(out, "training_set"))
    model.save(os.path.join(out, "model.bin"))
    with open(os.path.join(out, "training_loss.csv"), "w") as fh:
        fh.write("epoch,nll\n")
        fh.writelines(f"{i},{float(v)!r}\n" for i, v in enumerate(losses))

    calibration = None
    if n_hold > 0:
        calibration = calibration_stats(model, full.z[n_fit:], full.y[n_fit:])
        with open(os.path.join(out, "calibration.json"), "w") as fh:
            json.dump(calibration, fh, indent=2)

    budget = {"hf_calls": int(p.hf_solver.n_calls), "lf_calls": int(p.lf_solver.n_calls)}
    with open(os.path.join(out, "budget_train.json"), "w") as fh:
        json.dump(budget, fh, indent=2)
    return model, data, calibration


def _load_observations(out: str) -> ObservationSet:
    path = os.path.join(out, "observations.csv")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no observation set at {path}; run `truth` first")
    return ObservationSet.load(path)


def make_refine_hook(p: Problem, posterior: MultiFidelityPosterior, data_box: list,
                     cfg: dict, workers: int = 1):
    """Hook that grows the conditional's training set from the current
    posterior and retrains with a warm start (the only HF use after training)."""
    svi_cfg = cfg["svi"]
    cc = cfg["conditional"]
    rng = np.random.default_rng(svi_cfg["seed"] + 1)

    def hook(iteration: int, q: SparseGaussian):
        xs, _ = q.sample(svi_cfg["n_refine"], rng)
        new = build_training_set(p, xs, workers)
        data_box[0], _ = posterior.model.refine(
            data_box[0],
            new.z,
            new.y,
            epochs=cc["refine_epochs"],
            batch_size=cc["batch_size"],
            learning_rate=cc["learning_rate"],
            optimizer=cc["optimizer"],
            seed=cc["seed"] + 1 + iteration,
        )

    return hook


def cmd_infer(cfg: dict, out: str, mode: str, workers: int = 1):
    if mode not in ("bmfia", "lf_only", "hf_ref"):
        raise ConfigError(f"unknown inference mode: {mode!r}")
    p = Problem(cfg)
    obs = _load_observations(out)
    lik_cfg = cfg["likelihood"]
    svi_cfg = cfg["svi"]

    hooks = {}
    data_box = [None]
    if mode == "bmfia":
        model_path = os.path.join(out, "model.bin")
        if not os.path.exists(model_path):
            raise MissingArtifactError(f"no trained model at {model_path}; run `train` first")
        model = ConditionalModel.load(model_path)
        posterior = MultiFidelityPosterior(
            p.prior, p.field_mesh, p.lf_solver, model, p.grid, obs.Y_obs,
            lik_cfg, seed=svi_cfg["seed"],
        )
        ts_dir = os.path.join(out, "training_set")
        if svi_cfg["refine_epochs"]:
            if not os.path.isdir(ts_dir):
                raise MissingArtifactError(
                    f"no training set at {ts_dir}; refinement needs it"
                )
            data_box[0] = TrainingSet.load(ts_dir)
            hook = make_refine_hook(p, posterior, data_box, cfg, workers)
            hooks = {epoch: hook for epoch in svi_cfg["refine_epochs"]}
    elif mode == "lf_only":
        posterior = SingleFidelityPosterior(
            p.prior, p.field_mesh, p.lf_solver, obs.Y_obs, lik_cfg,
            seed=svi_cfg["seed"],
        )
    else:
        posterior = SingleFidelityPosterior(
            p.prior, p.field_mesh, p.hf_solver, obs.Y_obs, lik_cfg,
            seed=svi_cfg["seed"],
        )

    hf_before_inference = int(p.hf_solver.n_calls)
    q0 = SparseGaussian(np.full(p.prior.dim, p.prior.mu0), svi_cfg["bandwidth"])
    run_cfg = SviConfig(
        batch_size=svi_cfg["batch_size"],
        max_solver_calls=svi_cfg["max_solver_calls"],
        optimizer=svi_cfg["optimizer"],
        learning_rate=svi_cfg["learning_rate"],
        seed=svi_cfg["seed"],
        refine_epochs=tuple(svi_cfg["refine_epochs"]) if mode == "bmfia" else (),
        checkpoint_path=os.path.join(out, f"checkpoint_{mode}.bin"),
    )
    q, trace = run_inference(posterior, q0, run_cfg, hooks=hooks, info_cb=posterior.info)

    os.makedirs(out, exist_ok=True)
    q.save(os.path.join(out, f"q_{mode}.bin"))
    trace.save_csv(os.path.join(out, f"trace_{mode}.csv"))

    # persist the refined conditional so later reports and refinements see
    # the model that actually produced q
    if mode == "bmfia" and data_box[0] is not None and hooks:
        data_box[0].save(os.path.join(out, "training_set"))
        posterior.model.save(os.path.join(out, "model.bin"))

    # budget accounting: in bmfia mode every HF call comes from refinement
    hf_total = int(p.hf_solver.n_calls)
    budget = {
        "mode": mode,
        "hf_calls": hf_total,
        "hf_calls_refinement": hf_total - hf_before_inference if mode == "bmfia" else 0,
        "lf_calls": int(p.lf_solver.n_calls),
    }
    with open(os.path.join(out, f"budget_{mode}.json"), "w") as fh:
        json.dump(budget, fh, indent=2)

    report = cmd_report(cfg, out, mode, q=q)
    return q, trace, report


def cmd_report(cfg: dict, out: str, mode: str, q: SparseGaussian | None = None):
    if q is None:
        q_path = os.path.join(out, f"q_{mode}.bin")
        if not os.path.exists(q_path):
            raise MissingArtifactError(f"no converged posterior at {q_path}")
        q = SparseGaussian.load(q_path)
    gt_path = os.path.join(out, "x_gt.csv")
    if not os.path.exists(gt_path):
        raise MissingArtifactError(f"no ground truth at {gt_path}; run `truth` first")
    x_gt, mesh = load_field(gt_path)
    rep_cfg = cfg["report"]
    report = make_report(
        q,
        mesh,
        x_gt,
        raster_shape=(cfg["observations"]["grid_rows"], cfg["observations"]["grid_cols"]),
        n_slice_points=rep_cfg["n_slice_points"],
        n_samples=rep_cfg["n_post_samples"],
        seed=rep_cfg["seed"],
    )
    report.save(os.path.join(out, f"report_{mode}"))
    return report


def cmd_refine(cfg: dict, out: str, workers: int = 1):
    """Standalone refinement: grow the persisted training set from the last
    converged multi-fidelity posterior and retrain the model."""
    p = Problem(cfg)
    q_path = os.path.join(out, "q_bmfia.bin")
    model_path = os.path.join(out, "model.bin")
    ts_dir = os.path.join(out, "training_set")
    for path in (q_path, model_path, ts_dir):
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing artifact: {path}")
    q = SparseGaussian.load(q_path)
    model = ConditionalModel.load(model_path)
    data = TrainingSet.load(ts_dir)

    svi_cfg, cc = cfg["svi"], cfg["conditional"]
    rng = np.random.default_rng(svi_cfg["seed"] + 1)
    xs, _ = q.sample(svi_cfg["n_refine"], rng)
    new = build_training_set(p, xs, workers)
    data, _ = model.refine(
        data, new.z, new.y,
        epochs=cc["refine_epochs"],
        batch_size=cc["batch_size"],
        learning_rate=cc["learning_rate"],
        optimizer=cc["optimizer"],
        seed=cc["seed"] + 1,
    )
    data.save(ts_dir)
    model.save(model_path)
    return model, data


# ---------------------------------------------------------------------------
# gradient audit harness


def _directional_fd(f, x, d, eps):
    return (f(x + eps * d) - f(x - eps * d)) / (2 * eps)


def _audit_directions(f, grad, x, rng, n_dirs, eps, tol, name):
    errs = []
    for _ in range(n_dirs):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d)
        fd = _directional_fd(f, x, d, eps)
        an = float(np.sum(grad * d))
        scale = max(abs(fd), abs(an), 1e-12)
        errs.append(abs(fd - an) / scale)
    worst = float(max(errs))
    return {"name": name, "rel_error": worst, "tolerance": tol, "passed": worst <= tol}


def cmd_gradcheck(seed: int = 0) -> list[dict]:
    """Finite-difference audits of every analytic gradient path on small
    problems. Returns one record per audit with the worst relative error."""
    rng = np.random.default_rng(seed)
    results = []

    # Darcy adjoint through a scalar functional of the velocities
    mesh = Mesh(8, 8)
    grid = ObservationGrid.uniform(8, 8)
    solver = DarcySolver(mesh, PressureBC("hf_quadratic"), grid)
    w = rng.standard_normal((grid.n_points, 2))
    x0 = 0.3 * rng.standard_normal(mesh.n_nodes)

    def darcy_val(x):
        return float(np.sum(w * solver.solve(x).Y))

    sol = solver.solve(x0)
    darcy_grad = solver.adjoint(x0, sol, w)
    results.append(
        _audit_directions(darcy_val, darcy_grad, x0, rng, 10, 1e-6, 1e-5, "darcy_adjoint")
    )

    # interpolation adjoint identity
    S = interpolation_matrix(mesh, grid.coords)
    a = rng.standard_normal(mesh.n_nodes)
    v = rng.standard_normal(grid.n_points)
    lhs = float((S @ a) @ v)
    rhs = float(a @ (S.T @ v))
    err = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    results.append(
        {"name": "interpolation_adjoint", "rel_error": err, "tolerance": 1e-12,
         "passed": err <= 1e-12}
    )

    # prior EM gradient with frozen E-step
    prior = make_prior(mesh, mu0=1.0)
    xp = prior.mu0 + 0.5 * rng.standard_normal(prior.dim)
    e_delta = prior.expected_delta(xp)
    _, pgrad = prior.log_prior_em(xp, e_delta=e_delta)

    def prior_val(x):
        return prior.log_prior_em(x, e_delta=e_delta)[0]

    results.append(
        _audit_directions(prior_val, pgrad, xp, rng, 10, 1e-6, 1e-6, "prior_em_grad")
    )

    # likelihood partials (dM, dV, dtau) against FD
    n = 12
    M0 = rng.standard_normal((n, 2))
    V0 = 0.1 + rng.random((n, 2))
    Y0 = rng.standard_normal((n, 2))
    tau0 = 2.5
    dM, dV, dtau = mf_loglik_grads(M0, V0, Y0, tau0)
    eps = 1e-6
    errs = []
    for arr, g, make in (
        (M0, dM, lambda A: mf_loglik(A, V0, Y0, tau0)),
        (V0, dV, lambda A: mf_loglik(M0, A, Y0, tau0)),
    ):
        d = rng.standard_normal(arr.shape)
        d /= np.linalg.norm(d)
        fd = (make(arr + eps * d) - make(arr - eps * d)) / (2 * eps)
        an = float(np.sum(g * d))
        errs.append(abs(fd - an) / max(abs(fd), 1e-12))
    fd_tau = (mf_loglik(M0, V0, Y0, tau0 + eps) - mf_loglik(M0, V0, Y0, tau0 - eps)) / (2 * eps)
    errs.append(abs(fd_tau - dtau) / max(abs(fd_tau), 1e-12))
    worst = float(max(errs))
    results.append(
        {"name": "mf_likelihood_partials", "rel_error": worst, "tolerance": 1e-7,
         "passed": worst <= 1e-7}
    )

    # entropy gradient of the variational family
    q = SparseGaussian(rng.standard_normal(12), 3)
    q.lvals[0] = 0.2 * rng.standard_normal(12)
    _, egrad = q.entropy()
    d = rng.standard_normal(q.lvals.shape)
    d /= np.linalg.norm(d)
    # H is linear in the log-diagonal, so a larger step has no truncation
    # error and avoids cancellation noise
    eps = 1e-3
    qp, qm = q.copy(), q.copy()
    qp.lvals += eps * d
    qm.lvals -= eps * d
    fd = (qp.entropy()[0] - qm.entropy()[0]) / (2 * eps)
    an = float(np.sum(egrad * d))
    err = abs(fd - an) / max(abs(fd), 1e-12)
    results.append(
        {"name": "entropy_grad", "rel_error": err, "tolerance": 1e-9, "passed": err <= 1e-9}
    )

    # conditional input gradient on a downsized network
    from .conditional import ConditionalModel as _CM
    from .conditional import TrainingSet as _TS

    zs = rng.standard_normal((6, 8, 8, 3))
    ys = rng.standard_normal((6, 8, 8, 2))
    data = _TS(z=zs, y=ys)
    model = _CM.for_training_set(data, channels=(4, 8, 16), bottleneck=16, seed=seed)
    seed_M = rng.standard_normal((1, 8, 8, 2))
    seed_V = rng.standard_normal((1, 8, 8, 2))
    z0 = rng.standard_normal((1, 8, 8, 3))

    def cond_val(zflat):
        M, V = model.predict(zflat.reshape(1, 8, 8, 3))
        return float(np.sum(seed_M * M) + np.sum(seed_V * V))

    model.predict(z0, keep_cache=True)
    cgrad = model.backprop_inputs(seed_M, seed_V).ravel()
    results.append(
        _audit_directions(cond_val, cgrad, z0.ravel(), rng, 20, 1e-5, 1e-4,
                          "conditional_input_grad")
    )

    # full chain: field -> LF solve -> features -> conditional -> marginalized
    # likelihood, with frozen tau samples and the network in inference mode
    lf_mesh = Mesh(4, 4)
    lf_solver = DarcySolver(lf_mesh, PressureBC("lf_moderate"), grid)
    R = interpolation_matrix(mesh, lf_mesh.node_coords())
    y_obs_img = rng.standard_normal((8, 8, 2))
    taus = np.exp(rng.normal(0.0, 0.3, size=5))

    def chain_val(x):
        sol = lf_solver.solve(R @ x)
        z = feature_image(sol.Y, S @ x, 8, 8)
        M, V = model.predict(z[None])
        return float(np.mean([mf_loglik(M[0], V[0], y_obs_img, t) for t in taus]))

    xc = 1.0 + 0.3 * rng.standard_normal(mesh.n_nodes)
    sol = lf_solver.solve(R @ xc)
    z = feature_image(sol.Y, S @ xc, 8, 8)
    M, V = model.predict(z[None], keep_cache=True)
    dM, dV, _ = marginalized_grads(M[0], V[0], y_obs_img, taus)
    dz = model.backprop_inputs(dM[None], dV[None])[0]
    chain_grad = R.T @ lf_solver.adjoint(R @ xc, sol, dz[:, :, :2].reshape(-1, 2))
    chain_grad = chain_grad + S.T @ dz[:, :, 2].ravel()
    results.append(
        _audit_directions(chain_val, chain_grad, xc, rng, 10, 1e-6, 1e-4,
                          "full_chain_mf_grad")
    )

    return results
