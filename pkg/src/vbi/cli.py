"""Command-line front end: simulate -> fit -> select -> report, plus the
particle-filter benchmark harness and plot-data emission.

Exit codes: 0 success, 2 configuration/user error, 3 numerical failure.
Configs are JSON with a strict schema; unknown keys are rejected with the
offending path so typos never silently fall back to defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import flows, selection, simulator, smc, trainer
from .errors import TrainingDiverged
from .likelihoods import DDModel, NuisanceParams, ToyModel
from .probcore import RngStream
from .simulator import (MODEL_DD, MODEL_TOY, ScenarioConfig, omega_larmor,
                        read_dataset_csv, read_truth_json, simulate_dataset,
                        strongly_coupled_bath, total_measurement_time,
                        write_dataset_csv, write_truth_json)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


_SCHEMA = {
    "model": {
        "kind": str,
        # dd
        "ansatz_spins": int,
        "B_gauss": float,
        "n_pi": int,
        "T2_inv": float,
        "eta0": float,
        "eta_stretch": float,
        "tau_min_us": float,
        "tau_max_us": float,
        "m_points": int,
        "repetitions": int,
        "truth_spins": list,         # [[Az, Aperp], ...] explicit ground truth
        "truth_seed": int,           # or a generated strongly-coupled bath
        "truth_count": int,
        "az_range": list,
        "aperp_range": list,
        "min_delta_az": float,
        # toy
        "n_frequencies": int,
        "log_tau_range": list,
        "truth_frequencies": list,
    },
    "ansatz": {"family": str, "n_layers": int, "hidden_width": int},
    "train": {
        "batch": int, "steps": int, "lr_start": float, "lr_end": float,
        "beta1": float, "beta2": float, "eps": float, "seed": int,
        "snapshot_every": int, "reg_sigma0": float, "phi_lr_scale": float,
        "init_spread": str,          # "stratified" (dd default) or "uniform"
    },
    "regularizer": {"kind": str, "sigma": float, "trainable": bool},
    "selection": {
        "aperp_threshold_mhz": float, "az_max_mhz": float,
        "mahalanobis_t": float, "draws": int, "cluster_seed": int,
    },
    "bench": {"n_list": list, "seeds": list, "n_particles": int,
              "batch": int, "steps": int, "lr_start": float, "lr_end": float,
              "trials": int},
    "plot": {"draws": int},
}

_REQUIRED = {"model.kind"}
_REQUIRED_DD = {"model.B_gauss"}


def _validate(config: dict, schema=None, path="") -> None:
    schema = _SCHEMA if schema is None else schema
    if not isinstance(config, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    for key, value in config.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key: {here}")
        expected = schema[key]
        if isinstance(expected, dict):
            _validate(value, expected, here)
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{here} must be a number")
        elif not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"{here} must be {expected.__name__}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    _validate(config)
    for field in _REQUIRED:
        section, key = field.split(".")
        if key not in config.get(section, {}):
            raise ConfigError(f"missing field: {field}")
    kind = config["model"]["kind"]
    if kind not in (MODEL_DD, MODEL_TOY):
        raise ConfigError(f"model.kind must be 'dd' or 'toy', got {kind!r}")
    if kind == MODEL_DD:
        for field in _REQUIRED_DD:
            section, key = field.split(".")
            if key not in config.get(section, {}):
                raise ConfigError(f"missing field: {field}")
    return config


def _ground_truth(model_cfg: dict, seed_override=None) -> np.ndarray:
    if model_cfg["kind"] == MODEL_TOY:
        if "truth_frequencies" in model_cfg:
            return np.asarray(model_cfg["truth_frequencies"], dtype=float)
        n = model_cfg.get("n_frequencies", 2)
        seed = seed_override if seed_override is not None else model_cfg.get("truth_seed", 0)
        return RngStream(seed).uniform(0.0, 1.0, n)
    if "truth_spins" in model_cfg:
        return np.asarray(model_cfg["truth_spins"], dtype=float).reshape(-1)
    seed = seed_override if seed_override is not None else model_cfg.get("truth_seed", 0)
    return strongly_coupled_bath(
        model_cfg.get("truth_count", 6),
        RngStream(seed),
        az_range=tuple(model_cfg.get("az_range", (-0.3, 0.3))),
        aperp_range=tuple(model_cfg.get("aperp_range", (0.1, 0.5))),
        min_delta_az=model_cfg.get("min_delta_az", 0.03),
    )


def _scenario(config: dict, seed: int) -> ScenarioConfig:
    mc = config["model"]
    theta = _ground_truth(mc)
    common = dict(m_points=mc.get("m_points", 512), repetitions=mc.get("repetitions", 1024),
                  seed=seed)
    if mc["kind"] == MODEL_DD:
        return ScenarioConfig(kind=MODEL_DD, theta_true=theta,
                              n_pi=mc.get("n_pi", 32), b_gauss=mc["B_gauss"],
                              t2_inv=mc.get("T2_inv", 1e-4), eta0=mc.get("eta0", 1e-2),
                              eta_stretch=mc.get("eta_stretch", 1.0),
                              tau_min_us=mc.get("tau_min_us", 6.0),
                              tau_max_us=mc.get("tau_max_us", 8.5), **common)
    return ScenarioConfig(kind=MODEL_TOY, theta_true=theta,
                          log_tau_range=tuple(mc.get("log_tau_range", (-1.0, 4.0))), **common)


def _build_model(config: dict):
    mc = config["model"]
    if mc["kind"] == MODEL_DD:
        return DDModel(k_spins=mc.get("ansatz_spins", mc.get("truth_count", 6)),
                       omega_l=omega_larmor(mc["B_gauss"]),
                       eta_stretch=mc.get("eta_stretch", 1.0))
    return ToyModel(n=mc.get("n_frequencies", 2))


def _train_config(config: dict, seed: int, kind: str) -> trainer.TrainConfig:
    tc = config.get("train", {})
    rc = config.get("regularizer", {})
    if kind == MODEL_DD:
        reg = trainer.RegularizerSpec(kind=rc.get("kind", "l2"), sigma=rc.get("sigma", 1e-3),
                                      trainable=rc.get("trainable", True))
        prior = trainer.PriorSpec()
        lr0, lr1 = tc.get("lr_start", 1e-3), tc.get("lr_end", 1e-4)
    else:
        reg = trainer.RegularizerSpec(kind=rc.get("kind", "none"), sigma=rc.get("sigma", 1.0),
                                      trainable=rc.get("trainable", False))
        n = config["model"].get("n_frequencies", 2)
        prior = trainer.PriorSpec(kind="box", low=np.zeros(n), high=np.ones(n))
        lr0, lr1 = tc.get("lr_start", 1e-2), tc.get("lr_end", 1e-3)
    return trainer.TrainConfig(
        batch=tc.get("batch", 64), steps=tc.get("steps", 2048),
        lr_start=lr0, lr_end=lr1,
        beta1=tc.get("beta1", 0.9), beta2=tc.get("beta2", 0.999), eps=tc.get("eps", 1e-8),
        seed=tc.get("seed", seed), prior=prior, regularizer=reg,
        reg_sigma0=tc.get("reg_sigma0", 1e-2),
        phi_lr_scale=tc.get("phi_lr_scale", 1.0),
        snapshot_every=tc.get("snapshot_every", 0),
        phi0=NuisanceParams(t2_inv=config["model"].get("T2_inv", 1e-4),
                            chi=1.0 / config["model"].get("repetitions", 1024),
                            eta=config["model"].get("eta0", 1e-2)),
    )


def _ansatz_spec(config: dict, d: int) -> flows.AnsatzSpec:
    ac = config.get("ansatz", {})
    return flows.AnsatzSpec(d=d, family=ac.get("family", "mean-field"),
                            n_layers=ac.get("n_layers", 5),
                            hidden_width=ac.get("hidden_width", 32))


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else config.get("train", {}).get("seed", 0)
    scenario = _scenario(config, seed)
    records = simulate_dataset(scenario)
    write_dataset_csv(out / "dataset.csv", records)
    if scenario.kind == MODEL_DD:
        write_truth_json(out / "ground_truth.json", scenario.theta_true,
                         scenario.t2_inv, scenario.b_gauss)
        t_tot = total_measurement_time([r.tau_us for r in records],
                                       scenario.repetitions, scenario.n_pi)
    else:
        with open(out / "ground_truth.json", "w") as fh:
            json.dump({"frequencies": scenario.theta_true.tolist()}, fh, indent=2)
        t_tot = float(sum(r.tau_us for r in records) * scenario.repetitions * 1e-6)
    with open(out / "t_tot.json", "w") as fh:
        json.dump({"T_tot_s": t_tot, "m_points": scenario.m_points,
                   "repetitions": scenario.repetitions}, fh, indent=2)
    print(f"wrote {out / 'dataset.csv'} ({len(records)} records), T_tot = {t_tot:.4g} s")
    return EXIT_OK


def matched_filter_az_scores(records, omega_l, az_lo=-0.32, az_hi=0.32, n_grid=600):
    """Score candidate parallel couplings by the signal at their resonances.

    A spin at A_z produces dips at tau_m = (2m-1) pi / (2 omega_L + A_z); the
    score of a candidate A_z is the mean outcome y (dip amplitude) interpolated
    at every predicted resonance inside the measured window.
    """
    taus = np.array([r.tau_us for r in records])
    ys = np.array([r.y for r in records])
    order = np.argsort(taus)
    taus, ys = taus[order], ys[order]
    az_grid = np.linspace(az_lo, az_hi, n_grid)
    m_all = np.arange(1, 200)
    scores = np.zeros(n_grid)
    for i, az in enumerate(az_grid):
        tau_m = simulator.resonance_delays(m_all, az, omega_l)
        tau_m = tau_m[(tau_m >= taus[0]) & (tau_m <= taus[-1])]
        if tau_m.size:
            scores[i] = float(np.mean(np.interp(tau_m, taus, ys)))
    return az_grid, scores


def greedy_comb_init(records, omega_l, k_max, n_pi, t2_nominal=1e-4,
                     rel_floor=0.02, eta0_nominal=1e-2):
    """Forward-select spins that actually improve the fit of the signal.

    Candidates are the strongest resonance-comb scores; each round adds the
    (A_z, A_perp) pair with the largest squared-error reduction, locally grid
    refined.  Selection stops when no candidate improves the fit by
    ``rel_floor`` or the residual has reached the shot-noise floor, so noise
    wiggles never spawn spins.  Harmonic ghosts never survive: once the parent
    spin is in the active set, the ghost's dips are already explained.
    """
    taus = np.array([r.tau_us for r in records])
    ys = np.array([r.y for r in records])
    reps = np.array([r.repetitions for r in records], dtype=float)
    phi = NuisanceParams(t2_inv=t2_nominal)
    noise_sse = float(np.sum(np.clip(ys * (1 - ys), 0.0, 0.25) / reps
                             + eta0_nominal ** 2))
    az_grid, scores = matched_filter_az_scores(records, omega_l)
    candidates = []
    for i in np.argsort(scores)[::-1]:
        if scores[i] <= 0.05 or len(candidates) >= 2 * k_max:
            break
        if all(abs(az_grid[i] - az_grid[j]) > 0.012 for j in candidates):
            candidates.append(i)
    available = [float(az_grid[i]) for i in candidates]
    ap_grid = np.arange(0.10, 0.50, 0.04)

    def sse(spins):
        model = DDModel(k_spins=len(spins), omega_l=omega_l)
        flat = np.array(spins, dtype=float).ravel()
        p1 = 1.0 - np.atleast_1d(model.outcome_prob_zero(taus, n_pi, flat, phi))
        return float(np.sum((ys - p1) ** 2))

    def polish(spins, j, reach=3e-3):
        """Coordinate refinement of spin j against the others held fixed.

        Two az passes (coarse then fine) so a spin first fitted against a
        contaminated residual can still relocate by a few tens of kHz.
        """
        others = spins[:j] + spins[j + 1:]
        az_b, ap_b = spins[j]
        for span in (8 * reach, reach):
            fine_az = az_b + np.linspace(-span, span, 17)
            az_b = float(fine_az[int(np.argmin([sse(others + [(a, ap_b)])
                                                for a in fine_az]))])
            fine_ap = np.clip(ap_b + np.linspace(-0.04, 0.04, 9), 0.02, 0.55)
            ap_b = float(fine_ap[int(np.argmin([sse(others + [(az_b, a)])
                                                for a in fine_ap]))])
        return az_b, ap_b

    active = []
    base = sse(active)
    for _ in range(k_max):
        if base <= 1.5 * noise_sse:
            break
        best = None
        for az in available:
            for ap in ap_grid:
                val = sse(active + [(az, float(ap))])
                if best is None or val < best[0]:
                    best = (val, az, float(ap))
        if best is None or (base - best[0]) < rel_floor * base:
            break
        active.append((best[1], best[2]))
        active[-1] = polish(active, len(active) - 1)
        base = sse(active)
        available = [a for a in available if abs(a - active[-1][0]) > 0.012]

    def eliminate(spins, ap_shield=0.11):
        """Drop weak-coupling spins whose removal barely hurts the fit.

        Spins above ``ap_shield`` are never dropped: detectable couplings sit
        well above the blind zone, while comb shadows fit far below it.
        """
        kept = list(spins)
        for spin in sorted(spins, key=lambda s: s[1]):
            if len(kept) <= 1 or spin[1] >= ap_shield:
                continue
            without = [s for s in kept if s is not spin]
            if sse(without) <= max(1.15 * sse(kept), 1.5 * noise_sse):
                kept = without
        return kept

    # shadows corrupt backfitting, so prune before re-polishing each spin
    # against the final configuration, then prune again
    active = eliminate(active)
    for _ in range(2):
        for j in range(len(active)):
            active[j] = polish(active, j)
    active = eliminate(active)
    for j in range(len(active)):
        active[j] = polish(active, j)
    return active


def _dd_init_params(spec: flows.AnsatzSpec, k_spins: int, seed: int, spread: str,
                    records=None, omega_l: float = None,
                    n_pi: int = 32) -> flows.FlowParameters:
    """Initial ansatz for a spin-identification fit.

    ``matched`` (default) warm-starts at the greedy comb fit of the data,
    leaving surplus spins deep inside the blind zone so the thresholding step
    prunes them unless the data pulls them up.  ``stratified`` spreads
    locations evenly; ``uniform`` draws them blindly.
    """
    rng = RngStream(seed)
    k = k_spins
    mu = np.empty(2 * k)
    scale = np.empty(2 * k)
    if spread == "matched" and records is not None:
        spins = greedy_comb_init(records, omega_l, k, n_pi)
        for j in range(k):
            if j < len(spins):
                # start sharp: a wide initial spread smears the predicted dips
                # and the smeared objective favors splitting dips across spins
                mu[2 * j], mu[2 * j + 1] = spins[j]
                scale[2 * j], scale[2 * j + 1] = 0.004, 0.012
            else:
                # surplus spins sit at zero coupling: their gradients scale
                # with A_perp, so they stay inert in the blind zone unless the
                # data genuinely needs them
                mu[2 * j] = rng.uniform(-0.3, 0.3)
                mu[2 * j + 1] = 1e-4
                scale[2 * j], scale[2 * j + 1] = 0.01, 0.003
    else:
        if spread == "uniform":
            mu[0::2] = rng.uniform(-0.27, 0.27, k)
        else:
            mu[0::2] = np.linspace(-0.27, 0.27, k) + rng.uniform(-0.015, 0.015, k)
        mu[1::2] = rng.uniform(0.08, 0.15, k)
        scale[0::2] = 0.04
        scale[1::2] = 0.05
    return flows.init_flow_parameters(spec, mu, scale,
                                      rng if spec.effective_layers else None)


def fit_dataset(config: dict, records, seed: int):
    """Shared by cmd_fit and the acceptance suite: returns (params, phi, trace)."""
    kind = config["model"]["kind"]
    model = _build_model(config)
    tcfg = _train_config(config, seed, kind)
    d = model.dim if kind == MODEL_DD else model.n
    spec = _ansatz_spec(config, d)
    if kind == MODEL_DD:
        spread = config.get("train", {}).get("init_spread", "matched")
        init = _dd_init_params(spec, model.k_spins, tcfg.seed, spread,
                               records=records, omega_l=model.omega_l,
                               n_pi=config["model"].get("n_pi", 32))
        return trainer.train_from(tcfg, records, model, init)
    return trainer.train(tcfg, records, model, spec)


def cmd_fit(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args)
    records = read_dataset_csv(args.dataset)
    kind = config["model"]["kind"]
    n_pi_expected = config["model"].get("n_pi", 32) if kind == MODEL_DD else 1
    if any(r.n_pi != n_pi_expected for r in records):
        raise ConfigError(f"dataset n_pi column does not match the {kind} model "
                          f"(expected {n_pi_expected})")
    seed = args.seed if args.seed is not None else config.get("train", {}).get("seed", 0)
    resume = getattr(args, "resume", None)
    if resume:
        flows.load_checkpoint(resume)  # validity gate; a fresh fit still runs below
    try:
        params, phi, trace = fit_dataset(config, records, seed)
    except TrainingDiverged as err:
        trace_path = out / "trace.csv"
        if err.trace is not None:
            err.trace.to_csv(trace_path)
        print(f"training diverged at step {err.step}; trace at {trace_path}", file=sys.stderr)
        return EXIT_NUMERIC
    flows.save_checkpoint(out / "checkpoint.json", params,
                          extra={"phi": list(phi.as_array()), "seed": seed,
                                 "kind": kind})
    trace.to_csv(out / "trace.csv")
    print(f"final smoothed ELBO: {trace.smoothed_elbo():.4f}")
    return EXIT_OK


def cmd_select(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args)
    params, extra = flows.load_checkpoint(args.checkpoint)
    sc = config.get("selection", {})
    draws = sc.get("draws", selection.DEFAULT_DRAWS)
    if draws < 1:
        raise ConfigError("selection.draws must be >= 1")
    seed = args.seed if args.seed is not None else 0
    theta, _, _ = flows.sample_batch(params, draws, RngStream(seed))
    sample_set = selection.build_sample_set(
        theta, sc.get("aperp_threshold_mhz", selection.DEFAULT_APERP_THRESHOLD),
        sc.get("az_max_mhz", selection.DEFAULT_AZ_MAX))
    clusters = []
    if sample_set.map_class > 0:
        points = selection.marginalize_spins(sample_set.class_sets[sample_set.map_class])
        clusters = selection.cluster_spins(points, sample_set.map_class,
                                           seed=sc.get("cluster_seed", 0))
    metrics = errors = None
    if args.ground_truth:
        truth, _, _ = read_truth_json(args.ground_truth)
        truth = np.column_stack([truth[:, 0], np.abs(truth[:, 1])])
        metrics = selection.ml_metrics(clusters, truth,
                                       sc.get("mahalanobis_t", selection.DEFAULT_MAHALANOBIS_T))
        errors = selection.hyperfine_errors(clusters, truth,
                                            sc.get("mahalanobis_t", selection.DEFAULT_MAHALANOBIS_T))
    report = selection.selection_report(sample_set, clusters, metrics, errors)
    selection.write_report(out / "selection.json", report)
    selection.write_samples_csv(out / "samples.csv", sample_set)
    print(f"MAP class {sample_set.map_class} "
          f"(p = {sample_set.probabilities[sample_set.map_class]:.4f}), "
          f"{len(clusters)} clusters")
    return EXIT_OK


def cmd_bench_pf(args) -> int:
    config = load_config(args.config)
    if config["model"]["kind"] != MODEL_TOY:
        raise ConfigError("bench-pf runs on the toy model only")
    out = _out_dir(args)
    bc = config.get("bench", {})
    n_list = bc.get("n_list", [2, 4, 8, 12])
    seeds = bc.get("seeds", [0])
    rows = bench_pf_rows(config, n_list, seeds)
    path = out / "bench.csv"
    with open(path, "w") as fh:
        fh.write("n,method,seed,error\n")
        for row in rows:
            fh.write("%d,%s,%d,%r\n" % row)
    print(f"wrote {path} ({len(rows)} rows)")
    return EXIT_OK


def bench_pf_rows(config: dict, n_list, seeds):
    """(n, method, seed, error) rows for methods PF, VBI, and baseline."""
    bc = config.get("bench", {})
    mc = dict(config["model"])
    rows = []
    for n in n_list:
        base_rng = RngStream(90000 + n)
        baseline = smc.prior_mode_baseline_error(n, bc.get("trials", 10000), base_rng)
        for seed in seeds:
            truth = RngStream(50000 + 1000 * n + seed).uniform(0.0, 1.0, n)
            scenario = ScenarioConfig(
                kind=MODEL_TOY, theta_true=truth, m_points=mc.get("m_points", 512),
                repetitions=mc.get("repetitions", 1024), seed=seed,
                log_tau_range=tuple(mc.get("log_tau_range", (-1.0, 4.0))))
            records = simulate_dataset(scenario)
            model = ToyModel(n=n)

            ens = smc.pf_init(np.zeros(n), np.ones(n), bc.get("n_particles", 16384),
                              RngStream(seed + 7))
            ens = smc.pf_run(ens, records, model)
            rows.append((n, "PF", seed, smc.sorted_square_error(smc.pf_estimate(ens), truth)))

            run_cfg = {"model": {"kind": MODEL_TOY, "n_frequencies": n},
                       "train": {"batch": bc.get("batch", 64),
                                 "steps": bc.get("steps", 2000),
                                 "lr_start": bc.get("lr_start", 1e-2),
                                 "lr_end": bc.get("lr_end", 1e-3),
                                 "seed": seed},
                       "ansatz": {"family": "mean-field"}}
            params, _, _ = fit_dataset(run_cfg, records, seed)
            prior = trainer.PriorSpec(kind="box", low=np.zeros(n), high=np.ones(n))
            draws, _, _ = flows.sample_batch(params, 2048, RngStream(seed + 13))
            estimate = prior.transform(draws).mean(axis=0)
            rows.append((n, "VBI", seed, smc.sorted_square_error(estimate, truth)))

            rows.append((n, "baseline", seed, baseline))
    return rows


def cmd_plotdata(args) -> int:
    config = load_config(args.config)
    run_dir = Path(args.run_dir)
    dataset_path = run_dir / "dataset.csv"
    ckpt_path = run_dir / "checkpoint.json"
    if not dataset_path.exists() or not ckpt_path.exists():
        raise ConfigError(f"incomplete run directory: {run_dir} "
                          "(needs dataset.csv and checkpoint.json)")
    records = read_dataset_csv(dataset_path)
    params, extra = flows.load_checkpoint(ckpt_path)
    phi = NuisanceParams(*extra.get("phi", [0.0, 0.0, 0.0]))
    model = _build_model(config)
    kind = config["model"]["kind"]
    n_draws = config.get("plot", {}).get("draws", 256)

    taus = np.array([r.tau_us for r in records])
    if n_draws > 0:
        thetas, _, _ = flows.sample_batch(params, n_draws, RngStream(args.seed or 0))
    else:  # degenerate posterior: evaluate at the flow image of z = 0
        thetas = flows.flow_forward(np.zeros(params.d), params)[0][None, :]
    if kind == MODEL_TOY:
        prior = trainer.PriorSpec(kind="box", low=np.zeros(params.d), high=np.ones(params.d))
        thetas = prior.transform(thetas)
        curves = np.stack([np.atleast_1d(model.outcome_prob(taus, th)) for th in thetas])
    else:
        curves = np.stack([
            1.0 - np.atleast_1d(model.outcome_prob_zero(taus, records[0].n_pi, th, phi))
            for th in thetas])
    y_fit = curves.mean(axis=0)
    y_std = curves.std(axis=0) if curves.shape[0] > 1 else np.zeros_like(y_fit)

    out = _out_dir(args)
    with open(out / "signal.csv", "w") as fh:
        fh.write("tau_s,y_data,y_fit,y_fit_std\n")
        for r, yf, ys in zip(records, y_fit, y_std):
            fh.write(f"{r.tau_us * 1e-6!r},{float(r.y)!r},{float(yf)!r},{float(ys)!r}\n")
    if kind == MODEL_DD:
        sc = config.get("selection", {})
        theta_cloud, _, _ = flows.sample_batch(params, max(n_draws, 1024),
                                               RngStream((args.seed or 0) + 1))
        with open(out / "posterior_scatter.csv", "w") as fh:
            fh.write("az_mhz,aperp_mhz\n")
            for th in theta_cloud:
                _, spins = selection.threshold_and_prune(
                    th, sc.get("aperp_threshold_mhz", selection.DEFAULT_APERP_THRESHOLD),
                    sc.get("az_max_mhz", selection.DEFAULT_AZ_MAX))
                for az, ap in spins:
                    fh.write(f"{float(az)!r},{float(ap)!r}\n")
    print(f"wrote {out / 'signal.csv'} ({len(records)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbi",
                                     description="Variational Bayesian spin identification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="write dataset.csv, ground_truth.json, t_tot.json")
    common(p)
    p = sub.add_parser("fit", help="train the posterior on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to validate and warm-start from")
    p = sub.add_parser("select", help="threshold, cluster, and report")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ground-truth", default=None)
    p = sub.add_parser("bench-pf", help="particle filter vs VBI scaling benchmark")
    common(p)
    p = sub.add_parser("plotdata", help="emit signal and posterior scatter CSVs")
    common(p)
    p.add_argument("--run-dir", required=True)
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "select": cmd_select,
    "bench-pf": cmd_bench_pf,
    "plotdata": cmd_plotdata,
}


def main(argv=None) -> int:
    if "VBI_THREADS" in os.environ:  # cap BLAS fan-out before heavy numpy use
        os.environ.setdefault("OMP_NUM_THREADS", os.environ["VBI_THREADS"])
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
