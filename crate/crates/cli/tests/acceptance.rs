//! Acceptance run: one `PASS`/`FAIL` line per criterion.
//!
//! Criteria 6 and 7 drive the `sfm-lab` binary through a full desk-scale
//! pipeline (several hours on one core). Artifacts persist under
//! `SFM_ACCEPTANCE_DIR` (default `target/acceptance` in the workspace), and
//! every pipeline command skips outputs that are already complete, so only the
//! first run pays for it. `SFM_LAB_BIN` overrides the binary under test.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use sfm_core::data::Batch;
use sfm_core::flows::{
    interpolant, uniform_draws, Downscaler, Encoder, EncoderKind, NetworkConfig, PerturbationBatch, Scheme, SchemeConfig, Sfm,
};
use sfm_core::metrics::{crps_ensemble, crps_point, mae, ssr, CrpsEstimator, SkillReport};
use sfm_core::rng;
use sfm_core::spectral::{
    initial_condition, run_trajectory, AbHistory, Physics, SimConfig, Simulator, SpectralWorkspace,
};
use sfm_core::tensor::{AdamConfig, ConvNetSpec, Graph, Tensor, Var};

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

fn main() {
    let criteria: [(u32, &str, fn() -> Result<Verdict>); 9] = [
        (1, "interpolant/perturbation identity", c1_identity),
        (2, "gradient oracle", c2_gradients),
        (3, "CRPS quadrature oracle", c3_crps_quadrature),
        (4, "calibration identity", c4_calibration),
        (5, "simulator numerics", c5_simulator),
        (6, "training sanity (tau=5)", c6_training),
        (7, "desk-scale ordering (tau=10)", c7_ordering),
        (8, "single-threaded determinism", c8_determinism),
        (9, "degenerate SFM equals VE denoiser", c9_degenerate),
    ];
    let only: Option<Vec<u32>> = std::env::var("SFM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f));
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panic: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn normals(r: &mut rng::StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng::normal(r)).collect()
}

// ---------------------------------------------------------------- 1

fn c1_identity() -> Result<Verdict> {
    const TUPLES: usize = 1000;
    const TOL: f64 = 1e-6;
    let t0 = Instant::now();
    let mut r = rng::stream(1, "acceptance/identity", 0);
    let mut worst = 0.0f64;
    for _ in 0..TUPLES {
        let len = 1 + (rng::uniform(&mut r, 0.0, 64.0) as usize);
        let scale = rng::uniform(&mut r, 0.1, 10.0);
        let x = normals(&mut r, len, scale);
        let ey = normals(&mut r, len, scale);
        let eps = normals(&mut r, len, 1.0);
        let t = rng::uniform(&mut r, 0.0, 1.0);
        let sz = rng::uniform(&mut r, 0.01, 5.0);
        let pert = PerturbationBatch::new(&x, &ey, &eps, (1.0 - t) * sz, sz);
        let interp = interpolant(&x, &ey, &eps, t, sz);
        for (a, b) in pert.x_sigma.iter().zip(&interp) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((worst <= TOL && secs < 5.0, format!("{TUPLES} tuples, max |diff| {worst:.2e} (tol {TOL:e}), {secs:.2}s (limit 5s)")))
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const FD_FLOOR: f64 = 1e-3;

fn fd_rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR)
}

/// Check `build` against central differences on up to `probes` random
/// coordinates of every leaf. Returns (coordinates checked, worst relative error).
fn check_layer(seed: u64, leaves: Vec<Tensor<f64>>, probes: usize, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> (usize, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().enumerate().map(|(i, l)| g.param(format!("p{i}"), l.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    let eval = |ls: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ls.iter().map(|l| g.constant(l.clone())).collect();
        let out = build(&mut g, &vs);
        g.value(out).item()
    };
    let mut pick = rng::stream(seed, "acceptance/fd-pick", 0);
    let (mut n, mut worst) = (0, 0.0f64);
    for (li, leaf) in leaves.iter().enumerate() {
        let an = grads.of(vars[li]).expect("leaf gradient");
        for _ in 0..probes.min(leaf.numel()) {
            let e = (rng::uniform(&mut pick, 0.0, 1.0) * leaf.numel() as f64) as usize;
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(fd_rel_err(fd, an[e]));
            n += 1;
        }
    }
    (n, worst)
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng::fill_normal(&mut rng::stream(seed, "acceptance/tensor", 0), t.data_mut());
    t
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig { hidden_channels: 6, n_blocks: 1, kernel_size: 3, positional_channels: true, dropout: 0.0 }
}

/// Pairs with `x = a * y + b` pointwise on an `n x n` grid.
fn linear_batch(seed: u64, b: usize, n: usize, a: f64, off: f64) -> Batch<f64> {
    let y = random_tensor(seed, &[b, 1, n, n]);
    let x = y.map(|v| a * v + off);
    Batch { y, x }
}

/// Full SFM loss (denoising + lambda term, encoder inside the noisy state)
/// against finite differences of denoiser and encoder parameters.
fn sfm_loss_fd(coords: usize) -> Result<(usize, f64)> {
    let c = SchemeConfig {
        encoder_kind: EncoderKind::Convnet,
        lambda: Some(0.25),
        network: NetworkConfig { hidden_channels: 3, n_blocks: 1, ..tiny_net() },
        ..SchemeConfig::for_scheme(Scheme::Sfm)
    };
    let mut m = Sfm::<f64>::new(&c, 1, 1, 13)?;
    m.denoiser.params = m.denoiser.spec.init(14, false)?;
    let batch = linear_batch(3, 2, 5, 0.9, 0.2);
    let step = 7;
    let loss_of = |m: &Sfm<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = m.loss_graph(&mut g, &batch, step)?;
        Ok(g.value(l.loss).item())
    };
    let mut g = Graph::new();
    let l = m.loss_graph(&mut g, &batch, step)?;
    ensure!(g.value(l.reg).item() > 0.0, "lambda term is inactive");
    let grads = g.backward(l.loss)?;
    let mut den = m.denoiser.params.clone();
    den.set_grads(&g, &grads, "den/");
    let Encoder::Net(enc) = &m.encoder else { bail!("expected a network encoder") };
    let mut encp = enc.params.clone();
    encp.set_grads(&g, &grads, "enc/");

    let mut pick = rng::stream(2, "acceptance/fd-pick", 0);
    let (mut n, mut worst) = (0, 0.0f64);
    for which in 0..2 {
        let store = if which == 0 { &den } else { &encp };
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for k in 0..coords.div_ceil(2) {
            let name = &names[k % names.len()];
            let p = store.get(name).context("parameter")?;
            let i = (rng::uniform(&mut pick, 0.0, 1.0) * p.value.numel() as f64) as usize;
            let analytic = p.grad.as_ref().context("gradient")?.data()[i];
            let eval = |delta: f64| -> Result<f64> {
                let mut mm = m.clone();
                let target = match (which, &mut mm.encoder) {
                    (0, _) => &mut mm.denoiser.params,
                    (_, Encoder::Net(n)) => &mut n.params,
                    _ => bail!("expected a network encoder"),
                };
                target.get_mut(name).context("parameter")?.value.data_mut()[i] += delta;
                loss_of(&mm)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(fd_rel_err(fd, analytic));
            n += 1;
        }
    }
    Ok((n, worst))
}

fn c2_gradients() -> Result<Verdict> {
    let t0 = Instant::now();
    let probes = 12;
    let mut layers: Vec<(&str, (usize, f64))> = Vec::new();
    let w_out = [0.7, 1.9];
    layers.push((
        "conv2d",
        check_layer(1, vec![random_tensor(1, &[2, 2, 6, 5]), random_tensor(2, &[3, 2, 3, 3]), random_tensor(3, &[3])], probes, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2])).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "linear",
        check_layer(2, vec![random_tensor(4, &[2, 4]), random_tensor(5, &[3, 4]), random_tensor(6, &[3])], probes, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "channel_bias",
        check_layer(3, vec![random_tensor(7, &[2, 3, 4, 4]), random_tensor(8, &[2, 3])], probes, |g, v| {
            let y = g.channel_bias(v[0], v[1]).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "silu",
        check_layer(4, vec![random_tensor(9, &[2, 2, 3, 3])], probes, |g, v| {
            let y = g.silu(v[0]);
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "axpby",
        check_layer(5, vec![random_tensor(10, &[2, 8]), random_tensor(11, &[2, 8])], probes, |g, v| {
            let y = g.axpby(0.3, v[0], -1.7, v[1]).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "scale_per_sample",
        check_layer(6, vec![random_tensor(12, &[2, 1, 3, 3])], probes, |g, v| {
            let y = g.scale_per_sample(v[0], &[0.4, -2.5]).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    let mask: Vec<f64> = (0..18).map(|i| if i % 4 == 0 { 0.0 } else { 1.25 }).collect();
    layers.push((
        "mask",
        check_layer(7, vec![random_tensor(13, &[2, 1, 3, 3])], probes, move |g, v| {
            let y = g.mask(v[0], mask.clone()).unwrap();
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "concat_channels",
        check_layer(8, vec![random_tensor(14, &[2, 1, 3, 3]), random_tensor(15, &[2, 2, 3, 3])], probes, |g, v| {
            let y = g.concat_channels(&[v[0], v[1]]).unwrap();
            let y = g.silu(y);
            g.weighted_mean_square(y, &w_out).unwrap()
        }),
    ));
    layers.push((
        "sum",
        check_layer(9, vec![random_tensor(16, &[2, 5])], probes, |g, v| {
            let y = g.silu(v[0]);
            g.sum(y)
        }),
    ));
    layers.push(("sfm_loss", sfm_loss_fd(60)?));

    let secs = t0.elapsed().as_secs_f64();
    let mut pass = secs < 120.0;
    let mut parts = Vec::new();
    for (name, (n, worst)) in &layers {
        pass &= *worst <= FD_REL_TOL;
        parts.push(format!("{name} {n}@{worst:.1e}"));
    }
    let sfm_coords = layers.last().map_or(0, |l| l.1 .0);
    pass &= sfm_coords >= 50;
    Ok((pass, format!("worst rel err per op (tol {FD_REL_TOL:e}): {}; {secs:.1}s (limit 120s)", parts.join(", "))))
}

// ---------------------------------------------------------------- 3

/// `int (F(y) - 1{y >= obs})^2 dy` by the midpoint rule between breakpoints,
/// exact for the piecewise-constant integrand.
fn crps_quadrature(members: &[f64], obs: f64) -> f64 {
    let mut pts: Vec<f64> = members.to_vec();
    pts.push(obs);
    pts.sort_by(f64::total_cmp);
    let m = members.len() as f64;
    let mut total = 0.0;
    for w in pts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let f = members.iter().filter(|&&v| v <= mid).count() as f64 / m;
        let h = if mid >= obs { 1.0 } else { 0.0 };
        total += (w[1] - w[0]) * (f - h).powi(2);
    }
    total
}

fn c3_crps_quadrature() -> Result<Verdict> {
    const TOL: f64 = 1e-8;
    let mut r = rng::stream(3, "acceptance/crps", 0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let m = 1 + (rng::uniform(&mut r, 0.0, 4.0) as usize).min(3);
        let scale = rng::uniform(&mut r, 0.1, 5.0);
        let mut ens = normals(&mut r, m, scale);
        let obs = scale * rng::normal(&mut r);
        let quad = crps_quadrature(&ens, obs);
        ens.sort_by(f64::total_cmp);
        worst = worst.max((crps_point(&ens, obs, CrpsEstimator::Biased) - quad).abs());
    }
    let single: Vec<Vec<f64>> = normals(&mut r, 200, 2.0).into_iter().map(|v| vec![v]).collect();
    let obs = normals(&mut r, 200, 2.0);
    let pred: Vec<f64> = single.iter().map(|e| e[0]).collect();
    let (c, a) = (crps_ensemble(&single, &obs)?, mae(&pred, &obs)?);
    Ok((
        worst <= TOL && c == a,
        format!("500 ensembles (m<=4) max |diff| {worst:.2e} (tol {TOL:e}); CRPS(m=1) {c} vs MAE {a}"),
    ))
}

// ---------------------------------------------------------------- 4

/// Points drawn as `center ~ N(0, 1)`, with the truth and every member i.i.d.
/// `N(center, s^2)`.
fn c4_calibration() -> Result<Verdict> {
    const POINTS: usize = 10_000;
    const M: usize = 64;
    const M_REF: usize = 1024;
    const REF_SAMPLES: usize = 1_000_000;
    let s = 0.7;
    let mut r = rng::stream(4, "acceptance/calibration", 0);
    let centers = normals(&mut r, POINTS, 1.0);
    let truth: Vec<f64> = centers.iter().map(|c| c + s * rng::normal(&mut r)).collect();
    let members: Vec<Vec<f64>> = centers.iter().map(|c| (0..M).map(|_| c + s * rng::normal(&mut r)).collect()).collect();
    let ratio = ssr(&members, &truth)?;
    let crps = crps_ensemble(&members, &truth)?;

    // Reference at m=1024 on the same truths: 10^6 member draws in ~977
    // pools, each pool (standardized) reused for a block of points.
    let pools = REF_SAMPLES / M_REF;
    let mut rr = rng::stream(4, "acceptance/calibration-ref", 0);
    let pool: Vec<Vec<f64>> = (0..pools).map(|_| normals(&mut rr, M_REF, s)).collect();
    let per_pool = POINTS.div_ceil(pools);
    let mut total = 0.0;
    for (p, (c, y)) in centers.iter().zip(&truth).enumerate() {
        let ens: Vec<f64> = pool[p / per_pool].iter().map(|z| c + z).collect();
        total += crps_ensemble(&[ens], &[*y])?;
    }
    let reference = total / POINTS as f64;
    let rel = (crps - reference).abs() / reference;
    Ok((
        (0.95..=1.05).contains(&ratio) && rel <= 0.03,
        format!("SSR {ratio:.4} (want [0.95, 1.05]); CRPS {crps:.5} vs m={M_REF} reference {reference:.5}, rel {:.2}% (limit 3%)", 100.0 * rel),
    ))
}

// ---------------------------------------------------------------- 5

fn ab3_error(dt: f64) -> f64 {
    // y' = -y with exact starting history.
    let exact = |t: f64| (-t).exp();
    let mut hist = AbHistory::seeded(vec![vec![-exact(-dt)], vec![-exact(-2.0 * dt)]]);
    let mut y = [1.0f64];
    for _ in 0..(1.0 / dt).round() as usize {
        let tend = vec![-y[0]];
        hist.advance(&mut y, tend, dt);
    }
    (y[0] - exact(1.0)).abs()
}

fn c5_simulator() -> Result<Verdict> {
    let mut pass = true;
    let mut notes = Vec::new();

    // (a)
    let errs: Vec<f64> = [0.04, 0.02, 0.01, 0.005].iter().map(|&dt| ab3_error(dt)).collect();
    let order = (errs[2] / errs[3]).log2();
    pass &= order >= 2.8;
    notes.push(format!("(a) AB3 order {order:.3} (want >= 2.8)"));

    // (b)
    let ws = SpectralWorkspace::new(64)?;
    let sim = Simulator::with_physics(Physics::inviscid(1e-3), &ws);
    let mut state = initial_condition(&ws, 0);
    let z0 = state.enstrophy_h(64);
    for _ in 0..1000 {
        sim.step_state(&mut state, &ws)?;
    }
    let drift = (state.enstrophy_h(64) - z0).abs() / z0;
    pass &= drift < 5e-3;
    notes.push(format!("(b) enstrophy drift {:.4}% (limit 0.5%)", 100.0 * drift));

    // (c)
    let cfg = SimConfig::default();
    let sim = Simulator::new(&cfg, &ws);
    let mut state = initial_condition(&ws, 1);
    let n2 = ws.len();
    let mut leaked = 0usize;
    for _ in 0..500 {
        sim.step_state(&mut state, &ws)?;
        for (i, c) in state.zeta_hat.iter().enumerate() {
            if !ws.dealias_mask[i % n2] && (c.re != 0.0 || c.im != 0.0) {
                leaked += 1;
            }
        }
    }
    pass &= leaked == 0;
    notes.push(format!("(c) {leaked} nonzero modes above the cutoff in 500 steps"));

    // (d)
    let mut mis = Vec::new();
    for tau in [3.0, 5.0, 10.0] {
        // Default trajectory length: shorter windows do not average out the
        // chaotic variability of the difference.
        let c = SimConfig { tau, seed: 0, ..SimConfig::default() };
        let traj = run_trajectory(&c)?;
        let mean = traj
            .snapshots
            .iter()
            .map(|s| s.zeta_l.iter().zip(&s.zeta_h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .sum::<f64>()
            / traj.snapshots.len() as f64;
        mis.push(mean);
    }
    let mono = mis[0] < mis[1] && mis[1] < mis[2];
    pass &= mono;
    notes.push(format!("(d) mean |zeta_l - zeta_h| {:.3} < {:.3} < {:.3}: {mono}", mis[0], mis[1], mis[2]));
    Ok((pass, notes.join("; ")))
}

// ---------------------------------------------------------------- pipeline

fn acceptance_root() -> PathBuf {
    std::env::var_os("SFM_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn lab_bin() -> PathBuf {
    std::env::var_os("SFM_LAB_BIN").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_BIN_EXE_sfm-lab")))
}

/// Run `sfm-lab` with `--root root`, appending its stderr to `root/pipeline.log`.
fn lab(root: &Path, args: &[&str]) -> Result<()> {
    fs::create_dir_all(root)?;
    let log = fs::OpenOptions::new().create(true).append(true).open(root.join("pipeline.log"))?;
    let status = Command::new(lab_bin())
        .arg("--root")
        .arg(root)
        .args(args)
        .stdout(log.try_clone()?)
        .stderr(log)
        .status()
        .with_context(|| format!("launching {}", lab_bin().display()))?;
    ensure!(status.success(), "sfm-lab {} exited with {status}", args.join(" "));
    Ok(())
}

const TRAIN_BUDGET: [&str; 8] = ["--steps", "5000", "--hidden", "48", "--blocks", "6", "--batch-size", "4"];
const SFM_ENCODER: [&str; 4] = ["--encoder", "conv1x1", "--condition-on-y", "true"];
const SCHEMES: [&str; 5] = ["sfm", "cfm", "cdm", "corrdiff", "regression"];

fn train_args<'a>(tau: &'a str, scheme: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "--tau", tau, "--scheme", scheme];
    a.extend(TRAIN_BUDGET);
    if scheme == "sfm" {
        a.extend(SFM_ENCODER);
    }
    a
}

/// Desk-scale pipeline shared by criteria 6 and 7.
fn desk_pipeline(root: &Path) -> Result<()> {
    lab(root, &["simulate", "--tau", "5,10", "--n-seeds", "8", "--grid-n", "64"])?;
    for tau in ["5", "10"] {
        lab(root, &["build", "--tau", tau, "--n-train", "2000", "--n-test", "200", "--gap", "5"])?;
    }
    lab(root, &train_args("5", "sfm"))?;
    for scheme in SCHEMES {
        lab(root, &train_args("10", scheme))?;
        lab(root, &["sample", "--tau", "10", "--scheme", scheme, "--n-cases", "40", "--case-stride", "5", "--members", "8"])?;
        lab(root, &["evaluate", "--tau", "10", "--scheme", scheme])?;
    }
    let reports: Vec<String> =
        SCHEMES.iter().map(|s| root.join("runs/tau10").join(s).join("eval").display().to_string()).collect();
    let mut args = vec!["table", "--out"];
    let table = root.join("table_tau10.csv").display().to_string();
    args.push(&table);
    args.extend(reports.iter().map(String::as_str));
    lab(root, &args)
}

fn read_log(path: &Path) -> Result<Vec<BTreeMap<String, f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().context("empty log")?.split(',').collect();
    lines
        .map(|l| {
            Ok(header.iter().zip(l.split(',')).map(|(h, v)| Ok((h.to_string(), v.parse::<f64>()?))).collect::<Result<_>>()?)
        })
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// ---------------------------------------------------------------- 6

fn c6_training() -> Result<Verdict> {
    let root = acceptance_root();
    desk_pipeline(&root)?;
    let run = root.join("runs/tau5/sfm");
    let log = read_log(&run.join("train_log.csv"))?;
    ensure!(log.len() >= 5000, "log has {} steps", log.len());
    let col = |k: &'static str| log.iter().map(move |r| r[k]);
    let first = mean(col("denoise_loss").take(100));
    let last = mean(col("denoise_loss").skip(log.len() - 100));
    let drop = 1.0 - last / first;
    let tail: Vec<f64> = col("sigma_z").skip(log.len() - 500).collect();
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let sz_change = (tail[tail.len() - 1] - tail[0]).abs() / tail[0].abs();
    let timing: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("timing.json"))?)?;
    let secs = timing["train_seconds"].as_f64().context("train_seconds")?;
    let pass = drop >= 0.5 && sz_change < 0.02 && secs <= 7200.0;
    Ok((
        pass,
        format!(
            "denoise loss {first:.4} -> {last:.4} ({:.1}% drop, want >= 50%); sigma_z last-500 change {:.2}% (range {lo:.4}..{hi:.4}, limit 2%); train time {:.1} min (limit 120)",
            100.0 * drop,
            100.0 * sz_change,
            secs / 60.0
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn read_report(dir: &Path) -> Result<SkillReport> {
    let p = dir.join("report.json");
    Ok(serde_json::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?)
}

fn c7_ordering() -> Result<Verdict> {
    let root = acceptance_root();
    desk_pipeline(&root)?;
    let mut scores = BTreeMap::new();
    for s in SCHEMES {
        let rep = read_report(&root.join("runs/tau10").join(s).join("eval"))?;
        scores.insert(s, rep.channels.first().cloned().context("no channels")?);
    }
    let sfm = &scores["sfm"];
    let reg = &scores["regression"];
    let sfm_ssr = sfm.ssr.unwrap_or(0.0);
    let (best_name, best_rmse) = scores
        .iter()
        .filter(|(k, _)| **k != "sfm")
        .map(|(k, c)| (*k, c.rmse))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .context("no baselines")?;
    let mandatory = sfm.crps <= reg.mae && sfm_ssr > 0.0;
    let soft = sfm.rmse <= 1.1 * best_rmse;
    let table: Vec<String> = scores.iter().map(|(k, c)| format!("{k} rmse {:.4} crps {:.4}", c.rmse, c.crps)).collect();
    Ok((
        mandatory,
        format!(
            "SFM CRPS {:.4} <= regression MAE {:.4}: {}; SFM SSR {sfm_ssr:.3} > 0: {}; SFM RMSE {:.4} <= 1.1 x best baseline ({best_name} {best_rmse:.4}): {} (reported only) [{}]",
            sfm.crps,
            reg.mae,
            sfm.crps <= reg.mae,
            sfm_ssr > 0.0,
            sfm.rmse,
            soft,
            table.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn small_pipeline(root: &Path) -> Result<Vec<u8>> {
    let common = ["--threads", "1", "--seed", "11"];
    let run = |args: &[&str]| {
        let mut a: Vec<&str> = args.to_vec();
        a.extend(common);
        lab(root, &a)
    };
    run(&["simulate", "--tau", "5", "--n-seeds", "2", "--grid-n", "32", "--n-steps", "2000", "--save-every", "0.05", "--spinup-time", "1"])?;
    run(&["build", "--tau", "5", "--n-train", "40", "--n-test", "8", "--gap", "2"])?;
    run(&["train", "--tau", "5", "--scheme", "sfm", "--steps", "30", "--hidden", "8", "--blocks", "1", "--validate-every", "10"])?;
    run(&["sample", "--tau", "5", "--scheme", "sfm", "--members", "4"])?;
    run(&["evaluate", "--tau", "5", "--scheme", "sfm"])?;
    let p = root.join("runs/tau5/sfm/eval/report.csv");
    fs::read(&p).with_context(|| format!("reading {}", p.display()))
}

fn c8_determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let a = small_pipeline(&tmp.path().join("a"))?;
    let b = small_pipeline(&tmp.path().join("b"))?;
    let same = a == b;
    let lines = String::from_utf8_lossy(&a).lines().count();
    Ok((same && lines > 1, format!("two fresh runs at --threads 1: report.csv {} ({} bytes, {lines} lines)", if same { "identical" } else { "differs" }, a.len())))
}

// ---------------------------------------------------------------- 9

/// Unconditional VE denoiser with uniform noise levels, built from tensor
/// primitives only.
fn reference_ve_losses(seed: u64, sz: f64, batches: &[Batch<f64>], net: &ConvNetSpec, adam: AdamConfig) -> Result<Vec<f64>> {
    let mut params = net.init::<f64>(seed, true)?;
    let lo = (1e-3 * sz).max(0.002);
    let mut out = Vec::new();
    for (step, b) in batches.iter().enumerate() {
        let step = step as u64;
        let sig = uniform_draws(seed, "train/sigma", step, b.len(), lo, sz);
        let mut eps = Tensor::<f64>::zeros(b.x.shape());
        rng::fill_normal(&mut rng::stream(seed, "train/eps", step), eps.data_mut());
        // E = 0 gives x_sigma = (1 - sigma / sigma_z) x + sigma eps.
        let shrink: Vec<f64> = sig.iter().map(|s| 1.0 - s / sz).collect();
        let noisy = b.x.scale_each(&shrink).zip_map(&eps.scale_each(&sig), |p, q| p + q)?;
        let mut g = Graph::new();
        let xin = g.constant(noisy);
        let d = net.forward(&mut g, &params, "", xin, Some(&sig), None)?;
        let xt = g.constant(b.x.clone());
        let err = g.sub(d, xt)?;
        let w: Vec<f64> = sig.iter().map(|s| (sz / s).powi(2)).collect();
        let loss = g.weighted_mean_square(err, &w)?;
        out.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        params.set_grads(&g, &grads, "");
        params.adam_step(&adam)?;
    }
    Ok(out)
}

fn c9_degenerate() -> Result<Verdict> {
    const STEPS: u64 = 100;
    const TOL: f64 = 1e-6;
    let c = SchemeConfig {
        encoder_kind: EncoderKind::Zero,
        lambda: Some(0.0),
        adaptive_sigma: false,
        sigma_z_init: 1.3,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        network: tiny_net(),
        ..SchemeConfig::for_scheme(Scheme::Sfm)
    };
    let seed = 17;
    let mut m = Sfm::<f64>::new(&c, 1, 1, seed)?;
    let batches: Vec<_> = (0..STEPS).map(|s| linear_batch(1000 + s, 3, 8, 1.0, 0.0)).collect();
    let got: Vec<f64> =
        batches.iter().enumerate().map(|(s, b)| Ok(m.train_step(b, s as u64)?.denoise_loss)).collect::<Result<_>>()?;
    let want = reference_ve_losses(seed, 1.3, &batches, &m.denoiser.spec, c.adam)?;
    let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
    let moved = (got[0] - got[got.len() - 1]).abs() > 0.0;
    Ok((
        got.len() == want.len() && worst <= TOL && moved,
        format!("{STEPS} steps, max deviation {worst:.2e} (tol {TOL:e}); loss {:.4} -> {:.4}", got[0], got[got.len() - 1]),
    ))
}
