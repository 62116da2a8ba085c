use std::path::{Path, PathBuf};

use clap::{Subcommand, ValueEnum};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use rbm_cascade::config::{ExperimentConfig, PatternKind, TheoryKind};
use rbm_cascade::hysteresis::{antisymmetry_test, max_slope, run_loop};
use rbm_cascade::run::RunDir;
use rbm_cascade::spectra::{
    anneal_scan, dataset_pca, default_w_c_grid, effective_beta, fit_critical_w, mattis_chi_theory, mean_abs,
    paramagnetic_branch, relaxation_time, susceptibility_peak, svd_of_weights, ScanDirection,
};
use rbm_cascade::spin::SpinConvention;
use rbm_cascade::stats::linear_fit;
use rbm_cascade::synth::{
    aligned_correlated_patterns, build_correlated_patterns, solve_pair_magnetizations, MattisSpec, PairPatternSpec,
};
use rbm_cascade::theory::{
    initial_theory_weights, integrate_bb_shared_dynamics, integrate_bg_dynamics, integrate_pair_dynamics_full,
    pair_rates, predict_pair_trajectory, PairProjections,
};
use rbm_cascade::{Error, Result};

use crate::output::{f, read_table, write_json, Table};

pub const SVD_TRACK_COLUMNS: &[&str] = &["checkpoint", "t", "epoch", "alpha", "w_alpha", "overlap_alpha"];
pub const ANNEAL_COLUMNS: &[&str] = &[
    "checkpoint",
    "t",
    "alpha",
    "w_alpha",
    "chi_m_alpha",
    "chi_mbar_alpha",
    "mean_abs_m_alpha",
    "overlap_alpha",
    "chi_theory",
];
pub const SAMPLE_COLUMNS: &[&str] = &["checkpoint", "t", "chain", "alpha", "m_alpha", "mbar_alpha"];
pub const FSS_COLUMNS: &[&str] = &["run", "size", "w", "beta", "chi", "x", "y"];
pub const HYSTERESIS_COLUMNS: &[&str] = &["phase_leg", "h", "mean_m", "std_m"];
pub const RELAX_COLUMNS: &[&str] = &["checkpoint", "t", "w_1", "tau_exp", "flag"];
pub const THEORY_BG_COLUMNS: &[&str] = &["t", "updates", "u_xi", "hstar", "norm_w", "chi"];
pub const THEORY_BB_COLUMNS: &[&str] = &["t", "updates", "u_xi", "tau", "norm_w"];
pub const THEORY_PAIR_COLUMNS: &[&str] = &[
    "t",
    "updates",
    "u_eta1_1",
    "u_eta1_2",
    "u_eta2_1",
    "u_eta2_2",
    "w_1",
    "w_2",
    "n_minima",
    "linear_u_eta1_1",
    "linear_u_eta1_2",
    "linear_u_eta2_1",
    "linear_u_eta2_2",
];

#[derive(Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Cooling,
    Heating,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TheoryArg {
    Bg,
    Bb,
    Pair,
}

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Singular values of every checkpoint and their overlaps with the data's principal directions.
    SvdTrack {
        #[arg(long)]
        run: PathBuf,
        /// Modes to report.
        #[arg(long, default_value_t = 10)]
        modes: usize,
    },
    /// Anneal one set of chains through the checkpoints, measuring mode susceptibilities.
    AnnealScan {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Also write every chain's mode magnetizations for the first two modes.
        #[arg(long)]
        samples: bool,
    },
    /// Finite-size collapse of the leading-mode susceptibility over several runs.
    Fss {
        /// Run directories with a completed anneal scan (at least two).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Fit only the paramagnetic branch (up to each curve's maximum) with
        /// chi at or above this floor.
        #[arg(long, default_value_t = 1.0)]
        chi_min: f64,
        /// Fit every scanned point instead of the paramagnetic branch.
        #[arg(long)]
        whole_curve: bool,
    },
    /// Field loop along the leading singular direction of one checkpoint.
    Hysteresis {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint position; defaults to the last.
        #[arg(long)]
        checkpoint: Option<usize>,
    },
    /// Integrate the deterministic learning dynamics.
    Theory {
        /// Overrides `theory.kind` from the configuration.
        #[arg(value_enum)]
        kind: Option<TheoryArg>,
        /// Overrides `data.beta`.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Relaxation time of the leading mode along the checkpoints.
    RelaxTime {
        #[arg(long)]
        run: PathBuf,
        /// Measure every n-th checkpoint (the last is always measured).
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
}

pub fn run(cmd: AnalyzeCommand, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let dest = |run: &Path| out.map(Path::to_path_buf).unwrap_or_else(|| run.join("analysis"));
    match cmd {
        AnalyzeCommand::SvdTrack { run, modes } => svd_track(&RunDir::open(&run)?, modes, &dest(&run)),
        AnalyzeCommand::AnnealScan { run, direction, samples } => {
            let mut scan = cfg.scan.clone();
            if let Some(d) = direction {
                scan.direction = match d {
                    DirectionArg::Cooling => ScanDirection::Cooling,
                    DirectionArg::Heating => ScanDirection::Heating,
                };
            }
            scan_run(&RunDir::open(&run)?, &scan, samples, &dest(&run))
        }
        AnalyzeCommand::Fss { runs, chi_min, whole_curve } => {
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("fss"));
            fss(&runs, (!whole_curve).then_some(chi_min), &dir)
        }
        AnalyzeCommand::Hysteresis { run, checkpoint } => {
            hysteresis(&RunDir::open(&run)?, checkpoint, cfg, &dest(&run))
        }
        AnalyzeCommand::Theory { kind, beta } => {
            let mut cfg = cfg.clone();
            if let Some(k) = kind {
                cfg.theory.kind = match k {
                    TheoryArg::Bg => TheoryKind::Bg,
                    TheoryArg::Bb => TheoryKind::Bb,
                    TheoryArg::Pair => TheoryKind::Pair,
                };
            }
            if let Some(b) = beta {
                cfg.data.beta = b;
            }
            cfg.validate()?;
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("theory"));
            theory(&cfg, &dir)
        }
        AnalyzeCommand::RelaxTime { run, every } => relax(&RunDir::open(&run)?, cfg, every, &dest(&run)),
    }
}

fn learning_time(run: &RunDir, update: u64) -> f64 {
    run.manifest.config.learning_rate * update as f64
}

/// Principal directions of the run's data in the model's convention.
fn data_directions(run: &RunDir) -> Result<Array2<f64>> {
    let ds = run.dataset()?;
    Ok(dataset_pca(ds.to_spins(run.manifest.convention).view())?.directions)
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn svd_track(run: &RunDir, modes: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reference = data_directions(run)?;
    let mut table = Table::create(&dir.join("svd_track.csv"), SVD_TRACK_COLUMNS)?;
    for i in 0..run.n_checkpoints() {
        let (update, model) = run.checkpoint_model(i)?;
        let svd = svd_of_weights(&model)?;
        let epoch = run.manifest.checkpoints[i].epoch;
        let k = modes.min(svd.singular_values.len());
        for a in 0..k {
            let overlap = (a < reference.ncols()).then(|| svd.left.column(a).dot(&reference.column(a)).abs().min(1.0));
            table.row(&[
                i.to_string(),
                f(learning_time(run, update)),
                f(epoch),
                (a + 1).to_string(),
                f(svd.singular_values[a]),
                opt(overlap),
            ])?;
        }
    }
    table.finish()?;
    println!("wrote {}", dir.join("svd_track.csv").display());
    Ok(())
}

/// Singular value in the 0/1 convention, where the Mattis transition sits at 4.
fn w_binary(w: f64, convention: SpinConvention) -> f64 {
    4.0 * effective_beta(w, convention).sqrt()
}

fn scan_run(run: &RunDir, scan: &rbm_cascade::spectra::ScanConfig, samples: bool, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reference = data_directions(run)?;
    let conv = run.manifest.convention;
    let mut table = Table::create(&dir.join("anneal_scan.csv"), ANNEAL_COLUMNS)?;
    let mut sample_table =
        if samples { Some(Table::create(&dir.join("anneal_samples.csv"), SAMPLE_COLUMNS)?) } else { None };
    let mut leading: Vec<(f64, f64)> = Vec::new();
    let mut records = 0usize;
    anneal_scan(
        run.n_checkpoints(),
        |i| run.checkpoint_model(i),
        scan,
        Some(reference.view()),
        |rec| {
            let t = learning_time(run, rec.update_index);
            let abs_m = mean_abs(&rec.m);
            for a in 0..rec.chi_m.len() {
                let w = rec.singular_values[a];
                let theory = if a == 0 { mattis_chi_theory(w_binary(w, conv), 4.0).ok() } else { None };
                table.row(&[
                    rec.checkpoint.to_string(),
                    f(t),
                    (a + 1).to_string(),
                    f(w),
                    f(rec.chi_m[a]),
                    opt(rec.chi_m_hidden.get(a).copied()),
                    f(abs_m[a]),
                    opt(rec.overlaps.as_ref().and_then(|o| o.get(a).copied())),
                    opt(theory),
                ])?;
            }
            leading.push((rec.singular_values[0], rec.chi_m[0]));
            if let Some(st) = sample_table.as_mut() {
                let modes = rec.m.ncols().min(2);
                for (c, (row, hrow)) in rec.m.axis_iter(Axis(0)).zip(rec.m_hidden.axis_iter(Axis(0))).enumerate() {
                    for a in 0..modes {
                        st.row(&[
                            rec.checkpoint.to_string(),
                            f(t),
                            c.to_string(),
                            (a + 1).to_string(),
                            f(row[a]),
                            opt(hrow.get(a).copied()),
                        ])?;
                    }
                }
            }
            records += 1;
            Ok(())
        },
    )?;
    table.finish()?;
    if let Some(st) = sample_table {
        st.finish()?;
    }
    let peak = susceptibility_peak(&leading).ok();
    let summary = json!({
        "run": run.path.display().to_string(),
        "n_visible": run.manifest.n_visible,
        "n_hidden": run.manifest.n_hidden,
        "convention": conv,
        "checkpoints": records,
        "scan": scan,
        "peak": peak.map(|(w, chi)| json!({ "w": w, "chi": chi })),
    });
    write_json(&dir.join("anneal_scan.json"), &summary)?;
    println!("wrote {}", dir.join("anneal_scan.csv").display());
    Ok(())
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())))
}

fn parse(cell: &str, path: &Path) -> Result<f64> {
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse().map_err(|_| Error::Format(format!("{}: bad number {cell:?}", path.display())))
}

/// Leading-mode `(w, chi)` pairs from a run's anneal scan, `w` in the 0/1 convention.
fn leading_curve(run: &Path) -> Result<(f64, Vec<(f64, f64)>)> {
    let r = RunDir::open(run)?;
    let path = run.join("analysis").join("anneal_scan.csv");
    let (header, rows) = read_table(&path)?;
    let (ca, cw, cc) =
        (column(&header, "alpha", &path)?, column(&header, "w_alpha", &path)?, column(&header, "chi_m_alpha", &path)?);
    let mut pts = Vec::new();
    for row in rows.iter().filter(|r| r[ca] == "1") {
        let (w, chi) = (parse(&row[cw], &path)?, parse(&row[cc], &path)?);
        if w.is_finite() && chi.is_finite() {
            pts.push((w_binary(w, r.manifest.convention), chi));
        }
    }
    if pts.is_empty() {
        return Err(Error::Format(format!("{}: no leading-mode rows", path.display())));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let size = ((r.manifest.n_visible * r.manifest.n_hidden) as f64).sqrt();
    Ok((size, pts))
}

fn fss(runs: &[PathBuf], chi_min: Option<f64>, dir: &Path) -> Result<()> {
    if runs.len() < 2 {
        return Err(Error::Invalid("fss needs at least two runs".into()));
    }
    let mut curves = runs.iter().map(|r| leading_curve(r)).collect::<Result<Vec<_>>>()?;
    for (run, (_, pts)) in runs.iter().zip(curves.iter_mut()) {
        let Some(chi_min) = chi_min else { break };
        *pts = paramagnetic_branch(pts, chi_min);
        if pts.len() < 2 {
            return Err(Error::Invalid(format!(
                "{}: fewer than two paramagnetic points with chi >= {chi_min} (lower --chi-min)",
                run.display()
            )));
        }
    }
    let fit = fit_critical_w(&curves, &default_w_c_grid())?;
    std::fs::create_dir_all(dir)?;
    let mut table = Table::create(&dir.join("fss.csv"), FSS_COLUMNS)?;
    for (k, ((size, pts), collapsed)) in curves.iter().zip(&fit.collapse.collapsed).enumerate() {
        for (&(w, chi), &(x, y)) in pts.iter().zip(collapsed) {
            table.row(&[
                k.to_string(),
                f(*size),
                f(w),
                f(effective_beta(w, SpinConvention::Binary01)),
                f(chi),
                f(x),
                f(y),
            ])?;
        }
    }
    table.finish()?;
    let summary = json!({
        "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
        "sizes": curves.iter().map(|c| c.0).collect::<Vec<_>>(),
        "chi_min": chi_min,
        "w_c": fit.w_c,
        "w_c_at_grid_edge": fit.scan.first().is_some_and(|s| s.0 == fit.w_c) || fit.scan.last().is_some_and(|s| s.0 == fit.w_c),
        "beta_c": fit.collapse.beta_c,
        "spread": fit.collapse.spread,
        "raw_spread": fit.collapse.raw_spread,
        "scan": fit.scan.iter().map(|&(w, s)| json!({ "w_c": w, "spread": s })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("fss.json"), &summary)?;
    println!("w_c = {} (spread {:.3e}, raw {:.3e})", fit.w_c, fit.collapse.spread, fit.collapse.raw_spread);
    Ok(())
}

fn leading_direction(model: &rbm_cascade::spin::RbmModel) -> Result<(f64, Array1<f64>)> {
    let svd = svd_of_weights(model)?;
    let u = svd.left.column(0).to_owned();
    Ok((svd.singular_values[0], u))
}

fn hysteresis(run: &RunDir, checkpoint: Option<usize>, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let n = run.n_checkpoints();
    if n == 0 {
        return Err(Error::Invalid("run has no checkpoints".into()));
    }
    let idx = checkpoint.unwrap_or(n - 1);
    let (update, model) = run.checkpoint_model(idx)?;
    let (w1, u) = leading_direction(&model)?;
    let trace = run_loop(&model, u.view(), &cfg.hysteresis)?;
    let ks = antisymmetry_test(&trace)?;
    std::fs::create_dir_all(dir)?;
    let mut table = Table::create(&dir.join("hysteresis.csv"), HYSTERESIS_COLUMNS)?;
    for p in &trace.points {
        table.row(&[p.leg.name().to_string(), f(p.h), f(p.mean_m), f(p.std_m)])?;
    }
    table.finish()?;
    let summary = json!({
        "run": run.path.display().to_string(),
        "checkpoint": idx,
        "update_index": update,
        "t": learning_time(run, update),
        "w_1": w1,
        "h_max": trace.h_max,
        "field_step": cfg.hysteresis.field_step(model.n_visible()),
        "protocol": cfg.hysteresis,
        "loop_area": trace.loop_area,
        "loop_area_stderr": trace.loop_area_stderr,
        "ks_statistic": ks.statistic,
        "ks_p": ks.p_value,
        "max_slope": max_slope(&trace),
    });
    write_json(&dir.join("hysteresis.json"), &summary)?;
    println!("loop area {:.4e} +- {:.2e}", trace.loop_area, trace.loop_area_stderr);
    Ok(())
}

fn relax(run: &RunDir, cfg: &ExperimentConfig, every: usize, dir: &Path) -> Result<()> {
    let n = run.n_checkpoints();
    if every == 0 {
        return Err(Error::Invalid("--every must be positive".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut table = Table::create(&dir.join("relax_time.csv"), RELAX_COLUMNS)?;
    for i in (0..n).filter(|i| i % every == 0 || i + 1 == n) {
        let (update, model) = run.checkpoint_model(i)?;
        let (w1, u) = leading_direction(&model)?;
        let rt = relaxation_time(&model, u.view(), &cfg.relax)?;
        let flag = serde_json::to_value(rt.flag).expect("flag serializes");
        table.row(&[
            i.to_string(),
            f(learning_time(run, update)),
            f(w1),
            f(rt.tau),
            flag.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    table.finish()?;
    println!("wrote {}", dir.join("relax_time.csv").display());
    Ok(())
}

/// Slope of `ln |u|` against time over the recorded points where `linear` holds.
fn growth_rate(points: &[(f64, f64, bool)]) -> Option<f64> {
    let (ts, ys): (Vec<f64>, Vec<f64>) =
        points.iter().filter(|p| p.2 && p.1 != 0.0).map(|&(t, u, _)| (t, u.abs().ln())).unzip();
    linear_fit(&ts, &ys).ok().map(|fit| fit.slope)
}

fn pair_spec(cfg: &ExperimentConfig) -> Result<PairPatternSpec> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    match d.pattern {
        PatternKind::Random => build_correlated_patterns(d.n_visible, d.beta, d.kappa, &mut rng),
        PatternKind::Ones => aligned_correlated_patterns(d.n_visible, d.beta, d.kappa),
    }
}

fn mattis_spec(cfg: &ExperimentConfig) -> Result<MattisSpec> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    match d.pattern {
        PatternKind::Random => MattisSpec::random(d.n_visible, d.beta, &mut rng),
        PatternKind::Ones => MattisSpec::curie_weiss(d.n_visible, d.beta),
    }
}

fn theory(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let th = &cfg.theory;
    let every = th.record_every.max(1);
    let updates = |t: f64| t / th.epsilon;
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("theory.csv");
    let n = cfg.data.n_visible;
    let mut summary = json!({
        "kind": th.kind,
        "n_visible": n,
        "beta": cfg.data.beta,
        "seed": cfg.run.seed,
        "theory": th,
    });
    let (rate, predicted) = match th.kind {
        TheoryKind::Bg => {
            let spec = mattis_spec(cfg)?;
            let w0 = initial_theory_weights(n, 1, th.init_scale, cfg.run.seed);
            let traj = integrate_bg_dynamics(&spec, w0.column(0), th.epsilon, th.t_max, th.dt)?;
            let mut table = Table::create(&csv, THEORY_BG_COLUMNS)?;
            for (k, p) in traj.points.iter().enumerate() {
                if k % every != 0 && k + 1 != traj.points.len() {
                    continue;
                }
                let q = p.norm_w * p.norm_w;
                let chi = (q < 1.0).then(|| p.u_xi * p.u_xi / (1.0 - q));
                table.row(&[f(p.time), f(updates(p.time)), f(p.u_xi), f(p.hstar), f(p.norm_w), opt(chi)])?;
            }
            table.finish()?;
            let pts: Vec<_> = traj.points.iter().map(|p| (p.time, p.u_xi, p.hstar == 0.0 && p.time > 0.0)).collect();
            summary["m"] = json!(spec.magnetization());
            (growth_rate(&pts), spec.magnetization().powi(2))
        }
        TheoryKind::Bb => {
            let spec = mattis_spec(cfg)?;
            let w0 = initial_theory_weights(n, 1, th.init_scale, cfg.run.seed);
            let (points, _) = integrate_bb_shared_dynamics(&spec, th.alpha, w0.column(0), th.t_max, th.dt)?;
            let mut table = Table::create(&csv, THEORY_BB_COLUMNS)?;
            for (k, p) in points.iter().enumerate() {
                if k % every != 0 && k + 1 != points.len() {
                    continue;
                }
                table.row(&[f(p.time), f(updates(p.time)), f(p.u_xi), f(p.tau), f(p.norm_w)])?;
            }
            table.finish()?;
            let pts: Vec<_> = points.iter().map(|p| (p.time, p.u_xi, p.tau == 0.0 && p.time > 0.0)).collect();
            summary["m"] = json!(spec.magnetization());
            (growth_rate(&pts), spec.magnetization().powi(2) / th.alpha)
        }
        TheoryKind::Pair => {
            let pair = pair_spec(cfg)?;
            let sol = solve_pair_magnetizations(cfg.data.beta, cfg.data.kappa)?;
            let w0 = initial_theory_weights(n, 2, th.init_scale, cfg.run.seed);
            let init = PairProjections::of_weights(&pair, w0.view())?;
            let (rate1, rate2) = pair_rates(&pair, &sol);
            let linear = predict_pair_trajectory(&pair, &sol, &init, th.t_max, 1);
            let (points, _) = integrate_pair_dynamics_full(&pair, &sol, w0.view(), th.t_max, th.dt, every)?;
            let mut table = Table::create(&csv, THEORY_PAIR_COLUMNS)?;
            for p in &points {
                let (g1, g2) = ((rate1 * p.time).exp(), (rate2 * p.time).exp());
                table.row(&[
                    f(p.time),
                    f(updates(p.time)),
                    f(p.u_eta1[0]),
                    f(p.u_eta1[1]),
                    f(p.u_eta2[0]),
                    f(p.u_eta2[1]),
                    f(p.singular[0]),
                    f(p.singular[1]),
                    p.n_minima.to_string(),
                    f(init.z[0] * g1),
                    f(init.z[1] * g1),
                    f(init.z_tilde[0] * g2),
                    f(init.z_tilde[1] * g2),
                ])?;
            }
            table.finish()?;
            let pts: Vec<_> = points
                .iter()
                .map(|p| {
                    let u = p.u_eta1[0].hypot(p.u_eta1[1]);
                    (p.time, u, p.singular[0] < 1.0 && p.time > 0.0)
                })
                .collect();
            summary["kappa"] = json!(cfg.data.kappa);
            summary["magnetizations"] = json!(sol);
            summary["rate_eta2_predicted"] = json!(rate2);
            summary["t_I"] = json!(linear.t_i);
            summary["t_II"] = json!(linear.t_ii);
            summary["t_I_updates"] = json!(updates(linear.t_i));
            summary["t_II_updates"] = json!(updates(linear.t_ii));
            (growth_rate(&pts), rate1)
        }
    };
    summary["rate_predicted"] = json!(predicted);
    summary["rate_per_time"] = json!(rate);
    summary["rate_per_update"] = json!(rate.map(|r| r * th.epsilon));
    write_json(&dir.join("theory.json"), &summary)?;
    match rate {
        Some(r) => println!("growth rate {r:.6} per unit time (linear theory {predicted:.6})"),
        None => println!("too few linear-regime points to fit a growth rate"),
    }
    Ok(())
}
