use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use delay_mfg::det_solvers::{solve_afbodde, solve_mean_case1, MeanMode, PicardOptions};
use delay_mfg::experiments::{nash_scan, rate_scan, Equilibrium, Execution};
use delay_mfg::model::{validate_spec, DEFAULT_EPD};
use delay_mfg::nce::{compute_m0_case1, compute_m0_general, NceField, NceOptions};
use delay_mfg::oracle::{brute_force_optimize, decomposition_check, tree_solve_hamiltonian, ScenarioTree, Split};
use delay_mfg::population_sim::{simulate_population, Coupling, NoiseConfig};
use delay_mfg::strategies::{
    case1_feedback, case2_solve, case2_strategy, strategy_from_ypath, CostateTiming, Strategy,
};
use delay_mfg::{ModelFile, ModelSpec};
use serde::Serialize;
use serde_json::json;

use crate::svg::{loglog, Series};
use crate::{Command, ExperimentConfig, Failure, EXIT_CHECK, EXIT_CONFIG, EXIT_VALIDATION};

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    pass: bool,
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    spec: ModelSpec,
    artifacts: Vec<String>,
    checks: Vec<Check>,
    notes: Vec<String>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.config.out.join(name)
    }

    fn writer(&mut self, name: &str) -> Result<BufWriter<File>, Failure> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn check(&mut self, name: &str, value: f64, pass: bool) {
        self.checks.push(Check {
            name: name.to_string(),
            value,
            pass,
        });
    }

    fn note(&mut self, line: String) {
        self.notes.push(line);
    }

    fn execution(&self) -> Execution {
        if self.config.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn load_spec(config: &ExperimentConfig) -> Result<ModelSpec, Failure> {
    let file = ModelFile::load(&config.model)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot load model {}: {e}", config.model.display())))?;
    let spec = match config.grid_h {
        Some(h) => file.sample(h)?,
        None => file.sample_default()?,
    };
    Ok(spec)
}

pub fn run(config: &ExperimentConfig, model_hash: &str) -> Result<(), Failure> {
    let spec = load_spec(config)?;
    std::fs::create_dir_all(&config.out)?;
    let mut run = Run {
        config,
        spec,
        artifacts: Vec::new(),
        checks: Vec::new(),
        notes: Vec::new(),
    };
    let report = validate_spec(&run.spec, DEFAULT_EPD)?;
    if config.command != Command::Validate && !report.ok {
        return Err(Failure::new(
            EXIT_VALIDATION,
            format!("model violates the standing assumptions: {:?}", report.violations),
        ));
    }
    match config.command {
        Command::Validate => validate(&mut run, &report)?,
        Command::Nce => nce(&mut run)?,
        Command::Case1 => case1(&mut run)?,
        Command::Case2 => case2(&mut run)?,
        Command::Simulate => simulate(&mut run)?,
        Command::OracleCheck => oracle_check(&mut run)?,
        Command::RateScan => rate(&mut run)?,
        Command::NashScan => nash(&mut run)?,
    }
    finish(&mut run, model_hash)?;
    if config.command == Command::Validate && !report.ok {
        return Err(Failure::new(EXIT_VALIDATION, "model violates the standing assumptions"));
    }
    if run.checks.iter().any(|c| !c.pass) {
        return Err(Failure::new(EXIT_CHECK, "one or more checks failed (see summary.txt)"));
    }
    Ok(())
}

fn finish(run: &mut Run, model_hash: &str) -> Result<(), Failure> {
    let g = run.spec.grid;
    let manifest = json!({
        "command": run.config.command,
        "config": run.config,
        "model_sha256": model_hash,
        "seed": run.config.seed,
        "grid": {
            "horizon": g.horizon,
            "step": g.step,
            "steps": g.steps,
            "delta": g.delta(),
            "theta": g.theta(),
        },
        "versions": {
            "delay-mfg": delay_mfg_version(),
            "delay-mfg-cli": env!("CARGO_PKG_VERSION"),
        },
        "artifacts": run.artifacts,
        "checks": run.checks,
    });
    std::fs::write(
        run.config.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Failure::new(1, e.to_string()))? + "\n",
    )?;

    let mut summary = String::new();
    summary.push_str(&format!(
        "{} on {} (h = {}, K = {})\n",
        serde_json::to_value(run.config.command).unwrap_or_default().as_str().unwrap_or(""),
        run.config.model.display(),
        g.step,
        g.steps
    ));
    for n in &run.notes {
        summary.push_str(n);
        summary.push('\n');
    }
    for c in &run.checks {
        summary.push_str(&format!("check {}: {} ({:e})\n", c.name, if c.pass { "ok" } else { "FAILED" }, c.value));
    }
    std::fs::write(run.config.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn delay_mfg_version() -> &'static str {
    // Both crates share the workspace version.
    env!("CARGO_PKG_VERSION")
}

fn validate(run: &mut Run, report: &delay_mfg::model::ValidationReport) -> Result<(), Failure> {
    let mut w = run.writer("validation.json")?;
    serde_json::to_writer_pretty(&mut w, report).map_err(|e| Failure::new(1, e.to_string()))?;
    w.flush()?;
    if report.ok {
        run.note("all standing assumptions hold".into());
    } else {
        for v in &report.violations {
            run.note(format!("violation {:?} at node {:?} ({:e})", v.assumption, v.node, v.diagnostic));
        }
    }
    Ok(())
}

fn nce(run: &mut Run) -> Result<(), Failure> {
    let picard = PicardOptions::default();
    let sol = compute_m0_general(&run.spec, &picard, &NceOptions::default())?;
    let path = run.path("nce.csv");
    sol.field.save_csv(&run.spec.grid, path)?;
    for (i, r) in sol.reports.iter().enumerate() {
        run.note(format!("system {}: {} iterations, residual {:e}", i + 1, r.iterations, r.residual));
        run.check(&format!("picard_residual_{}", i + 1), r.residual, r.residual <= 1e-9);
    }
    if run.spec.is_case_one() {
        let (field, _) = compute_m0_case1(&run.spec, &picard)?;
        let gap = sol.field.sup_distance(&field);
        let path = run.path("nce_case1.csv");
        field.save_csv(&run.spec.grid, path)?;
        run.check("construction_gap", gap, gap <= 1e-8);
    }
    Ok(())
}

fn case1(run: &mut Run) -> Result<(), Failure> {
    let (mean, report) = solve_mean_case1(&run.spec, &PicardOptions::default())?;
    let rule = case1_feedback(&run.spec, &mean.riccati, &mean.phi)?;
    let path = run.path("feedback.json");
    rule.save_json(path)?;
    let n = run.spec.dims.n;
    let grid = run.spec.grid;
    let mut w = run.writer("riccati.csv")?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).flat_map(|i| (0..n).map(move |j| format!("P_{i}{j}"))));
    header.extend((0..n).map(|i| format!("phi_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for s in 0..=grid.steps {
        let mut row = vec![grid.time(s as isize).to_string()];
        let p = &mean.riccati.p[s];
        row.extend((0..n).flat_map(|i| (0..n).map(move |j| p[(i, j)].to_string())));
        row.extend(mean.phi.phi[s].iter().map(|v| v.to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    run.note(format!("P(0) = {:?}", mean.riccati.p[0].as_slice()));
    run.check("picard_residual", report.residual, report.residual <= 1e-9);
    Ok(())
}

fn case2(run: &mut Run) -> Result<(), Failure> {
    let y = case2_solve(&run.spec)?;
    let rule = case2_strategy(&run.spec, &y)?;
    let grid = run.spec.grid;
    let delta = grid.delta();
    let controls = match &rule {
        Strategy::OpenLoop { controls, .. } => controls.clone(),
        _ => unreachable!("case 2 strategies are open loop"),
    };
    let mut w = run.writer("case2.csv")?;
    writeln!(w, "t,interval,ybar,ybar_shifted,control")?;
    for s in 0..=grid.steps {
        let t = grid.time(s as isize);
        // Interval k covers [T-(k+1)δ, T-kδ].
        let interval = (((grid.horizon - t) / delta) - 1e-9).floor().max(0.0) as usize;
        let u = controls.get(s).map_or(String::new(), |c| c[0].to_string());
        writeln!(w, "{t},{interval},{},{},{u}", y.value(t), y.value(t + delta))?;
    }
    w.flush()?;
    let path = run.path("case2_strategy.csv");
    rule.write_csv(&grid, File::create(path)?)?;
    run.note(format!("ybar(0) = {}", y.value(0.0)));
    Ok(())
}

/// Equilibrium rule and field for any model: the feedback rule when the
/// dynamics carry no delay terms, the mean open-loop rule otherwise.
fn equilibrium(spec: &ModelSpec) -> Result<(Strategy, NceField), Failure> {
    let picard = PicardOptions::default();
    if spec.is_case_one() {
        let eq = Equilibrium::case1(spec, &picard)?;
        return Ok((eq.rule, eq.field));
    }
    let sol = compute_m0_general(spec, &picard, &NceOptions::default())?;
    let (mean, _) = solve_afbodde(spec, Some(&sol.field.m0), MeanMode::Eq12, &picard)?;
    let rule = strategy_from_ypath(spec, &mean.y, CostateTiming::StepAhead)?;
    Ok((rule, sol.field))
}

fn simulate(run: &mut Run) -> Result<(), Failure> {
    let (rule, field) = equilibrium(&run.spec)?;
    let agents = run.config.n_list[0];
    let reps = run.config.reps.min(1000);
    let noise = NoiseConfig {
        seed: run.config.seed,
        agents,
        replications: reps,
    };
    let grid = run.spec.grid;
    let mut w = run.writer("paths.csv")?;
    writeln!(w, "mode,rep,agent,t,x_0,u_0")?;
    for rep in 0..reps as u32 {
        for (mode, coupling) in [("coupled", Coupling::Centralized), ("limit", Coupling::Decentralized(&field))] {
            let paths = simulate_population(&run.spec, std::slice::from_ref(&rule), &noise, rep, coupling)?;
            for (j, (x, u)) in paths.states.iter().zip(&paths.controls).enumerate() {
                for s in 0..=grid.steps as isize {
                    let uv = if s < grid.steps as isize { u.at(s)[0].to_string() } else { String::new() };
                    writeln!(w, "{mode},{rep},{j},{},{},{uv}", grid.time(s), x.at(s)[0])?;
                }
            }
        }
    }
    w.flush()?;
    run.note(format!("{reps} replications of {agents} agents (first component written)"));
    Ok(())
}

fn oracle_check(run: &mut Run) -> Result<(), Failure> {
    let picard = PicardOptions::default();
    let spec = run.spec.clone();
    let sol = compute_m0_general(&spec, &picard, &NceOptions::default())?;
    let tree = ScenarioTree::for_spec(&spec);
    let exact = tree_solve_hamiltonian(&spec, &tree, Some(&sol.field)).map_err(|e| {
        Failure::new(EXIT_CONFIG, format!("{e}; choose a coarser --grid-h for the tree oracle"))
    })?;
    let brute = brute_force_optimize(&spec, &tree, Some(&sol.field))?;
    let gap = exact
        .u
        .iter()
        .flatten()
        .zip(brute.u.iter().flatten())
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    let split = Split {
        a1: &spec.initial * 0.5,
        a2: &spec.initial * 0.5,
        xi1: spec.state_history.iter().map(|v| v * 0.5).collect(),
        xi2: spec.state_history.iter().map(|v| v * 0.5).collect(),
    };
    let decomposition = decomposition_check(&spec, Some(&sol.field), &split)?;
    let path = run.path("tree.json");
    exact.save_json(path)?;
    run.note(format!("tree with {} nodes", tree.node_count()));
    run.check("stationarity_residual", exact.residuals.stationarity, exact.residuals.stationarity <= 1e-10);
    run.check("system_residual", exact.residuals.max(), exact.residuals.max() <= 1e-10);
    run.check("brute_force_gap", gap, gap <= 1e-9);
    run.check("decomposition_residual", decomposition, decomposition <= 1e-9);
    Ok(())
}

fn require_case_one(spec: &ModelSpec) -> Result<(), Failure> {
    if spec.is_case_one() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VALIDATION, "population sweeps need Atil = Btil = 0 (feedback equilibrium)"))
    }
}

fn rate(run: &mut Run) -> Result<(), Failure> {
    require_case_one(&run.spec)?;
    let eq = Equilibrium::case1(&run.spec, &PicardOptions::default())?;
    let scan = rate_scan(&eq, &run.config.n_list, run.config.reps, run.config.seed, run.execution())?;
    scan.write_csv(run.writer("rate_scan.csv")?)?;
    scan.write_fits_csv(run.writer("rate_fits.csv")?)?;
    for (name, fit) in scan.fits() {
        run.note(format!("{name}: slope {:.3}, r2 {:.3}", fit.slope, fit.r2));
    }
    let c = scan.control_average_fit.slope;
    let s = scan.state_gap_fit.slope;
    run.check("control_average_slope", c, (-1.3..=-0.7).contains(&c));
    run.check("state_gap_slope", s, (-1.3..=-0.7).contains(&s));
    if run.config.plot {
        let ns: Vec<f64> = scan.rows.iter().map(|r| r.agents as f64).collect();
        let series = |label, color, values: Vec<f64>, fit: delay_mfg::population_sim::RateFit| Series {
            label,
            color,
            points: ns.iter().copied().zip(values).collect(),
            fit: Some((fit.slope, fit.intercept)),
        };
        let svg = loglog(
            "Monte Carlo gaps",
            "N",
            &[
                series("control average", "#1f77b4", scan.rows.iter().map(|r| r.control_average.value).collect(), scan.control_average_fit),
                series("state gap", "#d62728", scan.rows.iter().map(|r| r.state_gap.value).collect(), scan.state_gap_fit),
                series("exact cost gap", "#2ca02c", scan.rows.iter().map(|r| r.exact_cost_gap).collect(), scan.exact_cost_gap_fit),
            ],
        );
        let path = run.path("rate_scan.svg");
        std::fs::write(path, svg)?;
    }
    Ok(())
}

fn nash(run: &mut Run) -> Result<(), Failure> {
    require_case_one(&run.spec)?;
    let eq = Equilibrium::case1(&run.spec, &PicardOptions::default())?;
    let scan = nash_scan(&eq, &run.config.n_list, run.execution())?;
    scan.write_csv(run.writer("nash_scan.csv")?)?;
    for r in &scan.rows {
        run.note(format!("N = {}: eps = {:e}, envelope {:e}", r.agents, r.epsilon, r.envelope));
    }
    run.check("eps_non_increasing", scan.rows.last().map_or(0.0, |r| r.epsilon), scan.non_increasing());
    run.check("eps_within_envelope", scan.constant, scan.within_envelope());
    if run.config.plot {
        let pts = |f: &dyn Fn(&delay_mfg::experiments::NashRow) -> f64| {
            scan.rows.iter().map(|r| (r.agents as f64, f(r))).collect::<Vec<_>>()
        };
        let svg = loglog(
            "Sampled Nash gap",
            "N",
            &[
                Series {
                    label: "eps(N)",
                    color: "#1f77b4",
                    points: pts(&|r| r.epsilon),
                    fit: None,
                },
                Series {
                    label: "C/sqrt(N)",
                    color: "#7f7f7f",
                    points: pts(&|r| r.envelope),
                    fit: None,
                },
            ],
        );
        let path = run.path("nash_scan.svg");
        std::fs::write(path, svg)?;
    }
    Ok(())
}
