use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};
use uobs_core::blowup::{self, FitMode, Label};
use uobs_core::io::atomic_write;
use uobs_core::pde::{self, BoundarySpec, ScalarGrid};
use uobs_core::renorm::{rate_fit, LimitClass, NoiseModel, RateFit, Renormalizer};
use uobs_core::sphere::BandQuadrature;
use uobs_core::zp::a_coefficients;
use uobs_core::{verify, Error, QuadraticForm};

use crate::config::{digest, ExperimentConfig, SCHEMA_VERSION};
use crate::Failure;

pub struct Options {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub allow_unconverged: bool,
    pub filter: Option<String>,
}

/// Resolved config with its digest, embedded in every output.
struct Provenance {
    config: ExperimentConfig,
    digest: String,
}

impl Provenance {
    fn new(config: ExperimentConfig) -> Self {
        let digest = digest(&config);
        Self { config, digest }
    }

    fn comment_lines(&self) -> String {
        format!("# schema_version={SCHEMA_VERSION}\n# config_digest={}\n", self.digest)
    }

    fn ply_comments(&self) -> Vec<String> {
        vec![format!("schema_version {SCHEMA_VERSION}"), format!("config_digest {}", self.digest)]
    }

    fn json<T: Serialize>(&self, payload: &T) -> Vec<u8> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            schema_version: u32,
            config_digest: &'a str,
            config: &'a ExperimentConfig,
            #[serde(flatten)]
            payload: &'a T,
        }
        let env = Envelope { schema_version: SCHEMA_VERSION, config_digest: &self.digest, config: &self.config, payload };
        let mut v = serde_json::to_vec_pretty(&env).expect("report serializes");
        v.push(b'\n');
        v
    }

    fn grid_header(&self, g: &ScalarGrid) -> uobs_core::pde::GridHeader {
        let mut h = g.header();
        h.schema_version = Some(SCHEMA_VERSION);
        h.config_digest = Some(self.digest.clone());
        h
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    atomic_write(path, bytes).map_err(Failure::from)
}

fn only<T>(f: impl FnOnce(&mut ExperimentConfig, T), block: T) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    f(&mut c, block);
    c
}

pub fn coeffs(cfg: ExperimentConfig, opts: &Options) -> Result<(), Failure> {
    let block = cfg.coeffs.unwrap_or_else(|| serde_json::from_str("{}").expect("defaults"));
    if block.deltas.is_empty() {
        return Err(Failure::config("coeffs.deltas is empty"));
    }
    if let Some(d) = block.deltas.iter().find(|d| !(0.0..=0.5).contains(*d)) {
        return Err(Failure::config(format!("coeffs.deltas entry {d} outside [0, 0.5]")));
    }
    let rule = BandQuadrature::new(block.level)?;
    let rows = block.deltas.iter().map(|&d| a_coefficients(d, &rule)).collect::<uobs_core::Result<Vec<_>>>()?;
    let prov = Provenance::new(only(|c, b| c.coeffs = Some(b), block));
    let mut csv = prov.comment_lines();
    csv.push_str("delta,a_x,a_y,a_z,a,kappa,kappa_le_4delta,kappa_ge_2delta\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.delta,
            r.a_x,
            r.a_y,
            r.a_z,
            r.a,
            r.kappa,
            r.kappa <= 4.0 * r.delta + 1e-4,
            r.kappa >= 2.0 * r.delta - 1e-4
        ));
    }
    write(&opts.out.join("coeffs.csv"), csv.as_bytes())
}

#[derive(Serialize)]
struct RunSummary {
    index: usize,
    file: String,
    delta0: f64,
    tau0: f64,
    noise: NoiseModel,
    seed: u64,
    label: &'static str,
    limit: LimitClass,
    steps_taken: usize,
    stopped_early: bool,
    monotone_tau: bool,
    final_tau: f64,
    final_delta: f64,
    final_alignment: f64,
    rate_fit: Option<RateFit>,
    rate_fit_error: Option<String>,
}

#[derive(Serialize)]
struct RenormSummary {
    increment_bounds: [f64; 2],
    unconverged: usize,
    runs: Vec<RunSummary>,
}

pub fn renorm(cfg: ExperimentConfig, opts: &Options) -> Result<(), Failure> {
    let mut block = cfg.renorm.ok_or_else(|| Failure::config("config has no renorm block"))?;
    if let Some(s) = opts.seed {
        block.seed = s;
        block.seeds = None;
    }
    let seeds = block.seeds.get_or_insert_with(|| vec![block.seed]).clone();
    for (name, empty) in [
        ("delta0", block.delta0.is_empty()),
        ("tau0", block.tau0.is_empty()),
        ("noise", block.noise.is_empty()),
        ("seeds", seeds.is_empty()),
        ("increment_grid", block.increment_grid.is_empty()),
    ] {
        if empty {
            return Err(Failure::config(format!("renorm.{name} is empty")));
        }
    }
    if let Some(d) = block.delta0.iter().find(|d| !(0.0..=0.5).contains(*d)) {
        return Err(Failure::config(format!("renorm.delta0 entry {d} outside [0, 0.5]")));
    }
    if let Some(t) = block.tau0.iter().find(|t| !(**t > 0.0)) {
        return Err(Failure::config(format!("renorm.tau0 entry {t} is not positive")));
    }
    if block.steps == 0 {
        return Err(Failure::config("renorm.steps must be positive"));
    }

    let mut matrix = Vec::new();
    for &d in &block.delta0 {
        for &t in &block.tau0 {
            for &n in &block.noise {
                for &s in &seeds {
                    matrix.push((d, t, n, s));
                }
            }
        }
    }
    let r = Renormalizer::new();
    let (lo, hi) = r.increment_bounds(block.amplitude, &block.increment_grid)?;
    let trajectories = matrix
        .par_iter()
        .map(|&(d, t, n, s)| r.simulate(&QuadraticForm::p_delta(d).scale(t), block.amplitude, block.steps, n, s))
        .collect::<uobs_core::Result<Vec<_>>>()?;

    let prov = Provenance::new(only(|c, b| c.renorm = Some(b), block));
    let mut runs = Vec::new();
    let mut unconverged = 0;
    for (i, (traj, &(d, t, n, s))) in trajectories.iter().zip(&matrix).enumerate() {
        let file = format!("trajectory_{i:03}.csv");
        write(&opts.out.join(&file), (prov.comment_lines() + &traj.to_csv()).as_bytes())?;
        let (fit, fit_err) = match rate_fit(traj) {
            Ok(f) => (Some(f), None),
            Err(e) => {
                if matches!(e, Error::NotConverged { .. }) {
                    unconverged += 1;
                }
                (None, Some(e.to_string()))
            }
        };
        let last = traj.last();
        runs.push(RunSummary {
            index: i,
            file,
            delta0: d,
            tau0: t,
            noise: n,
            seed: s,
            label: traj.limit.label(),
            limit: traj.limit,
            steps_taken: last.k,
            stopped_early: traj.stopped_early,
            monotone_tau: traj.monotone,
            final_tau: last.tau,
            final_delta: last.delta,
            final_alignment: last.alignment,
            rate_fit: fit,
            rate_fit_error: fit_err,
        });
    }
    let summary = RenormSummary { increment_bounds: [lo, hi], unconverged, runs };
    write(&opts.out.join("summary.json"), &prov.json(&summary))?;
    if unconverged > 0 && !opts.allow_unconverged {
        return Err(Failure {
            code: 3,
            message: format!("{unconverged} trajectories did not converge (see summary.json)"),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    report: &'a pde::SolveReport,
    positive_set_empty: bool,
    /// Max error over `|x| ≤ error_radius` relative to the max of the manufactured field there.
    relative_error: Option<f64>,
    grid_file: &'static str,
}

pub fn solve(cfg: ExperimentConfig, opts: &Options) -> Result<(), Failure> {
    let block = cfg.solve.ok_or_else(|| Failure::config("config has no solve block"))?;
    block.problem.validate()?;
    let outcome = pde::solve_detailed(&block.problem)?;
    let relative_error = match &block.problem.boundary {
        BoundarySpec::Manufactured(m) => {
            let field = m.build()?;
            let (mut err, mut scale) = (0.0f64, 0.0f64);
            for (i, &v) in outcome.u.values.iter().enumerate() {
                let x = outcome.u.point_of(i);
                if x.norm() <= block.error_radius {
                    let exact = uobs_core::pde::Field::value(&field, &x);
                    err = err.max((v - exact).abs());
                    scale = scale.max(exact.abs());
                }
            }
            (scale > 0.0).then(|| err / scale)
        }
        _ => None,
    };
    let prov = Provenance::new(only(|c, b| c.solve = Some(b), block));
    outcome
        .u
        .write_with_header(&opts.out.join("u.f64"), &prov.grid_header(&outcome.u))?;
    let out = SolveOutput {
        report: &outcome.report,
        positive_set_empty: outcome.report.positive_nodes == 0,
        relative_error,
        grid_file: "u.f64",
    };
    write(&opts.out.join("report.json"), &prov.json(&out))?;
    if !outcome.report.converged && !opts.allow_unconverged {
        return Err(Failure {
            code: 4,
            message: format!(
                "solver stopped after {} outer iterations (last change {:e})",
                outcome.report.outer_iterations, outcome.report.last_change
            ),
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct BlowupOutput<'a> {
    classification: &'a blowup::Classification,
    truncated: bool,
    levels_recorded: usize,
    affine_value: f64,
    affine_gradient: [f64; 3],
    mesh_file: Option<&'static str>,
    mesh_vertices: usize,
    mesh_triangles: usize,
    mesh_error: Option<String>,
    fit: Option<blowup::ConeFit>,
    fit_error: Option<String>,
}

pub fn blowup(cfg: ExperimentConfig, opts: &Options) -> Result<(), Failure> {
    let block = cfg.blowup.ok_or_else(|| Failure::config("config has no blowup block"))?;
    let u = ScalarGrid::read(Path::new(&block.grid))?;
    let psi = match &block.psi {
        Some(p) => {
            let g = ScalarGrid::read(Path::new(p))?;
            if !g.same_layout(&u) {
                return Err(Failure::config("blowup.psi grid layout differs from blowup.grid"));
            }
            g
        }
        None => u.like(0.0),
    };
    let x0 = Vector3::from(block.x0);
    let res = blowup::blowup_sequence(&u, &x0, block.r0, block.levels, &block.classifier)?;
    let (mesh, mesh_error) = match blowup::free_boundary(&u, &psi) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mode = block.fit_mode.or(match res.classification.label {
        Label::S1Plus | Label::S1Minus => Some(FitMode::Cone),
        Label::S2 => Some(FitMode::Cross),
        Label::Regular | Label::Undetermined => None,
    });
    let (fit, fit_error) = match (&mesh, mode) {
        (Some(m), Some(mode)) => match blowup::cone_fit(m, &x0, mode, &block.fit) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        },
        _ => (None, None),
    };

    let prov = Provenance::new(only(|c, b| c.blowup = Some(b), block));
    write(&opts.out.join("blowup.csv"), (prov.comment_lines() + &res.to_csv()).as_bytes())?;
    if let Some(m) = &mesh {
        write(&opts.out.join("free_boundary.ply"), m.to_ply(&prov.ply_comments()).as_bytes())?;
    }
    let out = BlowupOutput {
        classification: &res.classification,
        truncated: res.truncated,
        levels_recorded: res.records.len(),
        affine_value: res.affine_value,
        affine_gradient: res.affine_gradient.into(),
        mesh_file: mesh.as_ref().map(|_| "free_boundary.ply"),
        mesh_vertices: mesh.as_ref().map_or(0, |m| m.vertices.len()),
        mesh_triangles: mesh.as_ref().map_or(0, |m| m.triangles.len()),
        mesh_error,
        fit,
        fit_error,
    };
    write(&opts.out.join("classification.json"), &prov.json(&out))
}

pub fn verify(cfg: ExperimentConfig, opts: &Options) -> Result<(), Failure> {
    let mut block = cfg.verify.unwrap_or_default();
    if let Some(s) = opts.seed {
        block.seed = s;
    }
    let report = verify::run(&block, opts.filter.as_deref());
    let text = report.render();
    print!("{text}");
    let prov = Provenance::new(only(|c, b| c.verify = Some(b), block));
    write(&opts.out.join("verify_report.txt"), (prov.comment_lines() + &text).as_bytes())?;
    if report.outcomes.is_empty() {
        return Err(Failure::config("filter matched no checks"));
    }
    let failed = report.outcomes.iter().filter(|o| !o.pass).count();
    if failed > 0 {
        return Err(Failure { code: 1, message: format!("{failed} checks failed") });
    }
    Ok(())
}
