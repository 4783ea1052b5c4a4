//! Subcommand implementations: instance generation, single runs, sweeps,
//! bound audits, and the eigenvector-recovery comparison.

use crate::svg::{self, Series};
use crate::{CliError, Common};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tfem::approx::{fit_relu_features, hardmax_gap_bound, Target};
use tfem::classical::{kmeanspp, lloyd, sphere_uniform};
use tfem::construct::{
    build_context, build_em_tf, build_em_tf_plus, build_pca_context, build_pca_tf,
    context_from_spd, extract_assignments, nearest_assignment, EmTfConfig, PcaTfConfig,
};
use tfem::gmm::{ari, generate_instance, misclass, nmi, one_hot, perm_loss, GmmInstance};
use tfem::linalg::{jacobi_eigh, Mat};
use tfem::parallel::map_indexed;
use tfem::transformer::{tf_forward, write_tfem};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Shortest decimal string that round-trips the f64 exactly; used for every
/// CSV number so outputs are byte-identical across runs.
fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// FNV-1a 64-bit digest, hex-encoded; identifies a construction report.
fn digest(s: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Deterministic seed mixer (splitmix64 over the concatenated words).
fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ a.wrapping_mul(0x9e3779b97f4a7c15) ^ b.wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// The four output subdirectories under `--out`.
struct OutDirs {
    instances: PathBuf,
    results: PathBuf,
    plots: PathBuf,
    reports: PathBuf,
}

fn out_dirs(out: &str) -> Result<OutDirs, CliError> {
    let root = PathBuf::from(out);
    let dirs = OutDirs {
        instances: root.join("instances"),
        results: root.join("results"),
        plots: root.join("plots"),
        reports: root.join("reports"),
    };
    for d in [&dirs.instances, &dirs.results, &dirs.plots, &dirs.reports] {
        fs::create_dir_all(d)?;
    }
    Ok(dirs)
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

/// Values from one section of the optional TOML config file.
struct Section(Option<toml::value::Table>);

impl Section {
    fn f64(&self, key: &str) -> Option<f64> {
        let v = self.0.as_ref()?.get(key)?;
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }

    fn usize(&self, key: &str) -> Option<usize> {
        let i = self.0.as_ref()?.get(key)?.as_integer()?;
        usize::try_from(i).ok()
    }

    fn string(&self, key: &str) -> Option<String> {
        Some(self.0.as_ref()?.get(key)?.as_str()?.to_string())
    }
}

fn section(common: &Common, name: &str) -> Result<Section, CliError> {
    let Some(path) = &common.config else {
        return Ok(Section(None));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("config file {path}: {e}")))?;
    let table: toml::value::Table = text
        .parse::<toml::Value>()
        .map_err(|e| CliError::Invalid(format!("config file {path}: {e}")))?
        .as_table()
        .cloned()
        .ok_or_else(|| CliError::Invalid(format!("config file {path}: not a table")))?;
    Ok(Section(table.get(name).and_then(|v| v.as_table()).cloned()))
}

// ---------------------------------------------------------------------------
// Arms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arm {
    Lloyd,
    Tf,
    TfPlus,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Lloyd => "lloyd",
            Arm::Tf => "tf",
            Arm::TfPlus => "tf_plus",
        }
    }
}

fn parse_arms(s: &str) -> Result<Vec<Arm>, CliError> {
    let mut arms = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let arm = match part {
            "lloyd" => Arm::Lloyd,
            "tf" => Arm::Tf,
            "tf_plus" => Arm::TfPlus,
            other => {
                return Err(CliError::Invalid(format!(
                    "unknown arm {other:?}; expected lloyd, tf, tf_plus"
                )))
            }
        };
        if !arms.contains(&arm) {
            arms.push(arm);
        }
    }
    if arms.is_empty() {
        return Err(CliError::Invalid("no arms requested".into()));
    }
    Ok(arms)
}

/// Metrics of one arm on one instance. `wall_ms` is excluded from CSV output
/// (it is the only non-deterministic field) and reported in JSON instead.
struct ArmOutcome {
    arm: &'static str,
    perm_loss: f64,
    ari: f64,
    nmi: f64,
    misclass: f64,
    wall_ms: f64,
    report_digest: String,
}

/// Run the requested arms on one instance from a shared k-means++ init.
/// `domain_radius` must dominate every point norm so the fitted atoms stay
/// in-domain (and can be shared across instances of a panel).
fn run_instance_arms(
    inst: &GmmInstance,
    tau: usize,
    m_heads: usize,
    beta: Option<f64>,
    arms: &[Arm],
    init_seed: u64,
    domain_radius: f64,
    emit_params: Option<&Path>,
) -> Result<Vec<ArmOutcome>, CliError> {
    let k = inst.k;
    let init = kmeanspp(&inst.x, k, init_seed)?;
    let mut outcomes = Vec::with_capacity(arms.len());
    for &arm in arms {
        let t0 = Instant::now();
        let (soft, zh, report_digest) = match arm {
            Arm::Lloyd => {
                let run = lloyd(&inst.x, &init, tau)?;
                let zh = run.assignment_at(tau).to_vec();
                (one_hot(&zh, k), zh, String::new())
            }
            Arm::Tf | Arm::TfPlus => {
                let mut cfg = EmTfConfig::new(k, inst.d, inst.n(), tau, m_heads, domain_radius);
                if let Some(b) = beta {
                    cfg.beta = b;
                }
                let (params, report) = match arm {
                    Arm::Tf => build_em_tf(&cfg)?,
                    _ => build_em_tf_plus(&cfg)?,
                };
                if let Some(dir) = emit_params {
                    let path = dir.join(format!("params_{}_seed{}.tfem", arm.name(), inst.seed));
                    let mut f = fs::File::create(path)?;
                    write_tfem(&params, &mut f)?;
                }
                let nearest = nearest_assignment(&inst.x, &init);
                let (h, _ly) = build_context(&inst.x, &nearest, &init)?;
                let out = tf_forward(&params, &h)?;
                let zh = extract_assignments(&out);
                let dg = digest(&serde_json::to_string(&report).unwrap_or_default());
                (out, zh, dg)
            }
        };
        outcomes.push(ArmOutcome {
            arm: arm.name(),
            perm_loss: perm_loss(&soft, &inst.z, k),
            ari: ari(&inst.z, &zh),
            nmi: nmi(&inst.z, &zh),
            misclass: misclass(&inst.z, &zh, k),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            report_digest,
        });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Data dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Points per cluster.
    #[arg(long)]
    per_cluster: Option<usize>,
    /// Minimum mean separation.
    #[arg(long)]
    delta: Option<f64>,
    /// Noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Minimum cluster fraction (defaults to balanced, 1/k).
    #[arg(long)]
    alpha: Option<f64>,
    /// How many instances to sample (seeds are `seed, seed+1, …`).
    #[arg(long)]
    count: Option<usize>,
}

pub fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let sec = section(&a.common, "gen")?;
    let k = a.k.or(sec.usize("k")).unwrap_or(2);
    let d = a.d.or(sec.usize("d")).unwrap_or(5);
    let per_cluster = a.per_cluster.or(sec.usize("per_cluster")).unwrap_or(50);
    let delta = a.delta.or(sec.f64("delta")).unwrap_or(4.0);
    let sigma = a.sigma.or(sec.f64("sigma")).unwrap_or(1.0);
    let alpha = a.alpha.or(sec.f64("alpha")).unwrap_or(1.0 / k as f64);
    let count = a.count.or(sec.usize("count")).unwrap_or(1);
    if count == 0 {
        return Err(CliError::Invalid("count must be >= 1".into()));
    }
    let dirs = out_dirs(&a.common.out)?;
    for i in 0..count {
        let seed = a.common.seed.wrapping_add(i as u64);
        let inst = generate_instance(k, d, per_cluster, delta, sigma, alpha, seed)?;
        let path = dirs.instances.join(format!("instance_seed{seed}.csv"));
        let mut buf = Vec::new();
        inst.write_csv(&mut buf)?;
        fs::write(&path, &buf)?;
        let pts: Vec<(f64, f64, usize)> = (0..inst.n())
            .map(|j| {
                let y = if d > 1 { inst.x.get(1, j) } else { 0.0 };
                (inst.x.get(0, j), y, inst.z[j])
            })
            .collect();
        svg::scatter_plot(
            &dirs.plots.join(format!("instance_seed{seed}.svg")),
            &format!("instance seed {seed} (k={k}, d={d}, sigma={sigma})"),
            &pts,
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Read the instance from a CSV written by `gen` instead of sampling.
    #[arg(long)]
    instance: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    per_cluster: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Rounds of the clustering iteration.
    #[arg(long)]
    tau: Option<usize>,
    /// Head budget per fitted approximator.
    #[arg(long)]
    m_heads: Option<usize>,
    /// Softmax sharpness (defaults to 50·ln N).
    #[arg(long)]
    beta: Option<f64>,
    /// Comma-separated subset of lloyd,tf,tf_plus.
    #[arg(long)]
    arms: Option<String>,
    /// Also write the constructed weights as .tfem containers.
    #[arg(long)]
    emit_params: bool,
}

pub fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let sec = section(&a.common, "run")?;
    let k = a.k.or(sec.usize("k")).unwrap_or(2);
    let d = a.d.or(sec.usize("d")).unwrap_or(5);
    let per_cluster = a.per_cluster.or(sec.usize("per_cluster")).unwrap_or(50);
    let delta = a.delta.or(sec.f64("delta")).unwrap_or(8.0);
    let sigma = a.sigma.or(sec.f64("sigma")).unwrap_or(1.0);
    let alpha = a.alpha.or(sec.f64("alpha")).unwrap_or(1.0 / k as f64);
    let tau = a.tau.or(sec.usize("tau")).unwrap_or(1);
    let m_heads = a.m_heads.or(sec.usize("m_heads")).unwrap_or(512);
    let beta = a.beta.or(sec.f64("beta"));
    let arms = parse_arms(&a.arms.or(sec.string("arms")).unwrap_or_else(|| "lloyd,tf,tf_plus".into()))?;
    let dirs = out_dirs(&a.common.out)?;

    let inst = match &a.instance {
        Some(path) => {
            let f = fs::File::open(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            GmmInstance::read_csv(&mut std::io::BufReader::new(f))?
        }
        None => generate_instance(k, d, per_cluster, delta, sigma, alpha, a.common.seed)?,
    };
    let radius = inst.max_point_norm() * 1.05 + 1.0;
    let emit = a.emit_params.then_some(dirs.results.as_path());
    let init_seed = mix_seed(a.common.seed, 1, 0);
    let t0 = Instant::now();
    let outcomes = run_instance_arms(&inst, tau, m_heads, beta, &arms, init_seed, radius, emit)?;

    let seed = a.common.seed;
    let mut csv = String::from("arm,perm_loss,ari,nmi,misclass\n");
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            o.arm,
            num(o.perm_loss),
            num(o.ari),
            num(o.nmi),
            num(o.misclass)
        ));
    }
    write_file(&dirs.results.join(format!("run_seed{seed}.csv")), &csv)?;

    // Inspection plot: the classical objective trajectory from the shared init.
    let init = kmeanspp(&inst.x, inst.k, init_seed)?;
    let oracle = lloyd(&inst.x, &init, tau)?;
    let curve: Vec<(f64, f64, f64)> =
        oracle.objectives.iter().enumerate().map(|(t, &o)| (t as f64, o, 0.0)).collect();
    svg::line_plot(
        &dirs.plots.join(format!("run_seed{seed}_objective.svg")),
        &format!("k-means objective, seed {seed}"),
        "round",
        "objective",
        &[Series { label: "lloyd".into(), points: curve }],
    )?;

    let report = json!({
        "command": "run",
        "seed": seed,
        "instance": {
            "k": inst.k, "d": inst.d, "n": inst.n(),
            "delta": inst.delta, "sigma": inst.sigma, "alpha": inst.alpha,
        },
        "tau": tau,
        "m_heads": m_heads,
        "beta": beta,
        "total_wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        "arms": outcomes.iter().map(|o| json!({
            "arm": o.arm,
            "perm_loss": o.perm_loss,
            "ari": o.ari,
            "nmi": o.nmi,
            "misclass": o.misclass,
            "wall_ms": o.wall_ms,
            "report_digest": o.report_digest,
        })).collect::<Vec<_>>(),
    });
    write_file(
        &dirs.reports.join(format!("run_seed{seed}.json")),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    for o in &outcomes {
        println!(
            "{}: perm_loss={} ari={} nmi={} misclass={}",
            o.arm,
            num(o.perm_loss),
            num(o.ari),
            num(o.nmi),
            num(o.misclass)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Swept variable: delta, dim, n (total points), classes, or imbalance.
    #[arg(long)]
    variable: Option<String>,
    /// Comma-separated grid values for the swept variable.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    per_cluster: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// Noise scale (lower end if --sigma-hi is given).
    #[arg(long)]
    sigma: Option<f64>,
    /// Upper end of a per-instance uniform sigma range.
    #[arg(long)]
    sigma_hi: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    m_heads: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Seeds (instances) per grid point.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated subset of lloyd,tf,tf_plus.
    #[arg(long)]
    arms: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SweepVar {
    Delta,
    Dim,
    N,
    Classes,
    Imbalance,
}

impl SweepVar {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "delta" => Ok(SweepVar::Delta),
            "dim" => Ok(SweepVar::Dim),
            "n" => Ok(SweepVar::N),
            "classes" => Ok(SweepVar::Classes),
            "imbalance" => Ok(SweepVar::Imbalance),
            other => Err(CliError::Invalid(format!(
                "unknown sweep variable {other:?}; expected delta, dim, n, classes, imbalance"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SweepVar::Delta => "delta",
            SweepVar::Dim => "dim",
            SweepVar::N => "n",
            SweepVar::Classes => "classes",
            SweepVar::Imbalance => "imbalance",
        }
    }
}

/// Instance parameters at one grid point.
#[derive(Clone, Copy)]
struct PointParams {
    k: usize,
    d: usize,
    per_cluster: usize,
    delta: f64,
    alpha: f64,
}

fn grid_values(s: &str) -> Result<Vec<f64>, CliError> {
    let vals: Result<Vec<f64>, _> =
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| CliError::Invalid(format!("bad grid value: {e}")))?;
    if vals.is_empty() {
        return Err(CliError::Invalid("empty grid".into()));
    }
    Ok(vals)
}

fn as_count(value: f64, what: &str) -> Result<usize, CliError> {
    if value.fract() != 0.0 || value < 1.0 || value > 1e9 {
        return Err(CliError::Invalid(format!("{what} grid value {value} is not a positive integer")));
    }
    Ok(value as usize)
}

pub fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let sec = section(&a.common, "sweep")?;
    let variable = SweepVar::parse(
        &a.variable
            .or(sec.string("variable"))
            .ok_or_else(|| CliError::Invalid("--variable is required".into()))?,
    )?;
    let grid = grid_values(
        &a.grid.or(sec.string("grid")).ok_or_else(|| CliError::Invalid("--grid is required".into()))?,
    )?;
    let k0 = a.k.or(sec.usize("k")).unwrap_or(2);
    let d0 = a.d.or(sec.usize("d")).unwrap_or(5);
    let per0 = a.per_cluster.or(sec.usize("per_cluster")).unwrap_or(50);
    let delta0 = a.delta.or(sec.f64("delta")).unwrap_or(8.0);
    let sigma_lo = a.sigma.or(sec.f64("sigma")).unwrap_or(1.0);
    let sigma_hi = a.sigma_hi.or(sec.f64("sigma_hi")).unwrap_or(sigma_lo);
    if sigma_hi < sigma_lo {
        return Err(CliError::Invalid(format!("sigma range [{sigma_lo}, {sigma_hi}] is empty")));
    }
    let alpha0 = a.alpha.or(sec.f64("alpha"));
    let tau = a.tau.or(sec.usize("tau")).unwrap_or(1);
    let m_heads = a.m_heads.or(sec.usize("m_heads")).unwrap_or(512);
    let beta = a.beta.or(sec.f64("beta"));
    let seeds = a.seeds.or(sec.usize("seeds")).unwrap_or(10);
    if seeds == 0 {
        return Err(CliError::Invalid("seeds must be >= 1".into()));
    }
    let arms = parse_arms(&a.arms.or(sec.string("arms")).unwrap_or_else(|| "lloyd,tf".into()))?;
    let dirs = out_dirs(&a.common.out)?;
    let base_seed = a.common.seed;

    // Resolve per-point parameters up front so invalid grids fail fast.
    let mut points = Vec::with_capacity(grid.len());
    for &value in &grid {
        let mut p = PointParams {
            k: k0,
            d: d0,
            per_cluster: per0,
            delta: delta0,
            alpha: alpha0.unwrap_or(1.0 / k0 as f64),
        };
        match variable {
            SweepVar::Delta => p.delta = value,
            SweepVar::Dim => p.d = as_count(value, "dim")?,
            SweepVar::N => {
                let total = as_count(value, "n")?;
                p.per_cluster = (total / p.k).max(1);
            }
            SweepVar::Classes => {
                p.k = as_count(value, "classes")?;
                p.alpha = alpha0.unwrap_or(1.0 / p.k as f64);
            }
            SweepVar::Imbalance => p.alpha = value,
        }
        points.push(p);
    }

    // Pre-size the fit domain per grid point so every seed shares one fitted
    // approximator (the fit cache keys on the domain).
    let sigma_for = |pi: usize, si: usize| -> f64 {
        if sigma_hi > sigma_lo {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base_seed, 7 + pi as u64, si as u64));
            rng.gen_range(sigma_lo..=sigma_hi)
        } else {
            sigma_lo
        }
    };
    let instance_of = |pi: usize, si: usize| -> Result<GmmInstance, CliError> {
        let p = points[pi];
        let seed = mix_seed(base_seed, pi as u64, si as u64);
        Ok(generate_instance(p.k, p.d, p.per_cluster, p.delta, sigma_for(pi, si), p.alpha, seed)?)
    };
    let needs_tf = arms.iter().any(|&a| a != Arm::Lloyd);
    let mut radii = vec![0.0f64; points.len()];
    if needs_tf {
        for pi in 0..points.len() {
            let mut r: f64 = 0.0;
            for si in 0..seeds {
                r = r.max(instance_of(pi, si)?.max_point_norm());
            }
            radii[pi] = r * 1.05 + 1.0;
        }
    }

    let t0 = Instant::now();
    let tasks: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|pi| (0..seeds).map(move |si| (pi, si))).collect();
    let arms_ref = &arms;
    let radii_ref = &radii;
    let instance_of_ref = &instance_of;
    let results: Vec<Result<(usize, usize, Vec<ArmOutcome>), CliError>> =
        map_indexed(tasks, move |(pi, si)| {
            let inst = instance_of_ref(pi, si)?;
            let init_seed = mix_seed(base_seed, 1_000_003 + pi as u64, si as u64);
            let outs = run_instance_arms(
                &inst,
                tau,
                m_heads,
                beta,
                arms_ref,
                init_seed,
                radii_ref[pi],
                None,
            )?;
            Ok((pi, si, outs))
        });
    let mut rows: Vec<(usize, usize, ArmOutcome)> = Vec::new();
    for r in results {
        let (pi, si, outs) = r?;
        for o in outs {
            rows.push((pi, si, o));
        }
    }
    rows.sort_by_key(|(pi, si, o)| (*pi, *si, arms.iter().position(|a| a.name() == o.arm)));

    let var = variable.name();
    let mut csv = format!("{var},seed_index,arm,perm_loss,ari,nmi,misclass,report_digest\n");
    for (pi, si, o) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            num(grid[*pi]),
            si,
            o.arm,
            num(o.perm_loss),
            num(o.ari),
            num(o.nmi),
            num(o.misclass),
            o.report_digest
        ));
    }
    write_file(&dirs.results.join(format!("sweep_{var}.csv")), &csv)?;

    // Aggregate mean/std per (grid point, arm, metric).
    let metric_names = ["perm_loss", "ari", "nmi", "misclass"];
    let metric_of = |o: &ArmOutcome, m: usize| match m {
        0 => o.perm_loss,
        1 => o.ari,
        2 => o.nmi,
        _ => o.misclass,
    };
    let mut agg = format!(
        "{var},arm,perm_loss_mean,perm_loss_std,ari_mean,ari_std,nmi_mean,nmi_std,misclass_mean,misclass_std\n"
    );
    let mut curves: Vec<Vec<Series>> = (0..metric_names.len())
        .map(|_| {
            arms.iter()
                .map(|a| Series { label: a.name().to_string(), points: Vec::new() })
                .collect()
        })
        .collect();
    for (pi, &value) in grid.iter().enumerate() {
        for (ai, arm) in arms.iter().enumerate() {
            let vals: Vec<&ArmOutcome> = rows
                .iter()
                .filter(|(p, _, o)| *p == pi && o.arm == arm.name())
                .map(|(_, _, o)| o)
                .collect();
            let n = vals.len().max(1) as f64;
            let mut cells = Vec::new();
            for m in 0..metric_names.len() {
                let mean = vals.iter().map(|o| metric_of(o, m)).sum::<f64>() / n;
                let var_ = vals.iter().map(|o| (metric_of(o, m) - mean).powi(2)).sum::<f64>() / n;
                let std = var_.sqrt();
                cells.push(num(mean));
                cells.push(num(std));
                curves[m][ai].points.push((value, mean, std));
            }
            agg.push_str(&format!("{},{},{}\n", num(value), arm.name(), cells.join(",")));
        }
    }
    write_file(&dirs.results.join(format!("sweep_{var}_agg.csv")), &agg)?;

    for (m, name) in metric_names.iter().enumerate() {
        svg::line_plot(
            &dirs.plots.join(format!("sweep_{var}_{name}.svg")),
            &format!("{name} vs {var} (mean ± std over {seeds} seeds)"),
            var,
            name,
            &curves[m],
        )?;
    }

    let report = json!({
        "command": "sweep",
        "seed": base_seed,
        "variable": var,
        "grid": grid,
        "fixed": {
            "k": k0, "d": d0, "per_cluster": per0, "delta": delta0,
            "sigma": [sigma_lo, sigma_hi], "alpha": alpha0,
            "tau": tau, "m_heads": m_heads, "beta": beta,
        },
        "seeds": seeds,
        "arms": arms.iter().map(|a| a.name()).collect::<Vec<_>>(),
        "rows": rows.len(),
        "total_wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        "wall_ms": rows.iter().map(|(pi, si, o)| json!({
            var: grid[*pi], "seed_index": si, "arm": o.arm, "wall_ms": o.wall_ms,
        })).collect::<Vec<_>>(),
    });
    write_file(
        &dirs.reports.join(format!("sweep_{var}.json")),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    println!("sweep {var}: {} rows over {} points x {seeds} seeds x {} arms", rows.len(), grid.len(), arms.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// audit-bounds
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    common: Common,
    /// Random (v, beta) draws for the softmax/hardmax bound audit.
    #[arg(long)]
    draws: Option<usize>,
    /// Atom count for the large end of the fit-decay audit (>= 256).
    #[arg(long)]
    decay_atoms: Option<usize>,
}

pub fn cmd_audit_bounds(a: AuditArgs) -> Result<(), CliError> {
    let sec = section(&a.common, "audit_bounds")?;
    let draws = a.draws.or(sec.usize("draws")).unwrap_or(10_000);
    if draws == 0 {
        return Err(CliError::Invalid("draws must be >= 1".into()));
    }
    let decay_atoms = a.decay_atoms.or(sec.usize("decay_atoms")).unwrap_or(4096);
    if decay_atoms < 256 {
        return Err(CliError::Invalid("decay_atoms must be >= 256".into()));
    }
    let dirs = out_dirs(&a.common.out)?;
    let seed = a.common.seed;
    let t0 = Instant::now();
    let mut checks: Vec<(String, usize, usize, f64)> = Vec::new(); // (check, cases, violations, worst)

    // 1. Softmax-to-hardmax gap bound on random draws.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1, 1));
    let mut violations = 0usize;
    let mut worst_margin = f64::INFINITY; // min(bound - gap)
    for _ in 0..draws {
        let d = rng.gen_range(2..=10);
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let beta = rng.gen_range(0.1..=100.0);
        let (gap, bound) = hardmax_gap_bound(&v, beta);
        worst_margin = worst_margin.min(bound - gap);
        // 1e-12 absolute slack for the rounding error of the measured gap
        // (its summands are O(1) softmax entries).
        if gap > bound * (1.0 + 1e-12) + 1e-12 {
            violations += 1;
        }
    }
    checks.push(("hardmax_gap_bound".into(), draws, violations, worst_margin));

    // 2. Feature-fit error decay: raising the atom count from 64 must cut
    //    the measured sup error of 1/x on [1, 10] by at least 4x.
    let f_small = fit_relu_features(Target::InvScalar, 1, 1.0, 10.0, 64, seed)?;
    let f_large = fit_relu_features(Target::InvScalar, 1, 1.0, 10.0, decay_atoms, seed)?;
    let decay_ok = f_large.sup_error < f_small.sup_error / 4.0;
    checks.push((
        format!("fit_error_decay_64_to_{decay_atoms}"),
        1,
        usize::from(!decay_ok),
        f_small.sup_error / f_large.sup_error.max(1e-300),
    ));

    // 3. Construction fidelity: constructed rounds equal classical Lloyd
    //    rounds on small separated instances.
    let mut fid_viol = 0usize;
    let cases = 3usize;
    for i in 0..cases {
        let inst = generate_instance(2, 4, 15, 8.0, 0.5, 0.5, mix_seed(seed, 2, i as u64))?;
        let init = kmeanspp(&inst.x, 2, mix_seed(seed, 3, i as u64))?;
        let oracle = lloyd(&inst.x, &init, 1)?;
        let radius = inst.max_point_norm() * 1.05 + 1.0;
        let cfg = EmTfConfig::new(2, 4, inst.n(), 1, 256, radius);
        let nearest = nearest_assignment(&inst.x, &init);
        let (h, _ly) = build_context(&inst.x, &nearest, &init)?;
        for built in [build_em_tf(&cfg)?, build_em_tf_plus(&cfg)?] {
            let out = tf_forward(&built.0, &h)?;
            if extract_assignments(&out) != oracle.assignment_at(1) {
                fid_viol += 1;
            }
        }
    }
    checks.push(("construction_fidelity".into(), 2 * cases, fid_viol, 0.0));

    // 4. Eigenvector recovery: constructed power iteration vs dense solver.
    let mut pca_viol = 0usize;
    let mut worst_cos = 1.0f64;
    {
        let d = 4;
        let a_mat = spd_with_spectrum(d, &[5.0, 3.0, 1.5, 0.8], mix_seed(seed, 4, 0));
        let (_vals, vecs) = jacobi_eigh(&a_mat).map_err(|e| CliError::Infeasible(e.to_string()))?;
        let x = context_from_spd(&a_mat)?;
        let (h, ly, _init) = build_pca_context(&x, 1, mix_seed(seed, 5, 0))?;
        let mut cfg = PcaTfConfig::new(d, 1, d, 25, 256);
        cfg.lam_lo = 0.5;
        cfg.lam_hi = 5.5;
        let (params, _report) = build_pca_tf(&cfg)?;
        let out = tf_forward(&params, &h)?;
        let v: Vec<f64> = (0..d).map(|r| out.get(ly.vout_block(0) + r - ly.vout, 0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let cos =
            (0..d).map(|r| v[r] * vecs.get(r, 0)).sum::<f64>().abs() / norm;
        worst_cos = worst_cos.min(cos);
        if cos < 0.98 {
            pca_viol += 1;
        }
    }
    checks.push(("pca_top_eigenvector".into(), 1, pca_viol, worst_cos));

    let mut csv = String::from("check,cases,violations,detail\n");
    for (name, cases, viols, detail) in &checks {
        csv.push_str(&format!("{name},{cases},{viols},{}\n", num(*detail)));
    }
    write_file(&dirs.results.join(format!("audit_seed{seed}.csv")), &csv)?;

    let series: Vec<Series> = vec![Series {
        label: "violations".into(),
        points: checks.iter().enumerate().map(|(i, c)| (i as f64, c.2 as f64, 0.0)).collect(),
    }];
    svg::line_plot(
        &dirs.plots.join(format!("audit_seed{seed}.svg")),
        "audit violations per check (0 = all bounds held)",
        "check index",
        "violations",
        &series,
    )?;

    let total: usize = checks.iter().map(|c| c.2).sum();
    let report = json!({
        "command": "audit_bounds",
        "seed": seed,
        "draws": draws,
        "decay_atoms": decay_atoms,
        "total_wall_ms": t0.elapsed().as_secs_f64() * 1e3,
        "checks": checks.iter().map(|(n, c, v, d)| json!({
            "check": n, "cases": c, "violations": v, "detail": d,
        })).collect::<Vec<_>>(),
        "passed": total == 0,
    });
    write_file(
        &dirs.reports.join(format!("audit_seed{seed}.json")),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    for (name, cases, viols, _) in &checks {
        println!("{name}: {viols}/{cases} violations");
    }
    if total > 0 {
        return Err(CliError::BoundViolation(format!("{total} audited bound violations")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pca
// ---------------------------------------------------------------------------

/// Random SPD matrix with the given spectrum: `Q diag(vals) Qᵀ` for a seeded
/// random orthogonal `Q` (Gram-Schmidt on Gaussian columns).
fn spd_with_spectrum(d: usize, vals: &[f64], seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Mat::zeros(d, d);
    for c in 0..d {
        loop {
            let mut v = sphere_uniform(d, &mut rng);
            for p in 0..c {
                let dot: f64 = (0..d).map(|r| v[r] * q.get(r, p)).sum();
                for r in 0..d {
                    v[r] -= dot * q.get(r, p);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for r in 0..d {
                    q.set(r, c, v[r] / n);
                }
                break;
            }
        }
    }
    let mut a = Mat::zeros(d, d);
    for (t, &lam) in vals.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                a.add_at(i, j, lam * q.get(i, t) * q.get(j, t));
            }
        }
    }
    a
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    common: Common,
    /// Matrix dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Eigenvectors to extract.
    #[arg(long)]
    k: Option<usize>,
    /// Total power-iteration steps (split across eigenvectors).
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    m_heads: Option<usize>,
    /// Number of random SPD matrices.
    #[arg(long)]
    count: Option<usize>,
    /// Smallest eigenvalue of the sampled spectra.
    #[arg(long)]
    lam_lo: Option<f64>,
    /// Largest eigenvalue of the sampled spectra.
    #[arg(long)]
    lam_hi: Option<f64>,
}

pub fn cmd_pca(a: PcaArgs) -> Result<(), CliError> {
    let sec = section(&a.common, "pca")?;
    let d = a.d.or(sec.usize("d")).unwrap_or(8);
    let k = a.k.or(sec.usize("k")).unwrap_or(3);
    let tau = a.tau.or(sec.usize("tau")).unwrap_or(60);
    let m_heads = a.m_heads.or(sec.usize("m_heads")).unwrap_or(512);
    let count = a.count.or(sec.usize("count")).unwrap_or(20);
    let lam_lo = a.lam_lo.or(sec.f64("lam_lo")).unwrap_or(0.5);
    let lam_hi = a.lam_hi.or(sec.f64("lam_hi")).unwrap_or(8.0);
    if count == 0 {
        return Err(CliError::Invalid("count must be >= 1".into()));
    }
    if !(lam_lo > 0.0 && lam_hi > lam_lo) {
        return Err(CliError::Invalid(format!("bad eigenvalue range [{lam_lo}, {lam_hi}]")));
    }
    if d < 2 || k < 1 || k > d {
        return Err(CliError::Invalid(format!("need d >= 2 and 1 <= k <= d, got d={d}, k={k}")));
    }
    let dirs = out_dirs(&a.common.out)?;
    let seed = a.common.seed;
    let t0 = Instant::now();

    // Evenly spaced spectrum with small seeded jitter: keeps every pairwise
    // gap bounded below so the comparison is well-posed.
    let spectrum_of = |mi: usize| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 10, mi as u64));
        let step = (lam_hi - lam_lo) / (d - 1) as f64;
        (0..d)
            .map(|i| lam_hi - i as f64 * step + rng.gen_range(-0.2..0.2) * step)
            .collect()
    };

    let tasks: Vec<usize> = (0..count).collect();
    let results: Vec<Result<Vec<(usize, f64, f64)>, CliError>> = map_indexed(tasks, |mi| {
        let vals = spectrum_of(mi);
        let a_mat = spd_with_spectrum(d, &vals, mix_seed(seed, 11, mi as u64));
        let (ref_vals, ref_vecs) =
            jacobi_eigh(&a_mat).map_err(|e| CliError::Infeasible(e.to_string()))?;
        let x = context_from_spd(&a_mat)?;
        let (h, ly, _init) = build_pca_context(&x, k, mix_seed(seed, 12, mi as u64))?;
        let mut cfg = PcaTfConfig::new(d, k, d, tau, m_heads);
        cfg.lam_lo = lam_lo * 0.5;
        cfg.lam_hi = lam_hi * 1.1;
        let (params, _report) = build_pca_tf(&cfg)?;
        let out = tf_forward(&params, &h)?;
        let mut rows = Vec::with_capacity(k);
        for eta in 0..k {
            let base = ly.vout_block(eta) - ly.vout;
            let v: Vec<f64> = (0..d).map(|r| out.get(base + r, 0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let cos = (0..d).map(|r| v[r] * ref_vecs.get(r, eta)).sum::<f64>().abs() / norm;
            rows.push((eta, ref_vals[eta], cos));
        }
        Ok(rows)
    });

    let mut csv = String::from("matrix,eigvec,eigenvalue,cosine\n");
    let mut per_eta: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); k];
    for (mi, r) in results.into_iter().enumerate() {
        for (eta, lam, cos) in r? {
            csv.push_str(&format!("{mi},{eta},{},{}\n", num(lam), num(cos)));
            per_eta[eta].push((mi as f64, cos, 0.0));
        }
    }
    write_file(&dirs.results.join(format!("pca_seed{seed}.csv")), &csv)?;

    let series: Vec<Series> = per_eta
        .into_iter()
        .enumerate()
        .map(|(eta, points)| Series { label: format!("eigvec {}", eta + 1), points })
        .collect();
    svg::line_plot(
        &dirs.plots.join(format!("pca_seed{seed}.svg")),
        &format!("eigenvector cosine vs dense solver (d={d}, tau={tau})"),
        "matrix index",
        "|cos|",
        &series,
    )?;

    let report = json!({
        "command": "pca",
        "seed": seed,
        "d": d, "k": k, "tau": tau, "m_heads": m_heads, "count": count,
        "lam_range": [lam_lo, lam_hi],
        "total_wall_ms": t0.elapsed().as_secs_f64() * 1e3,
    });
    write_file(
        &dirs.reports.join(format!("pca_seed{seed}.json")),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    println!("pca: {count} matrices, results in {}", dirs.results.display());
    Ok(())
}
