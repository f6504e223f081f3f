use std::fs;
use std::path::{Path, PathBuf};

use cosq_core::allocator::{optimize, AllocatorConfig, LatentStats};
use cosq_core::channel::{noise_var_for_snr_db, realize_channel, TapProfile};
use cosq_core::library::{EpsilonGrid, QuantizerLibrary};
use cosq_core::quantizer::{
    analytic_distortion, design_channel_optimized, design_lloyd_max, BscVector, DesignConfig,
};
use cosq_core::simulator::{
    self, reports_to_csv, BerCheckRow, ExperimentConfig, SyntheticSourceConfig,
};
use cosq_core::{Error, TOOL_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{
    AllocateArgs, BerCheckArgs, BuildLibraryArgs, DesignArgs, DesignQuantizerArgs, GridArgs,
    SimulateArgs,
};

/// Why a command failed, and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, unreadable inputs or unwritable outputs.
    Usage(String),
    /// No feasible allocation exists.
    Infeasible(String),
    /// The command ran but its verification failed.
    Check(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Infeasible(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Infeasible(m) | Failure::Check(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NoFeasibleRate | Error::InfeasibleTarget { .. } => Failure::Infeasible(msg),
            Error::InvalidArgument(_)
            | Error::Domain(_)
            | Error::Malformed { .. }
            | Error::VersionMismatch { .. }
            | Error::Io { .. } => Failure::Usage(msg),
            _ => Failure::Other(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

fn grid_from(args: &GridArgs) -> Result<EpsilonGrid, Failure> {
    Ok(match &args.eps {
        Some(v) => EpsilonGrid::new(v.clone())?,
        None => EpsilonGrid::log_uniform(args.eps_lo, args.eps_hi, args.eps_count)?,
    })
}

fn design_from(args: &DesignArgs) -> Result<DesignConfig, Failure> {
    let cfg = DesignConfig {
        restarts: args.restarts,
        max_iters: args.max_iters,
        rel_tol: args.rel_tol,
        seed: args.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn build_library(args: &BuildLibraryArgs) -> CmdResult {
    let grid = grid_from(&args.grid)?;
    let design = design_from(&args.design)?;
    let lib = cosq_core::library::build_library(args.b_max, &grid, &design)?;

    // reference curve: the noiseless design evaluated on each noisy channel
    let mut csv =
        String::from("b,epsilon_index,epsilon,distortion,lloyd_max_distortion,active_codewords\n");
    for b in 1..=lib.b_max() {
        let lm = design_lloyd_max(b, &design)?;
        for (q, &eps) in grid.targets().iter().enumerate() {
            let qz = lib.quantizer(b, q).expect("cell exists");
            let lm_d = analytic_distortion(&lm, &BscVector::uniform(eps, b)?)?;
            csv.push_str(&format!(
                "{b},{q},{eps},{},{lm_d},{}\n",
                qz.normalized_distortion(),
                qz.active_count()
            ));
        }
    }

    write_file(&args.out, &lib.to_json_bytes())?;
    let csv_path = args.csv.clone().unwrap_or_else(|| {
        args.out
            .parent()
            .map(|d| d.join("distortion.csv"))
            .unwrap_or_else(|| PathBuf::from("distortion.csv"))
    });
    write_file(&csv_path, csv.as_bytes())?;
    println!(
        "wrote {} ({} cells, sha256 {}, seed {}) and {}",
        args.out.display(),
        lib.cell_count(),
        lib.digest(),
        design.seed,
        csv_path.display()
    );
    for w in lib.report().warnings(&lib) {
        eprintln!("warning: {w}");
    }
    Ok(())
}

pub fn design_quantizer(args: &DesignQuantizerArgs) -> CmdResult {
    let design = design_from(&args.design)?;
    let channel = BscVector::uniform(args.eps, args.bits)?;
    let q = design_channel_optimized(args.bits, &channel, &design)?;
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "seed": design.seed,
        "design": design,
        "bits": args.bits,
        "epsilon": args.eps,
        "thresholds": q.thresholds(),
        "levels": q.levels(),
        "region_codewords": q.region_codewords(),
        "active_codewords": q.active_count(),
        "distortion": q.normalized_distortion(),
    });
    print!("{}", String::from_utf8(pretty(&doc)).expect("utf-8"));
    Ok(())
}

fn load_library(path: &Path) -> Result<QuantizerLibrary, Failure> {
    Ok(QuantizerLibrary::load(path)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    means: Vec<f64>,
    variances: Vec<f64>,
}

fn allocation_stats(args: &AllocateArgs, lib: &QuantizerLibrary) -> Result<LatentStats, Failure> {
    let raw = if let Some(path) = &args.stats {
        let f: StatsFile = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        LatentStats::new(f.means, f.variances)?
    } else {
        let source = match &args.source {
            Some(path) => serde_json::from_slice::<SyntheticSourceConfig>(&read_file(path)?)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
            None => SyntheticSourceConfig {
                n_latents: args.n_latents,
                seed: args.source_seed,
                ..SyntheticSourceConfig::default()
            },
        };
        simulator::generate_stats(&source, lib.max_feasible_variance(), args.delta)?
    };
    Ok(raw.clamped(lib.max_feasible_variance()))
}

pub fn allocate(args: &AllocateArgs) -> CmdResult {
    let lib = load_library(&args.library)?;
    let stats = allocation_stats(args, &lib)?;
    let c = &args.channel;
    let profile = TapProfile::resolve(&c.profile)?;
    let channel = realize_channel(
        &profile,
        c.n_sc,
        c.spacing_hz,
        noise_var_for_snr_db(c.snr_db, c.power),
        c.channel_seed,
    )?;
    let cfg = AllocatorConfig {
        p_tot: c.power * c.n_sc as f64,
        delta: args.delta,
        seed: args.seed,
    };
    let plan = optimize(&lib, &stats, &channel, &cfg)?;
    write_file(&args.out, &plan.to_json_bytes())?;
    println!(
        "epsilon* {} | T_sym {} | sum b {} | sum m {} | power {:.6}/{} | seed {}",
        plan.epsilon_star,
        plan.t_sym,
        plan.payload_bits(),
        plan.r_sym(),
        plan.total_power(),
        plan.p_tot,
        plan.seed
    );
    log::info!(
        "channel {} at {} dB, plan written to {}",
        profile.label,
        c.snr_db,
        args.out.display()
    );

    if args.check {
        let reread = cosq_core::AllocationPlan::from_json_bytes(&read_file(&args.out)?)?;
        if reread != plan {
            return Err(Failure::Check(
                "plan did not survive a write/read round trip".into(),
            ));
        }
        let bad = reread.check(&lib, &stats);
        if !bad.is_empty() {
            return Err(Failure::Check(format!(
                "plan violates {} invariant(s): {}",
                bad.len(),
                bad.join("; ")
            )));
        }
        println!("check: plan satisfies all invariants");
    }
    Ok(())
}

/// Set `key` (dotted path) in a JSON object, parsing `value` as JSON when it
/// parses and as a string otherwise.
fn apply_override(doc: &mut Value, assignment: &str) -> CmdResult {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Failure::Usage(format!(
                "override {key:?}: {part:?} is not inside an object"
            ))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Ok(())
}

fn experiment_config(args: &SimulateArgs) -> Result<ExperimentConfig, Failure> {
    let mut doc = match &args.config {
        Some(path) => serde_json::from_slice::<Value>(&read_file(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => serde_json::to_value(ExperimentConfig::default()).expect("serializable"),
    };
    for o in &args.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg =
        ExperimentConfig::from_json_bytes(&serde_json::to_vec(&doc).expect("serializable"))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(lib) = &args.library {
        cfg.library = Some(lib.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ber_rows_doc(rows: &[BerCheckRow], seed: u64, bits: u64) -> (String, Vec<u8>) {
    let mut csv = String::from(BerCheckRow::CSV_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "seed": seed,
        "bits_per_point": bits,
        "rows": rows,
    });
    (csv, pretty(&doc))
}

fn ber_verdict(rows: &[BerCheckRow]) -> CmdResult {
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    if worst < 0.1 {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "worst relative BER error {worst:.4} is not below 0.1"
        )))
    }
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let cfg = experiment_config(args)?;
    let lib = match &cfg.library {
        Some(path) => load_library(path)?,
        None => {
            log::warn!("no library given, designing the default grid");
            cosq_core::library::build_library(
                cosq_core::library::DEFAULT_B_MAX,
                &EpsilonGrid::default(),
                &DesignConfig::default(),
            )?
        }
    };

    if args.ber_check {
        let rows = simulator::ber_check(lib.epsilons().targets(), args.bits, cfg.seed)?;
        let (csv, doc) = ber_rows_doc(&rows, cfg.seed, args.bits);
        write_file(&args.out_dir.join("ber-check.csv"), csv.as_bytes())?;
        write_file(&args.out_dir.join("ber-check.json"), &doc)?;
        print!("{csv}");
        return ber_verdict(&rows);
    }

    let reports = simulator::run_experiment(&cfg, &lib)?;
    let csv = reports_to_csv(&reports);
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "seed": cfg.seed,
        "config": cfg,
        "library_digest": lib.digest(),
        "reports": reports,
    });
    write_file(&args.out_dir.join("report.csv"), csv.as_bytes())?;
    write_file(&args.out_dir.join("report.json"), &pretty(&doc))?;
    print!("{csv}");

    let violations: usize = reports.iter().map(|r| r.violations).sum();
    if violations == 0 {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{violations} element(s) exceeded their distortion target"
        )))
    }
}

pub fn ber_check(args: &BerCheckArgs) -> CmdResult {
    let grid = grid_from(&args.grid)?;
    if args.bits == 0 {
        return Err(Failure::Usage("--bits must be positive".into()));
    }
    let rows = simulator::ber_check(grid.targets(), args.bits, args.seed)?;
    let (csv, doc) = ber_rows_doc(&rows, args.seed, args.bits);
    if let Some(out) = &args.out {
        write_file(out, csv.as_bytes())?;
        write_file(&out.with_extension("json"), &doc)?;
    }
    print!("{csv}");
    ber_verdict(&rows)
}
