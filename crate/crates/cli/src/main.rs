//! `crt`: conditional randomization tests from the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod data;
mod report;
mod study;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crt_core::applications::conformal::Density;
use crt_core::applications::{
    fisher_exact, prediction_set, ConformalProblem, LeastSquaresResiduals, Side, TwoByTwoTable,
};
use crt_core::conditioning::Partition;
use crt_core::engine::{mc_p_value, p_value};
use crt_core::error::{CrtError, Result};
use crt_core::inference::{invert_constant_effect, symmetric_grid};
use crt_core::stepped_wedge::{
    quasi_setup, simulate, PermutationScheme, SimulationParams, SteppedWedgeDesign, TrialStatistic,
};

use config::{DesignConfig, ModeName, NullConfig, StudyConfig};
use report::{
    ConformalReport, ConformalRow, FisherReport, InvertReport, Provenance, TestReport, QUASI_ASSUMPTION,
};

#[derive(Parser)]
#[command(name = "crt", version, about = "Conditional randomization tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StudyArgs {
    /// Trial data: unit_id,cluster,period,treatment,outcome
    data: PathBuf,
    /// TOML study configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    resamples: Option<usize>,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Conditional randomization test of the configured null
    Test(StudyArgs),
    /// Confidence interval for a constant effect by test inversion
    Invert(StudyArgs),
    /// Simulate a stepped-wedge trial as CSV
    SimulateSw(SimulateArgs),
    /// Permutation test treating crossover, time and/or ward as randomized
    Quasi {
        #[command(flatten)]
        study: StudyArgs,
        /// Permuted variables, e.g. `ward` or `time+ward`; overrides the config
        #[arg(long)]
        permute: Option<String>,
    },
    /// Fisher's exact test for a 2x2 table
    Fisher(FisherArgs),
    /// Full conformal prediction set for the last row
    Conformal(ConformalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 6)]
    wards: usize,
    #[arg(long, default_value_t = 7)]
    periods: usize,
    #[arg(long, default_value_t = 5)]
    per_cell: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    tau: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    trend: f64,
    #[arg(long, default_value_t = 0.5)]
    cluster_sd: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the true crossover order here
    #[arg(long)]
    order_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Greater,
    Less,
    TwoSided,
}

#[derive(Args)]
struct FisherArgs {
    /// Trial data with binary treatment and outcome; alternative to --table
    data: Option<PathBuf>,
    /// Counts n00,n01,n10,n11 (treatment, outcome)
    #[arg(long, value_delimiter = ',')]
    table: Option<Vec<u64>>,
    #[arg(long, value_enum, default_value = "greater")]
    side: SideArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConformalArgs {
    /// Covariate columns, y (empty on the last row) and optional weight
    data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = crt_core::applications::conformal::DEFAULT_CANDIDATE_POINTS)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CrtError::Data(format!("{}: {e}", path.display())))
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CrtError::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(args: &StudyArgs) -> Result<StudyConfig> {
    let mut config = match &args.config {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .map_err(|_| CrtError::Config(format!("{}: not UTF-8", p.display())))?;
            StudyConfig::from_toml(&text)?
        }
        None => StudyConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(b) = args.resamples {
        config.resamples = b;
    }
    config.validate()?;
    Ok(config)
}

struct Loaded {
    config: StudyConfig,
    records: data::TrialRecords,
    provenance: Provenance,
}

fn load(args: &StudyArgs) -> Result<Loaded> {
    let config = load_config(args)?;
    let bytes = read(&args.data)?;
    let records = data::read_trial(bytes.as_slice())?;
    Ok(Loaded {
        provenance: Provenance {
            config_hash: config.hash(),
            data_sha256: sha256(&bytes),
        },
        config,
        records,
    })
}

fn run_test(loaded: Loaded, command: &'static str) -> Result<TestReport> {
    let s = study::build_study(&loaded.records, &loaded.config)?;
    let r = p_value(
        &s.model,
        &s.partition,
        &s.null,
        &s.statistic,
        &s.observed,
        loaded.config.mode(),
        loaded.config.seed,
    )?;
    Ok(TestReport::new(
        command,
        &s.statistic,
        r,
        loaded.config.seed,
        loaded.records.len(),
        loaded.provenance,
    ))
}

fn cmd_test(args: StudyArgs) -> Result<()> {
    let report = run_test(load(&args)?, "test")?;
    emit(args.out.as_deref(), &report::to_json(&report))
}

fn cmd_invert(args: StudyArgs) -> Result<()> {
    let loaded = load(&args)?;
    let s = study::build_study(&loaded.records, &loaded.config)?;
    let grid = loaded
        .config
        .grid
        .as_ref()
        .map(|g| symmetric_grid((g.lo + g.hi) / 2.0, (g.hi - g.lo) / 2.0, g.points));
    let r = invert_constant_effect(
        &s.model,
        &s.partition,
        &s.exposure,
        &s.statistic,
        &s.observed,
        grid.as_deref(),
        loaded.config.level,
        loaded.config.mode(),
        loaded.config.seed,
    )?;
    let report = InvertReport::new(&s.statistic, r, loaded.provenance);
    emit(args.out.as_deref(), &report::to_json(&report))
}

fn cmd_quasi(args: StudyArgs, permute: Option<String>) -> Result<()> {
    let mut loaded = load(&args)?;
    let scheme_text = permute.or_else(|| loaded.config.permute.clone()).ok_or_else(|| {
        CrtError::Config("choose the permuted variables with --permute or `permute`".into())
    })?;
    let scheme = PermutationScheme::parse(&scheme_text)?;
    loaded.config.permute = Some(scheme.name());
    loaded.provenance.config_hash = loaded.config.hash();

    let report = if scheme.is_randomization() {
        loaded.config.design = DesignConfig::Crossover;
        loaded.provenance.config_hash = loaded.config.hash();
        let mut report = run_test(loaded, "quasi")?;
        report.permute = Some(scheme.name());
        report
    } else {
        let config = &loaded.config;
        if config.null != NullConfig::Sharp {
            return Err(CrtError::Config(
                "quasi-randomization tests support only the sharp null".into(),
            ));
        }
        let resamples = match config.mode {
            ModeName::Mc => config.resamples,
            ModeName::Exact => {
                return Err(CrtError::Config(format!(
                    "permutation scheme {} has no enumerable space; use --mode mc",
                    scheme.name()
                )))
            }
        };
        eprintln!("{QUASI_ASSUMPTION}");
        let trial = loaded.records.to_trial()?;
        let mut setup = quasi_setup(&trial, scheme, TrialStatistic::parse(&config.statistic.name)?);
        if let Some(o) = config.statistic.orientation {
            setup.statistic = setup.statistic.with_orientation(o.into());
        }
        let null = crt_core::hypothesis::NullHypothesis::fisher_sharp(setup.observed.n_units());
        let r = mc_p_value(
            &setup.model,
            &Partition::unconditional(&setup.model),
            &null,
            &setup.statistic,
            &setup.observed,
            resamples,
            config.seed,
        )?;
        let mut report = TestReport::new(
            "quasi",
            &setup.statistic,
            r,
            config.seed,
            loaded.records.len(),
            loaded.provenance,
        );
        report.label = "QUASI";
        report.assumption = Some(QUASI_ASSUMPTION);
        report.permute = Some(scheme.name());
        report
    };
    emit(args.out.as_deref(), &report::to_json(&report))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut params = SimulationParams::new(
        SteppedWedgeDesign::new(args.wards, args.periods, args.per_cell)?,
        args.tau,
        args.trend,
        args.seed,
    );
    params.cluster_sd = args.cluster_sd;
    params.noise_sd = args.noise_sd;
    let trial = simulate(&params)?;
    let mut buf = Vec::new();
    data::write_trial(&mut buf, &trial)?;
    emit(
        args.out.as_deref(),
        std::str::from_utf8(&buf).expect("CSV is UTF-8"),
    )?;
    let order: Vec<String> = trial.order.iter().map(|c| c.to_string()).collect();
    eprintln!("crossover order: {}", order.join(" "));
    if let Some(p) = &args.order_out {
        let text = serde_json::to_string(&serde_json::json!({ "order": trial.order.labels() }))
            .expect("order serializes");
        fs::write(p, text + "\n").map_err(|e| CrtError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_fisher(args: FisherArgs) -> Result<()> {
    let table = match (&args.table, &args.data) {
        (Some(t), None) if t.len() == 4 => TwoByTwoTable::new(t[0], t[1], t[2], t[3]),
        (Some(t), None) => {
            return Err(CrtError::Argument(format!(
                "--table needs 4 counts, got {}",
                t.len()
            )))
        }
        (None, Some(path)) => {
            let records = data::read_trial(read(path)?.as_slice())?;
            let z: Vec<_> = records
                .treatment
                .iter()
                .map(|&t| t as crt_core::assignment::Label)
                .collect();
            TwoByTwoTable::from_data(&z, &records.outcomes)?
        }
        _ => return Err(CrtError::Argument("give either a data file or --table".into())),
    };
    let (side, name) = match args.side {
        SideArg::Greater => (Side::Greater, "greater"),
        SideArg::Less => (Side::Less, "less"),
        SideArg::TwoSided => (Side::TwoSided, "two_sided"),
    };
    let report = FisherReport {
        schema: report::SCHEMA,
        command: "fisher",
        table: [[table.n00, table.n01], [table.n10, table.n11]],
        side: name,
        p_value: fisher_exact(&table, side),
        point_probability: table.point_probability_by_rows(),
    };
    emit(args.out.as_deref(), &report::to_json(&report))
}

fn cmd_conformal(args: ConformalArgs) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CrtError::Argument(format!("alpha {} outside (0, 1)", args.alpha)));
    }
    if args.points < 2 {
        return Err(CrtError::Argument("need at least 2 candidate points".into()));
    }
    let bytes = read(&args.data)?;
    let records = data::read_conformal(bytes.as_slice())?;
    let n = records.x.len();
    let mut problem = ConformalProblem::new(
        records.x.clone(),
        records.y.clone(),
        Arc::new(LeastSquaresResiduals),
    )?;
    let weighted = records.weights.is_some();
    if let Some(w) = records.weights {
        let rows: Vec<(Vec<f64>, f64)> = records.x.into_iter().zip(w).collect();
        for (i, (x, wi)) in rows.iter().enumerate() {
            if rows[..i].iter().any(|(y, wj)| y == x && wj != wi) {
                return Err(CrtError::Data(format!(
                    "row {}: same covariates as an earlier row with another weight",
                    i + 1
                )));
            }
        }
        let target: Density = Arc::new(move |x: &[f64]| {
            rows.iter()
                .find(|(r, _)| r.as_slice() == x)
                .map_or(0.0, |(_, w)| *w)
        });
        problem = problem.with_shift(target, Arc::new(|_: &[f64]| 1.0));
    }
    let grid = crt_core::applications::conformal::default_candidate_grid(&records.y, args.points);
    let set = prediction_set(&problem, args.alpha, Some(grid), weighted)?;
    let report = ConformalReport {
        schema: report::SCHEMA,
        command: "conformal",
        alpha: args.alpha,
        weighted,
        n,
        interval: set.hull().map(|(a, b)| [a, b]),
        grid: set
            .grid
            .iter()
            .zip(&set.p_values)
            .zip(&set.included)
            .map(|((&y, &p_value), &included)| ConformalRow { y, p_value, included })
            .collect(),
        data_sha256: sha256(&bytes),
    };
    emit(args.out.as_deref(), &report::to_json(&report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Invert(a) => cmd_invert(a),
        Command::SimulateSw(a) => cmd_simulate(a),
        Command::Quasi { study, permute } => cmd_quasi(study, permute),
        Command::Fisher(a) => cmd_fisher(a),
        Command::Conformal(a) => cmd_conformal(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
