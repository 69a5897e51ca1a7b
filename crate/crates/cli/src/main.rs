use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clickprep::files::{read_json, read_log, read_raw, write_json, write_log, write_rejects};
use clickprep::server::{Api, Server};
use clickprep_core::behavior::{B2BConfig, BotConfig, NewCustomerConfig};
use clickprep_core::identity::{build_identity_map_with, resolve};
use clickprep_core::ingest::{deduplicate_with, normalize_currency, DedupPolicy, InputFormat, RateTable};
use clickprep_core::journey::{ComboMap, JourneyPolicy};
use clickprep_core::metrics::{AttributionWindows, PlpGate};
use clickprep_core::model::{day_index, EventLog};
use clickprep_core::outliers::{
    apply_outlier_filter, bootlier_histogram_with, decision_for_limit, find_outlier_limit_with, modality,
    normality_probe, ActivityMetric, ActivityPopulation, BootlierParams, LimitSearch, OutlierDecision, OutlierError,
    SampleSizing,
};
use clickprep_core::par::Execution;
use clickprep_core::pipeline::{
    self, apply_overrides, clean_stage, journey_stage, metrics_stage, stamp_stage, AaStage, CleanStage, JourneyStage,
    MetricsStage, PipelineConfig, RunStatus, StageNote,
};
use clickprep_core::synth::{generate_with, SynthConfig};
use clickprep_core::validation::{compare_report, AaThresholds};
use serde_json::json;

/// Exit status when a journey alarm stops the run.
const HALTED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "clickprep",
    version,
    about = "Clickstream cleaning and recommendation metrics"
)]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic log with labelled pathologies.
    Synth(SynthArgs),
    /// Validate a raw log, normalize prices and drop duplicates.
    Ingest(IngestArgs),
    /// Map every event to one customer id.
    Identity(IoArgs),
    /// Remove bots, bulk buyers and bounces; mark early clicks of new customers.
    Clean(CleanArgs),
    /// Collapse combo purchases and audit click-before-cart journeys.
    Journey(JourneyArgs),
    /// Find or apply an upper limit on daily activity.
    Outliers(OutlierArgs),
    /// CTR, ATCTR and BTR with breakdowns.
    Metrics(MetricArgs),
    /// Compare daily CTR of the two A/A segments.
    Aa(AaArgs),
    /// Every stage in order, driven by one configuration file.
    Run(RunArgs),
    /// Serve the outlier inspection API on 127.0.0.1.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set customers=1000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// jsonl or csv; guessed from the extension when absent.
    #[arg(long)]
    format: Option<String>,
    /// JSON object mapping currency code to its value in the base currency.
    #[arg(long, requires = "base")]
    rates: Option<PathBuf>,
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    glitch_window_ms: Option<i64>,
    #[arg(long)]
    session_gap_ms: Option<i64>,
}

#[derive(Args)]
struct IoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AttributionArgs {
    /// Click, ATC and BUY windows in seconds.
    #[arg(long, value_delimiter = ',', value_name = "CLICK,ATC,BUY")]
    windows: Option<Vec<i64>>,
    #[arg(long)]
    plp_top_n: Option<u32>,
    /// Count every PLP page and slot.
    #[arg(long)]
    no_plp_gate: bool,
}

impl AttributionArgs {
    fn stage(&self) -> Result<MetricsStage> {
        let mut m = MetricsStage::default();
        if let Some(w) = &self.windows {
            if w.len() != 3 {
                bail!("--windows takes three values in seconds, got {}", w.len());
            }
            m.windows = AttributionWindows {
                click_ms: w[0] * 1000,
                atc_ms: w[1] * 1000,
                buy_ms: w[2] * 1000,
            };
        }
        if let Some(n) = self.plp_top_n {
            m.gate.top_n = n;
        }
        if self.no_plp_gate {
            m.gate = PlpGate {
                enabled: false,
                ..m.gate
            };
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Rule {
    Bots,
    B2b,
    Bounce,
    Newcust,
}

#[derive(Args)]
struct CleanArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, value_delimiter = ',', default_value = "bots,b2b,bounce,newcust")]
    rules: Vec<Rule>,
    #[arg(long)]
    b2b_m: Option<f64>,
    /// JSON with `user_agents` (globs) and `ips` (addresses or CIDR blocks).
    #[arg(long)]
    bot_config: Option<PathBuf>,
    #[command(flatten)]
    attribution: AttributionArgs,
}

#[derive(Args)]
struct JourneyArgs {
    #[command(flatten)]
    io: IoArgs,
    /// CSV with a `sku,combo_id` header.
    #[arg(long)]
    combos: Option<PathBuf>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    quick_buy: bool,
    #[arg(long)]
    alarm: Option<f64>,
    /// Keep violators and exit 0 when the alarm fires.
    #[arg(long)]
    no_halt: bool,
    #[arg(long)]
    session_gap_ms: Option<i64>,
}

#[derive(Args)]
struct OutlierArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// views or buys.
    #[arg(long)]
    metric: ActivityMetric,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed resample size instead of 1% of the population.
    #[arg(long = "n")]
    sample_size: Option<usize>,
    /// Use this limit instead of searching.
    #[arg(long, conflicts_with = "apply")]
    limit: Option<u64>,
    /// Use a decision file recorded earlier, e.g. by the inspector.
    #[arg(long)]
    apply: Option<PathBuf>,
    #[arg(long)]
    decision: Option<PathBuf>,
    /// Histogram, density and Q-Q data at the final limit.
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Log without the flagged customer-days.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    attribution: AttributionArgs,
    #[arg(long)]
    low_visibility: Option<f64>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Assign segments to unflagged customers with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first DAYS days of the log.
    #[arg(long)]
    days: Option<i64>,
    #[arg(long)]
    diff_max: Option<f64>,
    #[arg(long)]
    corr_min: Option<f64>,
    #[command(flatten)]
    attribution: AttributionArgs,
    #[arg(long)]
    verdict: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long = "in", required_unless_present = "print_config")]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    report: Option<PathBuf>,
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 8787)]
    port: u16,
    /// Where decisions are stored.
    #[arg(long, default_value = "decisions")]
    decisions: PathBuf,
    /// Directory with the inspector's static files.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors share status 1 with every other failure; 2 means halted
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match dispatch(cli.command, exec) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, exec: Execution) -> Result<u8> {
    match command {
        Command::Synth(a) => synth(a, exec),
        Command::Ingest(a) => ingest(a, exec),
        Command::Identity(a) => identity(a, exec),
        Command::Clean(a) => clean(a, exec),
        Command::Journey(a) => journey(a),
        Command::Outliers(a) => outliers(a, exec),
        Command::Metrics(a) => metrics(a, exec),
        Command::Aa(a) => aa(a, exec),
        Command::Run(a) => run(a, exec),
        Command::Serve(a) => serve(a),
    }
}

fn parse_format(raw: Option<&str>) -> Result<Option<InputFormat>> {
    raw.map(|f| f.parse::<InputFormat>()).transpose().map_err(Into::into)
}

fn print_notes(notes: &[StageNote]) {
    for n in notes {
        eprintln!("note [{}]: {}", n.stage, n.message);
    }
}

fn synth(a: SynthArgs, exec: Execution) -> Result<u8> {
    let base: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    let mut cfg = apply_overrides(&base, a.overrides.iter().map(String::as_str))?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let (log, truth) = generate_with(&cfg, exec)?;
    write_log(&a.out, &log)?;
    if let Some(p) = &a.truth {
        write_json(p, &truth)?;
    }
    println!(
        "{} events, {} customers -> {}",
        log.len(),
        truth.customers.len(),
        a.out.display()
    );
    Ok(0)
}

fn ingest(a: IngestArgs, exec: Execution) -> Result<u8> {
    let (mut log, rejects) = read_raw(&a.input, parse_format(a.format.as_deref())?)?;
    let accepted = log.len();
    if let Some(base) = &a.base {
        let rates: BTreeMap<String, f64> = match &a.rates {
            Some(p) => read_json(p)?,
            None => BTreeMap::new(),
        };
        log = normalize_currency(&log, &RateTable::new(base, rates)?)?;
    }
    let mut dedup = None;
    if !a.no_dedup {
        let mut policy = DedupPolicy::default();
        if let Some(ms) = a.glitch_window_ms {
            policy.glitch_window_ms = ms;
        }
        if let Some(ms) = a.session_gap_ms {
            policy.session_gap_ms = ms;
        }
        if !policy.is_valid() {
            bail!("glitch window must be shorter than the session gap");
        }
        let (out, r) = deduplicate_with(&log, &policy, exec);
        log = out;
        dedup = Some(r);
    }
    write_log(&a.out, &log)?;
    if let Some(p) = &a.rejects {
        write_rejects(p, &rejects)?;
    }
    if let Some(p) = &a.report {
        write_json(
            p,
            &json!({
                "rows": accepted + rejects.rejects.len(),
                "accepted": accepted,
                "rejected": rejects.rejects.len(),
                "currency_base": a.base,
                "dedup": dedup,
                "output_events": log.len(),
            }),
        )?;
    }
    println!(
        "{} accepted, {} rejected, {} written",
        accepted,
        rejects.rejects.len(),
        log.len()
    );
    Ok(0)
}

fn identity(a: IoArgs, exec: Execution) -> Result<u8> {
    let log = read_log(&a.input)?;
    let map = build_identity_map_with(&log, exec);
    let (out, report) = resolve(&log, &map);
    write_log(&a.out, &out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "{} events resolved, {} eliminated",
        out.len(),
        report.eliminated_no_ids + report.eliminated_ambiguous
    );
    Ok(0)
}

fn clean(a: CleanArgs, exec: Execution) -> Result<u8> {
    let log = read_log(&a.io.input)?;
    let on = |r: Rule| a.rules.contains(&r);
    let bots = match &a.bot_config {
        Some(p) => read_json::<BotConfig>(p)?,
        None => BotConfig::default(),
    };
    let stage = CleanStage {
        bots: on(Rule::Bots).then_some(bots),
        b2b: on(Rule::B2b).then(|| B2BConfig {
            m: a.b2b_m.unwrap_or(B2BConfig::default().m),
            ..B2BConfig::default()
        }),
        bounce: on(Rule::Bounce),
        new_customers: on(Rule::Newcust).then(NewCustomerConfig::default),
    };
    let mut notes = Vec::new();
    let (out, section) = clean_stage(&log, &stage, &a.attribution.stage()?, exec, &mut notes)?;
    print_notes(&notes);
    write_log(&a.io.out, &out)?;
    if let Some(p) = &a.io.report {
        write_json(p, &json!({ "clean": section, "notes": notes }))?;
    }
    println!("{} events kept of {}", out.len(), log.len());
    Ok(0)
}

fn journey(a: JourneyArgs) -> Result<u8> {
    let log = read_log(&a.io.input)?;
    let combos = match &a.combos {
        Some(p) => {
            let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
            ComboMap::from_csv(BufReader::new(file))?.skus
        }
        None => BTreeMap::new(),
    };
    let stage = JourneyStage {
        enabled: true,
        policy: JourneyPolicy {
            quick_buy_enabled: a.quick_buy,
            violation_rate_alarm: a.alarm.unwrap_or(JourneyPolicy::default().violation_rate_alarm),
        },
        halt_on_alarm: !a.no_halt,
        combos,
    };
    let gap = a.session_gap_ms.unwrap_or(DedupPolicy::default().session_gap_ms);
    let mut notes = Vec::new();
    let (out, section, halted) = journey_stage(&log, &stage, gap, &mut notes)?;
    print_notes(&notes);
    if let Some(p) = &a.io.report {
        write_json(p, &json!({ "journey": section, "notes": notes }))?;
    }
    if halted {
        eprintln!(
            "integration alarm: violation rate {:.4} reaches {:.4}; no output written",
            section.audit.violation_rate, stage.policy.violation_rate_alarm
        );
        return Ok(HALTED);
    }
    write_log(&a.io.out, &out)?;
    println!(
        "{} violations in {} pairs, {} events kept",
        section.audit.violations.len(),
        section.audit.pairs_audited,
        out.len()
    );
    Ok(0)
}

fn outliers(a: OutlierArgs, exec: Execution) -> Result<u8> {
    let log = read_log(&a.input)?;
    let pop = ActivityPopulation::from_log(&log, a.metric);
    let mut search = LimitSearch::for_metric(a.metric);
    if let Some(k) = a.k {
        search.bootlier.trim = k;
    }
    if let Some(i) = a.iters {
        search.bootlier.iterations = i;
    }
    if let Some(s) = a.seed {
        search.bootlier.seed = s;
    }
    if let Some(n) = a.sample_size {
        search.bootlier.sample_size = n;
        search.sizing = SampleSizing::Fixed;
    }

    let decision = if let Some(p) = &a.apply {
        let d: OutlierDecision = read_json(p)?;
        if d.metric != a.metric {
            bail!("{} holds a {} decision", p.display(), d.metric.short_name());
        }
        d
    } else if let Some(limit) = a.limit {
        decision_for_limit(&pop, limit, search.sample_size_for(pop.restricted(limit).len()))
    } else {
        match find_outlier_limit_with(&pop, &search, exec) {
            Ok(d) => d,
            Err(OutlierError::NoUnimodalLimit { trace }) => {
                if let Some(p) = &a.decision {
                    write_json(p, &json!({ "error": "NoUnimodalLimit", "trace": trace }))?;
                }
                bail!("no candidate limit gave a unimodal plot after {} steps", trace.len());
            }
            Err(e) => return Err(e.into()),
        }
    };

    if let Some(p) = &a.decision {
        write_json(p, &decision)?;
    }
    if let Some(p) = &a.hist {
        write_json(p, &plot_data(&pop, &search, decision.final_limit, exec)?)?;
    }
    let (out, report) = apply_outlier_filter(&log, std::slice::from_ref(&decision));
    if let Some(p) = &a.out {
        write_log(p, &out)?;
    }
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "{} limit {}: {} customers flagged ({:.4}%), {} events removed",
        a.metric.short_name(),
        decision.final_limit,
        decision.customers_flagged.len(),
        100.0 * decision.flagged_fraction,
        log.len() - out.len()
    );
    Ok(0)
}

/// Bootlier plots before and after trimming, plus the normality probe of the raw population.
fn plot_data(pop: &ActivityPopulation, search: &LimitSearch, limit: u64, exec: Execution) -> Result<serde_json::Value> {
    let plot = |p: &ActivityPopulation| -> Result<serde_json::Value> {
        let params = BootlierParams {
            sample_size: search.sample_size_for(p.len()),
            ..search.bootlier
        };
        Ok(match bootlier_histogram_with(p, &params, exec) {
            Ok(h) => {
                let m = modality(&h, &params.prominence);
                json!({ "histogram": h, "modality": m })
            }
            Err(e) => json!({ "error": e.to_string() }),
        })
    };
    let trimmed = pop.restricted(limit);
    Ok(json!({
        "metric": pop.metric,
        "limit": limit,
        "before": plot(pop)?,
        "after": plot(&trimmed)?,
        "normality": normality_probe(pop).ok(),
    }))
}

fn metrics(a: MetricArgs, exec: Execution) -> Result<u8> {
    let log = read_log(&a.input)?;
    let mut stage = a.attribution.stage()?;
    if a.low_visibility.is_some() {
        stage.low_visibility_fraction = a.low_visibility;
    }
    let mut notes = Vec::new();
    let section = metrics_stage(&log, &stage, exec, &mut notes)?;
    print_notes(&notes);
    write_json(&a.report, &json!({ "metrics": section, "notes": notes }))?;
    if let Some(p) = &a.csv {
        let file = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
        section.report.write_csv(file)?;
    }
    let t = &section.report.totals;
    println!("CTR {:?}  ATCTR {:?}  BTR {:?}", t.ctr, t.atc_tr, t.btr);
    Ok(0)
}

fn first_days(log: &EventLog, days: i64) -> EventLog {
    match log.events().first() {
        Some(e) => {
            let end = day_index(e.timestamp_utc) + days;
            log.retain(|e| e.day() < end)
        }
        None => log.clone(),
    }
}

fn aa(a: AaArgs, exec: Execution) -> Result<u8> {
    let mut log = read_log(&a.input)?;
    if let Some(d) = a.days {
        log = first_days(&log, d);
    }
    let defaults = AaThresholds::default();
    let stage = AaStage {
        enabled: true,
        assign_seed: a.seed,
        thresholds: AaThresholds {
            diff_max: a.diff_max.unwrap_or(defaults.diff_max),
            corr_min: a.corr_min.unwrap_or(defaults.corr_min),
            ..defaults
        },
    };
    let log = stamp_stage(&log, &stage);
    let mut notes = Vec::new();
    let section = metrics_stage(&log, &a.attribution.stage()?, exec, &mut notes)?;
    let verdict = compare_report(&section.report, &stage.thresholds)?;
    write_json(&a.verdict, &verdict)?;
    println!(
        "{:?}: mean relative difference {:.4}, correlation {}",
        verdict.verdict,
        verdict.mean_relative_difference,
        verdict
            .correlation
            .map_or("undefined".to_string(), |r| format!("{r:.4}"))
    );
    Ok(0)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let base: PipelineConfig = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    Ok(base.with_overrides(overrides.iter().map(String::as_str))?)
}

fn run(a: RunArgs, exec: Execution) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    if exec == Execution::Sequential {
        cfg.parallel = false;
    }
    let (Some(input), Some(report), false) = (&a.input, &a.report, a.print_config) else {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(0);
    };
    let (log, rejects) = read_raw(input, parse_format(a.format.as_deref())?)?;
    let mut outcome = pipeline::run(&log, &cfg)?;
    outcome.report.ingest.rejected = rejects.rejects.len();
    print_notes(&outcome.report.notes);
    write_json(report, &outcome.report)?;
    if let Some(p) = &a.rejects {
        write_rejects(p, &rejects)?;
    }
    if outcome.report.status == RunStatus::Halted {
        eprintln!("halted by the journey integration alarm; later stages skipped");
        return Ok(HALTED);
    }
    if let Some(p) = &a.out {
        write_log(p, &outcome.log)?;
    }
    println!(
        "{} events in, {} out",
        outcome.report.input_events, outcome.report.output_events
    );
    Ok(0)
}

fn serve(a: ServeArgs) -> Result<u8> {
    let log = read_log(&a.input)?;
    let api = Api::new(&log, a.decisions.clone(), a.static_dir.clone())?;
    let server = Server::start(api, a.port, a.workers)?;
    println!("listening on http://{}", server.addr());
    server.wait();
    Ok(0)
}
