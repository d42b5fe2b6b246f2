//! `cbf` command-line surface: gen, train, filter, eval, inspect.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 unreadable or
//! malformed input, 4 algorithm state (e.g. an attack period with no
//! threshold). 1 is reserved for failures writing output.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::confidence::{ConfidenceProfile, WindowPolicy};
use crate::filter::{
    load_snapshot, save_snapshot, EngineConfig, FilterEngine, FilterError, ThresholdStrategy, Verdict,
};
use crate::generator::{generate_trace, GenMode, GeneratorConfig};
use crate::report::{read_decisions, write_decisions, DecisionRow, EvalReport};
use crate::schema::AttributeSchema;
use crate::trace::{
    read_periods, read_trace_any, read_trace_csv, write_trace_header, write_trace_row, Linktype,
    PcapWriter, Endian, TraceError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OUTPUT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_STATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cbf", version, about = "Confidence-based DDoS packet filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled trace (CSV).
    Gen(GenArgs),
    /// Learn a confidence profile and nominal threshold from legitimate traffic.
    Train(TrainArgs),
    /// Filter a trace against a profile under declared periods.
    Filter(FilterArgs),
    /// Compute evaluation metrics from a decisions file.
    Eval(EvalArgs),
    /// Print a profile in human-readable form.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// legit | attack-random | attack-mimic:k
    #[arg(long, default_value = "legit", value_parser = parse_mode)]
    mode: GenMode,
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Packets per second of synthetic trace time.
    #[arg(long, default_value_t = 1000.0)]
    rate: f64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an existing trace file: indices and timestamps pick up after
    /// its last row.
    #[arg(long, requires = "out")]
    append: bool,
}

fn parse_mode(s: &str) -> Result<GenMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Legitimate trace, CSV or pcap.
    #[arg(long = "in")]
    input: PathBuf,
    /// Where to write the profile document.
    #[arg(long)]
    profile: PathBuf,
    /// Window length in seconds of trace time.
    #[arg(long, default_value_t = 60.0)]
    window: f64,
    /// Count-based windows instead of time-based ones.
    #[arg(long, conflicts_with = "window")]
    window_packets: Option<u64>,
    /// Decay applied to the cumulative counts at each window close.
    #[arg(long, default_value_t = 1.0)]
    decay: f64,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Period declarations: start_ts,end_ts,period.
    #[arg(long)]
    periods: PathBuf,
    /// Decisions CSV output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the tagged non-attack packets to this pcap.
    #[arg(long)]
    rewrite: Option<PathBuf>,
    /// Forget the nominal profile at the start of every non-attack period.
    #[arg(long)]
    np_reset_on_nonattack: bool,
    /// `min` (nominal-profile minimum, default) or `percentile:q`, q in [0, 100]
    /// (extension: q-th percentile of non-attack scores).
    #[arg(long, default_value = "min", value_parser = parse_strategy)]
    threshold_strategy: ThresholdStrategy,
    /// Reject packets whose IPv4 header checksum does not verify.
    #[arg(long)]
    strict_checksum: bool,
}

fn parse_strategy(s: &str) -> Result<ThresholdStrategy, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    decisions: PathBuf,
    /// Report JSON output.
    #[arg(long)]
    report: PathBuf,
    /// Histogram CSV (defaults to the report path with a .hist.csv suffix).
    #[arg(long)]
    hist: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    profile: PathBuf,
    /// Pair values listed per pair slot.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl Failure {
    fn new(code: i32, msg: impl std::fmt::Display) -> Self {
        Self { code, msg: msg.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn output_err(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::new(EXIT_OUTPUT, format!("{}: {e}", path.display()))
}

fn trace_failure(path: &Path, e: TraceError) -> Failure {
    let code = match e {
        TraceError::PeriodGap(_) | TraceError::OverlappingPeriods { .. } => EXIT_USAGE,
        _ => EXIT_INPUT,
    };
    Failure::new(code, format!("{}: {e}", path.display()))
}

/// Runs the CLI with `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Filter(a) => cmd_filter(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Inspect(a) => cmd_inspect(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "cbf: {}", f.msg);
            f.code
        }
    }
}

fn cmd_gen(a: GenArgs, stdout: &mut dyn Write) -> CmdResult {
    let mut config = GeneratorConfig::new(a.mode, a.count, a.seed);
    config.rate = a.rate;
    let appending = a.append && a.out.as_ref().is_some_and(|p| p.exists());
    if appending {
        let path = a.out.as_ref().unwrap();
        let existing = read_trace_csv(path).map_err(|e| trace_failure(path, e))?;
        if let Some(last) = existing.last() {
            config.start_index = last.index + 1;
            config.start_ts = last.ts + 1.0 / a.rate;
        }
    }
    let records = generate_trace(&config).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    log::info!("generated {} records ({:?}, seed {})", records.len(), a.mode, a.seed);

    let write_all = |w: &mut dyn Write, header: bool| -> io::Result<()> {
        if header {
            write_trace_header(w)?;
        }
        for r in &records {
            write_trace_row(w, r)?;
        }
        w.flush()
    };
    match &a.out {
        None => write_all(stdout, true).map_err(|e| Failure::new(EXIT_OUTPUT, e)),
        Some(path) => {
            let file = if appending {
                fs::OpenOptions::new().append(true).open(path)
            } else {
                fs::File::create(path)
            }
            .map_err(output_err(path))?;
            write_all(&mut BufWriter::new(file), !appending).map_err(output_err(path))
        }
    }
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> CmdResult {
    let policy = match a.window_packets {
        Some(count) => WindowPolicy::Packets { count },
        None => WindowPolicy::Time { seconds: a.window },
    };
    let profile = ConfidenceProfile::new(AttributeSchema::default())
        .with_policy(policy)
        .and_then(|p| p.with_decay(a.decay))
        .map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let records = read_trace_any(&a.input).map_err(|e| trace_failure(&a.input, e))?;

    let mut engine = FilterEngine::new(profile, EngineConfig::default());
    let mut items = Vec::with_capacity(records.len());
    for r in &records {
        let raw = r
            .to_raw()
            .map_err(|e| Failure::new(EXIT_INPUT, format!("record {}: {e}", r.index)))?;
        let attrs = engine
            .attributes(&raw)
            .map_err(|e| Failure::new(EXIT_INPUT, format!("record {}: {e}", r.index)))?;
        items.push((attrs, r.ts));
    }
    let summary = engine.train(&items).map_err(|e| Failure::new(EXIT_STATE, e))?;
    let nominal = engine.nominal();
    fs::write(&a.profile, save_snapshot(engine.profile(), Some(nominal)))
        .map_err(output_err(&a.profile))?;

    let np = summary.np.map_or("unset".to_string(), |v| format!("{v:.9}"));
    writeln!(
        stdout,
        "trained on {} packets: n = {} attributes, windows_closed = {}, N_n = {}, NP = {}",
        summary.packets,
        engine.profile().schema().len(),
        summary.windows_closed,
        summary.n_total,
        np
    )
    .map_err(|e| Failure::new(EXIT_OUTPUT, e))
}

fn cmd_filter(a: FilterArgs, stdout: &mut dyn Write) -> CmdResult {
    let text = fs::read_to_string(&a.profile)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.profile.display())))?;
    let (profile, nominal) = load_snapshot(&text)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.profile.display())))?;
    let records = read_trace_any(&a.input).map_err(|e| trace_failure(&a.input, e))?;
    let plan = read_periods(&a.periods).map_err(|e| trace_failure(&a.periods, e))?;
    plan.check_covers(records.iter().map(|r| r.ts))
        .map_err(|e| trace_failure(&a.periods, e))?;

    let config = EngineConfig {
        strategy: a.threshold_strategy,
        np_reset_on_nonattack: a.np_reset_on_nonattack,
        strict_checksum: a.strict_checksum,
    };
    let mut engine = FilterEngine::with_nominal(profile, nominal.unwrap_or_default(), config);
    let mut rows = Vec::with_capacity(records.len());
    let mut tagged = Vec::new();
    for r in &records {
        let period = plan.period_at(r.ts).expect("coverage checked");
        engine.set_period(period, r.ts);
        let raw = r
            .to_raw()
            .map_err(|e| Failure::new(EXIT_INPUT, format!("record {}: {e}", r.index)))?;
        let (decision, out) = engine.process_packet(&raw).map_err(|e| match e {
            FilterError::Packet(_) => Failure::new(EXIT_INPUT, format!("record {}: {e}", r.index)),
            FilterError::ThresholdUnset { ts } => Failure::new(
                EXIT_STATE,
                format!("record {} at ts {ts}: attack period declared before any nominal profile exists", r.index),
            ),
            _ => Failure::new(EXIT_STATE, format!("record {}: {e}", r.index)),
        })?;
        if let Some(err) = &decision.rewrite_error {
            log::warn!("record {}: accepted untagged: {err}", r.index);
        }
        if decision.rewritten && a.rewrite.is_some() {
            tagged.extend(out);
        }
        rows.push(DecisionRow::new(r.index, r.ts, &decision, r.label));
    }

    let file = fs::File::create(&a.out).map_err(output_err(&a.out))?;
    write_decisions(BufWriter::new(file), &rows).map_err(output_err(&a.out))?;
    if let Some(path) = &a.rewrite {
        let file = fs::File::create(path).map_err(output_err(path))?;
        let mut w = PcapWriter::new(BufWriter::new(file), Linktype::RawIp, Endian::Little)
            .map_err(output_err(path))?;
        for p in &tagged {
            w.write_packet(p).map_err(output_err(path))?;
        }
        w.finish().map_err(output_err(path))?;
    }

    let discarded = rows.iter().filter(|r| r.verdict == Verdict::Discard).count();
    let rewritten = rows.iter().filter(|r| r.rewritten).count();
    writeln!(
        stdout,
        "filtered {} packets: {} accepted, {} discarded, {} tagged",
        rows.len(),
        rows.len() - discarded,
        discarded,
        rewritten
    )
    .map_err(|e| Failure::new(EXIT_OUTPUT, e))
}

fn cmd_eval(a: EvalArgs, stdout: &mut dyn Write) -> CmdResult {
    let file = fs::File::open(&a.decisions)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.decisions.display())))?;
    let rows = read_decisions(io::BufReader::new(file))
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.decisions.display())))?;
    let report = EvalReport::from_rows(&rows);
    fs::write(&a.report, report.to_json()).map_err(output_err(&a.report))?;
    let hist = a.hist.clone().unwrap_or_else(|| a.report.with_extension("hist.csv"));
    let file = fs::File::create(&hist).map_err(output_err(&hist))?;
    report.write_histogram_csv(BufWriter::new(file)).map_err(output_err(&hist))?;

    let show = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.6}"));
    writeln!(
        stdout,
        "{} decisions: fpr = {}, fnr = {}, precision = {}, recall = {}",
        report.total,
        show(report.fpr),
        show(report.fnr),
        show(report.precision),
        show(report.recall)
    )
    .map_err(|e| Failure::new(EXIT_OUTPUT, e))
}

fn cmd_inspect(a: InspectArgs, stdout: &mut dyn Write) -> CmdResult {
    let text = fs::read_to_string(&a.profile)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.profile.display())))?;
    let (profile, nominal) = load_snapshot(&text)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", a.profile.display())))?;
    let mut dump = String::new();
    render_profile(&mut dump, &profile, nominal.as_ref(), a.top);
    stdout
        .write_all(dump.as_bytes())
        .map_err(|e| Failure::new(EXIT_OUTPUT, e))
}

fn render_profile(
    out: &mut String,
    profile: &ConfidenceProfile,
    nominal: Option<&crate::filter::NominalProfile>,
    top: usize,
) {
    use std::fmt::Write as _;
    let schema = profile.schema();
    let names: Vec<&str> = schema.attributes().iter().map(|a| a.name.as_str()).collect();
    let _ = writeln!(
        out,
        "schema: {} attributes, {} pairs, score rule {:?}, decay {}",
        schema.len(),
        schema.pairs().len(),
        schema.score_rule(),
        profile.decay()
    );
    for (i, a) in schema.attributes().iter().enumerate() {
        let _ = writeln!(out, "  [{i}] {} <- {:?} / {:?}", a.name, a.extractor, a.discretizer);
    }
    let _ = writeln!(out, "windows_closed = {}", profile.windows_closed());
    let _ = writeln!(out, "N_n = {}", profile.n_total());
    if let Some(n) = nominal {
        match n.np {
            Some(np) => {
                let at = n.set_at_ts.map_or("-".to_string(), |t| t.to_string());
                let _ = writeln!(out, "NP = {np:.9} (updates {}, set at ts {at})", n.updates);
            }
            None => {
                let _ = writeln!(out, "NP = unset");
            }
        }
    }
    if profile.is_empty() {
        return;
    }
    for (k, &(r, s)) in schema.pairs().iter().enumerate() {
        let w = schema.weights()[k];
        let _ = writeln!(out, "pair [{k}] {} x {} (weight {w})", names[r], names[s]);
        for ((x, y), c) in profile.top_pairs(k, top) {
            let _ = writeln!(out, "    ({x}, {y})  {c:.6}");
        }
    }
}
