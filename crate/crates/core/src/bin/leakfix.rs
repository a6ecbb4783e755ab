use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use leakfix::asm::{emit, parse, Program};
use leakfix::corpus::{corpus_dir, load_corpus_from, CorpusEntry};
use leakfix::lab::{build_matrix, Matrix, MatrixOptions, DECISION_THRESHOLD, DEFAULT_RUNS, UNIVERSE};
use leakfix::leakage::{emulate_with_records, write_trace_csv, ModelConfig};
use leakfix::pipeline::{leak_trend, run_pipeline, FixedInputs, PipelineConfig};
use leakfix::rewrite::{fix_iteration, semantic_equiv_check_with, RewriteLog};
use leakfix::tvla::{random_inputs, run_campaign, TTestReport, DEFAULT_THRESHOLD};

#[derive(Parser)]
#[command(name = "leakfix", version, about = "Emulated power leakage detection and automatic rewriting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect and rewrite to a fixpoint, then re-verify.
    Run(RunArgs),
    /// Parse a program; optionally test it against its oracle or a rewrite.
    Check(CheckArgs),
    /// Emulate one execution and write the per-slot power samples.
    Trace(TraceArgs),
    /// One fixed-vs-random campaign.
    Campaign(CampaignArgs),
    /// One rewrite pass driven by a report CSV.
    Rewrite(RewriteArgs),
    /// Instruction-pair interaction matrix.
    Matrix(MatrixArgs),
    /// Flagged slots as a function of the number of fixed inputs.
    Trend(TrendArgs),
    /// List corpus entries.
    Corpus {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Target {
    /// Assembly file; replaces the entry's program when both are given.
    #[arg(long)]
    asm: Option<PathBuf>,
    /// Corpus entry providing the input binding.
    #[arg(long)]
    entry: Option<String>,
    /// Corpus directory holding manifest.txt.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Coefficient file; defaults to the built-in model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Gaussian noise sigma added to every sample.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    traces: usize,
    /// Traces for the final check; 0 skips it.
    #[arg(long, default_value_t = 100_000)]
    verify_traces: usize,
    #[arg(long, default_value_t = 1)]
    fixed_inputs: usize,
    #[arg(long, default_value_t = 20)]
    max_iterations: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    target: Target,
    /// Compare against this rewritten program on sampled states.
    #[arg(long)]
    rewritten: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    states: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CampaignArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    traces: usize,
    #[arg(long, default_value_t = 1)]
    fixed_inputs: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RewriteArgs {
    #[arg(long)]
    asm: PathBuf,
    /// Report CSV from `campaign` for this program.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Rewritten program destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DECISION_THRESHOLD)]
    threshold: f64,
    /// Grid file to compare against.
    #[arg(long)]
    expected: Option<PathBuf>,
    /// Directory for matrix.csv and matrix.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrendArgs {
    #[command(flatten)]
    target: Target,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    traces: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelConfig> {
        let model = match &self.model {
            Some(p) => ModelConfig::parse(&read(p)?).with_context(|| format!("model {}", p.display()))?,
            None => ModelConfig::default(),
        };
        Ok(match self.noise {
            Some(s) => model.with_noise(s),
            None => model,
        })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_program(path: &Path) -> Result<Program> {
    parse(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

impl Target {
    /// The corpus entry whose binding applies, with its program replaced by
    /// `--asm` when given.
    fn resolve(&self) -> Result<CorpusEntry> {
        let dir = self.corpus.clone().unwrap_or_else(corpus_dir);
        let entries = load_corpus_from(&dir)?;
        let by_name = |n: &str| entries.iter().find(|e| e.name == n).cloned();
        let mut entry = match (&self.entry, &self.asm) {
            (Some(n), _) => by_name(n).with_context(|| format!("no corpus entry `{n}`"))?,
            (None, Some(a)) => {
                let file = a.file_name().map(|f| f.to_os_string());
                entries
                    .iter()
                    .find(|e| e.path.file_name().map(|f| f.to_os_string()) == file)
                    .cloned()
                    .with_context(|| format!("no binding for {}; pass --entry", a.display()))?
            }
            (None, None) => bail!("pass --asm or --entry"),
        };
        if let Some(a) = &self.asm {
            entry.program = load_program(a)?;
            entry.path = a.clone();
            entry.binding.check(&entry.program)?;
        }
        Ok(entry)
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).map_err(Into::into),
    }
}

fn plot_script(files: &[(String, String)], threshold: f64) -> String {
    let mut s = format!(
        "set datafile separator ','\nset xlabel 'slot'\nset ylabel 't'\nset key outside\nthreshold = {threshold}\nplot \\\n"
    );
    for (file, title) in files {
        s += &format!("  '{file}' using 1:4 skip 1 with impulses title '{title}', \\\n");
    }
    s += "  threshold with lines dt 2 lc rgb 'red' notitle, \\\n  -threshold with lines dt 2 lc rgb 'red' notitle\n";
    s
}

fn run(args: RunArgs) -> Result<()> {
    let entry = args.target.resolve()?;
    let config = PipelineConfig {
        model: args.model.load()?,
        traces: args.traces,
        verify_traces: args.verify_traces,
        fixed_inputs: FixedInputs::Count(args.fixed_inputs),
        max_iterations: args.max_iterations,
        threshold: args.threshold,
        seed: args.seed,
        ..PipelineConfig::new(entry.program.clone(), entry.binding.clone())
    };
    let result = run_pipeline(&config)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let out = |name: &str| args.out.join(name);
    let mut plots = Vec::new();
    for (k, it) in result.iterations.iter().enumerate() {
        let name = format!("report_iter{k}.csv");
        fs::write(out(&name), it.report.to_csv())?;
        plots.push((name, format!("iteration {k}")));
    }
    fs::write(out("report_final.csv"), result.final_report.to_csv())?;
    plots.push(("report_final.csv".into(), "final".into()));
    fs::write(out("plot.gp"), plot_script(&plots, config.threshold))?;
    fs::write(out("fixed.s"), emit(&result.final_program))?;
    fs::write(out("rewrite.log"), result.log.to_string())?;
    let summary = format!("entry = {}\n{}", entry.name, result.summary());
    fs::write(out("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn check(args: CheckArgs) -> Result<()> {
    if let (None, None, Some(asm)) = (&args.target.entry, &args.rewritten, &args.target.asm) {
        let p = load_program(asm)?;
        println!("instructions = {}\nregions = {}", p.len(), p.data.len());
        return Ok(());
    }
    let entry = args.target.resolve()?;
    println!("instructions = {}\nregions = {}", entry.program.len(), entry.program.data.len());
    entry.check_oracle(&entry.program, args.states, args.seed)?;
    println!("oracle = ok ({} inputs)", args.states);
    if let Some(r) = &args.rewritten {
        let rewritten = load_program(r)?;
        let n = semantic_equiv_check_with(&entry.program, &rewritten, args.states, args.seed, |rng| {
            entry.sample_state(&entry.program, rng)
        })?;
        println!("equivalent = ok ({n} states)");
    }
    Ok(())
}

fn trace(args: TraceArgs) -> Result<()> {
    let entry = args.target.resolve()?;
    let model = args.model.load()?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let init = entry.sample_state(&entry.program, &mut rng);
    let (records, samples) = emulate_with_records(&entry.program, init, &model, args.seed)?;
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &entry.program, &records, &samples)?;
    write_out(args.out.as_deref(), &String::from_utf8(buf)?)
}

fn campaign(args: CampaignArgs) -> Result<()> {
    let entry = args.target.resolve()?;
    let mut spec = entry.campaign(
        entry.program.clone(),
        random_inputs(entry.binding.input_len, args.fixed_inputs, args.seed),
    );
    spec.n_traces = args.traces;
    spec.threshold = args.threshold;
    spec.seed = args.seed;
    let report = run_campaign(&spec, &args.model.load()?)?;
    write_out(args.out.as_deref(), &report.to_csv())?;
    let causes: Vec<&str> = report.causes().iter().map(|c| c.name()).collect();
    eprintln!(
        "flagged = {}\nmax_abs_t = {:.3}\ncauses = {}",
        report.flagged_count(),
        report.max_abs_t(),
        causes.join(",")
    );
    Ok(())
}

fn rewrite(args: RewriteArgs) -> Result<()> {
    let program = load_program(&args.asm)?;
    let file = fs::File::open(&args.report).with_context(|| format!("opening {}", args.report.display()))?;
    let report = TTestReport::read_csv(BufReader::new(file), args.threshold)?;
    let (fixed, entries) = fix_iteration(&program, &report);
    let log = RewriteLog {
        entries,
        fixpoint_reached: report.flagged_count() == 0,
        iterations: 1,
    };
    eprint!("{log}");
    write_out(args.out.as_deref(), &emit(&fixed))
}

fn matrix(args: MatrixArgs) -> Result<()> {
    let opts = MatrixOptions {
        n_runs: args.runs,
        seed: args.seed,
        threshold: args.threshold,
    };
    let m = build_matrix(&args.model.load()?, opts)?;
    print!("{}", m.to_grid());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("matrix.csv"), m.to_csv())?;
        fs::write(dir.join("matrix.txt"), m.to_grid())?;
    }
    if let Some(path) = &args.expected {
        let expected = Matrix::parse_grid(&read(path)?).context("malformed expected grid")?;
        let diff = m.mismatches(&expected);
        for (r, c, got, want) in &diff {
            println!("mismatch {r} x {c}: expected {} got {}", want.glyph(), got.glyph());
        }
        println!("mismatches = {} of {}", diff.len(), UNIVERSE.len() * UNIVERSE.len());
        if !diff.is_empty() {
            std::process::exit(1);
        }
    }
    Ok(())
}

fn trend(args: TrendArgs) -> Result<()> {
    let entry = args.target.resolve()?;
    let config = PipelineConfig {
        model: args.model.load()?,
        traces: args.traces,
        threshold: args.threshold,
        seed: args.seed,
        ..PipelineConfig::new(entry.program.clone(), entry.binding.clone())
    };
    let rows = leak_trend(&config, &args.counts)?;
    let mut csv = String::from("n_inputs,mean,ci95_low,ci95_high,samples\n");
    for r in rows {
        let samples: Vec<String> = r.samples.iter().map(|s| s.to_string()).collect();
        csv += &format!(
            "{},{:.3},{:.3},{:.3},{}\n",
            r.n_inputs,
            r.mean,
            r.mean - r.ci95,
            r.mean + r.ci95,
            samples.join(";")
        );
    }
    write_out(args.out.as_deref(), &csv)
}

fn main() -> Result<()> {
    let result = dispatch(Cli::parse().command);
    let closed = |e: &anyhow::Error| {
        e.downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    };
    match result {
        Err(e) if closed(&e) => Ok(()),
        other => other,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => run(a),
        Command::Check(a) => check(a),
        Command::Trace(a) => trace(a),
        Command::Campaign(a) => campaign(a),
        Command::Rewrite(a) => rewrite(a),
        Command::Matrix(a) => matrix(a),
        Command::Trend(a) => trend(a),
        Command::Corpus { corpus } => {
            let mut text = String::new();
            for e in load_corpus_from(&corpus.unwrap_or_else(corpus_dir))? {
                let causes: Vec<&str> = e.expected.iter().map(|c| c.name()).collect();
                let causes = if causes.is_empty() { "none".to_string() } else { causes.join(",") };
                text += &format!("{:<18} {:>3} instructions  expect {}\n", e.name, e.program.len(), causes);
            }
            write_out(None, &text)
        }
    }
}
