use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abms_core::codegen::{check_structure, generate};
use abms_core::dsl::{self, ParseError};
use abms_core::engine::{self, RunConfig, RunResult};
use abms_core::expr::Value;
use abms_core::metamodel::{validate, Model, Severity};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map};

#[derive(Parser)]
#[command(name = "abms", version, about = "Validate, run, translate and format .abms models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report diagnostics; exit status 1 if any is an error.
    Validate(Common),
    /// Run the simulation and write every output dataset as CSV.
    Run(RunArgs),
    /// Emit NetLogo source and a generation report.
    Gen(GenArgs),
    /// Rewrite the model in canonical form.
    Fmt(FmtArgs),
}

#[derive(Args)]
struct Common {
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Integer seed, or `random` for an entropy-derived one.
    #[arg(long, default_value = "42", value_parser = parse_seed, conflicts_with = "seeds")]
    seed: SeedArg,
    /// Inclusive-exclusive seed range `a..b`; one isolated run per seed.
    #[arg(long, value_parser = parse_range)]
    seeds: Option<(u64, u64)>,
    #[arg(long, default_value_t = 100)]
    ticks: u64,
    #[arg(long, env = "ABMS_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "ABMS_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FmtArgs {
    model: PathBuf,
    /// Only check; exit status 1 if the file is not canonical.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy)]
enum SeedArg {
    Fixed(u64),
    Random,
}

fn parse_seed(s: &str) -> Result<SeedArg, String> {
    if s == "random" {
        return Ok(SeedArg::Random);
    }
    s.parse().map(SeedArg::Fixed).map_err(|_| format!("expected an integer or `random`, found `{s}`"))
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once("..").ok_or("expected `a..b`")?;
    let a: u64 = a.parse().map_err(|_| format!("invalid seed `{a}`"))?;
    let b: u64 = b.parse().map_err(|_| format!("invalid seed `{b}`"))?;
    if a >= b {
        return Err("empty seed range".into());
    }
    Ok((a, b))
}

/// Failure that has already been reported on stderr.
struct Failed;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Gen(args) => cmd_gen(&args),
        Command::Fmt(args) => cmd_fmt(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failed) => ExitCode::from(1),
    }
}

fn read(path: &Path) -> Result<String, Failed> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        Failed
    })
}

fn report_parse_errors(errors: &[ParseError]) {
    for e in errors {
        eprintln!("{e}");
    }
}

fn load(path: &Path) -> Result<Model, Failed> {
    let text = read(path)?;
    dsl::parse_with_file(&text, Some(&path.display().to_string())).map_err(|errors| {
        report_parse_errors(&errors);
        Failed
    })
}

/// Parses and validates; warnings go to stderr, errors fail.
fn load_valid(path: &Path) -> Result<Model, Failed> {
    let model = load(path)?;
    let report = validate(&model);
    for d in &report.diagnostics {
        eprintln!("{d}");
    }
    if report.has_errors() {
        return Err(Failed);
    }
    Ok(model)
}

fn cmd_validate(args: &Common) -> Result<(), Failed> {
    let model = load(&args.model)?;
    let report = validate(&model);
    match args.format {
        Format::Text => {
            for d in &report.diagnostics {
                eprintln!("{d}");
            }
        }
        Format::Json => {
            let diagnostics: Vec<_> = report
                .diagnostics
                .iter()
                .map(|d| {
                    json!({
                        "severity": match d.severity { Severity::Error => "error", Severity::Warning => "warning" },
                        "path": d.path,
                        "message": d.message,
                        "line": d.span.line,
                        "column": d.span.column,
                    })
                })
                .collect();
            println!("{}", json!({ "valid": !report.has_errors(), "diagnostics": diagnostics }));
        }
    }
    if report.has_errors() {
        Err(Failed)
    } else {
        Ok(())
    }
}

fn base_dir(model: &Path) -> PathBuf {
    match model.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn value_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Int(i) => json!(i),
        Value::Real(r) => json!(r),
        Value::Bool(b) => json!(b),
        Value::Text(s) | Value::Symbol(s) => json!(s),
    }
}

fn run_json(seed: u64, result: &RunResult) -> serde_json::Value {
    let mut outputs = Map::new();
    for t in &result.tables {
        let mut last = Map::new();
        if let Some(row) = t.rows.last() {
            for (c, v) in t.columns.iter().zip(row) {
                last.insert(c.clone(), value_json(v));
            }
        }
        outputs.insert(t.name.clone(), json!({ "path": t.path, "rows": t.rows.len(), "final": last }));
    }
    let s = &result.summary;
    json!({
        "seed": seed,
        "ticks": s.ticks,
        "alive": s.alive,
        "deaths": s.counters.deaths,
        "ever_infected": s.counters.ever_infected,
        "arrivals": s.counters.arrivals,
        "outputs": outputs,
        "digest": result.digests.last(),
    })
}

fn print_run_text(seed: u64, result: &RunResult) {
    let s = &result.summary;
    println!("seed {seed}, {} ticks", s.ticks);
    for t in &result.tables {
        let Some(row) = t.rows.last() else { continue };
        let cells: Vec<String> =
            t.columns.iter().zip(row).skip(1).map(|(c, v)| format!("{c}={}", display_value(v))).collect();
        println!("  {} ({}): {}", t.name, t.path, cells.join(" "));
    }
    let alive: Vec<String> = s.alive.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("  alive: {}", alive.join(" "));
    if !s.counters.deaths.is_empty() {
        let deaths: Vec<String> = s.counters.deaths.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("  deaths: {}", deaths.join(" "));
    }
}

fn display_value(v: &Value) -> String {
    match v {
        Value::Real(r) => engine::format_g(*r),
        other => other.to_string(),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failed> {
    let model = load_valid(&args.common.model)?;
    let base = base_dir(&args.common.model);
    let seeds: Vec<u64> = match (args.seeds, args.seed) {
        (Some((a, b)), _) => (a..b).collect(),
        (None, SeedArg::Fixed(s)) => vec![s],
        (None, SeedArg::Random) => vec![rand::random()],
    };
    let sweep = args.seeds.is_some();
    let config = |seed: u64| {
        let out = if sweep { args.out_dir.join(format!("seed-{seed}")) } else { args.out_dir.clone() };
        RunConfig::new(seed, args.ticks).with_base_dir(base.clone()).with_out_dir(out)
    };
    // runs share nothing, so a sweep fans out one thread per seed
    let results: Vec<(u64, Result<RunResult, engine::EngineError>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = config(seed);
                let model = &model;
                scope.spawn(move || (seed, engine::run(model, &cfg)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });

    let mut failed = false;
    let mut runs = Vec::new();
    for (seed, result) in &results {
        match result {
            Ok(r) => match args.common.format {
                Format::Text => print_run_text(*seed, r),
                Format::Json => runs.push(run_json(*seed, r)),
            },
            Err(e) => {
                eprintln!("{}: seed {seed}: {e}", args.common.model.display());
                failed = true;
            }
        }
    }
    if args.common.format == Format::Json {
        let out = if sweep { json!({ "runs": runs }) } else { runs.pop().unwrap_or(json!(null)) };
        println!("{out}");
    }
    if failed {
        Err(Failed)
    } else {
        Ok(())
    }
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failed> {
    let model = load_valid(&args.common.model)?;
    let (source, report) = generate(&model);
    debug_assert!(check_structure(&source, &model));
    let stem = args.common.model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let nlogo = args.out_dir.join(format!("{stem}.nlogo"));
    let report_path = args.out_dir.join(format!("{stem}.report.json"));
    let write = |path: &Path, text: &str| {
        fs::create_dir_all(&args.out_dir)
            .and_then(|_| fs::write(path, text))
            .map_err(|e| {
                eprintln!("{}: {e}", path.display());
                Failed
            })
    };
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&nlogo, &source)?;
    write(&report_path, &(report_json + "\n"))?;
    match args.common.format {
        Format::Json => println!(
            "{}",
            json!({ "source": nlogo, "report": report_path, "procedures": report.procedures().count(), "unsupported": report.unsupported })
        ),
        Format::Text => {
            println!("wrote {} ({} procedures)", nlogo.display(), report.procedures().count());
            for u in &report.unsupported {
                println!("  unsupported: {}: {}", u.element, u.reason);
            }
        }
    }
    Ok(())
}

fn cmd_fmt(args: &FmtArgs) -> Result<(), Failed> {
    let text = read(&args.model)?;
    let model = dsl::parse_with_file(&text, Some(&args.model.display().to_string())).map_err(|errors| {
        report_parse_errors(&errors);
        Failed
    })?;
    let canonical = dsl::format(&model);
    if canonical == text {
        return Ok(());
    }
    if args.check {
        let old: Vec<&str> = text.lines().collect();
        let new: Vec<&str> = canonical.lines().collect();
        let differing = (0..old.len().max(new.len())).filter(|&i| old.get(i) != new.get(i)).count();
        eprintln!("{}: not canonical ({differing} lines differ)", args.model.display());
        if let Some(i) = (0..old.len().max(new.len())).find(|&i| old.get(i) != new.get(i)) {
            eprintln!("  line {}:", i + 1);
            eprintln!("  - {}", old.get(i).unwrap_or(&""));
            eprintln!("  + {}", new.get(i).unwrap_or(&""));
        }
        return Err(Failed);
    }
    fs::write(&args.model, canonical).map_err(|e| {
        eprintln!("{}: {e}", args.model.display());
        Failed
    })
}
