//! `attnseg`: segment, evaluate, synthesize, render and inspect.

mod commands;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use commands::{eval, info, render, segment, synth_gen};

/// Environment variable capping worker threads.
const THREADS_ENV: &str = "ATTNSEG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "attnseg",
    version,
    about = "Zero-shot segmentation from diffusion self-attention tensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment one tensor set into a label mask.
    Segment(segment::Args),
    /// Score predicted masks against ground truth.
    Eval(eval::Args),
    /// Write a synthetic tensor set with a planted segmentation.
    SynthGen(synth_gen::Args),
    /// Draw mask boundaries over an image.
    Render(render::Args),
    /// Summarize a tensor set.
    Info(info::Args),
}

fn configure_threads() -> anyhow::Result<()> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let raw = raw.to_string_lossy();
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow::anyhow!("{THREADS_ENV}={raw:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Segment(a) => segment::run(a),
        Command::Eval(a) => eval::run(a),
        Command::SynthGen(a) => synth_gen::run(a),
        Command::Render(a) => render::run(a),
        Command::Info(a) => info::run(a),
    }
}

/// Exit code and JSON body for an error: 2 for internal invariant
/// violations, 1 for everything else.
fn describe(err: &anyhow::Error) -> (u8, serde_json::Value) {
    let core = err
        .chain()
        .find_map(|e| e.downcast_ref::<attnseg_core::Error>());
    let kind = core.map_or("error", |e| e.kind());
    let code = if kind == "invariant" { 2 } else { 1 };
    // Core errors already print their source, so skip links that repeat the
    // tail of the previous message.
    let mut chain: Vec<String> = Vec::new();
    for e in err.chain() {
        let msg = e.to_string();
        if !chain.last().is_some_and(|prev| prev.ends_with(&msg)) {
            chain.push(msg);
        }
    }
    let mut body = json!({
        "error": {
            "kind": kind,
            "message": chain.join(": "),
            "exit_code": code,
        }
    });
    if let Some(path) = core.and_then(|e| e.path()) {
        body["error"]["path"] = json!(path.display().to_string());
    }
    (code, body)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, body) = describe(&err);
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
