//! `trace gen|stats|convert`.

use std::fs;
use std::path::Path;

use sparsepool::trace::{
    decode_trace, encode_trace, encoded_version, generate_trace, read_trace, similarity_summary,
    write_trace, TraceGenParams,
};

use crate::{
    create_file, parse_toml, write_csv, CliError, Globals, Outcome, TraceCommand, TraceGenArgs,
};

pub const TRACE_FILE: &str = "trace.bin";
pub const SIMILARITY_FILE: &str = "similarity.csv";

pub fn run(g: &Globals, cmd: TraceCommand) -> Result<Outcome, CliError> {
    match cmd {
        TraceCommand::Gen(args) => gen(g, &args),
        TraceCommand::Stats { trace } => stats(g, &trace),
        TraceCommand::Convert {
            input,
            output,
            to_version,
        } => convert(&input, &output, to_version),
    }
}

/// Generator parameters from a file or defaults, with flag overrides.
pub fn gen_params(g: &Globals, args: &TraceGenArgs) -> Result<TraceGenParams, CliError> {
    let mut p: TraceGenParams = match &args.params {
        Some(path) => parse_toml(path)?,
        None => TraceGenParams::default(),
    };
    if let Some(r) = args.similarity {
        p.target_similarity = r;
    }
    if let Some(l) = args.layers {
        p.num_layers = l;
    }
    if let Some(c) = args.context {
        p.context_len = c;
    }
    if let Some(k) = args.topk {
        p.topk = k;
    }
    if let Some(n) = args.steps {
        p.num_steps = n;
    }
    if let Some(a) = args.accept {
        p.mean_accept = a;
    }
    if let Some(s) = g.seed {
        p.seed = s;
    }
    Ok(p)
}

fn gen(g: &Globals, args: &TraceGenArgs) -> Result<Outcome, CliError> {
    let params = gen_params(g, args)?;
    let trace = generate_trace(&params)?;
    let path = args
        .output
        .clone()
        .unwrap_or_else(|| g.out_dir().join(TRACE_FILE));
    create_file(&path)?;
    write_trace(&trace, &path, args.format_version)?;
    println!(
        "trace: {} layers, {} steps, context {}, top-k {} -> {}",
        trace.num_layers,
        trace.num_steps(),
        trace.context_len,
        trace.topk,
        path.display()
    );
    Ok(Outcome::Success)
}

fn stats(g: &Globals, path: &Path) -> Result<Outcome, CliError> {
    let trace = read_trace(path)?;
    let summary = similarity_summary(&trace);
    let out = g.out_dir().join(SIMILARITY_FILE);
    write_csv(&out, &summary)?;
    let n = summary.len().max(1) as f64;
    let mean = summary.iter().map(|s| s.mean).sum::<f64>() / n;
    let min = summary.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    println!(
        "similarity: {} layers, mean {mean:.4}, min {min:.4} -> {}",
        summary.len(),
        out.display()
    );
    Ok(Outcome::Success)
}

fn convert(input: &Path, output: &Path, to_version: u16) -> Result<Outcome, CliError> {
    let bytes = fs::read(input).map_err(|source| CliError::Io {
        path: input.to_path_buf(),
        source,
    })?;
    let trace = decode_trace(&bytes)?;
    let encoded = encode_trace(&trace, to_version)?;
    create_file(output)?;
    fs::write(output, &encoded).map_err(|source| CliError::Io {
        path: output.to_path_buf(),
        source,
    })?;
    println!(
        "converted v{} -> v{to_version}: {} -> {} bytes",
        encoded_version(&bytes).unwrap_or(0),
        bytes.len(),
        encoded.len()
    );
    Ok(Outcome::Success)
}
