//! The `itda` command-line driver.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 internal error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::activation_store::read_shard;
use crate::dictionary::{self, load_dictionary, save_dictionary, DictionaryFile, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::matrix::dot;
use crate::similarity::{self, jaccard, layer_matching_accuracy, union_labels, CeLossInputs, LabelSet, ModelLayers};
use crate::synth_oracle::{generate, SynthSpec};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "itda",
    version,
    about = "Sparse decomposition of activations over labeled dictionaries"
)]
pub struct Cli {
    /// Worker threads (outputs do not depend on it).
    #[arg(long, global = true, env = "ITDA_THREADS")]
    pub threads: Option<usize>,

    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    /// Seed for commands that draw random numbers.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Grow a dictionary from activation shards.
    Train(TrainArgs),
    /// Decompose activations into labeled sparse codes (JSONL).
    Decompose(DecomposeArgs),
    /// Keep the first N atoms of a dictionary.
    Crop(CropArgs),
    /// Drop near-collinear atoms.
    Dedup(DedupArgs),
    /// Jaccard index of two dictionaries' labels.
    Jaccard(JaccardArgs),
    /// Layer-matching accuracy over a manifest of per-layer dictionaries.
    LayerMatch(LayerMatchArgs),
    /// Cross-entropy loss score from three losses.
    CeScore(CeScoreArgs),
    /// Write a synthetic shard and its ground-truth dictionary.
    Synth(SynthArgs),
    /// Print metadata and health checks for a file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub activations: Vec<PathBuf>,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 8)]
    pub l0: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_dict_size: Option<usize>,
    /// Threshold on loss / ||x||^2 instead of the absolute loss.
    #[arg(long)]
    pub relative_tau: bool,
    #[arg(long, default_value_t = dictionary::DEFAULT_DEDUP_COSINE)]
    pub dedup_threshold: f64,
    /// Preload every row of this shard as an atom.
    #[arg(long)]
    pub seed_shard: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub l0: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CropArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DedupArgs {
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long, default_value_t = dictionary::DEFAULT_DEDUP_COSINE)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct JaccardArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub dict_a: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub dict_b: Vec<PathBuf>,
    /// Union each side's dictionaries (e.g. all layers of a model) first.
    #[arg(long)]
    pub union: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct LayerMatchArgs {
    /// JSON object: model id -> list of `.itda` paths, one per layer.
    #[arg(long)]
    pub dicts: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for per-pair CSV matrices.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CeScoreArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub h_orig: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub h_star: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub h_zero: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub n_atoms: usize,
    #[arg(long, default_value_t = 1000)]
    pub signals: usize,
    #[arg(long, default_value_t = 2)]
    pub sparsity: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Start the stream with each true atom on its own.
    #[arg(long)]
    pub isolated_first: bool,
    #[arg(long, default_value = "synth")]
    pub dataset_id: String,
    #[arg(long, default_value = "synth")]
    pub model_id: String,
    #[arg(long, default_value = "0")]
    pub layer_id: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct InspectArgs {
    #[arg(long)]
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub activations: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Decompose(_) => "decompose",
            Command::Crop(_) => "crop",
            Command::Dedup(_) => "dedup",
            Command::Jaccard(_) => "jaccard",
            Command::LayerMatch(_) => "layer-match",
            Command::CeScore(_) => "ce-score",
            Command::Synth(_) => "synth",
            Command::Inspect(_) => "inspect",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Train(a) => a
                .activations
                .iter()
                .chain(&a.seed_shard)
                .map(PathBuf::as_path)
                .collect(),
            Command::Decompose(a) => vec![&a.activations, &a.dict],
            Command::Crop(a) => vec![&a.dict],
            Command::Dedup(a) => vec![&a.dict],
            Command::Jaccard(a) => a.dict_a.iter().chain(&a.dict_b).map(PathBuf::as_path).collect(),
            Command::LayerMatch(a) => vec![&a.dicts],
            Command::Inspect(a) => a.dict.iter().chain(&a.activations).map(PathBuf::as_path).collect(),
            Command::CeScore(_) | Command::Synth(_) => vec![],
        }
    }
}

/// Hash of the subcommand's flags plus the seed; thread count is excluded.
pub fn config_hash(cli: &Cli) -> String {
    let body = serde_json::json!({ "seed": cli.seed, "command": &cli.command });
    let digest = Sha256::digest(body.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INPUT,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    eprintln!(
        "itda {} {} config={}",
        crate::VERSION,
        cli.command.name(),
        config_hash(&cli)
    );
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(&cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

fn check_inputs(cmd: &Command) -> Result<()> {
    for p in cmd.inputs() {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs a parsed command, writing results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    check_inputs(&cli.command)?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Decompose(a) => cmd_decompose(a, out),
        Command::Crop(a) => {
            let d = dictionary::crop(&load_dictionary(&a.dict)?, a.size)?;
            save_dictionary(&d, &a.out)?;
            writeln!(out, "dictionary size: {}", d.len()).map_err(stdout_err)
        }
        Command::Dedup(a) => {
            let src = load_dictionary(&a.dict)?;
            let d = dictionary::dedup(&src, a.threshold)?;
            save_dictionary(&d, &a.out)?;
            writeln!(out, "dictionary size: {} (removed {})", d.len(), src.len() - d.len()).map_err(stdout_err)
        }
        Command::Jaccard(a) => cmd_jaccard(a, out),
        Command::LayerMatch(a) => cmd_layer_match(a, out),
        Command::CeScore(a) => {
            let s = similarity::ce_loss_score(&CeLossInputs {
                h_orig: a.h_orig,
                h_star: a.h_star,
                h_zero: a.h_zero,
            })?;
            writeln!(out, "{s:.6}").map_err(stdout_err)
        }
        Command::Synth(a) => cmd_synth(a, cli.seed, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = TrainConfig {
        tau: a.tau,
        l0: a.l0,
        batch_size: a.batch_size,
        dedup_cosine_threshold: a.dedup_threshold,
        max_dict_size: a.max_dict_size,
        relative_tau: a.relative_tau,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    if let Some(seed) = &a.seed_shard {
        trainer.seed(&read_shard(seed)?)?;
    }
    for path in &a.activations {
        if trainer.is_halted() {
            log::warn!("skipping {} after reaching max dictionary size", path.display());
            continue;
        }
        let shard = read_shard(path)?;
        trainer.push_shard(&shard).map_err(|e| match e {
            Error::DimensionMismatch { expected, found } => {
                Error::Validation(format!("{}: d_model {found} does not match {expected}", path.display()))
            }
            e => e,
        })?;
        log::info!("{}: dictionary size {}", path.display(), trainer.len());
    }
    let (dict, stats) = trainer.finish();
    save_dictionary(&dict, &a.out)?;
    writeln!(out, "dictionary size: {}", dict.len()).map_err(stdout_err)?;
    writeln!(out, "tokens seen: {}", stats.tokens_seen).map_err(stdout_err)?;
    writeln!(out, "mean loss: {:.6}", stats.mean_loss()).map_err(stdout_err)?;
    if stats.skipped_zero_norm > 0 {
        writeln!(out, "skipped near-zero: {}", stats.skipped_zero_norm).map_err(stdout_err)?;
    }
    if stats.halted {
        writeln!(out, "halted at max dictionary size").map_err(stdout_err)?;
    }
    Ok(())
}

fn cmd_decompose(a: &DecomposeArgs, out: &mut dyn Write) -> Result<()> {
    let shard = read_shard(&a.activations)?;
    let dict = load_dictionary(&a.dict)?;
    let rows = dictionary::decompose(&shard, &dict, a.l0).map_err(|e| match e {
        Error::DimensionMismatch { expected, found } => Error::Validation(format!(
            "{} has d_model {found}, dictionary {} has {expected}",
            a.activations.display(),
            a.dict.display()
        )),
        e => e,
    })?;
    let mut w = BufWriter::new(File::create(&a.out).map_err(io_err(&a.out))?);
    let mut total = 0.0;
    for r in &rows {
        total += r.loss;
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(&a.out))?;
    }
    w.flush().map_err(io_err(&a.out))?;
    let mean = if rows.is_empty() {
        0.0
    } else {
        total / rows.len() as f64
    };
    writeln!(out, "decomposed: {}\nmean loss: {mean:.6}", rows.len()).map_err(stdout_err)
}

fn label_set(path: &Path) -> Result<LabelSet> {
    Ok(LabelSet::from_dictionary(
        &load_dictionary(path)?,
        path.display().to_string(),
    ))
}

fn side(paths: &[PathBuf], union: bool) -> Result<LabelSet> {
    if paths.len() > 1 && !union {
        return Err(Error::Validation(
            "several dictionaries on one side need --union".into(),
        ));
    }
    let sets = paths.iter().map(|p| label_set(p)).collect::<Result<Vec<_>>>()?;
    union_labels(&sets)
}

fn cmd_jaccard(a: &JaccardArgs, out: &mut dyn Write) -> Result<()> {
    let sa = side(&a.dict_a, a.union)?;
    let sb = side(&a.dict_b, a.union)?;
    similarity::same_dataset_universe(&sa, &sb);
    log::info!("|A|={} |B|={} |A∩B|={}", sa.len(), sb.len(), sa.intersection_len(&sb));
    writeln!(out, "{:.6}", jaccard(&sa, &sb)).map_err(stdout_err)
}

fn read_manifest(path: &Path) -> Result<Vec<ModelLayers<LabelSet>>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: BTreeMap<String, Vec<PathBuf>> = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("manifest must map model ids to path lists: {e}")))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .into_iter()
        .map(|(model, paths)| {
            let layers = paths
                .iter()
                .map(|p| label_set(&base.join(p)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ModelLayers::new(model, layers))
        })
        .collect()
}

fn cmd_layer_match(a: &LayerMatchArgs, out: &mut dyn Write) -> Result<()> {
    let models = read_manifest(&a.dicts)?;
    if let Some(first) = models.first().and_then(|m| m.layers.first()) {
        for m in &models {
            for l in &m.layers {
                similarity::same_dataset_universe(first, l);
            }
        }
    }
    let report = layer_matching_accuracy(&models, jaccard)?;
    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for p in &report.per_pair {
            let f = dir.join(format!("{}__{}.csv", p.model_a, p.model_b));
            std::fs::write(&f, p.matrix.to_csv()).map_err(io_err(&f))?;
        }
        if let Some(mean) = report.mean_cross_model_matrix() {
            let f = dir.join("mean_cross_model.csv");
            std::fs::write(&f, mean.to_csv()).map_err(io_err(&f))?;
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Internal(e.to_string()))?;
    match &a.out {
        Some(p) => {
            std::fs::write(p, json + "\n").map_err(io_err(p))?;
            writeln!(
                out,
                "accuracy_literal: {:.6}\naccuracy_excluding_self: {:.6}",
                report.accuracy_literal, report.accuracy_excluding_self
            )
            .map_err(stdout_err)
        }
        None => writeln!(out, "{json}").map_err(stdout_err),
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        d: a.d,
        n_true_atoms: a.n_atoms,
        signals: a.signals,
        sparsity: a.sparsity,
        noise_sigma: a.noise,
        rng_seed: seed,
        isolated_first: a.isolated_first,
        dataset_id: a.dataset_id.clone(),
        model_id: a.model_id.clone(),
        layer_id: a.layer_id.clone(),
    };
    let data = generate(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let acts = a.out_dir.join("synth.acts");
    let truth = a.out_dir.join("truth.itda");
    crate::activation_store::write_shard(&data.shard, &acts)?;
    save_dictionary(&data.truth, &truth)?;
    writeln!(
        out,
        "wrote {} ({} signals)\nwrote {} ({} atoms)",
        acts.display(),
        data.shard.count(),
        truth.display(),
        data.truth.len()
    )
    .map_err(stdout_err)
}

struct NormStats {
    min: f64,
    max: f64,
    mean: f64,
}

fn norm_stats<'a>(rows: impl Iterator<Item = &'a [f32]>) -> Option<NormStats> {
    let norms: Vec<f64> = rows.map(|r| dot(r, r).sqrt()).collect();
    if norms.is_empty() {
        return None;
    }
    Some(NormStats {
        min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: norms.iter().sum::<f64>() / norms.len() as f64,
    })
}

fn write_norms(out: &mut dyn Write, stats: Option<NormStats>) -> std::io::Result<()> {
    match stats {
        Some(s) => writeln!(out, "norm min/mean/max: {:.6} / {:.6} / {:.6}", s.min, s.mean, s.max),
        None => writeln!(out, "norm min/mean/max: - / - / -"),
    }
}

/// Atom pairs scanned for the duplicate report.
const INSPECT_PAIR_LIMIT: usize = 4096;

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(path) = &a.activations {
        let shard = read_shard(path)?;
        writeln!(out, "kind: activations").map_err(stdout_err)?;
        writeln!(out, "model_id: {}\nlayer_id: {}", shard.model_id(), shard.layer_id()).map_err(stdout_err)?;
        writeln!(out, "d_model: {}\ncount: {}", shard.d_model(), shard.count()).map_err(stdout_err)?;
        let ids: std::collections::BTreeSet<&str> = shard.labels().iter().map(|l| l.dataset_id.as_str()).collect();
        writeln!(out, "dataset_ids: {:?}", ids).map_err(stdout_err)?;
        return write_norms(out, norm_stats(shard.rows().iter_rows())).map_err(stdout_err);
    }
    let path = a.dict.as_ref().expect("clap group");
    let file = DictionaryFile::read(path)?;
    let p = &file.provenance;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(stdout_err);
    w(out, "kind: dictionary".into())?;
    w(out, format!("model_id: {}\nlayer_id: {}", p.model_id, p.layer_id))?;
    w(
        out,
        format!("d_model: {}\ncount: {}", file.atoms.cols(), file.atoms.rows()),
    )?;
    w(
        out,
        format!("tau: {}\nl0: {}\nrelative_tau: {}", p.tau, p.l0, p.relative_tau),
    )?;
    w(out, format!("dedup_cosine_threshold: {}", p.dedup_cosine_threshold))?;
    w(out, format!("dataset_id: {}", p.dataset_id.as_deref().unwrap_or("-")))?;
    w(out, format!("trained_token_count: {}", p.trained_token_count))?;
    if let Some(c) = p.cropped_from {
        w(out, format!("cropped_from: {c}"))?;
    }
    write_norms(out, norm_stats(file.atoms.iter_rows())).map_err(stdout_err)?;

    let mut bad = Vec::new();
    for (j, row) in file.atoms.iter_rows().enumerate() {
        let n = dot(row, row).sqrt();
        if !((n - 1.0).abs() <= dictionary::LOAD_NORM_TOLERANCE) {
            bad.push((j, n));
        }
    }
    for (j, n) in &bad {
        w(out, format!("non-unit atom {j}: norm {n:.6}"))?;
    }

    let n = file.atoms.rows().min(INSPECT_PAIR_LIMIT);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let (ri, rj) = (file.atoms.row(i), file.atoms.row(j));
            let denom = (dot(ri, ri) * dot(rj, rj)).sqrt();
            if denom > 0.0 {
                pairs.push(((dot(ri, rj) / denom).abs(), j, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (c, i, j) in pairs.iter().take(5) {
        w(out, format!("top duplicate pair: {i} {j} |cos| {c:.6}"))?;
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} atoms are not unit norm", bad.len())))
    }
}
