use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mmt_core::corpus::toy::{toy_corpus, FeatureProfile};
use mmt_core::corpus::{load_features, read_lines, tokenize, ParallelCorpus, RawParallel, Vocab};
use mmt_core::diagnostics::{export_attention, pca_variance_report, DEFAULT_TOP_K};
use mmt_core::evaluation::{attention_sparsity_stats, corpus_bleu};
use mmt_core::fusion::FusionMode;
use mmt_core::numerics::Tensor;
use mmt_core::seq2seq::{translate, AttentionRecord, Checkpoint, Model, ModelConfig};
use mmt_core::training::train;

use crate::{CliError, RunConfig};

type CmdResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmt", version, about = "Multimodal machine translation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Translate a source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Explained-variance report of a feature file.
    AnalyzeEmbeddings(EmbeddingArgs),
    /// Export attention heatmaps and visual-attention sparsity.
    AnalyzeAttention(AttentionArgs),
    /// Write a synthetic parallel corpus with features.
    GenToy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub fusion_mode: Option<FusionMode>,
    #[arg(long)]
    pub gamma_attention: Option<f64>,
    #[arg(long)]
    pub gamma_loss: Option<f64>,
    /// Overrides the config's checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's metrics log path.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub feats: Option<PathBuf>,
    /// Defaults to the checkpoint's beam size.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub attention_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BleuArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    #[arg(long)]
    pub feats: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Profile {
    /// Features built from the nouns of each sentence.
    Content,
    /// One dominant direction of variance 100, unit variance elsewhere.
    Common,
    Isotropic,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    #[arg(long, default_value_t = 2048)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Profile::Content)]
    pub profile: Profile,
    #[arg(long, default_value = "train")]
    pub stem: String,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => cmd_translate(&a),
        Command::Bleu(a) => cmd_bleu(&a),
        Command::AnalyzeEmbeddings(a) => cmd_analyze_embeddings(&a),
        Command::AnalyzeAttention(a) => cmd_analyze_attention(&a),
        Command::GenToy(a) => cmd_gen_toy(&a),
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            fs::write(p, text).map_err(|e| io_err(p, e))
        }
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::data(e.to_string())),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::data(e.to_string()))
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.fusion_mode {
        cfg.fusion_mode = v;
    }
    if let Some(v) = a.gamma_attention {
        cfg.gamma_attention = v;
    }
    if let Some(v) = a.gamma_loss {
        cfg.gamma_loss = v;
    }
    if let Some(v) = &a.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &a.metrics {
        cfg.metrics_log = v.clone();
    }
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    best_dev_loss: f64,
    final_l_mle: f64,
    checkpoint: PathBuf,
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    apply_overrides(&mut cfg, a);
    cfg.validate()?;
    let fusion = cfg.fusion();
    if fusion.uses_visual() && cfg.feats_train.is_none() {
        return Err(CliError::usage(format!(
            "fusion mode {:?} needs feats_train",
            cfg.fusion_mode
        )));
    }
    if fusion.uses_visual() && cfg.src_dev.is_some() && cfg.feats_dev.is_none() {
        return Err(CliError::usage("a dev set for a visual model needs feats_dev"));
    }

    // Everything is read and checked before any training starts.
    let feats = |p: &Option<PathBuf>| if fusion.uses_visual() { p.clone() } else { None };
    let raw_train = RawParallel::load(&cfg.src_train, &cfg.tgt_train, feats(&cfg.feats_train).as_deref())?;
    let raw_dev = match (&cfg.src_dev, &cfg.tgt_dev) {
        (Some(s), Some(t)) => Some(RawParallel::load(s, t, feats(&cfg.feats_dev).as_deref())?),
        _ => None,
    };
    let src_vocab = Vocab::build(&raw_train.src, cfg.min_freq)?;
    let tgt_vocab = Vocab::build(&raw_train.tgt, cfg.min_freq)?;
    let train_corpus = ParallelCorpus::encode(&raw_train, &src_vocab, &tgt_vocab)?;
    let dev_corpus = raw_dev
        .as_ref()
        .map(|r| ParallelCorpus::encode(r, &src_vocab, &tgt_vocab))
        .transpose()?;

    let model_cfg = ModelConfig {
        src_vocab_size: src_vocab.len(),
        tgt_vocab_size: tgt_vocab.len(),
        embedding_size: cfg.embedding_size,
        hidden_size: cfg.hidden_size,
        feature_dim: train_corpus.feature_dim(),
        fusion,
    };
    let mut model = Model::new(model_cfg, cfg.seed)?;
    log::info!(
        "training on {} pairs ({} source, {} target types), fusion {:?}",
        train_corpus.len(),
        src_vocab.len(),
        tgt_vocab.len(),
        cfg.fusion_mode
    );

    let log_path = &cfg.metrics_log;
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut log = BufWriter::new(File::create(log_path).map_err(|e| io_err(log_path, e))?);
    let report = train(&mut model, &train_corpus, dev_corpus.as_ref(), &cfg.train(), Some(&mut log))?;
    log.flush().map_err(|e| io_err(log_path, e))?;

    let checkpoint = Checkpoint {
        src_vocab,
        tgt_vocab,
        model,
        decode: cfg.decode(),
        run_config: Some(serde_json::to_value(&cfg).map_err(|e| CliError::data(e.to_string()))?),
    };
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    checkpoint.save(&cfg.checkpoint)?;

    let summary = TrainSummary {
        epochs: report.epochs.len(),
        best_epoch: report.best_epoch,
        best_dev_loss: report.best_dev_loss,
        final_l_mle: report.epochs.last().map_or(f64::NAN, |m| m.l_mle),
        checkpoint: cfg.checkpoint.clone(),
    };
    write_text(None, &to_json(&summary)?)
}

struct Decoded {
    src_ids: Vec<Vec<usize>>,
    translations: Vec<mmt_core::seq2seq::Translation>,
    ckpt: Checkpoint,
}

fn decode_file(a: &DecodeArgs) -> Result<Decoded, CliError> {
    let ckpt = Checkpoint::load(&a.model)?;
    let lines = read_lines(&a.input)?;
    let needs = ckpt.model.needs_features();
    if needs && a.feats.is_none() {
        return Err(CliError::data(format!(
            "model fusion mode {:?} needs --feats",
            ckpt.model.config.fusion.mode
        )));
    }
    let feats: Option<Tensor> = match (&a.feats, needs) {
        (Some(p), true) => Some(load_features(p)?),
        _ => None,
    };
    if let Some(f) = &feats {
        if f.rows() != lines.len() {
            return Err(CliError::data(format!(
                "{} input lines vs {} feature rows",
                lines.len(),
                f.rows()
            )));
        }
        if Some(f.cols()) != ckpt.model.config.feature_dim {
            return Err(CliError::data(format!(
                "features have dimension {}, model expects {:?}",
                f.cols(),
                ckpt.model.config.feature_dim
            )));
        }
    }
    let mut opts = ckpt.decode;
    if let Some(b) = a.beam {
        if b == 0 {
            return Err(CliError::usage("--beam must be at least 1"));
        }
        opts.beam_size = b;
    }
    if a.max_len.is_some() {
        opts.max_len = a.max_len;
    }
    if let Some(al) = a.alpha {
        opts.alpha = al;
    }

    let src_ids: Vec<Vec<usize>> = lines.iter().map(|l| ckpt.src_vocab.encode(&tokenize(l))).collect();
    let translations = src_ids
        .iter()
        .enumerate()
        .map(|(i, src)| translate(&ckpt.model, src, feats.as_ref().map(|f| f.row(i)), &opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Decoded {
        src_ids,
        translations,
        ckpt,
    })
}

fn labels(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&i| vocab.token(i).unwrap_or("?").to_owned()).collect()
}

fn export_all(d: &Decoded, dir: &Path) -> Result<Vec<AttentionRecord>, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (i, (src, t)) in d.src_ids.iter().zip(&d.translations).enumerate() {
        export_attention(
            &t.attention,
            &labels(&d.ckpt.src_vocab, src),
            &labels(&d.ckpt.tgt_vocab, &t.ids),
            dir,
            &format!("sent{i}"),
        )?;
    }
    Ok(d.translations.iter().map(|t| t.attention.clone()).collect())
}

pub fn cmd_translate(a: &TranslateArgs) -> CmdResult {
    let d = decode_file(&a.decode)?;
    let mut out = String::new();
    for t in &d.translations {
        out.push_str(&d.ckpt.tgt_vocab.decode(&t.ids)?.join(" "));
        out.push('\n');
    }
    write_text(a.output.as_deref(), &out)?;
    if let Some(dir) = &a.attention_dir {
        export_all(&d, dir)?;
    }
    Ok(())
}

pub fn cmd_analyze_attention(a: &AttentionArgs) -> CmdResult {
    let d = decode_file(&a.decode)?;
    let records = export_all(&d, &a.out)?;
    if records.iter().all(|r| r.visual.is_some()) && !records.is_empty() {
        let stats = attention_sparsity_stats(&records)?;
        let json = to_json(&stats)?;
        write_text(Some(&a.out.join("sparsity.json")), &json)?;
        println!("{{\"mean_max\": {}, \"std_max\": {}}}", stats.mean_max, stats.std_max);
    }
    Ok(())
}

pub fn cmd_bleu(a: &BleuArgs) -> CmdResult {
    let tok = |p: &Path| -> Result<Vec<Vec<String>>, CliError> {
        Ok(read_lines(p)?.iter().map(|l| tokenize(l)).collect())
    };
    let report = corpus_bleu(&tok(&a.hyp)?, &tok(&a.reference)?)?;
    write_text(None, &to_json(&report)?)
}

pub fn cmd_analyze_embeddings(a: &EmbeddingArgs) -> CmdResult {
    let feats = load_features(&a.feats)?;
    let report = pca_variance_report(&feats, a.top_k)?;
    write_text(a.out.as_deref(), &report.to_json())
}

pub fn cmd_gen_toy(a: &ToyArgs) -> CmdResult {
    if a.dim == 0 || a.pairs == 0 {
        return Err(CliError::usage("--pairs and --dim must be positive"));
    }
    let profile = match a.profile {
        Profile::Content => FeatureProfile::Content { dim: a.dim },
        Profile::Common => FeatureProfile::common_direction(a.dim, 100.0),
        Profile::Isotropic => FeatureProfile::isotropic(a.dim),
    };
    toy_corpus(a.pairs, &profile, a.seed)?.write(&a.out, &a.stem)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn fusion_mode_flag_parses() {
        let cli = Cli::try_parse_from(["mmt", "train", "--config", "c.json", "--fusion-mode", "vs_regularizer"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.fusion_mode, Some(FusionMode::VsRegularizer));
        assert!(Cli::try_parse_from(["mmt", "train", "--config", "c.json", "--fusion-mode", "late"]).is_err());
    }
}
