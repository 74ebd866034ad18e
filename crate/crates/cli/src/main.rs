use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use ztrans_core::analysis::{
    bootstrap_significance, corpus_bleu, decode_all, decoded_token_accuracy, layer_spectral,
    off_target_ratio, pooled_layers, run_comparison, svcca_score, AnalysisOptions, ComparisonCase,
    ExportFormat, PairObservation, PlotData,
};
use ztrans_core::checkpoint::load_checkpoint;
use ztrans_core::corpus::{parse_tokens, LanguageSet, TaggedExample, FIRST_TAG};
use ztrans_core::io::{read_to_string, write_atomic};
use ztrans_core::model::{BeamOptions, Side};
use ztrans_core::train::{train, TrainRun};
use ztrans_core::{DatasetSplits, Error, ExperimentConfig, Model, ModelParams, Result, Variant};

#[derive(Parser)]
#[command(name = "ztrans", version, about = "Multilingual translation lab on synthetic languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full-size defaults.
    #[arg(long, conflicts_with = "config")]
    toy: bool,
    /// Override a config field, e.g. `--set train.seed=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if self.toy => ExperimentConfig::toy(),
            None => ExperimentConfig::default(),
        };
        let cfg = base.with_overrides(&self.set)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits and manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "vanilla", value_parser = parse_variant)]
        variant: Variant,
        /// Continue from the last saved state in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Translate one sentence of token ids per line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Target language name (en, l1, ...) or tag token id.
        #[arg(long)]
        tag: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 1.0)]
        length_penalty: f64,
    },
    /// Representation and translation analyses.
    #[command(group(
        ArgGroup::new("mode")
            .required(true)
            .args(["case", "svcca", "offtarget", "correlate", "significance"])
    ))]
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file (CSV or JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ExportFormat,

    /// Per-layer SVCCA for comparison case i..v.
    #[arg(long, value_parser = parse_case)]
    case: Option<ComparisonCase>,
    /// Spectral embedding of the layer-by-layer SVCCA similarity.
    #[arg(long)]
    svcca: bool,
    /// Decode the zero-shot test set and report off-target ratios.
    #[arg(long)]
    offtarget: bool,
    /// Correlate representation scores with BLEU gains over `--baseline`.
    #[arg(long)]
    correlate: bool,
    /// Paired bootstrap between `--scores-a` and `--scores-b`.
    #[arg(long)]
    significance: bool,

    #[arg(long, default_value = "en")]
    lang_a: String,
    #[arg(long, default_value = "l1")]
    lang_b: String,
    /// Comma-separated 1-based layers, or `all`.
    #[arg(long, default_value = "all")]
    layers: String,
    /// encoder or decoder; defaults to the case's own side.
    #[arg(long)]
    side: Option<String>,
    #[arg(long)]
    max_sentences: Option<usize>,
    /// Include the tag position when pooling encoder states.
    #[arg(long)]
    include_tag: bool,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    scores_a: Option<PathBuf>,
    #[arg(long)]
    scores_b: Option<PathBuf>,
    /// Also write per-sentence decoded token accuracies (off-target mode).
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_case(s: &str) -> std::result::Result<ComparisonCase, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ExportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigMismatch(_) => 2,
        Error::Io { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::GenData { config, out, force } => ("gen-data", gen_data(&config, &out, force)),
        Command::Train {
            config,
            data,
            out,
            variant,
            resume,
        } => ("train", train_cmd(&config, &data, &out, variant, resume)),
        Command::Translate {
            checkpoint,
            input,
            output,
            tag,
            beam,
            max_len,
            length_penalty,
        } => (
            "translate",
            translate(
                &checkpoint,
                &input,
                &output,
                &tag,
                BeamOptions {
                    beam_size: beam,
                    max_len,
                    length_penalty,
                },
            ),
        ),
        Command::Analyze(args) => ("analyze", analyze(&args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ztrans {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(config: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg = config.resolve()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidInput(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    let splits = DatasetSplits::build(&cfg.corpus)?;
    let manifest = splits.save(out)?;
    for (split, counts) in &manifest.pair_counts {
        let total: usize = counts.values().sum();
        println!("{split}: {total} examples in {} directions", counts.len());
    }
    Ok(())
}

fn train_cmd(config: &ConfigArgs, data_dir: &Path, out: &Path, variant: Variant, resume: bool) -> Result<()> {
    let cfg = config.resolve()?;
    let data = DatasetSplits::load(data_dir)?;
    let model = cfg.model_for(&data, Some(variant))?;
    let record = serde_json::json!({
        "variant": variant,
        "model": model,
        "train": cfg.train,
    });
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    write_atomic(&out.join("run.json"), text.as_bytes())?;
    let outcome = train(
        TrainRun {
            model: &model,
            train: &cfg.train,
            data: &data,
            out_dir: Some(out),
            resume,
        },
        &mut |r| {
            eprintln!(
                "step {:>6}  lr {:.3e}  ce {:.4}  ctr {:.4}  valid {:.4}",
                r.step, r.lr, r.loss_ce, r.loss_ctr, r.valid_ce
            )
        },
    )?;
    println!(
        "best checkpoint at step {} (valid ce {:.4}, initial {:.4})",
        outcome.best_step, outcome.best_valid_ce, outcome.initial_valid_ce
    );
    Ok(())
}

/// Languages implied by a checkpoint's vocabulary layout.
fn languages_of(params: &ModelParams) -> LanguageSet {
    let c = params.config();
    let t = c.num_languages;
    let concepts = (c.vocab_size.saturating_sub(FIRST_TAG as usize + t) / t.max(1)) as u32;
    LanguageSet::standard(t, concepts)
}

fn resolve_tag(languages: &LanguageSet, tag: &str) -> Result<u32> {
    if let Ok(id) = tag.parse::<u32>() {
        return Ok(id);
    }
    languages
        .by_name(tag)
        .and_then(|l| languages.tag_of(l))
        .ok_or_else(|| Error::InvalidInput(format!("unknown target language {tag:?}")))
}

fn translate(checkpoint: &Path, input: &Path, output: &Path, tag: &str, beam: BeamOptions) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let tag = resolve_tag(&languages_of(&params), tag)?;
    params.config().language_of_tag(tag)?;
    let model = Model::new(&params);
    let text = read_to_string(input)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = parse_tokens(line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", input.display(), i + 1)))?;
        if !tokens.is_empty() {
            let hyp = model.beam_search(&tokens, tag, beam)?;
            let words: Vec<String> = hyp.iter().map(u32::to_string).collect();
            out.push_str(&words.join(" "));
        }
        out.push('\n');
    }
    write_atomic(output, out.as_bytes())
}

fn language_index(languages: &LanguageSet, name: &str) -> Result<usize> {
    languages
        .by_name(name)
        .or_else(|| name.parse().ok().filter(|&i: &usize| i < languages.len()))
        .ok_or_else(|| Error::InvalidInput(format!("unknown language {name:?}")))
}

fn parse_layers(list: &str) -> Result<Vec<usize>> {
    if list == "all" {
        return Ok(Vec::new());
    }
    list.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad layer list {list:?}")))
        })
        .collect()
}

fn parse_side(s: &str) -> Result<Side> {
    match s {
        "encoder" => Ok(Side::Encoder),
        "decoder" => Ok(Side::Decoder),
        _ => Err(Error::InvalidInput(format!("side must be encoder or decoder, got {s:?}"))),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidInput(format!("this analysis needs --{flag}")))
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{}:{}: not a number", path.display(), i + 1)))
        })
        .collect()
}

fn write_rows(path: &Path, format: ExportFormat, header: &[&str], rows: &[Vec<String>], json: serde_json::Value) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => {
            let mut s = header.join(",");
            s.push('\n');
            for r in rows {
                s.push_str(&r.join(","));
                s.push('\n');
            }
            s
        }
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&json)?;
            s.push('\n');
            s
        }
    };
    write_atomic(path, text.as_bytes())
}

fn load_pair(args: &AnalyzeArgs) -> Result<(ModelParams, DatasetSplits)> {
    let params = load_checkpoint(require(&args.checkpoint, "checkpoint")?)?;
    let data = DatasetSplits::load(require(&args.data, "data")?)?;
    let c = params.config();
    if c.num_languages != data.languages.len() || c.vocab_size < data.languages.vocab_size() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint ({}) does not fit the dataset ({} languages, vocab {})",
            c.describe(),
            data.languages.len(),
            data.languages.vocab_size()
        )));
    }
    Ok((params, data))
}

struct DirectionEval {
    name: String,
    target: String,
    hyps: Vec<Vec<u32>>,
    refs: Vec<Vec<u32>>,
    off_target: f64,
    bleu: f64,
}

fn evaluate_zero_shot(model: &Model<'_>, data: &DatasetSplits, beam: BeamOptions, limit: Option<usize>) -> Result<Vec<DirectionEval>> {
    let mut out = Vec::new();
    let directions: Vec<_> = DatasetSplits::pair_counts(&data.test_zero_shot).into_keys().collect();
    for d in directions {
        let mut set: Vec<&TaggedExample> = data.test_direction(d.src, d.tgt);
        if let Some(n) = limit {
            set.truncate(n);
        }
        let hyps = decode_all(model, &set, beam)?;
        let refs: Vec<Vec<u32>> = set.iter().map(|e| e.target.clone()).collect();
        let name = |l: usize| data.languages.get(l).map(|x| x.name.clone()).unwrap_or_default();
        out.push(DirectionEval {
            name: format!("{}-{}", name(d.src), name(d.tgt)),
            target: name(d.tgt),
            off_target: off_target_ratio(&data.languages, &hyps, d.tgt),
            bleu: corpus_bleu(&hyps, &refs, 4)?.score,
            hyps,
            refs,
        });
    }
    Ok(out)
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let opts = AnalysisOptions {
        exclude_tag: !args.include_tag && cfg.analysis.exclude_tag,
        svcca: cfg.analysis.svcca,
        max_sentences: args.max_sentences,
        ..AnalysisOptions::default()
    };

    if args.significance {
        let a = read_scores(require(&args.scores_a, "scores-a")?)?;
        let b = read_scores(require(&args.scores_b, "scores-b")?)?;
        let p = bootstrap_significance(
            &a,
            &b,
            cfg.analysis.bootstrap_iterations,
            cfg.analysis.bootstrap_ratio,
            cfg.analysis.bootstrap_seed,
        )?;
        println!("p = {p} (fraction of resamples where b >= a; a is significantly better if p < 0.05)");
        return write_rows(
            &args.out,
            args.format,
            &["p_value", "iterations", "ratio", "seed", "direction"],
            &[vec![
                p.to_string(),
                cfg.analysis.bootstrap_iterations.to_string(),
                cfg.analysis.bootstrap_ratio.to_string(),
                cfg.analysis.bootstrap_seed.to_string(),
                "b>=a".into(),
            ]],
            serde_json::json!({
                "p_value": p,
                "iterations": cfg.analysis.bootstrap_iterations,
                "ratio": cfg.analysis.bootstrap_ratio,
                "seed": cfg.analysis.bootstrap_seed,
                "direction": "fraction of resamples where mean(b) >= mean(a)",
            }),
        );
    }

    let (params, data) = load_pair(args)?;
    let model = Model::new(&params);
    let lang_a = language_index(&data.languages, &args.lang_a)?;
    let lang_b = language_index(&data.languages, &args.lang_b)?;

    if let Some(case) = args.case {
        let side = match &args.side {
            Some(s) => parse_side(s)?,
            None => case.default_side(),
        };
        let rows = run_comparison(&model, &data, case, lang_a, lang_b, side, &parse_layers(&args.layers)?, &opts)?;
        for r in &rows {
            println!(
                "case {} {:?} layer {}: mean {:.4} (dims {}/{}/{})",
                case, side, r.layer, r.report.mean, r.report.dims_a, r.report.dims_b, r.report.dims_cca
            );
        }
        return ztrans_core::analysis::export_plot_data(&PlotData::LayerScores { rows }, &args.out, args.format);
    }

    if args.svcca {
        let mut set = data.test_direction(lang_a, lang_b);
        if let Some(n) = args.max_sentences {
            set.truncate(n);
        }
        let mut sets = Vec::new();
        let mut labels = Vec::new();
        for side in [Side::Encoder, Side::Decoder] {
            for p in pooled_layers(&model, &set, side, opts.exclude_tag, opts.batch)? {
                labels.push(format!("{}{}", if side == Side::Encoder { "enc" } else { "dec" }, p.layer));
                sets.push(p.vectors);
            }
        }
        let embedding = layer_spectral(&sets, cfg.analysis.spectral_dims, opts.svcca)?;
        if embedding.disconnected || embedding.degenerate {
            eprintln!(
                "warning: similarity graph is {}",
                if embedding.disconnected { "disconnected" } else { "degenerate" }
            );
        }
        for (l, i) in labels.iter().zip(0..) {
            println!("{l}: {:?}", embedding.coords.row(i));
        }
        return ztrans_core::analysis::export_plot_data(&PlotData::Spectral { labels, embedding }, &args.out, args.format);
    }

    if args.offtarget {
        let evals = evaluate_zero_shot(&model, &data, cfg.analysis.beam, args.max_sentences)?;
        let mut rows = Vec::new();
        let mut json = Vec::new();
        let mut sentence_scores = String::new();
        let (mut off_sum, mut n) = (0.0, 0usize);
        for e in &evals {
            let acc = decoded_token_accuracy(&e.hyps, &e.refs);
            println!("{}: off-target {:.4}  bleu {:.2}  token accuracy {:.4}", e.name, e.off_target, e.bleu, acc);
            rows.push(vec![
                e.name.clone(),
                e.hyps.len().to_string(),
                e.off_target.to_string(),
                e.bleu.to_string(),
                acc.to_string(),
            ]);
            json.push(serde_json::json!({
                "direction": e.name, "sentences": e.hyps.len(), "off_target": e.off_target,
                "bleu": e.bleu, "token_accuracy": acc,
            }));
            off_sum += e.off_target * e.hyps.len() as f64;
            n += e.hyps.len();
            for (h, r) in e.hyps.iter().zip(&e.refs) {
                sentence_scores.push_str(&decoded_token_accuracy(std::slice::from_ref(h), std::slice::from_ref(r)).to_string());
                sentence_scores.push('\n');
            }
        }
        println!("overall off-target ratio {:.4}", off_sum / n.max(1) as f64);
        if let Some(path) = &args.scores_out {
            write_atomic(path, sentence_scores.as_bytes())?;
        }
        return write_rows(
            &args.out,
            args.format,
            &["direction", "sentences", "off_target", "bleu", "token_accuracy"],
            &rows,
            serde_json::Value::Array(json),
        );
    }

    // correlate
    let baseline = load_checkpoint(require(&args.baseline, "baseline")?)?;
    let base_model = Model::new(&baseline);
    let ours = evaluate_zero_shot(&model, &data, cfg.analysis.beam, args.max_sentences)?;
    let theirs = evaluate_zero_shot(&base_model, &data, cfg.analysis.beam, args.max_sentences)?;
    let mut identity = Vec::new();
    for l in 0..data.languages.len() {
        let mut set = data.test_direction(l, l);
        if let Some(n) = args.max_sentences {
            set.truncate(n);
        }
        identity.push(
            pooled_layers(&model, &set, Side::Encoder, opts.exclude_tag, opts.batch)?
                .pop()
                .expect("at least one encoder layer")
                .vectors,
        );
    }
    let directions: Vec<_> = DatasetSplits::pair_counts(&data.test_zero_shot).into_keys().collect();
    let mut observations = Vec::new();
    for ((d, a), b) in directions.iter().zip(&ours).zip(&theirs) {
        let score = svcca_score(&identity[d.src], &identity[d.tgt], opts.svcca)?.mean;
        observations.push(PairObservation {
            target: a.target.clone(),
            score,
            bleu_gain: a.bleu - b.bleu,
        });
    }
    let report = ztrans_core::analysis::correlation_report(&observations);
    let mut rows = Vec::new();
    for r in &report {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        println!("target {}: n {} r {} p {}{}", r.target, r.n, fmt(r.r), fmt(r.p_value), if r.skipped { " (skipped)" } else { "" });
        rows.push(vec![r.target.clone(), r.n.to_string(), fmt(r.r), fmt(r.p_value), r.skipped.to_string()]);
    }
    write_rows(
        &args.out,
        args.format,
        &["target", "n", "r", "p_value", "skipped"],
        &rows,
        serde_json::to_value(&report)?,
    )
}
